# ThermoShape - Otimização de Forma
# Funcional CCBM, gradiente de forma distribuído, campo de Riesz H¹, busca linear e reconstrução

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import structlog
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .thermoshape_errors import (
    FieldMismatchError,
    InversionError,
    MeshError,
    SolverError,
    ThermoShapeError,
)
from .thermoshape_fem import (
    BoundaryProfile,
    ComplexNodalField,
    PhysicalCoefficients,
    SparseComplexSystem,
    assemble_boundary_mass,
    assemble_ccbm_state,
    assemble_mass,
    cell_gradients,
    gamma_u_data,
    p1_local_stiffness,
    scatter_local,
    solve_adjoint,
    solve_ccbm_state,
)
from .thermoshape_mesh import (
    DEFAULT_CLEARANCE,
    REMESH_QUALITY_THRESHOLD,
    BoundaryTag,
    DeformationField,
    Mesh,
    Region,
    circle_polygon,
    deform,
    hausdorff_distance,
    interface_polygons,
    remesh,
)
from .thermoshape_monitoring import get_collector

logger = structlog.get_logger("ThermoShape.ShapeOpt")

FIT_DEGREE = 11
FIT_GRID = 4001


class RhoMode(str, Enum):
    """Escolha do peso de volume"""
    FIXED = "fixed"
    BALANCING = "balancing"


class TerminationReason(str, Enum):
    """Motivo de parada da reconstrução"""
    STAGNATION = "stagnation"
    T_MIN = "t_min"
    K_MAX = "K_max"
    ERROR = "error"


class OptConfig(BaseModel):
    """
    Parâmetros do laço de descida.

    Com normalize_cost (padrão) o custo é dividido por J_ref, o valor
    penalizado do chute inicial, antes da busca linear; o primeiro passo
    tentado fica t0 = s·(J/J_ref)/√b. Com normalize_cost=False vale a regra
    literal t0 = s·J/√b. noise_seed, quando dado, substitui a semente do
    ruído da medição usada pela reconstrução.
    """

    model_config = ConfigDict(extra="forbid")

    c_b: float = Field(default=0.5, gt=0.0, le=1.0)
    s: float = Field(default=0.5, gt=0.0)
    K_max: int = Field(default=200, ge=1)
    rho_mode: RhoMode = RhoMode.FIXED
    rho: float = Field(default=1e-5, ge=0.0)
    beta: float = 2.0
    t_min: float = Field(default=1e-8, gt=0.0)
    remesh_every: int = Field(default=10, ge=1)
    quality_threshold: float = Field(default=REMESH_QUALITY_THRESHOLD, ge=0.0)
    stagnation_tol: float = Field(default=1e-6, ge=0.0)
    stagnation_window: int = Field(default=5, ge=1)
    clearance: float = Field(default=DEFAULT_CLEARANCE, ge=0.0)
    normalize_cost: bool = True
    snapshot_every: int = Field(default=10, ge=1)
    noise_seed: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _check_beta(self) -> "OptConfig":
        if self.rho_mode == RhoMode.BALANCING and self.beta <= 1.0:
            raise ValueError(f"β deve ser maior que 1 no modo de balanceamento: {self.beta}")
        return self


@dataclass(frozen=True)
class ObjectiveReport:
    """Valores do funcional CCBM e diagnósticos"""
    J: float
    J_LS: float
    vol: float
    rho: float
    combined: float

    @property
    def penalized(self) -> float:
        return self.J + self.rho * self.vol

    def with_rho(self, rho: float) -> "ObjectiveReport":
        return replace(self, rho=rho)


@dataclass(frozen=True, eq=False)
class ShapeGradient:
    """Funcional linear dJ[θ] = Σ_i g_i·θ_i sobre campos de deformação"""
    vector: np.ndarray
    mesh_id: str

    def __call__(self, theta: Union[DeformationField, np.ndarray]) -> float:
        vectors = theta.vectors if isinstance(theta, DeformationField) else np.asarray(theta)
        if isinstance(theta, DeformationField) and theta.mesh_id != self.mesh_id:
            raise FieldMismatchError("Campo de deformação de outra topologia")
        return float(np.sum(self.vector * vectors))

    def __add__(self, other: "ShapeGradient") -> "ShapeGradient":
        if other.mesh_id != self.mesh_id:
            raise FieldMismatchError("Gradientes de topologias diferentes")
        return ShapeGradient(self.vector + other.vector, self.mesh_id)


def objective(mesh: Mesh, u: ComplexNodalField, h: BoundaryProfile, rho: float) -> ObjectiveReport:
    """J = ½∫(uⁱ)², J_LS = ½∫_Γu (uʳ - h)², vol = |Ω₀|"""
    u.check(mesh)
    mass = assemble_mass(mesh)
    J = 0.5 * float(u.imag @ (mass @ u.imag))
    robin_mass, _ = assemble_boundary_mass(mesh, BoundaryTag.GAMMA_U)
    misfit = np.zeros(mesh.n_vertices)
    nodes = mesh.gamma_u_vertices
    misfit[nodes] = u.real[nodes] - gamma_u_data(mesh, h)[nodes]
    J_LS = 0.5 * float(misfit @ (robin_mass @ misfit))
    vol = mesh.tumor_volume
    return ObjectiveReport(J=J, J_LS=J_LS, vol=vol, rho=float(rho), combined=J + J_LS)


def _p1_cell_integrals(mesh: Mesh, f: np.ndarray, g: np.ndarray) -> np.ndarray:
    """∫_K f g para campos P1 (valores nodais por célula)"""
    fl, gl = f[mesh.cells], g[mesh.cells]
    return mesh.cell_areas / 12.0 * (np.sum(fl * gl, axis=1) + fl.sum(axis=1) * gl.sum(axis=1))


def shape_gradient(mesh: Mesh, coeffs: PhysicalCoefficients, u: ComplexNodalField,
                   p: ComplexNodalField) -> ShapeGradient:
    """Gradiente de forma distribuído discreto em forma de volume"""
    u.check(mesh)
    p.check(mesh)
    sigma, k, Q = coeffs.cell_values(mesh)
    area = mesh.cell_areas
    grads = mesh.barycentric_gradients
    a = cell_gradients(mesh, u.values)            # ∇u
    b = np.conj(cell_gradients(mesh, p.values))   # ∇p̄
    p_bar = np.conj(p.values)

    # termos multiplicados por div θ
    scalar = (0.5 * _p1_cell_integrals(mesh, u.imag, u.imag)
              - sigma * area * np.imag(np.sum(a * b, axis=1))
              - k * np.imag(_p1_cell_integrals(mesh, u.values, p_bar))
              + Q * area / 3.0 * np.imag(p_bar[mesh.cells].sum(axis=1)))

    # termo σ (Dθ + Dθᵀ)∇u·∇p̄
    grad_dot_a = np.einsum("cid,cd->ci", grads, a)
    grad_dot_b = np.einsum("cid,cd->ci", grads, b)
    cross = (sigma * area)[:, None, None] * np.imag(
        b[:, None, :] * grad_dot_a[:, :, None] + a[:, None, :] * grad_dot_b[:, :, None])

    local = scalar[:, None, None] * grads + cross
    vector = np.zeros((mesh.n_vertices, 2))
    np.add.at(vector, mesh.cells.ravel(), local.reshape(-1, 2))
    return ShapeGradient(vector, mesh.topology_id)


def volume_gradient(mesh: Mesh, rho: float) -> ShapeGradient:
    """ρ ∫_{Ω₀} div θ por soma de divergências constantes por célula"""
    if rho < 0:
        raise ValueError(f"ρ deve ser não negativo: {rho}")
    tumor = mesh.cell_region == Region.TUMOR
    local = (rho * mesh.cell_areas[tumor])[:, None, None] * mesh.barycentric_gradients[tumor]
    vector = np.zeros((mesh.n_vertices, 2))
    np.add.at(vector, mesh.cells[tumor].ravel(), local.reshape(-1, 2))
    return ShapeGradient(vector, mesh.topology_id)


def balance_rho(J: float, vol: float, beta: float) -> float:
    """ρ = (β - 1) J / vol"""
    if vol <= 0:
        raise ValueError(f"Volume da inclusão deve ser positivo: {vol}")
    if beta <= 1:
        raise ValueError(f"β deve ser maior que 1: {beta}")
    return (beta - 1.0) * J / vol


class RieszMap:
    """Produto b(θ, φ) = c_b (H¹ em Ω) + (1 - c_b) (gradiente tangencial em ∂Ω₀)"""

    def __init__(self, mesh: Mesh, c_b: float):
        if not 0.0 < c_b <= 1.0:
            raise ValueError(f"c_b deve estar em (0, 1]: {c_b}")
        self.mesh = mesh
        self.c_b = c_b
        n = mesh.n_vertices
        self.h1_matrix = (scatter_local(mesh.cells, p1_local_stiffness(mesh), n)
                          + assemble_mass(mesh))
        self.tangential_matrix = self._tangential(mesh)
        self.matrix = c_b * self.h1_matrix + (1.0 - c_b) * self.tangential_matrix
        self.free = np.flatnonzero(~mesh.boundary_mask)
        try:
            self._factor = spla.splu(self.matrix[self.free][:, self.free].tocsc())
        except RuntimeError as e:
            raise SolverError(f"Sistema de Riesz singular: {str(e)}") from e

    @staticmethod
    def _tangential(mesh: Mesh) -> sp.csr_matrix:
        edges = mesh.interface_edges
        if len(edges) == 0:
            return sp.csr_matrix((mesh.n_vertices, mesh.n_vertices))
        lengths = np.linalg.norm(mesh.vertices[edges[:, 1]] - mesh.vertices[edges[:, 0]], axis=1)
        local = np.array([[1.0, -1.0], [-1.0, 1.0]])[None] / lengths[:, None, None]
        return scatter_local(edges, local, mesh.n_vertices)

    def representative(self, gradient: ShapeGradient) -> DeformationField:
        """Resolve b(θ, φ) = -dJ[φ] com θ = 0 em ∂Ω"""
        if gradient.mesh_id != self.mesh.topology_id:
            raise FieldMismatchError("Gradiente de outra topologia")
        vectors = np.zeros((self.mesh.n_vertices, 2))
        with get_collector().time_solve("riesz"):
            vectors[self.free] = self._factor.solve(-gradient.vector[self.free])
        return DeformationField(vectors, self.mesh.topology_id)

    def inner(self, theta: DeformationField, phi: DeformationField) -> float:
        return float(np.sum(theta.vectors * (self.matrix @ phi.vectors)))

    def interface_term(self, theta: DeformationField) -> float:
        """Contribuição (1 - c_b) do termo tangencial em b(θ, θ)"""
        return (1.0 - self.c_b) * float(np.sum(theta.vectors * (self.tangential_matrix @ theta.vectors)))


def riesz_descent_field(mesh: Mesh, gradient: ShapeGradient, c_b: float) -> DeformationField:
    return RieszMap(mesh, c_b).representative(gradient)


@dataclass
class LineSearchResult:
    """Resultado da busca linear com retrocesso"""
    t: float
    initial_t: float
    accepted: bool
    mesh: Optional[Mesh] = None
    value: float = math.nan
    trials: int = 0


def initial_step(j_current: float, s: float, b_norm2: float) -> float:
    """t = s J / √b(θ, θ)"""
    return s * j_current / math.sqrt(b_norm2)


def line_search(mesh: Mesh, theta: DeformationField, J_current: float, s: float,
                evaluate: Callable[[Mesh], float], b_norm2: float,
                t_min: float = 1e-8, clearance: Optional[float] = None) -> LineSearchResult:
    """Retrocesso por bisseção até haver decréscimo sem inversão de células"""
    if s <= 0:
        raise ValueError(f"s deve ser positivo: {s}")
    collector = get_collector()
    if b_norm2 <= 0.0 or not np.any(theta.vectors):
        return LineSearchResult(t=0.0, initial_t=0.0, accepted=False)

    t = initial_step(J_current, s, b_norm2)
    t0, trials = t, 0
    while t >= t_min:
        trials += 1
        try:
            candidate = deform(mesh, theta, t, clearance)
        except InversionError:
            collector.record_trial("inverted")
            t *= 0.5
            continue
        value = evaluate(candidate)
        if value < J_current:
            collector.record_trial("accepted")
            return LineSearchResult(t=t, initial_t=t0, accepted=True, mesh=candidate,
                                    value=value, trials=trials)
        collector.record_trial("no_decrease")
        t *= 0.5
    logger.info("busca linear esgotada", t=t, initial_t=t0, trials=trials)
    return LineSearchResult(t=t, initial_t=t0, accepted=False, trials=trials)


@dataclass
class StateSolution:
    """Estado CCBM resolvido em uma malha, com o sistema fatorado"""
    mesh: Mesh
    system: SparseComplexSystem
    u: ComplexNodalField


class CCBMProblem:
    """Liga coeficientes e perfil medido aos solvers de estado e adjunto"""

    def __init__(self, coeffs: PhysicalCoefficients, h: BoundaryProfile):
        self.coeffs = coeffs
        self.h = h

    def solve(self, mesh: Mesh) -> StateSolution:
        system = assemble_ccbm_state(mesh, self.coeffs, self.h)
        return StateSolution(mesh, system, solve_ccbm_state(system))

    def adjoint(self, state: StateSolution) -> ComplexNodalField:
        return solve_adjoint(state.mesh, self.coeffs, state.u, state.system)

    def objective(self, state: StateSolution, rho: float) -> ObjectiveReport:
        return objective(state.mesh, state.u, self.h, rho)

    def penalized(self, mesh: Mesh, rho: float) -> float:
        return self.objective(self.solve(mesh), rho).penalized

    def gradient(self, state: StateSolution, p: ComplexNodalField, rho: float) -> ShapeGradient:
        return shape_gradient(state.mesh, self.coeffs, state.u, p) + volume_gradient(state.mesh, rho)


@dataclass
class TraceEntry:
    """Uma iteração registrada da reconstrução"""
    iteration: int
    mesh: Mesh
    report: ObjectiveReport
    t: float = 0.0
    initial_t: float = 0.0
    grad_norm: float = 0.0
    value_before: float = math.nan
    value_after: float = math.nan
    remeshed: bool = False


@dataclass
class ReconstructionTrace:
    """Histórico append-only da reconstrução"""
    entries: List[TraceEntry] = field(default_factory=list)
    termination: Optional[TerminationReason] = None
    message: str = ""

    def append(self, entry: TraceEntry):
        self.entries.append(entry)

    @property
    def final(self) -> TraceEntry:
        return self.entries[-1]

    @property
    def selected(self) -> TraceEntry:
        """Iterado de menor custo combinado J + J_LS (o mais antigo em caso de empate)"""
        return min(self.entries, key=lambda e: e.report.combined)

    @property
    def from_history(self) -> bool:
        """True quando a forma escolhida não é o último iterado"""
        return self.selected is not self.final

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{
            "iter": e.iteration,
            "J": e.report.J,
            "J_LS": e.report.J_LS,
            "vol": e.report.vol,
            "rho": e.report.rho,
            "t": e.t,
            "initial_t": e.initial_t,
            "grad_norm": e.grad_norm,
            "combined": e.report.combined,
            "penalized": e.report.penalized,
            "remeshed": int(e.remeshed),
        } for e in self.entries])

    def summary(self, exact_polygons: Optional[Sequence[np.ndarray]] = None) -> Dict[str, Any]:
        final = self.final
        summary: Dict[str, Any] = {
            "termination": self.termination.value if self.termination else None,
            "message": self.message,
            "iterations": final.iteration,
            "final_J": final.report.J,
            "final_J_LS": final.report.J_LS,
            "final_combined": final.report.combined,
            "final_penalized": final.report.penalized,
            "final_vol": final.report.vol,
            "final_rho": final.report.rho,
            "remesh_count": sum(e.remeshed for e in self.entries),
            "selected_iteration": self.selected.iteration,
            "selected_from_history": self.from_history,
            "selected_J": self.selected.report.J,
            "selected_combined": self.selected.report.combined,
        }
        if exact_polygons is not None:
            exact = list(exact_polygons)
            summary["hausdorff"] = hausdorff_distance(interface_polygons(self.selected.mesh), exact)
            summary["final_hausdorff"] = hausdorff_distance(interface_polygons(final.mesh), exact)
        return summary


def _stagnated(trace: ReconstructionTrace, cfg: OptConfig) -> bool:
    if len(trace.entries) <= cfg.stagnation_window:
        return False
    old = trace.entries[-cfg.stagnation_window - 1].report.combined
    new = trace.final.report.combined
    return (old - new) < cfg.stagnation_tol * abs(old)


def reconstruct(mesh0: Mesh, coeffs: PhysicalCoefficients, h: BoundaryProfile, cfg: OptConfig,
                callback: Optional[Callable[[TraceEntry], None]] = None) -> ReconstructionTrace:
    """
    Laço de descida: estado → adjunto → gradiente → Riesz → busca linear → deformação.

    O histórico guarda a malha de cada iterado; trace.selected é a forma de
    menor J + J_LS e trace.from_history indica se ela difere do último iterado.
    """
    problem = CCBMProblem(coeffs, h)
    collector = get_collector()
    trace = ReconstructionTrace()
    balancing = cfg.rho_mode == RhoMode.BALANCING

    state = problem.solve(mesh0)
    report = problem.objective(state, 0.0)
    rho = balance_rho(report.J, report.vol, cfg.beta) if balancing else cfg.rho
    report = report.with_rho(rho)
    trace.append(TraceEntry(iteration=0, mesh=mesh0, report=report))
    j_ref = report.penalized if cfg.normalize_cost and report.penalized > 0 else 1.0
    logger.info("reconstrução iniciada", J=report.J, vol=report.vol, rho=rho, c_b=cfg.c_b)

    accepted = 0
    try:
        for iteration in range(1, cfg.K_max + 1):
            if balancing:
                rho = balance_rho(report.J, report.vol, cfg.beta)
                logger.debug("ρ balanceado", rho=rho)
            report = report.with_rho(rho)
            mesh = state.mesh

            p = problem.adjoint(state)
            gradient = problem.gradient(state, p, rho)
            riesz = RieszMap(mesh, cfg.c_b)
            theta = riesz.representative(gradient)
            b_norm2 = riesz.inner(theta, theta)

            raw_values: Dict[str, float] = {}

            def evaluate(candidate: Mesh) -> float:
                raw_values[candidate.mesh_id] = problem.penalized(candidate, rho)
                return raw_values[candidate.mesh_id] / j_ref

            result = line_search(mesh, theta, report.penalized / j_ref, cfg.s, evaluate,
                                 b_norm2, cfg.t_min, cfg.clearance)
            if not result.accepted:
                trace.termination = TerminationReason.T_MIN
                trace.message = f"passo abaixo de t_min na iteração {iteration}"
                break

            accepted += 1
            new_mesh, remeshed = result.mesh, False
            if accepted % cfg.remesh_every == 0 or new_mesh.min_quality < cfg.quality_threshold:
                try:
                    new_mesh, remeshed = remesh(new_mesh), True
                    collector.record_remesh()
                except MeshError as e:
                    # remalhamento periódico pode ser adiado; o exigido por qualidade não
                    if new_mesh.min_quality < cfg.quality_threshold:
                        raise
                    logger.warning(f"Remalhamento adiado: {str(e)}", iteration=iteration)

            value_before = report.penalized
            state = problem.solve(new_mesh)
            report = problem.objective(state, rho)
            entry = TraceEntry(iteration=iteration, mesh=new_mesh, report=report, t=result.t,
                               initial_t=result.initial_t, grad_norm=math.sqrt(b_norm2), value_before=value_before,
                               value_after=raw_values[result.mesh.mesh_id], remeshed=remeshed)
            trace.append(entry)
            collector.record_iteration(report.penalized, rho)
            logger.info("iteração aceita", iteration=iteration, J=report.J, J_LS=report.J_LS,
                        vol=report.vol, rho=rho, t=result.t, remeshed=remeshed)
            if callback is not None:
                callback(entry)

            if _stagnated(trace, cfg):
                trace.termination = TerminationReason.STAGNATION
                trace.message = f"decréscimo relativo < {cfg.stagnation_tol} em {cfg.stagnation_window} iterações"
                break
        else:
            trace.termination = TerminationReason.K_MAX
            trace.message = f"K_max={cfg.K_max} atingido"
    except ThermoShapeError as e:
        logger.error(f"Erro na reconstrução: {str(e)}", iteration=trace.final.iteration)
        trace.termination = TerminationReason.ERROR
        trace.message = str(e)

    logger.info("reconstrução concluída", termination=trace.termination.value,
                iterations=trace.final.iteration, J=trace.final.report.J,
                selected_iteration=trace.selected.iteration)
    return trace


@dataclass(frozen=True)
class PeakFit:
    """Pico do ajuste polinomial do perfil"""
    position: float
    height: float
    sharpness: float
    flat: bool


def fit_profile_peak(h: BoundaryProfile, degree: int = FIT_DEGREE) -> PeakFit:
    """Ajuste polinomial por mínimos quadrados e arg-max (menor posição em empates)"""
    if len(h.arc) < degree + 1:
        raise ValueError(f"Ajuste de grau {degree} requer ao menos {degree + 1} amostras, recebidas {len(h.arc)}")
    poly = np.polynomial.Polynomial.fit(h.arc, h.values, degree)
    grid = np.linspace(h.arc[0], h.arc[-1], FIT_GRID)
    fitted = poly(grid)
    if np.ptp(fitted) <= 1e-9 * max(1.0, float(np.abs(fitted).max())):
        middle = 0.5 * (h.arc[0] + h.arc[-1])
        logger.warning("perfil plano; pico indefinido, usando o centro de Γu", position=middle)
        return PeakFit(position=middle, height=float(poly(middle)), sharpness=0.0, flat=True)
    index = int(np.argmax(fitted))
    position = float(grid[index])
    return PeakFit(position=position, height=float(fitted[index]),
                   sharpness=float(-poly.deriv(2)(position)), flat=False)


def init_guess_from_profile(h: BoundaryProfile, depth: float, r0: float,
                            top: float = 0.03, n_vertices: int = 64) -> np.ndarray:
    """Círculo de raio r0 sob o pico do perfil ajustado, à profundidade dada"""
    peak = fit_profile_peak(h)
    center = (peak.position, top - depth)
    logger.info("chute inicial", center_x=center[0], center_y=center[1], r0=r0)
    return circle_polygon(center, r0, n_vertices)
