# ThermoShape - Sensibilidade à Malha
# Derivada material do estado discreto, oráculo de diferenças finitas e varreduras de estabilidade

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog

from .thermoshape_errors import InversionError
from .thermoshape_fem import (
    BoundaryProfile,
    ComplexNodalField,
    PhysicalCoefficients,
    SparseComplexSystem,
    assemble_ccbm_operator,
    assemble_ccbm_state,
    cell_gradients,
    h1_norm,
    h1_seminorm,
    solve_ccbm_state,
)
from .thermoshape_mesh import DeformationField, Mesh, deform, edge_matrix_rate
from .thermoshape_shapeopt import CCBMProblem, RieszMap, shape_gradient, volume_gradient

logger = structlog.get_logger("ThermoShape.Sensitivity")

DEFAULT_T_LIST = (1e-4, 1e-5, 1e-6)
DEFAULT_EPS1 = 1e-3

SENSITIVITY_COLUMNS = ["mesh_level", "h_max", "min_aK", "max_hK_over_aK",
                       "field_kind", "t", "fd_error", "grad_norm"]


@dataclass(frozen=True, eq=False)
class MeshVelocity(DeformationField):
    """Velocidade nodal Ẋ_h da malha; smooth_flag indica campo analítico W^{1,∞}"""
    smooth_flag: bool = True

    @classmethod
    def from_field(cls, field_: DeformationField, smooth_flag: bool) -> "MeshVelocity":
        return cls(field_.vectors, field_.mesh_id, smooth_flag)

    @classmethod
    def sample(cls, mesh: Mesh, func: Callable[[np.ndarray], np.ndarray],
               smooth_flag: bool = True) -> "MeshVelocity":
        return cls.from_field(DeformationField.from_function(mesh, func), smooth_flag)


@dataclass(frozen=True)
class BumpField:
    """Campo C¹ de suporte compacto d·(1 - |x - c|²/R²)²"""
    center: Tuple[float, float]
    radius: float
    direction: Tuple[float, float]

    def __call__(self, points: np.ndarray) -> np.ndarray:
        s2 = np.sum((np.atleast_2d(points) - np.asarray(self.center)) ** 2, axis=1) / self.radius ** 2
        weight = np.where(s2 < 1.0, (1.0 - s2) ** 2, 0.0)
        return weight[:, None] * np.asarray(self.direction, dtype=float)[None, :]

    @property
    def gradient_sup(self) -> float:
        """‖∇Ẋ‖_∞ exato (máximo em |x - c| = R/√3)"""
        return float(np.linalg.norm(self.direction)) * 8.0 / (3.0 * math.sqrt(3.0) * self.radius)


def bump_field(center: Sequence[float], radius: float,
               direction: Sequence[float] = (1.0, 0.0)) -> BumpField:
    if radius <= 0:
        raise ValueError(f"Raio do suporte deve ser positivo: {radius}")
    return BumpField(tuple(center), float(radius), tuple(direction))


def rough_field(mesh: Mesh, rng: np.random.Generator) -> MeshVelocity:
    """Ruído nodal iid uniforme em [-1, 1]², norma sup unitária, nulo em ∂Ω"""
    vectors = rng.uniform(-1.0, 1.0, size=(mesh.n_vertices, 2))
    vectors[mesh.boundary_mask] = 0.0
    peak = np.linalg.norm(vectors, axis=1).max()
    if peak > 0:
        vectors /= peak
    return MeshVelocity(vectors, mesh.topology_id, smooth_flag=False)


def material_derivative(mesh: Mesh, coeffs: PhysicalCoefficients, u: ComplexNodalField,
                        v: DeformationField,
                        system: Optional[SparseComplexSystem] = None) -> ComplexNodalField:
    """u̇_h: a(u̇_h, ψ) = Σ_K ∫ σ∇u·S_K∇ψ̄ - ∫(σ∇u·∇ψ̄ + k u ψ̄ - Q ψ̄) div Ẋ_h, u̇_h = 0 em Γb"""
    u.check(mesh)
    v.check_admissible(mesh)
    if system is None or system.mesh_id != mesh.mesh_id:
        system = assemble_ccbm_operator(mesh, coeffs)

    sigma, k, Q = coeffs.cell_values(mesh)
    area = mesh.cell_areas
    grads = mesh.barycentric_gradients
    a = cell_gradients(mesh, u.values)
    # D = Σ_i ẋ_i ⊗ ∇λ_i, tal que Ė_K E_K⁻¹ = D
    D = np.einsum("cid,cie->cde", v.vectors[mesh.cells], grads)
    S = D + np.transpose(D, (0, 2, 1))
    divergence = np.trace(D, axis1=1, axis2=2)

    local_u = u.values[mesh.cells]
    mass_u = (area / 12.0)[:, None] * (local_u + local_u.sum(axis=1, keepdims=True))
    flux = np.einsum("cd,cid->ci", a, grads)
    shear = np.einsum("cid,cde,ce->ci", grads, S, a)
    local = ((sigma * area)[:, None] * shear
             - divergence[:, None] * ((sigma * area)[:, None] * flux + k[:, None] * mass_u
                                      - (Q * area / 3.0)[:, None]))
    rhs = np.zeros(mesh.n_vertices, dtype=complex)
    np.add.at(rhs, mesh.cells.ravel(), local.ravel())

    udot_free = system.solve_free(rhs[system.dof_map], "material")
    return ComplexNodalField(system.expand(udot_free, with_dirichlet=False), mesh.mesh_id)


@dataclass(frozen=True)
class FiniteDifferenceEntry:
    """Erro H¹ do quociente de diferenças em um passo t (inverted = não calculado)"""
    t: float
    error: float
    inverted: bool = False


def fd_oracle(mesh: Mesh, coeffs: PhysicalCoefficients, h: BoundaryProfile, v: DeformationField,
              t_list: Sequence[float] = DEFAULT_T_LIST, workers: int = 1,
              u: Optional[ComplexNodalField] = None,
              udot: Optional[ComplexNodalField] = None) -> List[FiniteDifferenceEntry]:
    """‖(ũ_h(t) - u_h)/t - u̇_h‖_{H¹} com identificação nodal (mesma conectividade)"""
    if u is None:
        system = assemble_ccbm_state(mesh, coeffs, h)
        u = solve_ccbm_state(system)
        udot = material_derivative(mesh, coeffs, u, v, system)
    elif udot is None:
        udot = material_derivative(mesh, coeffs, u, v)

    def one(t: float) -> FiniteDifferenceEntry:
        try:
            moved = deform(mesh, v, t)
        except InversionError:
            logger.warning("passo do oráculo inverte células", t=t)
            return FiniteDifferenceEntry(t=t, error=math.nan, inverted=True)
        u_t = solve_ccbm_state(assemble_ccbm_state(moved, coeffs, h))
        quotient = (u_t.values - u.values) / t - udot.values
        return FiniteDifferenceEntry(t=t, error=h1_norm(mesh, quotient))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, t_list))
    return [one(t) for t in t_list]


def fd_order(entries: Sequence[FiniteDifferenceEntry]) -> float:
    """Inclinação log-log do erro do oráculo em t (entradas válidas e positivas)"""
    valid = [(e.t, e.error) for e in entries if not e.inverted and e.error > 0]
    if len(valid) < 2:
        return math.nan
    t, err = np.log(np.array(valid)).T
    return float(np.polyfit(t, err, 1)[0])


@dataclass
class SensitivityReport:
    """Norma de ∇u̇_h, curva do oráculo e estatísticas da malha"""
    grad_norm: float
    fd_errors: List[FiniteDifferenceEntry] = field(default_factory=list)
    mesh_stats: Dict[str, float] = field(default_factory=dict)
    mesh_level: int = 0
    field_kind: str = "smooth"

    def __post_init__(self):
        ts = [e.t for e in self.fd_errors]
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ValueError("Valores de t do oráculo devem ser estritamente decrescentes")

    def rows(self) -> List[Dict[str, float]]:
        base = {
            "mesh_level": self.mesh_level,
            "h_max": self.mesh_stats.get("h_max", math.nan),
            "min_aK": self.mesh_stats.get("min_aK", math.nan),
            "max_hK_over_aK": self.mesh_stats.get("max_hK_over_aK", math.nan),
            "field_kind": self.field_kind,
            "grad_norm": self.grad_norm,
        }
        if not self.fd_errors:
            return [{**base, "t": math.nan, "fd_error": math.nan}]
        return [{**base, "t": e.t, "fd_error": e.error} for e in self.fd_errors]


def mesh_statistics(mesh: Mesh) -> Dict[str, float]:
    return {
        "h_max": float(mesh.h_K.max()),
        "min_aK": float(mesh.a_K.min()),
        "max_hK_over_aK": float(np.max(mesh.h_K / mesh.a_K)),
    }


def sensitivity_report(mesh: Mesh, coeffs: PhysicalCoefficients, h: BoundaryProfile,
                       v: MeshVelocity, t_list: Sequence[float] = DEFAULT_T_LIST,
                       mesh_level: int = 0, workers: int = 1) -> SensitivityReport:
    system = assemble_ccbm_state(mesh, coeffs, h)
    u = solve_ccbm_state(system)
    udot = material_derivative(mesh, coeffs, u, v, system)
    entries = fd_oracle(mesh, coeffs, h, v, sorted(t_list, reverse=True), workers, u, udot)
    kind = "smooth" if v.smooth_flag else "rough"
    report = SensitivityReport(grad_norm=h1_seminorm(mesh, udot.values), fd_errors=entries,
                               mesh_stats=mesh_statistics(mesh), mesh_level=mesh_level,
                               field_kind=kind)
    logger.info("sensibilidade calculada", level=mesh_level, kind=kind,
                grad_norm=report.grad_norm, n_cells=mesh.n_cells)
    return report


def stability_sweep(meshes: Sequence[Mesh], coeffs: PhysicalCoefficients, h: BoundaryProfile,
                    v_smooth: Callable[[np.ndarray], np.ndarray], seed: int = 0,
                    t_list: Sequence[float] = DEFAULT_T_LIST,
                    workers: int = 1) -> List[SensitivityReport]:
    """Campo suave e campo rugoso em cada nível de malha, na ordem (nível, suave, rugoso)"""
    rng = np.random.default_rng(seed)
    reports = []
    for level, mesh in enumerate(meshes):
        smooth = MeshVelocity.sample(mesh, v_smooth, smooth_flag=True)
        rough = rough_field(mesh, rng)
        reports.append(sensitivity_report(mesh, coeffs, h, smooth, t_list, level, workers))
        reports.append(sensitivity_report(mesh, coeffs, h, rough, t_list, level, workers))
    return reports


def reports_frame(reports: Sequence[SensitivityReport]) -> pd.DataFrame:
    return pd.DataFrame([row for r in reports for row in r.rows()], columns=SENSITIVITY_COLUMNS)


def grad_norm_spread(reports: Sequence[SensitivityReport], field_kind: str) -> float:
    """max/min de ‖∇u̇_h‖ entre níveis para um tipo de campo"""
    values = [r.grad_norm for r in reports if r.field_kind == field_kind]
    return max(values) / min(values)


def edge_rate_bound_ratio(mesh: Mesh, bump: BumpField) -> float:
    """max_K ‖Ė_K‖₂ / (√2 h_K ‖∇Ẋ‖_∞); não excede 1 para campos suaves"""
    velocity = DeformationField(bump(mesh.vertices), mesh.topology_id)
    rates = np.linalg.norm(edge_matrix_rate(mesh, velocity), ord=2, axis=(1, 2))
    return float(np.max(rates / (math.sqrt(2.0) * mesh.h_K * bump.gradient_sup)))


def stable_step_check(report: SensitivityReport, t: float, eps1: float = DEFAULT_EPS1) -> bool:
    """t·‖∇u̇_h‖ ≤ ε₁"""
    return t * report.grad_norm <= eps1


def _vector_h1_seminorm(mesh: Mesh, field_: DeformationField) -> float:
    return math.hypot(h1_seminorm(mesh, field_.vectors[:, 0]), h1_seminorm(mesh, field_.vectors[:, 1]))


def cb_effect_sweep(meshes: Sequence[Mesh], coeffs: PhysicalCoefficients,
                    profiles: Dict[float, BoundaryProfile], c_b_values: Sequence[float],
                    rho: float = 0.0) -> pd.DataFrame:
    """Para cada (malha, c_b, δ): ‖∇θ‖ do campo de Riesz e ‖∇u̇_h‖ com Ẋ = θ"""
    rows = []
    for level, mesh in enumerate(meshes):
        for delta, h in sorted(profiles.items()):
            problem = CCBMProblem(coeffs, h)
            state = problem.solve(mesh)
            p = problem.adjoint(state)
            gradient = shape_gradient(mesh, coeffs, state.u, p) + volume_gradient(mesh, rho)
            for c_b in c_b_values:
                theta = RieszMap(mesh, c_b).representative(gradient)
                udot = material_derivative(mesh, coeffs, state.u, theta, state.system)
                rows.append({
                    "mesh_level": level,
                    "n_cells": mesh.n_cells,
                    "c_b": c_b,
                    "delta": delta,
                    "grad_theta": _vector_h1_seminorm(mesh, theta),
                    "material_norm": h1_seminorm(mesh, udot.values),
                })
                logger.debug("efeito de c_b", level=level, c_b=c_b, delta=delta)
    return pd.DataFrame(rows)


def cb_spread(frame: pd.DataFrame, metric: str = "material_norm") -> pd.DataFrame:
    """Espalhamento max/min entre níveis de malha por (c_b, δ)"""
    grouped = frame.groupby(["c_b", "delta"])[metric]
    return (grouped.max() / grouped.min()).rename("spread").reset_index()
