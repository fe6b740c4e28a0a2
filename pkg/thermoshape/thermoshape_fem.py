# ThermoShape - Elementos Finitos
# Montagem P1 complexa (estado CCBM e adjunto), solver direto real P1/P2 e normas

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import structlog

from .thermoshape_errors import FieldMismatchError, MeshError, SolverError
from .thermoshape_mesh import BoundaryTag, Mesh
from .thermoshape_monitoring import get_collector

logger = structlog.get_logger("ThermoShape.FEM")

RESIDUAL_TOLERANCE = 1e-10

# Regra de 6 pontos exata até grau 4 (pesos normalizados pela área)
_QA, _QB = 0.445948490915965, 0.091576213509771
_WA, _WB = 0.223381589678011, 0.109951743655322
TRIANGLE_QUADRATURE = (
    np.array([
        [_QA, _QA, 1 - 2 * _QA], [_QA, 1 - 2 * _QA, _QA], [1 - 2 * _QA, _QA, _QA],
        [_QB, _QB, 1 - 2 * _QB], [_QB, 1 - 2 * _QB, _QB], [1 - 2 * _QB, _QB, _QB],
    ]),
    np.array([_WA, _WA, _WA, _WB, _WB, _WB]),
)

# Gauss-Legendre de 3 pontos em [0, 1]
EDGE_QUADRATURE = (
    np.array([0.5 - 0.5 * math.sqrt(0.6), 0.5, 0.5 + 0.5 * math.sqrt(0.6)]),
    np.array([5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0]),
)


@dataclass(frozen=True)
class PhysicalCoefficients:
    """Coeficientes constantes por região (índice 0 = tumor, 1 = tecido sadio)"""
    sigma: Tuple[float, float]
    perfusion: Tuple[float, float]
    source: Tuple[float, float]
    alpha: float
    T_a: float
    T_b: float

    def __post_init__(self):
        object.__setattr__(self, "sigma", tuple(float(v) for v in self.sigma))
        object.__setattr__(self, "perfusion", tuple(float(v) for v in self.perfusion))
        object.__setattr__(self, "source", tuple(float(v) for v in self.source))
        values = [*self.sigma, *self.perfusion, *self.source, self.alpha, self.T_a, self.T_b]
        if len(self.sigma) != 2 or len(self.perfusion) != 2 or len(self.source) != 2:
            raise ValueError("sigma, perfusion e source devem ter dois valores (tumor, sadio)")
        if not all(math.isfinite(v) for v in values):
            raise ValueError("Coeficientes físicos devem ser finitos")
        if min(self.sigma) <= 0 or min(self.perfusion) <= 0 or self.alpha <= 0:
            raise ValueError(f"σ, k e α devem ser positivos: σ={self.sigma}, k={self.perfusion}, α={self.alpha}")

    @classmethod
    def from_pennes(cls, sigma: Tuple[float, float], perfusion: Tuple[float, float],
                    metabolic: Tuple[float, float], alpha: float, T_a: float,
                    T_b: float) -> "PhysicalCoefficients":
        """Converte -∇·σ∇u + k(u - T_b) = q para a forma -∇·σ∇u + k u = Q com Q = q + k T_b"""
        source = tuple(q + k * T_b for q, k in zip(metabolic, perfusion))
        return cls(sigma=sigma, perfusion=perfusion, source=source, alpha=alpha, T_a=T_a, T_b=T_b)

    @classmethod
    def tissue_defaults(cls) -> "PhysicalCoefficients":
        """Parâmetros fisiológicos de referência (mama com tumor)"""
        return cls.from_pennes(sigma=(0.75, 0.5), perfusion=(7992.4, 1998.1),
                               metabolic=(42000.0, 4200.0), alpha=10.0, T_a=25.0, T_b=37.0)

    def cell_values(self, mesh: Mesh) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """σ, k e Q por célula"""
        region = mesh.cell_region
        return (np.asarray(self.sigma)[region], np.asarray(self.perfusion)[region],
                np.asarray(self.source)[region])

    def scaled_data(self, factor: float) -> "PhysicalCoefficients":
        """Escala os dados (Q, T_a, T_b) mantendo os coeficientes do operador"""
        return replace(self, source=tuple(factor * q for q in self.source),
                       T_a=factor * self.T_a, T_b=factor * self.T_b)

    @property
    def is_homogeneous(self) -> bool:
        return self.sigma[0] == self.sigma[1] and self.perfusion[0] == self.perfusion[1]


@dataclass(frozen=True, eq=False)
class ComplexNodalField:
    """Valor complexo por vértice (u = uʳ + i uⁱ ou adjunto p)"""
    values: np.ndarray
    mesh_id: str

    def __post_init__(self):
        values = np.array(self.values, dtype=complex).reshape(-1)
        if not np.all(np.isfinite(values)):
            raise ValueError("Campo nodal com valores não finitos")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def real(self) -> np.ndarray:
        return self.values.real

    @property
    def imag(self) -> np.ndarray:
        return self.values.imag

    def check(self, mesh: Mesh):
        if self.mesh_id != mesh.mesh_id or len(self.values) != mesh.n_vertices:
            raise FieldMismatchError("Campo nodal não pertence à malha informada")


@dataclass(frozen=True, eq=False)
class BoundaryProfile:
    """Perfil de temperatura medido em Γu: (posição de arco, valor)"""
    arc: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        arc = np.array(self.arc, dtype=float).reshape(-1)
        values = np.array(self.values, dtype=float).reshape(-1)
        if len(arc) != len(values) or len(arc) < 2:
            raise ValueError("Perfil requer ao menos duas amostras pareadas")
        if not (np.all(np.isfinite(arc)) and np.all(np.isfinite(values))):
            raise ValueError("Perfil com amostras não finitas")
        if np.any(np.diff(arc) <= 0):
            raise ValueError("Posições de arco do perfil devem ser estritamente crescentes")
        arc.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "arc", arc)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_mesh_trace(cls, mesh: Mesh, nodal_values: np.ndarray) -> "BoundaryProfile":
        nodes = mesh.gamma_u_vertices
        return cls(mesh.arc_positions(nodes), np.asarray(nodal_values)[nodes].real)

    @property
    def samples(self) -> np.ndarray:
        return np.column_stack([self.arc, self.values])

    def with_values(self, values: np.ndarray) -> "BoundaryProfile":
        return BoundaryProfile(self.arc, values)

    def interpolate(self, positions: np.ndarray) -> np.ndarray:
        """Interpolação linear em comprimento de arco"""
        return np.interp(positions, self.arc, self.values)

    def check_covers(self, mesh: Mesh):
        span = mesh.arc_positions(mesh.gamma_u_vertices)
        tol = 1e-9 * max(span[-1], 1.0)
        if self.arc[0] > span[0] + tol or self.arc[-1] < span[-1] - tol:
            raise ValueError(f"Perfil [{self.arc[0]:.4g}, {self.arc[-1]:.4g}] não cobre Γu "
                             f"[{span[0]:.4g}, {span[-1]:.4g}]")


@dataclass(frozen=True)
class P1Operators:
    """Matrizes e vetores P1 reais de uma malha"""
    stiffness: sp.csr_matrix      # ∫ σ ∇φ_j·∇φ_i
    reaction: sp.csr_matrix       # ∫ k φ_j φ_i
    mass: sp.csr_matrix           # ∫ φ_j φ_i
    robin_mass: sp.csr_matrix     # ∫_Γu φ_j φ_i
    robin_load: np.ndarray        # ∫_Γu φ_i
    source_load: np.ndarray       # ∫ Q φ_i


@dataclass(eq=False)
class SparseComplexSystem:
    """Sistema nos graus de liberdade livres (Γb eliminado simetricamente)"""
    matrix: sp.csc_matrix
    rhs: np.ndarray
    dof_map: np.ndarray
    dirichlet_nodes: np.ndarray
    dirichlet_values: np.ndarray
    n_vertices: int
    mesh_id: str
    operators: Optional[P1Operators] = None
    full_matrix: Optional[sp.csr_matrix] = None
    _factor: Optional[spla.SuperLU] = field(default=None, init=False, repr=False)

    def factorize(self) -> spla.SuperLU:
        """Fatoração LU esparsa reaproveitada por estado, adjunto e derivada material"""
        if self._factor is None:
            try:
                self._factor = spla.splu(self.matrix.tocsc())
            except RuntimeError as e:
                logger.error(f"Erro na fatoração: {str(e)}")
                raise SolverError(f"Fatoração singular: {str(e)}") from e
        return self._factor

    def solve_free(self, rhs: np.ndarray, kind: str = "state") -> np.ndarray:
        with get_collector().time_solve(kind):
            return self.factorize().solve(np.asarray(rhs, dtype=self.matrix.dtype))

    def solve_conjugate(self, rhs: np.ndarray, kind: str = "adjoint") -> np.ndarray:
        """Resolve conj(A) x = rhs com a mesma fatoração"""
        return np.conj(self.solve_free(np.conj(rhs), kind))

    def expand(self, free_values: np.ndarray, with_dirichlet: bool = True) -> np.ndarray:
        full = np.zeros(self.n_vertices, dtype=complex)
        full[self.dof_map] = free_values
        if with_dirichlet:
            full[self.dirichlet_nodes] = self.dirichlet_values
        return full

    def condition_estimate(self) -> float:
        """Estimativa de cond_1(A) por onenormest"""
        try:
            lu = self.factorize()
            n = self.matrix.shape[0]
            inverse = spla.LinearOperator(
                (n, n), dtype=complex,
                matvec=lambda x: lu.solve(np.asarray(x, dtype=complex)),
                rmatvec=lambda x: lu.solve(np.asarray(x, dtype=complex), trans="H"),
            )
            return float(spla.onenormest(self.matrix) * spla.onenormest(inverse))
        except (SolverError, ValueError, RuntimeError) as e:
            logger.warning(f"Estimativa de condicionamento indisponível: {str(e)}")
            return float("nan")


# Montagem

def scatter_local(connectivity: np.ndarray, local: np.ndarray, n: int) -> sp.csr_matrix:
    """Soma matrizes locais (ne, k, k) na matriz global esparsa"""
    rows = np.broadcast_to(connectivity[:, :, None], local.shape)
    cols = np.broadcast_to(connectivity[:, None, :], local.shape)
    return sp.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()


def _scatter_vector(connectivity: np.ndarray, local: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(connectivity.ravel(), weights=local.ravel(), minlength=n)


_P1_REFERENCE_MASS = (np.ones((3, 3)) + np.eye(3)) / 12.0
_EDGE_MASS = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0


def p1_local_stiffness(mesh: Mesh) -> np.ndarray:
    """∫_K ∇λ_j·∇λ_i por célula, shape (nc, 3, 3)"""
    grads = mesh.barycentric_gradients
    return mesh.cell_areas[:, None, None] * np.einsum("cid,cjd->cij", grads, grads)


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    local = mesh.cell_areas[:, None, None] * _P1_REFERENCE_MASS
    return scatter_local(mesh.cells, local, mesh.n_vertices)


def assemble_boundary_mass(mesh: Mesh, tag: BoundaryTag) -> Tuple[sp.csr_matrix, np.ndarray]:
    """Massa P1 exata sobre as arestas de fronteira com o rótulo dado"""
    edges = mesh.edges_with_tag(tag)
    lengths = np.linalg.norm(mesh.vertices[edges[:, 1]] - mesh.vertices[edges[:, 0]], axis=1)
    return scatter_local(edges, lengths[:, None, None] * _EDGE_MASS, mesh.n_vertices), lengths


def assemble_p1(mesh: Mesh, coeffs: PhysicalCoefficients) -> P1Operators:
    """Monta rigidez(σ), massa(k), massa, massa de Robin em Γu e cargas"""
    n = mesh.n_vertices
    sigma, k, Q = coeffs.cell_values(mesh)
    area = mesh.cell_areas
    stiffness_local = sigma[:, None, None] * p1_local_stiffness(mesh)
    mass_local = area[:, None, None] * _P1_REFERENCE_MASS

    gamma_u = mesh.edges_with_tag(BoundaryTag.GAMMA_U)
    if len(gamma_u) == 0:
        raise MeshError("Malha sem arestas rotuladas como Γu")
    robin_mass, lengths = assemble_boundary_mass(mesh, BoundaryTag.GAMMA_U)

    return P1Operators(
        stiffness=scatter_local(mesh.cells, stiffness_local, n),
        reaction=scatter_local(mesh.cells, k[:, None, None] * mass_local, n),
        mass=scatter_local(mesh.cells, mass_local, n),
        robin_mass=robin_mass,
        robin_load=_scatter_vector(gamma_u, np.repeat(lengths / 2.0, 2), n),
        source_load=_scatter_vector(mesh.cells, np.repeat(Q * area / 3.0, 3), n),
    )


def _eliminate_dirichlet(mesh: Mesh, matrix: sp.csr_matrix, rhs: np.ndarray,
                         dirichlet_values: np.ndarray, operators: Optional[P1Operators]
                         ) -> SparseComplexSystem:
    dirichlet = mesh.vertices_with_tag(BoundaryTag.GAMMA_B)
    free = np.setdiff1d(np.arange(mesh.n_vertices), dirichlet)
    rows = matrix[free]
    reduced_rhs = rhs[free] - rows[:, dirichlet] @ dirichlet_values
    return SparseComplexSystem(
        matrix=rows[:, free].tocsc(),
        rhs=reduced_rhs,
        dof_map=free,
        dirichlet_nodes=dirichlet,
        dirichlet_values=np.asarray(dirichlet_values, dtype=float),
        n_vertices=mesh.n_vertices,
        mesh_id=mesh.mesh_id,
        operators=operators,
        full_matrix=matrix,
    )


def ccbm_matrix(operators: P1Operators, coeffs: PhysicalCoefficients) -> sp.csr_matrix:
    """A = K(σ) + M(k) + (α + i) M_Γu"""
    return (operators.stiffness + operators.reaction).astype(complex) \
        + (coeffs.alpha + 1j) * operators.robin_mass


def gamma_u_data(mesh: Mesh, h: BoundaryProfile) -> np.ndarray:
    """Interpola o perfil h nos vértices de Γu (zero nos demais)"""
    h.check_covers(mesh)
    nodes = mesh.gamma_u_vertices
    values = np.zeros(mesh.n_vertices)
    values[nodes] = h.interpolate(mesh.arc_positions(nodes))
    return values


def assemble_ccbm_state(mesh: Mesh, coeffs: PhysicalCoefficients,
                        h: BoundaryProfile) -> SparseComplexSystem:
    """Sistema do estado CCBM com acoplamento de Robin complexo em Γu"""
    operators = assemble_p1(mesh, coeffs)
    h_nodes = gamma_u_data(mesh, h)
    matrix = ccbm_matrix(operators, coeffs)
    rhs = (operators.source_load + coeffs.alpha * coeffs.T_a * operators.robin_load
           + 1j * (operators.robin_mass @ h_nodes))
    n_dirichlet = len(mesh.vertices_with_tag(BoundaryTag.GAMMA_B))
    return _eliminate_dirichlet(mesh, matrix, rhs, np.full(n_dirichlet, coeffs.T_b), operators)


def assemble_ccbm_operator(mesh: Mesh, coeffs: PhysicalCoefficients) -> SparseComplexSystem:
    """Matriz CCBM com Γb homogêneo, para adjunto e derivada material"""
    operators = assemble_p1(mesh, coeffs)
    n_dirichlet = len(mesh.vertices_with_tag(BoundaryTag.GAMMA_B))
    return _eliminate_dirichlet(mesh, ccbm_matrix(operators, coeffs),
                                operators.source_load.astype(complex), np.zeros(n_dirichlet), operators)


def _relative_residual(matrix, solution: np.ndarray, rhs: np.ndarray) -> float:
    residual = np.linalg.norm(matrix @ solution - rhs)
    scale = np.linalg.norm(rhs)
    return float(residual / scale) if scale > 0 else float(residual)


def _check_residual(system: SparseComplexSystem, matrix, solution: np.ndarray,
                    rhs: np.ndarray, label: str):
    residual = _relative_residual(matrix, solution, rhs)
    if not np.isfinite(residual) or residual > RESIDUAL_TOLERANCE:
        condition = system.condition_estimate()
        logger.error(f"Resíduo do {label} acima da tolerância", residual=residual, cond=condition)
        raise SolverError(f"Solve do {label} sem convergência", residual, condition)


def solve_ccbm_state(system: SparseComplexSystem) -> ComplexNodalField:
    """Resolve A u = b por LU esparsa complexa e verifica o resíduo"""
    u_free = system.solve_free(system.rhs, "state")
    _check_residual(system, system.matrix, u_free, system.rhs, "estado")
    return ComplexNodalField(system.expand(u_free), system.mesh_id)


def solve_adjoint(mesh: Mesh, coeffs: PhysicalCoefficients, u: ComplexNodalField,
                  system: Optional[SparseComplexSystem] = None) -> ComplexNodalField:
    """Adjunto: a_adj(p, v) = ∫ uⁱ v̄ com acoplamento (α - i), p = 0 em Γb"""
    u.check(mesh)
    if system is None or system.mesh_id != mesh.mesh_id:
        system = assemble_ccbm_operator(mesh, coeffs)
    operators = system.operators or assemble_p1(mesh, coeffs)
    rhs = (operators.mass @ u.imag)[system.dof_map]
    p_free = system.solve_conjugate(rhs, "adjoint")
    _check_residual(system, system.matrix.conj(), p_free, rhs, "adjunto")
    return ComplexNodalField(system.expand(p_free, with_dirichlet=False), mesh.mesh_id)


def ccbm_form(system: SparseComplexSystem, phi: np.ndarray, psi: np.ndarray) -> complex:
    """a(φ, ψ) = ψᴴ A φ sobre vetores nodais completos"""
    return complex(np.conj(psi) @ (system.full_matrix @ phi))


def adjoint_form(system: SparseComplexSystem, phi: np.ndarray, psi: np.ndarray) -> complex:
    """a_adj(φ, ψ) = ψᴴ conj(A) φ"""
    return complex(np.conj(psi) @ (system.full_matrix.conj() @ phi))


# Problema direto real (geração de dados)

@dataclass(frozen=True)
class ManufacturedSolution:
    """Solução analítica u* com gradiente e laplaciano para o método das soluções fabricadas"""
    value: Callable[[np.ndarray, np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]
    laplacian: Callable[[np.ndarray, np.ndarray], np.ndarray]

    @classmethod
    def skin_profile(cls, width: float, T_b: float) -> "ManufacturedSolution":
        """u* = T_b + sin(πx/W) y²"""
        c = math.pi / width
        return cls(
            value=lambda x, y: T_b + np.sin(c * x) * y ** 2,
            gradient=lambda x, y: (c * np.cos(c * x) * y ** 2, 2.0 * np.sin(c * x) * y),
            laplacian=lambda x, y: np.sin(c * x) * (2.0 - (c * y) ** 2),
        )


def _quadrature_points(mesh: Mesh) -> np.ndarray:
    """Pontos físicos da regra de 6 pontos, shape (nc, nq, 2)"""
    bary, _ = TRIANGLE_QUADRATURE
    return np.einsum("qj,cjd->cqd", bary, mesh.vertices[mesh.cells])


def _boundary_normals(mesh: Mesh, edges: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    tangent = mesh.vertices[edges[:, 1]] - mesh.vertices[edges[:, 0]]
    lengths = np.linalg.norm(tangent, axis=1)
    # arestas de fronteira orientadas no sentido anti-horário: normal externa à direita
    normals = np.column_stack([tangent[:, 1], -tangent[:, 0]]) / lengths[:, None]
    return normals, lengths


def _manufactured_data(mesh: Mesh, coeffs: PhysicalCoefficients,
                       exact: ManufacturedSolution) -> Tuple[np.ndarray, np.ndarray]:
    if not coeffs.is_homogeneous:
        raise ValueError("Solução fabricada requer σ e k uniformes entre regiões")
    sigma, k = coeffs.sigma[1], coeffs.perfusion[1]
    bary, weights = TRIANGLE_QUADRATURE
    points = _quadrature_points(mesh)
    x, y = points[..., 0], points[..., 1]
    f = -sigma * exact.laplacian(x, y) + k * exact.value(x, y)
    local = mesh.cell_areas[:, None] * np.einsum("q,cq,qi->ci", weights, f, bary)
    load = _scatter_vector(mesh.cells, local, mesh.n_vertices)

    s, w = EDGE_QUADRATURE
    for tag in (BoundaryTag.GAMMA_U, BoundaryTag.GAMMA_W):
        edges = mesh.edges_with_tag(tag)
        if len(edges) == 0:
            continue
        normals, lengths = _boundary_normals(mesh, edges)
        a, b = mesh.vertices[edges[:, 0]], mesh.vertices[edges[:, 1]]
        for sq, wq in zip(s, w):
            p = (1 - sq) * a + sq * b
            gx, gy = exact.gradient(p[:, 0], p[:, 1])
            g = sigma * (gx * normals[:, 0] + gy * normals[:, 1])
            if tag == BoundaryTag.GAMMA_U:
                g = g + coeffs.alpha * exact.value(p[:, 0], p[:, 1])
            contribution = np.column_stack([(1 - sq) * g, sq * g]) * (wq * lengths)[:, None]
            load += _scatter_vector(edges, contribution, mesh.n_vertices)
    dirichlet = mesh.vertices_with_tag(BoundaryTag.GAMMA_B)
    return load, exact.value(mesh.vertices[dirichlet, 0], mesh.vertices[dirichlet, 1])


def _p2_basis(bary_point: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Valores P2 e coeficientes C com ∇φ_i = Σ_j C[i, j] ∇λ_j"""
    lam = bary_point
    values = np.empty(6)
    coeff = np.zeros((6, 3))
    for s in range(3):
        a, b = (s + 1) % 3, (s + 2) % 3
        values[s] = lam[s] * (2 * lam[s] - 1)
        coeff[s, s] = 4 * lam[s] - 1
        values[3 + s] = 4 * lam[a] * lam[b]
        coeff[3 + s, a] += 4 * lam[b]
        coeff[3 + s, b] += 4 * lam[a]
    return values, coeff


_P2_EDGE_MASS = np.array([[4.0, 2.0, -1.0], [2.0, 16.0, 2.0], [-1.0, 2.0, 4.0]]) / 30.0
_P2_EDGE_LOAD = np.array([1.0, 4.0, 1.0]) / 6.0


def _solve_forward_p2(mesh: Mesh, coeffs: PhysicalCoefficients) -> np.ndarray:
    nv = mesh.n_vertices
    n = nv + len(mesh.edges)
    dofs = np.hstack([mesh.cells, nv + mesh.cell_edges])
    sigma, k, Q = coeffs.cell_values(mesh)
    area = mesh.cell_areas
    grads = mesh.barycentric_gradients

    stiffness = np.zeros((mesh.n_cells, 6, 6))
    mass = np.zeros((mesh.n_cells, 6, 6))
    load = np.zeros((mesh.n_cells, 6))
    for bary, weight in zip(*TRIANGLE_QUADRATURE):
        phi, coeff = _p2_basis(bary)
        dphi = np.einsum("ij,cjd->cid", coeff, grads)
        stiffness += weight * np.einsum("cid,cjd->cij", dphi, dphi)
        mass += weight * np.outer(phi, phi)[None]
        load += weight * phi[None]
    stiffness *= (sigma * area)[:, None, None]
    mass *= (k * area)[:, None, None]
    load *= (Q * area)[:, None]

    edge_index = {tuple(e): i for i, e in enumerate(mesh.edges.tolist())}

    def edge_dofs(edges: np.ndarray) -> np.ndarray:
        mids = [nv + edge_index[tuple(sorted(e))] for e in edges.tolist()]
        return np.column_stack([edges[:, 0], mids, edges[:, 1]])

    gamma_u = mesh.edges_with_tag(BoundaryTag.GAMMA_U)
    lengths = np.linalg.norm(mesh.vertices[gamma_u[:, 1]] - mesh.vertices[gamma_u[:, 0]], axis=1)
    robin_dofs = edge_dofs(gamma_u)
    matrix = (scatter_local(dofs, stiffness + mass, n)
              + coeffs.alpha * scatter_local(robin_dofs, lengths[:, None, None] * _P2_EDGE_MASS, n))
    rhs = (_scatter_vector(dofs, load, n)
           + coeffs.alpha * coeffs.T_a * _scatter_vector(robin_dofs, lengths[:, None] * _P2_EDGE_LOAD, n))

    dirichlet = np.unique(edge_dofs(mesh.edges_with_tag(BoundaryTag.GAMMA_B)).ravel())
    free = np.setdiff1d(np.arange(n), dirichlet)
    solution = np.full(n, coeffs.T_b)
    rows = matrix[free]
    reduced = rhs[free] - rows[:, dirichlet] @ solution[dirichlet]
    solution[free] = _solve_real(rows[:, free], reduced, "forward")
    return solution[:nv]


def _solve_real(matrix: sp.spmatrix, rhs: np.ndarray, kind: str) -> np.ndarray:
    try:
        with get_collector().time_solve(kind):
            solution = spla.splu(matrix.tocsc()).solve(rhs)
    except RuntimeError as e:
        logger.error(f"Erro no solve real: {str(e)}")
        raise SolverError(f"Sistema real singular: {str(e)}") from e
    residual = _relative_residual(matrix, solution, rhs)
    if not np.isfinite(residual) or residual > RESIDUAL_TOLERANCE:
        raise SolverError("Solve real sem convergência", residual)
    return solution


def solve_forward_real(mesh: Mesh, coeffs: PhysicalCoefficients, order: int = 2,
                       manufactured: Optional[ManufacturedSolution] = None
                       ) -> Tuple[np.ndarray, BoundaryProfile]:
    """Problema de transmissão real; devolve o campo nodal e o traço em Γu"""
    if order not in (1, 2):
        raise ValueError(f"Ordem de elemento não suportada: {order}")
    if order == 2:
        if manufactured is not None:
            raise ValueError("Solução fabricada disponível apenas para P1")
        values = _solve_forward_p2(mesh, coeffs)
    else:
        operators = assemble_p1(mesh, coeffs)
        matrix = operators.stiffness + operators.reaction + coeffs.alpha * operators.robin_mass
        dirichlet = mesh.vertices_with_tag(BoundaryTag.GAMMA_B)
        if manufactured is None:
            rhs = operators.source_load + coeffs.alpha * coeffs.T_a * operators.robin_load
            boundary_values = np.full(len(dirichlet), coeffs.T_b)
        else:
            rhs, boundary_values = _manufactured_data(mesh, coeffs, manufactured)
        free = np.setdiff1d(np.arange(mesh.n_vertices), dirichlet)
        values = np.empty(mesh.n_vertices)
        values[dirichlet] = boundary_values
        rows = matrix[free]
        values[free] = _solve_real(rows[:, free], rhs[free] - rows[:, dirichlet] @ boundary_values,
                                   "forward")
    logger.debug("problema direto resolvido", order=order, n_vertices=mesh.n_vertices)
    return values, BoundaryProfile.from_mesh_trace(mesh, values)


# Normas

def cell_gradients(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Gradiente constante por célula de um campo P1, shape (nc, 2)"""
    return np.einsum("ci,cid->cd", np.asarray(values)[mesh.cells], mesh.barycentric_gradients)


def l2_norm(mesh: Mesh, values: np.ndarray) -> float:
    values = np.asarray(values)
    local = values[mesh.cells]
    integral = mesh.cell_areas / 12.0 * (np.sum(np.abs(local) ** 2, axis=1)
                                         + np.abs(local.sum(axis=1)) ** 2)
    return float(math.sqrt(integral.sum()))


def h1_seminorm(mesh: Mesh, values: np.ndarray) -> float:
    grads = cell_gradients(mesh, values)
    return float(math.sqrt(np.sum(mesh.cell_areas * np.sum(np.abs(grads) ** 2, axis=1))))


def h1_norm(mesh: Mesh, values: np.ndarray) -> float:
    return math.hypot(l2_norm(mesh, values), h1_seminorm(mesh, values))


def l2_error(mesh: Mesh, values: np.ndarray, exact: ManufacturedSolution) -> float:
    bary, weights = TRIANGLE_QUADRATURE
    points = _quadrature_points(mesh)
    discrete = np.einsum("qj,cj->cq", bary, np.asarray(values)[mesh.cells])
    diff = exact.value(points[..., 0], points[..., 1]) - discrete
    return float(math.sqrt(np.sum(mesh.cell_areas * (np.abs(diff) ** 2 @ weights))))


def h1_seminorm_error(mesh: Mesh, values: np.ndarray, exact: ManufacturedSolution) -> float:
    _, weights = TRIANGLE_QUADRATURE
    points = _quadrature_points(mesh)
    gx, gy = exact.gradient(points[..., 0], points[..., 1])
    grads = cell_gradients(mesh, values)
    diff = (gx - grads[:, 0:1]) ** 2 + (gy - grads[:, 1:2]) ** 2
    return float(math.sqrt(np.sum(mesh.cell_areas * (diff @ weights))))
