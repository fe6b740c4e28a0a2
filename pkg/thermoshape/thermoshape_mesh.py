# ThermoShape - Núcleo Geométrico
# Malhas conformes à interface do tumor, geometria de elementos, deformação e remalhamento

import math
import uuid
from dataclasses import dataclass, field, replace
from enum import IntEnum
from functools import cached_property
from typing import Callable, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import structlog
import triangle
from scipy.spatial.distance import directed_hausdorff

from .thermoshape_errors import ClearanceError, FieldMismatchError, InversionError, MeshError

logger = structlog.get_logger("ThermoShape.Mesh")

DEFAULT_CLEARANCE = 0.002
MIN_ANGLE_DEG = 30
REMESH_QUALITY_THRESHOLD = 0.05
REMESH_RETRIES = 2

PolygonLike = Union[np.ndarray, Sequence[Sequence[float]]]


class BoundaryTag(IntEnum):
    """Partes da fronteira externa"""
    GAMMA_U = 0  # pele (topo)
    GAMMA_W = 1  # laterais adiabáticas
    GAMMA_B = 2  # base com temperatura do corpo


class Region(IntEnum):
    """Rótulos de região por célula"""
    TUMOR = 0
    HEALTHY = 1


def _new_id() -> str:
    return uuid.uuid4().hex


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangulação conforme com regiões, arestas de fronteira rotuladas e laços de interface"""
    vertices: np.ndarray
    cells: np.ndarray
    cell_region: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    interface_edges: np.ndarray
    interface_loops: Tuple[np.ndarray, ...] = ()
    target_h: float = 0.0
    mesh_id: str = field(default_factory=_new_id)
    topology_id: str = field(default_factory=_new_id)

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(self.vertices, float).reshape(-1, 2))
        object.__setattr__(self, "cells", _frozen(self.cells, np.int64).reshape(-1, 3))
        object.__setattr__(self, "cell_region", _frozen(self.cell_region, np.int64))
        object.__setattr__(self, "boundary_edges", _frozen(self.boundary_edges, np.int64).reshape(-1, 2))
        object.__setattr__(self, "boundary_tags", _frozen(self.boundary_tags, np.int64))
        object.__setattr__(self, "interface_edges", _frozen(self.interface_edges, np.int64).reshape(-1, 2))
        object.__setattr__(self, "interface_loops",
                           tuple(_frozen(loop, np.int64) for loop in self.interface_loops))

    # Contagens e fronteira

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def interface_loop(self) -> np.ndarray:
        """Primeiro laço de interface (vazio se não houver inclusão)"""
        return self.interface_loops[0] if self.interface_loops else np.zeros(0, dtype=np.int64)

    @cached_property
    def bounds(self) -> Tuple[float, float, float, float]:
        xmin, ymin = self.vertices.min(axis=0)
        xmax, ymax = self.vertices.max(axis=0)
        return float(xmin), float(xmax), float(ymin), float(ymax)

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.boundary_edges.ravel()] = True
        return mask

    def edges_with_tag(self, tag: BoundaryTag) -> np.ndarray:
        return self.boundary_edges[self.boundary_tags == int(tag)]

    def vertices_with_tag(self, tag: BoundaryTag) -> np.ndarray:
        return np.unique(self.edges_with_tag(tag).ravel())

    @cached_property
    def gamma_u_vertices(self) -> np.ndarray:
        """Vértices de Γu ordenados pela posição de arco"""
        nodes = self.vertices_with_tag(BoundaryTag.GAMMA_U)
        return nodes[np.argsort(self.vertices[nodes, 0], kind="stable")]

    def arc_positions(self, nodes: np.ndarray) -> np.ndarray:
        """Posição de arco ao longo de Γu, medida a partir do canto esquerdo"""
        return self.vertices[nodes, 0] - self.bounds[0]

    @cached_property
    def interface_vertices(self) -> np.ndarray:
        return np.unique(self.interface_edges.ravel())

    # Geometria vetorizada por célula

    @cached_property
    def edge_matrices(self) -> np.ndarray:
        """E_K = [x1 - x0, x2 - x0] por célula, shape (nc, 2, 2)"""
        return _edge_matrices(self.vertices, self.cells)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        return 0.5 * _det2(self.edge_matrices)

    @cached_property
    def cell_areas(self) -> np.ndarray:
        return np.abs(self.signed_areas)

    @cached_property
    def barycentric_gradients(self) -> np.ndarray:
        """∇λ_i por célula, shape (nc, 3, 2)"""
        return _barycentric_gradients(self.edge_matrices)

    @cached_property
    def side_lengths(self) -> np.ndarray:
        """Comprimento do lado oposto a cada vértice, shape (nc, 3)"""
        x = self.vertices[self.cells]
        return np.linalg.norm(np.roll(x, -2, axis=1) - np.roll(x, -1, axis=1), axis=2)

    @cached_property
    def h_K(self) -> np.ndarray:
        return self.side_lengths.max(axis=1)

    @cached_property
    def a_K(self) -> np.ndarray:
        return 1.0 / np.linalg.norm(self.barycentric_gradients, axis=2).max(axis=1)

    @cached_property
    def quality(self) -> np.ndarray:
        return self.a_K / self.h_K

    @property
    def min_quality(self) -> float:
        return float(self.quality.min())

    @cached_property
    def tumor_volume(self) -> float:
        return float(self.cell_areas[self.cell_region == Region.TUMOR].sum())

    # Topologia de arestas

    @cached_property
    def _topology(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return _edge_topology(self.cells)

    @property
    def edges(self) -> np.ndarray:
        """Arestas únicas (ordenadas por índice), shape (ne, 2)"""
        return self._topology[0]

    @property
    def cell_edges(self) -> np.ndarray:
        """Índice da aresta oposta a cada vértice local, shape (nc, 3)"""
        return self._topology[1]

    @property
    def edge_cells(self) -> np.ndarray:
        """Células adjacentes a cada aresta, -1 na fronteira, shape (ne, 2)"""
        return self._topology[2]

    def validate(self) -> None:
        """Verifica invariantes básicos da malha"""
        if np.any(self.signed_areas <= 0.0):
            raise MeshError(f"Malha com {int(np.sum(self.signed_areas <= 0))} células não positivas")
        for loop in self.interface_loops:
            if _has_self_intersection(self.vertices[loop]):
                raise MeshError("Laço de interface com auto-interseção")


@dataclass(frozen=True)
class ElementGeometry:
    """Geometria de um triângulo: matriz de arestas, gradientes baricêntricos e alturas"""
    edge_matrix: np.ndarray
    inv_edge_matrix: np.ndarray  # linhas: ∇λ1, ∇λ2
    barycentric_gradients: np.ndarray  # linhas: ∇λ0, ∇λ1, ∇λ2
    origin: np.ndarray
    h_K: float
    a_K: float
    area: float

    @property
    def inv_edge_matrix_transposed(self) -> np.ndarray:
        """E⁻ᵀ, cujas colunas são ∇λ1 e ∇λ2"""
        return self.inv_edge_matrix.T

    def barycentric(self, points: np.ndarray) -> np.ndarray:
        """Coordenadas baricêntricas (λ0, λ1, λ2) de pontos, shape (m, 3)"""
        local = (np.atleast_2d(points) - self.origin) @ self.inv_edge_matrix.T
        return np.column_stack([1.0 - local.sum(axis=1), local])


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Campo vetorial nodal (θ ou Ẋ) sobre uma topologia de malha"""
    vectors: np.ndarray
    mesh_id: str

    def __post_init__(self):
        object.__setattr__(self, "vectors", _frozen(self.vectors, float).reshape(-1, 2))

    @classmethod
    def zeros(cls, mesh: Mesh) -> "DeformationField":
        return cls(np.zeros((mesh.n_vertices, 2)), mesh.topology_id)

    @classmethod
    def from_function(cls, mesh: Mesh,
                      func: Callable[[np.ndarray], np.ndarray]) -> "DeformationField":
        """Amostra um campo analítico nos vértices e anula em ∂Ω"""
        vectors = np.array(func(mesh.vertices), dtype=float).reshape(-1, 2)
        vectors[mesh.boundary_mask] = 0.0
        return cls(vectors, mesh.topology_id)

    def scaled(self, factor: float) -> "DeformationField":
        return replace(self, vectors=factor * self.vectors)

    def __add__(self, other: "DeformationField") -> "DeformationField":
        if other.mesh_id != self.mesh_id:
            raise FieldMismatchError("Campos de deformação de topologias diferentes")
        return replace(self, vectors=self.vectors + other.vectors)

    def check_admissible(self, mesh: Mesh) -> None:
        if self.mesh_id != mesh.topology_id or len(self.vectors) != mesh.n_vertices:
            raise FieldMismatchError("Campo de deformação não pertence à malha")
        if np.any(self.vectors[mesh.boundary_mask] != 0.0):
            raise MeshError("Campo de deformação não se anula em ∂Ω")


# Funções geométricas de baixo nível

def _det2(matrices: np.ndarray) -> np.ndarray:
    return matrices[:, 0, 0] * matrices[:, 1, 1] - matrices[:, 0, 1] * matrices[:, 1, 0]


def _edge_matrices(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    x = vertices[cells]
    return np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]], axis=2)


def _barycentric_gradients(edge_matrices: np.ndarray) -> np.ndarray:
    det = _det2(edge_matrices)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.empty_like(edge_matrices)
        inv[:, 0, 0] = edge_matrices[:, 1, 1] / det
        inv[:, 0, 1] = -edge_matrices[:, 0, 1] / det
        inv[:, 1, 0] = -edge_matrices[:, 1, 0] / det
        inv[:, 1, 1] = edge_matrices[:, 0, 0] / det
    grads = np.empty((len(edge_matrices), 3, 2))
    grads[:, 1] = inv[:, 0]
    grads[:, 2] = inv[:, 1]
    grads[:, 0] = -inv[:, 0] - inv[:, 1]
    return grads


def _edge_topology(cells: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    nc = len(cells)
    # lado s é oposto ao vértice local s
    sides = np.stack([cells[:, [1, 2]], cells[:, [2, 0]], cells[:, [0, 1]]], axis=1).reshape(-1, 2)
    keys = np.sort(sides, axis=1)
    edges, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    counts = np.bincount(inverse, minlength=len(edges))
    if counts.max(initial=0) > 2:
        raise MeshError("Aresta compartilhada por mais de duas células")
    owners = np.repeat(np.arange(nc), 3)
    order = np.argsort(inverse, kind="stable")
    starts = np.searchsorted(inverse[order], np.arange(len(edges)))
    edge_cells = np.full((len(edges), 2), -1, dtype=np.int64)
    edge_cells[:, 0] = owners[order[starts]]
    shared = counts == 2
    edge_cells[shared, 1] = owners[order[starts[shared] + 1]]
    return edges, inverse.reshape(nc, 3), edge_cells


def _signed_polygon_area(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _orientation(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])


def _on_segment(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> np.ndarray:
    return ((np.minimum(a[..., 0], b[..., 0]) <= p[..., 0]) & (p[..., 0] <= np.maximum(a[..., 0], b[..., 0]))
            & (np.minimum(a[..., 1], b[..., 1]) <= p[..., 1]) & (p[..., 1] <= np.maximum(a[..., 1], b[..., 1])))


def _segments_intersect(p1, p2, q1, q2) -> np.ndarray:
    d1 = _orientation(q1, q2, p1)
    d2 = _orientation(q1, q2, p2)
    d3 = _orientation(p1, p2, q1)
    d4 = _orientation(p1, p2, q2)
    proper = (d1 * d2 < 0) & (d3 * d4 < 0)
    touching = (((d1 == 0) & _on_segment(q1, q2, p1)) | ((d2 == 0) & _on_segment(q1, q2, p2))
                | ((d3 == 0) & _on_segment(p1, p2, q1)) | ((d4 == 0) & _on_segment(p1, p2, q2)))
    return proper | touching


def _has_self_intersection(points: np.ndarray) -> bool:
    n = len(points)
    start, end = points, np.roll(points, -1, axis=0)
    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    return bool(np.any(_segments_intersect(start[i], end[i], start[j], end[j])))


def _polygons_intersect(a: np.ndarray, b: np.ndarray) -> bool:
    i, j = np.meshgrid(np.arange(len(a)), np.arange(len(b)), indexing="ij")
    i, j = i.ravel(), j.ravel()
    a_end, b_end = np.roll(a, -1, axis=0), np.roll(b, -1, axis=0)
    return bool(np.any(_segments_intersect(a[i], a_end[i], b[j], b_end[j])))


def points_in_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Teste ponto-em-polígono por lançamento de raio"""
    points = np.atleast_2d(points)
    x, y = points[:, 0:1], points[:, 1:2]
    xa, ya = polygon[:, 0], polygon[:, 1]
    xb, yb = np.roll(xa, -1), np.roll(ya, -1)
    crosses = (ya > y) != (yb > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = xa + (y - ya) * (xb - xa) / (yb - ya)
    return np.logical_xor.reduce(crosses & (x < x_cross), axis=1)


def _interior_point(polygon: np.ndarray) -> np.ndarray:
    centroid = polygon.mean(axis=0)
    if points_in_polygon(centroid, polygon)[0]:
        return centroid
    ccw = polygon if _signed_polygon_area(polygon) > 0 else polygon[::-1]
    for a, b in zip(ccw, np.roll(ccw, -1, axis=0)):
        direction = b - a
        length = float(np.hypot(*direction))
        if length == 0.0:
            continue
        candidate = 0.5 * (a + b) + 1e-3 * length * np.array([-direction[1], direction[0]]) / length
        if points_in_polygon(candidate, ccw)[0]:
            return candidate
    raise MeshError("Não foi possível localizar ponto interior do polígono")


def _as_polygon_list(inclusions: Union[PolygonLike, Sequence[PolygonLike], None]) -> List[np.ndarray]:
    if inclusions is None:
        return []
    if isinstance(inclusions, np.ndarray) and inclusions.ndim == 2:
        return [inclusions.astype(float)]
    items = list(inclusions)
    if not items:
        return []
    if np.asarray(items[0], dtype=float).ndim == 1:
        return [np.asarray(items, dtype=float).reshape(-1, 2)]
    return [np.asarray(item, dtype=float).reshape(-1, 2) for item in items]


def validate_polygon(polygon: np.ndarray, width: float, height: float,
                     clearance: float = DEFAULT_CLEARANCE) -> np.ndarray:
    """Valida polígono de inclusão e devolve cópia em orientação anti-horária"""
    polygon = np.asarray(polygon, dtype=float).reshape(-1, 2)
    if len(polygon) < 3:
        raise MeshError(f"Polígono degenerado: {len(polygon)} vértices")
    area = _signed_polygon_area(polygon)
    edge_lengths = np.linalg.norm(np.roll(polygon, -1, axis=0) - polygon, axis=1)
    if abs(area) <= 1e-14 * width * height or np.any(edge_lengths == 0.0):
        raise MeshError("Polígono degenerado: área nula ou vértices repetidos")
    if _has_self_intersection(polygon):
        raise MeshError("Polígono com auto-interseção")
    distance = np.minimum.reduce([polygon[:, 0], width - polygon[:, 0],
                                  polygon[:, 1], height - polygon[:, 1]])
    if distance.min() < clearance:
        raise MeshError(f"Polígono viola a distância mínima d∘={clearance} à fronteira "
                        f"(distância {distance.min():.3e})")
    return polygon if area > 0 else polygon[::-1].copy()


def circle_polygon(center: Sequence[float], radius: float, n: int = 64) -> np.ndarray:
    """Polígono regular anti-horário inscrito no círculo"""
    angles = 2.0 * np.pi * np.arange(n) / n
    return np.column_stack([center[0] + radius * np.cos(angles),
                            center[1] + radius * np.sin(angles)])


def polar_polygon(center: Sequence[float], r0: float, amplitude: float, mode: int,
                  n: int = 64, phase: float = 0.0) -> np.ndarray:
    """Curva polar r(φ) = r0 (1 + a cos(m φ)) discretizada"""
    angles = 2.0 * np.pi * np.arange(n) / n
    radius = r0 * (1.0 + amplitude * np.cos(mode * (angles - phase)))
    return np.column_stack([center[0] + radius * np.cos(angles),
                            center[1] + radius * np.sin(angles)])


def _rectangle_boundary(width: float, height: float, target_h: float) -> np.ndarray:
    nx_ = max(1, math.ceil(width / target_h))
    ny_ = max(1, math.ceil(height / target_h))
    bottom = np.column_stack([np.linspace(0.0, width, nx_ + 1)[:-1], np.zeros(nx_)])
    right = np.column_stack([np.full(ny_, width), np.linspace(0.0, height, ny_ + 1)[:-1]])
    top = np.column_stack([np.linspace(width, 0.0, nx_ + 1)[:-1], np.full(nx_, height)])
    left = np.column_stack([np.zeros(ny_), np.linspace(height, 0.0, ny_ + 1)[:-1]])
    return np.vstack([bottom, right, top, left])


def _cyclic_segments(start: int, n: int) -> np.ndarray:
    idx = np.arange(n)
    return np.column_stack([start + idx, start + (idx + 1) % n])


def _ordered_loops(vertices: np.ndarray, edges: np.ndarray) -> List[np.ndarray]:
    """Ordena arestas em laços fechados anti-horários"""
    graph = nx.Graph()
    graph.add_edges_from(map(tuple, edges.tolist()))
    loops = []
    for component in sorted(nx.connected_components(graph), key=min):
        sub = graph.subgraph(component)
        if any(degree != 2 for _, degree in sub.degree()):
            raise MeshError("Arestas de interface não formam laço simples")
        start = min(component)
        loop, previous, current = [start], None, start
        while True:
            neighbors = sorted(sub.neighbors(current))
            following = neighbors[0] if neighbors[0] != previous else neighbors[1]
            if following == start:
                break
            loop.append(following)
            previous, current = current, following
        loop = np.array(loop, dtype=np.int64)
        if _signed_polygon_area(vertices[loop]) < 0:
            loop = np.concatenate([loop[:1], loop[1:][::-1]])
        loops.append(loop)
    return loops


def _oriented_cells(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    cells = np.array(cells, dtype=np.int64).reshape(-1, 3)
    if len(cells) == 0:
        raise MeshError("Malha sem células")
    if cells.min() < 0 or cells.max() >= len(vertices):
        raise MeshError("Célula referencia vértice inexistente")
    areas = 0.5 * _det2(_edge_matrices(vertices, cells))
    if np.any(areas == 0.0):
        raise MeshError("Triangulação com célula degenerada")
    flip = areas < 0
    cells[flip] = cells[flip][:, [0, 2, 1]]
    return cells


def _owner_sides(cells: np.ndarray, cell_edges: np.ndarray, edge_cells: np.ndarray) -> np.ndarray:
    """Cada aresta orientada como lado anti-horário da sua primeira célula"""
    sides = np.stack([cells[:, [1, 2]], cells[:, [2, 0]], cells[:, [0, 1]]], axis=1)
    owner = edge_cells[:, 0]
    local = np.argmax(cell_edges[owner] == np.arange(len(edge_cells))[:, None], axis=1)
    return sides[owner, local]


def _crossing_edges(edge_cells: np.ndarray, cell_region: np.ndarray) -> np.ndarray:
    interior = edge_cells[:, 1] >= 0
    pairs = np.where(interior[:, None], edge_cells, 0)
    return interior & (cell_region[pairs[:, 0]] != cell_region[pairs[:, 1]])


def _edge_index(edges: np.ndarray, n_vertices: int, pairs: np.ndarray) -> np.ndarray:
    """Índice de cada par de vértices na lista ordenada de arestas únicas"""
    pairs = np.sort(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=1)
    if len(pairs) == 0:
        return np.zeros(0, dtype=np.int64)
    if pairs.min() < 0 or pairs.max() >= n_vertices:
        raise MeshError("Aresta referencia vértice inexistente")
    keys = edges[:, 0] * n_vertices + edges[:, 1]
    wanted = pairs[:, 0] * n_vertices + pairs[:, 1]
    index = np.minimum(np.searchsorted(keys, wanted), len(keys) - 1)
    missing = keys[index] != wanted
    if np.any(missing):
        raise MeshError(f"{int(missing.sum())} arestas não pertencem à triangulação")
    return index


def _make_mesh(vertices, cells, cell_region, boundary_edges, boundary_tags,
               interface_edges, target_h: float) -> Mesh:
    loops = _ordered_loops(vertices, interface_edges) if len(interface_edges) else []
    return Mesh(vertices=vertices, cells=cells, cell_region=cell_region,
                boundary_edges=boundary_edges, boundary_tags=boundary_tags,
                interface_edges=interface_edges, interface_loops=tuple(loops),
                target_h=float(target_h))


def finalize_mesh(vertices: np.ndarray, cells: np.ndarray, cell_region: np.ndarray,
                  target_h: float) -> Mesh:
    """Orienta células, rotula fronteira por geometria e extrai a interface"""
    vertices = np.asarray(vertices, dtype=float)
    cells = _oriented_cells(vertices, cells)
    cell_region = np.asarray(cell_region, dtype=np.int64)

    edges, cell_edges, edge_cells = _edge_topology(cells)
    on_boundary = edge_cells[:, 1] < 0
    boundary_edges = _owner_sides(cells, cell_edges, edge_cells)[on_boundary]

    ymin, ymax = vertices[:, 1].min(), vertices[:, 1].max()
    tol = 1e-9 * max(np.ptp(vertices[:, 0]), ymax - ymin)
    y = vertices[boundary_edges, 1]
    tags = np.full(len(boundary_edges), int(BoundaryTag.GAMMA_W), dtype=np.int64)
    tags[np.all(y >= ymax - tol, axis=1)] = int(BoundaryTag.GAMMA_U)
    tags[np.all(y <= ymin + tol, axis=1)] = int(BoundaryTag.GAMMA_B)

    interface_edges = edges[_crossing_edges(edge_cells, cell_region)]
    return _make_mesh(vertices, cells, cell_region, boundary_edges, tags, interface_edges, target_h)


def assemble_mesh(vertices: np.ndarray, cells: np.ndarray, cell_region: np.ndarray,
                  boundary_edges: np.ndarray, boundary_tags: np.ndarray,
                  interface_edges: np.ndarray, target_h: float = 0.0) -> Mesh:
    """
    Monta uma malha com rótulos explícitos de fronteira e interface.

    Os rótulos são mantidos como fornecidos; a função só verifica que as
    arestas de fronteira cobrem ∂Ω exatamente uma vez e que as arestas de
    interface são exatamente as que separam regiões diferentes. Arestas de
    fronteira são reorientadas no sentido anti-horário da célula dona.
    """
    vertices = np.asarray(vertices, dtype=float).reshape(-1, 2)
    cells = _oriented_cells(vertices, cells)
    cell_region = np.asarray(cell_region, dtype=np.int64).reshape(-1)
    boundary_edges = np.asarray(boundary_edges, dtype=np.int64).reshape(-1, 2)
    boundary_tags = np.asarray(boundary_tags, dtype=np.int64).reshape(-1)
    interface_edges = np.asarray(interface_edges, dtype=np.int64).reshape(-1, 2)

    if len(cell_region) != len(cells):
        raise MeshError(f"{len(cell_region)} regiões para {len(cells)} células")
    if not np.all(np.isin(cell_region, [int(r) for r in Region])):
        raise MeshError("Região de célula inválida")
    if len(boundary_tags) != len(boundary_edges):
        raise MeshError(f"{len(boundary_tags)} rótulos para {len(boundary_edges)} arestas de fronteira")
    invalid = ~np.isin(boundary_tags, [int(t) for t in BoundaryTag])
    if np.any(invalid):
        raise MeshError(f"Rótulos de fronteira inválidos: {sorted(set(boundary_tags[invalid].tolist()))}")

    edges, cell_edges, edge_cells = _edge_topology(cells)
    n = len(vertices)
    on_boundary = edge_cells[:, 1] < 0
    index = _edge_index(edges, n, boundary_edges)
    if not np.all(on_boundary[index]):
        raise MeshError("Aresta rotulada como fronteira é interior")
    if len(np.unique(index)) != len(index) or len(index) != int(on_boundary.sum()):
        raise MeshError("Arestas de fronteira não cobrem ∂Ω exatamente uma vez")
    boundary_edges = _owner_sides(cells, cell_edges, edge_cells)[index]

    crossing = _crossing_edges(edge_cells, cell_region)
    iface_index = _edge_index(edges, n, interface_edges)
    if (len(np.unique(iface_index)) != len(iface_index)
            or not np.array_equal(np.sort(iface_index), np.flatnonzero(crossing))):
        raise MeshError("Arestas de interface não coincidem com a troca de região")

    return _make_mesh(vertices, cells, cell_region, boundary_edges, boundary_tags,
                      interface_edges, target_h)


def _triangulate(outer: np.ndarray, loops: List[np.ndarray], target_h: float,
                 outer_tags: Optional[np.ndarray] = None) -> Mesh:
    """outer_tags[i] rotula o segmento outer[i] -> outer[i + 1]; sem ele os rótulos vêm da geometria"""
    points = [outer] + loops
    offsets = np.cumsum([0] + [len(p) for p in points])
    segments = np.vstack([_cyclic_segments(offsets[k], len(p)) for k, p in enumerate(points)])
    xmin, ymin = outer.min(axis=0)
    xmax = outer[:, 0].max()
    # atributo = região + 1 para distinguir triângulos sem região
    healthy_seed = [0.5 * (xmin + xmax), ymin + 1e-3 * target_h, Region.HEALTHY + 1, 0.0]
    regions = [healthy_seed] + [[*_interior_point(loop), Region.TUMOR + 1, 0.0] for loop in loops]
    max_area = math.sqrt(3.0) / 4.0 * target_h ** 2
    options = f"pq{MIN_ANGLE_DEG}YYAa{max_area:.15f}"
    geometry = {
        "vertices": np.vstack(points),
        "segments": segments.astype(np.int32),
        "regions": np.array(regions, dtype=float),
    }
    try:
        result = triangle.triangulate(geometry, options)
    except Exception as e:
        logger.error(f"Erro na triangulação: {str(e)}")
        raise MeshError(f"Falha na triangulação: {str(e)}") from e

    attributes = np.rint(result["triangle_attributes"][:, 0]).astype(np.int64)
    if np.any(attributes == 0):
        raise MeshError("Triangulação com células fora de qualquer região")
    mesh = finalize_mesh(result["vertices"], result["triangles"], attributes - 1, target_h)
    if len(mesh.interface_loops) != len(loops):
        raise MeshError(f"Esperados {len(loops)} laços de interface, obtidos {len(mesh.interface_loops)}")
    if outer_tags is None:
        return mesh

    # YY: sem pontos de Steiner nos segmentos, a fronteira é o laço externo original
    n_outer = len(outer)
    start, end = mesh.boundary_edges.T
    if np.any(start >= n_outer) or np.any(end >= n_outer):
        raise MeshError("Triangulação inseriu vértices na fronteira externa")
    segment = np.where((end - start) % n_outer == 1, start, end)
    return replace(mesh, boundary_tags=np.asarray(outer_tags, dtype=np.int64)[segment])


def build_rect_mesh(width: float, height: float,
                    inclusion_polygon: Union[PolygonLike, Sequence[PolygonLike], None],
                    target_h: float,
                    clearance: float = DEFAULT_CLEARANCE) -> Mesh:
    """Triangulação do retângulo [0, width] x [0, height] conforme às inclusões"""
    if target_h <= 0:
        raise MeshError(f"target_h deve ser positivo: {target_h}")
    polygons = [validate_polygon(p, width, height, clearance)
                for p in _as_polygon_list(inclusion_polygon)]
    for i in range(len(polygons)):
        for j in range(i + 1, len(polygons)):
            if (_polygons_intersect(polygons[i], polygons[j])
                    or points_in_polygon(polygons[i][:1], polygons[j])[0]
                    or points_in_polygon(polygons[j][:1], polygons[i])[0]):
                raise MeshError(f"Inclusões {i} e {j} se intersectam")

    mesh = _triangulate(_rectangle_boundary(width, height, target_h), polygons, target_h)
    logger.info("malha construída", n_vertices=mesh.n_vertices, n_cells=mesh.n_cells,
                n_inclusions=len(polygons), h_max=float(mesh.h_K.max()))
    return mesh


def build_structured_rect_mesh(width: float, height: float, nx_: int, ny_: int) -> Mesh:
    """Malha estruturada homogênea (sem inclusão) para estudos de convergência"""
    if nx_ < 1 or ny_ < 1:
        raise MeshError("nx e ny devem ser ao menos 1")
    xs = np.linspace(0.0, width, nx_ + 1)
    ys = np.linspace(0.0, height, ny_ + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([gx.ravel(), gy.ravel()])
    i, j = np.meshgrid(np.arange(nx_), np.arange(ny_), indexing="xy")
    v00 = (j * (nx_ + 1) + i).ravel()
    v10, v01, v11 = v00 + 1, v00 + nx_ + 1, v00 + nx_ + 2
    cells = np.vstack([np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])])
    region = np.full(len(cells), int(Region.HEALTHY))
    return finalize_mesh(vertices, cells, region, max(width / nx_, height / ny_))


def element_geometry(mesh: Mesh, cell: int) -> ElementGeometry:
    """Matriz de arestas, gradientes baricêntricos, h_K, a_K e área de uma célula"""
    if not 0 <= cell < mesh.n_cells:
        raise IndexError(f"Célula inexistente: {cell}")
    x = mesh.vertices[mesh.cells[cell]]
    edge_matrix = np.column_stack([x[1] - x[0], x[2] - x[0]])
    det = float(np.linalg.det(edge_matrix))
    h_K = float(mesh.side_lengths[cell].max())
    if abs(det) <= 1e-14 * h_K ** 2:
        raise MeshError(f"Célula degenerada: {cell}")
    inv = np.linalg.inv(edge_matrix)
    grads = np.vstack([-inv.sum(axis=0), inv])
    return ElementGeometry(
        edge_matrix=edge_matrix,
        inv_edge_matrix=inv,
        barycentric_gradients=grads,
        origin=x[0].copy(),
        h_K=h_K,
        a_K=float(1.0 / np.linalg.norm(grads, axis=1).max()),
        area=abs(det) / 2.0,
    )


def deform(mesh: Mesh, field: DeformationField, t: float,
           clearance: Optional[float] = None) -> Mesh:
    """Aplica T_t = id + t θ mantendo conectividade, rótulos e regiões"""
    field.check_admissible(mesh)
    vertices = mesh.vertices + t * field.vectors
    areas = 0.5 * _det2(_edge_matrices(vertices, mesh.cells))
    if np.any(areas <= 0.0):
        raise InversionError(f"Deformação inverte {int(np.sum(areas <= 0.0))} células (t={t:.3e})")
    if clearance is not None and len(mesh.interface_vertices):
        xmin, xmax, ymin, ymax = mesh.bounds
        p = vertices[mesh.interface_vertices]
        distance = np.minimum.reduce([p[:, 0] - xmin, xmax - p[:, 0], p[:, 1] - ymin, ymax - p[:, 1]])
        if distance.min() <= clearance:
            raise ClearanceError(f"Interface a {distance.min():.3e} m de ∂Ω (t={t:.3e})")
    return replace(mesh, vertices=vertices, mesh_id=_new_id())


def remesh(mesh: Mesh) -> Mesh:
    """Retriangula as duas regiões usando os laços de interface atuais como restrição"""
    loops = [mesh.vertices[loop] for loop in mesh.interface_loops]
    for k, points in enumerate(loops):
        if _has_self_intersection(points):
            raise MeshError(f"Laço de interface {k} com auto-interseção; remalhamento abortado")
    for i in range(len(loops)):
        for j in range(i + 1, len(loops)):
            if _polygons_intersect(loops[i], loops[j]):
                raise MeshError(f"Laços de interface {i} e {j} se intersectam")

    outer_loops = _ordered_loops(mesh.vertices, mesh.boundary_edges)
    if len(outer_loops) != 1:
        raise MeshError("Fronteira externa não é um único laço")
    outer = outer_loops[0]
    segment_tags = _boundary_tag_lookup(mesh, np.column_stack([outer, np.roll(outer, -1)]))

    target_h = mesh.target_h or float(np.median(mesh.h_K))
    before = mesh.min_quality
    for attempt in range(REMESH_RETRIES + 1):
        new_mesh = _triangulate(mesh.vertices[outer], loops, target_h, segment_tags)
        after = new_mesh.min_quality
        if after >= 0.5 * before:
            break
        logger.warning("qualidade mínima caiu após remalhamento", attempt=attempt,
                       before=before, after=after, target_h=target_h)
        target_h *= 0.5
    else:
        raise MeshError(f"Remalhamento não preservou a qualidade mínima: {after:.3e} < 0.5 x {before:.3e}")

    logger.info("remalhamento concluído", n_cells=new_mesh.n_cells,
                min_quality_before=before, min_quality_after=after)
    return new_mesh


def _boundary_tag_lookup(mesh: Mesh, pairs: np.ndarray) -> np.ndarray:
    """Rótulo de fronteira de cada par de vértices (em qualquer orientação)"""
    n = mesh.n_vertices
    stored = np.sort(mesh.boundary_edges, axis=1)
    keys = stored[:, 0] * n + stored[:, 1]
    order = np.argsort(keys)
    query = np.sort(np.asarray(pairs, dtype=np.int64), axis=1)
    wanted = query[:, 0] * n + query[:, 1]
    position = np.minimum(np.searchsorted(keys[order], wanted), len(keys) - 1)
    if np.any(keys[order][position] != wanted):
        raise MeshError("Segmento de fronteira sem rótulo")
    return mesh.boundary_tags[order[position]]


def _split_edges(edges: np.ndarray, midpoints: np.ndarray) -> np.ndarray:
    """(a, b) -> (a, m), (m, b), preservando a ordem das arestas"""
    a, b = edges.T
    return np.stack([np.column_stack([a, midpoints]), np.column_stack([midpoints, b])],
                    axis=1).reshape(-1, 2)


def refine_uniform(mesh: Mesh) -> Mesh:
    """Refinamento vermelho: cada triângulo gera 4 filhos (células 4c..4c+3)"""
    v = mesh.vertices
    edges = mesh.edges
    n = mesh.n_vertices
    vertices = np.vstack([v, 0.5 * (v[edges[:, 0]] + v[edges[:, 1]])])
    c0, c1, c2 = mesh.cells.T
    m0, m1, m2 = (n + mesh.cell_edges).T
    children = np.stack([
        np.column_stack([c0, m2, m1]),
        np.column_stack([m2, c1, m0]),
        np.column_stack([m1, m0, c2]),
        np.column_stack([m0, m1, m2]),
    ], axis=1).reshape(-1, 3)
    region = np.repeat(mesh.cell_region, 4)

    # filhos de uma aresta rotulada herdam o rótulo do pai
    boundary = _split_edges(mesh.boundary_edges, n + _edge_index(edges, n, mesh.boundary_edges))
    interface = _split_edges(mesh.interface_edges, n + _edge_index(edges, n, mesh.interface_edges))
    return assemble_mesh(vertices, children, region, boundary, np.repeat(mesh.boundary_tags, 2),
                         interface, mesh.target_h / 2.0)


def prolongate(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Interpolação exata de um campo P1 para a malha refine_uniform(mesh)"""
    edges = mesh.edges
    return np.concatenate([values, 0.5 * (values[edges[:, 0]] + values[edges[:, 1]])])


def edge_matrix_rate(mesh: Mesh, velocity: DeformationField) -> np.ndarray:
    """Ė_K = [ẋ1 - ẋ0, ẋ2 - ẋ0] por célula"""
    return _edge_matrices(velocity.vectors, mesh.cells)


def deformation_gradient(mesh0: Mesh, mesh_t: Mesh) -> np.ndarray:
    """J_F = E_K(t) E_K(0)⁻¹ por célula"""
    if mesh0.topology_id != mesh_t.topology_id:
        raise FieldMismatchError("Malhas com conectividades diferentes")
    return mesh_t.edge_matrices @ np.linalg.inv(mesh0.edge_matrices)


def _densify(polygon: np.ndarray, per_edge: int) -> np.ndarray:
    start, end = polygon, np.roll(polygon, -1, axis=0)
    s = np.arange(per_edge) / per_edge
    return (start[:, None, :] + s[None, :, None] * (end - start)[:, None, :]).reshape(-1, 2)


def hausdorff_distance(poly_a, poly_b, per_edge: int = 20) -> float:
    """Distância de Hausdorff simétrica entre polígonos fechados (ou listas de polígonos)"""
    a = np.vstack([_densify(p, per_edge) for p in _as_polygon_list(poly_a)])
    b = np.vstack([_densify(p, per_edge) for p in _as_polygon_list(poly_b)])
    return float(max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0]))


def interface_polygons(mesh: Mesh) -> List[np.ndarray]:
    """Coordenadas de cada laço de interface"""
    return [mesh.vertices[loop] for loop in mesh.interface_loops]
