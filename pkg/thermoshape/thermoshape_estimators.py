# ThermoShape - Estimadores a Posteriori
# Indicadores residuais η_K (estado), μ_K (adjunto), ξ_K (objetivo) e marcação de Dörfler

import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd
import structlog

from .thermoshape_errors import MeshError
from .thermoshape_fem import (
    BoundaryProfile,
    ComplexNodalField,
    PhysicalCoefficients,
    cell_gradients,
    gamma_u_data,
)
from .thermoshape_mesh import BoundaryTag, Mesh, Region

logger = structlog.get_logger("ThermoShape.Estimators")

# Gauss de 2 pontos em [0, 1]: exato para |J|² com J linear na aresta
_GAUSS2 = (np.array([0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0)]), np.array([0.5, 0.5]))
_INTERIOR = -1


@dataclass(frozen=True)
class ResidualData:
    """Resíduo volumétrico nodal por célula e resíduo de aresta nos extremos de cada lado"""
    volume: np.ndarray        # (nc, 3) valores de R nos vértices locais
    edge: np.ndarray          # (nc, 3, 2) valores de J nos extremos do lado s
    side_nodes: np.ndarray    # (nc, 3, 2) vértices globais do lado s
    side_lengths: np.ndarray  # (nc, 3)


@dataclass(frozen=True)
class IndicatorSet:
    """Indicadores locais por célula e seus valores globais"""
    eta: np.ndarray
    mu: np.ndarray
    xi: np.ndarray
    kappa: float

    @property
    def eta_global(self) -> float:
        return float(np.sqrt(np.sum(self.eta ** 2)))

    @property
    def mu_global(self) -> float:
        return float(np.sqrt(np.sum(self.mu ** 2)))

    @property
    def xi_global(self) -> float:
        return float(np.sqrt(np.sum(self.xi ** 2)))

    def summary(self) -> Dict[str, Any]:
        return {
            "eta_global": self.eta_global,
            "mu_global": self.mu_global,
            "xi_global": self.xi_global,
            "kappa": self.kappa,
            "n_cells": int(len(self.eta)),
        }


def _side_nodes(mesh: Mesh) -> np.ndarray:
    cells = mesh.cells
    return np.stack([cells[:, [1, 2]], cells[:, [2, 0]], cells[:, [0, 1]]], axis=1)


def _side_normals(mesh: Mesh, side_nodes: np.ndarray) -> np.ndarray:
    """Normais unitárias externas de cada lado (células anti-horárias), shape (nc, 3, 2)"""
    tangent = mesh.vertices[side_nodes[..., 1]] - mesh.vertices[side_nodes[..., 0]]
    lengths = np.linalg.norm(tangent, axis=2)
    return np.stack([tangent[..., 1], -tangent[..., 0]], axis=2) / lengths[..., None]


def _edge_tags(mesh: Mesh) -> np.ndarray:
    """Rótulo de fronteira de cada aresta única (_INTERIOR para arestas internas)"""
    edges = mesh.edges
    n = mesh.n_vertices
    keys = edges[:, 0] * n + edges[:, 1]
    boundary = np.sort(mesh.boundary_edges, axis=1)
    index = np.searchsorted(keys, boundary[:, 0] * n + boundary[:, 1])
    tags = np.full(len(edges), _INTERIOR, dtype=np.int64)
    tags[index] = mesh.boundary_tags
    return tags


def _neighbors(mesh: Mesh) -> np.ndarray:
    """Célula vizinha através de cada lado, -1 na fronteira, shape (nc, 3)"""
    pairs = mesh.edge_cells[mesh.cell_edges]
    own = np.arange(mesh.n_cells)[:, None]
    return np.where(pairs[..., 0] == own, pairs[..., 1], pairs[..., 0])


def _residual_data(mesh: Mesh, coeffs: PhysicalCoefficients, values: np.ndarray,
                   volume: np.ndarray, robin: np.ndarray) -> ResidualData:
    """Monta R e J para um campo P1; robin é a parte não difusiva do resíduo em Γu (nodal)"""
    sigma, _, _ = coeffs.cell_values(mesh)
    flux = sigma[:, None] * cell_gradients(mesh, values)
    side_nodes = _side_nodes(mesh)
    normals = _side_normals(mesh, side_nodes)
    lengths = mesh.side_lengths

    tags = _edge_tags(mesh)[mesh.cell_edges]
    neighbors = _neighbors(mesh)
    interior = tags == _INTERIOR
    if np.any(interior & (neighbors < 0)):
        raise MeshError("Aresta interior sem célula vizinha")

    own_flux = np.einsum("cd,csd->cs", flux, normals)
    other = np.where(neighbors >= 0, neighbors, 0)
    other_flux = np.einsum("csd,csd->cs", flux[other], normals)
    jump = -0.5 * (own_flux - other_flux)

    edge = np.zeros(side_nodes.shape, dtype=complex)
    edge[interior] = jump[interior][:, None]
    for tag in (BoundaryTag.GAMMA_U, BoundaryTag.GAMMA_W):
        mask = tags == int(tag)
        edge[mask] = -own_flux[mask][:, None]
    gamma_u = tags == int(BoundaryTag.GAMMA_U)
    edge[gamma_u] += robin[side_nodes[gamma_u]]
    return ResidualData(volume=volume, edge=edge, side_nodes=side_nodes, side_lengths=lengths)


def state_residual(mesh: Mesh, coeffs: PhysicalCoefficients, u: ComplexNodalField,
                   h: BoundaryProfile) -> ResidualData:
    """R = Q - k u_h; em Γu J = -σ∂_n u - α(u - T_a) - i(u - h)"""
    u.check(mesh)
    _, k, Q = coeffs.cell_values(mesh)
    volume = Q[:, None] - k[:, None] * u.values[mesh.cells]
    h_nodes = gamma_u_data(mesh, h)
    robin = -coeffs.alpha * (u.values - coeffs.T_a) - 1j * (u.values - h_nodes)
    return _residual_data(mesh, coeffs, u.values, volume, robin)


def adjoint_residual(mesh: Mesh, coeffs: PhysicalCoefficients, p: ComplexNodalField,
                     u: ComplexNodalField) -> ResidualData:
    """R^a = uⁱ - k p_h; em Γu J^a = -σ∂_n p - α p + i p"""
    p.check(mesh)
    u.check(mesh)
    _, k, _ = coeffs.cell_values(mesh)
    volume = u.imag[mesh.cells] - k[:, None] * p.values[mesh.cells]
    robin = -coeffs.alpha * p.values + 1j * p.values
    return _residual_data(mesh, coeffs, p.values, volume, robin)


def _p1_squared_integral(mesh: Mesh, nodal: np.ndarray) -> np.ndarray:
    """∫_K |f|² para f linear com valores complexos nos vértices"""
    return mesh.cell_areas / 12.0 * (np.sum(np.abs(nodal) ** 2, axis=1)
                                     + np.abs(nodal.sum(axis=1)) ** 2)


def _edge_squared_integrals(data: ResidualData) -> np.ndarray:
    points, weights = _GAUSS2
    values = (data.edge[..., 0, None] * (1.0 - points) + data.edge[..., 1, None] * points)
    return data.side_lengths * (np.abs(values) ** 2 @ weights)


def local_indicators(mesh: Mesh, data: ResidualData) -> np.ndarray:
    """(h_K² ∫_K |R|² + Σ_γ h_γ ∫_γ |J|²)^{1/2} por célula"""
    squared = (mesh.h_K ** 2 * _p1_squared_integral(mesh, data.volume)
               + np.sum(data.side_lengths * _edge_squared_integrals(data), axis=1))
    return np.sqrt(np.maximum(squared, 0.0))


def state_indicators(mesh: Mesh, coeffs: PhysicalCoefficients, u: ComplexNodalField,
                     h: BoundaryProfile) -> np.ndarray:
    return local_indicators(mesh, state_residual(mesh, coeffs, u, h))


def adjoint_indicators(mesh: Mesh, coeffs: PhysicalCoefficients, p: ComplexNodalField,
                       u: ComplexNodalField) -> np.ndarray:
    return local_indicators(mesh, adjoint_residual(mesh, coeffs, p, u))


def objective_indicators(eta: np.ndarray, mu: np.ndarray) -> Tuple[np.ndarray, float]:
    """ξ_K = (κ/2 η_K² + 1/(2κ) μ_K²)^{1/2} com κ = √(max η / max μ)"""
    eta, mu = np.asarray(eta, float), np.asarray(mu, float)
    if eta.shape != mu.shape:
        raise ValueError(f"η e μ com formatos diferentes: {eta.shape} != {mu.shape}")
    mu_max = float(mu.max(initial=0.0))
    if mu_max <= 0.0:
        logger.warning("μ identicamente nulo; κ indefinido, marcação apenas por η")
        return eta.copy(), math.nan
    kappa = math.sqrt(float(eta.max(initial=0.0)) / mu_max)
    if kappa == 0.0:
        logger.warning("η identicamente nulo; ξ reduzido a μ")
        return mu.copy(), kappa
    xi = np.sqrt(0.5 * kappa * eta ** 2 + 0.5 / kappa * mu ** 2)
    return xi, kappa


def mark_cells(indicators: np.ndarray, fraction: float) -> np.ndarray:
    """Menor conjunto com Σ ξ_K² ≥ fraction·Σ ξ², empates resolvidos pelo índice da célula"""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction deve estar em (0, 1]: {fraction}")
    squared = np.asarray(indicators, float) ** 2
    total = squared.sum()
    if total <= 0.0:
        return np.zeros(0, dtype=np.int64)
    if fraction == 1.0:
        return np.flatnonzero(squared > 0.0)
    order = np.lexsort((np.arange(len(squared)), -squared))
    cumulative = np.cumsum(squared[order])
    count = int(np.searchsorted(cumulative, fraction * total, side="left")) + 1
    return np.sort(order[:min(count, len(order))])


def residual_functional(mesh: Mesh, data: ResidualData) -> np.ndarray:
    """r(ψ_i) = Σ_K ∫_K R ψ_i + Σ_γ ∫_γ J ψ_i para cada função base P1"""
    volume = data.volume
    local = (mesh.cell_areas / 12.0)[:, None] * (volume + volume.sum(axis=1, keepdims=True))
    result = np.zeros(mesh.n_vertices, dtype=complex)
    np.add.at(result, mesh.cells.ravel(), local.ravel())

    points, weights = _GAUSS2
    values = data.edge[..., 0, None] * (1.0 - points) + data.edge[..., 1, None] * points
    start = data.side_lengths * (values @ (weights * (1.0 - points)))
    end = data.side_lengths * (values @ (weights * points))
    np.add.at(result, data.side_nodes[..., 0].ravel(), start.ravel())
    np.add.at(result, data.side_nodes[..., 1].ravel(), end.ravel())
    return result


def _adjacent_cell(mesh: Mesh, edge: int, from_cell: int) -> int:
    pair = mesh.edge_cells[edge]
    if from_cell not in pair or np.any(pair < 0):
        raise MeshError(f"Aresta {edge} não é interior à célula {from_cell}")
    return int(pair[1] if pair[0] == from_cell else pair[0])


def _outward_normal(mesh: Mesh, cell: int, edge: int) -> np.ndarray:
    side = int(np.flatnonzero(mesh.cell_edges[cell] == edge)[0])
    return _side_normals(mesh, _side_nodes(mesh)[cell:cell + 1])[0, side]


def _flux_difference(mesh: Mesh, coeffs: PhysicalCoefficients, u: ComplexNodalField,
                     cell: int, other: int) -> np.ndarray:
    sigma, _, _ = coeffs.cell_values(mesh)
    grads = cell_gradients(mesh, u.values)
    return sigma[cell] * grads[cell] - sigma[other] * grads[other]


def interface_flux_jump(mesh: Mesh, coeffs: PhysicalCoefficients, u: ComplexNodalField,
                        edge: int, from_cell: int) -> complex:
    """-½(σ_K∇u_K - σ_K'∇u_K')·n_K visto da célula from_cell"""
    other = _adjacent_cell(mesh, edge, from_cell)
    normal = _outward_normal(mesh, from_cell, edge)
    return complex(-0.5 * _flux_difference(mesh, coeffs, u, from_cell, other) @ normal)


def signed_interface_jump(mesh: Mesh, coeffs: PhysicalCoefficients, u: ComplexNodalField,
                          edge: int, from_cell: int) -> complex:
    """
    Salto de fluxo numa aresta de interface com normal fixa ν_e.

    ν_e é a normal externa da célula tumoral, logo o valor visto de Ω₁ é o
    oposto do visto de Ω₀ e os módulos coincidem com interface_flux_jump.
    """
    other = _adjacent_cell(mesh, edge, from_cell)
    regions = mesh.cell_region[[from_cell, other]]
    if regions[0] == regions[1]:
        raise MeshError(f"Aresta {edge} não separa regiões")
    tumor_cell = from_cell if regions[0] == int(Region.TUMOR) else other
    normal = _outward_normal(mesh, tumor_cell, edge)
    return complex(-0.5 * _flux_difference(mesh, coeffs, u, from_cell, other) @ normal)


def estimate(mesh: Mesh, coeffs: PhysicalCoefficients, u: ComplexNodalField,
             p: ComplexNodalField, h: BoundaryProfile) -> IndicatorSet:
    eta = state_indicators(mesh, coeffs, u, h)
    mu = adjoint_indicators(mesh, coeffs, p, u)
    xi, kappa = objective_indicators(eta, mu)
    indicators = IndicatorSet(eta=eta, mu=mu, xi=xi, kappa=kappa)
    logger.info("indicadores calculados", eta=indicators.eta_global, mu=indicators.mu_global,
                xi=indicators.xi_global, kappa=kappa, n_cells=mesh.n_cells)
    return indicators


def touches_interface(mesh: Mesh) -> np.ndarray:
    on_interface = np.zeros(mesh.n_vertices, dtype=bool)
    on_interface[mesh.interface_vertices] = True
    return on_interface[mesh.cells].any(axis=1)


def indicators_frame(mesh: Mesh, indicators: IndicatorSet,
                     marked: Optional[np.ndarray] = None) -> pd.DataFrame:
    frame = pd.DataFrame({
        "cell_id": np.arange(mesh.n_cells),
        "region": mesh.cell_region,
        "eta": indicators.eta,
        "mu": indicators.mu,
        "xi": indicators.xi,
        "touches_interface": touches_interface(mesh).astype(int),
    })
    if marked is not None:
        frame["marked"] = np.isin(frame["cell_id"], marked).astype(int)
    return frame
