# ThermoShape - Geração de Dados Sintéticos
# Problema direto em malha fina, ruído gaussiano e experimentos predefinidos

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.spatial import cKDTree

from .thermoshape_errors import ConfigError
from .thermoshape_fem import BoundaryProfile, PhysicalCoefficients, solve_forward_real
from .thermoshape_mesh import (
    DEFAULT_CLEARANCE,
    Mesh,
    build_rect_mesh,
    circle_polygon,
    polar_polygon,
    validate_polygon,
)

logger = structlog.get_logger("ThermoShape.DataGen")

DOMAIN_WIDTH = 0.09
DOMAIN_HEIGHT = 0.03


class InclusionShape(BaseModel):
    """Forma exata de uma inclusão: círculo, curva polar r0(1 + a cos(mφ)) ou polígono"""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["circle", "polar", "polygon"] = "circle"
    center: Optional[Tuple[float, float]] = None
    radius: Optional[float] = Field(default=None, gt=0.0)
    amplitude: float = Field(default=0.0, ge=0.0, lt=1.0)
    mode: int = Field(default=0, ge=0)
    points: Optional[List[Tuple[float, float]]] = None
    n_vertices: int = Field(default=64, ge=3)

    @model_validator(mode="after")
    def _check_kind(self) -> "InclusionShape":
        if self.kind == "polygon":
            if not self.points or len(self.points) < 3:
                raise ValueError("Inclusão poligonal requer ao menos 3 pontos")
        elif self.center is None or self.radius is None:
            raise ValueError(f"Inclusão '{self.kind}' requer center e radius")
        return self

    def polygon(self) -> np.ndarray:
        if self.kind == "polygon":
            return np.asarray(self.points, dtype=float)
        if self.kind == "polar":
            return polar_polygon(self.center, self.radius, self.amplitude, self.mode, self.n_vertices)
        return circle_polygon(self.center, self.radius, self.n_vertices)

    @property
    def centroid(self) -> np.ndarray:
        if self.center is not None:
            return np.asarray(self.center, dtype=float)
        return np.asarray(self.points, dtype=float).mean(axis=0)


class TissueParameters(BaseModel):
    """Parâmetros da equação de biocalor (índice 0 = tumor, 1 = tecido sadio)"""

    model_config = ConfigDict(extra="forbid")

    sigma: Tuple[float, float] = (0.75, 0.5)
    perfusion: Tuple[float, float] = (7992.4, 1998.1)
    metabolic: Tuple[float, float] = (42000.0, 4200.0)
    alpha: float = Field(default=10.0, gt=0.0)
    T_a: float = 25.0
    T_b: float = 37.0

    def to_coefficients(self) -> PhysicalCoefficients:
        return PhysicalCoefficients.from_pennes(self.sigma, self.perfusion, self.metabolic,
                                                self.alpha, self.T_a, self.T_b)


class ExperimentSpec(BaseModel):
    """Definição completa de um experimento sintético"""

    model_config = ConfigDict(extra="forbid")

    name: str
    width: float = Field(default=DOMAIN_WIDTH, gt=0.0)
    height: float = Field(default=DOMAIN_HEIGHT, gt=0.0)
    inclusions: List[InclusionShape] = Field(min_length=1)
    tissue: TissueParameters = Field(default_factory=TissueParameters)
    delta: float = Field(default=0.01, ge=0.0)
    seed: int = Field(default=0, ge=0)
    fine_h: float = Field(default=0.0008, gt=0.0)
    coarse_h: float = Field(default=0.002, gt=0.0)
    forward_order: Literal[1, 2] = 2
    guess_depth: Optional[float] = Field(default=None, gt=0.0)
    guess_radius: Optional[float] = Field(default=None, gt=0.0)
    opt_overrides: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_geometry(self) -> "ExperimentSpec":
        if self.fine_h >= self.coarse_h:
            raise ValueError(f"fine_h ({self.fine_h}) deve ser menor que coarse_h ({self.coarse_h})")
        for shape in self.inclusions:
            validate_polygon(shape.polygon(), self.width, self.height, DEFAULT_CLEARANCE)
        return self

    @property
    def coeffs(self) -> PhysicalCoefficients:
        return self.tissue.to_coefficients()

    def exact_polygons(self) -> List[np.ndarray]:
        return [shape.polygon() for shape in self.inclusions]

    @property
    def depth(self) -> float:
        """Profundidade do chute inicial abaixo de Γu"""
        if self.guess_depth is not None:
            return self.guess_depth
        return float(self.height - self.inclusions[0].centroid[1])

    @property
    def radius(self) -> float:
        if self.guess_radius is not None:
            return self.guess_radius
        return float(self.inclusions[0].radius or 0.005)

    def with_overrides(self, **updates: Any) -> "ExperimentSpec":
        """Cópia validada com campos substituídos (valores None são ignorados)"""
        data = self.model_dump()
        data.update({key: value for key, value in updates.items() if value is not None})
        return ExperimentSpec.model_validate(data)


@dataclass
class Measurement:
    """Perfis limpo e ruidoso e o campo direto na malha fina"""
    clean: BoundaryProfile
    noisy: BoundaryProfile
    fine_mesh: Mesh
    field: np.ndarray
    noise: np.ndarray


def simulate_measurement(spec: ExperimentSpec) -> Measurement:
    """Resolve o problema direto na malha fina e adiciona ruído N(0, (δ‖h‖_∞)²)"""
    fine_mesh = build_rect_mesh(spec.width, spec.height, spec.exact_polygons(), spec.fine_h)
    field, clean = solve_forward_real(fine_mesh, spec.coeffs, order=spec.forward_order)
    rng = np.random.default_rng(spec.seed)
    z = rng.standard_normal(len(clean.values))
    noise = spec.delta * float(np.abs(clean.values).max()) * z
    noisy = clean.with_values(clean.values + noise)
    logger.info("medição sintética gerada", experiment=spec.name, delta=spec.delta, seed=spec.seed,
                n_samples=len(clean.values), order=spec.forward_order)
    return Measurement(clean=clean, noisy=noisy, fine_mesh=fine_mesh, field=field, noise=noise)


def generate_measurement(spec: ExperimentSpec) -> BoundaryProfile:
    return simulate_measurement(spec).noisy


def shared_vertex_fraction(coarse: Mesh, fine: Mesh, samples: int = 100,
                           rng: Optional[np.random.Generator] = None,
                           tol: float = 1e-12) -> float:
    """Fração de vértices interiores amostrados da malha grossa que coincidem com vértices da fina"""
    rng = rng or np.random.default_rng(0)
    interior = np.flatnonzero(~coarse.boundary_mask)
    if len(interior) == 0:
        return 0.0
    chosen = rng.choice(interior, size=min(samples, len(interior)), replace=False)
    distance, _ = cKDTree(fine.vertices).query(coarse.vertices[chosen])
    return float(np.mean(distance <= tol))


def builtin_experiments() -> Dict[str, ExperimentSpec]:
    """Experimentos predefinidos: círculos raso e profundo, formas não convexas e duas inclusões"""
    nonconvex_center = (0.045, 0.018)
    nonconvex = {
        "a": (0.15, 2),   # convexa
        "b": (0.3, 2),    # amendoim
        "c": (0.6, 1),    # rim
        "d": (0.35, 4),   # borboleta
    }
    specs = [
        ExperimentSpec(
            name="test1_shallow_circle",
            inclusions=[InclusionShape(kind="circle", center=(0.045, 0.020), radius=0.005)],
            guess_depth=0.010,
            guess_radius=0.005,
        ),
        ExperimentSpec(
            name="test2_deep_small_circle",
            inclusions=[InclusionShape(kind="circle", center=(0.045, 0.015), radius=0.003)],
            guess_depth=0.015,
            guess_radius=0.003,
        ),
    ]
    for suffix, (amplitude, mode) in nonconvex.items():
        specs.append(ExperimentSpec(
            name=f"test3_nonconvex_{suffix}",
            inclusions=[InclusionShape(kind="polar", center=nonconvex_center, radius=0.005,
                                       amplitude=amplitude, mode=mode)],
            delta=0.02,
            guess_depth=DOMAIN_HEIGHT - nonconvex_center[1],
            guess_radius=0.005,
            opt_overrides={"c_b": 1.0},
        ))
    specs.append(ExperimentSpec(
        name="multi2_circles",
        inclusions=[InclusionShape(kind="circle", center=(0.030, 0.020), radius=0.004),
                    InclusionShape(kind="circle", center=(0.060, 0.018), radius=0.004)],
        guess_depth=0.011,
        guess_radius=0.004,
    ))
    return {spec.name: spec for spec in specs}


def resolve_experiment(spec: str) -> ExperimentSpec:
    """Nome predefinido, prefixo único de nome, ou caminho de arquivo JSON"""
    path = Path(spec)
    if path.suffix == ".json" or path.is_file():
        try:
            return ExperimentSpec.model_validate_json(path.read_text(encoding="utf-8"))
        except ValidationError as e:
            raise ConfigError(f"Especificação inválida em {path}: {e.error_count()} erro(s): "
                              f"{e.errors()[0]['msg']}") from e

    experiments = builtin_experiments()
    if spec in experiments:
        return experiments[spec]
    matches = [name for name in experiments if name.startswith(spec)]
    if len(matches) == 1:
        return experiments[matches[0]]
    if not matches:
        raise ConfigError(f"Experimento desconhecido: {spec}")
    raise ConfigError(f"Prefixo ambíguo '{spec}': {', '.join(sorted(matches))}")
