# ThermoShape - Sistema Principal
# Orquestra experimentos (forward, reconstruct, sensitivity, estimate, sweep) e grava artefatos

import itertools
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
import structlog
from pydantic import ValidationError

from . import __version__
from .thermoshape_config import Command, RunConfig, Settings
from .thermoshape_datagen import (
    ExperimentSpec,
    Measurement,
    resolve_experiment,
    shared_vertex_fraction,
    simulate_measurement,
)
from .thermoshape_errors import ThermoShapeError
from .thermoshape_estimators import estimate, indicators_frame, mark_cells
from .thermoshape_fem import BoundaryProfile, ComplexNodalField
from .thermoshape_io import (
    list_artifacts,
    write_cell_list,
    write_frame,
    write_json,
    write_mesh,
    write_profile,
    write_vtk,
)
from .thermoshape_mesh import Mesh, build_rect_mesh, refine_uniform
from .thermoshape_monitoring import get_collector, reset_collector
from .thermoshape_sensitivity import (
    DEFAULT_T_LIST,
    bump_field,
    cb_effect_sweep,
    cb_spread,
    fd_order,
    grad_norm_spread,
    reports_frame,
    stability_sweep,
    stable_step_check,
)
from .thermoshape_shapeopt import (
    CCBMProblem,
    OptConfig,
    ReconstructionTrace,
    TerminationReason,
    TraceEntry,
    init_guess_from_profile,
    reconstruct,
)

logger = structlog.get_logger("ThermoShape.Main")

MANIFEST_NAME = "run_manifest.json"
SENSITIVITY_LEVELS = 3
CB_SWEEP_VALUES = (1e-5, 0.5, 1.0)
CB_SWEEP_NOISE = 0.05
STABLE_STEP = 1e-3


class TaskStatus(Enum):
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class TaskResult:
    """Resultado de execução de um comando"""
    task_id: str
    status: TaskStatus
    result: Optional[Dict[str, Any]] = None
    error: Optional[str] = None
    error_kind: Optional[str] = None
    exit_code: int = 0
    execution_time: Optional[float] = None
    artifacts: List[str] = field(default_factory=list)
    logs: List[str] = field(default_factory=list)


class ThermoShapeRunner:
    """
    Executor de experimentos do ThermoShape
    Resolve a especificação, aplica sobrescritas e grava artefatos reprodutíveis
    """

    def __init__(self, config: RunConfig, settings: Optional[Settings] = None,
                 experiment: Optional[ExperimentSpec] = None):
        self.config = config
        self.settings = settings or Settings()
        self._experiment = experiment
        self.logger = logger.bind(command=config.command.value)

    # Resolução de parâmetros

    def experiment(self) -> ExperimentSpec:
        """Especificação efetiva (sobrescritas de δ e semente aplicadas)"""
        base = self._experiment or resolve_experiment(self.config.spec)
        return base.with_overrides(delta=self.config.first("delta"), seed=self.config.seed)

    def opt_config(self, spec: ExperimentSpec) -> OptConfig:
        return OptConfig(**{**spec.opt_overrides, **self.config.opt_overrides()})

    def measurement_spec(self, spec: ExperimentSpec, cfg: OptConfig) -> ExperimentSpec:
        """Experimento com a semente de ruído da configuração de otimização, se houver"""
        return spec.with_overrides(seed=cfg.noise_seed)

    def initial_radius(self, spec: ExperimentSpec) -> float:
        return self.config.first("r0") or spec.radius

    def _manifest(self, spec: ExperimentSpec, out: Path, extra: Optional[Dict[str, Any]] = None) -> Path:
        run_config = self.config.model_dump(mode="json", exclude={"output_dir"})
        manifest = {
            "version": __version__,
            "command": self.config.command.value,
            "run_config": run_config,
            "experiment": spec.model_dump(mode="json"),
            "seeds": {"noise": spec.seed},
            **(extra or {}),
        }
        return write_json(manifest, out / MANIFEST_NAME)

    # Comandos

    def execute(self) -> TaskResult:
        """Executa o comando configurado e converte falhas em códigos de saída"""
        task_id = f"{self.config.command.value}:{self.config.spec}"
        start_time = time.perf_counter()
        reset_collector()
        try:
            out = self.config.ensure_output_dir()
            spec = self.experiment()
            self.logger.info("execução iniciada", experiment=spec.name, out=str(out))
            handler = {
                Command.FORWARD: self.run_forward,
                Command.RECONSTRUCT: self.run_reconstruct,
                Command.SENSITIVITY: self.run_sensitivity,
                Command.ESTIMATE: self.run_estimate,
                Command.SWEEP: self.run_sweep,
            }[self.config.command]
            result = handler(spec, out)
            if self.config.metrics:
                get_collector().write_textfile(out / "metrics.prom")
            status, error, kind, code = TaskStatus.COMPLETED, None, None, 0
            if result.get("termination") == TerminationReason.ERROR.value:
                status, error, kind, code = TaskStatus.FAILED, result.get("message"), "solver", 3
            return TaskResult(task_id=task_id, status=status, result=result, error=error,
                              error_kind=kind, exit_code=code,
                              execution_time=time.perf_counter() - start_time,
                              artifacts=list_artifacts(out),
                              logs=[f"Comando {self.config.command.value} concluído"])
        except ValidationError as e:
            return self._failure(task_id, "config", 2, f"{e.error_count()} erro(s) de validação: "
                                 f"{e.errors()[0]['msg']}", start_time)
        except ThermoShapeError as e:
            return self._failure(task_id, e.kind, e.exit_code, str(e), start_time)
        except OSError as e:
            return self._failure(task_id, "io", 4, str(e), start_time)
        except ValueError as e:
            return self._failure(task_id, "config", 2, str(e), start_time)
        except Exception as e:
            return self._failure(task_id, "internal", 1, f"{type(e).__name__}: {str(e)}", start_time)

    def _failure(self, task_id: str, kind: str, code: int, message: str, start_time: float) -> TaskResult:
        self.logger.error(f"Erro na execução: {message}", kind=kind)
        return TaskResult(task_id=task_id, status=TaskStatus.FAILED, error=message, error_kind=kind,
                          exit_code=code, execution_time=time.perf_counter() - start_time,
                          logs=[f"Falha: {message}"])

    def run_forward(self, spec: ExperimentSpec, out: Path) -> Dict[str, Any]:
        measurement = simulate_measurement(spec)
        write_profile(measurement.noisy, out / "measurement.csv")
        write_profile(measurement.clean, out / "measurement_clean.csv")
        write_vtk(measurement.fine_mesh, out / "field.vtk",
                  {"u": measurement.field.astype(complex)})
        summary = {
            "experiment": spec.name,
            "n_samples": int(len(measurement.clean.values)),
            "fine_vertices": measurement.fine_mesh.n_vertices,
            "peak_temperature": float(measurement.clean.values.max()),
            "noise_std": float(spec.delta * np.abs(measurement.clean.values).max()),
        }
        self._manifest(spec, out)
        return summary

    def reconstruct_once(self, spec: ExperimentSpec, measurement: Measurement, r0: float,
                         cfg: OptConfig, out: Path) -> Dict[str, Any]:
        """Chute inicial, reconstrução e artefatos em um diretório"""
        h = measurement.noisy
        guess = init_guess_from_profile(h, spec.depth, r0, top=spec.height)
        mesh0 = build_rect_mesh(spec.width, spec.height, guess, spec.coarse_h)
        coeffs = spec.coeffs

        def snapshot(entry: TraceEntry):
            if entry.iteration % cfg.snapshot_every == 0:
                write_mesh(entry.mesh, out / f"mesh_iter_{entry.iteration:04d}.txt")

        trace = reconstruct(mesh0, coeffs, h, cfg, callback=snapshot)
        write_profile(h, out / "measurement.csv")
        write_mesh(mesh0, out / "initial_mesh.txt")
        write_frame(trace.history_frame(), out / "history.csv")
        self._write_final(trace, coeffs, h, out)

        summary = trace.summary(spec.exact_polygons())
        summary.update({
            "experiment": spec.name,
            "r0": r0,
            "delta": spec.delta,
            "c_b": cfg.c_b,
            "shared_vertex_fraction": shared_vertex_fraction(mesh0, measurement.fine_mesh),
        })
        write_json(summary, out / "summary.json")
        return summary

    def _write_final(self, trace: ReconstructionTrace, coeffs, h: BoundaryProfile, out: Path):
        final_mesh = trace.final.mesh
        write_mesh(final_mesh, out / "final_mesh.txt")
        write_mesh(trace.selected.mesh, out / "selected_mesh.txt")
        fields: Dict[str, ComplexNodalField] = {}
        try:
            problem = CCBMProblem(coeffs, h)
            state = problem.solve(final_mesh)
            fields = {"u": state.u, "p": problem.adjoint(state)}
        except ThermoShapeError as e:
            self.logger.warning(f"Campos finais indisponíveis: {str(e)}")
        write_vtk(final_mesh, out / "final.vtk", fields)

    def run_reconstruct(self, spec: ExperimentSpec, out: Path) -> Dict[str, Any]:
        cfg = self.opt_config(spec)
        spec = self.measurement_spec(spec, cfg)
        measurement = simulate_measurement(spec)
        summary = self.reconstruct_once(spec, measurement, self.initial_radius(spec), cfg, out)
        self._manifest(spec, out, {"opt_config": cfg.model_dump(mode="json")})
        return summary

    def _sensitivity_meshes(self, spec: ExperimentSpec) -> List[Mesh]:
        meshes = [build_rect_mesh(spec.width, spec.height, spec.exact_polygons(), spec.coarse_h)]
        for _ in range(SENSITIVITY_LEVELS - 1):
            meshes.append(refine_uniform(meshes[-1]))
        return meshes

    def run_sensitivity(self, spec: ExperimentSpec, out: Path) -> Dict[str, Any]:
        meshes = self._sensitivity_meshes(spec)
        h = simulate_measurement(spec).noisy
        center = spec.inclusions[0].centroid
        margin = min(center[0], spec.width - center[0], center[1], spec.height - center[1])
        bump = bump_field(center, min(2.0 * spec.radius, 0.9 * margin))
        seed = spec.seed if self.config.seed is None else self.config.seed
        reports = stability_sweep(meshes, spec.coeffs, h, bump, seed=seed, t_list=DEFAULT_T_LIST,
                                  workers=self.settings.threads)
        write_frame(reports_frame(reports), out / "sensitivity.csv")

        noise_levels = sorted({0.0, self.config.first("delta") or CB_SWEEP_NOISE})
        profiles = {delta: simulate_measurement(spec.with_overrides(delta=delta)).noisy
                    for delta in noise_levels}
        c_b_values = self.config.cb or list(CB_SWEEP_VALUES)
        cb_frame = cb_effect_sweep(meshes, spec.coeffs, profiles, c_b_values)
        write_frame(cb_frame, out / "cb_sweep.csv")
        spread = cb_spread(cb_frame)
        write_frame(spread, out / "cb_spread.csv")

        smooth = [r for r in reports if r.field_kind == "smooth"]
        summary = {
            "experiment": spec.name,
            "smooth_spread": grad_norm_spread(reports, "smooth"),
            "rough_spread": grad_norm_spread(reports, "rough"),
            "smooth_fd_orders": [fd_order(r.fd_errors) for r in smooth],
            "stable_step": {
                "t": STABLE_STEP,
                "passed": [stable_step_check(r, STABLE_STEP) for r in smooth],
            },
        }
        write_json(summary, out / "sensitivity_summary.json")
        self._manifest(spec, out)
        return summary

    def run_estimate(self, spec: ExperimentSpec, out: Path) -> Dict[str, Any]:
        measurement = simulate_measurement(spec)
        h = measurement.noisy
        guess = init_guess_from_profile(h, spec.depth, self.initial_radius(spec), top=spec.height)
        mesh = build_rect_mesh(spec.width, spec.height, guess, spec.coarse_h)
        problem = CCBMProblem(spec.coeffs, h)
        state = problem.solve(mesh)
        p = problem.adjoint(state)
        indicators = estimate(mesh, spec.coeffs, state.u, p, h)
        marked = mark_cells(indicators.xi, self.config.fraction)

        write_frame(indicators_frame(mesh, indicators, marked), out / "indicators.csv")
        write_cell_list(marked, out / "marked_cells.csv")
        summary = {**indicators.summary(), "fraction": self.config.fraction,
                   "n_marked": int(len(marked)), "experiment": spec.name}
        write_json(summary, out / "indicators_summary.json")
        write_mesh(mesh, out / "mesh.txt")
        self._manifest(spec, out)
        return summary

    def run_sweep(self, spec: ExperimentSpec, out: Path) -> Dict[str, Any]:
        r0_values = self.config.r0 or [spec.radius]
        delta_values = self.config.delta or [spec.delta]
        spec = self.measurement_spec(spec, self.opt_config(spec))
        cb_values = self.config.cb or [self.opt_config(spec).c_b]
        measurements = {delta: simulate_measurement(spec.with_overrides(delta=delta))
                        for delta in delta_values}
        grid = list(itertools.product(r0_values, delta_values, cb_values))

        def one(point) -> Dict[str, Any]:
            r0, delta, c_b = point
            cfg = self.opt_config(spec).model_copy(update={"c_b": c_b})
            sub = out / f"r0_{r0:g}_delta_{delta:g}_cb_{c_b:g}"
            sub.mkdir(parents=True, exist_ok=True)
            run_spec = spec.model_copy(update={"delta": delta})
            summary = self.reconstruct_once(run_spec, measurements[delta], r0, cfg, sub)
            return {"r0": r0, "delta": delta, "c_b": c_b, "directory": sub.name,
                    "termination": summary["termination"], "iterations": summary["iterations"],
                    "final_J": summary["final_J"], "final_penalized": summary["final_penalized"],
                    "selected_iteration": summary["selected_iteration"],
                    "hausdorff": summary.get("hausdorff", math.nan)}

        with ThreadPoolExecutor(max_workers=self.settings.threads) as pool:
            rows = list(pool.map(one, grid))
        table = pd.DataFrame(rows)
        table["rank"] = table.groupby(["delta", "c_b"])["final_J"].rank(method="first").astype(int)
        write_frame(table, out / "sweep.csv")
        best = table.loc[table["final_J"].idxmin()]
        summary = {"experiment": spec.name, "runs": len(rows),
                   "best": {"r0": float(best["r0"]), "delta": float(best["delta"]),
                            "c_b": float(best["c_b"]), "final_J": float(best["final_J"])}}
        self._manifest(spec, out, {"opt_config": self.opt_config(spec).model_dump(mode="json")})
        return summary


def run(config: RunConfig, settings: Optional[Settings] = None,
        experiment: Optional[ExperimentSpec] = None) -> TaskResult:
    return ThermoShapeRunner(config, settings, experiment).execute()
