# ThermoShape - Monitoramento e Métricas
# Contadores Prometheus de solves lineares, busca linear e remalhamento

import threading
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, Optional

import structlog

# Prometheus e métricas
from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile

logger = structlog.get_logger("ThermoShape.Monitoring")

SOLVE_BUCKETS = (0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 30.0)


class MetricsCollector:
    """Coletor de métricas dos solvers e do laço de reconstrução"""

    def __init__(self, config: Optional[Dict[str, Any]] = None):
        self.config = config or {}
        self.registry = CollectorRegistry()

        self.linear_solves = Counter(
            'thermoshape_linear_solves_total',
            'Linear systems solved',
            ['kind'],
            registry=self.registry
        )

        self.solve_duration = Histogram(
            'thermoshape_solve_duration_seconds',
            'Factorization and solve time',
            ['kind'],
            buckets=self.config.get("solve_buckets", SOLVE_BUCKETS),
            registry=self.registry
        )

        self.line_search_trials = Counter(
            'thermoshape_line_search_trials_total',
            'Line search trial steps by outcome',
            ['outcome'],
            registry=self.registry
        )

        self.remeshes = Counter(
            'thermoshape_remesh_total',
            'Remeshing operations during reconstruction',
            registry=self.registry
        )

        self.iterations = Counter(
            'thermoshape_iterations_total',
            'Accepted descent iterations',
            registry=self.registry
        )

        self.objective = Gauge(
            'thermoshape_objective',
            'Current penalized CCBM objective',
            registry=self.registry
        )

        self.rho = Gauge(
            'thermoshape_rho',
            'Current volume penalization weight',
            registry=self.registry
        )

    @contextmanager
    def time_solve(self, kind: str) -> Iterator[None]:
        """Mede a duração de um solve linear"""
        start = time.perf_counter()
        try:
            yield
        finally:
            self.linear_solves.labels(kind=kind).inc()
            self.solve_duration.labels(kind=kind).observe(time.perf_counter() - start)

    def record_trial(self, outcome: str):
        self.line_search_trials.labels(outcome=outcome).inc()

    def record_iteration(self, penalized: float, rho: float):
        self.iterations.inc()
        self.objective.set(penalized)
        self.rho.set(rho)

    def record_remesh(self):
        self.remeshes.inc()

    def solve_count(self, kind: str) -> float:
        value = self.registry.get_sample_value('thermoshape_linear_solves_total', {'kind': kind})
        return value or 0.0

    def write_textfile(self, path: Path):
        """Exporta o registro no formato texto do Prometheus"""
        write_to_textfile(str(path), self.registry)
        logger.info("métricas exportadas", path=str(path))


_collector: Optional[MetricsCollector] = None
_collector_lock = threading.Lock()


def get_collector() -> MetricsCollector:
    """Coletor padrão do processo"""
    global _collector
    with _collector_lock:
        if _collector is None:
            _collector = MetricsCollector()
        return _collector


def reset_collector(config: Optional[Dict[str, Any]] = None) -> MetricsCollector:
    """Substitui o coletor padrão por um registro novo"""
    global _collector
    with _collector_lock:
        _collector = MetricsCollector(config)
        return _collector
