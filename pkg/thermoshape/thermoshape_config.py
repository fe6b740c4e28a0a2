# ThermoShape - Configuração
# Settings de ambiente, configuração de execução e logging estruturado

import logging
import os
import sys
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional

import structlog
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


_LEVELS = {
    "DEBUG": logging.DEBUG,
    "INFO": logging.INFO,
    "WARNING": logging.WARNING,
    "ERROR": logging.ERROR,
    "CRITICAL": logging.CRITICAL,
}


class Settings(BaseSettings):
    """Variáveis de ambiente THERMOSHAPE_*"""

    model_config = SettingsConfigDict(env_prefix="THERMOSHAPE_", extra="ignore")

    threads: int = Field(default=1, ge=1)
    log_level: str = "INFO"

    @field_validator("log_level")
    @classmethod
    def _known_level(cls, value: str) -> str:
        level = value.upper()
        if level not in _LEVELS:
            raise ValueError(f"Nível de log desconhecido: {value}")
        return level


def configure_logging(level: str = "INFO") -> None:
    """Configura structlog para stderr com filtro de nível"""
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(
            _LEVELS.get(level.upper(), logging.INFO)
        ),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


class Command(str, Enum):
    """Comandos da CLI"""
    FORWARD = "forward"
    RECONSTRUCT = "reconstruct"
    SENSITIVITY = "sensitivity"
    ESTIMATE = "estimate"
    SWEEP = "sweep"


class RunConfig(BaseModel):
    """Parâmetros efetivos de uma execução da CLI"""

    model_config = ConfigDict(extra="forbid")

    command: Command
    spec: str
    output_dir: Path
    seed: Optional[int] = Field(default=None, ge=0)
    r0: List[float] = Field(default_factory=list)
    delta: List[float] = Field(default_factory=list)
    cb: List[float] = Field(default_factory=list)
    beta: Optional[float] = None
    rho: Optional[float] = None
    s: Optional[float] = None
    kmax: Optional[int] = Field(default=None, ge=1)
    fraction: float = Field(default=0.5, gt=0.0, le=1.0)
    metrics: bool = False

    @field_validator("r0", "delta", "cb", mode="before")
    @classmethod
    def _split_list(cls, value: Any) -> Any:
        # Aceita "0.004,0.005" vindo da linha de comando
        if value is None:
            return []
        if isinstance(value, str):
            return [float(item) for item in value.split(",") if item.strip()]
        if isinstance(value, (int, float)):
            return [float(value)]
        return value

    @model_validator(mode="after")
    def _check_overrides(self) -> "RunConfig":
        if any(r <= 0 for r in self.r0):
            raise ValueError("r0 deve ser positivo")
        if any(d < 0 for d in self.delta):
            raise ValueError("delta deve ser não negativo")
        if any(not 0.0 < c <= 1.0 for c in self.cb):
            raise ValueError("cb deve estar em (0, 1]")
        if self.beta is not None and self.beta <= 1.0:
            raise ValueError("beta deve ser maior que 1")
        if self.rho is not None and self.rho < 0.0:
            raise ValueError("rho deve ser não negativo")
        if self.beta is not None and self.rho is not None:
            raise ValueError("informe apenas um entre beta (balanceamento) e rho (fixo)")
        if self.s is not None and self.s <= 0.0:
            raise ValueError("s deve ser positivo")
        if self.command != Command.SWEEP:
            for name in ("r0", "delta", "cb"):
                if len(getattr(self, name)) > 1:
                    raise ValueError(f"{name} aceita lista apenas no comando sweep")
        return self

    def first(self, name: str) -> Optional[float]:
        """Primeiro valor de uma opção em lista, ou None"""
        values = getattr(self, name)
        return values[0] if values else None

    def opt_overrides(self) -> Dict[str, Any]:
        """Sobrescritas para OptConfig a partir das opções da CLI"""
        overrides: Dict[str, Any] = {}
        if self.cb:
            overrides["c_b"] = self.cb[0]
        if self.s is not None:
            overrides["s"] = self.s
        if self.kmax is not None:
            overrides["K_max"] = self.kmax
        if self.beta is not None:
            overrides["rho_mode"] = "balancing"
            overrides["beta"] = self.beta
        if self.rho is not None:
            overrides["rho_mode"] = "fixed"
            overrides["rho"] = self.rho
        if self.seed is not None:
            overrides["noise_seed"] = self.seed
        return overrides

    def ensure_output_dir(self) -> Path:
        """Cria o diretório de saída e verifica permissão de escrita"""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        if not os.access(self.output_dir, os.W_OK):
            raise PermissionError(f"Diretório de saída sem permissão de escrita: {self.output_dir}")
        return self.output_dir
