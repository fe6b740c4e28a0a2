#!/usr/bin/env python3
"""
ThermoShape CLI - Ferramenta de linha de comando
"""

import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import click
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from thermoshape.thermoshape_config import Command, RunConfig, Settings, configure_logging
from thermoshape.thermoshape_datagen import ExperimentSpec
from thermoshape.thermoshape_main import TaskResult, TaskStatus, run

console = Console()


def emit_error(kind: str, message: str):
    """Linha única de erro legível por máquina em stderr"""
    text = " ".join(str(message).split()).replace('"', "'")
    click.echo(f'error={kind} message="{text}"', err=True)


def _validation_message(error: ValidationError) -> str:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first.get("loc", ()))
    return f"{location}: {first['msg']}" if location else first["msg"]


def _format(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, (dict, list)):
        return json.dumps(value, default=str)
    return str(value)


def show_result(result: TaskResult):
    table = Table(title=f"ThermoShape - {result.task_id}")
    table.add_column("Campo", style="cyan")
    table.add_column("Valor", style="green")
    table.add_row("Status", "🟢 Concluído" if result.status == TaskStatus.COMPLETED else "🔴 Falhou")
    for key, value in sorted((result.result or {}).items()):
        table.add_row(key, _format(value))
    if result.execution_time is not None:
        table.add_row("Tempo (s)", f"{result.execution_time:.2f}")
    table.add_row("Artefatos", ", ".join(result.artifacts) or "-")
    console.print(table)


def execute(config_data: Dict[str, Any], settings: Settings,
            experiment: Optional[ExperimentSpec] = None) -> int:
    """Valida a configuração, executa e devolve o código de saída"""
    try:
        config = RunConfig.model_validate(config_data)
    except ValidationError as e:
        emit_error("config", _validation_message(e))
        return 2
    result = run(config, settings, experiment)
    if result.status == TaskStatus.FAILED and result.result is None:
        emit_error(result.error_kind or "internal", result.error or "")
        return result.exit_code
    show_result(result)
    if result.exit_code:
        emit_error(result.error_kind or "internal", result.error or "")
    return result.exit_code


def common_options(func):
    options = [
        click.option("--spec", required=True, help="Experimento predefinido (nome ou prefixo) ou arquivo JSON"),
        click.option("--out", "output_dir", required=True, type=click.Path(path_type=Path),
                     help="Diretório de saída"),
        click.option("--seed", type=int, default=None, help="Semente do ruído"),
        click.option("--r0", default=None, help="Raio do chute inicial (lista no sweep)"),
        click.option("--delta", default=None, help="Nível de ruído δ (lista no sweep)"),
        click.option("--cb", default=None, help="Peso c_b do produto de Riesz (lista no sweep)"),
        click.option("--beta", type=float, default=None, help="β do princípio de balanceamento"),
        click.option("--rho", type=float, default=None, help="Peso de volume fixo ρ"),
        click.option("--s", "s", type=float, default=None, help="Fator do passo inicial"),
        click.option("--kmax", type=int, default=None, help="Máximo de iterações"),
        click.option("--metrics", is_flag=True, default=False, help="Grava metrics.prom"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _config_data(command: Command, options: Dict[str, Any]) -> Dict[str, Any]:
    data = {"command": command.value}
    data.update({key: value for key, value in options.items() if value is not None})
    return data


@click.group()
@click.pass_context
def cli(ctx):
    """🌡️ ThermoShape - Interface de Linha de Comando"""
    ctx.ensure_object(Settings)


@cli.command()
@common_options
@click.pass_obj
def forward(settings: Settings, **options):
    """Gera a medição sintética (perfil de Γu e campo VTK)"""
    return execute(_config_data(Command.FORWARD, options), settings)


@cli.command()
@common_options
@click.pass_obj
def reconstruct(settings: Settings, **options):
    """Reconstrói a inclusão a partir do perfil medido"""
    return execute(_config_data(Command.RECONSTRUCT, options), settings)


@cli.command()
@common_options
@click.pass_obj
def sensitivity(settings: Settings, **options):
    """Sensibilidade à malha: oráculo de diferenças finitas e efeito de c_b"""
    return execute(_config_data(Command.SENSITIVITY, options), settings)


@cli.command()
@common_options
@click.option("--fraction", type=float, default=None, help="Fração de Dörfler para marcação")
@click.pass_obj
def estimate(settings: Settings, **options):
    """Indicadores a posteriori η, μ e ξ no chute inicial"""
    return execute(_config_data(Command.ESTIMATE, options), settings)


@cli.command()
@common_options
@click.pass_obj
def sweep(settings: Settings, **options):
    """Varredura de reconstruções sobre listas de r0, δ e c_b"""
    return execute(_config_data(Command.SWEEP, options), settings)


@cli.command()
@click.argument("manifest", type=click.Path(path_type=Path))
@click.option("--out", "output_dir", required=True, type=click.Path(path_type=Path))
@click.pass_obj
def replay(settings: Settings, manifest: Path, output_dir: Path):
    """Reexecuta uma execução a partir do seu run_manifest.json"""
    try:
        data = json.loads(manifest.read_text(encoding="utf-8"))
    except OSError as e:
        emit_error("io", str(e))
        return 4
    except json.JSONDecodeError as e:
        emit_error("config", f"Manifesto inválido: {str(e)}")
        return 2
    try:
        experiment = ExperimentSpec.model_validate(data["experiment"])
        config_data = {**data["run_config"], "output_dir": output_dir}
    except KeyError as e:
        emit_error("config", f"Manifesto sem o campo {e}")
        return 2
    except ValidationError as e:
        emit_error("config", _validation_message(e))
        return 2
    return execute(config_data, settings, experiment)


def main(argv: Optional[List[str]] = None) -> int:
    """Ponto de entrada: devolve 0 em sucesso, 2 configuração, 3 numérico, 4 E/S"""
    try:
        settings = Settings()
    except ValidationError as e:
        emit_error("config", _validation_message(e))
        return 2
    configure_logging(settings.log_level)
    try:
        code = cli.main(args=argv, prog_name="thermoshape", standalone_mode=False, obj=settings)
    except click.ClickException as e:
        emit_error("config", e.format_message())
        return 2
    except click.Abort:
        return 1
    return code if isinstance(code, int) else 0


if __name__ == "__main__":
    sys.exit(main())
