# ThermoShape - Entrada e Saída
# Malhas em texto, VTK via meshio, perfis e históricos CSV, JSON de resumo

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import meshio
import numpy as np
import pandas as pd
import structlog

from .thermoshape_errors import MeshError
from .thermoshape_fem import BoundaryProfile, ComplexNodalField
from .thermoshape_mesh import Mesh, assemble_mesh

logger = structlog.get_logger("ThermoShape.IO")

FLOAT_FORMAT = "%.17g"
TARGET_H_KEY = "target_h"

PathLike = Union[str, Path]


def write_mesh(mesh: Mesh, path: PathLike) -> Path:
    """
    Grava a malha em texto.

    Cabeçalho `nv nc nb ni`, depois linhas de vértice `x y`, de célula
    `v0 v1 v2 região`, de aresta de fronteira `v0 v1 rótulo` e de aresta de
    interface `v0 v1`. Uma linha final `target_h h` guarda o tamanho alvo.
    Floats em repr: ida e volta exata.
    """
    path = Path(path)
    lines = [f"{mesh.n_vertices} {mesh.n_cells} {len(mesh.boundary_edges)} {len(mesh.interface_edges)}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [f"{a} {b} {c} {r}" for (a, b, c), r in zip(mesh.cells.tolist(), mesh.cell_region.tolist())]
    lines += [f"{a} {b} {t}" for (a, b), t in zip(mesh.boundary_edges.tolist(), mesh.boundary_tags.tolist())]
    lines += [f"{a} {b}" for a, b in mesh.interface_edges.tolist()]
    lines.append(f"{TARGET_H_KEY} {mesh.target_h!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _int_rows(lines: List[str], width: int) -> np.ndarray:
    rows = [line.split() for line in lines]
    if any(len(row) != width for row in rows):
        raise ValueError(f"esperadas {width} colunas")
    return np.array([[int(v) for v in row] for row in rows], dtype=np.int64).reshape(-1, width)


def read_mesh(path: PathLike) -> Mesh:
    """Lê o formato de write_mesh; rótulos de fronteira e interface são preservados"""
    path = Path(path)
    lines = [line.strip() for line in path.read_text(encoding="utf-8").splitlines()]
    lines = [line for line in lines if line]
    try:
        header = [int(v) for v in lines[0].split()]
        if len(header) != 4 or min(header) < 0:
            raise ValueError("cabeçalho deve ser 'nv nc nb ni'")
        nv, nc, nb, ni = header
        cursor = 1
        vertex_rows = [line.split() for line in lines[cursor:cursor + nv]]
        if len(vertex_rows) != nv or any(len(row) != 2 for row in vertex_rows):
            raise ValueError("linhas de vértice incompletas")
        vertices = np.array([[float(v) for v in row] for row in vertex_rows]).reshape(-1, 2)
        cursor += nv
        cells = _int_rows(lines[cursor:cursor + nc], 4)
        cursor += nc
        boundary = _int_rows(lines[cursor:cursor + nb], 3)
        cursor += nb
        interface = _int_rows(lines[cursor:cursor + ni], 2)
        cursor += ni
        if len(cells) != nc or len(boundary) != nb or len(interface) != ni:
            raise ValueError("arquivo truncado")
        target_h = 0.0
        for line in lines[cursor:]:
            key, value = line.split()
            if key != TARGET_H_KEY:
                raise ValueError(f"linha inesperada: {line}")
            target_h = float(value)
    except (IndexError, ValueError) as e:
        logger.error(f"Erro lendo malha {path}: {str(e)}")
        raise MeshError(f"Arquivo de malha inválido em {path}: {str(e)}") from e
    return assemble_mesh(vertices, cells[:, :3], cells[:, 3], boundary[:, :2], boundary[:, 2],
                         interface, target_h)


def write_vtk(mesh: Mesh, path: PathLike,
              fields: Optional[Dict[str, Union[np.ndarray, ComplexNodalField]]] = None) -> Path:
    """VTK legado ASCII; campos complexos são separados em *_re e *_im"""
    path = Path(path)
    point_data: Dict[str, np.ndarray] = {}
    for name, values in (fields or {}).items():
        if isinstance(values, ComplexNodalField):
            values.check(mesh)
            values = values.values
        values = np.asarray(values)
        if np.iscomplexobj(values):
            point_data[f"{name}_re"] = np.ascontiguousarray(values.real, dtype=float)
            point_data[f"{name}_im"] = np.ascontiguousarray(values.imag, dtype=float)
        else:
            point_data[name] = np.ascontiguousarray(values, dtype=float)
    points = np.column_stack([mesh.vertices, np.zeros(mesh.n_vertices)])
    vtk_mesh = meshio.Mesh(
        points=points,
        cells=[("triangle", np.asarray(mesh.cells))],
        point_data=point_data,
        cell_data={"region": [np.asarray(mesh.cell_region, dtype=np.int32)]},
    )
    meshio.write(str(path), vtk_mesh, file_format="vtk", binary=False)
    return path


def profile_frame(profile: BoundaryProfile) -> pd.DataFrame:
    return pd.DataFrame({"arc_position_m": profile.arc, "temperature_C": profile.values})


def write_profile(profile: BoundaryProfile, path: PathLike) -> Path:
    return write_frame(profile_frame(profile), path)


def read_profile(path: PathLike) -> BoundaryProfile:
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = {"arc_position_m", "temperature_C"} - set(frame.columns)
    if missing:
        raise ValueError(f"Colunas ausentes no perfil {path}: {sorted(missing)}")
    return BoundaryProfile(frame["arc_position_m"].to_numpy(float), frame["temperature_C"].to_numpy(float))


def write_frame(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def write_cell_list(cells: np.ndarray, path: PathLike) -> Path:
    return write_frame(pd.DataFrame({"cell_id": np.asarray(cells, dtype=np.int64)}), path)


def _to_builtin(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "value"):
        return value.value
    raise TypeError(f"Tipo não serializável: {type(value).__name__}")


def write_json(data: Dict[str, Any], path: PathLike) -> Path:
    """JSON determinístico (chaves ordenadas)"""
    path = Path(path)
    text = json.dumps(data, indent=2, sort_keys=True, default=_to_builtin, ensure_ascii=False)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def read_json(path: PathLike) -> Dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def list_artifacts(directory: PathLike) -> List[str]:
    return sorted(p.name for p in Path(directory).iterdir() if p.is_file())
