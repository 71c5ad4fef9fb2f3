import json
from enum import Enum
from pathlib import Path
from typing import Dict, Sequence, Union

import numpy as np
import scipy.sparse as sp
import yaml

from .importers import MESH_HEADER


def _prepare(path: Union[Path, str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_mesh(mesh, path: Union[Path, str]):
    """Writes a mesh in the ``mesh2d v1`` text format.

    Parameters
    ----------
    mesh : Mesh
    path : Union[Path, str]
    """
    path = _prepare(path)
    with open(path, "w") as file:
        file.write(f"{MESH_HEADER}\n")
        file.write(f"V {len(mesh.vertices)}\n")
        for x, y in mesh.vertices:
            file.write(f"{x:.17g} {y:.17g}\n")
        file.write(f"T {len(mesh.triangles)}\n")
        for (i, j, k), tag in zip(mesh.triangles, mesh.triangle_tags):
            file.write(f"{i} {j} {k} {tag}\n")
        file.write(f"E {len(mesh.boundary_edges)}\n")
        for (i, j), tag in zip(mesh.boundary_edges, mesh.edge_tags):
            file.write(f"{i} {j} {tag}\n")


def write_table(
    path: Union[Path, str], columns: Sequence[str], rows: np.ndarray, fmt="%.17g"
):
    """Writes a comma separated table with a header line."""
    path = _prepare(path)
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.size == 0:
        rows = rows.reshape(0, len(columns))
    np.savetxt(
        path, rows, delimiter=",", header=",".join(columns), comments="", fmt=fmt
    )


def write_json(path: Union[Path, str], record: Dict):
    path = _prepare(path)
    with open(path, "w") as file:
        json.dump(_jsonable(record), file, indent=2, sort_keys=True)
        file.write("\n")


def write_coo(path: Union[Path, str], matrix):
    """Dumps a sparse matrix as ``i j value`` lines."""
    path = _prepare(path)
    coo = sp.coo_matrix(matrix)
    np.savetxt(
        path,
        np.column_stack((coo.row, coo.col, coo.data)),
        fmt=("%d", "%d", "%.17g"),
    )


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if np.isfinite(value) else None
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, Enum):
        return value.value
    return value


def write_yaml(path: Union[Path, str], document: Dict):
    """Writes an experiment record back to YAML, keeping the key order."""
    path = _prepare(path)
    with open(path, "w") as file:
        yaml.safe_dump(_jsonable(document), file, sort_keys=False)
