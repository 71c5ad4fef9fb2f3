from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
import yaml

MESH_HEADER = "mesh2d v1"


def validate_path(path_string: Union[str, Path]) -> Path:
    """Validates that incoming path exists.

    Parameters
    ----------
    path_string : str

    Returns
    -------
    path: Path

    Raises
    ------
    FileNotFoundError

    """
    path = Path(path_string)
    if path.exists():
        return path
    else:
        raise FileNotFoundError(f"No such file: {path_string}")


def load_yaml(path: Union[Path, str]) -> Dict:
    """Parses a yaml file and returns its contents as a dictionary.

    Parameters
    ----------
    path : Path

    Returns
    -------
    Dict

    """
    path = validate_path(path)

    with open(path) as file:
        data = yaml.safe_load(file)
        return data if data is not None else {}


def load_yaml_lines(path: Union[Path, str]) -> Dict[str, int]:
    """Maps every mapping key of a yaml file to the (1-based) line it is
    defined on. Nested keys are joined with dots, e.g. "Geometry.Viscosity".

    Parameters
    ----------
    path : Union[Path, str]

    Returns
    -------
    Dict[str, int]
    """
    path = validate_path(path)
    with open(path) as file:
        root = yaml.compose(file)

    lines = {}

    def _walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                key = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
                lines[key] = key_node.start_mark.line + 1
                _walk(value_node, key)

    if root is not None:
        _walk(root, "")
    return lines


def read_mesh_arrays(
    path: Union[Path, str]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Reads a plain-text mesh in the ``mesh2d v1`` format.

    The file holds a header line, then ``V <count>`` followed by ``x y`` lines,
    ``T <count>`` followed by ``i j k tag`` lines and ``E <count>`` followed by
    ``i j tag`` lines.

    Parameters
    ----------
    path : Union[Path, str]

    Returns
    -------
    vertices, triangles, triangle_tags, edges, edge_tags : np.ndarray

    Raises
    ------
    ValueError
        Raised if the file does not follow the format.
    """
    path = validate_path(path)
    with open(path) as file:
        lines = [line.strip() for line in file if line.strip()]

    if not lines or lines[0] != MESH_HEADER:
        raise ValueError(f"{path} is not a {MESH_HEADER} file")

    blocks = {}
    cursor = 1
    for section, width in (("V", 2), ("T", 4), ("E", 3)):
        try:
            label, count = lines[cursor].split()
        except (IndexError, ValueError):
            raise ValueError(f"{path}: expected a '{section} <count>' line")
        if label != section:
            raise ValueError(f"{path}: expected section {section}, found {label}")
        count = int(count)
        rows = lines[cursor + 1 : cursor + 1 + count]
        if len(rows) != count:
            raise ValueError(f"{path}: section {section} is truncated")
        table = np.array([row.split() for row in rows], dtype=float).reshape(
            count, width
        )
        blocks[section] = table
        cursor += count + 1

    vertices = blocks["V"]
    triangles = blocks["T"][:, :3].astype(np.int64)
    triangle_tags = blocks["T"][:, 3].astype(np.int64)
    edges = blocks["E"][:, :2].astype(np.int64)
    edge_tags = blocks["E"][:, 2].astype(np.int64)
    return vertices, triangles, triangle_tags, edges, edge_tags
