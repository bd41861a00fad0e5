"""
Calibration files - one line per ordered view pair: "i j h00 h01 ... h22"
"""

from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from geometry.homography import Homography, ViewPair, identity, make_homography
from geometry.view_graph import ViewGraph
from utils.errors import CalibrationError, IoFailure, MissingCalibration, SingularMatrix


def load_calibration(path: str | Path, graph: ViewGraph) -> Dict[ViewPair, Homography]:
    """
    Read image-resolution homographies for all ordered pairs of `graph`'s views.

    Pairs absent from the file default to identity when non-adjacent; a
    missing adjacent pair fails the load.
    """
    path = Path(path)
    if not path.exists():
        raise MissingCalibration(f"calibration file not found: {path}")

    found: Dict[ViewPair, Homography] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 11:
            raise CalibrationError(f"{path}:{lineno}: expected 'i j' and 9 numbers, got {len(fields)} fields")
        try:
            i, j = int(fields[0]), int(fields[1])
            values = [float(v) for v in fields[2:]]
        except ValueError as exc:
            raise CalibrationError(f"{path}:{lineno}: {exc}") from exc
        if not (0 <= i < graph.num_views and 0 <= j < graph.num_views) or i == j:
            raise CalibrationError(f"{path}:{lineno}: invalid view pair ({i}, {j})")
        try:
            found[(i, j)] = make_homography(np.array(values).reshape(3, 3), i, j)
        except SingularMatrix as exc:
            raise CalibrationError(f"{path}:{lineno}: {exc}") from exc

    adjacent = set(graph.pairs)
    out: Dict[ViewPair, Homography] = {}
    for i in range(graph.num_views):
        for j in range(graph.num_views):
            if i == j:
                continue
            if (i, j) in found:
                out[(i, j)] = found[(i, j)]
            elif (i, j) in adjacent:
                raise CalibrationError(f"{path}: adjacent pair ({i}, {j}) has no homography")
            else:
                out[(i, j)] = identity(i, j)
    return out


def save_calibration(path: str | Path, homographies: Mapping[ViewPair, Homography],
                     header: str = "") -> None:
    lines = [f"# {line}" for line in header.splitlines()] if header else []
    lines.append("# i j  h00 h01 h02 h10 h11 h12 h20 h21 h22  (H_{i->j}, image pixels)")
    for (i, j) in sorted(homographies):
        values = " ".join(repr(float(v)) for v in homographies[(i, j)].h.ravel())
        lines.append(f"{i} {j} {values}")
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write calibration {path}: {exc}") from exc
