"""
Homography algebra - normalised 3x3 projective maps between view pixel planes
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Tuple

import numpy as np

from utils.errors import DimensionMismatch, PointAtInfinity, SingularMatrix

DET_TOL = 1e-12
W_TOL = 1e-9

ViewPair = Tuple[int, int]


@dataclass(frozen=True, eq=False)
class Homography:
    """H_{src->dst}, normalised so h[2, 2] == 1. Build with make_homography."""

    h: np.ndarray
    src_view: int = 0
    dst_view: int = 0

    def inverse(self) -> "Homography":
        return make_homography(np.linalg.inv(self.h), self.dst_view, self.src_view)

    def then(self, other: "Homography") -> "Homography":
        """Apply self, then other."""
        return make_homography(other.h @ self.h, self.src_view, other.dst_view)

    def allclose(self, other: "Homography", atol: float = 1e-12) -> bool:
        return bool(np.allclose(self.h, other.h, atol=atol, rtol=0.0))

    def __repr__(self) -> str:
        rows = "; ".join(" ".join(f"{v:.6g}" for v in row) for row in self.h)
        return f"Homography({self.src_view}->{self.dst_view}: [{rows}])"


def make_homography(matrix: np.ndarray | Iterable, src: int = 0, dst: int = 0) -> Homography:
    m = np.array(matrix, dtype=np.float64)
    if m.shape != (3, 3):
        raise DimensionMismatch(f"homography must be 3x3, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise SingularMatrix("homography has non-finite entries")
    if abs(m[2, 2]) <= DET_TOL:
        raise SingularMatrix(f"h[2][2]={m[2, 2]:.3g} is below tolerance")
    m = m / m[2, 2]
    det = np.linalg.det(m)
    if abs(det) <= DET_TOL:
        raise SingularMatrix(f"|det|={abs(det):.3g} is below tolerance")
    m.setflags(write=False)
    return Homography(m, int(src), int(dst))


def identity(src: int = 0, dst: int = 0) -> Homography:
    return make_homography(np.eye(3), src, dst)


def project_point(h: Homography, p) -> np.ndarray:
    x, y = float(p[0]), float(p[1])
    v = h.h @ np.array([x, y, 1.0])
    w = v[2]
    if abs(w) <= W_TOL:
        raise PointAtInfinity(f"point ({x}, {y}) maps to infinity")
    return np.array([v[0] / w, v[1] / w])


def project_points(h: Homography, pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorised projection of an (N, 2) array of (x, y) points.

    Returns:
        projected (N, 2) points and a boolean mask of points with |w| > W_TOL;
        masked-out rows hold NaN.
    """
    pts = np.asarray(pts, dtype=np.float64)
    homog = np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1) @ h.h.T
    w = homog[:, 2]
    valid = np.abs(w) > W_TOL
    out = np.full((pts.shape[0], 2), np.nan)
    out[valid] = homog[valid, :2] / w[valid, None]
    return out, valid


def rescale_homography(h: Homography, src_scale: float, dst_scale: float) -> Homography:
    """Conjugate h by pixel scalings: S_dst . h . S_src^-1 with S_k = diag(k, k, 1)."""
    if src_scale <= 0 or dst_scale <= 0:
        raise ValueError("scales must be positive")
    s_dst = np.diag([dst_scale, dst_scale, 1.0])
    s_src_inv = np.diag([1.0 / src_scale, 1.0 / src_scale, 1.0])
    return make_homography(s_dst @ h.h @ s_src_inv, h.src_view, h.dst_view)


def jacobian_det(h: Homography, p) -> float:
    """Local area scale |det dH/dp| at p."""
    x, y = float(p[0]), float(p[1])
    m = h.h
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    u = (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w
    v = (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w
    jac = np.array([
        [(m[0, 0] - u * m[2, 0]) / w, (m[0, 1] - u * m[2, 1]) / w],
        [(m[1, 0] - v * m[2, 0]) / w, (m[1, 1] - v * m[2, 1]) / w],
    ])
    return float(abs(np.linalg.det(jac)))


def pairwise_from_poses(poses: Iterable[Homography]) -> Dict[ViewPair, Homography]:
    """H_{i->j} = H_j . H_i^-1 for every ordered pair of per-view poses."""
    poses = list(poses)
    out: Dict[ViewPair, Homography] = {}
    for i, hi in enumerate(poses):
        hi_inv = np.linalg.inv(hi.h)
        for j, hj in enumerate(poses):
            if i != j:
                out[(i, j)] = make_homography(hj.h @ hi_inv, i, j)
    return out


def homography_key(homographies: Mapping[ViewPair, Homography]) -> str:
    """Stable digest of a homography set, used to cache alignment plans."""
    digest = hashlib.sha1()
    for pair in sorted(homographies):
        digest.update(f"{pair[0]},{pair[1]};".encode())
        digest.update(np.ascontiguousarray(homographies[pair].h).tobytes())
    return digest.hexdigest()
