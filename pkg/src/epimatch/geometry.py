"""Pinhole camera math, fundamental matrices from known poses, epipolar lines
and exact thick-line rasterization.

Pixel convention: integer pixel ``(x, y)`` covers ``[x, x+1) x [y, y+1)`` and
its center sits at ``(x + 0.5, y + 0.5)``. ``x`` is the column, ``y`` the row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import DegenerateLine, IdenticalPose

_ORTHO_TOL = 1e-9
# Lines whose (a, b) norm falls below this fraction of |F| * |p| are treated as
# the null line.
_DEGENERATE_REL = 1e-10


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CameraView:
    """Intrinsics, world-to-camera pose and image size for one viewpoint.

    A world point ``X`` maps to camera coordinates ``R @ X + t``.
    """

    view_id: int
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = _readonly(np.array(self.K, dtype=np.float64).reshape(3, 3))
        R = _readonly(np.array(self.R, dtype=np.float64).reshape(3, 3))
        t = _readonly(np.array(self.t, dtype=np.float64).reshape(3))
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "view_id", int(self.view_id))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"view {self.view_id}: image size must be positive")
        if np.abs(R.T @ R - np.eye(3)).max() >= _ORTHO_TOL:
            raise ValueError(f"view {self.view_id}: R is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError(f"view {self.view_id}: det(R) must be +1")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise ValueError(f"view {self.view_id}: K must be upper triangular with K[2,2] = 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError(f"view {self.view_id}: focal lengths must be positive")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def to_dict(self) -> dict:
        return {
            "view_id": self.view_id,
            "width": self.width,
            "height": self.height,
            "K": [float(v) for v in self.K.ravel()],
            "R": [float(v) for v in self.R.ravel()],
            "t": [float(v) for v in self.t],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraView":
        return cls(d["view_id"], d["K"], d["R"], d["t"], d["width"], d["height"])


def load_cameras(path) -> list[CameraView]:
    with open(path) as f:
        data = json.load(f)
    return [CameraView.from_dict(d) for d in data]


def save_cameras(cameras, path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


@dataclass(frozen=True)
class Line2D:
    """Line ``a x + b y + c = 0`` normalized so that ``a^2 + b^2 = 1``."""

    a: float
    b: float
    c: float

    @classmethod
    def from_coeffs(cls, coeffs) -> "Line2D":
        a, b, c = (float(v) for v in coeffs)
        n = np.hypot(a, b)
        if n == 0.0:
            raise DegenerateLine("line has a = b = 0")
        return cls(a / n, b / n, c / n)

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])

    def distance(self, x, y):
        return np.abs(self.a * x + self.b * y + self.c)


@dataclass(frozen=True, eq=False)
class FundamentalMatrix:
    """Maps homogeneous pixels of ``source_view`` to epipolar lines in ``target_view``."""

    F: np.ndarray
    source_view: int
    target_view: int

    def transposed(self) -> "FundamentalMatrix":
        return FundamentalMatrix(_readonly(self.F.T.copy()), self.target_view, self.source_view)

    def target_epipole(self) -> np.ndarray:
        """Homogeneous epipole in the target image (left null vector of F)."""
        _, _, vt = np.linalg.svd(self.F.T)
        return vt[-1]

    def source_epipole(self) -> np.ndarray:
        _, _, vt = np.linalg.svd(self.F)
        return vt[-1]


@dataclass(frozen=True, eq=False)
class PixelSet:
    """A set of integer pixels inside a ``width x height`` image, stored as a bitmap."""

    mask: np.ndarray
    width: int = field(init=False)
    height: int = field(init=False)

    def __post_init__(self):
        m = np.array(self.mask, dtype=bool)
        if m.ndim != 2:
            raise ValueError("PixelSet bitmap must be 2-D")
        object.__setattr__(self, "mask", _readonly(m))
        object.__setattr__(self, "height", m.shape[0])
        object.__setattr__(self, "width", m.shape[1])

    @classmethod
    def empty(cls, width: int, height: int) -> "PixelSet":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def from_coords(cls, xs, ys, width: int, height: int) -> "PixelSet":
        xs = np.asarray(xs, dtype=np.int64)
        ys = np.asarray(ys, dtype=np.int64)
        if xs.size and (xs.min() < 0 or ys.min() < 0 or xs.max() >= width or ys.max() >= height):
            raise ValueError("pixel coordinates outside the image")
        m = np.zeros((height, width), dtype=bool)
        m[ys, xs] = True
        return cls(m)

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """``(xs, ys)`` of member pixels in row-major order."""
        ys, xs = np.nonzero(self.mask)
        return _readonly(xs), _readonly(ys)

    @cached_property
    def count(self) -> int:
        return int(self.mask.sum())

    def __len__(self) -> int:
        return self.count

    def __contains__(self, xy) -> bool:
        x, y = xy
        return 0 <= x < self.width and 0 <= y < self.height and bool(self.mask[y, x])

    def __eq__(self, other) -> bool:
        if not isinstance(other, PixelSet):
            return NotImplemented
        return self.mask.shape == other.mask.shape and bool(np.array_equal(self.mask, other.mask))

    def __hash__(self):
        return hash((self.width, self.height, self.mask.tobytes()))

    def union(self, other: "PixelSet") -> "PixelSet":
        return PixelSet(self.mask | other.mask)

    def intersection(self, other: "PixelSet") -> "PixelSet":
        return PixelSet(self.mask & other.mask)

    def centroid(self) -> np.ndarray:
        """Mean pixel-center coordinate ``(x, y)``."""
        xs, ys = self.coords
        return np.array([xs.mean() + 0.5, ys.mean() + 0.5])

    def bbox(self) -> tuple[int, int, int, int]:
        """``(xmin, ymin, xmax, ymax)`` inclusive pixel indices."""
        xs, ys = self.coords
        return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


# -- projection ---------------------------------------------------------------


def projection_matrix(cam: CameraView) -> np.ndarray:
    """3x4 matrix ``K [R | t]``."""
    return cam.K @ np.hstack([cam.R, cam.t[:, None]])


def project(P: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Project world points (``(3,)`` or ``(N, 3)``) to pixel coordinates."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    x = X @ P[:, :3].T + P[:, 3]
    uv = x[:, :2] / x[:, 2:3]
    return uv[0] if single else uv


def camera_depth(cam: CameraView, X: np.ndarray) -> np.ndarray:
    """Z coordinate of world points in the camera frame."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return X @ cam.R[2] + cam.t[2]


# -- epipolar geometry ----------------------------------------------------------


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def fundamental_from_poses(cam_i: CameraView, cam_j: CameraView) -> FundamentalMatrix:
    """Fundamental matrix taking pixels of ``cam_i`` to epipolar lines in ``cam_j``.

    ``F = K_j^-T [t_rel]_x R_rel K_i^-1`` with the relative pose of ``cam_j``
    with respect to ``cam_i``. The result is projected onto rank 2 and scaled to
    unit Frobenius norm.

    Raises:
        IdenticalPose: if both camera centers coincide.
    """
    if cam_i.view_id == cam_j.view_id:
        raise ValueError("source and target views must differ")
    ci, cj = cam_i.center, cam_j.center
    scale = max(1.0, float(np.linalg.norm(ci)), float(np.linalg.norm(cj)))
    if np.linalg.norm(ci - cj) <= 1e-9 * scale:
        raise IdenticalPose(f"views {cam_i.view_id} and {cam_j.view_id} share a camera center")

    R_rel = cam_j.R @ cam_i.R.T
    t_rel = cam_j.t - R_rel @ cam_i.t
    E = _skew(t_rel) @ R_rel
    F = np.linalg.inv(cam_j.K).T @ E @ np.linalg.inv(cam_i.K)
    u, s, vt = np.linalg.svd(F)
    s[2] = 0.0
    F = (u * s) @ vt
    F /= np.linalg.norm(F)
    return FundamentalMatrix(_readonly(F), cam_i.view_id, cam_j.view_id)


def epipolar_lines(F: FundamentalMatrix, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalized epipolar lines for many source pixels.

    Args:
        F: fundamental matrix of the (source, target) pair.
        points: ``(N, 2)`` continuous pixel coordinates in the source view.

    Returns:
        ``(lines, valid)``: ``(N, 3)`` coefficients with ``a^2 + b^2 = 1`` and
        a boolean mask that is False where the point is (numerically) the
        epipole. Rows of invalid lines are zero.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    ph = np.hstack([pts, np.ones((len(pts), 1))])
    raw = ph @ F.F.T
    ab = np.hypot(raw[:, 0], raw[:, 1])
    limit = _DEGENERATE_REL * np.linalg.norm(F.F) * np.linalg.norm(ph, axis=1)
    valid = ab > limit
    lines = np.zeros_like(raw)
    lines[valid] = raw[valid] / ab[valid, None]
    return lines, valid


def epipolar_line(F: FundamentalMatrix, p) -> Line2D:
    """Epipolar line ``F p~`` of one source pixel coordinate ``p = (x, y)``.

    Raises:
        DegenerateLine: if ``p`` is the source epipole.
    """
    lines, valid = epipolar_lines(F, np.asarray(p, dtype=np.float64)[None, :])
    if not valid[0]:
        raise DegenerateLine(f"point {tuple(p)} is the epipole of view {F.source_view}")
    a, b, c = lines[0]
    return Line2D(float(a), float(b), float(c))


def epipolar_residual(F: FundamentalMatrix, p_src, p_dst) -> np.ndarray:
    """``|p_dst~^T F p_src~|`` with F and both homogeneous points at unit norm."""
    p_src = np.atleast_2d(np.asarray(p_src, dtype=np.float64))
    p_dst = np.atleast_2d(np.asarray(p_dst, dtype=np.float64))
    hs = np.hstack([p_src, np.ones((len(p_src), 1))])
    hd = np.hstack([p_dst, np.ones((len(p_dst), 1))])
    hs /= np.linalg.norm(hs, axis=1, keepdims=True)
    hd /= np.linalg.norm(hd, axis=1, keepdims=True)
    Fn = F.F / np.linalg.norm(F.F)
    return np.abs(np.einsum("ni,ij,nj->n", hd, Fn, hs))


# -- rasterization ----------------------------------------------------------------


def center_distance(a, b, c, x, y):
    """Distance from the centers of integer pixels ``(x, y)`` to normalized lines.

    Every membership test in the package goes through this expression so that
    band rasters, region intersections and the exhaustive oracles agree bit for bit.
    """
    return np.abs(a * (x + 0.5) + b * (y + 0.5) + c)


def raster_lines(lines: np.ndarray, thickness: float, width: int, height: int):
    """Rasterize many thick lines at once.

    A pixel belongs to line ``s`` iff its center lies within ``thickness / 2``
    of the line. Candidates are generated along the dominant axis of each line
    and then checked with :func:`center_distance`, so the result equals an
    exhaustive per-pixel test.

    Returns:
        ``(line_idx, xs, ys)`` int64 arrays listing every (line, pixel) hit,
        ordered by line index.
    """
    if thickness <= 0:
        raise ValueError("thickness must be positive")
    lines = np.asarray(lines, dtype=np.float64).reshape(-1, 3)
    h = thickness / 2.0
    out_l, out_x, out_y = [], [], []
    idx = np.arange(len(lines))
    shallow = np.abs(lines[:, 1]) >= np.abs(lines[:, 0])
    for sel, steep in ((shallow, False), (~shallow, True)):
        if not sel.any():
            continue
        li = idx[sel]
        a, b, c = lines[sel].T
        along_w, across_h = (height, width) if steep else (width, height)
        if steep:
            # walk rows, solve for columns
            a, b = b, a
        # walk the dominant axis u, solve for the minor axis v
        u = np.arange(along_w)
        uc = u + 0.5
        v_center = -(a[:, None] * uc[None, :] + c[:, None]) / b[:, None]
        half = h / np.abs(b)
        n_off = int(np.ceil(2.0 * half.max())) + 3
        v0 = np.floor(v_center - half[:, None] - 0.5).astype(np.int64) - 1
        v = v0[:, :, None] + np.arange(n_off)[None, None, :]
        uu = np.broadcast_to(u[None, :, None], v.shape)
        ll = np.broadcast_to(li[:, None, None], v.shape)
        inside = (v >= 0) & (v < across_h)
        v, uu, ll = v[inside], uu[inside], ll[inside]
        if steep:
            xs, ys = v, uu
        else:
            xs, ys = uu, v
        la = lines[ll]
        hit = center_distance(la[:, 0], la[:, 1], la[:, 2], xs, ys) <= h
        out_l.append(ll[hit])
        out_x.append(xs[hit])
        out_y.append(ys[hit])
    if not out_l:
        e = np.zeros(0, dtype=np.int64)
        return e, e.copy(), e.copy()
    ll = np.concatenate(out_l)
    xs = np.concatenate(out_x)
    ys = np.concatenate(out_y)
    order = np.argsort(ll, kind="stable")
    return ll[order], xs[order], ys[order]


def rasterize_line(line: Line2D, thickness: float, width: int, height: int) -> PixelSet:
    """Pixels whose centers lie within ``thickness / 2`` of ``line``."""
    _, xs, ys = raster_lines(line.as_array()[None, :], thickness, width, height)
    return PixelSet.from_coords(xs, ys, width, height)
