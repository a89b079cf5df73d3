"""Regular-grid environments: occupancy, exact distance transform, clearance-based
speed field, multilinear interpolation, and collision predicates.

Conventions used throughout the package:
  * the workspace is the unit box [0,1]^dim,
  * cell centers sit at ``index * spacing`` along every axis (node-centered lattice),
  * a point belongs to the cell whose center is nearest (Voronoi cell of the lattice),
  * all cells on the grid boundary are obstacles, so the box wall is solid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a hard dependency, keep import local
    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap if not args or not callable(args[0]) else args[0]

GRID_FORMAT_VERSION = 1


class DomainError(ValueError):
    """Raised when a query point lies outside the workspace box."""


@dataclass(frozen=True)
class GridEnv:
    """Occupancy grid over the unit box.

    occupancy[i, j(, k)] is True on obstacle cells; boundary cells are always
    occupied.  `spacing * (shape_i - 1) <= 1` so every cell center lies inside
    the box.
    """

    dim: int
    shape: tuple
    spacing: float
    occupancy: np.ndarray

    @property
    def span(self):
        """Coordinate of the last cell center per axis."""
        return tuple((n - 1) * self.spacing for n in self.shape)

    def cell_center(self, idx):
        return np.asarray(idx, dtype=np.float64) * self.spacing

    def free_fraction(self):
        return 1.0 - float(self.occupancy.mean())


@dataclass(frozen=True)
class DistanceGrid:
    """Exact Euclidean distance (world units) from each cell center to the
    nearest occupied cell center.  Zero exactly on occupied cells."""

    values: np.ndarray
    spacing: float


@dataclass(frozen=True)
class SpeedField:
    """Clearance-derived speed in [d_min/d_max, 1] per cell.

    Carries the occupancy mask so downstream solvers can tell walls apart from
    merely slow cells.
    """

    values: np.ndarray
    spacing: float
    d_min: float
    d_max: float
    occupancy: np.ndarray

    @property
    def s_min(self):
        return self.d_min / self.d_max


def _freeze(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def make_env(occupancy, spacing):
    """Build a GridEnv, validating invariants and closing the boundary wall."""
    occ = np.asarray(occupancy, dtype=bool).copy()
    dim = occ.ndim
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    if any(n < 8 for n in occ.shape):
        raise ValueError(f"every axis needs >= 8 cells, got shape {occ.shape}")
    spacing = float(spacing)
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    for n in occ.shape:
        if spacing * (n - 1) > 1.0 + 1e-12:
            raise ValueError("grid does not fit the unit box: spacing*(n-1) > 1")
    for axis in range(dim):
        sl_lo = [slice(None)] * dim
        sl_hi = [slice(None)] * dim
        sl_lo[axis] = 0
        sl_hi[axis] = occ.shape[axis] - 1
        occ[tuple(sl_lo)] = True
        occ[tuple(sl_hi)] = True
    return GridEnv(dim=dim, shape=occ.shape, spacing=spacing, occupancy=_freeze(occ))


def empty_env(shape, spacing=None):
    """All-free grid (apart from the boundary wall)."""
    shape = tuple(int(n) for n in shape)
    if spacing is None:
        spacing = 1.0 / (max(shape) - 1)
    return make_env(np.zeros(shape, dtype=bool), spacing)


# ---------------------------------------------------------------------------
# Exact Euclidean distance transform (separable lower-envelope method)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _dt1d_batch(F):
    """Exact 1D squared distance transform D[i] = min_j (F[j] + (i-j)^2),
    applied to every row of F.  Lower envelope of parabolas; all arithmetic is
    exact in float64 because the inputs are small integers (or +inf)."""
    m, n = F.shape
    D = np.empty_like(F)
    v = np.empty(n, np.int64)
    z = np.empty(n + 1, np.float64)
    for r in range(m):
        f = F[r]
        q0 = 0
        while q0 < n and f[q0] == np.inf:
            q0 += 1
        if q0 == n:
            for q in range(n):
                D[r, q] = np.inf
            continue
        k = 0
        v[0] = q0
        z[0] = -np.inf
        z[1] = np.inf
        for q in range(q0 + 1, n):
            if f[q] == np.inf:
                continue
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
            while s <= z[k]:
                k -= 1
                s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = np.inf
        k = 0
        for q in range(n):
            while z[k + 1] < q:
                k += 1
            d = q - v[k]
            D[r, q] = d * d + f[v[k]]
    return D


def _squared_edt(occupancy):
    """Squared cell-unit distances to the nearest occupied cell, per axis pass."""
    f = np.where(occupancy, 0.0, np.inf)
    dim = f.ndim
    for axis in range(dim):
        moved = np.moveaxis(f, axis, -1)
        lead_shape = moved.shape[:-1]
        flat = np.ascontiguousarray(moved.reshape(-1, moved.shape[-1]))
        flat = _dt1d_batch(flat)
        f = np.moveaxis(flat.reshape(lead_shape + (moved.shape[-1],)), -1, axis)
    return f


def compute_edt(env: GridEnv) -> DistanceGrid:
    """Exact Euclidean distance to the nearest occupied cell center.

    Matches the brute-force nearest-occupied scan bit-for-bit: both compute
    ``spacing * sqrt(integer squared cell distance)``.
    """
    d2 = _squared_edt(env.occupancy)
    values = env.spacing * np.sqrt(d2)
    return DistanceGrid(values=_freeze(values), spacing=env.spacing)


def speed_from_distance(dist: DistanceGrid, d_min: float, d_max: float) -> SpeedField:
    """Cell-wise clip(dist/d_max, d_min/d_max, 1)."""
    if not (0.0 < d_min < d_max):
        raise ValueError(f"need 0 < d_min < d_max, got d_min={d_min}, d_max={d_max}")
    values = np.clip(dist.values / d_max, d_min / d_max, 1.0)
    occupancy = dist.values == 0.0
    return SpeedField(values=_freeze(values), spacing=dist.spacing,
                      d_min=float(d_min), d_max=float(d_max),
                      occupancy=_freeze(occupancy))


def build_speed(env: GridEnv, d_min=0.015, d_max=0.15):
    """Convenience: EDT + clipped speed field in one step."""
    dist = compute_edt(env)
    return dist, speed_from_distance(dist, d_min, d_max)


# ---------------------------------------------------------------------------
# Interpolation
# ---------------------------------------------------------------------------

def _check_in_domain(pts, dim):
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    if pts.shape[-1] != dim:
        raise DomainError(f"expected {dim}-d points, got shape {pts.shape}")
    if np.any(pts < -1e-12) or np.any(pts > 1.0 + 1e-12):
        raise DomainError("point outside the unit box")
    return pts


def interp_many(values, spacing, pts):
    """Multilinear interpolation of node-centered grid values at points (N, dim).

    Points beyond the last cell center are clamped onto the covered box.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    dim = values.ndim
    x = pts / spacing
    base = np.floor(x).astype(np.int64)
    for axis in range(dim):
        np.clip(base[:, axis], 0, values.shape[axis] - 2, out=base[:, axis])
    frac = np.clip(x - base, 0.0, 1.0)
    out = np.zeros(pts.shape[0], dtype=np.float64)
    for corner in np.ndindex(*(2,) * dim):
        w = np.ones(pts.shape[0], dtype=np.float64)
        idx = []
        for axis, bit in enumerate(corner):
            w *= frac[:, axis] if bit else (1.0 - frac[:, axis])
            idx.append(base[:, axis] + bit)
        out += w * values[tuple(idx)]
    return out


def sample_speed(field: SpeedField, q) -> float:
    """Continuous speed at q via multilinear interpolation."""
    pts = _check_in_domain(q, field.values.ndim)
    return float(interp_many(field.values, field.spacing, pts)[0])


def sample_speed_many(field: SpeedField, pts):
    pts = _check_in_domain(pts, field.values.ndim)
    return interp_many(field.values, field.spacing, pts)


def interp_gradient(values, spacing, q, step=None):
    """Central finite difference of the multilinear interpolant.

    Returns (gradient, one_sided) where one_sided flags that at least one axis
    had to fall back to a clamped one-sided difference near the domain wall.
    """
    dim = values.ndim
    q = np.asarray(q, dtype=np.float64).reshape(dim)
    h = spacing if step is None else float(step)
    span = [(n - 1) * spacing for n in values.shape]
    grad = np.zeros(dim, dtype=np.float64)
    one_sided = False
    for axis in range(dim):
        lo = q.copy()
        hi = q.copy()
        lo[axis] = q[axis] - h
        hi[axis] = q[axis] + h
        clipped = False
        if lo[axis] < 0.0:
            lo[axis] = 0.0
            clipped = True
        if hi[axis] > span[axis]:
            hi[axis] = span[axis]
            clipped = True
        denom = hi[axis] - lo[axis]
        if denom <= 0.0:
            grad[axis] = 0.0
            one_sided = True
            continue
        f_hi = interp_many(values, spacing, hi[None, :])[0]
        f_lo = interp_many(values, spacing, lo[None, :])[0]
        grad[axis] = (f_hi - f_lo) / denom
        one_sided |= clipped
    return grad, one_sided


def speed_gradient(field: SpeedField, q):
    """Gradient of the interpolated speed at q, stencil step = one cell.

    Interior points get a central difference; near the wall the stencil is
    clamped one-sided and the returned flag is True.
    """
    _check_in_domain(q, field.values.ndim)
    return interp_gradient(field.values, field.spacing, q)


# ---------------------------------------------------------------------------
# Collision predicates and clearance
# ---------------------------------------------------------------------------

def _cell_index_many(env: GridEnv, pts):
    idx = np.floor(pts / env.spacing + 0.5).astype(np.int64)
    for axis in range(env.dim):
        np.clip(idx[:, axis], 0, env.shape[axis] - 1, out=idx[:, axis])
    return idx


def is_free_many(env: GridEnv, pts):
    """Vectorized free-cell test; out-of-box points count as not free."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    in_box = np.all((pts >= 0.0) & (pts <= 1.0), axis=1)
    idx = _cell_index_many(env, pts)
    occ = env.occupancy[tuple(idx[:, a] for a in range(env.dim))]
    return in_box & ~occ


def is_free(env: GridEnv, q) -> bool:
    return bool(is_free_many(env, np.asarray(q, dtype=np.float64)[None, :])[0])


def segment_free(env: GridEnv, qa, qb) -> bool:
    """True iff every sample at spacing <= h/2 along [qa, qb] is free.

    Endpoints are ordered canonically before sampling so the predicate is
    exactly symmetric.
    """
    qa = np.asarray(qa, dtype=np.float64)
    qb = np.asarray(qb, dtype=np.float64)
    if tuple(qb) < tuple(qa):
        qa, qb = qb, qa
    length = float(np.linalg.norm(qb - qa))
    n = max(2, int(math.ceil(length / (env.spacing / 2.0))) + 1)
    t = np.linspace(0.0, 1.0, n)
    pts = qa[None, :] + t[:, None] * (qb - qa)[None, :]
    return bool(np.all(is_free_many(env, pts)))


def clearance(env: GridEnv, dist: DistanceGrid, q) -> float:
    """Radius of a ball around q guaranteed to contain no occupied cell center.

    Interpolated EDT minus one cell of slack (the interpolation error bound),
    floored at zero.
    """
    if not is_free(env, q):
        raise ValueError(f"clearance undefined: {q} is not in free space")
    d = interp_many(dist.values, dist.spacing, np.asarray(q, dtype=np.float64)[None, :])[0]
    return max(0.0, float(d) - env.spacing)


# ---------------------------------------------------------------------------
# Grid file format
# ---------------------------------------------------------------------------

def save_grid(env: GridEnv, path, d_min=0.015, d_max=0.15):
    """Write a JSON descriptor plus a companion .raw occupancy byte file."""
    path = Path(path)
    raw_name = path.stem + ".raw"
    desc = {
        "format": "eikolab-grid",
        "version": GRID_FORMAT_VERSION,
        "dim": env.dim,
        "shape": list(env.shape),
        "spacing": env.spacing,
        "d_min": d_min,
        "d_max": d_max,
        "occupancy_file": raw_name,
    }
    path.write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")
    (path.parent / raw_name).write_bytes(
        np.ascontiguousarray(env.occupancy, dtype=np.uint8).tobytes())


def load_grid(path):
    """Inverse of save_grid; returns (env, d_min, d_max)."""
    path = Path(path)
    desc = json.loads(path.read_text())
    if desc.get("format") != "eikolab-grid":
        raise ValueError(f"{path}: not a grid descriptor")
    if desc.get("version") != GRID_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported grid version {desc.get('version')}")
    shape = tuple(desc["shape"])
    raw = (path.parent / desc["occupancy_file"]).read_bytes()
    expected = int(np.prod(shape))
    if len(raw) != expected:
        raise ValueError(f"{path}: occupancy file has {len(raw)} bytes, expected {expected}")
    occ = np.frombuffer(raw, dtype=np.uint8).reshape(shape).astype(bool)
    env = make_env(occ, desc["spacing"])
    return env, float(desc["d_min"]), float(desc["d_max"])


def export_pgm(env: GridEnv, path):
    """2D occupancy as ASCII PGM (P2, maxval 1, 1 = obstacle, rows = axis 0)."""
    if env.dim != 2:
        raise ValueError("PGM export is 2D only")
    lines = ["P2", f"{env.shape[1]} {env.shape[0]}", "1"]
    for row in env.occupancy.astype(int):
        lines.append(" ".join(str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def import_pgm(path, spacing=None):
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: expected ASCII PGM (P2)")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 1:
        raise ValueError(f"{path}: expected maxval 1, got {maxval}")
    data = np.array(tokens[4:4 + width * height], dtype=np.uint8)
    if data.size != width * height:
        raise ValueError(f"{path}: truncated pixel data")
    occ = data.reshape(height, width).astype(bool)
    if spacing is None:
        spacing = 1.0 / (max(occ.shape) - 1)
    return make_env(occ, spacing)
