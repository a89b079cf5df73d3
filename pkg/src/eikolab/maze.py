"""Procedural multi-room grid worlds and query sampling.

Recursive-division mazes: the interior is split room by room with straight
walls carrying door openings, plus optional rectangular clutter.  Generation
retries with an incremented sub-seed until the free space is one connected
component, so every returned environment is fully navigable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geomenv
from .geomenv import GridEnv


@dataclass(frozen=True)
class MazeSpec:
    dim: int = 2
    shape: tuple = (64, 64)
    rooms: int = 4
    door_width_cells: int = 4
    wall_thickness_cells: int = 1
    clutter_density: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.dim not in (2, 3) or len(self.shape) != self.dim:
            raise ValueError("dim/shape mismatch")
        if self.rooms < 1:
            raise ValueError("rooms must be >= 1")
        if self.door_width_cells < 2:
            raise ValueError("door_width_cells must be >= 2")
        if self.wall_thickness_cells < 1:
            raise ValueError("wall_thickness_cells must be >= 1")
        if not (0.0 <= self.clutter_density <= 0.2):
            raise ValueError("clutter_density must be in [0, 0.2]")


def flood_fill_free(occupancy):
    """Boolean mask of the free component containing the first free cell
    (axis-aligned adjacency)."""
    free = ~occupancy
    if not np.any(free):
        return np.zeros_like(free)
    seed_idx = tuple(int(v) for v in np.argwhere(free)[0])
    reached = np.zeros_like(free)
    reached[seed_idx] = True
    while True:
        grown = reached.copy()
        for axis in range(free.ndim):
            sl_src = [slice(None)] * free.ndim
            sl_dst = [slice(None)] * free.ndim
            sl_src[axis] = slice(None, -1)
            sl_dst[axis] = slice(1, None)
            grown[tuple(sl_dst)] |= reached[tuple(sl_src)]
            grown[tuple(sl_src)] |= reached[tuple(sl_dst)]
        grown &= free
        if np.array_equal(grown, reached):
            return reached
        reached = grown


def free_space_connected(occupancy) -> bool:
    free = ~occupancy
    return bool(np.any(free)) and bool(np.all(flood_fill_free(occupancy) == free))


def _split_room(occ, room, rng, spec):
    """Split `room` (list of [lo, hi) per axis) with a straight wall + door.
    Returns the two child rooms or None when the room is too small."""
    door = spec.door_width_cells
    wall = spec.wall_thickness_cells
    min_side = max(3, door)
    extents = [hi - lo for lo, hi in room]
    axes = [a for a in range(len(room))
            if extents[a] >= 2 * min_side + wall]
    if not axes:
        return None
    axis = axes[int(rng.integers(len(axes)))] if len(axes) > 1 else axes[0]
    lo, hi = room[axis]
    pos = int(rng.integers(lo + min_side, hi - min_side - wall + 1))

    wall_sl = [slice(l, h) for l, h in room]
    wall_sl[axis] = slice(pos, pos + wall)
    occ[tuple(wall_sl)] = True

    # carve a door through the wall: a run of `door` cells on every transverse axis
    door_sl = list(wall_sl)
    for t_axis in range(len(room)):
        if t_axis == axis:
            continue
        t_lo, t_hi = room[t_axis]
        width = min(door, t_hi - t_lo)
        start = int(rng.integers(t_lo, t_hi - width + 1))
        door_sl[t_axis] = slice(start, start + width)
    occ[tuple(door_sl)] = False

    left = [list(b) for b in room]
    right = [list(b) for b in room]
    left[axis] = [lo, pos]
    right[axis] = [pos + wall, hi]
    return left, right


def _add_clutter(occ, interior, rng, spec):
    target = int(spec.clutter_density * int(np.sum(~occ[interior])))
    added = 0
    tries = 0
    dim = occ.ndim
    max_side = max(2, min(occ.shape) // 16)
    while added < target and tries < 200:
        tries += 1
        size = rng.integers(1, max_side + 1, size=dim)
        lo = [int(rng.integers(1, occ.shape[a] - 1 - size[a]))
              if occ.shape[a] - 1 - size[a] > 1 else 1 for a in range(dim)]
        sl = tuple(slice(lo[a], lo[a] + int(size[a])) for a in range(dim))
        before = int(np.sum(occ[sl]))
        occ[sl] = True
        added += int(np.prod(size)) - before


def generate_maze(spec: MazeSpec) -> GridEnv:
    """Deterministic multi-room environment with connected free space."""
    shape = tuple(int(n) for n in spec.shape)
    min_side = max(3, spec.door_width_cells)
    need = spec.rooms * (min_side + spec.wall_thickness_cells)
    if any(n - 2 < min_side for n in shape) or max(shape) - 2 < need - spec.wall_thickness_cells:
        raise ValueError(f"cannot fit {spec.rooms} rooms of side >= {min_side} "
                         f"into shape {shape}")
    spacing = 1.0 / (max(shape) - 1)
    for attempt in range(50):
        rng = np.random.default_rng([spec.rng_seed, attempt])
        occ = np.zeros(shape, dtype=bool)
        for axis in range(spec.dim):
            sl_lo = [slice(None)] * spec.dim
            sl_hi = [slice(None)] * spec.dim
            sl_lo[axis] = 0
            sl_hi[axis] = shape[axis] - 1
            occ[tuple(sl_lo)] = True
            occ[tuple(sl_hi)] = True

        rooms = [[[1, n - 1] for n in shape]]
        while len(rooms) < spec.rooms:
            order = sorted(range(len(rooms)),
                           key=lambda r: -max(hi - lo for lo, hi in rooms[r]))
            split = None
            for r in order:
                split = _split_room(occ, rooms[r], rng, spec)
                if split is not None:
                    rooms.pop(r)
                    rooms.extend(split)
                    break
            if split is None:
                raise ValueError(f"cannot fit {spec.rooms} rooms into shape {shape}")

        if spec.clutter_density > 0:
            interior = tuple(slice(1, n - 1) for n in shape)
            _add_clutter(occ, interior, rng, spec)

        if free_space_connected(occ):
            return geomenv.make_env(occ, spacing)
    raise ValueError(f"maze generation kept producing disconnected free space: {spec}")


def sample_queries(env: GridEnv, n: int, min_separation: float = 0.0, rng_seed: int = 0):
    """Uniform free start-goal pairs at least min_separation apart."""
    if not np.any(~env.occupancy):
        raise ValueError("environment has no free space")
    rng = np.random.default_rng([rng_seed, 0x71657279])
    queries = []
    for _ in range(n):
        for attempt in range(5000):
            qs = rng.uniform(0.0, 1.0, size=env.dim)
            qg = rng.uniform(0.0, 1.0, size=env.dim)
            if not (geomenv.is_free(env, qs) and geomenv.is_free(env, qg)):
                continue
            if np.linalg.norm(qs - qg) >= min_separation:
                queries.append((qs, qg))
                break
        else:
            raise ValueError(f"could not sample a separated free pair "
                             f"(min_separation={min_separation})")
    return queries
