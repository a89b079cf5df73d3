"""Independent reference implementations used to generate expected values.

These are deliberately simple and slow: the brute-force nearest-occupied scan
checks the separable distance transform, and the dense-grid Dijkstra checks
the fast-marching solver.  They ship with the package because the test suite
derives its frozen expectations from them.
"""

from __future__ import annotations

import heapq

import numpy as np

from .geomenv import GridEnv, SpeedField


def brute_force_edt(env: GridEnv):
    """O(n^2) nearest-occupied-cell scan; bit-compatible with compute_edt.

    Both paths evaluate spacing * sqrt(<exact integer>), so equality is exact.
    """
    occ_idx = np.argwhere(env.occupancy).astype(np.int64)
    if occ_idx.shape[0] == 0:
        raise ValueError("grid has no occupied cells (boundary should be occupied)")
    grids = np.meshgrid(*[np.arange(n, dtype=np.int64) for n in env.shape], indexing="ij")
    cells = np.stack([g.ravel() for g in grids], axis=1)
    best = np.full(cells.shape[0], np.iinfo(np.int64).max, dtype=np.int64)
    chunk = max(1, 2_000_000 // max(1, occ_idx.shape[0]))
    for start in range(0, cells.shape[0], chunk):
        block = cells[start:start + chunk]
        delta = block[:, None, :] - occ_idx[None, :, :]
        d2 = np.sum(delta * delta, axis=2)
        best[start:start + chunk] = d2.min(axis=1)
    values = env.spacing * np.sqrt(best.astype(np.float64))
    return values.reshape(env.shape)


def _sign(x):
    return (x > 0) - (x < 0)


def _stencil(dim):
    """(offset, required-free intermediate cells) pairs, no corner cutting.

    2D uses the 16-neighborhood (axis + diagonal + knight moves), 3D the full
    26-neighborhood.  A move is only allowed when the cells its segment brushes
    against are all free, so the graph cannot tunnel through wall corners.
    """
    moves = []
    if dim == 2:
        offsets = [(1, 0), (-1, 0), (0, 1), (0, -1),
                   (1, 1), (1, -1), (-1, 1), (-1, -1),
                   (2, 1), (2, -1), (-2, 1), (-2, -1),
                   (1, 2), (1, -2), (-1, 2), (-1, -2)]
        for dx, dy in offsets:
            sx, sy = _sign(dx), _sign(dy)
            if abs(dx) + abs(dy) == 1:
                need = []
            elif abs(dx) == 1 and abs(dy) == 1:
                need = [(sx, 0), (0, sy)]
            elif abs(dx) == 2:
                need = [(sx, 0), (sx, sy)]
            else:
                need = [(0, sy), (sx, sy)]
            moves.append(((dx, dy), need))
    else:
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    if (dx, dy, dz) == (0, 0, 0):
                        continue
                    nz = [(dx, 0, 0), (0, dy, 0), (0, 0, dz)]
                    nz = [v for v in nz if any(v)]
                    if len(nz) == 1:
                        need = []
                    elif len(nz) == 2:
                        need = nz
                    else:
                        need = nz + [(dx, dy, 0), (dx, 0, dz), (0, dy, dz)]
                    moves.append(((dx, dy, dz), need))
    return moves


def _edge_tables(speed: SpeedField):
    """Per-offset vectorized edge admissibility and cost arrays.

    An edge cell -> cell+offset is usable when both endpoints and the
    no-corner-cutting intermediate cells are free.  Its cost is the trapezoid
    of 1/S(interpolated) along the segment, sampled at <= h/2 spacing, the
    same quadrature as every other travel-time integral in the package.
    """
    from .geomenv import interp_many

    occ = speed.occupancy
    dim = occ.ndim
    shape = np.array(occ.shape)
    h = speed.spacing
    grids = np.meshgrid(*[np.arange(n) for n in occ.shape], indexing="ij")
    cells = np.stack([g.ravel() for g in grids], axis=1)
    free_flat = ~occ.ravel()

    tables = []
    for off, need in _stencil(dim):
        off = np.array(off, dtype=np.int64)
        dst = cells + off
        ok = free_flat & np.all(dst >= 0, axis=1) & np.all(dst < shape, axis=1)
        dst_clip = np.clip(dst, 0, shape - 1)
        ok &= ~occ[tuple(dst_clip[:, a] for a in range(dim))]
        for n in need:
            mid = np.clip(cells + np.array(n, dtype=np.int64), 0, shape - 1)
            ok &= ~occ[tuple(mid[:, a] for a in range(dim))]
        length = float(np.linalg.norm(off)) * h
        m = max(1, int(np.ceil(length / (h / 2.0))))
        inv_acc = np.zeros(cells.shape[0])
        src_pts = cells * h
        step = off * h
        for k in range(m + 1):
            pts = np.clip(src_pts + (k / m) * step, 0.0, (shape - 1) * h)
            w = 0.5 if (k == 0 or k == m) else 1.0
            inv_acc += w / interp_many(speed.values, h, pts)
        cost = inv_acc / m * length
        dst_flat = np.ravel_multi_index(tuple(dst_clip[:, a] for a in range(dim)),
                                        occ.shape)
        tables.append((ok, dst_flat, cost))
    return tables


def dense_dijkstra(speed: SpeedField, source_cell):
    """Shortest travel times on the dense grid graph (16-neighbor stencil in
    2D, 26-neighbor in 3D)."""
    occ = speed.occupancy
    source_cell = tuple(int(c) for c in source_cell)
    if occ[source_cell]:
        raise ValueError("source cell is occupied")
    tables = _edge_tables(speed)
    n = occ.size
    src_flat = int(np.ravel_multi_index(source_cell, occ.shape))

    dist = np.full(n, np.inf)
    dist[src_flat] = 0.0
    heap = [(0.0, src_flat)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for ok, dst_flat, cost in tables:
            if not ok[u]:
                continue
            v = dst_flat[u]
            nd = d + cost[u]
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist.reshape(occ.shape)
