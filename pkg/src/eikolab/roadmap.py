"""Sphere-packing sparse roadmap and weak travel-time supervision.

Nodes are centers of maximal free balls accepted only outside existing balls;
edges are straight collision-free segments weighted by integrated inverse
speed, so graph shortest times are feasible-path travel times.  Training
pairs perturb node pairs inside their balls and carry [t_lb, t_ub] bounds
derived from the graph time and the perturbation radii.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass

import numpy as np

from . import geomenv
from .geomenv import GridEnv, DistanceGrid, SpeedField


@dataclass(frozen=True)
class RoadmapNode:
    center: np.ndarray
    radius: float


@dataclass(frozen=True)
class RoadmapEdge:
    i: int
    j: int
    length: float
    travel_time: float


@dataclass(frozen=True)
class Roadmap:
    nodes: tuple
    edges: tuple
    adjacency: tuple  # adjacency[i] = tuple of (j, travel_time)


@dataclass(frozen=True)
class TrainingPair:
    qs: np.ndarray
    qg: np.ndarray
    src_node: int
    dst_node: int
    t_lb: float
    t_ub: float


def make_roadmap(nodes, edges) -> Roadmap:
    adj = [[] for _ in nodes]
    for e in edges:
        adj[e.i].append((e.j, e.travel_time))
        adj[e.j].append((e.i, e.travel_time))
    return Roadmap(nodes=tuple(nodes), edges=tuple(edges),
                   adjacency=tuple(tuple(a) for a in adj))


def pack_spheres(env: GridEnv, dist: DistanceGrid, max_nodes: int,
                 min_radius: float = 0.0, rng_seed: int = 0,
                 max_rejections: int | None = None):
    """Rejection-sample free points, keeping only those outside every existing
    ball with clearance >= min_radius.  Deterministic per seed."""
    if not np.any(~env.occupancy):
        raise ValueError("environment has no free cells")
    if max_nodes < 1:
        raise ValueError("max_nodes must be >= 1")
    if max_rejections is None:
        max_rejections = 50 * max_nodes
    rng = np.random.default_rng(rng_seed)
    centers = []
    radii = []
    consecutive = 0
    while len(centers) < max_nodes and consecutive < max_rejections:
        q = rng.uniform(0.0, 1.0, size=env.dim)
        if not geomenv.is_free(env, q):
            consecutive += 1
            continue
        r = geomenv.clearance(env, dist, q)
        if r < min_radius or r <= 0.0:
            consecutive += 1
            continue
        inside = False
        for c, rc in zip(centers, radii):
            if np.linalg.norm(q - c) <= rc:
                inside = True
                break
        if inside:
            consecutive += 1
            continue
        centers.append(q)
        radii.append(r)
        consecutive = 0
    if not centers:
        raise ValueError("sphere packing accepted zero nodes "
                         "(min_radius too large for this environment?)")
    return [RoadmapNode(center=c, radius=r) for c, r in zip(centers, radii)]


def edge_time(env: GridEnv, speed: SpeedField, qa, qb) -> float:
    """Trapezoid integral of 1/S along the segment, sample spacing <= h/2."""
    qa = np.asarray(qa, dtype=np.float64)
    qb = np.asarray(qb, dtype=np.float64)
    if not geomenv.segment_free(env, qa, qb):
        raise ValueError("edge_time on a colliding segment")
    length = float(np.linalg.norm(qb - qa))
    if length == 0.0:
        return 0.0
    n = max(2, int(math.ceil(length / (env.spacing / 2.0))) + 1)
    t = np.linspace(0.0, 1.0, n)
    pts = qa[None, :] + t[:, None] * (qb - qa)[None, :]
    inv_s = 1.0 / geomenv.sample_speed_many(speed, pts)
    seg = length / (n - 1)
    return float(np.sum((inv_s[:-1] + inv_s[1:]) * 0.5) * seg)


def connect(nodes, env: GridEnv, speed: SpeedField, k_neighbors: int = 15):
    """Straight-line edges to the k nearest neighbors (all pairs if k = 0)."""
    n = len(nodes)
    if n < 2:
        raise ValueError("need at least 2 nodes to connect")
    centers = np.stack([nd.center for nd in nodes])
    candidates = set()
    if k_neighbors == 0:
        for i in range(n):
            for j in range(i + 1, n):
                candidates.add((i, j))
    else:
        d2 = np.sum((centers[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        np.fill_diagonal(d2, np.inf)
        k = min(k_neighbors, n - 1)
        for i in range(n):
            for j in np.argsort(d2[i], kind="stable")[:k]:
                candidates.add((min(i, int(j)), max(i, int(j))))
    edges = []
    for i, j in sorted(candidates):
        if not geomenv.segment_free(env, centers[i], centers[j]):
            continue
        length = float(np.linalg.norm(centers[j] - centers[i]))
        edges.append(RoadmapEdge(i=i, j=j, length=length,
                                 travel_time=edge_time(env, speed, centers[i], centers[j])))
    return edges


def shortest_times(roadmap: Roadmap, src_node: int):
    """Dijkstra over travel_time weights; unreachable nodes get +inf."""
    n = len(roadmap.nodes)
    if not (0 <= src_node < n):
        raise IndexError(f"src_node {src_node} out of range")
    dist = np.full(n, np.inf)
    dist[src_node] = 0.0
    heap = [(0.0, src_node)]
    while heap:
        d, i = heapq.heappop(heap)
        if d > dist[i]:
            continue
        for j, w in roadmap.adjacency[i]:
            nd = d + w
            if nd < dist[j]:
                dist[j] = nd
                heapq.heappush(heap, (nd, j))
    return dist


def all_pairs_times(roadmap: Roadmap):
    return np.stack([shortest_times(roadmap, i) for i in range(len(roadmap.nodes))])


def _min_ball_speed(speed: SpeedField, center, radius):
    """Minimum stored speed over cells whose centers lie inside the ball."""
    h = speed.spacing
    lo = np.maximum(np.floor((center - radius) / h).astype(int), 0)
    hi = np.minimum(np.ceil((center + radius) / h).astype(int),
                    np.array(speed.values.shape) - 1)
    ranges = [np.arange(lo[a], hi[a] + 1) for a in range(len(center))]
    grids = np.meshgrid(*ranges, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1) * h
    inside = np.linalg.norm(pts - center[None, :], axis=1) <= radius
    if not np.any(inside):
        return float(geomenv.sample_speed(speed, center))
    idx = tuple(g.ravel()[inside] for g in grids)
    return float(np.min(speed.values[idx]))


def _sample_in_ball(rng, env, center, radius, max_tries=100):
    for _ in range(max_tries):
        u = rng.normal(size=env.dim)
        norm = np.linalg.norm(u)
        if norm == 0.0:
            continue
        r = radius * rng.uniform() ** (1.0 / env.dim)
        q = np.clip(center + u / norm * r, 0.0, 1.0)
        if geomenv.is_free(env, q):
            return q
    return center.copy()


def generate_pairs(roadmap: Roadmap, env: GridEnv, speed: SpeedField,
                   count: int, rng_seed: int = 0, tightened: bool = False,
                   realized_radii: bool = False):
    """Distance-stratified perturbed node pairs with weak travel-time bounds.

    Graph times are split into 10 equal-width bins; a nonempty bin is drawn
    uniformly, then a pair within it.  Literal mode uses the full sphere radii
    as slack; tightened mode divides the radii by the minimum ball speed and
    raises t_lb to the Euclidean separation, making t_ub a certified
    feasible-path bound.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    D = all_pairs_times(roadmap)
    n = len(roadmap.nodes)
    pairs_ij = [(i, j) for i in range(n) for j in range(i, n) if np.isfinite(D[i, j])]
    if not pairs_ij:
        raise ValueError("no node pair with finite graph time")
    times = np.array([D[i, j] for i, j in pairs_ij])
    max_t = float(times.max())
    n_bins = 10
    if max_t == 0.0:
        bin_of = np.zeros(len(pairs_ij), dtype=int)
    else:
        bin_of = np.minimum((times / max_t * n_bins).astype(int), n_bins - 1)
    bins = [np.flatnonzero(bin_of == b) for b in range(n_bins)]
    nonempty = [b for b in bins if len(b) > 0]

    sigma = None
    if tightened:
        sigma = [_min_ball_speed(speed, nd.center, nd.radius) for nd in roadmap.nodes]

    rng = np.random.default_rng(rng_seed)
    out = []
    for _ in range(count):
        bucket = nonempty[rng.integers(len(nonempty))]
        i, j = pairs_ij[bucket[rng.integers(len(bucket))]]
        if rng.uniform() < 0.5:
            i, j = j, i
        ni, nj = roadmap.nodes[i], roadmap.nodes[j]
        qs = _sample_in_ball(rng, env, ni.center, ni.radius)
        qg = _sample_in_ball(rng, env, nj.center, nj.radius)
        r_i = float(np.linalg.norm(qs - ni.center)) if realized_radii else ni.radius
        r_j = float(np.linalg.norm(qg - nj.center)) if realized_radii else nj.radius
        d_graph = float(D[i, j])
        if tightened:
            t_ub = d_graph + r_i / sigma[i] + r_j / sigma[j]
            t_lb = max(0.0, d_graph - r_i - r_j, float(np.linalg.norm(qs - qg)))
        else:
            t_ub = d_graph + r_i + r_j
            t_lb = max(0.0, d_graph - r_i - r_j)
        out.append(TrainingPair(qs=qs, qg=qg, src_node=i, dst_node=j,
                                t_lb=t_lb, t_ub=t_ub))
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def roadmap_to_json(roadmap: Roadmap) -> str:
    doc = {
        "nodes": [{"center": list(nd.center), "radius": nd.radius}
                  for nd in roadmap.nodes],
        "edges": [{"i": e.i, "j": e.j, "length": e.length,
                   "travel_time": e.travel_time} for e in roadmap.edges],
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def roadmap_from_json(text: str) -> Roadmap:
    doc = json.loads(text)
    nodes = [RoadmapNode(center=np.array(nd["center"], dtype=np.float64),
                         radius=float(nd["radius"])) for nd in doc["nodes"]]
    edges = [RoadmapEdge(i=int(e["i"]), j=int(e["j"]), length=float(e["length"]),
                         travel_time=float(e["travel_time"])) for e in doc["edges"]]
    return make_roadmap(nodes, edges)


def save_pairs_csv(pairs, path):
    dim = len(pairs[0].qs) if pairs else 2
    header = ([f"qs{a}" for a in range(dim)] + [f"qg{a}" for a in range(dim)]
              + ["t_lb", "t_ub", "src_node", "dst_node"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for p in pairs:
            writer.writerow([repr(v) for v in p.qs] + [repr(v) for v in p.qg]
                            + [repr(p.t_lb), repr(p.t_ub), p.src_node, p.dst_node])


def load_pairs_csv(path):
    pairs = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = sum(1 for c in header if c.startswith("qs"))
        for row in reader:
            qs = np.array([float(v) for v in row[:dim]])
            qg = np.array([float(v) for v in row[dim:2 * dim]])
            pairs.append(TrainingPair(qs=qs, qg=qg,
                                      t_lb=float(row[2 * dim]), t_ub=float(row[2 * dim + 1]),
                                      src_node=int(row[2 * dim + 2]),
                                      dst_node=int(row[2 * dim + 3])))
    return pairs
