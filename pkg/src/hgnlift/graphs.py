"""Weighted undirected graphs, adjacency normalization, and multilevel
heavy-edge coarsening.

Also builds the deterministic synthetic body mesh (tube segments per bone)
whose coarsened levels provide the coarse mesh scales of the model.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import skeleton


class CoarseningError(Exception):
    pass


class DegenerateGraphError(CoarseningError):
    pass


class UnreachableTargetError(CoarseningError):
    pass


class Graph:
    """Undirected weighted graph; each edge stored once with i < j and w > 0."""

    __slots__ = ("n_nodes", "ei", "ej", "w")

    def __init__(self, n_nodes, edges):
        self.n_nodes = int(n_nodes)
        if self.n_nodes < 1:
            raise ValueError("graph needs at least one node")
        ei, ej, w = [], [], []
        seen = set()
        for a, b, wt in edges:
            a, b, wt = int(a), int(b), float(wt)
            if not (0 <= a < b < self.n_nodes):
                raise ValueError(f"edge ({a}, {b}) violates 0 <= i < j < {self.n_nodes}")
            if wt <= 0.0:
                raise ValueError(f"edge ({a}, {b}) has non-positive weight {wt}")
            if (a, b) in seen:
                raise ValueError(f"duplicate edge ({a}, {b})")
            seen.add((a, b))
            ei.append(a)
            ej.append(b)
            w.append(wt)
        self.ei = np.asarray(ei, dtype=np.intp)
        self.ej = np.asarray(ej, dtype=np.intp)
        self.w = np.asarray(w, dtype=np.float64)

    @property
    def n_edges(self):
        return len(self.ei)

    def edges(self):
        return list(zip(self.ei.tolist(), self.ej.tolist(), self.w.tolist()))

    def weighted_degrees(self):
        deg = np.zeros(self.n_nodes, dtype=np.float64)
        np.add.at(deg, self.ei, self.w)
        np.add.at(deg, self.ej, self.w)
        return deg

    def adjacency_lists(self):
        adj = [[] for _ in range(self.n_nodes)]
        for a, b, wt in zip(self.ei, self.ej, self.w):
            adj[a].append((int(b), wt))
            adj[b].append((int(a), wt))
        for lst in adj:
            lst.sort()
        return adj

    def dense_adjacency(self):
        a = np.zeros((self.n_nodes, self.n_nodes), dtype=np.float64)
        a[self.ei, self.ej] = self.w
        a[self.ej, self.ei] = self.w
        return a


def skeleton_graph():
    """The 17-joint body skeleton with unit edge weights."""
    return Graph(skeleton.N_JOINTS, [(p, c, 1.0) for p, c in skeleton.EDGES])


def is_connected(g):
    if g.n_nodes == 1:
        return True
    adj = g.adjacency_lists()
    seen = np.zeros(g.n_nodes, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        u = stack.pop()
        for v, _ in adj[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    return bool(seen.all())


@dataclass
class NormalizedAdjacency:
    """Symmetrically normalized adjacency with self-loops and its support."""

    matrix: np.ndarray   # D^-1/2 (A + I) D^-1/2
    support: np.ndarray  # bool mask of (A + I) != 0
    n_nodes: int


def normalize_adjacency(g):
    a = g.dense_adjacency()
    a_hat = a + np.eye(g.n_nodes)
    deg = a_hat.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    matrix = a_hat * inv_sqrt[:, None] * inv_sqrt[None, :]
    return NormalizedAdjacency(matrix=matrix, support=a_hat != 0.0, n_nodes=g.n_nodes)


@dataclass
class CoarseningLevel:
    """One heavy-edge-matching step: the coarse graph plus the fine-to-coarse map."""

    graph: Graph
    cluster_map: np.ndarray  # length n_fine, values in [0, graph.n_nodes)
    n_fine: int


def hem_coarsen_once(g, seed, max_pairs=None, score="normalized_cut"):
    """One level of heavy-edge matching.

    Unmatched nodes are visited in a seeded random order; each matches its
    unmatched neighbor with the highest edge score (ties to the smaller
    index).  score="normalized_cut" uses w * (1/deg_u + 1/deg_v); "weight"
    uses the plain edge weight.  Unmatched nodes survive as singletons.
    max_pairs optionally stops matching early (used by hierarchy planning).
    """
    n = g.n_nodes
    if n < 2:
        raise DegenerateGraphError(f"cannot coarsen a graph with {n} node(s)")
    if score not in ("normalized_cut", "weight"):
        raise ValueError(f"unknown score {score!r}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    adj = g.adjacency_lists()
    deg = g.weighted_degrees()
    mate = np.full(n, -1, dtype=np.intp)
    n_pairs = 0
    for u in order:
        if max_pairs is not None and n_pairs >= max_pairs:
            break
        if mate[u] >= 0:
            continue
        best_v, best_s = -1, -np.inf
        for v, wt in adj[u]:
            if mate[v] >= 0:
                continue
            s = wt * (1.0 / deg[u] + 1.0 / deg[v]) if score == "normalized_cut" else wt
            if s > best_s:
                best_s, best_v = s, v
        if best_v >= 0:
            mate[u] = best_v
            mate[best_v] = u
            n_pairs += 1

    # when a requested pair count is not met greedily, grow the matching
    # along length-3 augmenting paths (u - v = w - x becomes u = v, w = x)
    if max_pairs is not None and n_pairs < max_pairs:
        progress = True
        while progress and n_pairs < max_pairs:
            progress = False
            for u in order:
                if n_pairs >= max_pairs:
                    break
                if mate[u] >= 0:
                    continue
                done = False
                for v, _ in adj[u]:
                    w = mate[v]
                    if w < 0:
                        continue
                    for x, _ in adj[w]:
                        if x != u and mate[x] < 0:
                            mate[u], mate[v] = v, u
                            mate[w], mate[x] = x, w
                            n_pairs += 1
                            progress = True
                            done = True
                            break
                    if done:
                        break

    # coarse ids ranked by smallest member index: stable and order-free
    reps = [u for u in range(n) if mate[u] < 0 or u < mate[u]]
    cluster_map = np.empty(n, dtype=np.intp)
    for cid, u in enumerate(reps):
        cluster_map[u] = cid
        if mate[u] >= 0:
            cluster_map[mate[u]] = cid
    n_coarse = len(reps)

    acc = {}
    for a, b, wt in zip(g.ei, g.ej, g.w):
        ca, cb = cluster_map[a], cluster_map[b]
        if ca == cb:
            continue
        key = (min(ca, cb), max(ca, cb))
        acc[key] = acc.get(key, 0.0) + wt
    coarse = Graph(n_coarse, [(i, j, wt) for (i, j), wt in sorted(acc.items())])
    return CoarseningLevel(graph=coarse, cluster_map=cluster_map, n_fine=n)


@dataclass
class SelectedLevel:
    """A hierarchy level chosen for a requested size, with the map from source."""

    target: int
    level_index: int
    graph: Graph
    composed_map: np.ndarray  # length n_source


@dataclass
class HierarchySnapshot:
    """The selected levels only; enough to rebuild the model and check compat."""

    n_source: int
    selected: list

    def checksum(self):
        return _selected_checksum(self.n_source, self.selected)

    def snapshot(self):
        return self  # duck-types as a hierarchy wherever only selected levels matter


@dataclass
class CoarseningHierarchy:
    source: Graph
    levels: list
    selected: list
    seed: int
    score: str = "normalized_cut"

    @property
    def n_source(self):
        return self.source.n_nodes

    def composed_map(self, level_index):
        m = self.levels[0].cluster_map
        for lvl in self.levels[1 : level_index + 1]:
            m = lvl.cluster_map[m]
        return m

    def checksum(self):
        return _selected_checksum(self.n_source, self.selected)

    def snapshot(self):
        return HierarchySnapshot(n_source=self.n_source, selected=list(self.selected))


def _selected_checksum(n_source, selected):
    h = hashlib.sha256(b"hgnlift-hierarchy-v1")
    h.update(np.int64(n_source).tobytes())
    for sl in selected:
        h.update(np.int64(sl.target).tobytes())
        h.update(np.int64(sl.graph.n_nodes).tobytes())
        h.update(sl.graph.ei.astype(np.int64).tobytes())
        h.update(sl.graph.ej.astype(np.int64).tobytes())
        h.update(sl.graph.w.astype(np.float64).tobytes())
        h.update(sl.composed_map.astype(np.int64).tobytes())
    return h.hexdigest()


def _plan_next_size(n, target):
    """Next level size on the way to `target`, keeping step ratios in [0.5, 0.6].

    Uses the largest per-step ratio <= 0.6 so the planned pair count stays
    below what matching can deliver; each step then lands exactly on plan and
    the descent passes through the target instead of straddling it.
    """
    x = target / n
    if x >= 0.5:
        return target  # single step (shallow when x > 0.6, which only
        # happens for target layouts no legal ratio sequence can reach)
    k = max(1, math.floor(math.log(x) / math.log(0.6)))
    r = max(x ** (1.0 / k), 0.5)
    nxt = int(round(n * r))
    return min(max(nxt, target, math.ceil(n / 2)), n - 1)


def build_hierarchy(g, targets, seed, score="normalized_cut", window=0.2):
    """Coarsen repeatedly toward each target size and select the closest levels.

    Step sizes are planned (geometric descent, pair count capped) so that a
    level lands near every target instead of straddling it; the descent for a
    target stops once a level is within `window` (relative) of it.  Raises
    UnreachableTargetError when matching stalls with no level within a factor
    of two of a target.
    """
    targets = [int(t) for t in targets]
    if not targets:
        raise ValueError("need at least one target size")
    if any(t < 1 for t in targets):
        raise ValueError(f"targets must be positive: {targets}")
    if any(t >= g.n_nodes for t in targets):
        raise ValueError(f"targets {targets} must be smaller than the graph ({g.n_nodes} nodes)")
    if any(a <= b for a, b in zip(targets, targets[1:])):
        raise ValueError(f"targets must be strictly decreasing: {targets}")

    master = np.random.default_rng(seed)
    levels = []
    current = g
    sizes = [g.n_nodes]
    for target in targets:
        stop = max(target, math.floor(target * (1.0 + window)))
        while current.n_nodes > stop or (not levels and current.n_nodes > target):
            planned = _plan_next_size(current.n_nodes, target)
            step_seed = int(master.integers(0, 2**63 - 1))
            lvl = hem_coarsen_once(
                current, step_seed, max_pairs=current.n_nodes - planned, score=score)
            if lvl.graph.n_nodes == current.n_nodes:
                break  # stall: no pair matched
            levels.append(lvl)
            current = lvl.graph
            sizes.append(current.n_nodes)
        level_sizes = sizes[1:]  # sizes[0] is the source, not a level
        if not any(target / 2 <= s <= target * 2 for s in level_sizes):
            raise UnreachableTargetError(
                f"coarsening stalled at {current.n_nodes} nodes; no level within "
                f"a factor of two of target {target} (sizes: {sizes})")

    selected = []
    for target in targets:
        best = min(range(1, len(sizes)), key=lambda i: (abs(sizes[i] - target), i))
        idx = best - 1
        hier_map = levels[0].cluster_map
        for lvl in levels[1 : idx + 1]:
            hier_map = lvl.cluster_map[hier_map]
        selected.append(SelectedLevel(
            target=target, level_index=idx, graph=levels[idx].graph, composed_map=hier_map))
    return CoarseningHierarchy(source=g, levels=levels, selected=selected, seed=seed, score=score)


def pool_positions(positions, cluster_map, n_coarse):
    """Average positions over each cluster (centroid pooling)."""
    positions = np.asarray(positions, dtype=np.float64)
    cluster_map = np.asarray(cluster_map, dtype=np.intp)
    if positions.shape[0] != cluster_map.shape[0]:
        raise ValueError(
            f"positions ({positions.shape[0]}) and cluster map ({cluster_map.shape[0]}) disagree")
    out = np.zeros((n_coarse,) + positions.shape[1:], dtype=np.float64)
    np.add.at(out, cluster_map, positions)
    counts = np.bincount(cluster_map, minlength=n_coarse).astype(np.float64)
    if (counts == 0).any():
        raise ValueError("cluster map leaves some coarse nodes empty")
    return out / counts.reshape((n_coarse,) + (1,) * (positions.ndim - 1))


# ---------------------------------------------------------------------------
# synthetic body mesh
# ---------------------------------------------------------------------------

RING_SIZE = 6


@dataclass
class SyntheticMesh:
    graph: Graph
    skinning: np.ndarray        # (V, 17), rows sum to 1
    offsets: np.ndarray         # (V, 3), rest position minus skinned rest joints
    rest_positions: np.ndarray  # (V, 3)
    mirror_map: np.ndarray      # (V,), lateral vertex pairing
    bone_of: np.ndarray         # (V,), index into skeleton.EDGES


def _ring_counts(n_vertices):
    """Rings per bone: proportional to tube area, mirror-symmetric, exact total."""
    weights = skeleton.BONE_LENGTHS * skeleton.BONE_RADII
    target_rings = n_vertices // RING_SIZE
    rings = [0] * len(skeleton.EDGES)
    for b in skeleton.CANONICAL_BONES:
        rings[b] = max(1, round(target_rings * weights[b] / weights.sum()))
    for b, mb in enumerate(skeleton.MIRROR_BONE):
        if rings[b] == 0:
            rings[b] = rings[mb]
    total = RING_SIZE * sum(rings)
    central_cycle = [6, 7, 9, 8]  # spine, chest, head, neck
    i = 0
    while total + RING_SIZE <= n_vertices:
        rings[central_cycle[i % 4]] += 1
        total += RING_SIZE
        i += 1
    while total > n_vertices:
        b = max(central_cycle, key=lambda c: rings[c])
        if rings[b] <= 1:
            raise ValueError(f"n_vertices={n_vertices} too small for the bone layout")
        rings[b] -= 1
        total -= RING_SIZE
    return rings, n_vertices - total  # remainder ring size on the head bone


def _radial_basis(axis):
    ref = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(axis, ref)) > 0.9:
        ref = np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    return u, v


def build_synthetic_body_mesh(n_vertices, seed):
    """Deterministic body-shaped mesh: one ring-connected tube per bone.

    Each vertex is skinned to its bone's two endpoint joints; tubes attach to
    the parent bone's nearest ring so the graph is connected.  Lateral tubes
    are exact mirror copies, giving an exact left/right vertex pairing.
    """
    if n_vertices < 200:
        raise ValueError(f"n_vertices must be >= 200, got {n_vertices}")
    rings, remainder = _ring_counts(n_vertices)
    rng = np.random.default_rng(seed)
    jitter = {}
    for b in skeleton.CANONICAL_BONES:
        extra = 1 if (b == 9 and remainder) else 0
        jitter[b] = rng.uniform(-1.0, 1.0, size=rings[b] + extra)

    # ring sizes per bone (the head bone may carry a partial top ring)
    ring_sizes = {}
    for b in range(len(skeleton.EDGES)):
        sizes = [RING_SIZE] * rings[b]
        if b == 9 and remainder:
            sizes.append(remainder)
        ring_sizes[b] = sizes

    # assign vertex ids bone by bone, ring by ring
    ring_ids = {}
    next_id = 0
    for b in range(len(skeleton.EDGES)):
        ids = []
        for q in ring_sizes[b]:
            ids.append(list(range(next_id, next_id + q)))
            next_id += q
        ring_ids[b] = ids
    total_v = next_id
    assert total_v == n_vertices

    positions = np.zeros((n_vertices, 3))
    skinning = np.zeros((n_vertices, skeleton.N_JOINTS))
    bone_of = np.zeros(n_vertices, dtype=np.intp)
    mirror_map = np.zeros(n_vertices, dtype=np.intp)

    for b in skeleton.CANONICAL_BONES:
        p, c = skeleton.EDGES[b]
        central = b in skeleton.CENTRAL_BONES
        axis = (skeleton.REST_JOINTS[c] - skeleton.REST_JOINTS[p]) / skeleton.BONE_LENGTHS[b]
        if central:
            u, v = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])
        else:
            u, v = _radial_basis(axis)
        m_tot = len(ring_sizes[b])
        mb = skeleton.MIRROR_BONE[b]
        mp, mc = skeleton.EDGES[mb]
        for r, q in enumerate(ring_sizes[b]):
            t = (r + 0.5) / m_tot
            center = skeleton.REST_JOINTS[p] + axis * skeleton.BONE_LENGTHS[b] * t
            rad = skeleton.BONE_RADII[b] * (1.0 + 0.08 * jitter[b][r])
            for k in range(q):
                theta = (np.pi / 2 if central else 0.0) + 2.0 * np.pi * k / q
                vid = ring_ids[b][r][k]
                positions[vid] = center + rad * (np.cos(theta) * u + np.sin(theta) * v)
                skinning[vid, p] = 1.0 - t
                skinning[vid, c] = t
                bone_of[vid] = b
                if central:
                    mirror_map[vid] = ring_ids[b][r][(q - k) % q]
                else:
                    mvid = ring_ids[mb][r][k]
                    mirror_map[vid] = mvid
                    mirror_map[mvid] = vid
                    positions[mvid] = positions[vid] * np.array([-1.0, 1.0, 1.0])
                    skinning[mvid, mp] = 1.0 - t
                    skinning[mvid, mc] = t
                    bone_of[mvid] = mb

    edges = set()

    def connect(a, b):
        if a != b:
            edges.add((min(a, b), max(a, b)))

    def cross_connect(ring_a, ring_b):
        qa, qb = len(ring_a), len(ring_b)
        for k in range(qa):
            connect(ring_a[k], ring_b[round(k * qb / qa) % qb])
        for k in range(qb):
            connect(ring_b[k], ring_a[round(k * qa / qb) % qa])

    for b in range(len(skeleton.EDGES)):
        ids = ring_ids[b]
        for ring in ids:
            q = len(ring)
            if q >= 3:
                for k in range(q):
                    connect(ring[k], ring[(k + 1) % q])
            elif q == 2:
                connect(ring[0], ring[1])
        for r in range(len(ids) - 1):
            cross_connect(ids[r], ids[r + 1])
        # attach the tube root to the parent bone's nearest ring
        p, _c = skeleton.EDGES[b]
        if p == skeleton.ROOT:
            if b != 6:  # bones at the pelvis hang off the spine tube's base
                cross_connect(ids[0], ring_ids[6][0])
        else:
            parent_bone = skeleton.EDGES.index((skeleton.PARENTS[p], p))
            cross_connect(ids[0], ring_ids[parent_bone][-1])

    graph = Graph(n_vertices, [(i, j, 1.0) for i, j in sorted(edges)])
    offsets = positions - skinning @ skeleton.REST_JOINTS
    return SyntheticMesh(graph=graph, skinning=skinning, offsets=offsets,
                         rest_positions=positions, mirror_map=mirror_map, bone_of=bone_of)


# ---------------------------------------------------------------------------
# text formats
# ---------------------------------------------------------------------------


def write_edge_list(path, g):
    with open(path, "w") as f:
        f.write(f"nodes {g.n_nodes}\n")
        for a, b, wt in zip(g.ei, g.ej, g.w):
            f.write(f"{a} {b} {float(wt)!r}\n")  # repr round-trips float64 exactly


def read_edge_list(path):
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 2 or header[0] != "nodes":
            raise ValueError(f"{path}: first line must be 'nodes <N>'")
        n = int(header[1])
        edges = []
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'i j w', got {line.strip()!r}")
            edges.append((int(parts[0]), int(parts[1]), float(parts[2])))
    return Graph(n, edges)


def write_cluster_map(path, cluster_map):
    with open(path, "w") as f:
        for c in cluster_map:
            f.write(f"{int(c)}\n")


def read_cluster_map(path):
    with open(path) as f:
        return np.array([int(line) for line in f if line.strip()], dtype=np.intp)
