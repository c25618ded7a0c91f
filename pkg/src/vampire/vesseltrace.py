"""Vessel masks to skeleton graphs, DFS trajectories and patch scan orders.

The vessel-following order visits patches along each traced vessel branch,
bridges consecutive branches with the background patches on the straight
patch-grid line between them, and appends everything left over in raster
order, so the result is always a permutation of the patch indices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import PreconditionError, StructuralError

EIGHT = np.ones((3, 3), dtype=bool)

# E, SE, S, SW, W, NW, N, NE as (drow, dcol)
COMPASS = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))
_COMPASS_RANK = {d: i for i, d in enumerate(COMPASS)}

Pixel = tuple[int, int]


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def otsu_threshold(values: np.ndarray, bins: int = 256) -> float | None:
    """Otsu's threshold over ``bins`` histogram bins; None for constant input."""
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return None
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mu0 = m0 / np.maximum(w0, 1)
    mu1 = (m0[-1] - m0) / np.maximum(w1, 1)
    between = w0 * w1 * (mu0 - mu1) ** 2
    return float(edges[int(np.argmax(between[:-1])) + 1])


def segment_vessels(layers: np.ndarray, weights: Sequence[float] = (0.6, 0.3, 0.1)) -> np.ndarray:
    """Threshold-and-open stand-in for a learned vessel segmenter."""
    layers = np.asarray(layers, dtype=float)
    if layers.ndim != 3 or layers.shape[0] != 3:
        raise PreconditionError(f"expected 3 stacked layers, got shape {layers.shape}")
    w = np.asarray(weights, dtype=float)
    img = np.tensordot(w / w.sum(), layers, axes=1)
    t = otsu_threshold(img)
    if t is None:
        return np.zeros(img.shape, dtype=np.uint8)
    mask = img >= t
    mask = ndimage.binary_opening(mask, structure=np.ones((3, 3), bool))
    return mask.astype(np.uint8)


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    return ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT)


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy * yy + xx * xx) <= r * r


def refine_mask(mask: np.ndarray, min_component: int = 5, close_radius: int = 1) -> np.ndarray:
    """Drop small 8-connected components, then close with a disk."""
    if min_component < 0:
        raise PreconditionError("min_component must be >= 0")
    m = np.asarray(mask, dtype=bool)
    labels, n = label_components(m)
    if n:
        sizes = np.bincount(labels.ravel(), minlength=n + 1)
        keep = sizes >= min_component
        keep[0] = False
        m = keep[labels]
    if close_radius > 0:
        se = disk(close_radius)
        pad = close_radius
        padded = np.pad(m, pad)
        m = ndimage.binary_closing(padded, structure=se)[pad:-pad, pad:-pad]
    return m.astype(np.uint8)


# ---------------------------------------------------------------------------
# thinning
# ---------------------------------------------------------------------------

def _neighbours(img: np.ndarray) -> list[np.ndarray]:
    """P2..P9 (clockwise from north) for every pixel of a zero-padded image."""
    p = np.pad(img, 1)
    H, W = img.shape
    sl = lambda dr, dc: p[1 + dr:1 + dr + H, 1 + dc:1 + dc + W]
    return [sl(-1, 0), sl(-1, 1), sl(0, 1), sl(1, 1), sl(1, 0), sl(1, -1), sl(0, -1), sl(-1, -1)]


def _zhang_suen(img: np.ndarray) -> np.ndarray:
    img = img.astype(np.uint8).copy()
    while True:
        changed = False
        for step in (0, 1):
            P2, P3, P4, P5, P6, P7, P8, P9 = _neighbours(img)
            ring = [P2, P3, P4, P5, P6, P7, P8, P9, P2]
            B = P2 + P3 + P4 + P5 + P6 + P7 + P8 + P9
            A = sum(((ring[i] == 0) & (ring[i + 1] == 1)).astype(np.uint8) for i in range(8))
            if step == 0:
                c1 = (P2 * P4 * P6) == 0
                c2 = (P4 * P6 * P8) == 0
            else:
                c1 = (P2 * P4 * P8) == 0
                c2 = (P2 * P6 * P8) == 0
            delete = (img == 1) & (B >= 2) & (B <= 6) & (A == 1) & c1 & c2
            if delete.any():
                img[delete] = 0
                changed = True
        if not changed:
            return img


def _is_simple_corner(skel: np.ndarray, r: int, c: int) -> bool:
    """True if (r, c) can go without changing local 8-connectivity.

    Pixels with at least two neighbours that all form one 8-connected group
    qualify; this removes the staircase corners thinning leaves behind.
    """
    H, W = skel.shape
    nb = [(r + dr, c + dc) for dr, dc in COMPASS
          if 0 <= r + dr < H and 0 <= c + dc < W and skel[r + dr, c + dc]]
    if len(nb) < 2:
        return False
    seen = {nb[0]}
    stack = [nb[0]]
    nbset = set(nb)
    while stack:
        a = stack.pop()
        for b in nbset - seen:
            if max(abs(a[0] - b[0]), abs(a[1] - b[1])) == 1:
                seen.add(b)
                stack.append(b)
    return len(seen) == len(nb)


def _prune_staircases(skel: np.ndarray) -> np.ndarray:
    skel = skel.copy()
    changed = True
    while changed:
        changed = False
        for r, c in zip(*np.nonzero(skel)):
            if _is_simple_corner(skel, r, c):
                skel[r, c] = 0
                changed = True
    return skel


def _blocks(skel: np.ndarray) -> np.ndarray:
    return np.argwhere(skel[:-1, :-1] & skel[1:, :-1] & skel[:-1, 1:] & skel[1:, 1:])


def _makes_block(skel: np.ndarray, r: int, c: int) -> bool:
    H, W = skel.shape
    for dr in (-1, 0):
        for dc in (-1, 0):
            r0, c0 = r + dr, c + dc
            if 0 <= r0 and r0 + 1 < H and 0 <= c0 and c0 + 1 < W:
                cells = [(r0, c0), (r0 + 1, c0), (r0, c0 + 1), (r0 + 1, c0 + 1)]
                if all(skel[q] or q == (r, c) for q in cells):
                    return True
    return False


def _break_blocks(skel: np.ndarray) -> np.ndarray:
    """Remove solid 2x2 blocks, which thinning leaves where two diagonals cross.

    A block pixel that is a simple point is dropped outright. Otherwise one
    corner is dropped and each arm that hung only on it is re-attached via a
    bridging pixel adjacent to both the arm and the rest of the block.
    """
    skel = skel.copy()
    H, W = skel.shape
    adjacent = lambda a, b: max(abs(a[0] - b[0]), abs(a[1] - b[1])) == 1
    while True:
        found = _blocks(skel.astype(bool))
        if not len(found):
            return skel
        r, c = map(int, found[0])
        cells = [(r, c), (r, c + 1), (r + 1, c), (r + 1, c + 1)]
        simple = next((p for p in cells if _is_simple_corner(skel, *p)), None)
        if simple is not None:
            skel[simple] = 0
            continue
        for p in cells:
            rest = [q for q in cells if q != p]
            skel[p] = 0
            orphans = [q for q in _skeleton_neighbours(skel, p)
                       if q not in rest and not any(adjacent(q, k) for k in rest)]
            bridges = []
            for q in orphans:
                cand = [(q[0] + dr, q[1] + dc) for dr, dc in COMPASS]
                cand = [b for b in cand if 0 <= b[0] < H and 0 <= b[1] < W and b != p
                        and not skel[b] and any(adjacent(b, k) for k in rest)
                        and not _makes_block(skel, *b)]
                if not cand:
                    break
                skel[cand[0]] = 1
                bridges.append(cand[0])
            else:
                break
            for b in bridges:
                skel[b] = 0
            skel[p] = 1
        else:
            raise StructuralError(f"cannot thin the 2x2 block at ({r}, {c})")


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Zhang-Suen thinning, staircase pruning, and component preservation.

    Any input component that thinning erased entirely (2x2 blocks do that)
    is restored as its first raster pixel, so the number of 8-connected
    components never changes.
    """
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return np.zeros(m.shape, dtype=np.uint8)
    skel = _break_blocks(_prune_staircases(_zhang_suen(m.astype(np.uint8))))
    labels, n = label_components(m)
    present = np.zeros(n + 1, dtype=bool)
    present[np.unique(labels[skel.astype(bool)])] = True
    for lab in np.nonzero(~present[1:])[0] + 1:
        rr, cc = np.nonzero(labels == lab)
        skel[rr[0], cc[0]] = 1
    return skel.astype(np.uint8)


# ---------------------------------------------------------------------------
# skeleton graph
# ---------------------------------------------------------------------------

@dataclass
class Node:
    pixel: Pixel
    kind: str  # "endpoint", "junction", "isolated" or "anchor" (marks a node-free loop)


@dataclass
class Edge:
    """Pixel path between two nodes; ``path`` includes both end nodes."""
    u: int
    v: int
    path: list[Pixel]

    def __len__(self) -> int:
        return len(self.path)

    @property
    def interior(self) -> list[Pixel]:
        return self.path[1:-1]


@dataclass
class VesselGraph:
    shape: tuple[int, int]
    nodes: list[Node] = field(default_factory=list)
    edges: list[Edge] = field(default_factory=list)
    adjacency: dict[int, list[int]] = field(default_factory=dict)

    def degree(self, node: int) -> int:
        return sum(2 if self.edges[e].u == self.edges[e].v else 1 for e in self.adjacency[node])

    def pixel_count(self) -> int:
        return len(self.nodes) + sum(len(e.path) - 2 for e in self.edges)


def _skeleton_neighbours(skel: np.ndarray, p: Pixel) -> list[Pixel]:
    H, W = skel.shape
    r, c = p
    return [(r + dr, c + dc) for dr, dc in COMPASS
            if 0 <= r + dr < H and 0 <= c + dc < W and skel[r + dr, c + dc]]


def build_graph(skeleton: np.ndarray) -> VesselGraph:
    """Nodes at pixels whose neighbour count is not 2; degree-2 runs become edges."""
    skel = np.asarray(skeleton).astype(bool)
    if skel.ndim != 2:
        raise StructuralError(f"skeleton must be 2-D, got shape {skel.shape}")
    block = _blocks(skel)
    if len(block):
        r, c = block[0]
        raise StructuralError(f"skeleton is not thin: solid 2x2 block at ({r}, {c})")
    graph = VesselGraph(shape=skel.shape)
    pixels = [tuple(map(int, p)) for p in np.argwhere(skel)]  # raster order
    nbrs = {p: _skeleton_neighbours(skel, p) for p in pixels}
    node_of: dict[Pixel, int] = {}
    for p in pixels:
        k = len(nbrs[p])
        if k != 2:
            kind = "isolated" if k == 0 else "endpoint" if k == 1 else "junction"
            node_of[p] = len(graph.nodes)
            graph.nodes.append(Node(p, kind))
            graph.adjacency[node_of[p]] = []

    visited: set[Pixel] = set()

    def trace(start: Pixel, first: Pixel) -> list[Pixel]:
        path = [start, first]
        prev, cur = start, first
        while cur not in node_of:
            visited.add(cur)
            (cur, prev) = next(q for q in nbrs[cur] if q != prev), cur
            path.append(cur)
        return path

    def add_edge(path: list[Pixel]) -> None:
        u, v = node_of[path[0]], node_of[path[-1]]
        idx = len(graph.edges)
        graph.edges.append(Edge(u, v, path))
        graph.adjacency[u].append(idx)
        if v != u:
            graph.adjacency[v].append(idx)

    for p in pixels:
        if p not in node_of:
            continue
        for q in nbrs[p]:
            if q in node_of:
                if node_of[p] < node_of[q]:
                    add_edge([p, q])
            elif q not in visited:
                add_edge(trace(p, q))

    # loops with no node at all: anchor them at their first raster pixel
    for p in pixels:
        if p in node_of or p in visited:
            continue
        node_of[p] = len(graph.nodes)
        graph.nodes.append(Node(p, "anchor"))
        graph.adjacency[node_of[p]] = []
        first = min(nbrs[p], key=lambda q: _COMPASS_RANK[(q[0] - p[0], q[1] - p[1])])
        add_edge(trace(p, first))
    return graph


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def _raster(p: Pixel, width: int) -> int:
    return p[0] * width + p[1]


def _components(graph: VesselGraph) -> list[list[int]]:
    parent = list(range(len(graph.nodes)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for e in graph.edges:
        parent[find(e.u)] = find(e.v)
    groups: dict[int, list[int]] = {}
    for i in range(len(graph.nodes)):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def extract_trajectories(graph: VesselGraph) -> list[list[Pixel]]:
    """Depth-first traversal emitting one pixel trajectory per root-to-leaf path.

    The first branch taken at a node continues the current trajectory; every
    later branch starts a new trajectory at that node. Every edge is walked
    exactly once.
    """
    W = graph.shape[1]
    raster = lambda n: _raster(graph.nodes[n].pixel, W)
    comps = []
    for comp in _components(graph):
        ends = [n for n in comp if graph.nodes[n].kind == "endpoint"]
        root = min(ends or comp, key=raster)
        comps.append(root)
    comps.sort(key=raster)

    used_edge = [False] * len(graph.edges)
    seen_node = [False] * len(graph.nodes)
    out: list[list[Pixel]] = []

    def oriented(e: Edge, frm: int) -> list[Pixel]:
        if e.u == e.v or e.u == frm:
            return e.path
        return e.path[::-1]

    def branches(n: int) -> list[int]:
        here = graph.nodes[n].pixel
        cands = []
        for ei in graph.adjacency[n]:
            e = graph.edges[ei]
            for path in ([e.path, e.path[::-1]] if e.u == e.v else [oriented(e, n)]):
                step = (path[1][0] - here[0], path[1][1] - here[1])
                cands.append((_COMPASS_RANK[step], ei))
        cands.sort()
        ordered, taken = [], set()
        for _, ei in cands:
            if ei not in taken:
                taken.add(ei)
                ordered.append(ei)
        return ordered

    for root in comps:
        seen_node[root] = True
        # frame: node, trajectory-so-far, candidate edges, index, whether a branch was taken
        stack = [[root, [graph.nodes[root].pixel], branches(root), 0, False]]
        while stack:
            frame = stack[-1]
            node, current, cands, i, taken = frame
            while i < len(cands) and used_edge[cands[i]]:
                i += 1
            if i >= len(cands):
                if not taken:
                    out.append(current)
                stack.pop()
                continue
            ei = cands[i]
            frame[3] = i + 1
            used_edge[ei] = True
            path = oriented(graph.edges[ei], node)
            if not taken:
                seq = current + path[1:]
                frame[4] = True
            else:
                seq = [graph.nodes[node].pixel] + path[1:]
            e = graph.edges[ei]
            other = e.v if e.u == node else e.u
            if seen_node[other]:
                out.append(seq)
            else:
                seen_node[other] = True
                stack.append([other, seq, branches(other), 0, False])
    return out


# ---------------------------------------------------------------------------
# patch-level trajectories and scan orders
# ---------------------------------------------------------------------------

def patchify_trajectories(
    pixel_trajs: Sequence[Sequence[Pixel]],
    image_size: int,
    patch_size: int,
    vessel_fraction_min: float = 0.1,
) -> list[list[int]]:
    """Map pixel trajectories onto patch indices (row-major patch grid).

    Patches already claimed by an earlier trajectory, or holding fewer than
    ``vessel_fraction_min * patch_size`` trajectory pixels, are skipped; a
    skip splits the trajectory so every run stays 8-connected on the grid.
    """
    if image_size % patch_size:
        raise PreconditionError(f"image_size {image_size} not divisible by patch_size {patch_size}")
    g = image_size // patch_size
    counts = np.zeros(g * g, dtype=np.int64)
    for pix in {p for traj in pixel_trajs for p in traj}:
        counts[(pix[0] // patch_size) * g + pix[1] // patch_size] += 1
    keep = counts >= vessel_fraction_min * patch_size
    emitted: set[int] = set()
    out: list[list[int]] = []
    for traj in pixel_trajs:
        run: list[int] = []
        last = None
        for r, c in traj:
            idx = (r // patch_size) * g + c // patch_size
            if idx == last:
                continue
            last = idx
            if idx in emitted or not keep[idx]:
                if run:
                    out.append(run)
                run = []
                continue
            emitted.add(idx)
            run.append(idx)
        if run:
            out.append(run)
    return out


@dataclass
class Run:
    kind: str  # "V" vessel trajectory, "B" background bridge, "R" remainder
    run_id: int
    start: int
    stop: int


@dataclass
class ScanOrder:
    order: np.ndarray
    runs: list[Run]
    trajectory_count: int

    def __post_init__(self):
        self.order = np.asarray(self.order, dtype=np.int64)

    def run_slices(self, kind: str | None = None) -> list[np.ndarray]:
        return [self.order[r.start:r.stop] for r in self.runs if kind is None or r.kind == kind]


def bresenham(a: tuple[int, int], b: tuple[int, int]) -> list[tuple[int, int]]:
    (r0, c0), (r1, c1) = a, b
    dr, dc = abs(r1 - r0), -abs(c1 - c0)
    sr = 1 if r0 < r1 else -1
    sc = 1 if c0 < c1 else -1
    err = dr + dc
    pts = []
    r, c = r0, c0
    while True:
        pts.append((r, c))
        if r == r1 and c == c1:
            return pts
        e2 = 2 * err
        if e2 >= dc:
            err += dc
            r += sr
        if e2 <= dr:
            err += dr
            c += sc


def _runs_from_segments(segments: Iterable[tuple[str, int, list[int]]]) -> tuple[list[int], list[Run]]:
    order: list[int] = []
    runs: list[Run] = []
    for kind, rid, seg in segments:
        if not seg:
            continue
        runs.append(Run(kind, rid, len(order), len(order) + len(seg)))
        order.extend(seg)
    return order, runs


def build_scan_order(patch_trajs: Sequence[Sequence[int]], grid_dims: tuple[int, int]) -> ScanOrder:
    rows, cols = grid_dims
    n = rows * cols
    flat = [p for t in patch_trajs for p in t]
    if any(p < 0 or p >= n for p in flat):
        raise PreconditionError(f"patch index outside grid of {n} patches")
    if len(set(flat)) != len(flat):
        raise PreconditionError("trajectories share a patch")
    trajs = sorted((list(t) for t in patch_trajs if t), key=lambda t: t[0])
    vessel = set(flat)
    emitted: set[int] = set()
    segments: list[tuple[str, int, list[int]]] = []
    for i, traj in enumerate(trajs):
        if i > 0:
            prev = trajs[i - 1][-1]
            line = bresenham(divmod(prev, cols), divmod(traj[0], cols))
            bridge = []
            for r, c in line:
                p = r * cols + c
                if p not in vessel and p not in emitted:
                    emitted.add(p)
                    bridge.append(p)
            segments.append(("B", i - 1, bridge))
        segments.append(("V", i, traj))
        emitted.update(traj)
    segments.append(("R", 0, [p for p in range(n) if p not in emitted]))
    order, runs = _runs_from_segments(segments)
    return ScanOrder(np.array(order), runs, len(trajs))


def linear_scan_order(grid_dims: tuple[int, int]) -> ScanOrder:
    n = grid_dims[0] * grid_dims[1]
    return ScanOrder(np.arange(n), [Run("R", 0, 0, n)], 0)


def diagonal_scan_order(grid_dims: tuple[int, int]) -> ScanOrder:
    rows, cols = grid_dims
    cells = sorted(((r + c, r, r * cols + c) for r in range(rows) for c in range(cols)))
    n = rows * cols
    return ScanOrder(np.array([p for _, _, p in cells]), [Run("R", 0, 0, n)], 0)


def vessel_scan_order(
    mask: np.ndarray,
    grid_side: int,
    vessel_fraction_min: float = 0.1,
) -> ScanOrder:
    """Full chain from a binary vessel mask to a vessel-following ScanOrder."""
    mask = np.asarray(mask)
    size = mask.shape[0]
    if mask.shape[0] != mask.shape[1] or size % grid_side:
        raise PreconditionError(f"mask shape {mask.shape} does not tile into a {grid_side}x{grid_side} grid")
    skel = skeletonize(mask)
    trajs = extract_trajectories(build_graph(skel))
    ptrajs = patchify_trajectories(trajs, size, size // grid_side, vessel_fraction_min)
    return build_scan_order(ptrajs, (grid_side, grid_side))


def scan_order_for(strategy: str, grid_side: int, mask: np.ndarray | None = None,
                   vessel_fraction_min: float = 0.1) -> ScanOrder:
    if strategy == "linear":
        return linear_scan_order((grid_side, grid_side))
    if strategy == "diagonal":
        return diagonal_scan_order((grid_side, grid_side))
    if strategy == "vessel":
        if mask is None:
            raise PreconditionError("vessel strategy needs a mask")
        return vessel_scan_order(mask, grid_side, vessel_fraction_min)
    raise PreconditionError(f"unknown scan strategy {strategy!r}")


def write_order_csv(order: ScanOrder, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["position", "patch_index", "run_kind", "run_id"])
        for run in order.runs:
            for pos in range(run.start, run.stop):
                w.writerow([pos, int(order.order[pos]), run.kind, run.run_id])
    return path


# ---------------------------------------------------------------------------
# vessel statistics (used to derive synthetic labels)
# ---------------------------------------------------------------------------

def _arc_length(path: Sequence[Pixel]) -> float:
    steps = np.diff(np.asarray(path, dtype=float), axis=0)
    return float(np.sqrt((steps ** 2).sum(axis=1)).sum())


def vessel_statistics(mask: np.ndarray, min_edge: int = 8) -> dict[str, float]:
    """Density, mean tortuosity, mean caliber and branch count of a binary mask.

    Tortuosity of an edge is arc length over chord length, averaged over edges
    with at least ``min_edge`` pixels; caliber is mask area over skeleton length.
    """
    m = np.asarray(mask).astype(bool)
    density = float(m.mean())
    if not m.any():
        return {"density": 0.0, "tortuosity": 1.0, "caliber": 0.0, "branches": 0.0}
    skel = skeletonize(m)
    graph = build_graph(skel)
    torts = []
    for e in graph.edges:
        if len(e.path) >= min_edge and e.u != e.v:
            chord = float(np.hypot(e.path[-1][0] - e.path[0][0], e.path[-1][1] - e.path[0][1]))
            if chord > 0:
                torts.append(_arc_length(e.path) / chord)
    return {
        "density": density,
        "tortuosity": float(np.mean(torts)) if torts else 1.0,
        "caliber": float(m.sum() / max(1, skel.sum())),
        "branches": float(sum(1 for nd in graph.nodes if nd.kind == "junction")),
    }
