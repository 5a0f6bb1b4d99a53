"""Hierarchical directed graphs over nested point layers.

Layer 0 is the coarsest. Every finer layer starts from a kNN graph and
drops candidate edges that have no support among the coarser layer's
edges; the surviving support also defines how coarse edge features are
interpolated onto the finer edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import farthest_point_sample, knn, knn_with_self

EPS = 1e-8
POWER = 2


@dataclass
class GraphLayer:
    layer_index: int
    point_indices: np.ndarray
    positions: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    offsets: np.ndarray  # out-edges of point i are edges[offsets[i]:offsets[i+1]]

    @property
    def num_points(self) -> int:
        return len(self.point_indices)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def edges(self) -> np.ndarray:
        return np.stack([self.src, self.dst], axis=1)

    def out_edges(self, i: int) -> np.ndarray:
        return np.arange(self.offsets[i], self.offsets[i + 1])

    def out_degree(self) -> np.ndarray:
        return np.diff(self.offsets)

    def edge_keys(self) -> np.ndarray:
        return self.src * self.num_points + self.dst

    def check(self) -> None:
        """Assert the structural invariants; raises AssertionError."""
        n = self.num_points
        assert self.offsets[0] == 0 and self.offsets[-1] == self.num_edges
        assert np.all(np.diff(self.offsets) >= 1), "point without out-edges"
        assert np.all((self.src >= 0) & (self.src < n) & (self.dst >= 0) & (self.dst < n))
        expect_src = np.repeat(np.arange(n), np.diff(self.offsets))
        assert np.array_equal(self.src, expect_src), "edges not grouped by src"
        keys = self.edge_keys()
        assert np.all(np.diff(keys) > 0), "edges not sorted by dst or duplicated"


@dataclass
class EdgeInterpMap:
    """CSR map: finer edge e draws from coarser edges prev_index[offsets[e]:offsets[e+1]]."""

    offsets: np.ndarray
    prev_index: np.ndarray
    weights: np.ndarray

    @property
    def num_edges(self) -> int:
        return len(self.offsets) - 1

    def entries(self, e: int) -> list[tuple[int, float]]:
        s, t = self.offsets[e], self.offsets[e + 1]
        return list(zip(self.prev_index[s:t].tolist(), self.weights[s:t].tolist()))

    def check(self, prev_edge_count: int) -> None:
        assert np.all(np.diff(self.offsets) >= 1), "edge with empty interpolation support"
        assert np.all((self.prev_index >= 0) & (self.prev_index < prev_edge_count))
        sums = np.add.reduceat(self.weights, self.offsets[:-1])
        assert np.all(np.abs(sums - 1.0) <= 1e-9), "interpolation weights do not sum to 1"


@dataclass
class HierGraph:
    layers: list[GraphLayer]
    # interp_maps[L - 1] maps layer L-1 edges onto layer L; None in independent mode
    interp_maps: list[EdgeInterpMap | None]
    # knn_cross[L - 1]: for each layer-L point, its k_interp nearest layer-(L-1) points
    knn_cross: list[np.ndarray]
    cross_dist: list[np.ndarray] = field(default_factory=list)
    mode: str = "hierarchical"

    def check(self) -> None:
        for layer in self.layers:
            layer.check()
        for L in range(1, len(self.layers)):
            fine, coarse = self.layers[L], self.layers[L - 1]
            assert fine.num_points > coarse.num_points
            assert np.array_equal(fine.point_indices[: coarse.num_points], coarse.point_indices)
            m = self.interp_maps[L - 1]
            if m is not None:
                assert m.num_edges == fine.num_edges
                m.check(coarse.num_edges)


def _csr_offsets(src: np.ndarray, n: int) -> np.ndarray:
    counts = np.bincount(src, minlength=n)
    return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)


def _layer_from_pairs(layer_index, point_indices, positions, src, dst) -> GraphLayer:
    n = len(point_indices)
    order = np.lexsort((dst, src))
    src, dst = src[order].astype(np.int64), dst[order].astype(np.int64)
    return GraphLayer(layer_index, np.asarray(point_indices), positions, src, dst, _csr_offsets(src, n))


def knn_edges(positions: np.ndarray, k: int, layer_index: int = 0, point_indices=None) -> GraphLayer:
    """Directed kNN graph with every point linked to itself."""
    n = len(positions)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}] for layer {layer_index}")
    nbr = knn_with_self(positions, k)
    src = np.repeat(np.arange(n), k)
    pi = np.arange(n) if point_indices is None else point_indices
    return _layer_from_pairs(layer_index, pi, positions, src, nbr.ravel())


def init_graph(points0, k0: int, point_indices=None) -> GraphLayer:
    """Layer-0 graph: each point joined to its k0 nearest points, itself included."""
    return knn_edges(np.asarray(points0, dtype=np.float64).reshape(-1, 3), k0, 0, point_indices)


def cross_neighbors(fine_pos, coarse_pos, k: int, nested: bool = True):
    """k nearest coarse points of each fine point.

    With ``nested`` the first ``len(coarse_pos)`` fine points are the coarse
    points themselves and each of them is kept in its own list.
    """
    if not 1 <= k <= len(coarse_pos):
        raise ValueError(f"k_interp={k} must lie in [1, {len(coarse_pos)}]")
    table = knn(fine_pos, coarse_pos, k)
    idx, dist = table.indices.copy(), table.distances.copy()
    if nested:
        nc = len(coarse_pos)
        rows = np.arange(nc)
        missing = ~np.any(idx[:nc] == rows[:, None], axis=1)
        idx[rows[missing], -1] = rows[missing]
        dist[rows[missing], -1] = 0.0
    return idx, dist


def neighbor_edge_set(edge, knn_cross: np.ndarray) -> set[tuple[int, int]]:
    """All coarse point pairs (a, b) with a near the edge's source and b near its target."""
    i, j = edge
    return {(int(a), int(b)) for a in knn_cross[i] for b in knn_cross[j]}


def edge_upsample_weights(d_src, d_dst, t: float = POWER, eps: float = EPS) -> np.ndarray:
    """Normalized inverse-distance-product weights for matched coarse edges.

    ``d_src[m]``/``d_dst[m]`` are the distances from the fine edge's source
    and target to the endpoints of matched coarse edge ``m``.
    """
    d_src = np.asarray(d_src, dtype=np.float64)
    d_dst = np.asarray(d_dst, dtype=np.float64)
    if d_src.size == 0:
        raise RuntimeError("edge has no matched coarse edges")
    w = 1.0 / ((d_src**t + eps) * (d_dst**t + eps))
    return w / w.sum()


def build_layer_graph(points_L, kL: int, prev: GraphLayer, knn_cross: np.ndarray, point_indices=None):
    """Prune the kNN graph of layer L against the coarser layer; returns (layer, interp map)."""
    pos = np.asarray(points_L, dtype=np.float64).reshape(-1, 3)
    n = len(pos)
    if not 1 <= kL <= n:
        raise ValueError(f"k={kL} must lie in [1, {n}]")
    L = prev.layer_index + 1
    cand = knn_with_self(pos, kL)
    cand.sort(axis=1)
    src = np.repeat(np.arange(n), kL)
    dst = cand.ravel()

    nprev = prev.num_points
    prev_keys = prev.edge_keys()
    ni, nj = knn_cross[src], knn_cross[dst]  # (E, k)
    keys = ni[:, :, None] * nprev + nj[:, None, :]  # (E, k, k)
    pos_in_prev = np.searchsorted(prev_keys, keys)
    found = prev_keys[np.minimum(pos_in_prev, len(prev_keys) - 1)] == keys
    keep = found.any(axis=(1, 2))

    # a point whose candidates were all discarded keeps its self-edge
    kept_per_point = np.add.reduceat(keep.astype(np.int64), np.arange(0, len(src), kL))
    orphan = np.flatnonzero(kept_per_point == 0)
    if len(orphan):
        keep[(src == dst) & np.isin(src, orphan)] = True

    src, dst = src[keep], dst[keep]
    found, pos_in_prev = found[keep], pos_in_prev[keep]
    layer = _layer_from_pairs(L, np.arange(n) if point_indices is None else point_indices, pos, src, dst)
    # _layer_from_pairs re-sorts; candidates were already in (src, dst) order
    assert np.array_equal(layer.src, src) and np.array_equal(layer.dst, dst)

    prev_pos = prev.positions
    ne = len(src)
    d_src = np.linalg.norm(pos[src][:, None, :] - prev_pos[knn_cross[src]], axis=2)  # (E, k)
    d_dst = np.linalg.norm(pos[dst][:, None, :] - prev_pos[knn_cross[dst]], axis=2)
    raw = 1.0 / ((d_src[:, :, None] ** POWER + EPS) * (d_dst[:, None, :] ** POWER + EPS))
    e_ids, a, b = np.nonzero(found)
    prev_ids = pos_in_prev[e_ids, a, b]
    w = raw[e_ids, a, b]

    unsupported = np.setdiff1d(np.arange(ne), e_ids)
    if len(unsupported):
        # force-kept edges without support fall back to the coarse out-edges near their source
        extra_e, extra_p, extra_w = [], [], []
        for e in unsupported:
            matched = np.unique(np.concatenate([prev.out_edges(q) for q in knn_cross[src[e]]]))
            ds = np.linalg.norm(pos[src[e]] - prev_pos[prev.src[matched]], axis=1)
            dd = np.linalg.norm(pos[dst[e]] - prev_pos[prev.dst[matched]], axis=1)
            extra_e.append(np.full(len(matched), e))
            extra_p.append(matched)
            extra_w.append(1.0 / ((ds**POWER + EPS) * (dd**POWER + EPS)))
        e_ids = np.concatenate([e_ids, *extra_e])
        prev_ids = np.concatenate([prev_ids, *extra_p])
        w = np.concatenate([w, *extra_w])

    order = np.lexsort((prev_ids, e_ids))
    e_ids, prev_ids, w = e_ids[order], prev_ids[order], w[order]
    offsets = np.concatenate([[0], np.cumsum(np.bincount(e_ids, minlength=ne))]).astype(np.int64)
    w = w / np.repeat(np.add.reduceat(w, offsets[:-1]), np.diff(offsets))
    interp = EdgeInterpMap(offsets, prev_ids.astype(np.int64), w)
    return layer, interp


def fps_order(positions: np.ndarray, sizes, start_index: int = 0) -> np.ndarray:
    """Permutation of the finest layer whose prefixes are the coarser layers.

    FPS runs once for the second-finest size; the remaining points follow
    in their original order.
    """
    n = len(positions)
    if list(sizes) != sorted(set(sizes)) or sizes[-1] != n:
        raise ValueError(f"layer sizes {list(sizes)} must increase strictly and end at {n}")
    if len(sizes) == 1:
        return np.arange(n)
    picked = farthest_point_sample(positions, sizes[-2], start_index)
    rest = np.setdiff1d(np.arange(n), picked, assume_unique=True)
    return np.concatenate([picked, rest])


def build_hierarchy(point_layers, k_list, k_interp: int = 3, mode: str = "hierarchical", point_indices=None) -> HierGraph:
    """Build G_0..G_L over nested point layers ordered coarse to fine.

    ``point_layers[L]`` are the positions of layer L; the first
    ``len(point_layers[L-1])`` rows of layer L must be the layer-(L-1) points.
    ``mode="independent"`` builds plain per-layer kNN graphs with no pruning
    and no interpolation maps.
    """
    if mode not in ("hierarchical", "independent"):
        raise ValueError(f"unknown graph mode {mode!r}")
    if len(k_list) != len(point_layers):
        raise ValueError("k_list length must equal the number of layers")
    layers_pos = [np.asarray(p, dtype=np.float64).reshape(-1, 3) for p in point_layers]
    if point_indices is None:
        point_indices = [np.arange(len(p)) for p in layers_pos]
    for L in range(1, len(layers_pos)):
        if len(layers_pos[L]) <= len(layers_pos[L - 1]):
            raise ValueError("layer point counts must strictly increase")

    layers = [init_graph(layers_pos[0], k_list[0], point_indices[0])]
    interp_maps, cross, cross_d = [], [], []
    for L in range(1, len(layers_pos)):
        idx, dist = cross_neighbors(layers_pos[L], layers_pos[L - 1], k_interp)
        cross.append(idx)
        cross_d.append(dist)
        if mode == "hierarchical":
            layer, m = build_layer_graph(layers_pos[L], k_list[L], layers[-1], idx, point_indices[L])
        else:
            layer, m = knn_edges(layers_pos[L], k_list[L], L, point_indices[L]), None
        layers.append(layer)
        interp_maps.append(m)
    return HierGraph(layers, interp_maps, cross, cross_d, mode)


def dump_graph(hier: HierGraph, path) -> None:
    """Text dump: ``L src dst`` per edge, then ``L edge prev_edge weight`` per interpolation entry."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# edges: L src dst\n")
        for layer in hier.layers:
            for s, d in zip(layer.src.tolist(), layer.dst.tolist()):
                fh.write(f"{layer.layer_index} {s} {d}\n")
        fh.write("# interp: L edge prev_edge weight\n")
        for L, m in enumerate(hier.interp_maps, start=1):
            if m is None:
                continue
            for e in range(m.num_edges):
                for p, w in m.entries(e):
                    fh.write(f"{L} {e} {p} {w:.9f}\n")
