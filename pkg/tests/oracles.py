"""Brute-force reference implementations shared by the test modules.

They trade speed for obviousness: full sorts instead of partitions, dense
adjacency matrices instead of sorted edge keys.
"""

import numpy as np

from pointedge.graph import EPS, POWER, build_hierarchy, fps_order


def brute_knn(query, reference, k):
    """Indices and distances of the k nearest references, ties by index."""
    q = np.asarray(query, float)
    r = np.asarray(reference, float)
    d2 = ((q[:, None, :] - r[None, :, :]) ** 2).sum(-1)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return idx, np.sqrt(np.take_along_axis(d2, idx, axis=1))


def adjacency(layer):
    a = np.zeros((layer.num_points, layer.num_points), bool)
    a[layer.src, layer.dst] = True
    return a


def expected_layer_edges(pos, k, prev=None, cross=None):
    """Edge set of one layer as a dense boolean matrix, computed directly.

    Without ``prev`` this is the plain kNN graph (self included). With it,
    a candidate survives when some coarse edge joins a neighbor of its
    source to a neighbor of its target; points left without edges keep
    their self-edge.
    """
    n = len(pos)
    nbr, _ = brute_knn(pos, pos, k)
    cand = np.zeros((n, n), bool)
    cand[np.repeat(np.arange(n), k), nbr.ravel()] = True
    if prev is None:
        return cand
    padj = adjacency(prev)
    i, j = np.nonzero(cand)
    supported = padj[cross[i][:, :, None], cross[j][:, None, :]].any(axis=(1, 2))
    keep = np.zeros_like(cand)
    keep[i[supported], j[supported]] = True
    lonely = np.flatnonzero(~keep.any(axis=1))
    keep[lonely, lonely] = True
    return keep


def expected_interp(fine_pos, prev, cross, src, dst):
    """Supporting coarse-edge ids and normalized weights for every fine edge.

    Returns ``(ids, weights)`` as (E, k*k) arrays sorted by id per row, with
    unsupported slots holding id ``-1`` and weight 0 and placed last.
    """
    eid = np.full((prev.num_points, prev.num_points), -1)
    eid[prev.src, prev.dst] = np.arange(prev.num_edges)
    a = np.repeat(cross[src], cross.shape[1], axis=1)  # source-side coarse point of each pair
    b = np.tile(cross[dst], (1, cross.shape[1]))  # target-side coarse point
    ids = eid[a, b]
    ds = np.linalg.norm(fine_pos[src][:, None, :] - prev.positions[a], axis=2)
    dd = np.linalg.norm(fine_pos[dst][:, None, :] - prev.positions[b], axis=2)
    w = np.where(ids >= 0, 1.0 / ((ds**POWER + EPS) * (dd**POWER + EPS)), 0.0)
    total = w.sum(axis=1, keepdims=True)
    w = np.divide(w, total, out=np.zeros_like(w), where=total > 0)
    order = np.argsort(np.where(ids >= 0, ids, np.iinfo(np.int64).max), axis=1, kind="stable")
    return np.take_along_axis(ids, order, axis=1), np.take_along_axis(w, order, axis=1)


def csr_to_padded(offsets, values, width, fill):
    n = len(offsets) - 1
    out = np.full((n, width), fill, dtype=np.asarray(values).dtype)
    counts = np.diff(offsets)
    cols = np.arange(len(values)) - np.repeat(offsets[:-1], counts)
    out[np.repeat(np.arange(n), counts), cols] = values
    return out


def random_hierarchy_case(rng):
    """Random nested layer positions with valid k values (2-5 layers, up to 512 points)."""
    n_layers = int(rng.integers(2, 6))
    finest = int(rng.integers(max(8, 2 ** n_layers + 4), 513))
    sizes = sorted(rng.choice(np.arange(4, finest), size=n_layers - 1, replace=False).tolist()) + [finest]
    pos = rng.uniform(0, 1, (finest, 3)) * rng.uniform(0.2, 3.0, 3)
    order = fps_order(pos, sizes)
    pos = pos[order]
    layers = [pos[:s] for s in sizes]
    k_list = [int(rng.integers(1, min(16, s) + 1)) for s in sizes]
    k_interp = int(rng.integers(1, min(3, sizes[0]) + 1))
    return layers, k_list, k_interp


def check_against_oracle(layers, k_list, k_interp):
    """Build a hierarchy and compare every layer and interp map with the oracles."""
    hier = build_hierarchy(layers, k_list, k_interp)
    hier.check()
    assert len(hier.layers) == len(layers)
    prev = None
    for L, pos in enumerate(layers):
        layer = hier.layers[L]
        cross = None
        if L:
            cross_idx, _ = brute_knn(pos, layers[L - 1], k_interp)
            # a point that also lives in the coarser layer is its own nearest coarse point
            np.testing.assert_array_equal(hier.knn_cross[L - 1], cross_idx)
            cross = cross_idx
        want = expected_layer_edges(pos, k_list[L], prev, cross)
        np.testing.assert_array_equal(adjacency(layer), want)
        deg = layer.out_degree()
        assert deg.min() >= 1 and deg.max() <= k_list[L]
        if L:
            m = hier.interp_maps[L - 1]
            ids, w = expected_interp(pos, prev, cross, layer.src, layer.dst)
            supported = ids[:, 0] >= 0  # force-kept self-edges may lack support
            width = max(ids.shape[1], int(np.diff(m.offsets).max()))
            got_ids = csr_to_padded(m.offsets, m.prev_index, width, -1)[supported]
            got_w = csr_to_padded(m.offsets, m.weights, width, 0.0)[supported]
            np.testing.assert_array_equal(got_ids[:, ids.shape[1]:], -1)
            np.testing.assert_array_equal(got_ids[:, : ids.shape[1]], ids[supported])
            np.testing.assert_allclose(got_w[:, : ids.shape[1]], w[supported], rtol=1e-12, atol=1e-15)
        prev = layer
    return hier
