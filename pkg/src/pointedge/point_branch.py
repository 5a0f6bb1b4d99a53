"""Encoder-decoder point network interacting with the edge branch.

The block is reordered once by farthest point sampling so that every
coarser layer is a prefix of the finer one. The encoder abstracts the
finest layer down to layer 0; the decoder climbs back up, and at each
decoder layer the edge module and the point module exchange information.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import MlpSpec, Params, Tensor
from .edge_branch import EDGE_FUNCTIONS, EdgeFeatures, edge_encoder, edge_head, edge_input_width, edge_upsample
from .geom import PointCloud, farthest_point_sample, knn
from .graph import EPS, GraphLayer, HierGraph, build_hierarchy, cross_neighbors, fps_order

MESSAGE_PASSING = ("maxpool_concat", "adaaggre_softmax", "adaaggre_nosoftmax")
GRAPH_MODES = ("hierarchical", "independent")


@dataclass
class PointFeatures:
    layer_index: int
    values: Tensor


@dataclass
class NetworkConfig:
    layer_sizes: tuple[int, ...] = (16, 64, 256, 1024, 4096)
    k_list: tuple[int, ...] = (4, 6, 10, 14, 16)
    k_interp: int = 3
    point_widths: tuple[int, ...] = (256, 256, 128, 128, 64)
    edge_widths: tuple[int, ...] | None = None  # defaults to point_widths
    group_sizes: tuple[int, ...] | None = None  # SA group size into layer L; defaults to k_list[L + 1]
    input_dim: int = 9
    num_classes: int = 13
    message_passing: str = "maxpool_concat"
    graph_mode: str = "hierarchical"
    edge_function: str = "concatenation"
    fps_start: int = 0
    init: str = "he"  # he | glorot

    def __post_init__(self):
        for f in ("layer_sizes", "k_list", "point_widths", "edge_widths", "group_sizes"):
            v = getattr(self, f)
            if v is not None:
                setattr(self, f, tuple(int(x) for x in v))
        if self.edge_widths is None:
            self.edge_widths = self.point_widths
        if self.group_sizes is None:
            self.group_sizes = tuple(self.k_list[1:])
        self.validate()

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes)

    def validate(self) -> None:
        n = self.num_layers
        if n < 1:
            raise ValueError("at least one layer is required")
        for name in ("k_list", "point_widths", "edge_widths"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} must have {n} entries")
        if len(self.group_sizes) != n - 1:
            raise ValueError(f"group_sizes must have {n - 1} entries")
        if any(b <= a for a, b in zip(self.layer_sizes, self.layer_sizes[1:])):
            raise ValueError(f"layer sizes {self.layer_sizes} must increase strictly")
        for L, (k, size) in enumerate(zip(self.k_list, self.layer_sizes)):
            if not 1 <= k <= size:
                raise ValueError(f"k={k} at layer {L} exceeds its {size} points")
        for L, g in enumerate(self.group_sizes):
            if not 1 <= g <= self.layer_sizes[L + 1]:
                raise ValueError(f"group size {g} into layer {L} exceeds the finer layer")
        if n > 1 and not 1 <= self.k_interp <= self.layer_sizes[0]:
            raise ValueError("k_interp exceeds the coarsest layer")
        if self.message_passing not in MESSAGE_PASSING:
            raise ValueError(f"message_passing must be one of {MESSAGE_PASSING}")
        if self.graph_mode not in GRAPH_MODES:
            raise ValueError(f"graph_mode must be one of {GRAPH_MODES}")
        if self.edge_function not in EDGE_FUNCTIONS:
            raise ValueError(f"edge_function must be one of {EDGE_FUNCTIONS}")

    # -- derived MLP shapes ------------------------------------------------

    def encoder_width(self, L: int) -> int:
        return self.input_dim if L == self.num_layers - 1 else self.point_widths[L]

    def point_module_width(self, L: int) -> int:
        c = self.point_widths[L]
        return c + self.edge_widths[L] if self.message_passing == "maxpool_concat" else c

    def mlp_specs(self) -> dict[str, MlpSpec]:
        specs = {}
        C, K = self.point_widths, self.edge_widths
        top = self.num_layers - 1
        for L in range(top):
            cin = 3 + self.encoder_width(L + 1)
            specs[f"sa{L}"] = MlpSpec((cin, C[L], C[L]), final="relu")
        for L in range(self.num_layers):
            if L > 0:
                cin = self.point_module_width(L - 1) + self.encoder_width(L)
                specs[f"fp{L}"] = MlpSpec((cin, C[L], C[L]), final="relu")
            ein = edge_input_width(self.edge_function, C[L])
            specs[f"edge{L}.inner"] = MlpSpec((ein, K[L], K[L]), final="relu")
            carried = K[L - 1] if L > 0 and self.graph_mode == "hierarchical" else 0
            specs[f"edge{L}.outer"] = MlpSpec((K[L] + carried, K[L], K[L]), final="relu")
            if self.message_passing != "maxpool_concat":
                specs[f"ada{L}"] = MlpSpec((K[L], 1))
        specs["point_head"] = MlpSpec((self.point_module_width(top), C[top], self.num_classes))
        specs["edge_head"] = MlpSpec((K[top], K[top], 1))
        return specs

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def init_params(cfg: NetworkConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    params = Params()
    for name, spec in cfg.mlp_specs().items():
        params.update(ad.init_mlp(spec, rng, name, cfg.init))
    return params


# ---------------------------------------------------------------------------
# point-branch operations


def set_abstraction(points, feats: Tensor, m: int, k: int, params, spec: MlpSpec, centers=None):
    """Sample ``m`` centers, group ``k`` neighbors each, MLP and max-pool per group.

    Returns ``(center_indices, new_feats)``. ``centers`` overrides the FPS
    choice (the network passes prefixes of its global sampling order).
    """
    points = np.asarray(points, dtype=np.float64)
    if m > len(points):
        raise ValueError(f"set_abstraction: cannot pick {m} centers from {len(points)} points")
    if centers is None:
        centers = farthest_point_sample(points, m)
    centers = np.asarray(centers, dtype=np.int64)
    nbr = knn(points[centers], points, k).indices  # (m, k)
    flat = nbr.ravel()
    rel = points[flat] - np.repeat(points[centers], k, axis=0)
    x = ad.concat_cols([Tensor(rel), ad.gather_rows(feats, flat)])
    h = ad.mlp_apply(spec, params, x)
    return centers, ad.scatter_max_groups(h, np.arange(0, m * k + 1, k))


def interpolation_weights(dist: np.ndarray) -> np.ndarray:
    """Normalized ``1 / (d^2 + eps)`` weights per row of a (N, k) distance table."""
    w = 1.0 / (dist**2 + EPS)
    return w / w.sum(axis=1, keepdims=True)


def interpolate(coarse_feats: Tensor, nbr: np.ndarray, dist: np.ndarray) -> Tensor:
    n, k = nbr.shape
    w = interpolation_weights(dist)
    return ad.group_weighted_sum(coarse_feats, w.ravel(), nbr.ravel(), np.arange(0, n * k + 1, k))


def feature_propagate(coarse_points, coarse_feats: Tensor, fine_points, skip_feats: Tensor | None, params,
                      spec: MlpSpec, k_interp: int = 3, nbr=None, dist=None) -> Tensor:
    """Inverse-squared-distance interpolation to the finer points, skip concat, MLP."""
    if nbr is None:
        nbr, dist = cross_neighbors(fine_points, coarse_points, k_interp, nested=False)
    x = interpolate(coarse_feats, nbr, dist)
    if skip_feats is not None:
        x = ad.concat_cols([x, skip_feats])
    return ad.mlp_apply(spec, params, x)


def point_module(point_feats: Tensor, edge_feats: EdgeFeatures | Tensor, graph: GraphLayer) -> Tensor:
    """Concatenate each point's feature with the max over its out-edge features."""
    h = edge_feats.values if isinstance(edge_feats, EdgeFeatures) else edge_feats
    if h.shape[0] != graph.num_edges:
        raise ad.ShapeError(f"point_module: {h.shape[0]} edge rows for {graph.num_edges} edges")
    if np.any(graph.out_degree() == 0):
        raise RuntimeError("point_module: point without out-edges")
    return ad.concat_cols([point_feats, ad.scatter_max_groups(h, graph.offsets)])


def ada_aggregate(point_feats: Tensor, edge_feats: EdgeFeatures | Tensor, graph: GraphLayer,
                  use_softmax: bool, params, spec: MlpSpec) -> Tensor:
    """Weighted sum of out-neighbor features with weights predicted from edges."""
    h = edge_feats.values if isinstance(edge_feats, EdgeFeatures) else edge_feats
    if h.shape[0] != graph.num_edges:
        raise ad.ShapeError(f"ada_aggregate: {h.shape[0]} edge rows for {graph.num_edges} edges")
    if np.any(graph.out_degree() == 0):
        raise RuntimeError("ada_aggregate: point without out-edges")
    w = ad.mlp_apply(spec, params, h)
    if use_softmax:
        w = ad.group_softmax(w, graph.offsets)
    return ad.group_weighted_sum(point_feats, w, graph.dst, graph.offsets)


def point_head(feats: Tensor, params, spec: MlpSpec) -> Tensor:
    return ad.mlp_apply(spec, params, feats)


REFINE_FLOOR = 1e-12


def refine_with_edges(scores: Tensor, edge_preds: Tensor, graph: GraphLayer) -> Tensor:
    """Average the scores of each point's out-neighbors, weighted by edge predictions.

    The weight sum is floored at ``REFINE_FLOOR``: a saturated sigmoid can
    round every prediction of a point to exactly zero.
    """
    num = ad.group_weighted_sum(scores, edge_preds, graph.dst, graph.offsets)
    den = ad.group_weighted_sum(Tensor(np.ones((graph.num_points, 1))), edge_preds, graph.dst, graph.offsets)
    return ad.div(num, ad.clip(den, REFINE_FLOOR, np.inf))


# ---------------------------------------------------------------------------
# full network


@dataclass
class ForwardResult:
    scores: Tensor  # (N, classes), block order
    refined: Tensor  # (N, classes), block order
    edge_preds: Tensor  # (E, 1) over hier.layers[-1] edges
    hier: HierGraph
    order: np.ndarray  # block row of each finest-layer point
    shapes: dict = field(default_factory=dict)


def forward(cfg: NetworkConfig, block: PointCloud, params: Params) -> ForwardResult:
    n_top = cfg.layer_sizes[-1]
    if len(block) != n_top:
        raise ValueError(f"block has {len(block)} points, config expects {n_top}")
    if block.features.shape[1] != cfg.input_dim:
        raise ValueError(f"block features have width {block.features.shape[1]}, config expects {cfg.input_dim}")
    specs = cfg.mlp_specs()
    top = cfg.num_layers - 1
    shapes = {}

    order = fps_order(block.positions, cfg.layer_sizes, cfg.fps_start)
    pos = block.positions[order]
    layer_pos = [pos[:size] for size in cfg.layer_sizes]
    hier = build_hierarchy(
        layer_pos, cfg.k_list, cfg.k_interp, cfg.graph_mode, [order[:size] for size in cfg.layer_sizes]
    )

    enc: list[Tensor | None] = [None] * cfg.num_layers
    enc[top] = Tensor(block.features[order])
    for L in range(top - 1, -1, -1):
        _, enc[L] = set_abstraction(
            layer_pos[L + 1], enc[L + 1], cfg.layer_sizes[L], cfg.group_sizes[L],
            params.slice(f"sa{L}"), specs[f"sa{L}"], centers=np.arange(cfg.layer_sizes[L]),
        )
        shapes[f"enc{L}"] = enc[L].shape

    feats = enc[0]
    fused = None
    h_prev = None
    for L in range(cfg.num_layers):
        layer = hier.layers[L]
        if L > 0:
            feats = feature_propagate(
                layer_pos[L - 1], fused, layer_pos[L], enc[L], params.slice(f"fp{L}"), specs[f"fp{L}"],
                nbr=hier.knn_cross[L - 1], dist=hier.cross_dist[L - 1],
            )
        shapes[f"point{L}"] = feats.shape
        up = None
        if L > 0 and cfg.graph_mode == "hierarchical":
            up = edge_upsample(h_prev, hier.interp_maps[L - 1])
        h = edge_encoder(
            feats, up, layer, params.slice(f"edge{L}"), specs[f"edge{L}.inner"], specs[f"edge{L}.outer"],
            cfg.edge_function,
        )
        shapes[f"edge{L}"] = h.values.shape
        if cfg.message_passing == "maxpool_concat":
            fused = point_module(feats, h, layer)
        else:
            fused = ada_aggregate(
                feats, h, layer, cfg.message_passing == "adaaggre_softmax", params.slice(f"ada{L}"),
                specs[f"ada{L}"],
            )
        shapes[f"fused{L}"] = fused.shape
        h_prev = h

    finest = hier.layers[top]
    scores_local = point_head(fused, params.slice("point_head"), specs["point_head"])
    edge_preds = edge_head(h_prev, params.slice("edge_head"), specs["edge_head"])
    refined_local = refine_with_edges(scores_local, edge_preds, finest)
    inverse = np.argsort(order)
    return ForwardResult(
        scores=ad.gather_rows(scores_local, inverse),
        refined=ad.gather_rows(refined_local, inverse),
        edge_preds=edge_preds,
        hier=hier,
        order=order,
        shapes=shapes,
    )
