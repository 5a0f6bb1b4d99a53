"""Edge modules: edge functions, the edge encoder, edge upsampling and the edge head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import MlpSpec, Tensor
from .graph import EdgeInterpMap, GraphLayer

EDGE_FUNCTIONS = ("subtraction", "summation", "hadamard", "concatsub", "concatenation")


@dataclass
class EdgeFeatures:
    layer_index: int
    values: Tensor

    def __len__(self) -> int:
        return self.values.shape[0]


def edge_input_width(variant: str, point_width: int) -> int:
    if variant not in EDGE_FUNCTIONS:
        raise ValueError(f"unknown edge function {variant!r}; expected one of {EDGE_FUNCTIONS}")
    if variant in ("concatenation", "concatsub"):
        return 3 + 2 * point_width
    return 3 + point_width


def edge_function(f_src: Tensor, f_dst: Tensor, p_src, p_dst, variant: str = "concatenation") -> Tensor:
    """Per-edge input rows from the two endpoint features and positions.

    All arguments are row-aligned batches, one row per edge.
    """
    f_src, f_dst = ad.as_tensor(f_src), ad.as_tensor(f_dst)
    if f_src.shape != f_dst.shape:
        raise ad.ShapeError(f"edge_function: endpoint features {f_src.shape} vs {f_dst.shape}")
    edge_input_width(variant, f_src.shape[1])
    disp = Tensor(np.asarray(p_dst, dtype=np.float64) - np.asarray(p_src, dtype=np.float64))
    if variant == "concatenation":
        parts = [disp, f_dst, f_src]
    elif variant == "subtraction":
        parts = [disp, ad.sub(f_dst, f_src)]
    elif variant == "summation":
        parts = [disp, ad.add(f_dst, f_src)]
    elif variant == "hadamard":
        parts = [disp, ad.mul(f_dst, f_src)]
    else:
        parts = [disp, f_dst, ad.sub(f_dst, f_src)]
    return ad.concat_cols(parts)


def edge_upsample(prev: EdgeFeatures | Tensor, interp: EdgeInterpMap) -> Tensor:
    """Interpolate coarse edge features onto the finer edges (fixed weights)."""
    values = prev.values if isinstance(prev, EdgeFeatures) else prev
    return ad.group_weighted_sum(values, interp.weights, interp.prev_index, interp.offsets)


def edge_encoder(
    point_feats: Tensor,
    upsampled: Tensor | None,
    graph: GraphLayer,
    params,
    inner: MlpSpec,
    outer: MlpSpec,
    variant: str = "concatenation",
) -> EdgeFeatures:
    """``outer([inner(edge_function(F_i, F_j)), upsampled])`` for every edge of ``graph``.

    ``params`` holds the ``inner.*`` and ``outer.*`` MLP weights; pass
    ``upsampled=None`` on the coarsest layer or when edges are not carried
    across layers.
    """
    if point_feats.shape[0] != graph.num_points:
        raise ad.ShapeError(
            f"edge_encoder: {point_feats.shape[0]} point rows for a {graph.num_points}-point layer"
        )
    f_src = ad.gather_rows(point_feats, graph.src)
    f_dst = ad.gather_rows(point_feats, graph.dst)
    x = edge_function(f_src, f_dst, graph.positions[graph.src], graph.positions[graph.dst], variant)
    h = ad.mlp_apply(inner, params.slice("inner"), x)
    if upsampled is not None:
        if upsampled.shape[0] != graph.num_edges:
            raise ad.ShapeError(
                f"edge_encoder: {upsampled.shape[0]} upsampled rows for {graph.num_edges} edges"
            )
        h = ad.concat_cols([h, upsampled])
    return EdgeFeatures(graph.layer_index, ad.mlp_apply(outer, params.slice("outer"), h))


def edge_head(final_edges: EdgeFeatures | Tensor, params, spec: MlpSpec) -> Tensor:
    """Probability that each edge joins two points of the same class, shape (E, 1)."""
    values = final_edges.values if isinstance(final_edges, EdgeFeatures) else final_edges
    return ad.sigmoid(ad.mlp_apply(spec, params, values))
