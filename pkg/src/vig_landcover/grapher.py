"""
Grapher and FFN blocks.

A Grapher block projects patch embeddings with a bias-free linear layer,
wires them into a k-NN graph, aggregates with max-relative graph
convolution, applies a grouped ("multi-head") linear update, a ReLU and a
biased linear layer, and adds the result back to its input. The FFN block
is a residual two-layer MLP with a 4x hidden width.

Linear weights are stored as [in, out].
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, DimensionError
from .graph import PatchGraph, knn_neighbors
from .tensor import Tensor, add, linear, make_op, matmul, relu, reshape, transpose

FFN_RATIO = 4


@dataclass
class GrapherParams:
    fc_in: Tensor        # [D, D], no bias
    update_w: Tensor     # [heads, 2D/heads, D/heads]
    update_b: Tensor     # [D]
    fc_out_w: Tensor     # [D, D]
    fc_out_b: Tensor     # [D]

    @property
    def dim(self) -> int:
        return self.fc_in.shape[0]

    @property
    def heads(self) -> int:
        return self.update_w.shape[0]

    def named_parameters(self):
        return {
            "fc_in": self.fc_in,
            "update_w": self.update_w,
            "update_b": self.update_b,
            "fc_out_w": self.fc_out_w,
            "fc_out_b": self.fc_out_b,
        }

    @classmethod
    def init(cls, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32) -> "GrapherParams":
        check_heads(dim, heads)
        gi, go = 2 * dim // heads, dim // heads
        return cls(
            fc_in=Tensor(kaiming_uniform(rng, (dim, dim), dim), requires_grad=True, dtype=dtype),
            update_w=Tensor(kaiming_uniform(rng, (heads, gi, go), gi), requires_grad=True, dtype=dtype),
            update_b=Tensor(np.zeros(dim), requires_grad=True, dtype=dtype),
            fc_out_w=Tensor(kaiming_uniform(rng, (dim, dim), dim), requires_grad=True, dtype=dtype),
            fc_out_b=Tensor(np.zeros(dim), requires_grad=True, dtype=dtype),
        )


@dataclass
class FfnParams:
    w1: Tensor   # [D, 4D], no bias
    w2: Tensor   # [4D, D]
    b2: Tensor   # [D]

    def named_parameters(self):
        return {"w1": self.w1, "w2": self.w2, "b2": self.b2}

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, dtype=np.float32) -> "FfnParams":
        hidden = FFN_RATIO * dim
        return cls(
            w1=Tensor(kaiming_uniform(rng, (dim, hidden), dim), requires_grad=True, dtype=dtype),
            w2=Tensor(kaiming_uniform(rng, (hidden, dim), hidden), requires_grad=True, dtype=dtype),
            b2=Tensor(np.zeros(dim), requires_grad=True, dtype=dtype),
        )


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, slope: float = np.sqrt(5.0)) -> np.ndarray:
    """U(-b, b) with b = sqrt(6 / ((1 + slope^2) * fan_in)).

    The default leaky slope sqrt(5) gives b = 1/sqrt(fan_in). The residual
    branches carry no normalisation, so the ReLU gain (slope 0) would roughly
    double the activation scale at every block.
    """
    bound = np.sqrt(6.0 / ((1.0 + slope * slope) * fan_in))
    return rng.uniform(-bound, bound, size=shape)


def check_heads(dim: int, heads: int) -> None:
    if heads < 1 or (2 * dim) % heads or dim % heads:
        raise ConfigurationError(
            f"heads={heads} must divide both the feature width {dim} and the concatenated width {2 * dim}"
        )


def _neighbor_table(graphs, batch: int, nodes: int) -> np.ndarray:
    if isinstance(graphs, np.ndarray):
        table = graphs
    elif isinstance(graphs, PatchGraph):
        table = graphs.neighbors[None]
        if graphs.num_nodes != nodes:
            raise DimensionError(f"graph has {graphs.num_nodes} nodes but embeddings have {nodes} rows")
    else:
        for g in graphs:
            if g.num_nodes != nodes:
                raise DimensionError(f"graph has {g.num_nodes} nodes but embeddings have {nodes} rows")
        table = np.stack([g.neighbors for g in graphs])
    if table.ndim != 3 or table.shape[0] != batch or table.shape[1] != nodes:
        raise DimensionError(f"neighbor table {table.shape} does not match embeddings [{batch}, {nodes}, ·]")
    return table


def max_relative_aggregate(X: Tensor, graph: Union[PatchGraph, Sequence[PatchGraph], np.ndarray]) -> Tensor:
    """Row i becomes ``concat(x_i, max_j (x_j - x_i))`` over i's neighbours.

    ``X`` is [N, D] with one graph, or [B, N, D] with one graph per image
    (or a [B, N, k] neighbour table). A node without neighbours gets a zero
    relative half.
    """
    squeeze = X.ndim == 2
    x = X.data[None] if squeeze else X.data
    if x.ndim != 3:
        raise DimensionError(f"max_relative_aggregate expects [N, D] or [B, N, D], got {X.shape}")
    B, N, D = x.shape
    nb = _neighbor_table(graph, B, N)
    k = nb.shape[2]

    if k == 0:
        rel = np.zeros_like(x)
        arg = None
    else:
        gathered = x[np.arange(B)[:, None, None], nb]           # [B, N, k, D]
        diffs = gathered - x[:, :, None, :]
        arg = diffs.argmax(axis=2)                               # [B, N, D]
        rel = np.take_along_axis(diffs, arg[:, :, None, :], axis=2)[:, :, 0, :]
    out = np.concatenate([x, rel], axis=-1)
    if squeeze:
        out = out[0]

    def _backward(g):
        g = g[None] if squeeze else g
        g_self = g[..., :D]
        g_rel = g[..., D:]
        if arg is None:
            gx = g_self.copy()
        else:
            gx = g_self - g_rel
            # neighbour that won the max, per (image, node, component)
            chosen = nb[np.arange(B)[:, None, None], np.arange(N)[None, :, None], arg]
            flat = ((np.arange(B)[:, None, None] * N + chosen) * D + np.arange(D)[None, None, :]).reshape(-1)
            scattered = np.bincount(flat, weights=g_rel.reshape(-1), minlength=B * N * D)
            gx = gx + scattered.reshape(B, N, D).astype(g.dtype)
        return (gx[0] if squeeze else gx,)

    return make_op(out, (X,), _backward, "max_relative")


def grouped_linear(a: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    """Split the last axis into ``groups`` contiguous slices, each with its own weight."""
    G, gi, go = weight.shape
    lead = a.shape[:-1]
    if a.shape[-1] != G * gi:
        raise DimensionError(f"grouped_linear input width {a.shape[-1]} != {G} groups x {gi}")
    n = int(np.prod(lead))
    h = reshape(a, (n, G, gi))
    h = transpose(h, (1, 0, 2))                 # [G, n, gi]
    h = matmul(h, weight)                       # [G, n, go]
    h = transpose(h, (1, 0, 2))
    h = reshape(h, lead + (G * go,))
    return h if bias is None else add(h, bias)


def effective_k(k: int, num_nodes: int) -> int:
    """Neighbour count actually usable on a graph of ``num_nodes`` nodes."""
    return max(0, min(k, num_nodes - 1))


def grapher_block(
    X: Tensor,
    p: GrapherParams,
    k: int,
    graph=None,
    return_graph: bool = False,
):
    """Residual Grapher layer on [N, D] or [B, N, D] embeddings.

    The graph is built from the projected features unless ``graph`` (a
    [B, N, k] neighbour table or PatchGraph(s)) is supplied. With
    ``return_graph`` the neighbour table and edge distances are returned too.
    """
    if X.shape[-1] != p.dim:
        raise DimensionError(f"grapher_block: embeddings width {X.shape[-1]} != block width {p.dim}")
    y = matmul(X, p.fc_in)
    distances = None
    if graph is None:
        yb = y.data[None] if y.ndim == 2 else y.data
        graph, distances = knn_neighbors(yb, k)
    agg = max_relative_aggregate(y, graph)
    h = relu(grouped_linear(agg, p.update_w, p.update_b))
    out = add(X, linear(h, p.fc_out_w, p.fc_out_b))
    if return_graph:
        return out, graph, distances
    return out


def ffn_block(X: Tensor, p: FfnParams) -> Tensor:
    if X.shape[-1] != p.w1.shape[0]:
        raise DimensionError(f"ffn_block: embeddings width {X.shape[-1]} != block width {p.w1.shape[0]}")
    return add(X, linear(relu(matmul(X, p.w1)), p.w2, p.b2))
