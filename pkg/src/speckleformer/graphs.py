"""Patch-graph machinery: adjacency builders, graph attention, and
importance-weighted non-symmetric attention.

Adjacency strategies treat the patch grid as a graph over N = gh*gw
nodes: a Gaussian kernel over patch-grid distance (``spatial``), a free
trainable matrix (``learnable``), or cosine similarity of the current
patch embeddings (``feature``). Graph attention weights exponentiated
pair scores by the adjacency before normalizing, which reduces to the
plain masked formulation when the adjacency is binary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GraphError, ShapeError
from .tensor import (ParameterStore, Tensor, clamp_min, exp, matmul, relu,
                     reshape, softmax_rows, sqrt, sum_, take, transpose)

ADJACENCY_STRATEGIES = ("full", "spatial", "learnable", "feature")

_NORM_FLOOR = 1e-12


@dataclass
class AdjacencyMatrix:
    """Patch-relationship weights plus the strategy that produced them.

    ``values`` is (N, N), or (B, N, N) for batched feature similarity;
    learnable and feature values stay attached to the autodiff graph.
    """

    values: Tensor
    strategy: str
    n: int


@dataclass
class GatParams:
    """Graph-attention parameters: shared projection W (d_in, d_out) and
    the pair-scoring vector a (2 * d_out,)."""

    W: Tensor
    a: Tensor


def spatial_adjacency(grid_h: int, grid_w: int, sigma: float = 1.0) -> AdjacencyMatrix:
    """Gaussian kernel over Euclidean patch-grid distance:
    A_ij = exp(-d_ij^2 / (2 sigma^2)), so A_ii = 1."""
    if sigma <= 0:
        raise GraphError(f"sigma must be positive, got {sigma}")
    rows, cols = np.divmod(np.arange(grid_h * grid_w), grid_w)
    d2 = (rows[:, None] - rows[None, :]) ** 2 + (cols[:, None] - cols[None, :]) ** 2
    values = np.exp(-d2 / (2.0 * sigma * sigma))
    return AdjacencyMatrix(Tensor(values), "spatial", grid_h * grid_w)


def learnable_adjacency(store: ParameterStore, n: int,
                        name: str = "gat/theta") -> AdjacencyMatrix:
    """Register an (N, N) trainable adjacency initialized to all ones,
    which makes the graph start out fully connected."""
    if n < 1:
        raise GraphError(f"need at least one node, got {n}")
    theta = store[name] if name in store else store.add(name, np.ones((n, n)))
    return AdjacencyMatrix(theta, "learnable", n)


def feature_adjacency(embeddings) -> AdjacencyMatrix:
    """Cosine similarity between patch embeddings, differentiable.

    Rows with norm <= 1e-12 get 0 off-diagonal and 1 on-diagonal. Input
    is (N, d) or batched (B, N, d).
    """
    h = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    if h.ndim not in (2, 3):
        raise ShapeError(f"feature_adjacency needs (N, d) or (B, N, d), got {h.shape}")
    n = h.shape[-2]
    norms = sqrt(clamp_min(sum_(h * h, axis=-1, keepdims=True), _NORM_FLOOR ** 2))
    gram = matmul(h, transpose(h, tuple(range(h.ndim - 2)) + (h.ndim - 1, h.ndim - 2)))
    denom = matmul(norms, transpose(norms, tuple(range(h.ndim - 2)) + (h.ndim - 1, h.ndim - 2)))
    values = gram / denom
    degenerate = np.sqrt((h.data ** 2).sum(axis=-1)) <= _NORM_FLOOR
    if degenerate.any():
        fix = np.zeros(values.shape)
        eye = np.eye(n)
        fix[..., :, :] = eye * degenerate[..., None, :]
        values = values + Tensor(fix)
    return AdjacencyMatrix(values, "feature", n)


def full_adjacency(n: int) -> AdjacencyMatrix:
    """All-ones adjacency: every patch connected to every other."""
    return AdjacencyMatrix(Tensor(np.ones((n, n))), "full", n)


def gat_attention(h, params: GatParams,
                  adjacency: AdjacencyMatrix) -> tuple[Tensor, Tensor]:
    """Graph attention over patch embeddings.

    Pair scores e_ij = ReLU(a . [W h_i, W h_j]) are exponentiated,
    weighted by the (non-negative-clamped) adjacency, and row-normalized
    into coefficients alpha; outputs aggregate the projected embeddings:
    h_out_i = sum_j alpha_ij W h_j. Returns (alpha, h_out). Accepts
    (N, d_in) or (B, N, d_in) input.
    """
    h = h if isinstance(h, Tensor) else Tensor(h)
    batched = h.ndim == 3
    if not batched and h.ndim != 2:
        raise ShapeError(f"gat_attention needs (N, d) or (B, N, d), got {h.shape}")
    d_out = params.W.shape[1]
    u = matmul(h, params.W)
    a1 = reshape(take(params.a, np.arange(d_out)), (d_out, 1))
    a2 = reshape(take(params.a, np.arange(d_out, 2 * d_out)), (d_out, 1))
    fi = matmul(u, a1)                      # (..., N, 1)
    fj = transpose(matmul(u, a2),
                   tuple(range(u.ndim - 2)) + (u.ndim - 1, u.ndim - 2))  # (..., 1, N)
    e = relu(fi + fj)
    a_vals = relu(adjacency.values)         # weights must be non-negative
    row_sums = a_vals.data.sum(axis=-1)
    if np.any(row_sums <= 0.0):
        bad = int(np.argwhere(row_sums <= 0.0)[0][-1])
        raise GraphError(f"adjacency row {bad} is all zero: "
                         f"patch {bad} has no neighborhood")
    # constant max-shift keeps exp in range without changing alpha
    shift = Tensor(e.data.max(axis=-1, keepdims=True))
    weighted = a_vals * exp(e - shift)
    alpha = weighted / sum_(weighted, axis=-1, keepdims=True)
    h_out = matmul(alpha, u)
    return alpha, h_out


def scaled_dot_attention(q, k, v, importance: Tensor | None = None
                         ) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the last two axes, optionally
    reweighted by per-key importance.

    With importance w, attention becomes softmax(q k^T / sqrt(d) + w),
    which equals the post-softmax reweighting s_ij e^{w_j} / sum_k
    s_ik e^{w_k} exactly, and stays bitwise identical to the plain
    softmax at w = 0. The resulting matrix is not symmetric in general.
    Shapes: q, k, v are (..., N, d_head); w is (N,).
    """
    q = q if isinstance(q, Tensor) else Tensor(q)
    k = k if isinstance(k, Tensor) else Tensor(k)
    v = v if isinstance(v, Tensor) else Tensor(v)
    d_head = q.shape[-1]
    perm = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = matmul(q, transpose(k, perm)) * (1.0 / np.sqrt(d_head))
    if importance is not None:
        scores = scores + importance        # broadcasts over the key axis
    attn = softmax_rows(scores)
    return attn, matmul(attn, v)


def importance_attention(q, k, v, w: Tensor) -> tuple[Tensor, Tensor]:
    """Non-symmetric attention with learnable per-patch key importance."""
    return scaled_dot_attention(q, k, v, importance=w)


def adjacency_to_csv(adjacency: AdjacencyMatrix, path: str) -> None:
    """Dump adjacency values row-major at 17 significant digits."""
    values = adjacency.values.data
    if values.ndim != 2:
        raise ShapeError(f"CSV export needs a 2-D adjacency, got {values.shape}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in values:
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")
