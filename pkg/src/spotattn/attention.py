"""Negative-aware multi-head attention with a 2D distance bias.

Each head h computes raw scores S = q kᵀ / sqrt(d_k) and a fixed additive
penalty B = m_h * distance. Two softmax branches share those scores:

    A_pos = softmax(S + B)
    A_neg = softmax((-S + B) / tau_neg)
    A_final = A_pos - beta * A_neg

so a key pair can carry a signed weight: strongly similar keys get positive
weight, strongly dissimilar ones get weight near -beta. Every unmasked row
of A_final sums to exactly 1 - beta, since both branches are row-stochastic.

Two equivalent execution paths exist: a dense one taking an optional boolean
mask, and a gathered one for k-NN neighborhoods that only materializes the
(n x k) score matrix. They agree to float rounding; tests pin this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ShapeError
from .geometry import KnnGraph, grid_distances
from .numerics import Tape, Tensor

Array = np.ndarray


def slopes(n_heads: int) -> list[float]:
    """Per-head bias slopes: the geometric sequence -2^-1 .. -2^-H."""
    if n_heads < 1:
        raise ValueError(f"need at least one head, got {n_heads}")
    return [-(2.0 ** -(h + 1)) for h in range(n_heads)]


@dataclass
class NegAttnParams:
    """Hyperparameters of the negative-aware attention op."""

    tau_neg: float
    beta: float
    slopes: list[float]
    n_heads: int
    d_model: int

    @classmethod
    def default(cls, d_model: int, n_heads: int, tau_neg: float = 0.6, beta: float = 1.5):
        return cls(
            tau_neg=tau_neg,
            beta=beta,
            slopes=slopes(n_heads),
            n_heads=n_heads,
            d_model=d_model,
        )

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> None:
        if self.tau_neg <= 0:
            raise ConfigError(f"tau_neg must be positive, got {self.tau_neg}")
        if self.beta < 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")
        if len(self.slopes) != self.n_heads:
            raise ConfigError(f"{len(self.slopes)} slopes for {self.n_heads} heads")
        if any(m >= 0 for m in self.slopes):
            raise ConfigError(f"all bias slopes must be negative, got {self.slopes}")
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")


@dataclass
class AttentionMaps:
    """Detached per-head weight matrices for inspection and export.

    For dense attention the arrays are (n_query, n_key) and key_indices is
    None; for the gathered k-NN path they are (n_query, k) with key_indices
    giving each column's key id.
    """

    a_pos: Array
    a_neg: Array
    a_final: Array
    key_indices: Array | None = None


@dataclass
class HeadProjections:
    """Per-head q/k/v weights (d x d_k each) plus a shared output map (d x d)."""

    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor


def neg_aware_attention(
    q,
    k,
    v,
    bias: Array,
    mask: Array | None,
    params: NegAttnParams,
    tape: Tape | None = None,
) -> tuple[Tensor, AttentionMaps]:
    """Single-head negative-aware attention over dense keys.

    q is (n_q, d_k), k and v are (n_kv, d_k), bias is a constant
    (n_q, n_kv) penalty added to both score branches before their softmaxes.
    mask, if given, is boolean with True marking attendable keys; masked
    entries are excluded from both softmaxes and are exactly 0 in all maps.
    """
    q, k, v = nm._as_tensor(q), nm._as_tensor(k), nm._as_tensor(v)
    if q.cols != k.cols:
        raise ShapeError(f"q cols {q.cols} != k cols {k.cols}")
    if k.rows != v.rows:
        raise ShapeError(f"k rows {k.rows} != v rows {v.rows}")
    if bias.shape != (q.rows, k.rows):
        raise ShapeError(f"bias shape {bias.shape}, expected {(q.rows, k.rows)}")
    s = nm.scale(nm.matmul(q, nm.transpose(k, tape), tape), 1.0 / math.sqrt(q.cols), tape)
    a_pos, a_neg, a_final = _branches(s, bias, mask, params, tape)
    out = nm.matmul(a_final, v, tape)
    maps = AttentionMaps(a_pos.data.copy(), a_neg.data.copy(), a_final.data.copy())
    return out, maps


def neg_aware_attention_knn(
    q,
    k,
    v,
    knn: KnnGraph,
    bias: Array,
    params: NegAttnParams,
    tape: Tape | None = None,
) -> tuple[Tensor, AttentionMaps]:
    """Gathered k-NN variant: scores, softmaxes, and maps are (n_q, k).

    Semantically identical to the dense op under the mask that unmasks
    exactly each query's neighbor list; only the neighbor columns are
    computed. bias is the gathered (n_q, k) penalty.
    """
    q, k, v = nm._as_tensor(q), nm._as_tensor(k), nm._as_tensor(v)
    if bias.shape != knn.indices.shape:
        raise ShapeError(f"bias shape {bias.shape}, expected {knn.indices.shape}")
    s = nm.scale(nm.gather_dot(q, k, knn.indices, tape), 1.0 / math.sqrt(q.cols), tape)
    a_pos, a_neg, a_final = _branches(s, bias, None, params, tape)
    out = nm.gather_mix(a_final, v, knn.indices, tape)
    maps = AttentionMaps(
        a_pos.data.copy(), a_neg.data.copy(), a_final.data.copy(), knn.indices.copy()
    )
    return out, maps


def _branches(s: Tensor, bias: Array, mask, params: NegAttnParams, tape):
    """Shared positive/negative branch algebra on top of raw scores."""
    params.validate()
    s_pos = nm.add(s, bias, tape)
    s_neg = nm.add(nm.scale(s, -1.0, tape), bias, tape)
    a_pos = nm.softmax_rows(s_pos, mask, tape)
    a_neg = nm.softmax_rows(nm.scale(s_neg, 1.0 / params.tau_neg, tape), mask, tape)
    a_final = nm.add(a_pos, nm.scale(a_neg, -params.beta, tape), tape)
    return a_pos, a_neg, a_final


def multi_head_attention(
    x_query,
    x_kv,
    coords_q: Array,
    coords_kv: Array,
    knn: KnnGraph | None,
    proj: HeadProjections,
    params: NegAttnParams,
    tape: Tape | None = None,
    want_maps: bool = False,
    dist: Array | None = None,
) -> tuple[Tensor, list[AttentionMaps] | None]:
    """Multi-head negative-aware attention block.

    With ``knn`` given, each query row attends to exactly its k neighbors
    (gathered path); otherwise attention is dense over all of x_kv. Head
    outputs are concatenated then passed through the shared output
    projection. ``dist`` optionally supplies the precomputed grid distance
    matrix (gathered (n, k) when knn is given, dense otherwise) so repeated
    calls on one slide skip the geometry.
    """
    x_query, x_kv = nm._as_tensor(x_query), nm._as_tensor(x_kv)
    if x_query.cols != params.d_model or x_kv.cols != params.d_model:
        raise ShapeError(
            f"feature dims {x_query.cols}/{x_kv.cols} do not match d_model={params.d_model}"
        )
    if dist is None:
        dist = knn.distances if knn is not None else grid_distances(coords_q, coords_kv)
    head_out = []
    all_maps: list[AttentionMaps] = []
    for h in range(params.n_heads):
        q = nm.matmul(x_query, proj.wq[h], tape)
        k = nm.matmul(x_kv, proj.wk[h], tape)
        v = nm.matmul(x_kv, proj.wv[h], tape)
        bias = params.slopes[h] * dist
        if knn is None:
            out_h, maps = neg_aware_attention(q, k, v, bias, None, params, tape)
        else:
            out_h, maps = neg_aware_attention_knn(q, k, v, knn, bias, params, tape)
        head_out.append(out_h)
        if want_maps:
            all_maps.append(maps)
    merged = nm.concat_cols(head_out, tape) if len(head_out) > 1 else head_out[0]
    out = nm.matmul(merged, proj.wo, tape)
    return out, (all_maps if want_maps else None)
