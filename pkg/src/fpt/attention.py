"""Shared attention primitives: q/k/v projection, similarities, MoS weights.

All heavy paths work on position lists of shape (B, P, d) and score blocks of
shape (B, N, P_q, P_k), where N is the mixture-of-softmaxes part count. The
scalar similarity functions operate on plain vectors and double as oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


@dataclass
class ProjectionParams:
    """1x1 convolution kernels/biases realizing the q/k/v projections."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor

    @property
    def d_in(self):
        return self.wq.shape[1]

    @property
    def d_out(self):
        return self.wq.shape[0]

    def named(self, prefix):
        return {
            f"{prefix}.wq": self.wq,
            f"{prefix}.bq": self.bq,
            f"{prefix}.wk": self.wk,
            f"{prefix}.bk": self.bk,
            f"{prefix}.wv": self.wv,
            f"{prefix}.bv": self.bv,
        }


@dataclass
class MosParams:
    """Learned mixture vectors, one full-width vector per softmax part."""

    mixture: Tensor  # (N, d_out)

    @property
    def n_parts(self):
        return self.mixture.shape[0]

    def named(self, prefix):
        return {f"{prefix}.mixture": self.mixture}


def project_qkv(x, p: ProjectionParams, which):
    """Apply one of the three position-wise projections to a feature map."""
    w, b = {
        "q": (p.wq, p.bq),
        "k": (p.wk, p.bk),
        "v": (p.wv, p.bv),
    }[which]
    return T.conv2d(x, w, b, stride=1, pad=0)


def sim_dot(q, k):
    """Dot-product similarity of two equal-length vectors."""
    q, k = np.asarray(q, dtype=np.float64), np.asarray(k, dtype=np.float64)
    if q.shape != k.shape or q.ndim != 1:
        raise ShapeError("sim_dot expects equal-length vectors")
    return float(q @ k)


def sim_eud(q, k):
    """Negative squared euclidean distance; 0 iff q == k, negative otherwise."""
    q, k = np.asarray(q, dtype=np.float64), np.asarray(k, dtype=np.float64)
    if q.shape != k.shape or q.ndim != 1:
        raise ShapeError("sim_eud expects equal-length vectors")
    d = q - k
    return float(-(d @ d))


def split_parts(x, n_parts):
    """(B, P, d) -> (B, N, P, d/N) by contiguous channel slices."""
    b, p, d = x.shape
    if d % n_parts:
        raise ShapeError(f"width {d} not divisible by part count {n_parts}")
    return T.transpose(T.reshape(x, (b, p, n_parts, d // n_parts)), (0, 2, 1, 3))


def part_scores(q, k, n_parts, similarity):
    """Per-part similarity scores: (B,P_q,d) x (B,P_k,d) -> (B,N,P_q,P_k)."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("query/key widths differ")
    qp = split_parts(q, n_parts)  # (B,N,Pq,dn)
    kp = split_parts(k, n_parts)  # (B,N,Pk,dn)
    dots = T.matmul(qp, T.transpose(kp, (0, 1, 3, 2)))  # (B,N,Pq,Pk)
    if similarity == "dot":
        return dots
    if similarity == "eud":
        # -(|q|^2 + |k|^2 - 2 q.k), expanded to avoid a (Pq x Pk x d) buffer
        q_sq = T.tsum(T.mul(qp, qp), axis=-1, keepdims=True)  # (B,N,Pq,1)
        k_sq = T.transpose(
            T.tsum(T.mul(kp, kp), axis=-1, keepdims=True), (0, 1, 3, 2)
        )  # (B,N,1,Pk)
        return T.neg(T.add(T.add(q_sq, k_sq), T.scale(dots, -2.0)))
    raise ShapeError(f"unknown similarity {similarity!r}")


def mixture_weights(k, m: MosParams):
    """Aggregating weights pi = softmax(w_n . mean_j k_j), shape (B, N).

    ``k`` is the projected key tensor, either a (B, C, H, W) map or a
    (B, P, d) position list; the mean runs over all positions.
    """
    if k.ndim == 4:
        k = T.map_to_positions(k)
    if k.ndim != 3:
        raise ShapeError("mixture_weights expects a key map or position list")
    if k.shape[-1] != m.mixture.shape[1]:
        raise ShapeError("mixture vector width does not match key width")
    kbar = T.mean(k, axis=1)  # (B, d)
    kb = T.reshape(kbar, (kbar.shape[0], 1, kbar.shape[1]))
    z = T.tsum(T.mul(kb, m.mixture), axis=-1)  # (B, N) via broadcast
    return T.softmax(z, axis=-1)


def mos_normalize(scores, pi):
    """Mixture-of-softmaxes normalization of a (B,N,P_q,P_k) score block.

    Each part is softmaxed over keys (with max-shift stabilization inside
    softmax) and the parts are mixed with weights ``pi`` of shape (B, N).
    Output rows sum to 1 per query.
    """
    if scores.ndim != 4:
        raise ShapeError("mos_normalize expects (B,N,Pq,Pk) scores")
    if pi.ndim != 2 or pi.shape != (scores.shape[0], scores.shape[1]):
        raise ShapeError("pi shape does not match score parts")
    per_part = T.softmax(scores, axis=-1)  # (B,N,Pq,Pk)
    b, n = pi.shape
    pib = T.reshape(pi, (b, n, 1, 1))
    return T.tsum(T.mul(pib, per_part), axis=1)  # (B,Pq,Pk)


def aggregate(w, v):
    """Weighted aggregation: (B,P_q,P_k) weights x (B,P_k,d) values."""
    if w.ndim != 3 or v.ndim != 3 or w.shape[-1] != v.shape[1]:
        raise ShapeError("aggregate dimension mismatch")
    sums = w.data.sum(axis=-1)
    if np.abs(sums - 1.0).max() > 1e-9:
        raise ShapeError("aggregate weights must sum to 1 per query")
    return T.matmul(w, v)
