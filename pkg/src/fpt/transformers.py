"""The four pyramid transformers: self, grounding (global and
locality-constrained) and rendering.

Self attention works within one level; grounding attention pulls coarse-level
context into fine-level positions using negative squared euclidean similarity;
the locality-constrained variant restricts each query to a square window of
the coarse map (zero-filled at borders); rendering attention pushes fine-level
statistics into coarse levels through channel attention and convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as A
from . import tensor as T
from .attention import MosParams, ProjectionParams
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class StParams:
    proj: ProjectionParams
    mos: MosParams

    def named(self, prefix):
        return {**self.proj.named(f"{prefix}.proj"), **self.mos.named(f"{prefix}.mos")}


@dataclass
class GtParams:
    proj: ProjectionParams
    mos: MosParams
    square_size: int | None = None  # odd window side, in coarse-grid units

    def named(self, prefix):
        return {**self.proj.named(f"{prefix}.proj"), **self.mos.named(f"{prefix}.mos")}


@dataclass
class RtParams:
    refine_w: Tensor  # 3x3, applied to the channel-weighted Q
    refine_b: Tensor
    down_w: Tensor  # 3x3 stride conv down-sampling V
    down_b: Tensor
    fuse_w: Tensor  # 3x3 applied after summation
    fuse_b: Tensor

    def named(self, prefix):
        return {
            f"{prefix}.refine_w": self.refine_w,
            f"{prefix}.refine_b": self.refine_b,
            f"{prefix}.down_w": self.down_w,
            f"{prefix}.down_b": self.down_b,
            f"{prefix}.fuse_w": self.fuse_w,
            f"{prefix}.fuse_b": self.fuse_b,
        }


# ---------------------------------------------------------------------------
# parameter initialization (Kaiming-uniform fan-in, zero biases, seeded rng)


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def init_projection(rng, d_in, d_out):
    fan = d_in
    return ProjectionParams(
        wq=_kaiming_uniform(rng, (d_out, d_in, 1, 1), fan),
        bq=_zeros(d_out),
        wk=_kaiming_uniform(rng, (d_out, d_in, 1, 1), fan),
        bk=_zeros(d_out),
        wv=_kaiming_uniform(rng, (d_out, d_in, 1, 1), fan),
        bv=_zeros(d_out),
    )


def init_mos(rng, n_parts, d_out):
    return MosParams(mixture=_kaiming_uniform(rng, (n_parts, d_out), d_out))


def init_st_params(rng, d_in, d_out, n_parts):
    if d_out % n_parts:
        raise ConfigError(f"d_out {d_out} not divisible by part count {n_parts}")
    return StParams(proj=init_projection(rng, d_in, d_out), mos=init_mos(rng, n_parts, d_out))


def init_gt_params(rng, d_in, d_out, n_parts, square_size=None):
    if d_out % n_parts:
        raise ConfigError(f"d_out {d_out} not divisible by part count {n_parts}")
    if square_size is not None and (square_size < 1 or square_size % 2 == 0):
        raise ConfigError("square_size must be odd and >= 1")
    return GtParams(
        proj=init_projection(rng, d_in, d_out),
        mos=init_mos(rng, n_parts, d_out),
        square_size=square_size,
    )


def init_rt_params(rng, channels):
    fan = channels * 9
    return RtParams(
        refine_w=_kaiming_uniform(rng, (channels, channels, 3, 3), fan),
        refine_b=_zeros(channels),
        down_w=_kaiming_uniform(rng, (channels, channels, 3, 3), fan),
        down_b=_zeros(channels),
        fuse_w=_kaiming_uniform(rng, (channels, channels, 3, 3), fan),
        fuse_b=_zeros(channels),
    )


# ---------------------------------------------------------------------------
# forward passes


def self_transformer(x, p: StParams, similarity="dot"):
    """Within-level attention with MoS normalization; keeps spatial shape."""
    b, _, h, w = x.shape
    q = T.map_to_positions(A.project_qkv(x, p.proj, "q"))
    k = T.map_to_positions(A.project_qkv(x, p.proj, "k"))
    v = T.map_to_positions(A.project_qkv(x, p.proj, "v"))
    scores = A.part_scores(q, k, p.mos.n_parts, similarity)
    pi = A.mixture_weights(k, p.mos)
    weights = A.mos_normalize(scores, pi)
    return T.positions_to_map(A.aggregate(weights, v), h, w)


def grounding_transformer(xf, xc, p: GtParams, similarity="eud"):
    """Global top-down attention: fine queries over all coarse keys/values."""
    if p.square_size is not None:
        raise ConfigError("use locality_grounding_transformer when square_size is set")
    b, _, hf, wf = xf.shape
    q = T.map_to_positions(A.project_qkv(xf, p.proj, "q"))
    k = T.map_to_positions(A.project_qkv(xc, p.proj, "k"))
    v = T.map_to_positions(A.project_qkv(xc, p.proj, "v"))
    scores = A.part_scores(q, k, p.mos.n_parts, similarity)
    pi = A.mixture_weights(k, p.mos)
    weights = A.mos_normalize(scores, pi)
    return T.positions_to_map(A.aggregate(weights, v), hf, wf)


def window_indices(hf, wf, hc, wc, square_size):
    """Coarse-grid key indices for each fine position; -1 marks zero fill.

    The window center for fine position (y, x) is
    (floor(y*hc/hf), floor(x*wc/wf)).
    """
    if square_size < 1 or square_size % 2 == 0:
        raise ConfigError("square_size must be odd and >= 1")
    r = (square_size - 1) // 2
    ys = np.arange(hf) * hc // hf
    xs = np.arange(wf) * wc // wf
    offs = np.arange(-r, r + 1)
    wy = ys[:, None] + offs[None, :]  # (hf, S)
    wx = xs[:, None] + offs[None, :]  # (wf, S)
    valid_y = (wy >= 0) & (wy < hc)
    valid_x = (wx >= 0) & (wx < wc)
    flat = wy[:, None, :, None] * wc + wx[None, :, None, :]  # (hf, wf, S, S)
    ok = valid_y[:, None, :, None] & valid_x[None, :, None, :]
    flat = np.where(ok, flat, -1)
    return flat.reshape(hf * wf, square_size * square_size)


def locality_grounding_transformer(xf, xc, p: GtParams, similarity="eud"):
    """Grounding attention restricted to a square window of the coarse map.

    Keys/values outside the coarse map enter as zero vectors; normalization
    runs over exactly square_size**2 entries per query.
    """
    if p.square_size is None:
        raise ConfigError("locality_grounding_transformer requires square_size")
    b, _, hf, wf = xf.shape
    _, _, hc, wc = xc.shape
    n = p.mos.n_parts
    d = p.proj.d_out
    s2 = p.square_size * p.square_size

    q = T.map_to_positions(A.project_qkv(xf, p.proj, "q"))  # (B,Pf,d)
    k = T.map_to_positions(A.project_qkv(xc, p.proj, "k"))  # (B,Pc,d)
    v = T.map_to_positions(A.project_qkv(xc, p.proj, "v"))

    idx = window_indices(hf, wf, hc, wc, p.square_size)
    kw = T.gather_positions(k, idx)  # (B,Pf,S2,d)
    vw = T.gather_positions(v, idx)

    pf = hf * wf
    dn = d // n
    qp = T.reshape(
        T.transpose(T.reshape(q, (b, pf, n, dn)), (0, 2, 1, 3)), (b, n, pf, 1, dn)
    )
    kwp = T.transpose(T.reshape(kw, (b, pf, s2, n, dn)), (0, 3, 1, 2, 4))
    if similarity == "eud":
        diff = T.sub(qp, kwp)
        scores = T.neg(T.tsum(T.mul(diff, diff), axis=-1))  # (B,N,Pf,S2)
    elif similarity == "dot":
        scores = T.tsum(T.mul(qp, kwp), axis=-1)
    else:
        raise ShapeError(f"unknown similarity {similarity!r}")

    per_part = T.softmax(scores, axis=-1)
    pi = A.mixture_weights(k, p.mos)
    pib = T.reshape(pi, (b, n, 1, 1))
    weights = T.tsum(T.mul(pib, per_part), axis=1)  # (B,Pf,S2)

    out = T.tsum(T.mul(T.reshape(weights, (b, pf, s2, 1)), vw), axis=2)  # (B,Pf,d)
    return T.positions_to_map(out, hf, wf)


def rendering_transformer(q, kv, p: RtParams):
    """Bottom-up fusion: channel attention from the fine map, stride conv,
    summation, and a fusing convolution. Output matches Q's spatial shape."""
    _, _, hq, wq = q.shape
    _, _, hk, wk = kv.shape
    if q.shape[1] != kv.shape[1]:
        raise ShapeError("Q and K/V channel widths differ")
    if hk % hq or wk % wq:
        raise ShapeError(f"non-integer Q/V scale ratio: {hk}x{wk} over {hq}x{wq}")
    rh, rw = hk // hq, wk // wq
    if rh != rw:
        raise ShapeError("anisotropic Q/V scale ratio")

    w = T.global_avg_pool(kv)  # (B,C,1,1) channel weights
    q_att = T.mul(q, w)
    q_ref = T.conv2d(q_att, p.refine_w, p.refine_b, stride=1, pad=1)
    v_dow = T.conv2d(kv, p.down_w, p.down_b, stride=rh, pad=1, allow_floor=True)
    if v_dow.shape[2:] != (hq, wq):
        raise ShapeError("down-sampled V does not match Q's spatial shape")
    return T.conv2d(T.add(q_ref, v_dow), p.fuse_w, p.fuse_b, stride=1, pad=1)


def rt_stride(hq, hkv):
    """Stride used by the value down-sampling conv (1 when scales are equal)."""
    if hkv % hq:
        raise ShapeError("non-integer Q/V scale ratio")
    return hkv // hq
