"""Deterministic parameter and FLOP accounting.

Convention (documented in every report): one multiply, add/subtract, divide
or exp counts as 1 FLOP (a multiply-accumulate is 2). Convolution counts
include padded taps, mirroring the im2col execution. The ``shadow_*``
functions run an instrumented straight-line execution that increments a
counter per scalar operation; they are the independent oracle the closed-form
counters are checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .pyramid import gt_edges, rt_edges

FLOP_CONVENTION = "mul=add=div=exp=1; MAC=2; padded conv taps counted"


@dataclass
class ComplexityReport:
    kind: str  # "params" or "flops"
    components: dict = field(default_factory=dict)
    convention: str = FLOP_CONVENTION

    @property
    def total(self):
        return sum(self.components.values())

    def to_dict(self):
        return {
            "kind": self.kind,
            "components": dict(self.components),
            "total": self.total,
            "convention": self.convention,
        }


# ---------------------------------------------------------------------------
# closed-form counters


def conv_params(cout, cin, kh, kw, bias=True):
    return cout * cin * kh * kw + (cout if bias else 0)


def conv_flops(cout, cin, kh, kw, hout, wout, bias=True):
    per_out = 2 * cin * kh * kw + (1 if bias else 0)
    return cout * hout * wout * per_out


def conv_out_hw(h, w, kh, kw, stride, pad):
    num_h, num_w = h + 2 * pad - kh, w + 2 * pad - kw
    return num_h // stride + 1, num_w // stride + 1


def attention_flops(d, n_parts, pq, pk, similarity, pk_mean=None):
    """Similarity + MoS normalization + aggregation for one attention block.

    ``pk_mean`` is the position count the mixture mean runs over (the full
    key map; differs from ``pk`` for locality-constrained windows).
    """
    if pk_mean is None:
        pk_mean = pk
    sim_per_elem = 2 if similarity == "dot" else 3  # dot: mul+acc; eud: sub+mul+acc
    total = sim_per_elem * d * pq * pk
    total += 3 * n_parts * pq * pk  # per-part softmax: exp + sum-acc + div
    total += d * (pk_mean + 1)  # key mean: accumulate + divide per channel
    total += 2 * n_parts * d  # mixture logits
    total += 3 * n_parts  # softmax over parts
    total += 2 * n_parts * pq * pk  # mixing per-part softmaxes
    total += 2 * d * pq * pk  # aggregation
    return total


def st_flops(d_in, d, n_parts, h, w, similarity="dot"):
    p = h * w
    proj = 3 * conv_flops(d, d_in, 1, 1, h, w)
    return proj + attention_flops(d, n_parts, p, p, similarity)


def gt_flops(d_in, d, n_parts, hf, wf, hc, wc, similarity="eud", square_size=None):
    proj = conv_flops(d, d_in, 1, 1, hf, wf) + 2 * conv_flops(d, d_in, 1, 1, hc, wc)
    pf, pc = hf * wf, hc * wc
    if square_size is None:
        return proj + attention_flops(d, n_parts, pf, pc, similarity)
    pk = square_size * square_size
    return proj + attention_flops(d, n_parts, pf, pk, similarity, pk_mean=pc)


def rt_flops(c, hq, wq, hk, wk):
    total = c * (hk * wk + 1)  # GAP: accumulate + divide per channel
    total += c * hq * wq  # channel-wise weighting of Q
    total += conv_flops(c, c, 3, 3, hq, wq)  # refine
    total += conv_flops(c, c, 3, 3, hq, wq)  # stride down-sampling of V
    total += c * hq * wq  # summation
    total += conv_flops(c, c, 3, 3, hq, wq)  # fuse
    return total


def ufp_params(c_in, kernels, d_model):
    total = 0
    for k in kernels:
        if k == 1:
            total += conv_params(d_model, c_in, 1, 1)
        else:
            total += conv_params(d_model, c_in, k, 1) + conv_params(d_model, d_model, 1, k)
            total += conv_params(d_model, c_in, 1, k) + conv_params(d_model, d_model, k, 1)
    return total


def ufp_flops(c_in, kernels, d_model, h, w):
    total = 0
    for k in kernels:
        if k == 1:
            total += conv_flops(d_model, c_in, 1, 1, h, w)
        else:
            total += conv_flops(d_model, c_in, k, 1, h, w)
            total += conv_flops(d_model, d_model, 1, k, h, w)
            total += conv_flops(d_model, c_in, 1, k, h, w)
            total += conv_flops(d_model, d_model, k, 1, h, w)
            total += d_model * h * w  # branch summation
    return total


_ALL = ("st", "gt", "rt")


def _width(cfg, n_levels, level, include):
    """Concat width (in maps) at a level for a component subset."""
    maps = 1
    if "st" in include:
        maps += 1
    if "gt" in include:
        maps += sum(1 for (f, _c) in gt_edges(n_levels, cfg.topology) if f == level)
    if "rt" in include:
        maps += sum(1 for (c, _f) in rt_edges(n_levels, cfg.topology) if c == level)
    return maps


def count_params(cfg, level_channels, include=_ALL, ufp=None):
    """Exact parameter counts per component for a configured network.

    ``include`` selects which transformer families are present (ablations);
    the reduce convolutions shrink with the concatenation width accordingly.
    ``ufp`` is an optional (c_in, kernels) pair for pyramids built from one
    map with large-kernel blocks.
    """
    n_levels = len(level_channels)
    d = cfg.d_model
    comp = {"input_proj": 0, "st": 0, "gt": 0, "rt": 0, "reduce": 0, "ufp": 0}
    for c in level_channels:
        if c != d:
            comp["input_proj"] += conv_params(d, c, 1, 1)
    if "st" in include:
        comp["st"] = n_levels * (3 * conv_params(d, d, 1, 1) + cfg.n_st * d)
    if "gt" in include:
        per_edge = 3 * conv_params(d, d, 1, 1) + cfg.n_gt * d
        comp["gt"] = len(gt_edges(n_levels, cfg.topology)) * per_edge
    if "rt" in include:
        comp["rt"] = len(rt_edges(n_levels, cfg.topology)) * 3 * conv_params(d, d, 3, 3)
    for l in range(n_levels):
        cin = d * _width(cfg, n_levels, l, include)
        comp["reduce"] += conv_params(d, cin, 3, 3)
    if ufp is not None:
        comp["ufp"] = ufp_params(ufp[0], ufp[1], d)
    return ComplexityReport(kind="params", components=comp)


def count_flops(cfg, spec, include=_ALL, ufp=None):
    """FLOPs of one eval-mode forward over a concrete pyramid spec."""
    n_levels = len(spec)
    d = cfg.d_model
    comp = {"input_proj": 0, "st": 0, "gt": 0, "rt": 0, "reduce": 0, "ufp": 0}
    for c, h, w in spec:
        if c != d:
            comp["input_proj"] += conv_flops(d, c, 1, 1, h, w)
    if "st" in include:
        for _c, h, w in spec:
            comp["st"] += st_flops(d, d, cfg.n_st, h, w, cfg.st_similarity)
    if "gt" in include:
        square = cfg.square_size if cfg.use_locality else None
        for (f, c) in gt_edges(n_levels, cfg.topology):
            _, hf, wf = spec[f]
            _, hc, wc = spec[c]
            comp["gt"] += gt_flops(
                d, d, cfg.n_gt, hf, wf, hc, wc, cfg.gt_similarity, square
            )
    if "rt" in include:
        for (c, f) in rt_edges(n_levels, cfg.topology):
            _, hq, wq = spec[c]
            _, hk, wk = spec[f]
            comp["rt"] += rt_flops(d, hq, wq, hk, wk)
    for l in range(n_levels):
        _, h, w = spec[l]
        cin = d * _width(cfg, n_levels, l, include)
        comp["reduce"] += conv_flops(d, cin, 3, 3, h, w)
    if ufp is not None:
        (c_in, kernels), (_c0, h0, w0) = ufp, spec[0]
        comp["ufp"] = ufp_flops(c_in, kernels, d, h0, w0)
    return ComplexityReport(kind="flops", components=comp)


# ---------------------------------------------------------------------------
# instrumented shadow execution (independent oracle for the counters above)


class OpCounter:
    __slots__ = ("flops",)

    def __init__(self):
        self.flops = 0

    def tick(self, n=1):
        self.flops += n


def shadow_conv_flops(x, w, b, stride=1, pad=0):
    """Naive convolution over a zero-padded input, counting every scalar op."""
    ctr = OpCounter()
    bs, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    sh = sw = int(stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hout = (h + 2 * pad - kh) // sh + 1
    wout = (wd + 2 * pad - kw) // sw + 1
    out = np.zeros((bs, cout, hout, wout))
    for n in range(bs):
        for co in range(cout):
            for oy in range(hout):
                for ox in range(wout):
                    acc = 0.0
                    for ci in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                prod = xp[n, ci, oy * sh + i, ox * sw + j] * w[co, ci, i, j]
                                ctr.tick()  # multiply
                                acc += prod
                                ctr.tick()  # accumulate
                    if b is not None:
                        acc += b[co]
                        ctr.tick()
                    out[n, co, oy, ox] = acc
    # only batch 1 contributes to the single-instance closed-form counters
    return out, ctr.flops


def shadow_attention_flops(q, k, v, n_parts, similarity, pi_keys=None):
    """Straight-line attention on (P, d) position arrays with op counting.

    ``pi_keys`` optionally supplies the full key set the mixture mean runs
    over when ``k`` is a windowed subset (locality-constrained case).
    """
    ctr = OpCounter()
    pq, d = q.shape
    pk = k.shape[0]
    if d % n_parts:
        raise ConfigError("width not divisible by part count")
    dn = d // n_parts
    mean_src = k if pi_keys is None else pi_keys

    # mixture weights
    kbar = np.zeros(d)
    for c in range(d):
        acc = 0.0
        for j in range(mean_src.shape[0]):
            acc += mean_src[j, c]
            ctr.tick()
        kbar[c] = acc / mean_src.shape[0]
        ctr.tick()
    # mixture logits use learned vectors; counting is weight-independent
    z = np.zeros(n_parts)
    for nn in range(n_parts):
        acc = 0.0
        for c in range(d):
            acc += 1.0 * kbar[c]
            ctr.tick(2)
        z[nn] = acc
    e = np.exp(z - z.max())
    ctr.tick(n_parts)  # exps
    ctr.tick(n_parts)  # sum accumulation
    pi = e / e.sum()
    ctr.tick(n_parts)  # divisions

    weights = np.zeros((pq, pk))
    for nn in range(n_parts):
        sl = slice(nn * dn, (nn + 1) * dn)
        scores = np.zeros((pq, pk))
        for i in range(pq):
            for j in range(pk):
                acc = 0.0
                for c in range(dn):
                    if similarity == "dot":
                        acc += q[i, sl][c] * k[j, sl][c]
                        ctr.tick(2)
                    else:
                        diff = q[i, sl][c] - k[j, sl][c]
                        acc += diff * diff
                        ctr.tick(3)
                scores[i, j] = acc if similarity == "dot" else -acc
        for i in range(pq):
            row = scores[i] - scores[i].max()
            ex = np.exp(row)
            ctr.tick(pk)  # exps
            ctr.tick(pk)  # sum accumulation
            sm = ex / ex.sum()
            ctr.tick(pk)  # divisions
            for j in range(pk):
                weights[i, j] += pi[nn] * sm[j]
                ctr.tick(2)

    out = np.zeros((pq, d))
    for i in range(pq):
        for c in range(d):
            acc = 0.0
            for j in range(pk):
                acc += weights[i, j] * v[j, c]
                ctr.tick(2)
            out[i, c] = acc
    return out, ctr.flops


def shadow_rt_flops(q, kv):
    """Rendering-attention shadow pass (convolution counts added separately
    by the caller via shadow_conv_flops)."""
    ctr = OpCounter()
    _, c, hq, wq = q.shape
    _, _, hk, wk = kv.shape
    w = np.zeros(c)
    for ci in range(c):
        acc = 0.0
        for y in range(hk):
            for x in range(wk):
                acc += kv[0, ci, y, x]
                ctr.tick()
        w[ci] = acc / (hk * wk)
        ctr.tick()
    q_att = np.zeros_like(q)
    for ci in range(c):
        for y in range(hq):
            for x in range(wq):
                q_att[0, ci, y, x] = q[0, ci, y, x] * w[ci]
                ctr.tick()
    ctr.tick(c * hq * wq)  # summation with the down-sampled value map
    return q_att, ctr.flops
