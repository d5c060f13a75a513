"""Feature pyramid construction and the full cross-scale forward pass.

A pyramid is an ordered list of levels, finest to coarsest. ``fpt_forward``
runs self attention on every level, grounding attention from coarser levels,
and rendering attention from finer levels (all-pairs or adjacent wiring),
concatenates each level's maps along channels, reduces back to ``d_model``
with a 3x3 convolution, and optionally applies DropBlock in train mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import transformers as TR
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class PyramidLevel:
    tensor: Tensor
    stride: int  # spatial stride relative to level 0


@dataclass
class FeaturePyramid:
    levels: list[PyramidLevel]

    def __post_init__(self):
        if not self.levels:
            return
        batch = self.levels[0].tensor.shape[0]
        prev = 0
        for lv in self.levels:
            if lv.tensor.ndim != 4:
                raise ShapeError("pyramid levels must be 4-D tensors")
            if lv.tensor.shape[0] != batch:
                raise ShapeError("pyramid levels must share batch size")
            if lv.stride < max(prev, 1) or (prev and lv.stride % prev):
                raise ShapeError("pyramid strides must be non-decreasing integer multiples")
            prev = lv.stride

    def __len__(self):
        return len(self.levels)

    def shapes(self):
        return [lv.tensor.shape for lv in self.levels]


@dataclass
class DropBlockConfig:
    block_size: int
    keep_prob: float

    def __post_init__(self):
        if not (0.0 < self.keep_prob <= 1.0):
            raise ConfigError("keep_prob must be in (0, 1]")
        if self.block_size < 1 or (self.block_size > 1 and self.block_size % 2 == 0):
            raise ConfigError("block_size must be 1 or odd")


_TASK_DROPBLOCK = {"instance": (5, 0.9), "pixel": (3, 0.9)}


@dataclass
class FptConfig:
    """Full hyperparameter record; defaults follow the reference settings
    (part counts 2/4, window 5, 256 channels, DropBlock 5/0.9 for
    instance-level and 3/0.9 for pixel-level)."""

    task: str = "instance"
    n_st: int = 2
    n_gt: int = 4
    square_size: int = 5
    d_model: int = 256
    topology: str = "all-pairs"
    st_similarity: str = "dot"
    gt_similarity: str = "eud"
    use_locality: bool | None = None
    dropblock: DropBlockConfig | None = None

    def __post_init__(self):
        if self.task not in _TASK_DROPBLOCK:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.topology not in ("all-pairs", "adjacent"):
            raise ConfigError(f"unknown topology {self.topology!r}")
        if self.st_similarity not in ("dot", "eud") or self.gt_similarity not in ("dot", "eud"):
            raise ConfigError("similarity must be 'dot' or 'eud'")
        if self.n_st < 1 or self.n_gt < 1:
            raise ConfigError("part counts must be >= 1")
        if self.d_model % self.n_st or self.d_model % self.n_gt:
            raise ConfigError("d_model must be divisible by the part counts")
        if self.square_size < 1 or self.square_size % 2 == 0:
            raise ConfigError("square_size must be odd and >= 1")
        if self.use_locality is None:
            self.use_locality = self.task == "pixel"
        if self.dropblock is None:
            bs, kp = _TASK_DROPBLOCK[self.task]
            self.dropblock = DropBlockConfig(bs, kp)

    def to_dict(self):
        return {
            "task": self.task,
            "n_st": self.n_st,
            "n_gt": self.n_gt,
            "square_size": self.square_size,
            "d_model": self.d_model,
            "topology": self.topology,
            "st_similarity": self.st_similarity,
            "gt_similarity": self.gt_similarity,
            "use_locality": self.use_locality,
            "dropblock": {
                "block_size": self.dropblock.block_size,
                "keep_prob": self.dropblock.keep_prob,
            },
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        db = d.pop("dropblock", None)
        cfg = cls(**d)
        if db is not None:
            cfg.dropblock = DropBlockConfig(**db)
        return cfg


# ---------------------------------------------------------------------------
# pyramid builders


def synth_pyramid(seed, spec):
    """Deterministic unit-normal pyramid from (channels, H, W) level specs."""
    if not spec:
        raise ConfigError("pyramid spec must have at least one level")
    rng = np.random.default_rng(seed)
    levels = []
    c0, h0, w0 = spec[0]
    for c, h, w in spec:
        if h < 1 or w < 1 or c < 1:
            raise ConfigError("level dims must be >= 1")
        if h0 % h or w0 % w or h0 // h != w0 // w:
            raise ConfigError(f"invalid stride chain at level ({c},{h},{w})")
        stride = h0 // h
        if levels and stride < levels[-1].stride:
            raise ConfigError("pyramid strides must be non-decreasing")
        data = rng.standard_normal((1, c, h, w))
        levels.append(PyramidLevel(Tensor(data), stride))
    return FeaturePyramid(levels)


@dataclass
class UfpBlockParams:
    """One large-kernel block: a plain 1x1 projection for kernel 1, otherwise
    two separable branches (kx1 then 1xk, and the transposed order) summed."""

    kernel: int
    proj_w: Tensor | None = None
    proj_b: Tensor | None = None
    a1_w: Tensor | None = None
    a1_b: Tensor | None = None
    a2_w: Tensor | None = None
    a2_b: Tensor | None = None
    b1_w: Tensor | None = None
    b1_b: Tensor | None = None
    b2_w: Tensor | None = None
    b2_b: Tensor | None = None

    def named(self, prefix):
        out = {}
        for f in ("proj_w", "proj_b", "a1_w", "a1_b", "a2_w", "a2_b",
                  "b1_w", "b1_b", "b2_w", "b2_b"):
            t = getattr(self, f)
            if t is not None:
                out[f"{prefix}.{f}"] = t
        return out


def init_ufp_params(rng, c_in, kernels, d_model):
    blocks = []
    for k in kernels:
        if k < 1 or k % 2 == 0:
            raise ConfigError("UFP kernels must be odd")
        if k == 1:
            blocks.append(
                UfpBlockParams(
                    kernel=1,
                    proj_w=TR._kaiming_uniform(rng, (d_model, c_in, 1, 1), c_in),
                    proj_b=TR._zeros(d_model),
                )
            )
        else:
            blocks.append(
                UfpBlockParams(
                    kernel=k,
                    a1_w=TR._kaiming_uniform(rng, (d_model, c_in, k, 1), c_in * k),
                    a1_b=TR._zeros(d_model),
                    a2_w=TR._kaiming_uniform(rng, (d_model, d_model, 1, k), d_model * k),
                    a2_b=TR._zeros(d_model),
                    b1_w=TR._kaiming_uniform(rng, (d_model, c_in, 1, k), c_in * k),
                    b1_b=TR._zeros(d_model),
                    b2_w=TR._kaiming_uniform(rng, (d_model, d_model, k, 1), d_model * k),
                    b2_b=TR._zeros(d_model),
                )
            )
    return blocks


def build_ufp(x, blocks):
    """Build a same-resolution pyramid from one map via large-kernel blocks."""
    levels = []
    for blk in blocks:
        k = blk.kernel
        if k == 1:
            out = T.conv2d(x, blk.proj_w, blk.proj_b, stride=1, pad=0)
        else:
            p = k // 2
            a = T.conv2d(x, blk.a1_w, blk.a1_b, stride=1, pad=(p, 0))
            a = T.conv2d(a, blk.a2_w, blk.a2_b, stride=1, pad=(0, p))
            b = T.conv2d(x, blk.b1_w, blk.b1_b, stride=1, pad=(0, p))
            b = T.conv2d(b, blk.b2_w, blk.b2_b, stride=1, pad=(p, 0))
            out = T.add(a, b)
        levels.append(PyramidLevel(out, 1))
    return FeaturePyramid(levels)


# ---------------------------------------------------------------------------
# DropBlock


def dropblock(x, block_size, keep_prob, mode, seed):
    """Structured dropout zeroing square blocks; identity in eval mode.

    Kept activations are rescaled by total/kept counts per (batch, channel)
    plane so per-sample means stay unbiased.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown mode {mode!r}")
    if not (0.0 < keep_prob <= 1.0):
        raise ConfigError("keep_prob must be in (0, 1]")
    b, c, h, w = x.shape
    if block_size < 1 or block_size > min(h, w):
        raise ConfigError("block_size must be in [1, min(H, W)]")
    if mode == "eval" or keep_prob == 1.0:
        return x

    hv, wv = h - block_size + 1, w - block_size + 1
    gamma = (1.0 - keep_prob) / (block_size**2) * (h * w) / (hv * wv)
    rng = np.random.default_rng(seed)
    centers = rng.random((b, c, hv, wv)) < gamma
    mask = np.ones((b, c, h, w))
    for i in range(block_size):
        for j in range(block_size):
            region = mask[:, :, i : i + hv, j : j + wv]
            region[centers] = 0.0
    kept = mask.sum(axis=(2, 3), keepdims=True)
    factor = np.divide(h * w, kept, out=np.zeros_like(kept), where=kept > 0)
    return T.mul(x, Tensor(mask * factor))


# ---------------------------------------------------------------------------
# full forward


@dataclass
class FptParams:
    """All learnable tensors of one configured network."""

    input_proj: list  # per level: (w, b) or None when channels == d_model
    st: list  # per level StParams
    gt: dict  # (fine, coarse) -> GtParams
    rt: dict  # (coarse, fine) -> RtParams
    reduce: list  # per level (w, b)

    def named(self):
        out = {}
        for l, pr in enumerate(self.input_proj):
            if pr is not None:
                out[f"level{l}.in_proj.w"], out[f"level{l}.in_proj.b"] = pr
        for l, p in enumerate(self.st):
            out.update(p.named(f"level{l}.st"))
        for (f, c) in sorted(self.gt):
            out.update(self.gt[(f, c)].named(f"gt.{f}_{c}"))
        for (c, f) in sorted(self.rt):
            out.update(self.rt[(c, f)].named(f"rt.{c}_{f}"))
        for l, (w, b) in enumerate(self.reduce):
            out[f"level{l}.reduce.w"] = w
            out[f"level{l}.reduce.b"] = b
        return out

    def map_tensors(self, fn):
        """Return a copy with fn(name, tensor) applied to every parameter."""

        def conv_pair(pair, prefix):
            if pair is None:
                return None
            return (fn(f"{prefix}.w", pair[0]), fn(f"{prefix}.b", pair[1]))

        def proj(p, prefix):
            from .attention import ProjectionParams

            return ProjectionParams(
                wq=fn(f"{prefix}.wq", p.wq), bq=fn(f"{prefix}.bq", p.bq),
                wk=fn(f"{prefix}.wk", p.wk), bk=fn(f"{prefix}.bk", p.bk),
                wv=fn(f"{prefix}.wv", p.wv), bv=fn(f"{prefix}.bv", p.bv),
            )

        def mos(m, prefix):
            from .attention import MosParams

            return MosParams(mixture=fn(f"{prefix}.mixture", m.mixture))

        st = [
            TR.StParams(
                proj=proj(p.proj, f"level{l}.st.proj"),
                mos=mos(p.mos, f"level{l}.st.mos"),
            )
            for l, p in enumerate(self.st)
        ]
        gt = {
            e: TR.GtParams(
                proj=proj(p.proj, f"gt.{e[0]}_{e[1]}.proj"),
                mos=mos(p.mos, f"gt.{e[0]}_{e[1]}.mos"),
                square_size=p.square_size,
            )
            for e, p in self.gt.items()
        }
        rt = {
            e: TR.RtParams(
                refine_w=fn(f"rt.{e[0]}_{e[1]}.refine_w", p.refine_w),
                refine_b=fn(f"rt.{e[0]}_{e[1]}.refine_b", p.refine_b),
                down_w=fn(f"rt.{e[0]}_{e[1]}.down_w", p.down_w),
                down_b=fn(f"rt.{e[0]}_{e[1]}.down_b", p.down_b),
                fuse_w=fn(f"rt.{e[0]}_{e[1]}.fuse_w", p.fuse_w),
                fuse_b=fn(f"rt.{e[0]}_{e[1]}.fuse_b", p.fuse_b),
            )
            for e, p in self.rt.items()
        }
        return FptParams(
            input_proj=[
                conv_pair(pr, f"level{l}.in_proj")
                for l, pr in enumerate(self.input_proj)
            ],
            st=st,
            gt=gt,
            rt=rt,
            reduce=[
                conv_pair(pair, f"level{l}.reduce")
                for l, pair in enumerate(self.reduce)
            ],
        )


def gt_edges(n_levels, topology):
    """(fine, coarse) pairs receiving grounding attention at the fine level."""
    if topology == "adjacent":
        return [(l, l + 1) for l in range(n_levels - 1)]
    return [(f, c) for f in range(n_levels) for c in range(f + 1, n_levels)]


def rt_edges(n_levels, topology):
    """(coarse, fine) pairs receiving rendering attention at the coarse level."""
    if topology == "adjacent":
        return [(l + 1, l) for l in range(n_levels - 1)]
    return [(c, f) for c in range(n_levels) for f in range(c)]


def concat_width(cfg, n_levels, level):
    """Channel width entering a level's reduce conv (in units of d_model)."""
    gts = sum(1 for (f, _c) in gt_edges(n_levels, cfg.topology) if f == level)
    rts = sum(1 for (c, _f) in rt_edges(n_levels, cfg.topology) if c == level)
    return 2 + gts + rts  # original + self attention + cross edges


def init_fpt_params(cfg, level_channels, seed):
    """Seeded deterministic initialization of every parameter tensor."""
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    n_levels = len(level_channels)
    input_proj = []
    for c in level_channels:
        if c == d:
            input_proj.append(None)
        else:
            input_proj.append(
                (TR._kaiming_uniform(rng, (d, c, 1, 1), c), TR._zeros(d))
            )
    st = [init_st(rng, cfg) for _ in range(n_levels)]
    gt = {e: init_gt(rng, cfg) for e in gt_edges(n_levels, cfg.topology)}
    rt = {e: TR.init_rt_params(rng, d) for e in rt_edges(n_levels, cfg.topology)}
    reduce = []
    for l in range(n_levels):
        cin = d * concat_width(cfg, n_levels, l)
        reduce.append(
            (TR._kaiming_uniform(rng, (d, cin, 3, 3), cin * 9), TR._zeros(d))
        )
    return FptParams(input_proj=input_proj, st=st, gt=gt, rt=rt, reduce=reduce)


def init_st(rng, cfg):
    return TR.init_st_params(rng, cfg.d_model, cfg.d_model, cfg.n_st)


def init_gt(rng, cfg):
    square = cfg.square_size if cfg.use_locality else None
    return TR.init_gt_params(rng, cfg.d_model, cfg.d_model, cfg.n_gt, square)


def fpt_forward(pyr, params, cfg, mode="eval", seed=0, only_levels=None):
    """Transform a pyramid; every output level keeps its spatial dims and has
    d_model channels. Finest level gets no rendering input, coarsest no
    grounding input (and intermediate wiring follows the topology).

    ``only_levels`` restricts computation to a subset of output levels
    (used by gradient checking to skip provably unaffected branches)."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown mode {mode!r}")
    n_levels = len(pyr)
    base = []
    for l, lv in enumerate(pyr.levels):
        pr = params.input_proj[l]
        if pr is None:
            if lv.tensor.shape[1] != cfg.d_model:
                raise ShapeError(f"level {l}: channels != d_model and no projection")
            base.append(lv.tensor)
        else:
            base.append(T.conv2d(lv.tensor, pr[0], pr[1], stride=1, pad=0))

    gts = gt_edges(n_levels, cfg.topology)
    rts = rt_edges(n_levels, cfg.topology)
    out_levels = []
    for l in range(n_levels):
        if only_levels is not None and l not in only_levels:
            continue
        try:
            feats = [base[l], TR.self_transformer(base[l], params.st[l], cfg.st_similarity)]
            for (f, c) in gts:
                if f != l:
                    continue
                if cfg.use_locality:
                    feats.append(
                        TR.locality_grounding_transformer(
                            base[f], base[c], params.gt[(f, c)], cfg.gt_similarity
                        )
                    )
                else:
                    feats.append(
                        TR.grounding_transformer(
                            base[f], base[c], params.gt[(f, c)], cfg.gt_similarity
                        )
                    )
            for (c, f) in rts:
                if c != l:
                    continue
                feats.append(TR.rendering_transformer(base[c], base[f], params.rt[(c, f)]))
            cat = T.concat(feats, axis=1)
            w, b = params.reduce[l]
            red = T.conv2d(cat, w, b, stride=1, pad=1)
            if mode == "train":
                # the block cannot exceed the level's spatial extent, so
                # coarse levels fall back to smaller (odd) blocks
                bs = min(cfg.dropblock.block_size, red.shape[2], red.shape[3])
                if bs % 2 == 0:
                    bs -= 1
                red = dropblock(
                    red,
                    bs,
                    cfg.dropblock.keep_prob,
                    mode,
                    seed * 1000003 + l,
                )
        except ShapeError as exc:
            raise ShapeError(f"level {l}: {exc}") from exc
        out_levels.append(PyramidLevel(red, pyr.levels[l].stride))
    return FeaturePyramid(out_levels)
