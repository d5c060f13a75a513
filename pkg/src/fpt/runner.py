"""High-level runs shared by the HTTP service and the CLI.

A run takes a config document (plain dict, JSON on disk) and returns a
report: a list of flat records suitable for line-delimited output. Reports
are deterministic given (config, seed), excluding timing fields.
"""

from __future__ import annotations

import time

import numpy as np

from . import accounting as acct
from . import tensor as T
from .errors import ConfigError, ShapeError
from .pyramid import (
    FeaturePyramid,
    FptConfig,
    PyramidLevel,
    build_ufp,
    fpt_forward,
    init_fpt_params,
    init_ufp_params,
    synth_pyramid,
)
from .tensor import Tensor
from .weights import load_weights, save_weights, tensor_checksum

_PRESETS = {
    "instance": {
        "fpt": {"task": "instance"},
        "pyramid": {
            "source": "synth",
            "levels": [[256, 32, 32], [256, 16, 16], [256, 8, 8], [256, 4, 4]],
        },
    },
    "pixel": {
        "fpt": {"task": "pixel"},
        "pyramid": {"source": "ufp", "base": [64, 24, 24], "kernels": [1, 7, 15, 31]},
    },
    "tiny": {
        "fpt": {"task": "instance", "d_model": 8, "dropblock": {"block_size": 3, "keep_prob": 0.9}},
        "pyramid": {"source": "synth", "levels": [[8, 8, 8], [8, 4, 4], [8, 2, 2]]},
    },
}


def default_config(preset="instance"):
    if preset not in _PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(_PRESETS)}")
    doc = _PRESETS[preset]
    cfg, pyr = parse_config(doc)
    return serialize_config(cfg, pyr)


def parse_config(doc):
    """Validate a config document into (FptConfig, pyramid description)."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    unknown = set(doc) - {"fpt", "pyramid"}
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    cfg = FptConfig.from_dict(doc.get("fpt", {}))
    pyr = dict(doc.get("pyramid", {}))
    source = pyr.setdefault("source", "synth")
    if source == "synth":
        levels = pyr.get("levels")
        if not levels:
            raise ConfigError("pyramid.levels is required for source 'synth'")
        pyr = {"source": "synth", "levels": [[int(v) for v in lv] for lv in levels]}
    elif source == "ufp":
        base = pyr.get("base")
        kernels = pyr.get("kernels", [1, 7, 15, 31])
        if not base or len(base) != 3:
            raise ConfigError("pyramid.base = [channels, H, W] is required for 'ufp'")
        if any(k < 1 or k % 2 == 0 for k in kernels):
            raise ConfigError("pyramid.kernels must be odd")
        pyr = {
            "source": "ufp",
            "base": [int(v) for v in base],
            "kernels": [int(k) for k in kernels],
        }
    else:
        raise ConfigError(f"unknown pyramid source {source!r}")
    return cfg, pyr


def serialize_config(cfg, pyr):
    """Canonical config document; parse(serialize(...)) is a fixed point."""
    return {"fpt": cfg.to_dict(), "pyramid": dict(pyr)}


def pyramid_spec(cfg, pyr):
    """Concrete (channels, H, W) per level."""
    if pyr["source"] == "synth":
        return [tuple(lv) for lv in pyr["levels"]]
    _c, h, w = pyr["base"]
    return [(cfg.d_model, h, w) for _ in pyr["kernels"]]


def _build(cfg, pyr, seed):
    """Deterministically build (pyramid, params, named ufp params or {})."""
    ufp_named = {}
    if pyr["source"] == "synth":
        pyramid = synth_pyramid(seed, [tuple(lv) for lv in pyr["levels"]])
    else:
        c, h, w = pyr["base"]
        rng = np.random.default_rng(seed)
        base = Tensor(rng.standard_normal((1, c, h, w)))
        blocks = init_ufp_params(np.random.default_rng(seed + 1), c, pyr["kernels"], cfg.d_model)
        for i, blk in enumerate(blocks):
            ufp_named.update(blk.named(f"ufp.k{blk.kernel}_{i}"))
        pyramid = build_ufp(base, blocks)
    channels = [lv.tensor.shape[1] for lv in pyramid.levels]
    params = init_fpt_params(cfg, channels, seed)
    return pyramid, params, ufp_named


def _apply_weights(params, loaded):
    def fn(name, t):
        if name not in loaded:
            raise ConfigError(f"weight container is missing {name!r}")
        arr = loaded[name]
        if tuple(arr.shape) != tuple(t.shape):
            raise ShapeError(f"weight {name!r} shape {arr.shape} != expected {t.shape}")
        return Tensor(arr, requires_grad=True)

    return params.map_tensors(fn)


def run_forward(doc, seed=0, mode="eval", weights_in=None, weights_out=None):
    cfg, pyr = parse_config(doc)
    t0 = time.perf_counter()
    pyramid, params, ufp_named = _build(cfg, pyr, seed)
    if weights_in:
        params = _apply_weights(params, load_weights(weights_in))
    if weights_out:
        named = {**params.named(), **ufp_named}
        save_weights(weights_out, {k: v.data for k, v in named.items()})
    out = fpt_forward(pyramid, params, cfg, mode=mode, seed=seed)
    elapsed = time.perf_counter() - t0
    records = [
        {
            "record": "meta",
            "command": "forward",
            "seed": seed,
            "mode": mode,
            "config": serialize_config(cfg, pyr),
        }
    ]
    for i, lv in enumerate(out.levels):
        records.append(
            {
                "record": "level",
                "index": i,
                "shape": list(lv.tensor.shape),
                "stride": lv.stride,
                "checksum": tensor_checksum(lv.tensor.data),
            }
        )
    records.append({"record": "timing", "seconds": elapsed})
    return {"ok": True, "records": records}


def grad_tables(loss_fn, named, h=1e-5, scopes=None):
    """Analytic and central-difference gradients for every named tensor.

    ``loss_fn(tensors, scope)`` maps the {name: Tensor} dict to a scalar
    Tensor and must be deterministic. ``scopes`` optionally restricts the
    numeric sweep for a tensor to the part of the loss it can influence
    (the untouched terms are constants and cancel in the central
    difference); analytic gradients always use the full loss (scope None).
    """
    loss = loss_fn(named, None)
    grads = T.backward(loss, params=list(named.values()))
    analytic = {name: grads[t] for name, t in named.items()}
    numeric = {}
    with T.no_grad():
        for name, t in named.items():
            scope = None if scopes is None else scopes.get(name)
            base = np.array(t.data)
            num = np.zeros_like(base)
            flat, nflat = base.reshape(-1), num.reshape(-1)
            work = dict(named)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                work[name] = Tensor(base)
                fp = loss_fn(work, scope).item()
                flat[i] = orig - h
                work[name] = Tensor(base)
                fm = loss_fn(work, scope).item()
                flat[i] = orig
                nflat[i] = (fp - fm) / (2.0 * h)
            numeric[name] = num
    return analytic, numeric


def max_rel_err(a, n):
    """Max elementwise |a-n| / max(|a|, |n|, 1e-3)."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
    if a.size == 0:
        return 0.0
    return float((np.abs(a - n) / denom).max())


def compare_grad_tables(analytic, numeric, tol):
    """Per-tensor max relative errors plus the overall pass verdict."""
    rows = []
    ok = True
    for name in analytic:
        err = max_rel_err(analytic[name], numeric[name])
        passed = err <= tol
        ok = ok and passed
        rows.append({"name": name, "max_rel_err": err, "pass": passed})
    return rows, ok


def _param_scopes(named):
    """Output levels each parameter can influence; None means all levels.

    Transformer and reduce parameters feed exactly one output level; input
    projections and the input maps feed the shared base maps and therefore
    every level.
    """
    scopes = {}
    for name in named:
        scope = None
        if name.startswith("level") and ".in_proj" not in name:
            scope = (int(name[5 : name.index(".")]),)
        elif name.startswith(("gt.", "rt.")):
            scope = (int(name.split(".")[1].split("_")[0]),)
        scopes[name] = scope
    return scopes


def run_gradcheck(doc, seed=0, h=1e-5, tol=1e-5, mode="eval"):
    if mode != "eval":
        raise ConfigError(
            "gradcheck refuses nondeterministic train mode; DropBlock must be off"
        )
    if h <= 0:
        raise ConfigError("gradcheck requires h > 0")
    cfg, pyr = parse_config(doc)
    t0 = time.perf_counter()
    pyramid, params, _ = _build(cfg, pyr, seed)

    named = dict(params.named())
    inputs = []
    for i, lv in enumerate(pyramid.levels):
        t = Tensor(lv.tensor.data, requires_grad=True)
        named[f"input.level{i}"] = t
        inputs.append((i, lv.stride))

    def loss_fn(tensors, scope):
        p = params.map_tensors(lambda name, _t: tensors[name])
        pyr_in = FeaturePyramid(
            [PyramidLevel(tensors[f"input.level{i}"], stride) for i, stride in inputs]
        )
        out = fpt_forward(pyr_in, p, cfg, mode="eval", seed=seed, only_levels=scope)
        total = None
        for lv in out.levels:
            s = T.tsum(lv.tensor)
            total = s if total is None else T.add(total, s)
        return total

    analytic, numeric = grad_tables(loss_fn, named, h=h, scopes=_param_scopes(named))
    rows, ok = compare_grad_tables(analytic, numeric, tol)
    elapsed = time.perf_counter() - t0
    records = [
        {
            "record": "meta",
            "command": "gradcheck",
            "seed": seed,
            "h": h,
            "tol": tol,
            "config": serialize_config(cfg, pyr),
        }
    ]
    for row in rows:
        records.append({"record": "gradcheck", **row})
    worst = max(rows, key=lambda r: r["max_rel_err"]) if rows else None
    records.append(
        {
            "record": "verdict",
            "pass": ok,
            "worst": None if worst is None else worst["name"],
            "max_rel_err": None if worst is None else worst["max_rel_err"],
        }
    )
    records.append({"record": "timing", "seconds": elapsed})
    return {"ok": ok, "records": records}


def run_count(doc):
    cfg, pyr = parse_config(doc)
    spec = pyramid_spec(cfg, pyr)
    channels = [c for c, _h, _w in spec]
    ufp = (pyr["base"][0], pyr["kernels"]) if pyr["source"] == "ufp" else None
    params = acct.count_params(cfg, channels, ufp=ufp)
    flops = acct.count_flops(cfg, spec, ufp=ufp)
    records = [
        {"record": "meta", "command": "count", "config": serialize_config(cfg, pyr)},
        {"record": "complexity", **params.to_dict()},
        {"record": "complexity", **flops.to_dict()},
    ]
    for kind, count in (("params", acct.count_params), ("flops", acct.count_flops)):
        args = (cfg, channels) if kind == "params" else (cfg, spec)
        baseline = count(*args, include=()).total
        added = {
            fam: count(*args, include=(fam,)).total - baseline
            for fam in ("st", "gt", "rt")
        }
        records.append({"record": "added", "kind": kind, **added})
    return {"ok": True, "records": records}


def run_bench(doc, seed=0, repeats=3):
    if repeats < 1:
        raise ConfigError("bench requires repeats >= 1")
    cfg, pyr = parse_config(doc)
    times = []
    checksums = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        pyramid, params, _ = _build(cfg, pyr, seed)
        out = fpt_forward(pyramid, params, cfg, mode="eval", seed=seed)
        times.append(time.perf_counter() - t0)
        sums = [tensor_checksum(lv.tensor.data) for lv in out.levels]
        if checksums is None:
            checksums = sums
        elif sums != checksums:
            raise ConfigError("nondeterministic forward detected during bench")
    records = [
        {
            "record": "meta",
            "command": "bench",
            "seed": seed,
            "repeats": repeats,
            "config": serialize_config(cfg, pyr),
        },
        {"record": "bench", "median_s": float(np.median(times)), "min_s": float(min(times))},
        {"record": "checksums", "levels": checksums},
    ]
    return {"ok": True, "records": records}
