"""FastAPI service wrapping the library; the CLI is a thin client of this app.

Every endpoint takes a config document plus run options and returns the
line-record report produced by :mod:`fpt.runner`. Contract violations map to
HTTP 400 with the failing invariant in the detail string.
"""

from __future__ import annotations

from typing import Any, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .errors import FptError
from .runner import (
    default_config,
    run_bench,
    run_count,
    run_forward,
    run_gradcheck,
)

app = FastAPI(title="fpt", description="Cross-scale feature pyramid attention service")


class ForwardRequest(BaseModel):
    config: dict[str, Any]
    seed: int = 0
    mode: str = "eval"
    weights_in: Optional[str] = None
    weights_out: Optional[str] = None


class GradcheckRequest(BaseModel):
    config: dict[str, Any]
    seed: int = 0
    h: float = Field(default=1e-5, gt=0)
    tol: float = 1e-5
    mode: str = "eval"


class CountRequest(BaseModel):
    config: dict[str, Any]


class BenchRequest(BaseModel):
    config: dict[str, Any]
    seed: int = 0
    repeats: int = Field(default=3, ge=1)


class GenRequest(BaseModel):
    preset: str = "instance"


class RunReport(BaseModel):
    ok: bool
    records: list[dict[str, Any]]


def _guard(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except FptError as exc:
        raise HTTPException(status_code=400, detail=f"{type(exc).__name__}: {exc}")
    except FileNotFoundError as exc:
        raise HTTPException(status_code=400, detail=f"FileNotFoundError: {exc}")


@app.get("/health")
def health():
    return {"status": "ok"}


@app.post("/forward", response_model=RunReport)
def forward(req: ForwardRequest):
    return _guard(
        run_forward,
        req.config,
        seed=req.seed,
        mode=req.mode,
        weights_in=req.weights_in,
        weights_out=req.weights_out,
    )


@app.post("/gradcheck", response_model=RunReport)
def gradcheck(req: GradcheckRequest):
    return _guard(run_gradcheck, req.config, seed=req.seed, h=req.h, tol=req.tol, mode=req.mode)


@app.post("/count", response_model=RunReport)
def count(req: CountRequest):
    return _guard(run_count, req.config)


@app.post("/bench", response_model=RunReport)
def bench(req: BenchRequest):
    return _guard(run_bench, req.config, seed=req.seed, repeats=req.repeats)


@app.post("/gen", response_model=RunReport)
def gen(req: GenRequest):
    doc = _guard(default_config, req.preset)
    return {"ok": True, "records": [{"record": "config", "config": doc}]}
