"""Gradient and oracle self-checks, runnable from the command line.

Every check returns an error magnitude; a check passes when the magnitude is
below the tolerance. Gradient checks run at small sizes with all transforms
randomly initialized so that no branch is trivially zero.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import AttentionParams, channel_attention, embed_support, temporal_attention
from .tensor import (
    OpParams,
    Tensor,
    conv1x1,
    depthwise_xcorr,
    grad_check,
    mul,
    roi_align,
    softmax_axis,
    tsum,
)
from .tracker import TrackerParams, correlation_loss, gaussian_target, match_score


@dataclass
class Check:
    name: str
    module: str
    run: Callable[[float], float]  # eps -> error
    kind: str = "grad"


@dataclass
class CheckResult:
    name: str
    module: str
    error: float
    passed: bool
    seconds: float


def _rng(k: int) -> np.random.Generator:
    return np.random.default_rng(1000 + k)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # random projection to a scalar so every output element carries gradient
    return tsum(mul(out, w))


def _dense_attention(C: int, seed: int) -> AttentionParams:
    p = AttentionParams.init(C, reduction=2, seed=seed)
    rng = _rng(seed)
    for t in p.parameters():
        t.data[:] = rng.normal(0.0, 0.5, size=t.shape)
    return p


def _check_conv(eps):
    rng = _rng(1)
    x = Tensor(rng.normal(size=(3, 2, 3)))
    W, b = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=4))
    w = rng.normal(size=(4, 2, 3))
    return grad_check(lambda x, W, b: _weighted(conv1x1(x, OpParams(W, b)), w), [x, W, b], eps)


def _check_softmax(eps):
    rng = _rng(2)
    x = Tensor(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4))
    return max(grad_check(lambda x: _weighted(softmax_axis(x, ax), w), [x], eps) for ax in (0, 1))


def _check_xcorr(eps):
    rng = _rng(3)
    t, s = Tensor(rng.normal(size=(2, 2, 3))), Tensor(rng.normal(size=(2, 4, 5)))
    errs = []
    for pad in (False, True):
        shape = depthwise_xcorr(t, s, pad=pad).shape
        w = rng.normal(size=shape)
        errs.append(grad_check(lambda t, s: _weighted(depthwise_xcorr(t, s, pad=pad), w), [t, s], eps))
    return max(errs)


def _check_roi(eps):
    rng = _rng(4)
    f = Tensor(rng.normal(size=(2, 5, 6)))
    errs = []
    for box in [(0.7, 1.1, 3.9, 2.6), (-0.5, 3.2, 2.0, 2.5)]:
        w = rng.normal(size=(2, 3, 2))
        errs.append(grad_check(lambda f: _weighted(roi_align(f, box, 3, 2), w), [f], eps))
    return max(errs)


def _check_temporal(eps):
    C = 8
    p = _dense_attention(C, 5)
    rng = _rng(5)
    fc = Tensor(rng.normal(size=(C, 2, 3)))
    sup = [Tensor(rng.normal(size=(C, 2, 3))) for _ in range(2)]
    w = rng.normal(size=(C, 2, 3))
    names = ["key_proj_current", "key_proj_support", "value_proj_support", "output_transform"]
    weights = [getattr(p, n).weight for n in names]

    def f(fc, s0, s1, *ws):
        for n, wt in zip(names, ws):
            getattr(p, n).weight = wt
        return _weighted(temporal_attention(fc, embed_support([s0, s1], p), p), w)

    return grad_check(f, [fc, *sup, *weights], eps)


def _check_channel(eps):
    C = 8
    p = _dense_attention(C, 6)
    rng = _rng(6)
    fc = Tensor(rng.normal(size=(C, 3, 3)))
    w = rng.normal(size=(C, 3, 3))
    names = ["channel_attn_proj", "channel_transform_1", "channel_transform_2"]

    def f(fc, *ws):
        for n, wt in zip(names, ws):
            getattr(p, n).weight = wt
        return _weighted(channel_attention(fc, p), w)

    return grad_check(f, [fc] + [getattr(p, n).weight for n in names], eps)


def _check_match(eps):
    tp = TrackerParams.init(channels=4, hidden=8, seed=7)
    rng = _rng(7)
    tp.score_conv_1.bias.data[:] = rng.normal(0.0, 0.5, size=8)
    a, b = Tensor(rng.normal(size=8)), Tensor(rng.normal(size=8))

    def f(a, b, w1, w2):
        tp.score_conv_1.weight, tp.score_conv_2.weight = w1, w2
        return match_score(a, b, tp)

    return grad_check(f, [a, b, tp.score_conv_1.weight, tp.score_conv_2.weight], eps)


def _check_corr_loss(eps):
    rng = _rng(8)
    m = Tensor(rng.normal(size=(1, 5, 6)))
    tgt = gaussian_target((1.0, 1.0, 3.0, 2.0), 5, 6)
    return max(grad_check(lambda m: correlation_loss(m, tgt, squash=sq), [m], eps) for sq in (True, False))


def temporal_attention_loop(fc: np.ndarray, supports: list[np.ndarray], p: AttentionParams) -> np.ndarray:
    """Literal per-position transcription of the aggregation, in plain loops."""
    C, h, w = fc.shape

    def proj(op, v):
        return np.maximum(op.weight.data @ v + op.bias.data, 0.0)

    keys, vals = [], []
    for s in supports:
        for y in range(s.shape[1]):
            for x in range(s.shape[2]):
                keys.append(proj(p.key_proj_support, s[:, y, x]))
                vals.append(proj(p.value_proj_support, s[:, y, x]))
    out = np.zeros((C, h, w))
    for y in range(h):
        for x in range(w):
            q = proj(p.key_proj_current, fc[:, y, x])
            sims = [float(k @ q) for k in keys]
            top = max(sims)
            ex = [np.exp(v - top) for v in sims]
            z = sum(ex)
            agg = sum((e / z) * v for e, v in zip(ex, vals))
            out[:, y, x] = p.output_transform.weight.data @ np.maximum(agg, 0.0) + p.output_transform.bias.data
    return out


def _oracle_temporal(_eps):
    p = _dense_attention(4, 9)
    rng = _rng(9)
    fc = rng.normal(size=(4, 3, 3))
    sup = [rng.normal(size=(4, 3, 3)) for _ in range(2)]
    fast = temporal_attention(Tensor(fc), embed_support([Tensor(s) for s in sup], p), p).data
    return float(np.max(np.abs(fast - temporal_attention_loop(fc, sup, p))))


CHECKS: list[Check] = [
    Check("conv1x1", "tensor", _check_conv),
    Check("softmax_axis", "tensor", _check_softmax),
    Check("depthwise_xcorr", "tensor", _check_xcorr),
    Check("roi_align", "tensor", _check_roi),
    Check("temporal_attention", "attention", _check_temporal),
    Check("channel_attention", "attention", _check_channel),
    Check("temporal_attention_loop", "attention", _oracle_temporal, kind="oracle"),
    Check("match_score", "tracker", _check_match),
    Check("correlation_loss", "tracker", _check_corr_loss),
]

MODULES = sorted({c.module for c in CHECKS})


def run_checks(module: str | None = None, eps: float = 1e-5, tolerance: float = 1e-5,
               checks: list[Check] | None = None) -> list[CheckResult]:
    pool = CHECKS if checks is None else checks
    if module is not None and module not in {c.module for c in pool}:
        raise ValueError(f"unknown module {module!r}; choose from {sorted({c.module for c in pool})}")
    out = []
    for c in pool:
        if module is not None and c.module != module:
            continue
        t0 = time.perf_counter()
        err = float(c.run(eps))
        tol = 1e-10 if c.kind == "oracle" else tolerance
        out.append(CheckResult(c.name, c.module, err, bool(np.isfinite(err) and err < tol),
                               time.perf_counter() - t0))
    return out
