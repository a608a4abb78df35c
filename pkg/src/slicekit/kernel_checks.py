"""Gradient and invariant suite behind the ``kernels-check`` subcommand."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels as K

GRAD_TOL = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.value < self.tolerance


def _param_check(forward: Callable[[dict], np.ndarray], backward: Callable[[dict, np.ndarray], dict],
                 base: dict, name: str, probe: np.ndarray) -> float:
    """Grad-check ``sum(probe * forward(params))`` w.r.t. ``base[name]``."""
    shape = np.shape(base[name])

    def value(theta):
        return float(np.sum(probe * forward({**base, name: theta.reshape(shape)})))

    def grad(theta):
        return backward({**base, name: theta.reshape(shape)}, probe)[name]

    return K.grad_check(value, np.asarray(base[name], dtype=np.float64).ravel(), grad=grad)


def _fusion_errors(rng: np.random.Generator) -> dict[str, float]:
    params = K.FusionParams.random(rng)
    f0 = rng.normal(size=(K.TOY_T, K.TOY_C))
    probe = rng.normal(size=(K.TOY_T, K.TOY_C))
    base = {"F": f0, **{n: getattr(params, n) for n in K.FusionParams.TENSORS}}

    def build(p):
        return K.FusionParams(**{n: p[n] for n in K.FusionParams.TENSORS}, num_heads=params.num_heads)

    def att_fwd(p):
        return K.attention(p["F"], build(p))

    def att_bwd(p, g):
        return K.attention_backward(g, p["F"], build(p))

    def fus_fwd(p):
        return K.fusion_block(p["F"], build(p))

    def fus_bwd(p, g):
        return K.fusion_block_backward(g, p["F"], build(p))

    errs = {}
    for name in ("F", "w_q", "w_k", "w_v"):
        errs[f"attention d/{name}"] = _param_check(att_fwd, att_bwd, base, name, probe)
    for name in ("F", "w1", "w2", "ln_gain", "w_q"):
        errs[f"fusion_block d/{name}"] = _param_check(fus_fwd, fus_bwd, base, name, probe)
    return errs


def _head_errors(rng: np.random.Generator) -> dict[str, float]:
    params = K.HeadParams.random(rng)
    z = rng.normal(size=K.TOY_EMBED)
    s = rng.uniform(-1, 1, size=K.TOY_ORGANS)
    probe = rng.normal(size=K.TOY_ORGANS)
    base = {"z_img": z, "sims": s}
    for i, (w, b) in enumerate(params.layers):
        base[f"w{i}"], base[f"b{i}"] = w, b
    n_layers = len(params.layers)

    def build(p):
        return K.HeadParams([(p[f"w{i}"], p[f"b{i}"]) for i in range(n_layers)])

    def fwd(p):
        return K.predict_head(p["z_img"], p["sims"], build(p))

    def bwd(p, g):
        return K.predict_head_backward(g, p["z_img"], p["sims"], build(p))

    return {f"predict_head d/{n}": _param_check(fwd, bwd, base, n, probe)
            for n in ("w0", "b0", f"w{n_layers - 1}", "z_img", "sims")}


def _cbfl_errors(rng: np.random.Generator) -> dict[str, float]:
    # saturated logits give gradients below what central differences resolve
    logits = rng.uniform(-3.0, 3.0, size=K.TOY_ORGANS)
    y = rng.integers(0, 2, size=K.TOY_ORGANS)
    cfg = K.FocalConfig(tuple(rng.uniform(0.1, 0.9, size=K.TOY_ORGANS)), gamma=2.0)

    def f(theta):
        return K.cbfl_loss(K.expit(theta), y, cfg), K.cbfl_logit_grad(theta, y, cfg)

    return {"cbfl_loss d/logits": K.grad_check(f, logits)}


def invariant_errors(rng: np.random.Generator) -> dict[str, float]:
    m = rng.normal(0, 5, size=(K.TOY_T, K.TOY_T))
    rows = K.softmax_rows(m).sum(axis=1)
    ln = K.layer_norm(rng.normal(3, 2, size=(K.TOY_T, K.TOY_C)), np.ones(K.TOY_C), np.zeros(K.TOY_C))
    return {
        "softmax row-sum error": float(np.max(np.abs(rows - 1.0))),
        "layer_norm row-mean error": float(np.max(np.abs(ln.mean(axis=1)))),
    }


INVARIANT_TOL = {"softmax row-sum error": 1e-12, "layer_norm row-mean error": 1e-12}


def run_kernel_checks(seeds: int = 20) -> list[CheckResult]:
    """Worst-case error over ``seeds`` random instances for every check."""
    worst: dict[str, float] = {}
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        for errs in (_cbfl_errors(rng), _head_errors(rng), _fusion_errors(rng), invariant_errors(rng)):
            for name, err in errs.items():
                worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(name, err, INVARIANT_TOL.get(name, GRAD_TOL)) for name, err in worst.items()]
