"""Small double-precision kernels for view fusion, alignment and the organ head.

Every differentiable kernel has a ``*_backward`` companion returning the
vector-Jacobian product for an upstream gradient; :func:`grad_check` verifies
them against central differences. Matrices use the row-per-token convention,
so a projection is ``F @ W`` with ``W`` shaped ``(in, out)``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DegenerateVector, EmptyDataset, ParseError, ShapeError

PROB_CLAMP = 1e-7
ALPHA_MIN, ALPHA_MAX = 0.05, 20.0

# toy shapes: tokens, channels, attention width, embedding width, organ count
TOY_T, TOY_C, TOY_D_ATT, TOY_EMBED, TOY_ORGANS = 12, 16, 16, 32, 13


def _as_matrix(m, name="matrix") -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2D, got shape {m.shape}")
    return m


# ---------------------------------------------------------------------------
# softmax / attention

def softmax_rows(m) -> np.ndarray:
    m = _as_matrix(m)
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def scaled_dot_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``softmax(Q K^T / sqrt(d)) V`` with ``d`` the width of ``q``."""
    return softmax_rows(q @ k.T / math.sqrt(q.shape[1])) @ v


@dataclass
class FusionParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    num_heads: int = 1
    eps: float = 1e-5

    TENSORS = ("w_q", "w_k", "w_v", "ln_gain", "ln_bias", "w1", "b1", "w2", "b2")

    def __post_init__(self):
        for name in self.TENSORS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        c, d = self.w_q.shape
        if self.w_k.shape != (c, d) or self.w_v.shape != (c, d):
            raise ShapeError("W_Q, W_K and W_V must share one (C, d) shape")
        if self.num_heads < 1 or d % self.num_heads:
            raise ShapeError(f"attention width {d} is not divisible by {self.num_heads} heads")
        if self.ln_gain.shape != (c,) or self.ln_bias.shape != (c,):
            raise ShapeError("layer-norm gain/bias must have length C")
        hidden = self.w1.shape[1] if self.w1.ndim == 2 else -1
        if self.w1.shape != (c, hidden) or self.b1.shape != (hidden,):
            raise ShapeError("W1 must be (C, C') with bias of length C'")
        if self.w2.shape != (hidden, c) or self.b2.shape != (c,):
            raise ShapeError("W2 must be (C', C) with bias of length C")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def random(cls, rng: np.random.Generator, channels: int = TOY_C, width: int = TOY_D_ATT,
               hidden: int = TOY_C, num_heads: int = 2) -> "FusionParams":
        def w(n_in, n_out):
            return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))

        return cls(w(channels, width), w(channels, width), w(channels, width),
                   1.0 + 0.1 * rng.normal(size=channels), 0.1 * rng.normal(size=channels),
                   w(channels, hidden), 0.1 * rng.normal(size=hidden),
                   w(hidden, channels), 0.1 * rng.normal(size=channels), num_heads)


def _attention_forward(f: np.ndarray, p: FusionParams):
    q, k, v = f @ p.w_q, f @ p.w_k, f @ p.w_v
    dh = q.shape[1] // p.num_heads
    outs, probs = [], []
    for h in range(p.num_heads):
        cols = slice(h * dh, (h + 1) * dh)
        # same operation sequence as scaled_dot_attention, keeping the probabilities
        probs.append(softmax_rows(q[:, cols] @ k[:, cols].T / math.sqrt(dh)))
        outs.append(probs[-1] @ v[:, cols])
    return np.concatenate(outs, axis=1), (q, k, v, probs)


def attention(f, params: FusionParams) -> np.ndarray:
    """Multi-head scaled dot-product attention over token rows of ``f``.

    Projections are split column-wise into ``num_heads`` groups, each scaled by
    the per-head width; head outputs are concatenated with no output projection.
    """
    f = _as_matrix(f, "F")
    if f.shape[1] != params.channels:
        raise ShapeError(f"F has {f.shape[1]} channels, projections expect {params.channels}")
    return _attention_forward(f, params)[0]


def attention_backward(d_out, f, params: FusionParams) -> dict[str, np.ndarray]:
    """Gradients of ``sum(d_out * attention(f))`` w.r.t. F, W_Q, W_K, W_V."""
    f = _as_matrix(f, "F")
    d_out = _as_matrix(d_out, "d_out")
    _, (q, k, v, probs) = _attention_forward(f, params)
    dh = q.shape[1] // params.num_heads
    dq, dk, dv = np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)
    for h, pr in enumerate(probs):
        cols = slice(h * dh, (h + 1) * dh)
        do = d_out[:, cols]
        dv[:, cols] = pr.T @ do
        dp = do @ v[:, cols].T
        ds = pr * (dp - np.sum(dp * pr, axis=1, keepdims=True)) / math.sqrt(dh)
        dq[:, cols] = ds @ k[:, cols]
        dk[:, cols] = ds.T @ q[:, cols]
    return {
        "F": dq @ params.w_q.T + dk @ params.w_k.T + dv @ params.w_v.T,
        "w_q": f.T @ dq,
        "w_k": f.T @ dk,
        "w_v": f.T @ dv,
    }


# ---------------------------------------------------------------------------
# layer norm and the fusion block

def layer_norm(f, gain, bias, eps: float = 1e-5) -> np.ndarray:
    f = _as_matrix(f, "F")
    mu = f.mean(axis=1, keepdims=True)
    var = f.var(axis=1, keepdims=True)
    return (f - mu) / np.sqrt(var + eps) * gain + bias


def layer_norm_backward(d_out, f, gain, eps: float = 1e-5) -> dict[str, np.ndarray]:
    f = _as_matrix(f, "F")
    mu = f.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(f.var(axis=1, keepdims=True) + eps)
    xhat = (f - mu) * inv
    dxhat = d_out * gain
    dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True))
    return {"F": dx, "gain": np.sum(d_out * xhat, axis=0), "bias": np.sum(d_out, axis=0)}


def _fusion_forward(f: np.ndarray, p: FusionParams):
    att = attention(f, p)
    if att.shape != f.shape:
        raise ShapeError(f"attention output {att.shape} cannot be added to F {f.shape}")
    resid = f + att
    normed = layer_norm(resid, p.ln_gain, p.ln_bias, p.eps)
    pre = normed @ p.w1 + p.b1
    act = np.maximum(pre, 0.0)
    return act @ p.w2 + p.b2, (resid, normed, pre, act)


def fusion_block(f, params: FusionParams) -> np.ndarray:
    """``W2 relu(W1 LN(F + attention(F)))`` with biases; one residual, as composed here."""
    return _fusion_forward(_as_matrix(f, "F"), params)[0]


def fusion_block_backward(d_out, f, params: FusionParams) -> dict[str, np.ndarray]:
    f = _as_matrix(f, "F")
    _, (resid, normed, pre, act) = _fusion_forward(f, params)
    grads = {"w2": act.T @ d_out, "b2": d_out.sum(axis=0)}
    d_pre = (d_out @ params.w2.T) * (pre > 0)
    grads["w1"] = normed.T @ d_pre
    grads["b1"] = d_pre.sum(axis=0)
    ln = layer_norm_backward(d_pre @ params.w1.T, resid, params.ln_gain, params.eps)
    grads["ln_gain"], grads["ln_bias"] = ln["gain"], ln["bias"]
    att = attention_backward(ln["F"], f, params)
    grads.update(w_q=att["w_q"], w_k=att["w_k"], w_v=att["w_v"])
    grads["F"] = ln["F"] + att["F"]
    return grads


# ---------------------------------------------------------------------------
# alignment and prediction head

def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"vectors differ in length: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateVector("cosine similarity of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass
class HeadParams:
    """MLP layers ``(W, b)``; ReLU between layers, sigmoid on the output."""

    layers: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        self.layers = [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
                       for w, b in self.layers]
        if not self.layers:
            raise ShapeError("head needs at least one layer")
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[0] != self.layers[i - 1][0].shape[1]:
                raise ShapeError(f"layer {i} input width does not match layer {i - 1} output")

    @property
    def in_width(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_width(self) -> int:
        return self.layers[-1][0].shape[1]

    @classmethod
    def random(cls, rng: np.random.Generator, embed: int = TOY_EMBED, organs: int = TOY_ORGANS,
               hidden: Sequence[int] = (16,)) -> "HeadParams":
        widths = [embed + organs, *hidden, organs]
        return cls([(rng.normal(0, 1 / math.sqrt(i), size=(i, o)), 0.1 * rng.normal(size=o))
                    for i, o in zip(widths[:-1], widths[1:])])


def _head_forward(x: np.ndarray, p: HeadParams):
    acts = [x]
    pres = []
    for i, (w, b) in enumerate(p.layers):
        z = acts[-1] @ w + b
        pres.append(z)
        if i < len(p.layers) - 1:
            acts.append(np.maximum(z, 0.0))
    return pres[-1], acts, pres


def _head_input(z_img, sims, params: HeadParams) -> np.ndarray:
    x = np.concatenate([np.asarray(z_img, dtype=np.float64).ravel(),
                        np.asarray(sims, dtype=np.float64).ravel()])
    if x.size != params.in_width:
        raise ShapeError(f"head expects {params.in_width} inputs, got {x.size}")
    return x


def predict_head_logits(z_img, sims, params: HeadParams) -> np.ndarray:
    return _head_forward(_head_input(z_img, sims, params), params)[0]


def predict_head(z_img, sims, params: HeadParams) -> np.ndarray:
    """Organ probabilities from the joint embedding ``[z_img; sims]``."""
    return expit(predict_head_logits(z_img, sims, params))


def predict_head_backward(d_out, z_img, sims, params: HeadParams) -> dict[str, np.ndarray]:
    """Gradients of ``sum(d_out * predict_head(...))``; keys ``w{i}``, ``b{i}``, ``z_img``, ``sims``."""
    x = _head_input(z_img, sims, params)
    logits, acts, pres = _head_forward(x, params)
    y = expit(logits)
    grad = np.asarray(d_out, dtype=np.float64) * y * (1.0 - y)
    grads = {}
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        grads[f"w{i}"] = np.outer(acts[i], grad)
        grads[f"b{i}"] = grad.copy()
        grad = grad @ w.T
        if i > 0:
            grad = grad * (pres[i - 1] > 0)
    n_img = np.asarray(z_img).size
    grads["z_img"], grads["sims"] = grad[:n_img], grad[n_img:]
    return grads


# ---------------------------------------------------------------------------
# class-balanced focal loss

@dataclass(frozen=True)
class FocalConfig:
    alpha: tuple[float, ...]
    gamma: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if any(not a > 0 for a in self.alpha):
            raise ConfigError("alpha weights must be positive")
        if not self.gamma >= 0:
            raise ConfigError("gamma must be non-negative")


def _focal_inputs(y_hat, y, config: FocalConfig):
    p = np.asarray(y_hat, dtype=np.float64).ravel()
    t = np.asarray(y, dtype=np.float64).ravel()
    a = np.asarray(config.alpha, dtype=np.float64)
    if not (p.shape == t.shape == a.shape):
        raise ShapeError(f"y_hat {p.shape}, y {t.shape} and alpha {a.shape} must share one length")
    return p, t, a


def cbfl_loss(y_hat, y, config: FocalConfig) -> float:
    """``-sum_k [a_k (1-p)^g y log p + (1-a_k) p^g (1-y) log(1-p)]``.

    Probabilities are clamped to [1e-7, 1-1e-7]. The sign makes the loss
    non-negative whenever every ``a_k`` lies in (0, 1].
    """
    p, t, a = _focal_inputs(y_hat, y, config)
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    g = config.gamma
    pos = a * (1.0 - p) ** g * t * np.log(p)
    neg = (1.0 - a) * p ** g * (1.0 - t) * np.log1p(-p)
    return float(-np.sum(pos + neg))


def cbfl_grad(y_hat, y, config: FocalConfig) -> np.ndarray:
    """d loss / d y_hat (zero where the clamp is active)."""
    p_raw, t, a = _focal_inputs(y_hat, y, config)
    p = np.clip(p_raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    g = config.gamma
    d_pos = a * t * (-g * (1.0 - p) ** (g - 1.0) * np.log(p) + (1.0 - p) ** g / p) if g else a * t / p
    d_neg = ((1.0 - a) * (1.0 - t) * (g * p ** (g - 1.0) * np.log1p(-p) - p ** g / (1.0 - p))
             if g else -(1.0 - a) * (1.0 - t) / (1.0 - p))
    grad = -(d_pos + d_neg)
    return np.where(p_raw == p, grad, 0.0)


def cbfl_logit_grad(logits, y, config: FocalConfig) -> np.ndarray:
    p = expit(np.asarray(logits, dtype=np.float64))
    return cbfl_grad(p, y, config) * p * (1.0 - p)


def alpha_from_frequencies(pos_counts: Sequence[int], total: int) -> np.ndarray:
    """Inverse-frequency class weights rescaled to mean 1 and clamped to [0.05, 20].

    Classes without positives start at the clamp maximum before rescaling.
    """
    if total <= 0:
        raise EmptyDataset("alpha_from_frequencies needs a positive total count")
    counts = np.asarray(pos_counts, dtype=np.float64)
    raw = np.full(counts.shape, ALPHA_MAX)
    nz = counts > 0
    raw[nz] = total / counts[nz]
    return np.clip(raw / raw.mean(), ALPHA_MIN, ALPHA_MAX)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f: Callable[[np.ndarray], float | tuple[float, np.ndarray]], theta, h: float = 1e-5,
               grad: Callable[[np.ndarray], np.ndarray] | None = None) -> float:
    """Largest relative error between an analytic gradient and central differences.

    Either ``f(theta)`` returns ``(value, gradient)``, or it returns the value and
    ``grad(theta)`` supplies the gradient. The error for each coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    theta = np.array(theta, dtype=np.float64)
    if grad is None:
        value_of = lambda t: f(t)[0]  # noqa: E731
        analytic = f(theta)[1]
    else:
        value_of = f
        analytic = grad(theta)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(theta.shape)
    numeric = np.empty_like(theta)
    flat, num_flat = theta.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = value_of(theta)
        flat[i] = old - h
        down = value_of(theta)
        flat[i] = old
        num_flat[i] = (up - down) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if theta.size else 0.0


# ---------------------------------------------------------------------------
# deterministic stand-in encoders

_IMAGE_GRID = 4
_ENCODER_SEED = 0x51CE


def _pooled_features(channels: np.ndarray) -> np.ndarray:
    feats = []
    for ch in np.asarray(channels, dtype=np.float64):
        for band in np.array_split(ch, _IMAGE_GRID, axis=0):
            for cell in np.array_split(band, _IMAGE_GRID, axis=1):
                feats.append(cell.mean() if cell.size else 0.0)
    feats.append(1.0)  # bias feature keeps the embedding defined for blank input
    return np.asarray(feats)


def toy_encode_image(tensor, dim: int = TOY_EMBED) -> np.ndarray:
    """Unit vector from a fixed seeded projection of 4x4 average-pooled channels."""
    if dim < 2:
        raise ShapeError("embedding dimension must be at least 2")
    channels = getattr(tensor, "channels", tensor)
    feats = _pooled_features(channels)
    proj = np.random.default_rng([_ENCODER_SEED, dim, feats.size]).standard_normal((dim, feats.size))
    z = proj @ feats
    norm = np.linalg.norm(z)
    if norm == 0:
        raise DegenerateVector("image features project to zero")
    return z / norm


def _token_vector(token: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    return np.random.default_rng([_ENCODER_SEED, dim, seed]).standard_normal(dim)


def toy_encode_text(prompt: str, dim: int = TOY_EMBED) -> np.ndarray:
    """Unit vector summing seeded per-token and per-bigram hash vectors."""
    if dim < 2:
        raise ShapeError("embedding dimension must be at least 2")
    tokens = prompt.lower().split()
    z = np.zeros(dim)
    for i, tok in enumerate(tokens):
        z += _token_vector(tok, dim)
        if i:
            z += _token_vector(tokens[i - 1] + " " + tok, dim)
    norm = np.linalg.norm(z)
    if norm == 0:
        raise DegenerateVector(f"prompt {prompt!r} has no tokens")
    return z / norm


def ensemble_text_embedding(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of the prompt embeddings, renormalized to unit length."""
    vs = np.asarray(vectors, dtype=np.float64)
    if vs.ndim != 2 or vs.shape[0] == 0:
        raise ShapeError("need a non-empty stack of vectors")
    mean = vs.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise DegenerateVector("prompt embeddings cancel out")
    return mean / norm


def organ_text_embeddings(bank: dict[str, list[str]], dim: int = TOY_EMBED) -> dict[str, np.ndarray]:
    return {organ: ensemble_text_embedding([toy_encode_text(p, dim) for p in prompts])
            for organ, prompts in bank.items()}


def toy_predict(tensor, text_embeddings: Sequence[np.ndarray], params: HeadParams) -> np.ndarray:
    """Organ-presence probabilities: image embedding, cosine alignment, then the head."""
    z_img = toy_encode_image(tensor, np.asarray(text_embeddings[0]).size)
    sims = np.array([cosine_sim(z_img, t) for t in text_embeddings])
    return predict_head(z_img, sims, params)


# ---------------------------------------------------------------------------
# parameter files

def _tensor_json(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "values": a.ravel(order="C").tolist()}


def _tensor_from_json(d: dict) -> np.ndarray:
    return np.asarray(d["values"], dtype=np.float64).reshape(d["shape"])


def params_to_json(params: FusionParams | HeadParams) -> dict:
    if isinstance(params, FusionParams):
        return {"kind": "fusion", "num_heads": params.num_heads, "eps": params.eps,
                "tensors": {n: _tensor_json(getattr(params, n)) for n in FusionParams.TENSORS}}
    return {"kind": "head", "layers": [{"w": _tensor_json(w), "b": _tensor_json(b)}
                                       for w, b in params.layers]}


def params_from_json(data: dict) -> FusionParams | HeadParams:
    if data.get("kind") == "fusion":
        tensors = {n: _tensor_from_json(data["tensors"][n]) for n in FusionParams.TENSORS}
        return FusionParams(**tensors, num_heads=int(data["num_heads"]), eps=float(data["eps"]))
    if data.get("kind") == "head":
        return HeadParams([(_tensor_from_json(l["w"]), _tensor_from_json(l["b"])) for l in data["layers"]])
    raise ParseError(f"unknown parameter kind {data.get('kind')!r}")


def save_params(params: FusionParams | HeadParams, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_json(params), fh)


def load_params(path: str | os.PathLike) -> FusionParams | HeadParams:
    with open(path) as fh:
        return params_from_json(json.load(fh))
