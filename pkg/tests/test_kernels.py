import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from slicekit import kernels as K
from slicekit.errors import ConfigError, DegenerateVector, EmptyDataset, ShapeError
from slicekit.kernel_checks import run_kernel_checks
from slicekit.prompts import btcv_organ_names, build_prompts


def _fusion(rng, c=4, d=4, hidden=5, heads=1, zero_bias=False):
    p = K.FusionParams.random(rng, channels=c, width=d, hidden=hidden, num_heads=heads)
    if zero_bias:
        p = K.FusionParams(p.w_q, p.w_k, p.w_v, p.ln_gain, np.zeros(c), p.w1, np.zeros(hidden),
                           p.w2, np.zeros(c), heads)
    return p


# ---------------------------------------------------------------------------
# softmax and attention

def test_softmax_examples():
    assert K.softmax_rows([[0.0, 0.0]]).tolist() == [[0.5, 0.5]]
    assert K.softmax_rows([[1000.0, 1000.0]]).tolist() == [[0.5, 0.5]]
    assert np.allclose(K.softmax_rows([[math.log(1), math.log(3)]]), [[0.25, 0.75]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_softmax_rows_and_shift(seed, shift):
    m = np.random.default_rng(seed).normal(0, 10, size=(5, 7))
    s = K.softmax_rows(m)
    assert np.all(s >= 0) and np.max(np.abs(s.sum(axis=1) - 1)) < 1e-12
    assert np.allclose(K.softmax_rows(m + shift), s, atol=1e-12)


def test_attention_single_token():
    p = _fusion(np.random.default_rng(0))
    f = np.random.default_rng(1).normal(size=(1, 4))
    assert np.allclose(K.attention(f, p), f @ p.w_v, atol=1e-15)


def test_attention_identical_tokens():
    p = _fusion(np.random.default_rng(0), heads=2)
    f = np.tile(np.random.default_rng(1).normal(size=(1, 4)), (6, 1))
    out = K.attention(f, p)
    assert np.allclose(out, out[0], atol=1e-14)


def test_attention_two_tokens_hand_weights():
    f = [[1.0, 2.0], [-0.5, 0.25]]
    w_q = [[0.3, -0.2], [0.1, 0.4]]
    w_k = [[-0.6, 0.5], [0.2, 0.1]]
    w_v = [[1.0, 0.5], [-1.0, 2.0]]
    p = K.FusionParams(w_q, w_k, w_v, np.ones(2), np.zeros(2), np.eye(2), np.zeros(2),
                       np.eye(2), np.zeros(2))
    expect = np.array(oracles.attention_single_head(f, w_q, w_k, w_v))
    assert np.max(np.abs(K.attention(f, p) - expect)) < 1e-12


def test_attention_single_head_matches_formula_bitwise():
    rng = np.random.default_rng(2)
    p = _fusion(rng, c=6, d=6)
    f = rng.normal(size=(5, 6))
    direct = K.scaled_dot_attention(f @ p.w_q, f @ p.w_k, f @ p.w_v)
    assert np.array_equal(K.attention(f, p), direct)


def test_attention_multi_head_is_per_head_concat():
    rng = np.random.default_rng(3)
    p = _fusion(rng, c=4, d=6, heads=3)
    f = rng.normal(size=(5, 4))
    heads = [oracles.attention_single_head(f.tolist(), p.w_q[:, 2 * h:2 * h + 2].tolist(),
                                           p.w_k[:, 2 * h:2 * h + 2].tolist(),
                                           p.w_v[:, 2 * h:2 * h + 2].tolist()) for h in range(3)]
    assert np.max(np.abs(K.attention(f, p) - np.concatenate(heads, axis=1))) < 1e-12


def test_attention_permutation_equivariant():
    rng = np.random.default_rng(4)
    p = _fusion(rng, heads=2)
    f = rng.normal(size=(7, 4))
    perm = rng.permutation(7)
    assert np.allclose(K.attention(f[perm], p), K.attention(f, p)[perm], atol=1e-13)


def test_attention_shape_errors():
    p = _fusion(np.random.default_rng(0))
    with pytest.raises(ShapeError):
        K.attention(np.zeros((3, 5)), p)
    with pytest.raises(ShapeError):
        K.FusionParams(np.zeros((4, 3)), np.zeros((4, 3)), np.zeros((4, 3)), np.ones(4), np.zeros(4),
                       np.zeros((4, 2)), np.zeros(2), np.zeros((2, 4)), np.zeros(4), num_heads=2)


# ---------------------------------------------------------------------------
# layer norm and fusion block

def test_layer_norm_examples():
    gain, bias = np.array([2.0, 3.0, 4.0, 5.0]), np.array([0.1, 0.2, 0.3, 0.4])
    assert np.array_equal(K.layer_norm([[1, 1, 1, 1]], gain, bias), [bias])
    out = K.layer_norm([[-1.0, 1.0]], np.ones(2), np.zeros(2))
    expect = 1 / math.sqrt(1 + 1e-5)  # population variance 1
    assert np.allclose(out, [[-expect, expect]], atol=1e-15)
    assert expect == pytest.approx(0.999995, abs=1e-6)


def test_layer_norm_moments():
    rows = np.random.default_rng(5).normal(3, 4, size=(20, 16))
    out = K.layer_norm(rows, np.ones(16), np.zeros(16))
    assert np.max(np.abs(out.mean(axis=1))) < 1e-12
    assert np.max(np.abs(out.var(axis=1) - 1)) < 2e-5


def test_fusion_zero_fixed_point():
    p = _fusion(np.random.default_rng(6), zero_bias=True)
    assert np.array_equal(K.fusion_block(np.zeros((5, 4)), p), np.zeros((5, 4)))


def test_fusion_matches_composition_oracle():
    rng = np.random.default_rng(7)
    p = _fusion(rng, c=4, d=4, hidden=6)
    f = rng.normal(size=(5, 4))
    expect = oracles.fusion(f.tolist(), *(getattr(p, n).tolist() for n in K.FusionParams.TENSORS))
    out = K.fusion_block(f, p)
    assert out.shape == (5, 4)
    assert np.max(np.abs(out - np.array(expect))) < 1e-12


# ---------------------------------------------------------------------------
# alignment and head

def test_cosine_examples():
    a = np.array([0.3, -2.0, 5.0])
    assert K.cosine_sim(a, a) == pytest.approx(1.0, abs=1e-15)
    assert K.cosine_sim([1, 0], [0, 1]) == 0.0
    assert K.cosine_sim([3, 4], [4, 3]) == pytest.approx(0.96, abs=1e-15)
    with pytest.raises(DegenerateVector):
        K.cosine_sim([0, 0], [1, 2])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_cosine_symmetric_scale_invariant(seed, lam):
    a, b = np.random.default_rng(seed).normal(size=(2, 8))
    assert K.cosine_sim(a, b) == K.cosine_sim(b, a)
    assert abs(K.cosine_sim(a, lam * b) - K.cosine_sim(a, b)) < 1e-12


def test_head_zero_weights():
    p = K.HeadParams([(np.zeros((45, 13)), np.zeros(13))])
    out = K.predict_head(np.ones(32), np.ones(13), p)
    assert out.shape == (13,) and np.all(out == 0.5)


def test_head_matches_dense_oracle():
    rng = np.random.default_rng(8)
    w, b = rng.normal(size=(5, 3)), rng.normal(size=3)
    z, s = rng.normal(size=3), rng.uniform(-1, 1, size=2)
    expect = oracles.dense_head([*z, *s], w.tolist(), b.tolist())
    out = K.predict_head(z, s, K.HeadParams([(w, b)]))
    assert np.max(np.abs(out - expect)) < 1e-12


def test_head_output_range_and_shape_error():
    p = K.HeadParams.random(np.random.default_rng(9))
    out = K.predict_head(np.random.default_rng(1).normal(size=32), np.zeros(13), p)
    assert out.shape == (13,) and np.all((out > 0) & (out < 1))
    with pytest.raises(ShapeError):
        K.predict_head(np.zeros(31), np.zeros(13), p)


# ---------------------------------------------------------------------------
# class-balanced focal loss

def test_cbfl_examples():
    cfg = K.FocalConfig((0.75,), 2.0)
    hand = 0.75 * 0.01 * -math.log(0.9)
    assert hand == pytest.approx(7.902e-4, abs=5e-8)
    assert K.cbfl_loss([0.9], [1], cfg) == pytest.approx(hand, abs=1e-15)
    assert K.cbfl_loss([1.0], [1], cfg) < 1e-20


def test_cbfl_gamma_zero_is_half_bce():
    rng = np.random.default_rng(10)
    p = rng.uniform(0.01, 0.99, size=13)
    y = rng.integers(0, 2, size=13)
    bce = -np.sum(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert K.cbfl_loss(p, y, K.FocalConfig((0.5,) * 13, 0.0)) == pytest.approx(0.5 * bce, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_cbfl_nonnegative_and_monotone(seed):
    rng = np.random.default_rng(seed)
    n = 6
    alpha = rng.uniform(0.05, 1.0, size=n)
    cfg = K.FocalConfig(tuple(alpha), float(rng.uniform(0, 3)))
    p = rng.uniform(0.02, 0.98, size=n)
    y = rng.integers(0, 2, size=n)
    base = K.cbfl_loss(p, y, cfg)
    assert base >= 0
    k = int(rng.integers(n))
    closer = p.copy()
    closer[k] = p[k] + (y[k] - p[k]) * 0.5
    assert K.cbfl_loss(closer, y, cfg) <= base


def test_cbfl_shape_and_config_errors():
    with pytest.raises(ShapeError):
        K.cbfl_loss([0.5, 0.5], [1, 0], K.FocalConfig((0.5,)))
    with pytest.raises(ConfigError):
        K.FocalConfig((0.0,))
    with pytest.raises(ConfigError):
        K.FocalConfig((0.5,), -1.0)


def test_alpha_from_frequencies():
    assert K.alpha_from_frequencies([30, 30], 100).tolist() == [1.0, 1.0]
    assert np.allclose(K.alpha_from_frequencies([10, 90], 100), [1.8, 0.2], atol=1e-12)
    # zero-positive class enters at 20: raw [20, 2] has mean 11
    assert np.allclose(K.alpha_from_frequencies([0, 50], 100), [20 / 11, 2 / 11], atol=1e-12)
    with pytest.raises(EmptyDataset):
        K.alpha_from_frequencies([1, 2], 0)


# ---------------------------------------------------------------------------
# gradient checking

def test_grad_check_quadratic():
    theta = np.random.default_rng(11).normal(size=10)
    assert K.grad_check(lambda t: (float(t @ t), 2 * t), theta) < 1e-8


def test_grad_check_detects_wrong_gradient():
    theta = np.random.default_rng(12).normal(size=4)
    assert K.grad_check(lambda t: (float(t @ t), 3 * t), theta) > 0.1


def test_cbfl_logit_gradient():
    rng = np.random.default_rng(13)
    logits = rng.uniform(-3, 3, size=13)
    y = rng.integers(0, 2, size=13)
    cfg = K.FocalConfig(tuple(rng.uniform(0.1, 0.9, size=13)))
    err = K.grad_check(lambda t: (K.cbfl_loss(K.expit(t), y, cfg), K.cbfl_logit_grad(t, y, cfg)), logits)
    assert err < 1e-4


def test_fusion_w1_gradient():
    rng = np.random.default_rng(14)
    p = K.FusionParams.random(rng)
    f = rng.normal(size=(K.TOY_T, K.TOY_C))

    def value(theta):
        q = K.FusionParams(**{**{n: getattr(p, n) for n in K.FusionParams.TENSORS},
                              "w1": theta.reshape(p.w1.shape)}, num_heads=p.num_heads)
        return float(K.fusion_block(f, q).sum())

    def grad(theta):
        q = K.FusionParams(**{**{n: getattr(p, n) for n in K.FusionParams.TENSORS},
                              "w1": theta.reshape(p.w1.shape)}, num_heads=p.num_heads)
        return K.fusion_block_backward(np.ones((K.TOY_T, K.TOY_C)), f, q)["w1"]

    assert K.grad_check(value, p.w1.ravel(), grad=grad) < 1e-4


def test_kernel_suite_short():
    results = run_kernel_checks(seeds=2)
    assert results and all(r.passed for r in results), [r for r in results if not r.passed]


# ---------------------------------------------------------------------------
# toy encoders and parameter files

def test_text_encoder_determinism_and_dispersion():
    a = K.toy_encode_text("a CT slice showing the spleen")
    assert np.array_equal(a, K.toy_encode_text("a CT slice showing the spleen"))
    assert abs(np.linalg.norm(a) - 1) < 1e-12
    bank = build_prompts(btcv_organ_names())
    vecs = np.array([K.toy_encode_text(p) for ps in bank.values() for p in ps])
    gram = vecs @ vecs.T
    np.fill_diagonal(gram, -1)
    assert len(vecs) == 208 and gram.max() < 1 - 1e-9


def test_image_encoder():
    t = np.random.default_rng(15).random((9, 256, 256))
    z = K.toy_encode_image(t)
    assert z.shape == (K.TOY_EMBED,) and abs(np.linalg.norm(z) - 1) < 1e-12
    assert np.array_equal(z, K.toy_encode_image(t.copy()))
    assert K.cosine_sim(z, K.toy_encode_image(t[::-1].copy())) < 1


def test_ensemble_embedding():
    v = K.toy_encode_text("a CT scan depicting the liver")
    assert np.allclose(K.ensemble_text_embedding([v] * 16), v, atol=1e-15)
    with pytest.raises(DegenerateVector):
        K.ensemble_text_embedding([v, -v])
    e = K.organ_text_embeddings(build_prompts(["liver"]))["liver"]
    assert abs(np.linalg.norm(e) - 1) < 1e-12


def test_toy_predict_pipeline():
    bank = build_prompts(btcv_organ_names())
    texts = list(K.organ_text_embeddings(bank).values())
    head = K.HeadParams.random(np.random.default_rng(16))
    out = K.toy_predict(np.random.default_rng(17).random((9, 16, 16)), texts, head)
    assert out.shape == (13,) and np.all((out > 0) & (out < 1))


@pytest.mark.parametrize("kind", ["fusion", "head"])
def test_params_json_roundtrip(tmp_path, kind):
    rng = np.random.default_rng(18)
    params = K.FusionParams.random(rng) if kind == "fusion" else K.HeadParams.random(rng)
    K.save_params(params, tmp_path / "p.json")
    back = K.load_params(tmp_path / "p.json")
    assert K.params_to_json(back) == K.params_to_json(params)
