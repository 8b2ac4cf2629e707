import math

import numpy as np
import pytest

from actionseg.model import (
    FROZEN,
    TRAINABLE,
    ModelDims,
    OptimState,
    ShapeError,
    TeacherStudentState,
    backward,
    ema_update,
    encode,
    init_params,
    masked_cross_entropy,
    reinit_heads,
    sgd_step,
    supervised_loss,
)
from actionseg.numkit import NonFiniteError, finite_diff_grad, relative_error

SMALL = ModelDims(patch=3, feat_dim=6, hidden_dim=5, num_classes=3, embed_dim=4)


def test_constant_image_gives_constant_outputs():
    p = init_params(ModelDims(), seed=0)
    fwd = encode(p, np.full((8, 8), 0.4))
    for name in ("logits", "proj", "repr"):
        out = getattr(fwd, name)
        np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-12)


def test_encode_deterministic():
    p = init_params(ModelDims(), seed=0)
    img = np.random.default_rng(0).random((9, 9))
    a, b = encode(p, img), encode(p, img)
    np.testing.assert_array_equal(a.logits, b.logits)
    np.testing.assert_array_equal(a.repr, b.repr)


def test_single_pixel_footprint():
    p = init_params(ModelDims(), seed=1)
    img = np.random.default_rng(1).random((16, 16))
    base = encode(p, img).grid("logits")
    img2 = img.copy()
    img2[8, 7] += 0.5
    changed = np.any(encode(p, img2).grid("logits") != base, axis=-1)
    ii, jj = np.nonzero(changed)
    assert changed[8, 7]
    assert ii.min() >= 6 and ii.max() <= 10 and jj.min() >= 5 and jj.max() <= 9


def test_image_smaller_than_patch():
    with pytest.raises(ShapeError):
        encode(init_params(ModelDims(), 0), np.zeros((4, 4)))
    with pytest.raises(NonFiniteError):
        encode(init_params(ModelDims(), 0), np.full((6, 6), np.nan))


def test_featurizer_independent_of_head_seed():
    a = init_params(ModelDims(), seed=1, featurizer_seed=9)
    b = init_params(ModelDims(), seed=2, featurizer_seed=9)
    for k in FROZEN:
        np.testing.assert_array_equal(a[k], b[k])
    reinit_heads(a, ("pred",), seed=5)
    for k in FROZEN:
        np.testing.assert_array_equal(a[k], b[k])


def test_zero_upstream_gives_zero_grads():
    p = init_params(SMALL, seed=0)
    fwd = encode(p, np.random.default_rng(0).random((5, 5)))
    grads = backward(p, fwd, np.zeros_like(fwd.logits), np.zeros_like(fwd.proj),
                     np.zeros_like(fwd.repr))
    assert set(grads) == set(TRAINABLE)
    assert all(np.all(g == 0) for g in grads.values())


def _kink_free(p, img, eps=1e-3):
    fwd = encode(p, img, ())
    return np.all(np.abs(fwd.pre) > 2 * eps * np.maximum(1, np.abs(fwd.feat).max(1, keepdims=True)))


def test_sum_of_logits_gradient():
    rng = np.random.default_rng(3)
    checked = 0
    while checked < 5:
        p = init_params(SMALL, seed=int(rng.integers(1000)))
        img = rng.random((5, 5))
        if not _kink_free(p, img):
            continue
        fwd = encode(p, img)
        grads = backward(p, fwd, np.ones_like(fwd.logits))
        for name in ("trunk_w", "trunk_b", "seg_w", "seg_b"):
            base = p.arrays[name].copy()

            def f(x):
                p.arrays[name] = x
                out = encode(p, img, ("seg",)).logits.sum()
                p.arrays[name] = base
                return out

            assert relative_error(grads[name], finite_diff_grad(f, base.copy())) < 1e-4
        checked += 1


def test_ema_identity_and_copy():
    s = init_params(SMALL, seed=0)
    t = init_params(SMALL, seed=1)
    st = TeacherStudentState(s, t.copy(role="teacher"), momentum=1.0)
    ema_update(st)
    for k in TRAINABLE:
        np.testing.assert_array_equal(st.teacher.arrays[k], t.arrays[k])
    st.momentum = 0.0
    ema_update(st)
    for k in TRAINABLE:
        np.testing.assert_array_equal(st.teacher.arrays[k], s.arrays[k])


def test_ema_geometric_decay():
    s = init_params(SMALL, seed=0)
    for k in TRAINABLE:
        s.arrays[k] = np.zeros_like(s.arrays[k])
    t = s.copy(role="teacher")
    for k in TRAINABLE:
        t.arrays[k] = np.ones_like(t.arrays[k])
    st = TeacherStudentState(s, t, 0.99)
    for k in range(1, 301):
        ema_update(st)
        if k in (1, 10, 100, 300):
            for v in st.teacher.arrays.values():
                np.testing.assert_allclose(v, 0.99**k, rtol=1e-12)


def test_sgd_examples():
    p = init_params(SMALL, seed=0)
    before = p.copy()
    opt = OptimState(0.1, 0.9, 0.0)
    sgd_step(p, {k: np.zeros_like(v) for k, v in p.arrays.items()}, opt)
    for k in TRAINABLE:
        np.testing.assert_array_equal(p.arrays[k], before.arrays[k])

    p.arrays["seg_b"] = np.array([1.0, 1.0, 1.0])
    sgd_step(p, {"seg_b": np.ones(3)}, OptimState(0.1, 0.0, 0.0))
    np.testing.assert_allclose(p.arrays["seg_b"], 0.9, atol=1e-15)


def test_sgd_two_step_momentum_trace():
    p = init_params(SMALL, seed=0)
    p.arrays["seg_b"] = np.zeros(3)
    opt = OptimState(0.1, 0.9, 0.0)
    sgd_step(p, {"seg_b": np.ones(3)}, opt)
    np.testing.assert_allclose(p.arrays["seg_b"], -0.1)
    sgd_step(p, {"seg_b": np.ones(3)}, opt)
    np.testing.assert_allclose(opt.velocity["seg_b"], 1.9)
    np.testing.assert_allclose(p.arrays["seg_b"], -0.1 - 0.19)


def test_sgd_weight_decay_and_guards():
    p = init_params(SMALL, seed=0)
    p.arrays["seg_b"] = np.full(3, 2.0)
    sgd_step(p, {"seg_b": np.zeros(3)}, OptimState(0.5, 0.0, 0.1))
    np.testing.assert_allclose(p.arrays["seg_b"], 2.0 - 0.5 * 0.2)
    with pytest.raises(PermissionError):
        sgd_step(p.copy(role="teacher"), {}, OptimState())
    with pytest.raises(NonFiniteError):
        sgd_step(p, {"seg_b": np.full(3, np.inf)}, OptimState())


def test_supervised_peaked_logits():
    labels = np.array([[0, 1], [2, 1]])
    logits = np.zeros((2, 2, 3))
    logits[np.arange(2)[:, None], np.arange(2)[None, :], labels] = 20.0
    assert supervised_loss(logits, labels).loss < 1e-6


def test_supervised_uniform_ce():
    res = supervised_loss(np.zeros((3, 3, 2)), np.zeros((3, 3), int))
    assert res.terms["ce"] == pytest.approx(math.log(2), abs=1e-12)


def test_supervised_gradient():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(4, 4, 3))
    labels = rng.integers(0, 3, (4, 4))
    res = supervised_loss(logits, labels)
    fd = finite_diff_grad(lambda z: supervised_loss(z, labels).loss, logits)
    assert relative_error(res.grads["logits"], fd) < 1e-4


def test_supervised_shape_errors():
    with pytest.raises(ShapeError):
        supervised_loss(np.zeros((2, 2, 3)), np.zeros((2, 3), int))
    with pytest.raises(ShapeError):
        supervised_loss(np.zeros((2, 2, 3)), np.full((2, 2), 3))


def test_masked_ce():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(6, 3))
    labels = rng.integers(0, 3, 6)
    assert masked_cross_entropy(logits, labels, np.zeros(6, bool)).loss == 0.0
    mask = np.array([1, 0, 1, 1, 0, 0], bool)
    res = masked_cross_entropy(logits, labels, mask)
    logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    assert res.loss == pytest.approx(-logp[mask, labels[mask]].sum() / 6, abs=1e-12)
    fd = finite_diff_grad(lambda z: masked_cross_entropy(z, labels, mask).loss, logits)
    assert relative_error(res.grads["logits"], fd) < 1e-4
