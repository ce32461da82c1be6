import io
import json

import numpy as np
import pytest

from bayesbeat.errors import ConfigError
from bayesbeat.inference import (
    ThresholdPolicy,
    aleatoric_matrix,
    apply_threshold,
    predict,
    predict_batch,
    summarize_draws,
    write_predictions,
)
from bayesbeat.network import build, tiny_config


def test_degenerate_draws():
    p = summarize_draws(np.tile([1.0, 0.0], (5, 1)))
    np.testing.assert_array_equal(p.p_mean, [1, 0])
    np.testing.assert_array_equal(p.u_matrix, np.zeros((2, 2)))
    assert p.u_scalar == 0 and p.label == 0


def test_uniform_draws_give_quarter():
    p = summarize_draws(np.full((7, 2), 0.5))
    np.testing.assert_allclose(p.u_matrix, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15)
    assert p.u_scalar == 0.25
    assert p.label == 0  # exact tie stays non-AF


def test_two_draw_hand_case():
    p = summarize_draws(np.array([[0.6, 0.4], [0.8, 0.2]]))
    np.testing.assert_allclose(p.p_mean, [0.7, 0.3], atol=1e-15)
    # diag(p) - p p^T averaged by hand: 0.6*0.4 = 0.24 and 0.8*0.2 = 0.16
    np.testing.assert_allclose(p.u_matrix, [[0.20, -0.20], [-0.20, 0.20]], atol=1e-15)
    assert p.u_scalar == pytest.approx(0.20, abs=1e-15)


def test_random_draw_sets_are_psd_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        p0 = rng.beta(0.5, 0.5, n)
        probs = np.stack([p0, 1 - p0], axis=1)
        u = aleatoric_matrix(probs)
        assert np.allclose(u, u.T)
        assert np.linalg.eigvalsh(u).min() >= -1e-12
        assert u[0, 0] == pytest.approx(u[1, 1], abs=1e-12)
        assert u[0, 1] == pytest.approx(-u[0, 0], abs=1e-12)
        s = summarize_draws(probs)
        assert 0 <= s.u_scalar <= 0.25
        assert s.u_scalar == pytest.approx(np.mean(p0 * (1 - p0)), abs=1e-12)


def test_aleatoric_rejects_empty():
    with pytest.raises(ValueError):
        aleatoric_matrix(np.zeros((0, 2)))


def _pred(u):
    p = summarize_draws(np.array([[0.5, 0.5]]))
    p.u_scalar = u
    return p


def test_apply_threshold():
    preds = [_pred(0.242), _pred(0.004)]
    acc, abst = apply_threshold(preds, ThresholdPolicy(0.05))
    assert acc == [preds[1]] and abst == [preds[0]]
    acc, abst = apply_threshold(preds, ThresholdPolicy(None))
    assert acc == preds and abst == []
    zero = [_pred(0.0), _pred(1e-9)]
    acc, abst = apply_threshold(zero, ThresholdPolicy(0.0))
    assert acc == [zero[0]] and abst == [zero[1]]


def test_threshold_policy_validation():
    with pytest.raises(ConfigError):
        ThresholdPolicy(-0.1)
    assert ThresholdPolicy.parse("none").threshold is None
    assert ThresholdPolicy.parse("0.05").threshold == 0.05


@pytest.fixture(scope="module")
def tiny_net():
    net = build(tiny_config(n_stages=2, width=8, input_length=800), seed=0)
    for name, t in net.parameters().items():
        if name.endswith(".rho"):
            t.data[...] = -1.0  # wide posteriors so draws differ visibly
    return net


def test_predict_requires_draws(tiny_net):
    with pytest.raises(ConfigError):
        predict(tiny_net, np.zeros(800), n=0)


def test_predict_deterministic_and_batch_consistent(tiny_net):
    x = np.random.default_rng(1).random((5, 800)).astype(np.float32)
    a = predict(tiny_net, x[2], n=16, seed=3, keep_draws=True)
    b = predict(tiny_net, x[2], n=16, seed=3, keep_draws=True)
    np.testing.assert_array_equal(a.draws, b.draws)
    batch = predict_batch(tiny_net, x, n=16, seed=3, batch_size=2)
    np.testing.assert_allclose(batch[2].p_mean, a.p_mean, rtol=1e-6)
    assert batch[2].u_scalar == pytest.approx(a.u_scalar, rel=1e-5)
    threaded = predict_batch(tiny_net, x, n=16, seed=3, batch_size=2, threads=3)
    assert [p.u_scalar for p in threaded] == [p.u_scalar for p in batch]


def test_predict_invariants(tiny_net):
    x = np.random.default_rng(2).random((6, 800)).astype(np.float32)
    for p in predict_batch(tiny_net, x, n=32, seed=0):
        assert abs(p.p_mean.sum() - 1) < 1e-6
        assert np.all((p.p_mean >= 0) & (p.p_mean <= 1))
        assert np.allclose(p.u_matrix, p.u_matrix.T)
        assert 0 <= p.u_scalar <= 0.25
        assert p.n_draws == 32


def test_large_n_stability(tiny_net):
    x = np.random.default_rng(3).random(800).astype(np.float32)
    a = predict(tiny_net, x, n=256, seed=10)
    b = predict(tiny_net, x, n=256, seed=11)
    assert abs(a.u_scalar - b.u_scalar) < 0.01


def test_jsonl_records(tiny_net):
    x = np.random.default_rng(4).random((3, 800)).astype(np.float32)
    preds = predict_batch(tiny_net, x, n=4, policy=ThresholdPolicy(0.0), segment_ids=["a", "b", "c"])
    buf = io.StringIO()
    write_predictions(preds, buf)
    rows = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert [r["segment_id"] for r in rows] == ["a", "b", "c"]
    assert set(rows[0]) == {"segment_id", "p_af", "u_scalar", "label", "accepted"}
    assert all(r["accepted"] == (r["u_scalar"] <= 0.0) for r in rows)
