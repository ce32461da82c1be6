"""End-to-end acceptance suite: ten criteria at their stated tolerances.

Criteria 7-10 share one desk-scale run (synthetic data, default network,
15 epochs), which is repeated once to check bit-reproducibility. Expect the
module to take roughly half an hour on a single core.
"""
import math
import time
import zlib

import numpy as np
import pytest

from bayesbeat.bayeslayers import (
    BayesConv1d,
    NoiseDraw,
    NoiseSource,
    VariationalTensor,
    gaussian_activation,
    kl_closed_form,
    kl_mc_terms,
    sample_weights,
)
from bayesbeat.dataio import SegmentSet, SynthSpec, split_subjects, synth_generate
from bayesbeat.diffcore import (
    RunningStats,
    Tensor,
    batchnorm1d,
    conv1d,
    dense,
    gradcheck,
    maxpool1d,
    mean_last,
    ops,
    softmax_nll,
    softplus,
    square,
)
from bayesbeat.inference import ThresholdPolicy, aleatoric_matrix, predict_batch, summarize_draws
from bayesbeat.metrics import ConfusionCounts, compute_metrics, roc_auc, threshold_sweep
from bayesbeat.network import Checkpoint, build, count_parameters, tiny_config
from bayesbeat.trainer import TrainConfig, lambda_schedule, train

# ---------------------------------------------------------------- 1. gradient oracle


def _weighted(out, seed=99):
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return ops.sum(ops.mul(out, Tensor(r, dtype=out.dtype)))


def _vt(mu, rho):
    return VariationalTensor(mu, rho)


EPS_W = np.random.default_rng(7).standard_normal((10, 12))
EPS_A = np.random.default_rng(8).standard_normal((6, 20))

PRIMITIVES = {
    "conv1d": (lambda x, w, b: _weighted(conv1d(x, w, b, padding=2)), [(3, 2, 16), (4, 2, 5), (4,)]),
    "conv1d_stride2": (lambda x, w, b: _weighted(conv1d(x, w, b, stride=2, padding=1)),
                       [(2, 3, 21), (5, 3, 4), (5,)]),
    "maxpool1d": (lambda x: _weighted(maxpool1d(x, 2, 2)), [(2, 3, 20)]),
    "softplus": (lambda x: _weighted(softplus(x)), [(5, 30)]),
    "batchnorm1d_train": (lambda x, g, b: _weighted(batchnorm1d(x, g, b, RunningStats.init(3, dtype=np.float64))),
                          [(4, 3, 12), (3,), (3,)]),
    "batchnorm1d_eval": (lambda x, g, b: _weighted(batchnorm1d(
        x, g, b, RunningStats(np.array([0.1, -0.2, 0.3]), np.array([1.5, 0.7, 2.0])), training=False)),
        [(4, 3, 12), (3,), (3,)]),
    "dense": (lambda x, w, b: _weighted(dense(x, w, b)), [(6, 10), (4, 10), (4,)]),
    "softmax_nll": (lambda z: softmax_nll(z, np.arange(60) % 2)[0], [(60, 2)]),
    "square": (lambda x: _weighted(square(x)), [(120,)]),
    "mean_last": (lambda x: _weighted(mean_last(x)), [(3, 4, 9)]),
    "scale_add": (lambda x, y: _weighted(ops.add(ops.scale(x, 2.5), y)), [(60,), (60,)]),
    "mul": (lambda x, y: _weighted(ops.mul(x, y)), [(60,), (60,)]),
    "reshape_sum": (lambda x: ops.sum(ops.mul(ops.reshape(x, (12, 10)), Tensor(np.ones((12, 10))))), [(120,)]),
    "sample_weights": (lambda mu, rho: _weighted(sample_weights(_vt(mu, rho), NoiseDraw(EPS_W))),
                       [(10, 12), (10, 12)]),
    "kl_mc_terms": (lambda mu, rho: kl_mc_terms(_vt(mu, rho), sample_weights(_vt(mu, rho), NoiseDraw(EPS_W))),
                    [(10, 12), (10, 12)]),
    "kl_closed_form": (lambda mu, rho: kl_closed_form(_vt(mu, rho)), [(10, 12), (10, 12)]),
    "gaussian_activation": (lambda m, v: _weighted(gaussian_activation(m, square(v), NoiseDraw(EPS_A))),
                            [(6, 20), (6, 20)]),
}


def _inputs(name, shapes):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    out = [rng.standard_normal(s) for s in shapes]
    if name in ("sample_weights", "kl_mc_terms", "kl_closed_form"):
        out[1] = rng.uniform(-3, 1, shapes[1])  # rho
    if name == "gaussian_activation":
        out[1] = rng.uniform(0.7, 1.5, shapes[1])  # standard deviation, squared inside
    return out


def _tiny_network_check(mode):
    net = build(tiny_config(n_stages=2, width=8, input_length=32), seed=0)
    rng = np.random.default_rng(0)
    names = list(net.parameters())
    values = []
    for name in names:
        arr = net.parameters()[name].data.astype(np.float64)
        if name.endswith(".rho"):
            arr = rng.uniform(-3, -1, arr.shape)
        elif name.endswith((".gamma", ".beta", "bias.mu")):
            arr = arr + rng.normal(0, 0.3, arr.shape)
        values.append(arr)
    x = rng.random((4, 1, 32))
    labels = np.array([0, 1, 1, 0])

    def loss(*tensors):
        net.replace_parameters(dict(zip(names, tensors)))
        logits, kl = net.forward(Tensor(x, dtype=np.float64), mode, NoiseSource(7, dtype=np.float64),
                                 training=True)
        return ops.add(softmax_nll(logits, labels)[0], ops.scale(kl, 1e-3))

    return gradcheck(loss, values, n_coords=100, seed=3, skip_kinks=True)


def test_criterion_01_gradient_oracle(record_criterion):
    start = time.perf_counter()
    worst, problems = 0.0, []
    for name, (fn, shapes) in PRIMITIVES.items():
        res = gradcheck(fn, _inputs(name, shapes), n_coords=100, seed=1)
        worst = max(worst, res.max_rel_error)
        if res.n_coords < 100 or not res.max_rel_error < 1e-4:
            problems.append(f"{name}: {res.max_rel_error:.2e} over {res.n_coords}")
    for mode in ("weight-sample", "local-reparam"):
        res = _tiny_network_check(mode)
        worst = max(worst, res.max_rel_error)
        if res.n_coords < 100 or not res.max_rel_error < 1e-4:
            problems.append(f"network[{mode}]: {res.max_rel_error:.2e} over {res.n_coords}")
    elapsed = time.perf_counter() - start
    ok = not problems and elapsed < 120
    detail = (f"{len(PRIMITIVES)} primitives + tiny network in 2 modes, worst rel err {worst:.2e}, "
              f"{elapsed:.1f}s" + (f"; {problems}" if problems else ""))
    assert record_criterion(1, ok, detail), detail


# ---------------------------------------------------------------- 2. KL estimator


def test_criterion_02_kl_estimator(record_criterion):
    worst = 0.0
    n = 100_000
    for seed in range(10):
        rng = np.random.default_rng(seed)
        mu, rho = rng.normal(0, 1, 6), rng.uniform(-3, 1, 6)
        tiled = _vt(Tensor(np.tile(mu, (n, 1)), dtype=np.float64), Tensor(np.tile(rho, (n, 1)), dtype=np.float64))
        w = sample_weights(tiled, NoiseDraw(rng.standard_normal((n, 6))))
        mc = kl_mc_terms(tiled, w).item() / n
        exact = kl_closed_form(_vt(Tensor(mu, dtype=np.float64), Tensor(rho, dtype=np.float64))).item()
        worst = max(worst, abs(mc - exact) / exact)
    sigma_rho = lambda s: math.log(math.expm1(s))  # noqa: E731
    hand = [
        kl_closed_form(_vt(Tensor([0.0], dtype=np.float64), Tensor([sigma_rho(1.0)], dtype=np.float64))).item(),
        kl_closed_form(_vt(Tensor([1.0], dtype=np.float64), Tensor([sigma_rho(1.0)], dtype=np.float64))).item(),
        kl_closed_form(_vt(Tensor([0.0], dtype=np.float64), Tensor([sigma_rho(2.0)], dtype=np.float64))).item(),
    ]
    hand_ok = (abs(hand[0]) < 1e-12 and abs(hand[1] - 0.5) < 1e-12
               and abs(hand[2] - 0.5 * (3 - math.log(4))) < 1e-12 and round(hand[2], 4) == 0.8069)
    ok = worst < 0.02 and hand_ok
    detail = f"max MC/closed-form rel err {worst:.4f} (< 0.02); hand values {[round(h, 4) for h in hand]}"
    assert record_criterion(2, ok, detail), detail


# ---------------------------------------------------------------- 3. reparameterization equivalence


def test_criterion_03_reparameterization(record_criterion):
    rng = np.random.default_rng(8)
    layer = BayesConv1d(3, 2, 3, rng=rng, name="c")
    layer.kernel.rho.data[...] = rng.uniform(-2, 0, layer.kernel.shape)
    layer.bias.mu.data[...] = rng.normal(0, 0.5, 2)
    layer.bias.rho.data[...] = rng.uniform(-2, 0, 2)
    x = rng.standard_normal((1, 3, 3)).astype(np.float32)
    n = 10_000
    lr, _ = layer.forward(Tensor(np.repeat(x, n, axis=0)), "local-reparam", NoiseSource(9), with_kl=False)
    noise = NoiseSource(10)
    ws = np.stack([layer.forward(Tensor(x), "weight-sample", noise, with_kl=False)[0].data[0] for _ in range(n)])
    a = lr.data.reshape(n, -1).astype(np.float64)
    b = ws.reshape(n, -1).astype(np.float64)
    va, vb = a.var(axis=0, ddof=1), b.var(axis=0, ddof=1)
    z = np.abs(a.mean(axis=0) - b.mean(axis=0)) / np.sqrt(va / n + vb / n)
    rel_var = np.abs(va - vb) / vb
    ok = bool(np.all(z < 3) and np.all(rel_var < 0.05))
    detail = f"max mean gap {z.max():.2f} SE (< 3), max variance gap {rel_var.max():.3f} (< 0.05)"
    assert record_criterion(3, ok, detail), detail


# ---------------------------------------------------------------- 4. lambda schedule


def test_criterion_04_lambda_schedule(record_criterion):
    worst = max(abs(math.fsum(lambda_schedule(i, M, 1.0) for i in range(1, M + 1)) - 1) for M in range(1, 21))
    value = lambda_schedule(1, 10, 1e-5)
    ok = worst <= 1e-9 and abs(value - 512 / 1023 * 1e-5) < 1e-18 and round(value, 9) == 5.005e-6
    detail = f"max |sum - 1| {worst:.1e} over M=1..20; M=10, i=1 -> {value:.4e}"
    assert record_criterion(4, ok, detail), detail


# ---------------------------------------------------------------- 5. uncertainty algebra


def test_criterion_05_uncertainty_algebra(record_criterion):
    hand = aleatoric_matrix(np.full((5, 2), 0.5))
    hand_ok = np.allclose(hand, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15, rtol=0)
    rng = np.random.default_rng(0)
    min_eig, u_lo, u_hi = np.inf, np.inf, -np.inf
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        p0 = rng.beta(0.3, 0.3, n)
        probs = np.stack([p0, 1 - p0], axis=1)
        min_eig = min(min_eig, np.linalg.eigvalsh(aleatoric_matrix(probs)).min())
        u = summarize_draws(probs).u_scalar
        u_lo, u_hi = min(u_lo, u), max(u_hi, u)
    ok = hand_ok and min_eig >= -1e-12 and u_lo >= 0 and u_hi <= 0.25
    detail = f"uniform-draw matrix ok={hand_ok}; min eigenvalue {min_eig:.1e}; u_scalar range [{u_lo:.4f}, {u_hi:.4f}]"
    assert record_criterion(5, ok, detail), detail


# ---------------------------------------------------------------- 6. metrics oracle


def _brute(tp, tn, fp, fn):
    y = [1] * tp + [0] * tn + [0] * fp + [1] * fn
    p = [1] * tp + [0] * tn + [1] * fp + [0] * fn
    TP = float(sum(a == 1 and b == 1 for a, b in zip(y, p)))
    TN = float(sum(a == 0 and b == 0 for a, b in zip(y, p)))
    FP = float(sum(a == 0 and b == 1 for a, b in zip(y, p)))
    FN = float(sum(a == 1 and b == 0 for a, b in zip(y, p)))
    div = lambda a, b: a / b if b else 0.0  # noqa: E731
    prec, rec = div(TP, TP + FP), div(TP, TP + FN)
    return dict(sensitivity=rec, specificity=div(TN, TN + FP), precision=prec,
                f1=div(2 * prec * rec, prec + rec),
                mcc=div(TP * TN - FP * FN, math.sqrt((TP + FP) * (TP + FN) * (TN + FP) * (TN + FN))))


def test_criterion_06_metrics_oracle(record_criterion):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        tp, tn, fp, fn = (int(v) for v in rng.integers(0, 50, 4))
        tn += int(tp + tn + fp + fn == 0)
        r = compute_metrics(ConfusionCounts(tp, tn, fp, fn))
        worst = max(worst, max(abs(getattr(r, k) - v) for k, v in _brute(tp, tn, fp, fn).items()))
    auc_worst = 0.0
    for trial in range(40):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = np.round(rng.random(n) + 0.4 * y, 1 + trial % 3)
        pos, neg = s[y == 1], s[y == 0]
        wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
        auc_worst = max(auc_worst, abs(roc_auc(s, y) - wins / (len(pos) * len(neg))))
    metric_ok = worst <= 1e-9
    auc_ok = auc_worst <= 1e-9
    ok = metric_ok and auc_ok
    detail = f"max metric deviation {worst:.1e} on 100 tables; max AUC-Wilcoxon gap {auc_worst:.1e} on 40 sets"
    assert record_criterion(6, ok, detail), detail


# ---------------------------------------------------------------- 7-10. desk-scale run

DESK_SEED = 0
DESK_TRAIN = TrainConfig(batch_size=32, learning_rate=1e-3, epochs=15, kl_scale=1e-5, mode="weight-sample",
                         seed=DESK_SEED, val_mc_draws=4)
THRESHOLDS = [None, 0.05, 0.01]


def run_desk_pipeline(seed=DESK_SEED):
    start = time.perf_counter()
    segments = synth_generate(SynthSpec(n_segments=4000, n_subjects=50, af_fraction=0.4, seed=seed))
    manifest = split_subjects(segments, seed=seed)
    train_set, val_set, test_set = (SegmentSet.from_segments(manifest.partition(segments, p))
                                    for p in ("train", "val", "test"))
    net = build(seed=seed)
    result = train(net, train_set, val_set, DESK_TRAIN)
    preds = predict_batch(net, test_set.x, n=64, seed=seed, policy=ThresholdPolicy(None))
    elapsed = time.perf_counter() - start
    return dict(
        n_segments=len(segments), net=net, result=result, preds=preds, test=test_set, seconds=elapsed,
        p_af=np.array([p.p_af for p in preds]), u=np.array([p.u_scalar for p in preds]),
        labels=np.array([p.label for p in preds]),
    )


@pytest.fixture(scope="module")
def desk_run():
    return run_desk_pipeline()


@pytest.mark.slow
def test_criterion_07_desk_scale_run(desk_run, record_criterion):
    net, test = desk_run["net"], desk_run["test"]
    n_params = net.n_params
    params_ok = abs(n_params - 180_000) <= 18_000 and n_params == count_parameters(net.config)
    low = test.noise <= 0.1
    report = compute_metrics(
        ConfusionCounts(
            tp=int(np.sum((desk_run["labels"] == 1) & (test.labels == 1) & low)),
            tn=int(np.sum((desk_run["labels"] == 0) & (test.labels == 0) & low)),
            fp=int(np.sum((desk_run["labels"] == 1) & (test.labels == 0) & low)),
            fn=int(np.sum((desk_run["labels"] == 0) & (test.labels == 1) & low))))
    minutes = desk_run["seconds"] / 60
    ok = params_ok and desk_run["n_segments"] == 4000 and report.f1 >= 0.85 and minutes <= 30
    detail = (f"{n_params} params; low-noise test F1 {report.f1:.4f} on {int(low.sum())} segments (>= 0.85); "
              f"best epoch {desk_run['result'].best_epoch}; {minutes:.1f} min (<= 30)")
    assert record_criterion(7, ok, detail), detail


@pytest.mark.slow
def test_criterion_08_threshold_trend(desk_run, record_criterion):
    reports = threshold_sweep(desk_run["preds"], desk_run["test"].labels, THRESHOLDS)
    f1 = [r.f1 for r in reports]
    mcc = [r.mcc for r in reports]
    abst = [r.abstention_rate for r in reports]
    nondecreasing = lambda v: all(b >= a for a, b in zip(v, v[1:]))  # noqa: E731
    ok = (nondecreasing(f1) and nondecreasing(mcc) and nondecreasing(abst)
          and not any(r.empty for r in reports))
    detail = ("none/0.05/0.01: F1 " + "/".join(f"{v:.4f}" for v in f1) + ", MCC " + "/".join(f"{v:.4f}" for v in mcc)
              + ", abstention " + "/".join(f"{v:.3f}" for v in abst))
    assert record_criterion(8, ok, detail), detail


@pytest.mark.slow
def test_criterion_09_uncertainty_by_noise(desk_run, record_criterion):
    noise, u = desk_run["test"].noise, desk_run["u"]
    heavy, clean = u[noise >= 0.7].mean(), u[noise <= 0.1].mean()
    ratio = heavy / clean
    ok = ratio >= 3
    detail = f"mean u_scalar heavy {heavy:.4f} vs clean {clean:.4f}, ratio {ratio:.2f} (>= 3)"
    assert record_criterion(9, ok, detail), detail


@pytest.mark.slow
def test_criterion_10_reproducibility(desk_run, record_criterion, tmp_path):
    again = run_desk_pipeline()
    same_reports = again["result"].reports == desk_run["result"].reports
    a, b = desk_run["result"].checkpoint.tensors, again["result"].checkpoint.tensors
    same_ckpt = a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    same_preds = (np.array_equal(again["p_af"], desk_run["p_af"]) and np.array_equal(again["u"], desk_run["u"])
                  and np.array_equal(again["labels"], desk_run["labels"]))
    path = tmp_path / "desk.bbkt"
    desk_run["result"].checkpoint.save(path)
    loaded = Checkpoint.load(path).network()
    x = desk_run["test"].x[:64]
    roundtrip = np.array_equal(loaded.forward(x, "mean-only")[0].data, desk_run["net"].forward(x, "mean-only")[0].data)
    ok = same_reports and same_ckpt and same_preds and roundtrip
    detail = (f"rerun: epoch reports {same_reports}, checkpoint {same_ckpt}, predictions {same_preds}; "
              f"checkpoint round-trip mean-only forward identical {roundtrip}")
    assert record_criterion(10, ok, detail), detail


# ---------------------------------------------------------------- further checks on the desk-scale model


@pytest.mark.slow
def test_f1_monotone_over_four_thresholds(desk_run):
    reports = threshold_sweep(desk_run["preds"], desk_run["test"].labels, [None, 0.1, 0.05, 0.01])
    f1 = [r.f1 for r in reports]
    assert all(b >= a for a, b in zip(f1, f1[1:])), f1


@pytest.mark.slow
def test_penultimate_centroids_separate(desk_run):
    feats = desk_run["net"].penultimate_features(desk_run["test"].x)
    labels = desk_run["test"].labels
    centroids = [feats[labels == c].mean(axis=0) for c in (0, 1)]
    intra = np.mean([np.linalg.norm(feats[labels == c] - centroids[c], axis=1).mean() for c in (0, 1)])
    assert np.linalg.norm(centroids[1] - centroids[0]) > intra
