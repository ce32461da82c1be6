"""Bayes-by-Backprop minibatch training with Adam and validation model selection.

The cost of minibatch ``i`` (of ``M`` per epoch) sums, over ``n`` weight
draws, ``lambda_i * kl_k + nll_k`` where ``nll_k`` is the mean negative log
likelihood over the batch and ``lambda_i = 2^(M-i) / (2^M - 1) * kl_scale``.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import kvconfig
from .bayeslayers import NoiseSource, SamplingMode
from .diffcore import GradTape, Tensor, backward, ops, softmax_nll
from .errors import ConfigError, DataError, NumericError, ShapeError
from .inference import draw_probabilities
from .metrics import evaluate
from .network import Checkpoint, Network

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    learning_rate: float = 1e-3
    epochs: int = 50
    mc_draws_train: int = 1
    kl_scale: float = 1e-5
    mode: SamplingMode = SamplingMode.LOCAL_REPARAM
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_mc_draws: int = 8  # 0 selects a single mean-only pass
    eval_batch_size: int = 256
    bn_calibration_size: int = 1024  # segments used to re-estimate batchnorm stats each epoch

    def errors(self) -> List[str]:
        out = []
        if self.batch_size < 2:
            out.append("batch_size must be >= 2 (batchnorm needs batch statistics)")
        if self.mc_draws_train < 1:
            out.append("mc_draws_train must be >= 1")
        if not self.kl_scale >= 0:
            out.append("kl_scale must be >= 0")
        if not self.learning_rate > 0:
            out.append("learning_rate must be > 0")
        if self.epochs < 1:
            out.append("epochs must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            out.append("beta1 and beta2 must lie in [0, 1)")
        if not self.adam_eps > 0:
            out.append("adam_eps must be > 0")
        if self.val_mc_draws < 0:
            out.append("val_mc_draws must be >= 0")
        if self.bn_calibration_size < 0:
            out.append("bn_calibration_size must be >= 0")
        if self.eval_batch_size < 1:
            out.append("eval_batch_size must be >= 1")
        if SamplingMode.parse(self.mode) is SamplingMode.MEAN_ONLY:
            out.append("training mode must be weight-sample or local-reparam")
        return out

    def validate(self) -> "TrainConfig":
        problems = self.errors()
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_kv(self, prefix: str = "train.") -> Dict[str, object]:
        return kvconfig.to_kv(self, prefix)

    @classmethod
    def from_kv(cls, values: Mapping[str, str], prefix: str = "train.", base=None) -> "TrainConfig":
        return kvconfig.apply_kv(cls, values, base, prefix).validate()


@dataclass
class EpochReport:
    epoch: int
    nll: float  # mean likelihood term per minibatch
    kl_weighted: float  # mean lambda-weighted prior term per minibatch
    val: Dict[str, float]
    best: bool
    n_batches: int
    seconds: float = field(default=0.0, compare=False)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    reports: List[EpochReport]
    best_epoch: int


def lambda_schedule(i: int, M: int, kl_scale: float = 1.0) -> float:
    """KL weight of minibatch ``i`` (1-based) among ``M``.

    Evaluated as ``2^-i / (1 - 2^-M)`` so large ``M`` cannot overflow.
    """
    if M < 1:
        raise ValueError(f"minibatch count must be >= 1, got {M}")
    if not 1 <= i <= M:
        raise ValueError(f"minibatch index {i} outside 1..{M}")
    return math.ldexp(1.0, -i) / -math.expm1(-M * math.log(2.0)) * kl_scale


def minibatch_cost(net: Network, x, labels, lambda_i: float, n: int = 1, mode="local-reparam",
                   noise: Optional[NoiseSource] = None, training: bool = True) -> Tuple[Tensor, Dict[str, float]]:
    """Differentiable cost of one minibatch; ``parts`` holds the summed nll and weighted KL."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    x = np.asarray(x, dtype=np.float32) if not isinstance(x, Tensor) else x
    cost = None
    nll_total = kl_total = 0.0
    for _ in range(n):
        logits, kl = net.forward(x, mode, noise, training=training)
        nll, _ = softmax_nll(logits, labels)
        term = ops.add(ops.scale(kl, lambda_i), nll)
        cost = term if cost is None else ops.add(cost, term)
        nll_total += nll.item()
        kl_total += lambda_i * kl.item()
    return cost, {"nll": nll_total, "kl_weighted": kl_total}


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, computed in float64 and written back in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}", dim=name)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data[...] = (p.data.astype(np.float64) - update).astype(p.dtype)
    return state


def batch_slices(n_items: int, batch_size: int) -> List[slice]:
    """Consecutive batches; a trailing batch of one is merged into its predecessor."""
    bounds = list(range(0, n_items, batch_size)) + [n_items]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return [slice(a, b) for a, b in zip(bounds, bounds[1:])]


def _check_sets(train_set, val_set) -> None:
    for name, s in (("training", train_set), ("validation", val_set)):
        if len(s.labels) == 0:
            raise DataError(f"{name} set is empty")
        if np.any(np.asarray(s.labels) < 0):
            raise DataError(f"{name} set contains unlabelled segments")
    if len(train_set.labels) < 2:
        raise DataError("training set needs at least two segments")
    overlap = set(train_set.subjects) & set(val_set.subjects)
    if overlap:
        raise DataError(f"subjects appear in both training and validation: {sorted(overlap)[:5]}")


def validation_metrics(net: Network, val_set, config: TrainConfig) -> Dict[str, float]:
    x = np.asarray(val_set.x, dtype=np.float32)
    if config.val_mc_draws == 0:
        logits = np.concatenate([
            net.forward(x[s:s + config.eval_batch_size], "mean-only", with_kl=False)[0].data
            for s in range(0, len(x), config.eval_batch_size)]).astype(np.float64)
        p_af = 1.0 / (1.0 + np.exp(logits[:, 0] - logits[:, 1]))
    else:
        probs = draw_probabilities(net, x, config.val_mc_draws, config.seed, config.eval_batch_size)
        p_af = probs.mean(axis=0)[:, 1]
    pred = (p_af > 0.5).astype(np.int64)
    report = evaluate(pred, p_af, np.asarray(val_set.labels))
    return {k: float(getattr(report, k)) for k in ("f1", "mcc", "auc", "sensitivity", "specificity", "precision")}


def train(net: Network, train_set, val_set, config: TrainConfig = TrainConfig(),
          run_log=None, on_epoch: Optional[Callable[[EpochReport], None]] = None) -> TrainResult:
    """Train ``net`` in place and return the best-validation-F1 checkpoint.

    ``train_set``/``val_set`` expose ``x`` ``[N, L]``, ``labels`` and
    ``subjects``. Earlier epochs win F1 ties. On return ``net`` holds the
    selected parameters. ``run_log`` (a text file object) receives one JSON
    line per epoch.
    """
    config.validate()
    _check_sets(train_set, val_set)
    mode = SamplingMode.parse(config.mode)
    x_all = np.asarray(train_set.x, dtype=np.float32)
    if x_all.ndim == 2:
        x_all = x_all[:, None, :]
    y_all = np.asarray(train_set.labels, dtype=np.int64)
    params = net.parameters()
    tensors = list(params.values())
    state = AdamState()
    reports: List[EpochReport] = []
    best_f1, best_epoch, best_state = -math.inf, 0, None

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(y_all))
        slices = batch_slices(len(order), config.batch_size)
        M = len(slices)
        nll_sum = kl_sum = 0.0
        for i, sl in enumerate(slices, 1):
            idx = order[sl]
            lam = lambda_schedule(i, M, config.kl_scale)
            noise = NoiseSource((config.seed, epoch, i))
            with GradTape() as tape:
                cost, parts = minibatch_cost(net, x_all[idx], y_all[idx], lam, config.mc_draws_train,
                                             mode, noise)
            if not math.isfinite(cost.item()):
                raise NumericError(f"non-finite cost at epoch {epoch}, minibatch {i}")
            grads = backward(cost, tape, tensors)
            adam_step(params, {k: grads[t] for k, t in params.items()}, state,
                      config.learning_rate, config.beta1, config.beta2, config.adam_eps)
            nll_sum += parts["nll"]
            kl_sum += parts["kl_weighted"]
        if config.bn_calibration_size:
            net.recalibrate_batchnorm(x_all[np.sort(order[:config.bn_calibration_size])],
                                      config.eval_batch_size)
        val = validation_metrics(net, val_set, config)
        is_best = val["f1"] > best_f1
        if is_best:
            best_f1, best_epoch, best_state = val["f1"], epoch, net.state_dict()
        report = EpochReport(epoch, nll_sum / M, kl_sum / M, val, is_best, M,
                             time.perf_counter() - start)
        reports.append(report)
        log.info("epoch %d nll %.4f kl %.3g val_f1 %.4f%s", epoch, report.nll, report.kl_weighted,
                 val["f1"], " *" if is_best else "")
        if run_log is not None:
            run_log.write(report.to_json() + "\n")
            run_log.flush()
        if on_epoch is not None:
            on_epoch(report)

    net.load_state_dict(best_state)
    meta = {"epoch": best_epoch, "val_f1": best_f1}
    meta.update({k: v for k, v in config.to_kv().items()})
    return TrainResult(Checkpoint.from_network(net, meta), reports, best_epoch)
