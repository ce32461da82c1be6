"""Monte-Carlo predictive inference with aleatoric uncertainty and abstention.

Each draw ``k`` samples a full set of weights from the posterior (seeded by
``(seed, k)``) and runs the network with batchnorm in eval mode. The
predictive probability is the mean of the per-draw softmax outputs and the
aleatoric matrix is the mean over draws of ``diag(p) - p p^T``.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import IO, List, Optional, Sequence, Tuple

import numpy as np

from .bayeslayers import NoiseSource
from .errors import ConfigError, ShapeError

DEFAULT_DRAWS = 64


@dataclass(frozen=True)
class ThresholdPolicy:
    """Accept a prediction when ``u_scalar <= threshold``; ``None`` accepts all."""

    threshold: Optional[float] = None

    def __post_init__(self):
        if self.threshold is not None and not (self.threshold >= 0):
            raise ConfigError(f"threshold must be >= 0, got {self.threshold}")

    @classmethod
    def parse(cls, text) -> "ThresholdPolicy":
        if text is None or isinstance(text, (int, float)):
            return cls(None if text is None else float(text))
        text = str(text).strip().lower()
        if text in ("none", "", "inf"):
            return cls(None)
        try:
            return cls(float(text))
        except ValueError:
            raise ConfigError(f"cannot parse threshold {text!r}") from None

    def accepts(self, u_scalar: float) -> bool:
        return self.threshold is None or u_scalar <= self.threshold


@dataclass
class Prediction:
    p_mean: np.ndarray
    u_matrix: np.ndarray
    u_scalar: float
    label: int
    accepted: bool = True
    n_draws: int = 0
    draws: Optional[np.ndarray] = None
    segment_id: Optional[str] = None

    @property
    def p_af(self) -> float:
        return float(self.p_mean[1])

    def record(self) -> dict:
        return {"segment_id": self.segment_id, "p_af": self.p_af, "u_scalar": self.u_scalar,
                "label": self.label, "accepted": self.accepted}


def aleatoric_matrix(probs) -> np.ndarray:
    """Mean over draws of ``diag(p_k) - p_k p_k^T`` for ``probs`` of shape ``[n, C]``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ShapeError(f"expected per-draw probabilities [n, C] with n >= 1, got {p.shape}", dim="n")
    outer = np.einsum("ki,kj->ij", p, p) / p.shape[0]
    return np.diag(p.mean(axis=0)) - outer


def summarize_draws(probs, policy: ThresholdPolicy = ThresholdPolicy(), keep_draws: bool = False,
                    segment_id: Optional[str] = None) -> Prediction:
    p = np.asarray(probs, dtype=np.float64)
    u = aleatoric_matrix(p)
    u_scalar = float(np.clip(np.mean(np.diag(u)), 0.0, 0.25))
    p_mean = p.mean(axis=0)
    label = int(p_mean[1] > p_mean[0])  # exact ties stay non-AF
    return Prediction(p_mean, u, u_scalar, label, policy.accepts(u_scalar), p.shape[0],
                      p.copy() if keep_draws else None, segment_id)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def draw_probabilities(net, x, n: int = DEFAULT_DRAWS, seed: int = 0, batch_size: int = 256,
                       threads: int = 1) -> np.ndarray:
    """Per-draw class probabilities, shape ``[n, B, C]``.

    Draw ``k`` uses ``NoiseSource((seed, k))`` for every chunk of the batch, so
    all segments in one draw see the same weights regardless of chunking.
    """
    if n < 1:
        raise ConfigError(f"number of draws must be >= 1, got {n}")
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 2:
        x = x[:, None, :]

    def one_draw(k):
        noise = NoiseSource((seed, k))
        chunks = []
        for s in range(0, x.shape[0], batch_size):
            logits, _ = net.forward(x[s:s + batch_size], "weight-sample", noise, training=False, with_kl=False)
            chunks.append(_softmax(logits.data))
            noise = NoiseSource((seed, k))  # same weights for the next chunk
        return np.concatenate(chunks, axis=0)

    if x.shape[0] == 0:
        return np.zeros((n, 0, net.config.n_classes))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return np.stack(list(pool.map(one_draw, range(n))))
    return np.stack([one_draw(k) for k in range(n)])


def predict(net, segment, n: int = DEFAULT_DRAWS, seed: int = 0,
            policy: ThresholdPolicy = ThresholdPolicy(), keep_draws: bool = False) -> Prediction:
    """Predict a single segment of shape ``[L]`` or ``[1, L]``."""
    x = np.asarray(segment, dtype=np.float32).reshape(1, 1, -1)
    probs = draw_probabilities(net, x, n, seed)
    return summarize_draws(probs[:, 0], policy, keep_draws)


def predict_batch(net, x, n: int = DEFAULT_DRAWS, seed: int = 0,
                  policy: ThresholdPolicy = ThresholdPolicy(), segment_ids: Optional[Sequence[str]] = None,
                  batch_size: int = 256, threads: int = 1, keep_draws: bool = False) -> List[Prediction]:
    probs = draw_probabilities(net, x, n, seed, batch_size, threads)
    ids = list(segment_ids) if segment_ids is not None else [None] * probs.shape[1]
    if len(ids) != probs.shape[1]:
        raise ShapeError(f"{len(ids)} segment ids for {probs.shape[1]} segments", dim="B")
    return [summarize_draws(probs[:, i], policy, keep_draws, ids[i]) for i in range(probs.shape[1])]


def apply_threshold(preds: Sequence[Prediction],
                    policy: ThresholdPolicy) -> Tuple[List[Prediction], List[Prediction]]:
    accepted, abstained = [], []
    for p in preds:
        (accepted if policy.accepts(p.u_scalar) else abstained).append(p)
    return accepted, abstained


def write_predictions(preds: Sequence[Prediction], fh: IO[str]) -> None:
    for p in preds:
        rec = p.record()
        if not math.isfinite(rec["p_af"]):
            raise ValueError(f"non-finite probability for segment {p.segment_id}")
        fh.write(json.dumps(rec) + "\n")
