"""Variational (Bayes-by-Backprop) layers with factorized Gaussian posteriors.

Each weight tensor carries a posterior ``N(mu, sigma^2)`` with
``sigma = softplus(rho)``. Forward passes run in one of three modes:

``weight-sample``
    draw ``w = mu + sigma * eps`` once per call and apply the deterministic op;
``local-reparam``
    sample pre-activations directly: ``m = op(x, mu)``, ``v = op(x**2, sigma**2)``,
    ``out = m + sqrt(v + 1e-10) * eps`` with one ``eps`` per output element;
``mean-only``
    apply the op with ``mu`` (no noise, no KL).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import partial
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from .diffcore import Tensor, conv1d, dense, ops, record
from .errors import ShapeError

VARIANCE_FLOOR = 1e-10
RHO_INIT = -5.0
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


class SamplingMode(str, Enum):
    WEIGHT_SAMPLE = "weight-sample"
    LOCAL_REPARAM = "local-reparam"
    MEAN_ONLY = "mean-only"

    @classmethod
    def parse(cls, value) -> "SamplingMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value))
        except ValueError:
            raise ValueError(f"unknown sampling mode {value!r}; expected one of "
                             f"{[m.value for m in cls]}") from None


@dataclass
class VariationalTensor:
    """Posterior means ``mu`` and pre-softplus scales ``rho`` of one weight tensor."""

    mu: Tensor
    rho: Tensor

    def __post_init__(self):
        if self.mu.shape != self.rho.shape:
            raise ShapeError(f"mu shape {self.mu.shape} != rho shape {self.rho.shape}", dim="shape")

    @property
    def shape(self):
        return self.mu.shape

    def sigma(self) -> np.ndarray:
        return np.logaddexp(self.rho.data.dtype.type(0), self.rho.data)

    @classmethod
    def init(cls, shape, fan_in: int, rng: np.random.Generator, rho_init: float = RHO_INIT,
             zero_mean: bool = False, name: str = "") -> "VariationalTensor":
        if zero_mean:
            mu = np.zeros(shape, dtype=np.float32)
        else:
            mu = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape).astype(np.float32)
        rho = np.full(shape, rho_init, dtype=np.float32)
        return cls(Tensor(mu, requires_grad=True, name=f"{name}.mu"),
                   Tensor(rho, requires_grad=True, name=f"{name}.rho"))


@dataclass(frozen=True)
class PriorSpec:
    """Isotropic Gaussian prior over every weight; the default is ``N(0, 1)``."""

    kind: str = "standard-normal"
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.kind != "standard-normal" or self.mean != 0.0 or self.std != 1.0:
            raise ValueError("only the standard-normal prior N(0, I) is supported")


STANDARD_NORMAL = PriorSpec()


@dataclass
class NoiseDraw:
    """Standard-normal samples plus the (seed, draw index) that produced them."""

    eps: np.ndarray
    seed: object = None
    index: int = 0


class NoiseSource:
    """Reproducible stream of standard-normal draws.

    ``seed`` may be an int or a tuple of ints (e.g. ``(run_seed, epoch, batch)``);
    the k-th call to :meth:`draw` is a pure function of ``(seed, k)`` and shape.
    """

    def __init__(self, seed, dtype=np.float32):
        self.seed = seed
        self.dtype = dtype
        entropy = list(seed) if isinstance(seed, (tuple, list)) else seed
        self._rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
        self.count = 0

    def draw(self, shape) -> NoiseDraw:
        eps = self._rng.standard_normal(shape).astype(self.dtype, copy=False)
        self.count += 1
        return NoiseDraw(eps, self.seed, self.count - 1)


class ZeroNoise(NoiseSource):
    """Noise source returning ``eps = 0``: stochastic modes collapse to the mean."""

    def __init__(self, dtype=np.float32):
        self.seed, self.dtype, self.count = None, dtype, 0

    def draw(self, shape) -> NoiseDraw:
        self.count += 1
        return NoiseDraw(np.zeros(shape, dtype=self.dtype), None, self.count - 1)


# --------------------------------------------------------------------------- primitives


def sample_weights(vt: VariationalTensor, noise: NoiseDraw) -> Tensor:
    """``w = mu + softplus(rho) * eps``, differentiable in ``mu`` and ``rho``."""
    eps = np.asarray(noise.eps)
    if eps.shape != vt.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match posterior shape {vt.shape}",
                         dim="shape")
    mu, rho = vt.mu, vt.rho
    eps = eps.astype(mu.dtype, copy=False)
    out = Tensor(mu.data + vt.sigma() * eps, dtype=mu.dtype)
    return record(out, (mu, rho), lambda g: (g, g * eps * expit(rho.data)))


def kl_mc_terms(vt: VariationalTensor, w: Tensor, prior: PriorSpec = STANDARD_NORMAL) -> Tensor:
    """Single-draw Monte-Carlo KL term ``sum(log q(w | mu, sigma) - log p(w))``.

    With the standard-normal prior this is
    ``sum(-log sigma - (w - mu)**2 / (2 sigma**2) + w**2 / 2)``; the
    ``log(2 pi)`` constants cancel.
    """
    if w.shape != vt.shape:
        raise ShapeError(f"sample shape {w.shape} does not match posterior shape {vt.shape}",
                         dim="shape")
    mu = vt.mu.data.astype(np.float64)
    rho = vt.rho.data.astype(np.float64)
    wv = w.data.astype(np.float64)
    sigma = np.logaddexp(0.0, rho)
    z = (wv - mu) / sigma
    value = np.sum(-np.log(sigma) - 0.5 * z * z + 0.5 * wv * wv)
    out = Tensor(value, dtype=vt.mu.dtype)

    def vjp(g):
        g = float(np.asarray(g).item())
        g_w = g * (wv - z / sigma)
        g_mu = g * (z / sigma)
        g_rho = g * expit(rho) * (z * z - 1.0) / sigma
        return g_mu, g_rho, g_w

    return record(out, (vt.mu, vt.rho, w), vjp)


def kl_closed_form(vt: VariationalTensor, prior: PriorSpec = STANDARD_NORMAL) -> Tensor:
    """Exact ``KL(q || N(0, I)) = sum(0.5 * (mu**2 + sigma**2 - 1 - log sigma**2))``."""
    mu = vt.mu.data.astype(np.float64)
    rho = vt.rho.data.astype(np.float64)
    sigma = np.logaddexp(0.0, rho)
    value = 0.5 * np.sum(mu * mu + sigma * sigma - 1.0 - 2.0 * np.log(sigma))
    out = Tensor(value, dtype=vt.mu.dtype)

    def vjp(g):
        g = float(np.asarray(g).item())
        return g * mu, g * expit(rho) * (sigma - 1.0 / sigma)

    return record(out, (vt.mu, vt.rho), vjp)


def gaussian_activation(mean: Tensor, var: Tensor, noise: NoiseDraw) -> Tensor:
    """``mean + sqrt(var + 1e-10) * eps`` with a fixed ``eps`` per element."""
    eps = np.asarray(noise.eps)
    if eps.shape != mean.shape or var.shape != mean.shape:
        raise ShapeError("gaussian_activation: mean, var and eps shapes differ", dim="shape")
    eps = eps.astype(mean.dtype, copy=False)
    std = np.sqrt(var.data + mean.data.dtype.type(VARIANCE_FLOOR))
    out = Tensor(mean.data + std * eps, dtype=mean.dtype)
    return record(out, (mean, var), lambda g: (g, g * eps / (2.0 * std)))


# --------------------------------------------------------------------------- layers


class _BayesLayer:
    """Shared parameter handling for variational conv and dense layers."""

    kernel: VariationalTensor
    bias: Union[VariationalTensor, Tensor, None]

    def _init_bias(self, n_out, rng, variational_bias, rho_init, name):
        if variational_bias:
            return VariationalTensor.init((n_out,), 1, rng, rho_init, zero_mean=True,
                                          name=f"{name}.bias")
        return Tensor(np.zeros(n_out, dtype=np.float32), requires_grad=True, name=f"{name}.bias")

    @property
    def variational_bias(self) -> bool:
        return isinstance(self.bias, VariationalTensor)

    def posteriors(self) -> Dict[str, VariationalTensor]:
        out = {"kernel": self.kernel}
        if self.variational_bias:
            out["bias"] = self.bias
        return out

    def parameters(self) -> Dict[str, Tensor]:
        params = {f"{self.name}.kernel.mu": self.kernel.mu,
                  f"{self.name}.kernel.rho": self.kernel.rho}
        if self.variational_bias:
            params[f"{self.name}.bias.mu"] = self.bias.mu
            params[f"{self.name}.bias.rho"] = self.bias.rho
        elif self.bias is not None:
            params[f"{self.name}.bias"] = self.bias
        return params

    def n_mean_params(self) -> int:
        n = self.kernel.mu.size
        if self.bias is not None:
            n += self.bias.mu.size if self.variational_bias else self.bias.size
        return n


def _bayes_forward(layer: _BayesLayer, x: Tensor, mode, noise: Optional[NoiseSource], op,
                   prior: PriorSpec, with_kl: bool) -> Tuple[Tensor, Optional[Tensor]]:
    mode = SamplingMode.parse(mode)
    kernel, bias = layer.kernel, layer.bias
    vbias = isinstance(bias, VariationalTensor)

    if mode is SamplingMode.MEAN_ONLY:
        b = None if bias is None else (bias.mu if vbias else bias)
        return op(x, kernel.mu, b), None

    if noise is None:
        raise ValueError(f"mode {mode.value!r} needs a noise source")

    if mode is SamplingMode.WEIGHT_SAMPLE:
        w = sample_weights(kernel, noise.draw(kernel.shape))
        kl = kl_mc_terms(kernel, w, prior) if with_kl else None
        if vbias:
            b = sample_weights(bias, noise.draw(bias.shape))
            if with_kl:
                kl = ops.add(kl, kl_mc_terms(bias, b, prior))
        else:
            b = bias
        return op(x, w, b), kl

    # local reparameterization: sample pre-activations, not weights
    sigma2_k = ops.square(ops.softplus(kernel.rho))
    if vbias:
        m = op(x, kernel.mu, bias.mu)
        v = op(ops.square(x), sigma2_k, ops.square(ops.softplus(bias.rho)))
    else:
        m = op(x, kernel.mu, bias)
        v = op(ops.square(x), sigma2_k, None)
    out = gaussian_activation(m, v, noise.draw(m.shape))
    kl = None
    if with_kl:
        kl = kl_closed_form(kernel, prior)
        if vbias:
            kl = ops.add(kl, kl_closed_form(bias, prior))
    return out, kl


class BayesConv1d(_BayesLayer):
    """1-D convolution whose kernel (and optionally bias) is a Gaussian posterior."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, rng: Optional[np.random.Generator] = None,
                 variational_bias: bool = True, rho_init: float = RHO_INIT, name: str = "conv"):
        rng = np.random.default_rng() if rng is None else rng
        self.name = name
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        fan_in = in_channels * kernel_size
        self.kernel = VariationalTensor.init((out_channels, in_channels, kernel_size), fan_in, rng,
                                             rho_init, name=f"{name}.kernel")
        self.bias = self._init_bias(out_channels, rng, variational_bias, rho_init, name)

    def forward(self, x: Tensor, mode="mean-only", noise=None, prior=STANDARD_NORMAL,
                with_kl: bool = True):
        return bayes_conv1d_forward(self, x, mode, noise, prior, with_kl)


class BayesDense(_BayesLayer):
    """Fully connected layer with Gaussian posteriors over weight and bias."""

    def __init__(self, in_features: int, out_features: int,
                 rng: Optional[np.random.Generator] = None, variational_bias: bool = True,
                 rho_init: float = RHO_INIT, name: str = "dense"):
        rng = np.random.default_rng() if rng is None else rng
        self.name = name
        self.in_features, self.out_features = in_features, out_features
        self.kernel = VariationalTensor.init((out_features, in_features), in_features, rng,
                                             rho_init, name=f"{name}.kernel")
        self.bias = self._init_bias(out_features, rng, variational_bias, rho_init, name)

    def forward(self, x: Tensor, mode="mean-only", noise=None, prior=STANDARD_NORMAL,
                with_kl: bool = True):
        return bayes_dense_forward(self, x, mode, noise, prior, with_kl)


def bayes_conv1d_forward(layer: BayesConv1d, x: Tensor, mode="mean-only",
                         noise: Optional[NoiseSource] = None, prior: PriorSpec = STANDARD_NORMAL,
                         with_kl: bool = True) -> Tuple[Tensor, Optional[Tensor]]:
    """Run a variational convolution; returns ``(output, kl_term or None)``.

    The KL term is the Monte-Carlo estimate for the weights actually drawn in
    ``weight-sample`` mode, the closed form in ``local-reparam`` mode and
    ``None`` in ``mean-only`` mode.
    """
    op = partial(conv1d, stride=layer.stride, padding=layer.padding)
    return _bayes_forward(layer, x, mode, noise, op, prior, with_kl)


def bayes_dense_forward(layer: BayesDense, x: Tensor, mode="mean-only",
                        noise: Optional[NoiseSource] = None, prior: PriorSpec = STANDARD_NORMAL,
                        with_kl: bool = True) -> Tuple[Tensor, Optional[Tensor]]:
    """Dense counterpart of :func:`bayes_conv1d_forward`."""
    return _bayes_forward(layer, x, mode, noise, dense, prior, with_kl)
