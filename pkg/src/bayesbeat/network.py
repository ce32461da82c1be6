"""The BayesBeat network: nine variational conv stages and a variational dense head.

Stage ``i`` runs ``conv -> [batchnorm] -> softplus -> [maxpool]``. The first
three stages pool, the last six normalize. Time is then averaged away, and
softplus-activated dense layers lead to two logits.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import kvconfig
from .bayeslayers import (
    RHO_INIT,
    STANDARD_NORMAL,
    BayesConv1d,
    BayesDense,
    NoiseSource,
    PriorSpec,
    SamplingMode,
)
from .diffcore import RunningStats, Tensor, batchnorm1d, maxpool1d, mean_last, ops, softplus
from .errors import ConfigError, DataError, ShapeError

PARAM_BUDGET = (162_000, 198_000)
N_STAGES = 9
N_POOL_STAGES = 3


@dataclass(frozen=True)
class NetworkConfig:
    conv_widths: Tuple[int, ...] = (16, 32, 48, 48, 64, 64, 80, 96, 96)
    kernel_sizes: Tuple[int, ...] = (7, 7, 7, 5, 5, 5, 5, 5, 5)
    pool_windows: Tuple[int, ...] = (2, 2, 2, 0, 0, 0, 0, 0, 0)
    batchnorm: Tuple[bool, ...] = (False, False, False, True, True, True, True, True, True)
    dense_widths: Tuple[int, ...] = (64,)
    n_classes: int = 2
    input_length: int = 800
    variational_bias: bool = True
    rho_init: float = RHO_INIT
    # strict=False admits reduced test/desk configs; it skips the architecture rules only
    strict: bool = True

    @property
    def n_stages(self) -> int:
        return len(self.conv_widths)

    def structural_errors(self) -> List[str]:
        errs = []
        n = self.n_stages
        for name in ("kernel_sizes", "pool_windows", "batchnorm"):
            if len(getattr(self, name)) != n:
                errs.append(f"{name} has {len(getattr(self, name))} entries for {n} conv stages")
        if n < 1:
            errs.append("at least one conv stage is required")
        if any(w < 1 for w in self.conv_widths + self.dense_widths):
            errs.append("all widths must be >= 1")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            errs.append("kernel sizes must be odd and >= 1 (same padding)")
        if any(p < 0 for p in self.pool_windows):
            errs.append("pool windows must be >= 0")
        if self.n_classes != 2:
            errs.append("n_classes must be 2")
        length = self.input_length
        for p in self.pool_windows[:n]:
            if p:
                length //= p
        if length < 1:
            errs.append(f"input_length {self.input_length} is pooled away to nothing")
        return errs

    def architecture_errors(self) -> List[str]:
        errs = []
        if self.n_stages != N_STAGES:
            errs.append(f"exactly {N_STAGES} conv stages required, got {self.n_stages}")
            return errs
        if not all(p > 0 for p in self.pool_windows[:N_POOL_STAGES]):
            errs.append("stages 1-3 must have maxpool")
        if any(p > 0 for p in self.pool_windows[N_POOL_STAGES:]):
            errs.append("stages 4-9 must not pool")
        if any(self.batchnorm[:N_POOL_STAGES]):
            errs.append("stages 1-3 must not use batchnorm")
        if not all(self.batchnorm[N_POOL_STAGES:]):
            errs.append("stages 4-9 must use batchnorm")
        if not self.structural_errors():
            n = count_parameters(self)
            if not PARAM_BUDGET[0] <= n <= PARAM_BUDGET[1]:
                errs.append(f"parameter count {n} outside budget {PARAM_BUDGET}")
        return errs

    def validate(self) -> "NetworkConfig":
        errs = self.structural_errors()
        if self.strict and not errs:
            errs = self.architecture_errors()
        if errs:
            raise ConfigError("invalid network config: " + "; ".join(errs))
        return self

    def to_kv(self, prefix: str = "network.") -> Dict[str, object]:
        return kvconfig.to_kv(self, prefix)

    @classmethod
    def from_kv(cls, values: Mapping[str, str], prefix: str = "network.") -> "NetworkConfig":
        return kvconfig.apply_kv(cls, values, prefix=prefix)


def tiny_config(n_stages: int = 2, width: int = 8, input_length: int = 32) -> NetworkConfig:
    """Reduced non-strict config for gradient checks and smoke runs."""
    return NetworkConfig(
        conv_widths=(width,) * n_stages,
        kernel_sizes=(3,) * n_stages,
        pool_windows=(2,) + (0,) * (n_stages - 1),
        batchnorm=(False,) + (True,) * (n_stages - 1),
        dense_widths=(width,),
        input_length=input_length,
        strict=False,
    )


def count_parameters(config: NetworkConfig) -> int:
    """Mean parameters of every layer plus batchnorm scale/shift (rho not counted)."""
    n, c_in = 0, 1
    for width, k, bn in zip(config.conv_widths, config.kernel_sizes, config.batchnorm):
        n += c_in * width * k + width + (2 * width if bn else 0)
        c_in = width
    for width in config.dense_widths + (config.n_classes,):
        n += c_in * width + width
        c_in = width
    return n


@dataclass
class _BatchNorm:
    gamma: Tensor
    beta: Tensor
    running: RunningStats


class Network:
    """A built BayesBeat network (parameters plus batchnorm running statistics)."""

    def __init__(self, config: NetworkConfig, seed: int = 0, prior: PriorSpec = STANDARD_NORMAL):
        self.config = config.validate()
        self.seed = seed
        self.prior = prior
        rng = np.random.default_rng(seed)
        self.convs: List[BayesConv1d] = []
        self.norms: Dict[int, _BatchNorm] = {}
        c_in = 1
        for i, (w, k, bn) in enumerate(zip(config.conv_widths, config.kernel_sizes,
                                           config.batchnorm)):
            self.convs.append(BayesConv1d(c_in, w, k, padding=(k - 1) // 2, rng=rng,
                                          variational_bias=config.variational_bias,
                                          rho_init=config.rho_init, name=f"conv{i + 1}"))
            if bn:
                self.norms[i] = _BatchNorm(
                    Tensor(np.ones(w, dtype=np.float32), requires_grad=True, name=f"bn{i + 1}.gamma"),
                    Tensor(np.zeros(w, dtype=np.float32), requires_grad=True, name=f"bn{i + 1}.beta"),
                    RunningStats.init(w))
            c_in = w
        self.denses: List[BayesDense] = []
        for j, w in enumerate(config.dense_widths + (config.n_classes,)):
            self.denses.append(BayesDense(c_in, w, rng=rng, variational_bias=config.variational_bias,
                                          rho_init=config.rho_init, name=f"fc{j + 1}"))
            c_in = w

    # ----------------------------------------------------------------- parameters

    def _slots(self):
        """Yield ``(name, owner, attribute)`` for every trainable tensor."""
        def layer_slots(layer):
            yield f"{layer.name}.kernel.mu", layer.kernel, "mu"
            yield f"{layer.name}.kernel.rho", layer.kernel, "rho"
            if layer.variational_bias:
                yield f"{layer.name}.bias.mu", layer.bias, "mu"
                yield f"{layer.name}.bias.rho", layer.bias, "rho"
            else:
                yield f"{layer.name}.bias", layer, "bias"

        for i, conv in enumerate(self.convs):
            yield from layer_slots(conv)
            if i in self.norms:
                yield f"bn{i + 1}.gamma", self.norms[i], "gamma"
                yield f"bn{i + 1}.beta", self.norms[i], "beta"
        for layer in self.denses:
            yield from layer_slots(layer)

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((name, getattr(owner, attr)) for name, owner, attr in self._slots())

    def replace_parameters(self, tensors: Mapping[str, Tensor]) -> None:
        """Swap in new tensor objects by name (used by gradient oracles)."""
        slots = {name: (owner, attr) for name, owner, attr in self._slots()}
        for name, t in tensors.items():
            if name not in slots:
                raise KeyError(name)
            owner, attr = slots[name]
            setattr(owner, attr, t)

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        bufs: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for i, bn in self.norms.items():
            bufs[f"bn{i + 1}.running_mean"] = bn.running.mean
            bufs[f"bn{i + 1}.running_var"] = bn.running.var
        return bufs

    @property
    def n_params(self) -> int:
        n = sum(layer.n_mean_params() for layer in self.convs + self.denses)
        return n + sum(2 * bn.gamma.size for bn in self.norms.values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, t.data.copy()) for k, t in self.parameters().items())
        state.update((k, v.copy()) for k, v in self.buffers().items())
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        targets = OrderedDict((k, t.data) for k, t in self.parameters().items())
        targets.update(self.buffers())
        missing = set(targets) - set(state)
        extra = set(state) - set(targets)
        if missing or extra:
            raise DataError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, arr in targets.items():
            src = np.asarray(state[k])
            if src.shape != arr.shape:
                raise ShapeError(f"{k}: shape {src.shape} != {arr.shape}", dim=k)
            arr[...] = src

    def posterior_layers(self):
        return self.convs + self.denses

    # ----------------------------------------------------------------- forward

    def _check_input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        if x.data.ndim == 2:
            x = Tensor(x.data[:, None, :], dtype=x.dtype)
        if x.data.ndim != 3 or x.shape[1] != 1:
            raise ShapeError(f"expected input [B, 1, L], got {x.shape}", dim="input")
        if x.shape[2] != self.config.input_length:
            raise ShapeError(f"expected input length {self.config.input_length}, got {x.shape[2]}",
                             dim="length")
        return x

    def _trunk(self, x: Tensor, mode, noise, training, with_kl):
        mode = SamplingMode.parse(mode)
        kls = []
        h = self._check_input(x)
        for i, conv in enumerate(self.convs):
            h, kl = conv.forward(h, mode, noise, self.prior, with_kl)
            kls.append(kl)
            if i in self.norms:
                bn = self.norms[i]
                h = batchnorm1d(h, bn.gamma, bn.beta, bn.running, training=training)
            h = softplus(h)
            pool = self.config.pool_windows[i]
            if pool:
                h = maxpool1d(h, pool, pool)
        h = mean_last(h)
        for layer in self.denses[:-1]:
            h, kl = layer.forward(h, mode, noise, self.prior, with_kl)
            kls.append(kl)
            h = softplus(h)
        return h, kls, mode

    def forward(self, x, mode="mean-only", noise: Optional[NoiseSource] = None,
                training: bool = False, with_kl: bool = True) -> Tuple[Tensor, Tensor]:
        """Return ``(logits [B, 2], kl_draw_term)``.

        ``training`` selects batch statistics in batchnorm (and updates the
        running averages); ``mode`` selects how weights are treated. The KL
        term sums the per-layer terms for this draw and is zero in
        ``mean-only`` mode.
        """
        h, kls, mode = self._trunk(x, mode, noise, training, with_kl)
        logits, kl = self.denses[-1].forward(h, mode, noise, self.prior, with_kl)
        kls.append(kl)
        total = Tensor(np.zeros((), dtype=logits.dtype))
        for kl in kls:
            if kl is not None:
                total = ops.add(total, kl)
        return logits, total

    def recalibrate_batchnorm(self, x, batch_size: int = 256) -> None:
        """Replace running statistics by their average over mean-only passes on ``x``.

        Each chunk contributes equally; chunks must hold at least two segments.
        """
        x = self._check_input(x)
        if not self.norms:
            return
        starts = list(range(0, x.shape[0], batch_size))
        if len(starts) > 1 and x.shape[0] - starts[-1] < 2:
            starts.pop()
        bounds = starts + [x.shape[0]]
        saved = {i: bn.running.momentum for i, bn in self.norms.items()}
        try:
            for k, (a, b) in enumerate(zip(bounds, bounds[1:])):
                for bn in self.norms.values():
                    bn.running.momentum = 1.0 / (k + 1)
                self._trunk(Tensor(x.data[a:b]), "mean-only", None, True, False)
        finally:
            for i, bn in self.norms.items():
                bn.running.momentum = saved[i]

    def penultimate_features(self, x, batch_size: int = 256) -> np.ndarray:
        """Mean-only, eval-mode activations feeding the final classifier layer."""
        x = self._check_input(x)
        chunks = [self._trunk(Tensor(x.data[s:s + batch_size]), "mean-only", None, False, False)[0].data
                  for s in range(0, x.shape[0], batch_size)]
        if not chunks:
            return np.zeros((0, self.denses[-1].in_features), dtype=np.float32)
        return np.concatenate(chunks, axis=0)


def build(config: Optional[NetworkConfig] = None, seed: int = 0) -> Network:
    """Validate ``config`` (default: the BayesBeat plan) and initialize from ``seed``."""
    return Network(NetworkConfig() if config is None else config, seed)


# --------------------------------------------------------------------------- checkpoints

MAGIC = b"BBKT"
FORMAT_VERSION = 1
_DTYPE_F32 = 0


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    raw_name = name.encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name
    head += struct.pack("<BB", _DTYPE_F32, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


@dataclass
class Checkpoint:
    """Everything needed to rebuild a network (and optionally resume training)."""

    config: NetworkConfig
    tensors: "OrderedDict[str, np.ndarray]"
    meta: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_network(cls, net: Network, meta: Optional[Mapping[str, object]] = None,
                     extra_tensors: Optional[Mapping[str, np.ndarray]] = None) -> "Checkpoint":
        tensors = net.state_dict()
        if extra_tensors:
            tensors.update((k, np.array(v, dtype=np.float32)) for k, v in extra_tensors.items())
        m = {"seed": str(net.seed)}
        m.update({k: kvconfig.format_value(v) for k, v in (meta or {}).items()})
        return cls(net.config, tensors, m)

    def network(self) -> Network:
        net = Network(self.config, int(self.meta.get("seed", 0)))
        own = set(net.state_dict())
        net.load_state_dict({k: v for k, v in self.tensors.items() if k in own})
        return net

    def to_bytes(self) -> bytes:
        text = kvconfig.dump_kv(self.config.to_kv())
        text += kvconfig.dump_kv({f"meta.{k}": v for k, v in sorted(self.meta.items())})
        raw_text = text.encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", FORMAT_VERSION))
        buf.write(struct.pack("<I", len(raw_text)))
        buf.write(raw_text)
        buf.write(struct.pack("<I", len(self.tensors)))
        for name, arr in self.tensors.items():
            buf.write(_encode_tensor(name, arr))
        body = buf.getvalue()
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < 16 or blob[:4] != MAGIC:
            raise DataError("not a BBKT checkpoint (bad magic)")
        body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise DataError("checkpoint CRC32 mismatch (corrupt or truncated file)")
        view = memoryview(body)
        pos = 4
        (version,) = struct.unpack_from("<I", view, pos)
        pos += 4
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        (tlen,) = struct.unpack_from("<I", view, pos)
        pos += 4
        values = kvconfig.parse_kv(bytes(view[pos:pos + tlen]).decode("utf-8"))
        pos += tlen
        config = NetworkConfig.from_kv({k: v for k, v in values.items() if k.startswith("network.")})
        meta = {k[5:]: v for k, v in values.items() if k.startswith("meta.")}
        (count,) = struct.unpack_from("<I", view, pos)
        pos += 4
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        try:
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", view, pos)
                pos += 2
                name = bytes(view[pos:pos + nlen]).decode("utf-8")
                pos += nlen
                dtype, ndim = struct.unpack_from("<BB", view, pos)
                pos += 2
                if dtype != _DTYPE_F32:
                    raise DataError(f"{name}: unsupported dtype code {dtype}")
                shape = struct.unpack_from(f"<{ndim}I", view, pos)
                pos += 4 * ndim
                nbytes = 4 * int(np.prod(shape, dtype=np.int64))
                if pos + nbytes > len(view):
                    raise DataError(f"{name}: payload truncated")
                tensors[name] = np.frombuffer(view[pos:pos + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
                pos += nbytes
        except struct.error as exc:
            raise DataError(f"malformed checkpoint: {exc}") from None
        if pos != len(view):
            raise DataError("trailing bytes after tensor records")
        return cls(config, tensors, meta)

    def save(self, path) -> None:
        """Write atomically: a failed save never leaves a partial file behind."""
        path = os.fspath(path)
        directory = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".bbkt-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(self.to_bytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def save_checkpoint(net: Network, path, meta=None, extra_tensors=None) -> Checkpoint:
    ckpt = Checkpoint.from_network(net, meta, extra_tensors)
    ckpt.save(path)
    return ckpt


def load_network(path) -> Network:
    return Checkpoint.load(path).network()
