"""Segments, preprocessing, subject-disjoint splits, a synthetic PPG generator and file I/O.

A segment is 25 s of pulse signal at 32 Hz (800 samples), scaled to [0, 1].
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal

from . import kvconfig
from .errors import ConfigError, DataError

TARGET_RATE = 32
DURATION_S = 25
SEGMENT_LENGTH = TARGET_RATE * DURATION_S
SOURCE_RATES = (128, 32)
BAND_HZ = (0.5, 8.0)
FILTER_ORDER = 2
PAD_SAMPLES = 8 * TARGET_RATE
PARTITIONS = ("train", "val", "test")

_BANDPASS = signal.butter(FILTER_ORDER, BAND_HZ, btype="bandpass", fs=TARGET_RATE, output="sos")


@dataclass
class Segment:
    samples: np.ndarray
    subject_id: str
    label: Optional[int] = None
    noise_level: Optional[float] = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.shape != (SEGMENT_LENGTH,):
            raise DataError(f"segment must have {SEGMENT_LENGTH} samples, got shape {self.samples.shape}")
        if self.label is not None and self.label not in (0, 1):
            raise DataError(f"label must be 0, 1 or None, got {self.label}")

    def __eq__(self, other):
        if not isinstance(other, Segment):
            return NotImplemented
        same_noise = (self.noise_level == other.noise_level
                      or (self.noise_level is not None and other.noise_level is not None
                          and math.isnan(self.noise_level) and math.isnan(other.noise_level)))
        return (self.subject_id == other.subject_id and self.label == other.label and same_noise
                and np.array_equal(self.samples, other.samples))


@dataclass
class SegmentSet:
    """Array view of a list of segments, as consumed by training and inference."""

    x: np.ndarray
    labels: np.ndarray
    subjects: List[str]
    noise: np.ndarray
    ids: List[str]

    @classmethod
    def from_segments(cls, segments: Sequence[Segment], ids: Optional[Sequence[str]] = None) -> "SegmentSet":
        x = (np.stack([s.samples for s in segments]) if segments
             else np.zeros((0, SEGMENT_LENGTH), dtype=np.float32))
        labels = np.array([-1 if s.label is None else s.label for s in segments], dtype=np.int64)
        noise = np.array([np.nan if s.noise_level is None else s.noise_level for s in segments])
        ids = [str(i) for i in range(len(segments))] if ids is None else list(ids)
        return cls(x, labels, [s.subject_id for s in segments], noise, ids)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask) -> "SegmentSet":
        idx = np.flatnonzero(mask)
        return SegmentSet(self.x[idx], self.labels[idx], [self.subjects[i] for i in idx],
                          self.noise[idx], [self.ids[i] for i in idx])


# --------------------------------------------------------------------------- preprocessing

def preprocess(raw, source_rate: int) -> np.ndarray:
    """Resample to 32 Hz, bandpass 0.5-8 Hz (zero phase) and min-max scale to [0, 1].

    128 Hz input is low-pass filtered and decimated by 4. A constant signal maps
    to all 0.5.
    """
    if source_rate not in SOURCE_RATES:
        raise DataError(f"source rate must be one of {SOURCE_RATES} Hz, got {source_rate}")
    x = np.asarray(raw, dtype=np.float64)
    expected = source_rate * DURATION_S
    if x.shape != (expected,):
        raise DataError(f"expected {expected} samples ({DURATION_S} s at {source_rate} Hz), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("input contains non-finite samples")
    if source_rate != TARGET_RATE:
        x = signal.decimate(x, source_rate // TARGET_RATE, ftype="iir", zero_phase=True)
    # long odd-extension padding keeps edge transients small
    y = signal.sosfiltfilt(_BANDPASS, x, padlen=PAD_SAMPLES)
    lo, hi = y.min(), y.max()
    scale = max(np.abs(x).max(), 1.0)
    if hi - lo <= 1e-9 * scale:
        return np.full(SEGMENT_LENGTH, 0.5, dtype=np.float32)
    return ((y - lo) / (hi - lo)).astype(np.float32)


# --------------------------------------------------------------------------- synthetic generator

@dataclass(frozen=True)
class SynthSpec:
    n_segments: int = 4000
    n_subjects: int = 50
    af_fraction: float = 0.4
    hr_range: Tuple[float, float] = (55.0, 95.0)  # NSR beats per minute
    af_hr_range: Tuple[float, float] = (70.0, 120.0)
    nsr_jitter: float = 0.02  # max relative RR deviation
    af_cv: float = 0.30  # RR coefficient of variation before clipping
    rr_bounds: Tuple[float, float] = (0.33, 1.6)  # seconds
    # noise mixture; each component is scaled by the segment's noise_level
    wander_amplitude: float = 1.0
    motion_amplitude: float = 3.0  # scaled by noise_level squared
    spike_rate: float = 0.3  # per second
    contact_loss_prob: float = 0.6
    gaussian_sigma: float = 0.6
    # probabilities of clean (<= 0.1), moderate and heavy (>= 0.7) noise levels
    noise_mix: Tuple[float, float, float] = (0.4, 0.3, 0.3)
    source_rate: int = 128
    seed: int = 0

    def errors(self) -> List[str]:
        out = []
        if self.n_segments < 1:
            out.append("n_segments must be >= 1")
        if self.n_subjects < 1 or self.n_subjects > self.n_segments:
            out.append("n_subjects must lie in 1..n_segments")
        if not 0 <= self.af_fraction <= 1:
            out.append("af_fraction must lie in [0, 1]")
        for name in ("hr_range", "af_hr_range", "rr_bounds"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                out.append(f"{name} must satisfy 0 < low <= high")
        if not 0 <= self.nsr_jitter <= 0.03:
            out.append("nsr_jitter must lie in [0, 0.03]")
        if not self.af_cv >= 0.15:
            out.append("af_cv must be >= 0.15")
        for name in ("wander_amplitude", "motion_amplitude", "spike_rate", "gaussian_sigma"):
            if not getattr(self, name) >= 0:
                out.append(f"{name} must be >= 0")
        if not 0 <= self.contact_loss_prob <= 1:
            out.append("contact_loss_prob must lie in [0, 1]")
        mix = self.noise_mix
        if len(mix) != 3 or any(p < 0 for p in mix) or abs(sum(mix) - 1) > 1e-9:
            out.append("noise_mix must be three non-negative probabilities summing to 1")
        if self.source_rate not in SOURCE_RATES:
            out.append(f"source_rate must be one of {SOURCE_RATES}")
        return out

    def validate(self) -> "SynthSpec":
        problems = self.errors()
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_kv(self, prefix: str = "synth.") -> Dict[str, object]:
        return kvconfig.to_kv(self, prefix)

    @classmethod
    def from_kv(cls, values, prefix: str = "synth.", base=None) -> "SynthSpec":
        return kvconfig.apply_kv(cls, values, base, prefix).validate()


def pulse_template(t: np.ndarray, dicrotic: float = 0.4, width: float = 1.0) -> np.ndarray:
    """Asymmetric double bump: a sharp systolic peak followed by a smaller, wider dicrotic wave."""
    systolic = np.exp(-0.5 * ((t - 0.14 * width) / (0.045 * width)) ** 2)
    dicrotic_wave = dicrotic * np.exp(-0.5 * ((t - 0.36 * width) / (0.075 * width)) ** 2)
    return np.where(t >= 0, systolic + dicrotic_wave, 0.0)


def rr_intervals(rng: np.random.Generator, af: bool, mean_rr: float, spec: SynthSpec,
                 duration: float) -> np.ndarray:
    """Beat intervals covering ``duration`` seconds plus a one-beat lead-in."""
    n = int(duration / spec.rr_bounds[0]) + 4
    if af:
        sigma = math.sqrt(math.log1p(spec.af_cv ** 2))
        rr = mean_rr * rng.lognormal(-0.5 * sigma ** 2, sigma, n)
        rr = np.clip(rr, *spec.rr_bounds)
    else:
        rr = mean_rr * (1 + rng.uniform(-spec.nsr_jitter, spec.nsr_jitter, n))
    return rr


def _beat_train(rng, af, mean_rr, dicrotic, width, spec, fs):
    t = np.arange(fs * DURATION_S) / fs
    rr = rr_intervals(rng, af, mean_rr, spec, DURATION_S)
    onsets = -rng.uniform(0, rr[0]) + np.concatenate([[0.0], np.cumsum(rr)])
    onsets = onsets[onsets < DURATION_S]
    x = np.zeros_like(t)
    for onset in onsets:
        lo = max(int(onset * fs), 0)
        hi = min(int((onset + 0.9 * width) * fs) + 1, t.size)
        x[lo:hi] += pulse_template(t[lo:hi] - onset, dicrotic, width)
    return x


def _noise(rng, level, spec, fs):
    n = fs * DURATION_S
    t = np.arange(n) / fs
    out = np.zeros(n)
    if level <= 0:
        return out
    for _ in range(2):
        f = rng.uniform(0.05, 0.6)
        out += spec.wander_amplitude * level * rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    # band-limited motion artifact in the pulse band, active over random stretches
    white = rng.standard_normal(n)
    motion = signal.sosfiltfilt(signal.butter(2, (0.7, 3.5), btype="bandpass", fs=fs, output="sos"), white)
    motion /= motion.std() + 1e-12
    gate = np.zeros(n)
    n_bursts = rng.poisson(1 + 6 * level)
    for _ in range(n_bursts):
        start = rng.uniform(0, DURATION_S)
        length = rng.uniform(3, 12)
        gate[int(start * fs):int(min(start + length, DURATION_S) * fs)] = 1.0
    gate = np.convolve(gate, np.hanning(fs) / np.hanning(fs).sum(), mode="same")
    out += spec.motion_amplitude * level ** 2 * gate * motion
    for _ in range(rng.poisson(spec.spike_rate * level * DURATION_S)):
        c = rng.integers(0, n)
        w = max(int(rng.uniform(0.03, 0.15) * fs), 1)
        out[c:c + w] += rng.choice([-1.0, 1.0]) * rng.uniform(1, 3) * level
    out += spec.gaussian_sigma * level * rng.standard_normal(n)
    return out


def _apply_contact_loss(rng, x, level, spec, fs):
    if rng.random() < spec.contact_loss_prob * level ** 2:
        length = rng.uniform(1, 6)
        start = rng.uniform(0, DURATION_S - length)
        lo, hi = int(start * fs), int((start + length) * fs)
        x[lo:hi] = x[lo] + 0.02 * rng.standard_normal(hi - lo)
    return x


def _noise_level(rng, mix) -> float:
    tier = rng.choice(3, p=np.asarray(mix, dtype=np.float64))
    return float(rng.uniform(*((0.0, 0.1), (0.1, 0.7), (0.7, 1.0))[tier]))


def subject_name(i: int) -> str:
    return f"s{i:03d}"


def synth_generate(spec: SynthSpec = SynthSpec()) -> List[Segment]:
    """Deterministic synthetic AF/NSR pulse segments, preprocessed to 32 Hz [0, 1].

    Every subject gets the same AF share (rounded), so any subject-level split
    preserves the class ratio.
    """
    spec.validate()
    fs = spec.source_rate
    per_subject = np.full(spec.n_subjects, spec.n_segments // spec.n_subjects)
    per_subject[:spec.n_segments % spec.n_subjects] += 1
    segments: List[Segment] = []
    for s, count in enumerate(per_subject):
        rng = np.random.default_rng([spec.seed, s])
        hr = rng.uniform(*spec.hr_range)
        af_hr = rng.uniform(*spec.af_hr_range)
        dicrotic = rng.uniform(0.3, 0.5)
        width = rng.uniform(0.85, 1.15)
        n_af = int(round(spec.af_fraction * count))
        labels = rng.permutation(np.r_[np.ones(n_af, dtype=int), np.zeros(count - n_af, dtype=int)])
        for label in labels:
            af = bool(label)
            level = _noise_level(rng, spec.noise_mix)
            mean_rr = 60.0 / (af_hr if af else hr * rng.uniform(0.97, 1.03))
            clean = _beat_train(rng, af, mean_rr, dicrotic, width, spec, fs)
            raw = clean * rng.uniform(0.5, 2.0) + _noise(rng, level, spec, fs)
            raw = _apply_contact_loss(rng, raw, level, spec, fs)
            segments.append(Segment(preprocess(raw, fs), subject_name(s), int(label), level))
    return segments


# --------------------------------------------------------------------------- splitting

@dataclass
class SplitManifest:
    assignment: Dict[str, str]
    fractions: Tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0

    def subjects(self, partition: str) -> List[str]:
        return sorted(s for s, p in self.assignment.items() if p == partition)

    def partition(self, segments: Sequence[Segment], name: str) -> List[Segment]:
        if name not in PARTITIONS:
            raise DataError(f"unknown partition {name!r}")
        return [seg for seg in segments if self.assignment.get(seg.subject_id) == name]

    def to_json(self) -> str:
        return json.dumps({"assignment": self.assignment, "fractions": list(self.fractions),
                           "seed": self.seed}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        return cls(dict(d["assignment"]), tuple(d["fractions"]), int(d["seed"]))


def split_subjects(segments: Iterable, fractions: Sequence[float] = (0.70, 0.15, 0.15),
                   seed: int = 0) -> SplitManifest:
    """Seeded subject-level train/val/test partition.

    ``segments`` may be :class:`Segment` objects or plain subject ids.
    """
    ids = sorted({s.subject_id if isinstance(s, Segment) else str(s) for s in segments})
    if len(ids) < 3:
        raise DataError(f"need at least 3 subjects to split, got {len(ids)}")
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1) > 1e-6:
        raise ConfigError("fractions must be three positive numbers summing to 1")
    order = np.random.default_rng(seed).permutation(len(ids))
    n = len(ids)
    n_val = max(1, int(round(fr[1] * n)))
    n_test = max(1, int(round(fr[2] * n)))
    n_train = n - n_val - n_test
    if n_train < 1:
        n_train, n_val, n_test = 1, 1, n - 2
    names = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    return SplitManifest({ids[i]: names[k] for k, i in enumerate(order)}, fr, seed)


# --------------------------------------------------------------------------- file format

HEADER_PREFIX = "bbseg v1 n="


def _format_record(seg: Segment) -> str:
    if any(c in seg.subject_id for c in ",\n\r") or not seg.subject_id:
        raise DataError(f"subject id {seg.subject_id!r} must be non-empty without commas or newlines")
    label = -1 if seg.label is None else seg.label
    noise = "nan" if seg.noise_level is None else repr(float(seg.noise_level))
    values = ",".join("%.9g" % v for v in seg.samples)
    return f"{seg.subject_id},{label},{noise},{values}\n"


def dumps_segments(segments: Sequence[Segment]) -> str:
    return HEADER_PREFIX + str(len(segments)) + "\n" + "".join(_format_record(s) for s in segments)


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_segments(segments: Sequence[Segment], path) -> None:
    atomic_write_text(path, dumps_segments(segments))


def _parse_record(line: str, index: int) -> Segment:
    parts = line.rstrip("\r\n").split(",")
    if len(parts) != 3 + SEGMENT_LENGTH:
        raise DataError(f"record {index}: expected {3 + SEGMENT_LENGTH} fields, got {len(parts)}")
    try:
        label = int(parts[1])
        noise = float(parts[2])
        samples = np.array(parts[3:], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"record {index}: {exc}") from None
    if label not in (-1, 0, 1):
        raise DataError(f"record {index}: label must be -1, 0 or 1, got {label}")
    if not np.all(np.isfinite(samples)):
        raise DataError(f"record {index}: non-finite sample")
    return Segment(samples.astype(np.float32), parts[0], None if label == -1 else label,
                   None if math.isnan(noise) else noise)


def loads_segments(text: str) -> List[Segment]:
    if text == "":
        return []
    lines = text.split("\n")
    header = lines[0].strip()
    if not header.startswith(HEADER_PREFIX):
        raise DataError(f"bad header {header[:40]!r}; expected '{HEADER_PREFIX}<count>'")
    try:
        count = int(header[len(HEADER_PREFIX):])
    except ValueError:
        raise DataError(f"bad record count in header {header!r}") from None
    body = lines[1:]
    if body and body[-1] == "":
        body = body[:-1]
    elif body:
        raise DataError(f"record {len(body) - 1}: truncated (missing line terminator)")
    if len(body) != count:
        raise DataError(f"header declares {count} records, found {len(body)} (record {min(count, len(body))} missing)")
    return [_parse_record(line, i) for i, line in enumerate(body)]


def load_segments(path) -> List[Segment]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read segment file {path}: {exc}") from None
    return loads_segments(text)
