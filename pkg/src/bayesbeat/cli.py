"""Command-line entry point: ``bayesbeat {gen-data,train,eval,predict,export-features}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure. Outputs are written only after a command succeeds.
"""
from __future__ import annotations

import argparse
import dataclasses
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__, kvconfig
from .bayeslayers import SamplingMode
from .dataio import SegmentSet, SynthSpec, dumps_segments, load_segments, split_subjects, synth_generate
from .errors import BayesBeatError, ConfigError, DataError, NumericError
from .inference import DEFAULT_DRAWS, ThresholdPolicy, predict_batch, write_predictions
from .metrics import sweep_csv, sweep_json, threshold_sweep
from .network import Checkpoint, NetworkConfig, build
from .trainer import TrainConfig, train

log = logging.getLogger("bayesbeat")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class InferenceConfig:
    mc_draws: int = DEFAULT_DRAWS
    threshold: Optional[float] = None
    batch_size: int = 256

    def validate(self) -> "InferenceConfig":
        if self.mc_draws < 1:
            raise ConfigError("infer.mc_draws must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("infer.batch_size must be >= 1")
        ThresholdPolicy(self.threshold)
        return self


@dataclass(frozen=True)
class RunConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    infer: InferenceConfig = field(default_factory=InferenceConfig)

    SECTIONS = ("synth.", "train.", "network.", "infer.")

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = kvconfig.parse_kv(text)
        unknown = [k for k in values if not k.startswith(cls.SECTIONS)]
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r} (expected a synth./train./network./infer. prefix)")
        return cls(
            synth=kvconfig.apply_kv(SynthSpec, values, prefix="synth."),
            train=kvconfig.apply_kv(TrainConfig, values, prefix="train."),
            network=kvconfig.apply_kv(NetworkConfig, values, prefix="network."),
            infer=kvconfig.apply_kv(InferenceConfig, values, prefix="infer."),
        )

    def with_flags(self, args) -> "RunConfig":
        cfg = self
        if getattr(args, "seed", None) is not None:
            cfg = dataclasses.replace(cfg, synth=dataclasses.replace(cfg.synth, seed=args.seed),
                                      train=dataclasses.replace(cfg.train, seed=args.seed))
        if getattr(args, "mode", None) is not None:
            cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, mode=SamplingMode.parse(args.mode)))
        if getattr(args, "mc_draws", None) is not None:
            cfg = dataclasses.replace(cfg, infer=dataclasses.replace(cfg.infer, mc_draws=args.mc_draws))
        if getattr(args, "threshold", None) is not None:
            cfg = dataclasses.replace(cfg, infer=dataclasses.replace(
                cfg.infer, threshold=ThresholdPolicy.parse(args.threshold).threshold))
        return cfg

    def validate(self) -> "RunConfig":
        self.synth.validate()
        self.train.validate()
        self.network.validate()
        self.infer.validate()
        return self

    def to_kv(self) -> Dict[str, object]:
        out: Dict[str, object] = {}
        for section, obj in (("synth.", self.synth), ("train.", self.train), ("network.", self.network),
                             ("infer.", self.infer)):
            out.update(kvconfig.to_kv(obj, section))
        return out


# --------------------------------------------------------------------------- helpers

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(args) -> RunConfig:
    text = ""
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    return RunConfig.from_text(text).with_flags(args).validate()


def _check_writable(path) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory) or not os.access(directory, os.W_OK):
        raise DataError(f"cannot write to {path}: directory {directory} is missing or not writable")


def _commit(outputs: Dict[str, str]) -> None:
    """Write every output to a temporary file first, then move all into place."""
    staged = []
    try:
        for path, text in outputs.items():
            tmp = f"{path}.partial-{os.getpid()}"
            with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
            staged.append((tmp, path))
        for tmp, path in staged:
            os.replace(tmp, path)
    except OSError as exc:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        raise DataError(f"cannot write outputs: {exc}") from None


def _load_set(path) -> SegmentSet:
    segments = load_segments(path)
    if not segments:
        raise DataError(f"{path} contains no segments")
    return SegmentSet.from_segments(segments)


def _load_checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None


# --------------------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    _check_writable(os.path.join(args.out, "x"))
    start = time.perf_counter()
    segments = synth_generate(cfg.synth)
    manifest = split_subjects(segments, seed=cfg.synth.seed)
    outputs = {os.path.join(args.out, f"{name}.bbseg"): dumps_segments(manifest.partition(segments, name))
               for name in ("train", "val", "test")}
    outputs[os.path.join(args.out, "manifest.json")] = manifest.to_json()
    outputs[os.path.join(args.out, "synth.cfg")] = kvconfig.dump_kv(cfg.synth.to_kv())
    _commit(outputs)
    counts = {n: len(manifest.partition(segments, n)) for n in ("train", "val", "test")}
    log.info("generated %d segments %s in %.1fs", len(segments), counts, time.perf_counter() - start)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    train_set, val_set = _load_set(args.train), _load_set(args.val)
    _check_writable(args.out)
    run_log_path = args.run_log or args.out + ".log.jsonl"
    _check_writable(run_log_path)
    run_log = io.StringIO()
    run_log.write(json.dumps({"config": {k: kvconfig.format_value(v) for k, v in cfg.to_kv().items()
                                         if k.startswith(("train.", "network."))}}) + "\n")

    def echo(report):
        log.info("epoch %d nll %.4f kl %.4g val_f1 %.4f%s", report.epoch, report.nll, report.kl_weighted,
                 report.val["f1"], " (best)" if report.best else "")

    net = build(cfg.network, seed=cfg.train.seed)
    log.info("network: %d parameters; training %d segments, validating on %d", net.n_params,
             len(train_set), len(val_set))
    result = train(net, train_set, val_set, cfg.train, run_log=run_log, on_epoch=echo)
    blob = result.checkpoint.to_bytes()
    staged = args.out + f".partial-{os.getpid()}"
    try:
        with open(staged, "wb") as fh:
            fh.write(blob)
        _commit({run_log_path: run_log.getvalue()})
        os.replace(staged, args.out)
    finally:
        if os.path.exists(staged):
            os.unlink(staged)
    log.info("best epoch %d, validation F1 %.4f -> %s", result.best_epoch,
             result.reports[result.best_epoch - 1].val["f1"], args.out)
    return EXIT_OK


def _predictions(args, cfg: RunConfig, data: SegmentSet):
    net = _load_checkpoint(args.checkpoint).network()
    return predict_batch(net, data.x, cfg.infer.mc_draws, cfg.train.seed, ThresholdPolicy(cfg.infer.threshold),
                         data.ids, cfg.infer.batch_size, args.threads)


def _parse_thresholds(text: str) -> List[Optional[float]]:
    values = [ThresholdPolicy.parse(t).threshold for t in text.split(",") if t.strip()]
    if not values:
        raise ConfigError("no thresholds given")
    return values


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    thresholds = _parse_thresholds(args.thresholds)
    data = _load_set(args.data)
    if np.any(data.labels < 0):
        raise DataError(f"{args.data} contains unlabelled segments; eval needs labels")
    _check_writable(args.out + ".json")
    preds = _predictions(args, cfg, data)
    reports = threshold_sweep(preds, data.labels, thresholds)
    u = np.array([p.u_scalar for p in preds])
    summary = {"reports": json.loads(sweep_json(reports)), "n_segments": len(preds),
               "mc_draws": cfg.infer.mc_draws}
    if np.all(np.isfinite(data.noise)):
        clean, heavy = data.noise <= 0.1, data.noise >= 0.7
        summary["mean_u_scalar"] = {
            "noise_le_0.1": float(u[clean].mean()) if clean.any() else None,
            "noise_ge_0.7": float(u[heavy].mean()) if heavy.any() else None,
        }
    _commit({args.out + ".json": json.dumps(summary, indent=2, sort_keys=True) + "\n",
             args.out + ".csv": sweep_csv(reports)})
    for r in reports:
        log.info("threshold %s: abstain %.3f f1 %.4f mcc %.4f auc %.4f", r.threshold, r.abstention_rate,
                 r.f1, r.mcc, r.auc)
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    data = _load_set(args.data)
    _check_writable(args.out)
    preds = _predictions(args, cfg, data)
    buf = io.StringIO()
    write_predictions(preds, buf)
    _commit({args.out: buf.getvalue()})
    log.info("%d predictions, %d abstained -> %s", len(preds), sum(not p.accepted for p in preds), args.out)
    return EXIT_OK


def cmd_export_features(args) -> int:
    _load_config(args)
    data = _load_set(args.data)
    _check_writable(args.out)
    net = _load_checkpoint(args.checkpoint).network()
    feats = net.penultimate_features(data.x)
    lines = ["segment_id,label," + ",".join(f"f{j}" for j in range(feats.shape[1]))]
    for sid, label, row in zip(data.ids, data.labels, feats):
        lines.append(f"{sid},{label}," + ",".join("%.9g" % v for v in row))
    _commit({args.out: "\n".join(lines) + "\n"})
    log.info("exported %s features -> %s", feats.shape, args.out)
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file (synth./train./network./infer. keys)")
    common.add_argument("--seed", type=int, help="single seed for generation, training and inference")
    common.add_argument("--threads", type=int, default=1, help="worker threads for inference draws")
    common.add_argument("--mc-draws", type=int, dest="mc_draws", help="posterior draws per prediction")
    common.add_argument("--threshold", help="uncertainty threshold for acceptance, or 'none'")
    common.add_argument("--mode", choices=[m.value for m in SamplingMode if m is not SamplingMode.MEAN_ONLY],
                        help="training-time sampling mode")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="bayesbeat", description="Variational CNN for AF detection from PPG segments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset and split it")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train and keep the best validation checkpoint")
    p.add_argument("--train", required=True, help="training segment file")
    p.add_argument("--val", required=True, help="validation segment file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--run-log", dest="run_log", help="JSON-lines run log (default: <out>.log.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="metrics over a threshold sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--thresholds", default="none,0.05,0.01", help="comma-separated, descending")
    p.add_argument("--out", required=True, help="output prefix for .json and .csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="JSON-lines predictions with uncertainty")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-features", parents=[common], help="penultimate-layer features as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_features)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"bayesbeat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return args.func(args)
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_USAGE
    except (DataError, BayesBeatError, ValueError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
