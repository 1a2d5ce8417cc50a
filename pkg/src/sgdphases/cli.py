"""Command-line front end: ``sgdphases {train,probe,spectrum,clean,figures}``.

Configuration files are plain ``key = value`` lines; ``#`` starts a comment.
Every key is optional.  Run ``sgdphases keys`` to list them with defaults.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .cleaner import CLEAN_MODES, CleanerConfig, clean_and_continue, write_report, write_snapshots_csv
from .data import NoisyDataset, corrupt_labels, load_bundled, load_idx, subset_per_class
from .ensemble import noise_covariance_spectrum, probe_order_params, probe_split_order_params
from .mathcore import PrngState
from .model import MlpConfig, load_checkpoint, save_checkpoint
from .trainer import (ORDER_COLUMNS, SPLIT_COLUMNS, STREAM_NOISE, STREAM_PROBE, STREAM_SPECTRUM,
                      STREAM_SPLIT, STREAM_SUBSET, TrainConfig, extract_timescales, format_value, train)

log = logging.getLogger("sgdphases")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
OUT_ENV = "SGDPHASES_OUT"


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs; field names double as config-file keys."""

    train_images: Optional[str] = None  # None: the bundled MNIST extract
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    n_classes: int = 10
    per_class: int = 400  # 0 keeps the whole training file
    rho: float = 0.0
    layer_sizes: tuple = (784, 30, 30, 10)
    activation: str = "relu"
    init: str = "fan_in_scaled"
    alpha: float = 0.01
    batch: int = 25
    epochs: int = 100
    seed: int = 0
    probe_every: int = 0
    probe_M: int = 200
    split_probes: bool = True
    spectrum_every: int = 0
    spectrum_M: int = 1000
    spectrum_layer: str = "W2"
    spectrum_coverage: float = 0.9
    snapshot_every: int = 0
    checkpoint_every: int = 0
    clean_mode: str = "clean_continue"
    threshold_rule: str = "midpoint"
    t_c_rule: str = "offline"
    patience: int = 5
    min_separation: float = 2.0
    n_jobs: int = 1
    output_dir: str = "out"

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")
        if self.per_class < 0:
            raise ConfigError("per_class must be >= 0")
        if self.clean_mode not in CLEAN_MODES:
            raise ConfigError(f"clean_mode must be one of {CLEAN_MODES}")
        paths = (self.train_images, self.train_labels, self.test_images, self.test_labels)
        if any(p is not None for p in paths[:2]) and None in paths[:2]:
            raise ConfigError("train_images and train_labels must be given together")
        if any(p is not None for p in paths[2:]) and None in paths[2:]:
            raise ConfigError("test_images and test_labels must be given together")
        try:
            self.model_config()
            self.train_config()
            self.cleaner_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def validate_paths(self) -> None:
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{name}: no such file: {p}")

    def model_config(self) -> MlpConfig:
        return MlpConfig(tuple(self.layer_sizes), self.activation, self.init)

    def train_config(self) -> TrainConfig:
        return TrainConfig(alpha=self.alpha, B=self.batch, epochs=self.epochs,
                           probe_every=self.probe_every, spectrum_every=self.spectrum_every,
                           seed=self.seed, snapshot_every=self.snapshot_every,
                           checkpoint_every=self.checkpoint_every, probe_M=self.probe_M,
                           split_probes=self.split_probes, spectrum_M=self.spectrum_M,
                           spectrum_layer=self.spectrum_layer,
                           spectrum_coverage=self.spectrum_coverage, n_jobs=self.n_jobs)

    def cleaner_config(self) -> CleanerConfig:
        return CleanerConfig(threshold_rule=self.threshold_rule, t_c_rule=self.t_c_rule,
                             patience=self.patience, min_separation=self.min_separation)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _parse_sizes(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _parse_path(text: str) -> Optional[str]:
    return None if text.lower() in ("", "bundled", "none") else text


_CONVERTERS = {int: ("an integer", int), float: ("a real number", float),
               bool: ("a boolean", _parse_bool), str: ("a string", str),
               tuple: ("a list of integers", _parse_sizes)}


def _field_kinds() -> dict:
    kinds = {}
    for f in dataclasses.fields(ExperimentConfig):
        t = f.type if isinstance(f.type, str) else f.type.__name__
        if t.startswith("Optional"):
            kinds[f.name] = ("a path", _parse_path)
        else:
            kinds[f.name] = _CONVERTERS[{"int": int, "float": float, "bool": bool,
                                          "str": str, "tuple": tuple}[t]]
    return kinds


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    kinds = _field_kinds()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        what, conv = kinds[key]
        try:
            values[key] = conv(value)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: invalid value for {key}: {value!r} "
                              f"(expected {what})") from None
    return ExperimentConfig(**values)


def parse_config(path) -> ExperimentConfig:
    """Read a ``key = value`` file; missing keys keep their defaults."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))


# -- data -----------------------------------------------------------------------

def load_datasets(cfg: ExperimentConfig, rho: Optional[float] = None):
    """Training set (subset and corrupted per ``cfg``) and the clean test set."""
    cfg.validate_paths()
    if cfg.train_images is None:
        train_raw = load_bundled("train")
    else:
        train_raw = load_idx(cfg.train_images, cfg.train_labels, cfg.n_classes)
    if cfg.test_images is None:
        test_raw = load_bundled("test")
    else:
        test_raw = load_idx(cfg.test_images, cfg.test_labels, cfg.n_classes)
    if cfg.per_class:
        train_raw = subset_per_class(train_raw, cfg.per_class, PrngState(cfg.seed, STREAM_SUBSET))
    rho = cfg.rho if rho is None else rho
    noisy = corrupt_labels(train_raw, rho, PrngState(cfg.seed, STREAM_NOISE))
    return noisy, NoisyDataset.clean(test_raw)


def output_dir(cfg: ExperimentConfig, override: Optional[str] = None) -> Path:
    out = Path(override or os.environ.get(OUT_ENV) or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format_value(v) for v in row) + "\n")


def write_spectrum_csv(spectrum, path) -> None:
    write_rows(path, ("rank", "eigenvalue", "cum_fraction"), spectrum.rows())


# -- commands ---------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, out: Path, args) -> int:
    noisy, test = load_datasets(cfg)
    result = train(cfg.train_config(), cfg.model_config(), noisy, test,
                   metrics_path=out / "metrics.csv",
                   checkpoint_dir=out / "checkpoints" if cfg.checkpoint_every else None)
    save_checkpoint(result.weights, out / "final.w")
    if result.snapshots:
        write_snapshots_csv(result.snapshots, out / "snapshots.csv")
    for epoch, spec in result.spectra.items():
        write_spectrum_csv(spec, out / f"spectrum_epoch_{epoch:05d}.csv")
    ts = extract_timescales(result.trajectory)
    last = result.trajectory[-1]
    print(f"epochs={last.epoch} L={last.L:.6g} eps_tr={last.eps_tr:.4f} eps_te={last.eps_te:.4f} "
          f"t_m={ts.t_m} t_f={ts.t_f}")
    return EXIT_OK


def _checkpoint(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    return load_checkpoint(args.checkpoint)


def cmd_probe(cfg: ExperimentConfig, out: Path, args) -> int:
    w = _checkpoint(args)
    noisy, _ = load_datasets(cfg)
    tag = args.tag
    order = probe_order_params(w, noisy, args.labels, cfg.batch, cfg.probe_M,
                               PrngState(cfg.seed, STREAM_PROBE).spawn(tag), n_jobs=cfg.n_jobs)
    row = order.as_row()
    if cfg.split_probes and 0 < noisy.n_corrupt < noisy.n:
        row.update(probe_split_order_params(w, noisy, cfg.batch, cfg.probe_M,
                                            PrngState(cfg.seed, STREAM_SPLIT).spawn(tag),
                                            n_jobs=cfg.n_jobs).as_row())
    cols = ORDER_COLUMNS + SPLIT_COLUMNS
    write_rows(out / "probe.csv", cols, [[row.get(c) for c in cols]])
    print(" ".join(f"{c}={format_value(row.get(c))}" for c in ORDER_COLUMNS))
    return EXIT_OK


def cmd_spectrum(cfg: ExperimentConfig, out: Path, args) -> int:
    w = _checkpoint(args)
    noisy, _ = load_datasets(cfg)
    spec = noise_covariance_spectrum(w, noisy, cfg.batch, cfg.spectrum_M, cfg.spectrum_layer,
                                     cfg.spectrum_coverage,
                                     PrngState(cfg.seed, STREAM_SPECTRUM).spawn(args.tag),
                                     n_jobs=cfg.n_jobs)
    write_spectrum_csv(spec, out / "spectrum.csv")
    print(f"layer={spec.layer_tag} n_s={len(spec.eigenvalues)} D={spec.D_total:.6g} D_s={spec.D_s}")
    return EXIT_OK


def cmd_clean(cfg: ExperimentConfig, out: Path, args) -> int:
    noisy, test = load_datasets(cfg)
    report = clean_and_continue(cfg.train_config(), cfg.model_config(), noisy, test,
                                cfg.clean_mode, cfg.cleaner_config())
    write_report(report, out / "clean_report.txt", out / "removed.csv")
    rows = {}
    for name in ("a_n", "a_c", "a_p"):
        for epoch, acc in report.curves[name]:
            rows.setdefault(epoch, {})[name] = acc
    write_rows(out / "clean_accuracy.csv", ("epoch", "a_n", "a_c", "a_p"),
               [[e, r.get("a_n"), r.get("a_c"), r.get("a_p")] for e, r in sorted(rows.items())])
    write_rows(out / "clean_gaps.csv", ("epoch", "m_c", "m_w", "r"), report.gaps)
    print(f"t_c={report.t_c} removed={report.removed} precision={report.precision:.4f} "
          f"a_n={report.a_n:.4f} a_c={report.a_c:.4f} a_p={report.a_p:.4f} Q={format_value(report.Q)}")
    return EXIT_OK


def cmd_figures(cfg: ExperimentConfig, out: Path, args) -> int:
    from .figures import FIGURES, FigureRunner

    names = list(FIGURES) if "all" in args.names else args.names
    unknown = [n for n in names if n not in FIGURES]
    if unknown:
        raise UsageError(f"unknown figure(s): {', '.join(unknown)}; choose from {', '.join(FIGURES)} or all")
    runner = FigureRunner(cfg, out)
    for name in names:
        for path in runner.make(name):
            print(path)
    return EXIT_OK


def cmd_keys(cfg: ExperimentConfig, out: Path, args) -> int:
    for f in dataclasses.fields(ExperimentConfig):
        default = f.default
        if isinstance(default, tuple):
            default = ",".join(map(str, default))
        print(f"{f.name} = {'bundled' if default is None else default}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "probe": cmd_probe, "spectrum": cmd_spectrum,
            "clean": cmd_clean, "figures": cmd_figures, "keys": cmd_keys}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sgdphases", description="SGD phase-diagnostics laboratory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and output_dir)")
    sub.add_parser("train", parents=[common], help="run SGD and write metrics.csv")
    for name, text in (("probe", "order parameters at a checkpoint"),
                       ("spectrum", "noise-covariance spectrum at a checkpoint")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="weights file written by train")
        p.add_argument("--tag", type=int, default=0, help="random sub-stream for the probe minibatches")
        if name == "probe":
            p.add_argument("--labels", choices=("given", "true"), default="given")
    sub.add_parser("clean", parents=[common], help="loss-mixture cleaning experiment")
    p = sub.add_parser("figures", parents=[common], help="desk-scale figure data and gnuplot scripts")
    p.add_argument("names", nargs="+", help="fig1 ... fig6, or all")
    sub.add_parser("keys", help="list configuration keys and defaults")
    return parser


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip() + "\nsgdphases: error: missing subcommand")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        cfg_path = getattr(args, "config", None)
        cfg = parse_config(cfg_path) if cfg_path else ExperimentConfig()
        out = output_dir(cfg, getattr(args, "out", None)) if args.command != "keys" else Path(".")
        return COMMANDS[args.command](cfg, out, args)
    except (UsageError, ConfigError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - the CLI maps every failure to an exit code
        log.debug("traceback", exc_info=True)
        print(f"sgdphases: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
