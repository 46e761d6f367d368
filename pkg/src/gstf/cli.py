"""Command line entry point: ``gstf {synth,prepare,train,eval,predict,gradcheck}``.

Exit codes: 0 success, 1 usage or configuration error, 2 input/output
error, 3 numeric failure (divergence, non-finite values, gradcheck miss).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import __version__
from .anomaly import detect_anomalies, read_labels, write_labels
from .data import (
    DEFAULT_START,
    HistoricalInertiaForecaster,
    SplitSpec,
    ZScoreScaler,
    gather_windows,
    load_series,
    synth_dataset,
    window_starts,
    write_series_csv,
)
from .graph import (
    build_mask,
    connected_components,
    hop_distances,
    laplacian_embedding,
    read_edge_csv,
    write_edge_csv,
)
from .model import GSTFConfig, GSTFModel, NumericError, load_checkpoint, save_checkpoint
from .training import (
    TrainConfig,
    TrainingDiverged,
    evaluate,
    fit,
    gradcheck_instance,
    model_gradcheck,
    write_history,
)

logger = logging.getLogger("gstf")

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 1, 2, 3
PREPARED_FILES = ("stats.json", "labels.lbl", "mask.npy", "laplacian.npy", "split.json")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    # model (published defaults)
    d_model: int = 64
    d_hidden: int = 16
    alpha: int = 12
    beta: int = 12
    n_layers: int = 4
    n_prototypes: int = 64
    residual: bool = True
    eq18_literal: bool = False
    variant: str = "full"
    # training (published defaults)
    lr: float = 0.01
    batch_size: int = 16
    max_epochs: int = 400
    patience: int = 50
    max_steps: int = 0
    loss: str = "mae"
    seed: int = 0
    # graph and anomaly labelling
    hop_threshold: int = 2
    n_eigvecs: int = 8
    anomaly_window: int = 12
    k_sigma: float = 3.0
    # data
    series: str = ""
    edges: str = ""
    channels: int = 1
    step_minutes: int = 5
    start: int = DEFAULT_START
    out_dir: str = "run"


HELP = {
    "d_model": "hidden width d",
    "d_hidden": "attention query/key width",
    "alpha": "history steps",
    "beta": "forecast horizon",
    "n_layers": "fusion layers L",
    "n_prototypes": "anomaly prototypes M",
    "residual": "add residual paths around attention stages",
    "eq18_literal": "feed the spatial (not temporal) output into the space-time attention",
    "variant": "ablation: full, w/ST or w/ext",
    "lr": "Adam learning rate",
    "batch_size": "windows per optimizer step",
    "max_epochs": "epoch limit",
    "patience": "early-stopping patience in epochs",
    "max_steps": "optimizer step limit (0 = none)",
    "loss": "training loss: mae or huber",
    "seed": "random seed",
    "hop_threshold": "max hop distance allowed to attend",
    "n_eigvecs": "Laplacian eigenvectors k",
    "anomaly_window": "trailing window of the anomaly detector",
    "k_sigma": "anomaly band width in trailing standard deviations",
    "series": "series file (.csv or raw binary)",
    "edges": "edge list CSV (from,to[,cost])",
    "channels": "channels per sensor in CSV input",
    "step_minutes": "minutes between steps",
    "start": "POSIX time of the first step",
    "out_dir": "output directory",
}


def parse_bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _field_type(f):
    return {"int": int, "float": float, "bool": parse_bool, "str": str}[f.type if isinstance(f.type, str) else f.type.__name__]


def read_config_file(path):
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    types = {f.name: _field_type(f) for f in fields(RunConfig)}
    values = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise InputError(f"cannot read config file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, raw = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in types:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = types[key](raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {raw!r}") from exc
    return values


def resolve_config(args):
    """Defaults, then the config file, then explicit flags."""
    values = asdict(RunConfig())
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return RunConfig(**values)


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, cfg, inputs, outputs):
    lines = [f"command={command}", f"gstf_version={__version__}", f"numpy_version={np.__version__}",
             f"seed={cfg.seed}"]
    lines += [f"config.{k}={v}" for k, v in sorted(asdict(cfg).items())]
    lines += [f"input.{name}={os.path.basename(p)} sha256={sha256(p)}" for name, p in inputs]
    lines += [f"file={name} sha256={sha256(os.path.join(out_dir, name))}" for name in outputs]
    path = os.path.join(out_dir, "manifest.txt")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_manifest(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.rstrip("\n").split("=", 1)
                out.setdefault(k, v)
    return out


def _require_file(path, what):
    if not path:
        raise UsageError(f"missing --{what}")
    if not os.path.isfile(path):
        raise InputError(f"{what} file not found: {path}")
    return path


def _load_series(cfg):
    path = _require_file(cfg.series, "series")
    try:
        if path.lower().endswith(".csv"):
            return load_series(path, "csv", n_channels=cfg.channels, start=cfg.start,
                               step_minutes=cfg.step_minutes)
        return load_series(path, "raw")
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _load_graph(cfg, n_sensors):
    path = _require_file(cfg.edges, "edges")
    try:
        return read_edge_csv(path, n_sensors)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


# -- commands ---------------------------------------------------------------

def cmd_synth(cfg, args):
    os.makedirs(cfg.out_dir, exist_ok=True)
    series, graph, truth = synth_dataset(args.sensors, args.steps, seed=cfg.seed,
                                         step_minutes=cfg.step_minutes, start=cfg.start)
    write_series_csv(os.path.join(cfg.out_dir, "series.csv"), series)
    write_edge_csv(os.path.join(cfg.out_dir, "edges.csv"), graph)
    write_labels(os.path.join(cfg.out_dir, "truth.lbl"), truth)
    write_manifest(cfg.out_dir, "synth", cfg, [], ["series.csv", "edges.csv", "truth.lbl"])
    print(f"wrote {args.steps} steps x {args.sensors} sensors to {cfg.out_dir}")
    return 0


def cmd_prepare(cfg, args):
    series = _load_series(cfg)
    t, n, c = series.shape
    graph = _load_graph(cfg, n)
    split = SplitSpec(t)
    bounds = split.boundaries
    for name, (lo, hi) in bounds.items():
        try:
            window_starts(lo, hi, cfg.alpha, cfg.beta)
        except ValueError as exc:
            raise InputError(f"{cfg.series}: {name} split too small: {exc}") from exc
    scaler = ZScoreScaler().fit(series.values[: bounds["train"][1]])
    labels = detect_anomalies(series.values, cfg.anomaly_window, cfg.k_sigma)
    mask = build_mask(graph, cfg.hop_threshold, hop_distances(graph)).mask
    n_comp, _ = connected_components(graph)
    k = min(cfg.n_eigvecs, n - n_comp)
    if k < cfg.n_eigvecs:
        logger.warning("only %d non-trivial eigenvectors available; using k=%d", n - n_comp, k)
    lap = laplacian_embedding(graph, k).vectors

    os.makedirs(cfg.out_dir, exist_ok=True)
    out = lambda name: os.path.join(cfg.out_dir, name)  # noqa: E731
    with open(out("stats.json"), "w") as fh:
        json.dump({"mean": scaler.mean_.tolist(), "std": scaler.scale_.tolist(),
                   "n_imputed": series.n_imputed}, fh, indent=2, sort_keys=True)
    write_labels(out("labels.lbl"), labels)
    np.save(out("mask.npy"), mask)
    np.save(out("laplacian.npy"), lap)
    with open(out("split.json"), "w") as fh:
        json.dump({"n_steps": t, "n_sensors": n, "n_channels": c, "ratios": list(split.ratios),
                   "boundaries": bounds}, fh, indent=2, sort_keys=True)
    cfg = RunConfig(**{**asdict(cfg), "series": os.path.abspath(cfg.series),
                       "edges": os.path.abspath(cfg.edges)})
    write_manifest(cfg.out_dir, "prepare", cfg, [("series", cfg.series), ("edges", cfg.edges)],
                   PREPARED_FILES)
    print(f"prepared {t} steps, {n} sensors, {int(labels.sum())} anomaly labels -> {cfg.out_dir}")
    return 0


class Prepared:
    """Artifacts written by ``prepare`` plus the series they were built from."""

    def __init__(self, directory, cfg):
        self.dir = directory
        for name in PREPARED_FILES + ("manifest.txt",):
            _require_file(os.path.join(directory, name), "prepared")
        manifest = read_manifest(os.path.join(directory, "manifest.txt"))
        series_path = cfg.series or manifest.get("config.series", "")
        loaded = RunConfig(**{**asdict(cfg), "series": series_path,
                              "channels": int(manifest.get("config.channels", cfg.channels)),
                              "step_minutes": int(manifest.get("config.step_minutes", cfg.step_minutes)),
                              "start": int(manifest.get("config.start", cfg.start))})
        self.series = _load_series(loaded)
        self.series_path = series_path
        with open(os.path.join(directory, "stats.json")) as fh:
            stats = json.load(fh)
        self.scaler = ZScoreScaler()
        self.scaler.mean_ = np.asarray(stats["mean"])
        self.scaler.scale_ = np.asarray(stats["std"])
        self.scaler.n_features_in_ = len(stats["mean"])
        with open(os.path.join(directory, "split.json")) as fh:
            self.split = json.load(fh)
        self.labels = read_labels(os.path.join(directory, "labels.lbl"))
        self.mask = np.load(os.path.join(directory, "mask.npy"))
        self.laplacian = np.load(os.path.join(directory, "laplacian.npy"))
        if self.labels.shape != self.series.shape:
            raise InputError("cached labels do not match the series shape")
        self.values = self.scaler.transform(self.series.values)
        self.daily, self.weekly = self.series.calendar()

    def batch(self, name, alpha, beta):
        lo, hi = self.split["boundaries"][name]
        starts = window_starts(lo, hi, alpha, beta)
        return gather_windows(self.values, starts, alpha, beta, self.labels, self.daily, self.weekly)


def _model_config(cfg, prepared):
    n, c = prepared.split["n_sensors"], prepared.split["n_channels"]
    return GSTFConfig(
        n_sensors=n, n_channels=c, alpha=cfg.alpha, beta=cfg.beta, d_model=cfg.d_model,
        d_hidden=cfg.d_hidden, n_layers=cfg.n_layers, n_prototypes=cfg.n_prototypes,
        n_eigvecs=prepared.laplacian.shape[1], hop_threshold=cfg.hop_threshold,
        variant=cfg.variant, eq18_literal=cfg.eq18_literal, residual=cfg.residual, seed=cfg.seed,
    )


def cmd_train(cfg, args):
    prepared = Prepared(_require_dir(args.prepared), cfg)
    model = GSTFModel(_model_config(cfg, prepared), prepared.mask, prepared.laplacian)
    train = prepared.batch("train", cfg.alpha, cfg.beta)
    val = prepared.batch("val", cfg.alpha, cfg.beta)
    tcfg = TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, max_epochs=cfg.max_epochs,
                       patience=min(cfg.patience, cfg.max_epochs), seed=cfg.seed, loss=cfg.loss,
                       max_steps=cfg.max_steps or None)
    logging.getLogger("gstf.training").setLevel(logging.INFO)
    _, history = fit(model, train, val, tcfg, prepared.scaler, log_every=1)
    os.makedirs(cfg.out_dir, exist_ok=True)
    save_checkpoint(os.path.join(cfg.out_dir, "checkpoint.bin"), model)
    write_history(os.path.join(cfg.out_dir, "history.csv"), history)
    write_manifest(cfg.out_dir, "train", cfg, [("series", prepared.series_path)],
                   ["checkpoint.bin", "history.csv"])
    best = min(history, key=lambda r: r["val_mae"])
    print(f"trained {len(history)} epochs; best val MAE {best['val_mae']:.4f} (epoch {best['epoch']})")
    return 0


def _require_dir(path):
    if not path:
        raise UsageError("missing --prepared")
    if not os.path.isdir(path):
        raise InputError(f"prepared directory not found: {path}")
    return path


def cmd_eval(cfg, args):
    prepared = Prepared(_require_dir(args.prepared), cfg)
    rows = []
    if args.baseline == "hi" or not args.checkpoint:
        batch = prepared.batch(args.split, cfg.alpha, cfg.beta)
        report = evaluate(HistoricalInertiaForecaster(cfg.beta).fit(batch.x), batch, prepared.scaler)
        rows.append(("HI", report))
    for path in args.checkpoint or []:
        _require_file(path, "checkpoint")
        model, _ = load_checkpoint(path)
        batch = prepared.batch(args.split, model.config.alpha, model.config.beta)
        rows.append((model.config.variant if len(args.checkpoint) > 1 else "GSTF", evaluate(model, batch, prepared.scaler)))
    print(f"{'model':<8} {'MAE':>10} {'RMSE':>10} {'MAPE':>9}")
    for label, r in rows:
        print(f"{label:<8} {r['MAE']:>10.4f} {r['RMSE']:>10.4f} {r['MAPE']:>8.2f}%")
    if args.output:
        with open(args.output, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "split", "MAE", "RMSE", "MAPE"])
            for label, r in rows:
                w.writerow([label, args.split, repr(r["MAE"]), repr(r["RMSE"]), repr(r["MAPE"])])
    return 0


def cmd_predict(cfg, args):
    prepared = Prepared(_require_dir(args.prepared), cfg)
    model, _ = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    alpha = model.config.alpha
    t = prepared.values.shape[0]
    start = t - alpha if args.window_start is None else args.window_start
    if not 0 <= start <= t - alpha:
        raise UsageError(f"--window-start must lie in [0, {t - alpha}]")
    batch = gather_windows(prepared.values, [start], alpha, 0, prepared.labels,
                           prepared.daily, prepared.weekly)
    pred = model.predict(batch.x, batch.exc, batch.daily, batch.weekly)[0]
    pred = prepared.scaler.inverse_transform(pred)
    beta, n, c = pred.shape
    fh = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow([f"s{i}_c{j}" for i in range(n) for j in range(c)])
        for row in pred.reshape(beta, n * c):
            w.writerow([repr(float(v)) for v in row])
    finally:
        if args.output:
            fh.close()
    return 0


def cmd_gradcheck(cfg, args):
    graph, batch = gradcheck_instance(cfg.seed)
    config = GSTFConfig(n_sensors=4, d_model=cfg.d_model, d_hidden=cfg.d_hidden, n_layers=cfg.n_layers,
                        n_prototypes=cfg.n_prototypes, n_eigvecs=cfg.n_eigvecs,
                        hop_threshold=cfg.hop_threshold, variant=cfg.variant,
                        residual=cfg.residual, eq18_literal=cfg.eq18_literal, seed=cfg.seed)
    model = GSTFModel.from_graph(config, graph)
    report = model_gradcheck(model, batch, samples=args.samples, rng=np.random.default_rng(cfg.seed))
    worst = 0.0
    for group, err in report.items():
        flag = "ok" if err < args.tol else "FAIL"
        print(f"{group:<22} {err:.3e} {flag}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e} (tolerance {args.tol:g})")
    return 0 if worst < args.tol else EXIT_NUMERIC


# -- parser -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p):
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--config", help="key=value config file (flags override it)")
    defaults = RunConfig()
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, type=_field_type(f), default=None,
                       help=f"{HELP[f.name]} (default: {getattr(defaults, f.name)!r})")


def build_parser():
    parser = _Parser(prog="gstf", description="Anomaly-aware spatio-temporal fusion forecasting.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a seeded sinusoid-plus-spikes dataset")
    _add_config_flags(p)
    p.add_argument("--sensors", type=int, default=10)
    p.add_argument("--steps", type=int, default=2000)

    sub_prepare = sub.add_parser("prepare", help="labels, mask, eigenvectors, statistics and split")
    _add_config_flags(sub_prepare)

    p = sub.add_parser("train", help="fit the model on prepared data")
    _add_config_flags(p)
    p.add_argument("--prepared", required=True)

    p = sub.add_parser("eval", help="MAE/RMSE/MAPE of checkpoints and the HI baseline")
    _add_config_flags(p)
    p.add_argument("--prepared", required=True)
    p.add_argument("--checkpoint", action="append", help="repeat to compare ablation variants")
    p.add_argument("--baseline", choices=["hi", "none"], default="hi")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--output", help="write the metrics table as CSV")

    p = sub.add_parser("predict", help="forecast the horizon after one history window")
    _add_config_flags(p)
    p.add_argument("--prepared", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--window-start", type=int, help="first step of the history window (default: last)")
    p.add_argument("--output", help="CSV path (default: stdout)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    _add_config_flags(p)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


COMMANDS = {
    "synth": cmd_synth, "prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval,
    "predict": cmd_predict, "gradcheck": cmd_gradcheck,
}

GRADCHECK_TOY = {"d_model": 16, "d_hidden": 8, "n_layers": 2, "n_prototypes": 8}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "gradcheck":
            explicit = {k for k in GRADCHECK_TOY if getattr(args, k, None) is not None}
            cfg = RunConfig(**{**asdict(cfg), **{k: v for k, v in GRADCHECK_TOY.items() if k not in explicit}})
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"gstf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, OSError) as exc:
        print(f"gstf: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, TrainingDiverged, FloatingPointError) as exc:
        print(f"gstf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"gstf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
