"""Command-line driver: simulate, ingest, pretrain, train, disaggregate, evaluate, report.

Exit codes: 0 success, 2 config or input error, 3 missing checkpoint or
other upstream artifact, 4 training divergence. Logs are JSON lines on
stderr; data products go under ``--out``.
"""
from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import metrics
from .autodiff.engine import ConfigError, ShapeError
from .models import Network, predict
from .signals import (
    DEFAULT_WINDOW,
    FORMATS,
    HouseEntry,
    Manifest,
    NormalizationStats,
    SeriesError,
    SignalSeries,
    WindowDataset,
    align_resample,
    check_window,
    denormalize,
    load_manifest,
    load_series,
    normalize,
    save_manifest,
    write_series,
)
from .simulate import FleetConfig, desk_fleet, simulate_fleet
from .train.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .train.trainer import TrainConfig, TrainingDivergence, pretrain_appliance, train_adversarial

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4
VARIANTS = ("pretrain", "aed", "aed-minus")
TRACE_SPAN = 2000

# JSON config schema. Top-level keys are all optional; flags override them.
CONFIG_SCHEMA = {
    "seed": "int",
    "out": "path to the output directory",
    "data": "path to a dataset manifest (aed-manifest v1)",
    "simulator": "fleet config: appliances, noise_sigma, households, samples, period, fractions",
    "appliances": "list of appliance names to model (default: all in the manifest)",
    "targets": "list of appliances to train adversarially (default: all modelled appliances)",
    "model": {"W": "odd int >= 27", "predictor_widths": "list[int]",
              "discriminator_widths": "list[int]", "dropout": "bool", "batchnorm": "bool"},
    "train": {f.name: f.type for f in fields(TrainConfig)
              if f.name not in ("predictor_widths", "discriminator_widths", "batchnorm", "dropout")},
}
PAPER_DEFAULTS = {"model": {"W": 599}, "train": {"batch_size": 1000, "max_epochs": 50, "lam": 0.05}}


class MissingArtifact(RuntimeError):
    pass


def log(event: str, **fields_) -> None:
    sys.stderr.write(json.dumps({"event": event, **fields_}, sort_keys=True) + "\n")
    sys.stderr.flush()


# ---------------------------------------------------------------- config

def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(doc: dict, schema: dict, where: str) -> None:
    for k, v in doc.items():
        if k not in schema:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(schema[k], dict) and k != "simulator":
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k!r} must be an object")
            _check_keys(v, schema[k], f"{where}{k}.")


def resolve_config(args) -> dict:
    """Defaults, then --paper-defaults, then the config file, then explicit flags."""
    cfg: dict = {"seed": 0, "model": {"W": DEFAULT_WINDOW}, "train": {}}
    if args.paper_defaults:
        cfg = _merge(cfg, PAPER_DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _check_keys(doc, CONFIG_SCHEMA, "")
        base = path.parent
        for key in ("data", "out"):
            if key in doc:
                doc[key] = str(base / doc[key])
        cfg = _merge(cfg, doc)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if getattr(args, "data", None):
        cfg["data"] = args.data
    if args.precision:
        cfg["train"]["precision"] = args.precision
    if args.no_adversarial:
        cfg["train"]["adversarial"] = False
    names = cfg.get("appliances")
    if names is not None and len(set(names)) != len(names):
        raise ConfigError("appliance names must be unique")
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    model = cfg.get("model", {})
    kw = dict(cfg.get("train", {}))
    kw["seed"] = cfg["seed"]
    for key in ("predictor_widths", "discriminator_widths", "batchnorm", "dropout"):
        if key in model:
            kw[key] = model[key]
    try:
        return TrainConfig(**kw)
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from None


def _window(cfg: dict) -> int:
    W = int(cfg.get("model", {}).get("W", DEFAULT_WINDOW))
    check_window(W)
    return W


def _out(cfg: dict) -> Path:
    if not cfg.get("out"):
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    return Path(cfg["out"])


def _manifest(cfg: dict) -> Manifest:
    if not cfg.get("data"):
        raise ConfigError("no dataset: pass --data or set 'data' in the config")
    path = Path(cfg["data"])
    if not path.is_file():
        raise MissingArtifact(f"dataset manifest not found: {path}")
    try:
        return load_manifest(path)
    except (KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: malformed manifest ({exc})") from None


def _appliances(cfg: dict, manifest: Manifest) -> list[str]:
    names = cfg.get("appliances") or list(manifest.appliances)
    unknown = [n for n in names if n not in manifest.appliances]
    if unknown:
        raise ConfigError(f"appliances {unknown} not in manifest {manifest.appliances}")
    return list(names)


def _dataset(manifest: Manifest, appliance: str, split: str, W: int) -> WindowDataset | None:
    houses = manifest.split(split)
    if not houses:
        return None
    pairs = [manifest.load_pair(h, appliance) for h in houses]
    return WindowDataset.from_series(pairs, W, manifest.stats_for("mains"), manifest.stats_for(appliance))


def _stats_dict(s: NormalizationStats) -> dict:
    return {"mean": s.mean, "std": s.std}


# ---------------------------------------------------------------- checkpoints

def model_prefix(out: Path, appliance: str, variant: str) -> Path:
    return out / "checkpoints" / appliance / variant


def save_pair(prefix: Path, generator: Network, predictor: Network, meta: dict) -> None:
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(generator, prefix.with_name(prefix.name + "_G.ckpt"), meta)
    save_checkpoint(predictor, prefix.with_name(prefix.name + "_C.ckpt"), meta)


def load_pair(prefix: Path) -> tuple[Network, Network, dict]:
    paths = [prefix.with_name(prefix.name + s) for s in ("_G.ckpt", "_C.ckpt")]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise MissingArtifact(f"missing checkpoints: {', '.join(missing)}")
    g, meta = load_checkpoint(paths[0], with_metadata=True)
    c = load_checkpoint(paths[1])
    return g, c, meta


# ---------------------------------------------------------------- commands

def cmd_simulate(args, cfg: dict) -> int:
    out = _out(cfg)
    fleet = FleetConfig.from_dict(cfg["simulator"]) if "simulator" in cfg else desk_fleet()
    splits = simulate_fleet(fleet, cfg["seed"])
    names = [a.name for a in fleet.appliances]
    houses = []
    for split, group in splits.items():
        for h in group:
            d = out / h.name
            d.mkdir(parents=True, exist_ok=True)
            write_series(d / "mains.dat", h.mains)
            for n in names:
                write_series(d / f"{n}.dat", h.appliances[n])
            houses.append(HouseEntry(h.name, split, d / "mains.dat",
                                     {n: d / f"{n}.dat" for n in names}))
    train = splits["train"] or [h for g in splits.values() for h in g]
    norm = {"aggregate": NormalizationStats.from_data(np.concatenate([h.mains.watts for h in train]))}
    for n in names:
        norm[n] = NormalizationStats.from_data(np.concatenate([h.appliances[n].watts for h in train]))
    manifest = Manifest(names, houses, norm, fleet.period, out)
    save_manifest(manifest, out / "manifest.json")
    (out / "simulator.json").write_text(
        json.dumps({"seed": cfg["seed"], **fleet.to_dict()}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    log("simulated", houses=len(houses), appliances=names, manifest=str(out / "manifest.json"))
    return EXIT_OK


def cmd_ingest(args, cfg: dict) -> int:
    """Align each house's channels to mains and write a self-contained dataset."""
    manifest = _manifest(cfg)
    out = _out(cfg)
    names = _appliances(cfg, manifest)
    houses = []
    for h in manifest.houses:
        d = out / h.name
        d.mkdir(parents=True, exist_ok=True)
        mains = load_series(h.mains, args.format, role="mains", name="mains").check()
        aligned = {}
        for n in names:
            app = load_series(h.channels[n], args.format, role="appliance", name=n).check()
            m, a = align_resample(mains, app, manifest.period)
            aligned[n] = (m, a)
        # one shared grid per house: intersect the per-appliance grids
        common = aligned[names[0]][0].timestamps
        for m, _ in aligned.values():
            common = np.intersect1d(common, m.timestamps)
        if len(common) == 0:
            raise SeriesError(f"house {h.name}: channels share no aligned samples")
        m0 = aligned[names[0]][0]
        keep = np.isin(m0.timestamps, common)
        write_series(d / "mains.dat", SignalSeries(common, m0.watts[keep], "mains", "mains"))
        channels = {}
        for n, (m, a) in aligned.items():
            keep = np.isin(a.timestamps, common)
            write_series(d / f"{n}.dat", SignalSeries(common, a.watts[keep], "appliance", n))
            channels[n] = d / f"{n}.dat"
        houses.append(HouseEntry(h.name, h.split, d / "mains.dat", channels))
        log("ingested", house=h.name, samples=int(len(common)))
    norm = dict(manifest.normalization)
    for key in ["aggregate", *names]:
        if key not in norm:
            try:
                norm[key] = manifest.stats_for(key)
            except KeyError:
                raise ConfigError(f"no normalisation stats for {key!r}; add them to the manifest") from None
    period = manifest.period
    save_manifest(Manifest(names, houses, norm, period, out), out / "manifest.json")
    return EXIT_OK


def _meta(cfg: dict, manifest: Manifest, appliance: str, variant: str, W: int,
          tc: TrainConfig, best_epoch: int) -> dict:
    return {"appliance": appliance, "variant": variant, "W": W, "seed": cfg["seed"],
            "best_epoch": best_epoch, "train": tc.to_dict(),
            "mains_stats": _stats_dict(manifest.stats_for("mains")),
            "appliance_stats": _stats_dict(manifest.stats_for(appliance))}


def _jsonl(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = path.open("w", encoding="utf-8")

    def write(record: dict) -> None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()
        log("epoch", **record)
    return fh, write


def cmd_pretrain(args, cfg: dict) -> int:
    manifest = _manifest(cfg)
    out = _out(cfg)
    W = _window(cfg)
    tc = train_config(cfg)
    for name in _appliances(cfg, manifest):
        train = _dataset(manifest, name, "train", W)
        if train is None:
            raise ConfigError(f"manifest has no training houses for {name}")
        val = _dataset(manifest, name, "validation", W)
        fh, write = _jsonl(out / "logs" / f"pretrain_{name}.jsonl")
        try:
            res = pretrain_appliance(train, val, tc, name, log=write)
        finally:
            fh.close()
        save_pair(model_prefix(out, name, "pretrain"), res.generator, res.predictor,
                  _meta(cfg, manifest, name, "pretrain", W, tc, res.best_epoch))
        log("pretrained", appliance=name, best_epoch=res.best_epoch,
            val_mae=res.val_mae_trace[res.best_epoch - 1])
    return EXIT_OK


def cmd_train(args, cfg: dict) -> int:
    manifest = _manifest(cfg)
    out = _out(cfg)
    W = _window(cfg)
    tc = train_config(cfg)
    names = _appliances(cfg, manifest)
    pretrained = {n: load_pair(model_prefix(out, n, "pretrain")) for n in names}
    for n, (g, _, meta) in pretrained.items():
        if meta.get("W", g.config.get("W")) != W:
            raise ConfigError(f"pretrained {n} uses W={meta.get('W')}, config asks for W={W}")
    extractors = [pretrained[n][0] for n in names]
    variant = "aed" if tc.adversarial else "aed-minus"
    targets = cfg.get("targets") or names
    for target in targets:
        if target not in pretrained:
            raise ConfigError(f"target {target!r} is not a modelled appliance")
        train = _dataset(manifest, target, "train", W)
        if train is None:
            raise ConfigError(f"manifest has no training houses for {target}")
        val = _dataset(manifest, target, "validation", W)
        fh, write = _jsonl(out / "logs" / f"{variant}_{target}.jsonl")
        try:
            res = train_adversarial(train, extractors, tc, init=pretrained[target][:2], val=val,
                                    target=target, log=write)
        finally:
            fh.close()
        meta = _meta(cfg, manifest, target, variant, W, tc, res.best_epoch)
        meta["d_shared_final"] = res.d_shared_final
        save_pair(model_prefix(out, target, variant), res.generator, res.predictor, meta)
        log("trained", appliance=target, variant=variant, best_epoch=res.best_epoch,
            d_shared_final=res.d_shared_final)
    return EXIT_OK


def disaggregate_series(generator: Network, predictor: Network, meta: dict,
                        mains: SignalSeries) -> SignalSeries:
    """Stride-1 midpoint predictions in Watts over the covered span."""
    W = int(meta.get("W", generator.config["W"]))
    if len(mains) < W:
        raise SeriesError(f"mains has {len(mains)} samples, shorter than the window W={W}")
    ms = NormalizationStats(**meta["mains_stats"])
    aps = NormalizationStats(**meta["appliance_stats"])
    x = normalize(mains.watts, ms)
    windows = np.lib.stride_tricks.sliding_window_view(x, W)
    pred = np.concatenate([predict(generator, predictor, windows[i:i + 4096].astype(generator.dtype))
                           for i in range(0, len(windows), 4096)])
    half = W // 2
    return SignalSeries(mains.timestamps[half:len(mains) - half], denormalize(pred, aps),
                        role="appliance", name=meta.get("appliance", "appliance"))


def _variant(args) -> str:
    if args.variant:
        return args.variant
    return "aed-minus" if args.no_adversarial else "aed"


def cmd_disaggregate(args, cfg: dict) -> int:
    out = _out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    if args.model:
        if not args.mains:
            raise ConfigError("--model needs --mains")
        g, c, meta = load_pair(Path(args.model))
        mains = load_series(args.mains, role="mains", name="mains").check()
        series = disaggregate_series(g, c, meta, mains)
        write_series(out / f"{series.name}.dat", series)
        log("disaggregated", appliance=series.name, points=len(series))
        return EXIT_OK
    manifest = _manifest(cfg)
    run = Path(args.run) if args.run else out.parent
    variant = _variant(args)
    names = _appliances(cfg, manifest)
    models = {n: load_pair(model_prefix(run, n, variant)) for n in names}
    for h in manifest.split(args.split):
        for n in names:
            mains, _ = manifest.load_pair(h, n)
            g, c, meta = models[n]
            series = disaggregate_series(g, c, meta, mains)
            (out / h.name).mkdir(parents=True, exist_ok=True)
            write_series(out / h.name / f"{n}.dat", series)
            log("disaggregated", house=h.name, appliance=n, points=len(series))
    return EXIT_OK


def restrict_truth(pred: SignalSeries, truth: SignalSeries) -> np.ndarray:
    """Truth values at exactly the predicted timestamps."""
    idx = np.searchsorted(truth.timestamps, pred.timestamps)
    ok = (idx < len(truth)) & (truth.timestamps[np.minimum(idx, len(truth) - 1)] == pred.timestamps)
    if not ok.all():
        bad = int(pred.timestamps[np.flatnonzero(~ok)[0]])
        raise SeriesError(f"{pred.name}: no ground truth at predicted timestamp {bad}")
    return truth.watts[idx]


def cmd_evaluate(args, cfg: dict) -> int:
    out = _out(cfg)
    pred_dir = Path(args.predictions)
    if not pred_dir.is_dir():
        raise MissingArtifact(f"predictions directory not found: {pred_dir}")
    preds: dict[str, list[np.ndarray]] = {}
    truths: dict[str, list[np.ndarray]] = {}
    traces = {}

    def add(name, pred, truth, mains):
        t = restrict_truth(pred, truth)
        preds.setdefault(name, []).append(pred.watts)
        truths.setdefault(name, []).append(t)
        if name not in traces:
            span = slice(0, min(TRACE_SPAN, len(pred)))
            m = restrict_truth(pred, mains) if mains is not None else np.zeros(0)
            traces[name] = metrics.Trace(pred.timestamps[span].tolist(), m[span].tolist(),
                                         t[span].tolist(), pred.watts[span].tolist())

    def read_pred(path: Path, name: str) -> SignalSeries:
        if not path.is_file():
            raise MissingArtifact(f"prediction file not found: {path}")
        return load_series(path, role="appliance", name=name)

    if args.truth:
        for spec in args.truth:
            name, _, path = spec.partition("=")
            if not path:
                raise ConfigError(f"--truth expects NAME=PATH, got {spec!r}")
            truth = load_series(path, role="appliance", name=name)
            mains = load_series(args.mains, role="mains") if args.mains else None
            add(name, read_pred(pred_dir / f"{name}.dat", name), truth, mains)
        dataset = "files"
    else:
        manifest = _manifest(cfg)
        for h in manifest.split(args.split):
            for n in _appliances(cfg, manifest):
                mains, truth = manifest.load_pair(h, n)
                add(n, read_pred(pred_dir / h.name / f"{n}.dat", n), truth, mains)
        dataset = f"{Path(cfg['data']).name}:{args.split}"
        if not preds:
            raise ConfigError(f"manifest has no houses in split {args.split!r}")
    report = metrics.build_report({k: np.concatenate(v) for k, v in preds.items()},
                                  {k: np.concatenate(v) for k, v in truths.items()},
                                  clamp=not args.no_clamp,
                                  metadata={"dataset": dataset, "predictions": pred_dir.name,
                                            "seed": cfg["seed"], "W": _window(cfg)},
                                  traces=traces)
    files = metrics.emit_report(report, args.formats.split(","), out / "report")
    for a in report.appliances:
        log("metric", appliance=a.appliance, mae_watts=a.mae_watts, sae=a.sae, share_pct=a.share_pct)
    log("report", files=[str(f) for f in files])
    return EXIT_OK


def cmd_report(args, cfg: dict) -> int:
    src = Path(args.input)
    if not src.is_file():
        raise MissingArtifact(f"report JSON not found: {src}")
    report = metrics.EvalReport.from_json(json.loads(src.read_text(encoding="utf-8")))
    files = metrics.emit_report(report, args.formats.split(","), _out(cfg) / "report")
    log("report", files=[str(f) for f in files])
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "ingest": cmd_ingest, "pretrain": cmd_pretrain,
            "train": cmd_train, "disaggregate": cmd_disaggregate, "evaluate": cmd_evaluate,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP threads; 1 gives reproducible runs")
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--no-adversarial", action="store_true",
                        help="prediction loss only (the ablated model)")
    common.add_argument("--paper-defaults", action="store_true",
                        help="B=1000, M=50, lambda=0.05, W=599")
    p = argparse.ArgumentParser(prog="aed", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate a synthetic fleet")
    s = sub.add_parser("ingest", parents=[common], help="align and normalise a raw dataset")
    s.add_argument("--data", help="raw dataset manifest")
    s.add_argument("--format", choices=FORMATS, default="csv")
    for name in ("pretrain", "train"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--data", help="dataset manifest")
    s = sub.add_parser("disaggregate", parents=[common], help="stride-1 midpoint predictions")
    s.add_argument("--data", help="dataset manifest (batch mode)")
    s.add_argument("--model", help="checkpoint prefix, e.g. RUN/checkpoints/kettle/aed")
    s.add_argument("--mains", help="mains series file (with --model)")
    s.add_argument("--run", help="training output directory (batch mode)")
    s.add_argument("--split", default="test")
    s.add_argument("--variant", choices=VARIANTS)
    s = sub.add_parser("evaluate", parents=[common], help="score predictions against ground truth")
    s.add_argument("--data", help="dataset manifest (batch mode)")
    s.add_argument("--predictions", required=True)
    s.add_argument("--truth", action="append", help="NAME=PATH ground truth (file mode)")
    s.add_argument("--mains", help="mains file for trace plots (file mode)")
    s.add_argument("--split", default="test")
    s.add_argument("--formats", default="csv,json,svg")
    s.add_argument("--no-clamp", action="store_true", help="keep negative predictions")
    s = sub.add_parser("report", parents=[common], help="re-render a report JSON")
    s.add_argument("--input", required=True)
    s.add_argument("--formats", default="csv,json,svg")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, cfg)
    except MissingArtifact as exc:
        log("error", kind="missing-artifact", message=str(exc))
        return EXIT_MISSING
    except TrainingDivergence as exc:
        log("error", kind="divergence", epoch=exc.epoch, message=str(exc))
        return EXIT_DIVERGED
    except FileNotFoundError as exc:
        log("error", kind="input", message=f"file not found: {exc.filename}")
        return EXIT_CONFIG
    except (ConfigError, ShapeError, SeriesError, CheckpointError, metrics.MetricError,
            ValueError, KeyError) as exc:
        log("error", kind="config", message=str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
