"""Command-line interface: ``msgm synth|features|train|eval|bench|graph-export``.

Exit codes: 0 success, 2 input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bench as bench_mod
from .data import FormatError, SyntheticSpec, generate_synthetic, load_manifest, write_dataset
from .export import export_graphs
from .features import IngestionError, SegmentationError, extract_features, write_feature_csv
from .graph import GraphConfigError
from .model import ConfigError, MsgmConfig, load_checkpoint, save_checkpoint
from .train import FoldResult, SplitError, SplitPlan, TrainConfig, evaluate, results_summary, train

log = logging.getLogger("msgm")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3
INPUT_ERRORS = (IngestionError, FormatError, ConfigError, SplitError, GraphConfigError, SegmentationError,
                FileNotFoundError, json.JSONDecodeError)
RUN_KEYS = ("model", "train", "split", "synthetic")


class InputError(Exception):
    """Bad flags, config or output location; maps to exit code 2."""


@dataclass
class RunConfig:
    """Model, training, split and synthetic-data settings in one JSON document.

    ``model`` is kept as a partial dict because ``n_channels`` is only known
    once the data are loaded.
    """

    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitPlan = field(default_factory=SplitPlan)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        extra = set(doc) - set(RUN_KEYS)
        if extra:
            raise ConfigError(f"unknown config sections: {sorted(extra)}; expected {list(RUN_KEYS)}")
        model = dict(doc.get("model", {}))
        # validate key names now; n_channels may still be missing
        MsgmConfig.from_json({"n_channels": 1, **model})
        try:
            return cls(model, TrainConfig.from_json(doc.get("train", {})), SplitPlan.from_json(doc.get("split", {})),
                       SyntheticSpec.from_json(doc.get("synthetic", {})))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        return cls.from_json(json.loads(Path(path).read_text()))

    def model_config(self, n_channels: int) -> MsgmConfig:
        doc = dict(self.model)
        if doc.setdefault("n_channels", n_channels) != n_channels:
            raise ConfigError(f"config says {doc['n_channels']} channels, data have {n_channels}")
        return MsgmConfig.from_json(doc)

    def to_json(self) -> dict:
        return {"model": self.model, "train": self.train.to_json(), "split": self.split.to_json(),
                "synthetic": self.synthetic.to_json()}


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """CLI flags win over config-file values."""
    if getattr(args, "seed", None) is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    if getattr(args, "ablate", None):
        cfg.model = dict(cfg.model, ablations=list(dict.fromkeys(list(cfg.model.get("ablations", [])) + args.ablate)))
        MsgmConfig.from_json({"n_channels": 1, **cfg.model})
    if getattr(args, "leave_out", None) is not None:
        cfg.split = SplitPlan("leave_n_out", args.leave_out, cfg.split.val_fraction)
    return cfg


def prepare_out(path: str | Path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise InputError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise InputError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def echo_config(out: Path, doc: dict) -> None:
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_recordings(cfg: RunConfig, manifest: str | None, synthetic: bool, out: Path | None = None):
    if synthetic:
        recs = generate_synthetic(cfg.synthetic, cfg.train.seed)
        if out is not None:
            write_dataset(recs, out / "data")
        return recs
    n_classes = cfg.model.get("n_classes", 2)
    return load_manifest(manifest, n_classes)


# ---------------------------------------------------------------------------
# Experiment runner shared by ``train`` and the acceptance suite
# ---------------------------------------------------------------------------

def run_experiment(cfg: RunConfig, recs) -> tuple[MsgmConfig, list[FoldResult], dict]:
    names = recs[0].channel_names if recs[0].channel_names else tuple(f"ch{i}" for i in range(recs[0].n_channels))
    for r in recs:
        r.channel_names = names
    mcfg = cfg.model_config(recs[0].n_channels)
    data = extract_features(recs, mcfg.scale_spec)
    results = train(data, mcfg, cfg.train, cfg.split)
    doc = {
        "config": dict(cfg.to_json(), model=mcfg.to_json()),
        "folds": [r.to_json() for r in results],
        "summary": results_summary(results),
    }
    return mcfg, results, doc


def results_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_summary_csv(path: Path, results: Sequence[FoldResult], summary: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "test_subjects", "status", "accuracy", "f1", "best_epoch", "epochs_run"])
        for r in results:
            w.writerow([r.fold, " ".join(map(str, r.test_subjects)), r.status,
                        "" if r.test is None else repr(r.test.accuracy), "" if r.test is None else repr(r.test.f1),
                        "" if r.best_epoch is None else r.best_epoch, r.epochs_run])
        for stat in ("mean", "std"):
            acc, f1 = summary["accuracy"][stat], summary["f1"][stat]
            w.writerow([stat, "", "", "" if acc is None else repr(acc), "" if f1 is None else repr(f1), "", ""])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = apply_overrides(RunConfig.load(args.config), args)
    out = prepare_out(args.out, args.force)
    echo_config(out, cfg.to_json())
    manifest = write_dataset(generate_synthetic(cfg.synthetic, cfg.train.seed), out)
    print(manifest)
    return EXIT_OK


def cmd_features(args) -> int:
    cfg = RunConfig.load(args.config)
    recs = load_manifest(args.manifest, cfg.model.get("n_classes"))
    out = prepare_out(args.out, args.force)
    mcfg = cfg.model_config(recs[0].n_channels)
    data = extract_features(recs, mcfg.scale_spec)
    echo_config(out, dict(cfg.to_json(), model=mcfg.to_json()))
    report = {"n_samples": len(data), "n_channels": recs[0].n_channels, "scales": []}
    for ft in data.tensors:
        rows = write_feature_csv(ft, out / f"features_scale{ft.k}.csv", data.channel_names)
        report["scales"].append({"k": ft.k, "shape": list(ft.shape), "rows": rows})
        print(f"scale {ft.k}: shape {tuple(ft.shape)}, {rows} rows")
    (out / "shapes.json").write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK


def cmd_train(args) -> int:
    if bool(args.manifest) == bool(args.synthetic):
        raise InputError("pass exactly one of --manifest or --synthetic")
    cfg = apply_overrides(RunConfig.load(args.config), args)
    out = prepare_out(args.out, args.force)
    recs = load_recordings(cfg, args.manifest, args.synthetic, out)
    mcfg, results, doc = run_experiment(cfg, recs)
    echo_config(out, doc["config"])
    (out / "results.json").write_text(results_json(doc))
    write_summary_csv(out / "summary.csv", results, doc["summary"])
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for r in results:
        if r.model is not None:
            save_checkpoint(ckpt_dir / f"fold{r.fold}.msgm", r.model,
                            {"fold": r.fold, "test_subjects": list(r.test_subjects),
                             "train_subjects": list(r.train_subjects), "seed": cfg.train.seed})
    s = doc["summary"]
    if s["folds_ok"] == 0:
        print("training diverged in every fold", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"ACC {s['accuracy']['mean']:.4f} +/- {s['accuracy']['std']:.4f}  "
          f"F1 {s['f1']['mean']:.4f} +/- {s['f1']['std']:.4f}  ({s['folds_ok']} folds ok, {s['folds_failed']} failed)")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    recs = load_manifest(args.manifest, model.cfg.n_classes)
    meta = header.get("meta", {})
    if args.split != "all":
        key = "train_subjects" if args.split == "train" else "test_subjects"
        if key not in meta:
            raise InputError(f"checkpoint has no {key} record; use --split all")
        keep = set(meta[key])
        recs = [r for r in recs if r.subject_id in keep]
        if not recs:
            raise InputError(f"no recordings of the checkpoint's {args.split} subjects in the manifest")
    names = recs[0].channel_names
    if names and tuple(n.upper() for n in names) != tuple(n.upper() for n in model.regions.channel_names):
        raise InputError("manifest channel names differ from the checkpoint's montage")
    if recs[0].n_channels != model.cfg.n_channels:
        raise InputError(f"checkpoint expects {model.cfg.n_channels} channels, manifest has {recs[0].n_channels}")
    data = extract_features(recs, model.cfg.scale_spec)
    m = evaluate(model, data)
    print(f"ACC {m.accuracy:.4f}  F1 {m.f1:.4f}  (n={len(data)})")
    if args.json:
        Path(args.json).write_text(json.dumps(m.to_json(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        lengths = [int(x) for x in args.seq_lengths.split(",")]
    except ValueError:
        raise InputError(f"bad --seq-lengths {args.seq_lengths!r}") from None
    if args.repeats < 1 or any(n < 1 for n in lengths):
        raise InputError("--repeats and sequence lengths must be >= 1")
    if args.repeats == 1:
        print("warning: --repeats 1 gives a single timing; medians will be noisy", file=sys.stderr)
    comps = args.components.split(",")
    unknown = set(comps) - set(bench_mod.COMPONENTS)
    if unknown:
        raise InputError(f"unknown component(s) {sorted(unknown)}; choose from {bench_mod.COMPONENTS}")
    rows = bench_mod.run_bench(lengths, args.repeats, comps, seed=args.seed or 0)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(bench_mod.CSV_HEADER)
        for r in rows:
            w.writerow([r.component, r.seq_len, r.repeats, f"{r.median_ms:.6f}", "" if r.ratio is None else f"{r.ratio:.6f}"])
    finally:
        if fh is not sys.stdout:
            fh.close()
    ratio = bench_mod.scan_linearity(rows)
    if ratio is not None:
        print(f"scan linearity ratio: {ratio:.3f}", file=sys.stderr)
    return EXIT_OK


def cmd_graph_export(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    out = prepare_out(args.out, args.force)
    try:
        files = export_graphs(model, args.scale, out)
    except IndexError as exc:
        raise InputError(str(exc)) from None
    echo_config(out, {"checkpoint": str(args.checkpoint), "scale": args.scale, "model": header["config"]})
    print(f"wrote {len(files)} files to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msgm", description="Multi-scale graph/state-space EEG emotion recognition.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="RunConfig JSON (sections: model, train, split, synthetic)")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
            sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    sp = sub.add_parser("synth", help="write a synthetic EEGB dataset and manifest")
    common(sp)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("features", help="export per-scale rPSD feature CSVs")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.set_defaults(func=cmd_features)

    sp = sub.add_parser("train", help="cross-subject training with checkpoints and metrics")
    common(sp)
    sp.add_argument("--manifest")
    sp.add_argument("--synthetic", action="store_true", help="generate the synthetic dataset from the config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--leave-out", type=int, help="hold out this many subjects per fold")
    sp.add_argument("--ablate", action="append", default=[], help="ablation flag (repeatable)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", choices=("all", "train", "test"), default="all",
                    help="restrict to the checkpoint's training or test subjects")
    sp.add_argument("--json", help="also write metrics to this file")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="median latency per sequence length")
    sp.add_argument("--seq-lengths", default="1024,2048")
    sp.add_argument("--repeats", type=int, default=20)
    sp.add_argument("--components", default=",".join(bench_mod.COMPONENTS))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="CSV path (default stdout)")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("graph-export", help="adjacency CSV/SVG/JSON for one scale")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scale", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_graph_export)
    return p


def _thread_limit():
    value = os.environ.get("MSGM_THREADS")
    if not value:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(value))


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        limiter = _thread_limit()
    except ValueError:
        print("error: MSGM_THREADS must be an integer", file=sys.stderr)
        return EXIT_INPUT
    try:
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            return args.func(args)
    except (InputError, *INPUT_ERRORS, ValueError) as exc:  # ValueError: malformed checkpoints and similar
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
