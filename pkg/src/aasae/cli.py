"""Command-line front end: ``aasae {pretrain,probe,diagnose,ablate,report}``.

Every invocation creates a fresh run directory under ``output_dir`` holding a
single ``manifest.json``. Exit codes: 0 success, 2 invalid configuration,
1 runtime failure; failures also write a JSON error record to stderr (and to
``error.json`` when a run directory exists).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import traceback
from datetime import datetime, timezone
from pathlib import Path

import torch

from aasae import __version__
from aasae import config as cfgio
from aasae.data import DatasetDescriptor, DatasetError, load_dataset
from aasae.evalsuite import (
    ABLATION_AXES,
    EvalReport,
    alignment_report,
    config_fingerprint,
    linear_probe,
    run_ablation,
)
from aasae.rng import RngState
from aasae.trainer import ConfigError, load_checkpoint, pretrain

log = logging.getLogger("aasae")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def code_fingerprint() -> str:
    h = hashlib.sha256(__version__.encode())
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def new_run_dir(output_dir: Path, command: str) -> tuple[str, Path]:
    output_dir.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    for i in range(10000):
        run_id = f"{command}-{stamp}-{i:03d}"
        path = output_dir / run_id
        try:
            path.mkdir()
            return run_id, path
        except FileExistsError:
            continue
    raise RuntimeError(f"could not allocate a run directory in {output_dir}")


def write_manifest(run_dir: Path, run_id: str, command: str, argv: list[str], snapshot: dict, artifacts: dict) -> Path:
    manifest = {
        "run_id": run_id,
        "command": command,
        "argv": argv,
        "config": snapshot,
        "code_version": __version__,
        "code_fingerprint": code_fingerprint(),
        "torch_version": torch.__version__,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }
    path = run_dir / "manifest.json"
    with open(path, "x") as f:  # never overwrite
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


# --- config assembly -----------------------------------------------------------


def _load_experiment(args) -> cfgio.ExperimentConfig:
    cfg = cfgio.load(args.config) if getattr(args, "config", None) else cfgio.ExperimentConfig()
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "variant", None):
        overrides.append(f'train.objective.variant="{args.variant.upper()}"')
        if args.variant.upper() != cfg.train.objective.variant:
            overrides.append("train.objective.beta=" + ("1.0" if args.variant.upper() == "VAE" else "0.0"))
            overrides += ["train.objective.sampling=" + ("true" if args.variant.upper() in ("VAE", "AASAE", "HYBRID") else "false")]
            overrides += ["train.objective.augmented_input=" + ("true" if args.variant.upper() in ("AAAE", "AASAE", "HYBRID") else "false")]
    if getattr(args, "beta", None) is not None:
        overrides.append(f"train.objective.beta={float(args.beta)}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={int(args.seed)}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.max_epochs={int(args.epochs)}")
    if getattr(args, "dataset", None):
        overrides.append(f'dataset.name="{args.dataset}"')
    if getattr(args, "data_root", None):
        overrides.append(f'dataset.root="{args.data_root}"')
    if getattr(args, "output_dir", None):
        overrides.append(f'output_dir="{args.output_dir}"')
    if overrides:
        cfg = cfgio.apply_overrides(cfg, overrides)
    return cfg.check()


def _dataset(desc: DatasetDescriptor, split: str):
    return load_dataset(desc.with_split(split))


# --- subcommands ---------------------------------------------------------------


def cmd_pretrain(args, run_dir: Path) -> tuple[dict, dict]:
    cfg = args.experiment
    train_ds = _dataset(cfg.dataset, "pretrain")
    val_ds = _dataset(cfg.dataset, "val")
    result = pretrain(cfg.train, train_ds, run_dir, val_ds)
    artifacts = {"metrics": run_dir / "metrics.jsonl"}
    for ck in result.checkpoints:
        artifacts[ck.stem] = ck
    final = result.metrics[-1]
    print(json.dumps({"run_dir": str(run_dir), "final_train_loss": final["train_loss"], "checkpoints": [str(c) for c in result.checkpoints]}))
    return cfg.to_dict(), artifacts


def _experiment_for_checkpoint(args, ck_config) -> cfgio.ExperimentConfig:
    cfg = _load_experiment(args)
    cfg.train = ck_config
    return cfg


def cmd_probe(args, run_dir: Path) -> tuple[dict, dict]:
    model, ck_config, payload = load_checkpoint(args.checkpoint)
    cfg = _experiment_for_checkpoint(args, ck_config)
    if args.feature_source:
        cfg.probe.feature_source = args.feature_source
    if args.probe_epochs:
        cfg.probe.epochs = args.probe_epochs
    train_ds = _dataset(cfg.dataset, "probe-train")
    test_ds = _dataset(cfg.dataset, "probe-test")
    result = linear_probe(model, train_ds, test_ds, cfg.probe)
    report = EvalReport(
        probe_accuracy=result.accuracy,
        accuracy_curve=[(int(payload.get("epoch", 0)), result.accuracy)],
        config_fingerprint=config_fingerprint(cfg.train),
        extra={"train_accuracy": result.train_accuracy, "probe_lr": result.lr, "checkpoint": str(args.checkpoint), "probe": cfg.probe.to_dict()},
    )
    path = report.save(run_dir / "eval_report.json")
    print(json.dumps({"probe_accuracy": result.accuracy, "eval_report": str(path)}))
    return cfg.to_dict(), {"eval_report": path}


def cmd_diagnose(args, run_dir: Path) -> tuple[dict, dict]:
    model, ck_config, _ = load_checkpoint(args.checkpoint)
    cfg = _experiment_for_checkpoint(args, ck_config)
    m = args.examples or cfg.alignment.examples
    v = args.views or cfg.alignment.views
    test_ds = _dataset(cfg.dataset, "probe-test")
    if len(test_ds) < m:
        raise DatasetError(f"need {m} examples for the alignment report, dataset has {len(test_ds)}")
    images = test_ds.batch(list(range(m)))
    report = alignment_report(model, images, cfg.train.augmentation, v, RngState(cfg.train.seed).derive(11))
    evr = EvalReport(probe_accuracy=float("nan"), alignment=report, config_fingerprint=config_fingerprint(cfg.train))
    d = evr.to_dict()
    d.pop("probe_accuracy")
    path = run_dir / "alignment_report.json"
    path.write_text(json.dumps(d, indent=2, sort_keys=True))
    plot = _plot_similarity(report.similarity_matrix, run_dir / "similarity.png")
    print(json.dumps({"alignment_gap": report.alignment_gap, "collapse_score": report.collapse_score, "report": str(path)}))
    return cfg.to_dict(), {"alignment_report": path, "similarity_plot": plot}


def _plot_similarity(sim, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(sim, vmin=-1, vmax=1, cmap="coolwarm")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_title("cosine similarity of view representations")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _parse_values(axis: str, text: str) -> list:
    values = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if axis in ("batch_size", "latent_dim"):
            values.append(int(item))
        elif axis == "logscale":
            values.append(float(item))
        else:
            values.append(item)
    if not values:
        raise ConfigError([f"--values: no values given for axis {axis}"])
    return values


def cmd_ablate(args, run_dir: Path) -> tuple[dict, dict]:
    cfg = args.experiment
    try:
        values = _parse_values(args.axis, args.values)
    except ValueError as e:
        raise ConfigError([f"--values: {e}"]) from e
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.train.seed]
    pre = _dataset(cfg.dataset, "pretrain")
    probe_train = _dataset(cfg.dataset, "probe-train")
    probe_test = _dataset(cfg.dataset, "probe-test")
    rows = run_ablation(cfg.train, args.axis, values, pre, probe_train, probe_test, cfg.probe, run_dir, seeds)
    failed = sum(r["status"] != "ok" for r in rows)
    print(json.dumps({"ablation_csv": str(run_dir / "ablation.csv"), "rows": len(rows), "failed": failed}))
    return cfg.to_dict(), {"ablation_csv": run_dir / "ablation.csv", "ablation_plot": run_dir / "ablation.png"}


def cmd_report(args, run_dir: Path) -> tuple[dict, dict]:
    """Collect metrics and evaluation outputs from earlier runs into one summary."""
    summary = {}
    for src in args.runs:
        src = Path(src)
        entry = {}
        manifest = src / "manifest.json"
        if manifest.is_file():
            entry["manifest"] = json.loads(manifest.read_text())
        metrics = src / "metrics.jsonl"
        if metrics.is_file():
            rows = [json.loads(line) for line in metrics.read_text().splitlines() if line.strip()]
            entry["epochs"] = len(rows)
            entry["final"] = rows[-1] if rows else None
            entry["log_scale_trajectory"] = [r["log_scale"] for r in rows]
        for name in ("eval_report.json", "alignment_report.json"):
            p = src / name
            if p.is_file():
                d = json.loads(p.read_text())
                if d.get("alignment"):
                    d["alignment"].pop("similarity_matrix", None)
                entry[name.removesuffix(".json")] = d
        if (src / "ablation.csv").is_file():
            from aasae.evalsuite import read_ablation_csv

            entry["ablation"] = read_ablation_csv(src / "ablation.csv")
        if not entry:
            raise FileNotFoundError(f"{src}: no run artifacts found")
        summary[str(src)] = entry
    path = run_dir / "report.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=str))
    print(json.dumps({"report": str(path), "runs": len(summary)}))
    return {"runs": [str(r) for r in args.runs]}, {"report": path}


COMMANDS = {
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "diagnose": cmd_diagnose,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aasae", description="Augmentation-augmented stochastic autoencoders")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_variant=False):
        sp.add_argument("--config", help="experiment TOML file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (repeatable)")
        sp.add_argument("--output-dir", help="parent directory for run directories")
        sp.add_argument("--dataset", help="dataset name override")
        sp.add_argument("--data-root", help="dataset root (default: $AASAE_DATA_ROOT)")
        sp.add_argument("--seed", type=int)
        if with_variant:
            sp.add_argument("--variant", type=str.upper, choices=["AE", "AAAE", "VAE", "AASAE", "HYBRID"])
            sp.add_argument("--beta", type=float)
            sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("pretrain", help="pretrain an autoencoder")
    common(sp, with_variant=True)

    sp = sub.add_parser("probe", help="linear probe on a frozen checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--feature-source", choices=["backbone", "projection"])
    sp.add_argument("--probe-epochs", type=int)

    sp = sub.add_parser("diagnose", help="cosine-similarity alignment report")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--examples", type=int)
    sp.add_argument("--views", type=int)

    sp = sub.add_parser("ablate", help="one-axis hyperparameter sweep")
    common(sp, with_variant=True)
    sp.add_argument("--axis", required=True, choices=ABLATION_AXES)
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--seeds", help="comma-separated seeds (default: config seed)")

    sp = sub.add_parser("report", help="summarize earlier run directories")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--output-dir", default="runs")
    return p


def _error_record(kind: str, err: BaseException, fields: list[str] | None = None) -> dict:
    rec = {"error": kind, "type": type(err).__name__, "message": str(err)}
    if fields:
        rec["fields"] = fields
    return rec


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=os.environ.get("AASAE_LOG_LEVEL", "WARNING"), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK

    run_dir = None
    try:
        if args.command == "report":
            output_dir = Path(args.output_dir)
        else:
            if args.command in ("pretrain", "ablate"):
                args.experiment = _load_experiment(args)
                output_dir = Path(args.experiment.output_dir)
            else:
                output_dir = Path(args.output_dir or _load_experiment(args).output_dir)
        run_id, run_dir = new_run_dir(output_dir, args.command)
        snapshot, artifacts = COMMANDS[args.command](args, run_dir)
        write_manifest(run_dir, run_id, args.command, argv, snapshot, artifacts)
        return EXIT_OK
    except ConfigError as e:
        rec = _error_record("invalid_config", e, e.errors)
        code = EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - converted to an exit code and error record
        rec = _error_record("runtime_failure", e)
        rec["traceback"] = traceback.format_exc(limit=5)
        code = EXIT_RUNTIME
    if run_dir is not None:
        (run_dir / "error.json").write_text(json.dumps(rec, indent=2))
    print(json.dumps(rec), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
