"""Command-line entry point: ``setfusion <verb> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import torch

from . import autodiff as ad
from .cohort import CohortError, feature_manifest, load_cohort, write_cohort
from .config import RunConfig, default_config, key_table, load_config
from .evaluation import (
    ABLATION_ARMS,
    EvaluationError,
    ablate,
    attention_report,
    evaluate,
    fls_search,
    sweep_report,
)
from .metrics import MetricReport, MetricRow
from .model import ConfigError, load_model
from .plotting import plot_fls, plot_sweep
from .synth import generation_report, synth_generate
from .train import prepare, train

log = logging.getLogger("setfusion")

SPLITS = ("train", "val", "test")


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _config(args) -> RunConfig:
    cfg = load_config(args.config, args.preset) if args.config else default_config(args.preset or "desk")
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.synth = dataclasses.replace(cfg.synth, seed=args.seed)
    if args.task is not None:
        cfg.train = dataclasses.replace(cfg.train, task=args.task)
    if args.maa is not None:
        cfg.fusion = dataclasses.replace(cfg.fusion, maa=args.maa)
    if args.out is not None:
        cfg.paths["out_dir"] = args.out
    return cfg


def _data_dir(args, cfg: RunConfig) -> Path:
    return Path(getattr(args, "data", None) or cfg.paths["data_dir"])


def load_splits(data_dir: Path) -> tuple[dict, dict]:
    """Read the three split files after checking them against the manifest."""
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise CommandError(f"{manifest_path} not found; run gen-data first")
    manifest = json.loads(manifest_path.read_text())
    splits = {}
    for name in SPLITS:
        path = data_dir / f"{name}.jsonl"
        if _sha256(path) != manifest["files"][name]:
            raise CommandError(f"{path} does not match its manifest checksum; refusing to use it")
        splits[name] = load_cohort(path, manifest["features"]["schema_version"]).records
    return splits, manifest


def _prepared(args, cfg: RunConfig):
    splits, manifest = load_splits(_data_dir(args, cfg))
    return prepare(splits, cfg.fusion, cfg.train.task, cfg.train.eval_seed)


def _checkpoints(args, cfg: RunConfig, data) -> dict:
    """Best checkpoint per seed: explicit ``--checkpoint`` paths or the train directory."""
    paths = [Path(p) for p in (args.checkpoint or [])]
    if not paths:
        paths = sorted((Path(cfg.paths["out_dir"]) / "train").glob("*.ckpt"))
    if not paths:
        raise CommandError("no checkpoint found; pass --checkpoint or run train first")
    chosen = {}
    for p in paths:
        if not p.exists():
            raise CommandError(f"checkpoint {p} not found")
        model, meta = load_model(p)
        if meta.get("fingerprint_extra", {}).get("data") != data.fingerprint:
            raise CommandError(f"{p} was trained on different data or task; refusing to evaluate")
        seed = meta["fingerprint_extra"]["seed"]
        if seed not in chosen or meta["best_val_auprc"] > chosen[seed][1]["best_val_auprc"]:
            chosen[seed] = (model, meta)
    return {s: m for s, (m, _) in sorted(chosen.items())}


def _out(cfg: RunConfig, *parts) -> Path:
    path = Path(cfg.paths["out_dir"]).joinpath(*parts)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# verbs


def cmd_gen_data(args, cfg: RunConfig) -> None:
    out = Path(args.out) if args.out else Path(cfg.paths["data_dir"])
    out.mkdir(parents=True, exist_ok=True)
    splits = synth_generate(cfg.synth)
    files = {}
    for name in SPLITS:
        path = out / f"{name}.jsonl"
        write_cohort(path, splits[name])
        files[name] = _sha256(path)
    manifest = {"features": feature_manifest(), "files": files, "synth": cfg.synth.to_dict(), "config_fingerprint": cfg.fingerprint()}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    rows = [dict(r, fingerprint=cfg.fingerprint()) for r in generation_report(splits)]
    _write_rows(out / "generation_report.csv", rows)
    for r in rows:
        print(
            f"{r['split']:>5}: {r['patients']} patients, image missing {r['image_missing_rate']:.3f}, "
            f"text missing {r['text_missing_rate']:.3f}"
        )


def cmd_train(args, cfg: RunConfig) -> None:
    data = _prepared(args, cfg)
    out = Path(cfg.paths["out_dir"]) / "train"
    results = train(cfg.fusion, cfg.train, data, out)
    rows = []
    for r in results:
        row = {"run_id": r.run_id, "lr": r.lr, "seed": r.seed, "best_epoch": r.best_epoch, "best_val_auprc": r.best_auprc}
        if r.model is not None:
            m = evaluate(r.model, data, "test").metrics()
            row.update(test_auprc=m["auprc"], test_auroc=m["auroc"])
        else:
            row.update(test_auprc=float("nan"), test_auroc=float("nan"))
        row.update(diverged=int(r.diverged), fingerprint=cfg.fingerprint())
        rows.append(row)
    _write_rows(out / "summary.csv", rows)
    for row in rows:
        print(f"{row['run_id']}: best epoch {row['best_epoch']}, val AUPRC {row['best_val_auprc']:.4f}, test AUPRC {row['test_auprc']:.4f}")


def cmd_eval(args, cfg: RunConfig) -> None:
    data = _prepared(args, cfg)
    models = _checkpoints(args, cfg, data)
    split = args.split
    vals = {"auprc": {}, "auroc": {}}
    for seed, model in models.items():
        for k, v in evaluate(model, data, split).metrics().items():
            vals[k][seed] = v
    rep = MetricReport("eval", [MetricRow({"split": split, "task": data.task}, vals)], list(models), cfg.fingerprint())
    path = _out(cfg, f"eval_{split}.csv")
    rep.write_csv(path)
    if all(m.cfg.maa == "ctaa" for m in models.values()):
        rows = []
        for seed, model in models.items():
            for pattern, w in attention_report(model, data, split).items():
                rows.append({"seed": seed, "presence": pattern, **w})
        _write_rows(_out(cfg, f"attention_{split}.csv"), rows)
    print(f"AUPRC {rep.rows[0].mean('auprc'):.4f}  AUROC {rep.rows[0].mean('auroc'):.4f} -> {path}")


def cmd_sweep(args, cfg: RunConfig) -> None:
    data = _prepared(args, cfg)
    models = _checkpoints(args, cfg, data)
    spec = cfg.sweep
    if args.modality:
        spec = dataclasses.replace(spec, modality=args.modality)
    if args.fractions:
        spec = dataclasses.replace(spec, fractions=tuple(float(f) for f in args.fractions.split(",")))
    spec.validate()
    rep = sweep_report(models, data, spec, cfg.fingerprint())
    path = _out(cfg, f"sweep_{spec.modality}.csv")
    rep.write_csv(path)
    if not args.no_plot:
        plot_sweep({cfg.fusion.maa.upper(): rep}, path.with_suffix(""), png=args.png)
    for row in rep.rows:
        print(f"f={row.condition['fraction']:.2f} ({row.condition['case_pct']:.1f}% of cases): AUPRC {row.mean('auprc'):.4f}")


def _layers(text: str | None, n: int) -> list[int]:
    if not text:
        return list(range(1, n + 1))
    if "-" in text:
        lo, hi = text.split("-")
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.split(",")]


def cmd_fls(args, cfg: RunConfig) -> None:
    data = _prepared(args, cfg)
    res = fls_search(cfg.fusion, cfg.train, data, _layers(args.layers, cfg.fusion.layers), Path(cfg.paths["out_dir"]) / "fls")
    path = _out(cfg, "fls.csv")
    res.report.write_csv(path)
    if not args.no_plot:
        plot_fls(res.report, path.with_suffix(""), png=args.png)
    for row in res.report.rows:
        mark = " *" if row.condition["fusion_layer"] == res.selected else ""
        print(f"L_fusion={row.condition['fusion_layer']}: val AUPRC {row.mean('auprc'):.4f}{mark}")


def cmd_ablate(args, cfg: RunConfig) -> None:
    data = _prepared(args, cfg)
    arms = args.arms.split(",") if args.arms else list(ABLATION_ARMS)
    rep, _ = ablate(cfg.fusion, cfg.train, data, arms, out_dir=Path(cfg.paths["out_dir"]) / "ablate")
    path = _out(cfg, "ablation.csv")
    rep.write_csv(path)
    for row in rep.rows:
        print(f"{row.condition['arm']}: test AUPRC {row.mean('auprc'):.4f}")


def cmd_report(args, cfg: RunConfig) -> None:
    """Render charts for every sweep/FLS CSV in the run directory and index them."""
    out = Path(cfg.paths["out_dir"])
    if not out.exists():
        raise CommandError(f"{out} does not exist")
    lines = ["# Run report", "", f"config fingerprint: `{cfg.fingerprint()}`", ""]
    for path in sorted(out.glob("*.csv")):
        with open(path, newline="") as fh:
            if next(csv.reader(fh), [""])[0] != "report":
                continue  # per-window or attention tables are not metric reports
        rep = MetricReport.read_csv(path)
        if rep.kind == "sweep":
            plot_sweep({cfg.fusion.maa.upper(): rep}, path.with_suffix(""), png=args.png)
        elif rep.kind == "fls":
            plot_fls(rep, path.with_suffix(""), png=args.png)
        lines.append(f"## {path.name}")
        lines.append("")
        keys = [k for k in rep.rows[0].condition]
        lines.append("| " + " | ".join(keys + ["AUPRC", "AUROC"]) + " |")
        lines.append("|" + "---|" * (len(keys) + 2))
        for row in rep.rows:
            cells = [str(row.condition[k]) for k in keys] + [f"{row.mean('auprc'):.4f}", f"{row.mean('auroc'):.4f}"]
            lines.append("| " + " | ".join(cells) + " |")
        if path.with_suffix(".svg").exists():
            lines += ["", f"![{path.stem}]({path.with_suffix('.svg').name})"]
        lines.append("")
    (out / "report.md").write_text("\n".join(lines))
    print(f"wrote {out / 'report.md'}")


VERBS = {
    "gen-data": (cmd_gen_data, "generate the synthetic cohort (train/val/test + manifest + report)"),
    "train": (cmd_train, "train every (lr, seed) point; best checkpoints, logs and a summary"),
    "eval": (cmd_eval, "score the fixed evaluation windows with the best checkpoint per seed"),
    "sweep-missing": (cmd_sweep, "mask a growing fraction of image/text-bearing test cases"),
    "fls": (cmd_fls, "fusion-layer search: train per start layer, select by validation AUPRC"),
    "ablate": (cmd_ablate, "train and test the embedding ablation arms"),
    "report": (cmd_report, "render charts and a markdown index for the CSVs in --out"),
}


def build_parser() -> argparse.ArgumentParser:
    def common(default):
        # the same flags are accepted before and after the verb; the verb-level
        # copies use SUPPRESS so they never overwrite a value given earlier
        c = argparse.ArgumentParser(add_help=False, argument_default=default)
        c.add_argument("--config", help="YAML run config (keys listed below)")
        c.add_argument("--preset", choices=("full", "desk"), help="base values the config overrides (default desk)")
        c.add_argument("--seed", type=int, help="master seed")
        c.add_argument("--out", help="output directory (data directory for gen-data)")
        c.add_argument("--task", choices=("mortality", "vasopressor", "intubation"))
        c.add_argument("--maa", choices=("tsa", "aa", "ctaa"), help="logit combination head")
        c.add_argument("-v", "--verbose", action="store_true")
        return c

    epilog = "config keys (full preset vs desk preset):\n" + key_table()
    parser = argparse.ArgumentParser(
        prog="setfusion",
        description="Multi-modal set-embedding fusion on irregular EHR-like data.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        parents=[common(None)],
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for name, (_, text) in VERBS.items():
        p = sub.add_parser(name, help=text, description=text, epilog=epilog, parents=[common(argparse.SUPPRESS)],
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if name != "gen-data":
            p.add_argument("--data", help="cohort directory (default paths.data_dir)")
        if name in ("eval", "sweep-missing"):
            p.add_argument("--checkpoint", action="append", help="checkpoint file (repeatable, one per seed)")
        if name == "eval":
            p.add_argument("--split", choices=SPLITS, default="test")
        if name == "sweep-missing":
            p.add_argument("--modality", choices=("image", "text", "both"))
            p.add_argument("--fractions", help="comma-separated fractions, e.g. 0,0.5,1")
        if name == "fls":
            p.add_argument("--layers", help="range like 1-6 or a list like 1,3,6 (default all)")
        if name == "ablate":
            p.add_argument("--arms", help=f"comma-separated subset of {','.join(ABLATION_ARMS)}")
        if name in ("sweep-missing", "fls", "report"):
            p.add_argument("--png", action="store_true", help="also write PNG charts")
        if name in ("sweep-missing", "fls"):
            p.add_argument("--no-plot", action="store_true", help="skip the SVG chart")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        cfg = _config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        VERBS[args.verb][0](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CommandError, CohortError, EvaluationError, ad.CheckpointError, ad.NumericFault, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
