"""Command-line entry point: ``idealdml {gen-data,train,eval,compare,embed}``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error
(including divergence).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .datasets import export_image_folder, generate_synthetic, glyph_config_dict, load_image_folder
from .model import ConfigError
from .retrieval import RecallReport, ensemble_embed, evaluate
from .trainer import evaluation_record, load_run, train
from .transforms import DomainSet

log = logging.getLogger("idealdml")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# name -> (mode, use the config's domains?, split heads)
PRESETS = {
    "plain": ("DataAug", False, False),
    "dataaug": ("DataAug", True, False),
    "multimodel": ("MultiModel", True, False),
    "ideal": ("IDEAL", True, True),
    "ideal-shared": ("IDEAL", True, False),
}

REPORTS_FILE = "reports.jsonl"
COMPARE_CSV = "compare.csv"
COMPARE_JSONL = "compare.jsonl"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _config(args) -> ExperimentConfig:
    return load_config(args.config, overrides=args.set or ())


def preset_config(cfg: ExperimentConfig, mechanism: str, seed: int) -> ExperimentConfig:
    """Config for one compare cell: the named mechanism preset at ``seed``."""
    if mechanism not in PRESETS:
        raise ConfigError(f"unknown mechanism {mechanism!r} (choose from {', '.join(PRESETS)})", "--mechanisms")
    mode, keep_domains, split = PRESETS[mechanism]
    domains = cfg.mechanism.domains if keep_domains else DomainSet((0,))
    return cfg.with_mechanism(mode=mode, domains=domains, split_heads=split, seed=seed)


def _write_jsonl(path: Path, rows) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _write_csv(path: Path, rows: list[dict]) -> None:
    columns = []
    for r in rows:
        columns += [k for k in r if k not in columns]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _eval_dataset(cfg: ExperimentConfig, data: str | None):
    if data is not None:
        ds = load_image_folder(data, cfg.dataset.image_size if cfg.dataset.path else cfg.dataset.synthetic.image_size,
                               cfg.dataset.channels if cfg.dataset.path else 1)
        return replace(ds, split="test")
    return cfg.load_splits()[1]


def _checkpoint_path(cfg: ExperimentConfig, given: str | None) -> Path:
    p = Path(given) if given else cfg.output_path() / "checkpoint"
    if p.is_dir():
        p = p / "checkpoint"
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    if not p.with_suffix(".json").exists():
        raise FileNotFoundError(f"no checkpoint at {p}.json")
    return p


def report_rows(reports: dict[str, RecallReport]) -> list[dict]:
    return [{"domain": name, **{f"R@{k}": v for k, v in sorted(r.recall.items())}} for name, r in reports.items()]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if cfg.dataset.synthetic is None:
        raise ConfigError("gen-data needs dataset.synthetic, the config names an image folder", "dataset.path")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} is not empty (use --force to replace it)")
        if not (out / "metadata.json").exists():
            raise UsageError(f"refusing to replace {out}: it does not look like a generated dataset")
        shutil.rmtree(out)
    ds = generate_synthetic(cfg.dataset.synthetic)
    export_image_folder(ds, out, {"generator": glyph_config_dict(cfg.dataset.synthetic)})
    log.info("wrote %d images in %d classes to %s", len(ds), ds.classes.size, out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = cfg.output_path(args.out)
    train_set, test_set = cfg.load_splits()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump())
    log.info("training %s (%s, split_heads=%s) on %d images -> %s", cfg.name, cfg.mechanism.mode,
             cfg.mechanism.split_heads, len(train_set), out)
    train(cfg.mechanism, train_set, test_set if not args.no_eval else None, out_dir=out, resume=args.resume,
          debug=args.debug)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = _checkpoint_path(cfg, args.checkpoint)
    run = load_run(ckpt)
    domains = DomainSet(tuple(args.domains)) if args.domains else run.config.eval_domains
    ks = args.ks or list(run.config.eval_ks)
    dataset = _eval_dataset(cfg, args.data)
    reports = evaluate(run.eval_target, dataset, domains, ks)
    out = Path(args.out) if args.out else ckpt.parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / REPORTS_FILE, [r.to_dict() for r in reports.values()])
    _write_csv(out / "recall.csv", report_rows(reports))
    for row in report_rows(reports):
        print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_embed(args) -> int:
    cfg = _config(args)
    ckpt = _checkpoint_path(cfg, args.checkpoint)
    run = load_run(ckpt)
    domains = DomainSet(tuple(args.domains)) if args.domains else run.config.eval_domains
    if args.data is not None:
        dataset = _eval_dataset(cfg, args.data)
    else:
        train_set, test_set = cfg.load_splits()
        dataset = {"train": train_set, "test": test_set}[args.split]
    emb = ensemble_embed(run.eval_target, dataset, domains)
    path = emb.save(args.out if args.out else ckpt.parent / "embeddings")
    log.info("wrote %d x %d embeddings (%d segments) to %s", emb.data.shape[0], emb.data.shape[1],
             len(emb.segments), path)
    return EXIT_OK


def run_cell(cfg: ExperimentConfig, mechanism: str, seed: int, out_dir: Path, splits=None) -> dict:
    """Train one (mechanism, seed) cell, reusing finished epochs found in ``out_dir``; return its table row."""
    cell = preset_config(cfg, mechanism, seed)
    train_set, test_set = splits if splits is not None else cell.load_splits()
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(cell.dump())
    t0 = time.perf_counter()
    run = train(cell.mechanism, train_set, test_set, out_dir=out_dir, resume=True, debug=True)
    metrics = run.history[-1] if run.history else evaluation_record(run, test_set)
    row = {"mechanism": mechanism, "seed": seed, "epochs": run.epochs_done}
    row.update({k: v for k, v in metrics.items() if k.startswith(("R@", "ensemble/"))})
    # training plus per-epoch evaluation time, as recorded when each epoch ran
    row["seconds"] = round(sum(r.get("seconds", 0.0) for r in run.history), 3)
    log.info("cell %s seed %d done in %.1fs", mechanism, seed, time.perf_counter() - t0)
    return row


def aggregate_rows(rows: list[dict]) -> list[dict]:
    """Per-mechanism mean and sample standard deviation over seeds.

    A mechanism run with a single seed gets no aggregate rows.
    """
    out = []
    for mech in dict.fromkeys(r["mechanism"] for r in rows):
        group = [r for r in rows if r["mechanism"] == mech]
        if len(group) < 2:
            continue
        metrics = [k for k in group[0] if k not in ("mechanism", "seed", "epochs")]
        mean = {"mechanism": mech, "seed": "mean", "epochs": group[0]["epochs"]}
        std = {"mechanism": mech, "seed": "std", "epochs": group[0]["epochs"]}
        for k in metrics:
            vals = np.array([r[k] for r in group], dtype=float)
            mean[k] = float(np.mean(vals))
            std[k] = float(np.std(vals, ddof=1))
        out += [mean, std]
    return out


def compare(cfg: ExperimentConfig, mechanisms, seeds, out: Path, jobs: int = 1) -> list[dict]:
    """Run every (mechanism, seed) cell and write ``compare.csv`` and ``compare.jsonl`` into ``out``."""
    for m in mechanisms:
        preset_config(cfg, m, 0)
    cells = [(m, s) for m in mechanisms for s in seeds]
    out.mkdir(parents=True, exist_ok=True)
    dirs = [out / "cells" / f"{m}-seed{s}" for m, s in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_cell, cfg, m, s, d) for (m, s), d in zip(cells, dirs)]
            rows = [f.result() for f in futures]
    else:
        splits = cfg.load_splits()
        rows = [run_cell(cfg, m, s, d, splits) for (m, s), d in zip(cells, dirs)]
    table = rows + aggregate_rows(rows)
    _write_csv(out / COMPARE_CSV, table)
    _write_jsonl(out / COMPARE_JSONL, table)
    return table


def cmd_compare(args) -> int:
    cfg = _config(args)
    out = cfg.output_path(args.out)
    table = compare(cfg, args.mechanisms.split(","), args.seeds, out, args.jobs)
    keys = [k for k in table[0] if k.startswith("R@1/") or k == "ensemble/R@1"]
    print("mechanism     seed  " + "  ".join(f"{k:>14}" for k in keys))
    for r in table:
        print(f"{r['mechanism']:<13} {str(r['seed']):<5} " + "  ".join(f"{100 * r[k]:14.2f}" for k in keys))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="idealdml", description=__doc__.splitlines()[0])
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("config", help="experiment YAML file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. --set loss.kind=triplet (repeatable)")
        sp.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="only log warnings and errors")

    sp = sub.add_parser("gen-data", help="write the synthetic dataset as an image folder")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true", help="replace an existing generated dataset")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train one mechanism; writes checkpoint and history.jsonl")
    common(sp)
    sp.add_argument("--out", help="run directory (default: output.dir)")
    sp.add_argument("--resume", action="store_true", help="continue from the checkpoint in the run directory")
    sp.add_argument("--no-eval", action="store_true", help="skip per-epoch test evaluation")
    sp.add_argument("--debug", action="store_true", help="record timings and cross-domain pair counts")
    sp.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "Recall@K per domain and for the ensemble"),
                                 ("embed", cmd_embed, "export ensemble embeddings")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--checkpoint", help="checkpoint file or run directory (default: output.dir)")
        sp.add_argument("--data", help="image folder to use instead of the configured test split")
        sp.add_argument("--domains", type=_int_list, help="rotation indices, e.g. 0,1,2,3")
        sp.add_argument("--out", help="output directory (eval) or file stem (embed)")
        if name == "eval":
            sp.add_argument("--ks", type=_int_list, help="Recall@K cutoffs, e.g. 1,2,4,8")
        else:
            sp.add_argument("--split", choices=("train", "test"), default="test")
        sp.set_defaults(func=func)

    sp = sub.add_parser("compare", help="train several mechanisms over seeds and tabulate Recall@1")
    common(sp)
    sp.add_argument("--mechanisms", default="plain,dataaug,multimodel,ideal",
                    help=f"comma-separated presets from: {', '.join(PRESETS)}")
    sp.add_argument("--seeds", type=_int_list, default=[0])
    sp.add_argument("--out", help="output directory (default: output.dir)")
    sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("traceback", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
