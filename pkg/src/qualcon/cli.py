"""Command-line entry point.

Configuration is a JSON or YAML file with optional sections::

    train:     TrainConfig fields (epochs, batch_size, lr, ...)
    corpus:    {size, seed, image_size, dir}       # dir: folder of PNG/PPM images
    bench:     {seed, n_base, levels, size, manifest}
    probe:     {seeds, lam}
    finetune:  FinetuneConfig fields plus {seeds}

Flags ``--seed`` and ``--workers`` override ``train.seed`` / ``train.workers``.
``QUALCON_CONFIG`` names a default config file.  Every run writes the fully
resolved config to ``<out>/config.json``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import imgproc
from .bench import IngestError, SyntheticBenchSpec, gen_synthetic_bench, ingest_external, make_corpus
from .degradation import PUBLISHED_APPROX, DegradationPlan, apply_plan, count_space, sample_plan
from .model import DegenerateFeatureError
from .rng import RngStream
from .train import (
    ABLATIONS,
    FinetuneConfig,
    NumericalFailure,
    PretrainState,
    TrainConfig,
    ablation_config,
    cross_family_grid,
    finetune,
    five_crop_features,
    linear_probe,
    pretrain,
    summarize,
)

log = logging.getLogger("qualcon")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = (".png", ".ppm")

DEFAULTS: dict[str, Any] = {
    "train": TrainConfig().to_dict(),
    "corpus": {"size": 256, "seed": 1, "image_size": 68, "dir": None},
    "bench": {"seed": 7, "n_base": 16, "levels": 5, "size": 68, "manifest": None},
    "probe": {"seeds": 20, "lam": 1.0},
    "finetune": {**asdict(FinetuneConfig()), "seeds": 20},
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2, which is our data-error code
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------- config


def load_config(path: str | None) -> dict[str, Any]:
    cfg = copy.deepcopy(DEFAULTS)
    path = path or os.environ.get("QUALCON_CONFIG")
    if not path:
        return cfg
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    text = p.read_text()
    try:
        user = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot parse config {p}: {exc}") from exc
    user = user or {}
    if not isinstance(user, dict):
        raise UsageError("config file must hold a mapping of sections")
    for section, values in user.items():
        if section not in cfg:
            raise UsageError(f"unknown config section {section!r}; expected one of {sorted(cfg)}")
        if not isinstance(values, dict):
            raise UsageError(f"config section {section!r} must be a mapping")
        unknown = set(values) - set(cfg[section])
        if unknown:
            raise UsageError(f"unknown keys in [{section}]: {sorted(unknown)}")
        cfg[section].update(values)
    return cfg


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if args.workers is not None:
        cfg["train"]["workers"] = args.workers
    return cfg


def train_config(cfg: dict[str, Any]) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid [train] config: {exc}") from exc


def finetune_config(cfg: dict[str, Any]) -> tuple[FinetuneConfig, int]:
    d = dict(cfg["finetune"])
    seeds = int(d.pop("seeds"))
    names = {f.name for f in fields(FinetuneConfig)}
    return FinetuneConfig(**{k: v for k, v in d.items() if k in names}), seeds


def write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def out_dir(args: argparse.Namespace, cfg: dict[str, Any] | None = None) -> Path:
    if args.out is None:
        raise UsageError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        write_json(out / "config.json", cfg)
    return out


def image_files(folder: Path) -> list[Path]:
    if not folder.is_dir():
        raise DataError(f"not a directory: {folder}")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_corpus(cfg: dict[str, Any]) -> list[np.ndarray]:
    c = cfg["corpus"]
    if c.get("dir"):
        files = image_files(Path(c["dir"]))
        if not files:
            raise DataError(f"corpus directory {c['dir']} holds no PNG/PPM images")
        return [read_checked(p) for p in files]
    return make_corpus(int(c["size"]), int(c["seed"]), int(c["image_size"]))


def load_bench(cfg: dict[str, Any]):
    b = cfg["bench"]
    if b.get("manifest"):
        return ingest_external(b["manifest"])
    spec = SyntheticBenchSpec(seed=int(b["seed"]), size=int(b["size"]))
    return gen_synthetic_bench(spec, int(b["n_base"]), int(b["levels"]))


def read_checked(path: Path) -> np.ndarray:
    try:
        return imgproc.read_image(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def encoder_params(args: argparse.Namespace, cfg: dict[str, Any]) -> tuple[PretrainState, str]:
    if args.checkpoint:
        try:
            return PretrainState.load(args.checkpoint), str(args.checkpoint)
        except (OSError, KeyError) as exc:
            raise DataError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    return PretrainState.fresh(train_config(cfg)), "random-init"


def fmt(v: float | None, digits: int = 4) -> str:
    return "undefined" if v is None or v != v else f"{v:.{digits}f}"


def metrics_text(title: str, res: dict[str, Any]) -> str:
    lines = [f"# {title}", "seed\tsrcc\tplcc"]
    for r in res["per_seed"]:
        lines.append(f"{r['seed']}\t{fmt(r['srcc'])}\t{fmt(r['plcc'])}")
    lines.append(f"median\t{fmt(res['median_srcc'])}\t{fmt(res['median_plcc'])}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- commands


def cmd_degrade(args: argparse.Namespace) -> int:
    out = out_dir(args)
    seed = 0 if args.seed is None else args.seed
    (out / "img").mkdir(exist_ok=True)
    rows = []
    if args.replay:
        recs = [json.loads(l) for l in Path(args.replay).read_text().splitlines() if l.strip()]
        src_dir = Path(args.input) if args.input else Path(args.replay).parent
        for rec in recs:
            img = read_checked(src_dir / rec["source"])
            rng = RngStream(int(rec["seed"])).child("degrade", rec["source"], int(rec["index"]))
            plan = DegradationPlan.from_dict(rec["plan"])
            imgproc.write_ppm(out / rec["path"], apply_plan(plan, img, rng.child("apply")))
            rows.append(rec)
    else:
        if args.input is None:
            raise UsageError("degrade needs --input (or --replay)")
        if args.count < 0:
            raise UsageError("--count must be >= 0")
        problems = []
        for path in image_files(Path(args.input)):
            try:
                img = imgproc.read_image(path)
            except (OSError, ValueError) as exc:
                problems.append(f"{path.name}: {exc}")
                continue
            for k in range(args.count):
                rng = RngStream(seed).child("degrade", path.name, k)
                plan = sample_plan(rng.child("plan"))
                rel = f"img/{path.stem}_{k:03d}.ppm"
                imgproc.write_ppm(out / rel, apply_plan(plan, img, rng.child("apply")))
                rows.append({"source": path.name, "index": k, "seed": seed, "path": rel, "plan": plan.to_dict()})
        if problems:
            raise DataError("unreadable inputs:\n" + "\n".join(f"  {p}" for p in problems))
    (out / "manifest.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    print(f"wrote {len(rows)} degraded images to {out}")
    return EXIT_OK


def cmd_count_space(args: argparse.Namespace) -> int:
    try:
        n = count_space(args.num_ops, args.max_order)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"count_space({args.num_ops}, {args.max_order}) = {n:,}")
    if (args.num_ops, args.max_order) == (9, 2):
        ratio = 2e7 / n
        print(
            f"note: the published text approximates this space as ~{PUBLISHED_APPROX}; "
            f"the exact count is {n:,}, smaller by a factor of {ratio:.2f}"
        )
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = resolve(args)
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    tc = train_config(cfg)
    out = out_dir(args, cfg)
    corpus = load_corpus(cfg)
    state = PretrainState.load(args.resume) if args.resume else None
    if state is not None and state.cfg != tc:
        raise UsageError("resume checkpoint was trained with a different config")
    state = pretrain(corpus, tc, state, out_dir=out)
    state.save(out / "final.npz")
    tr = state.trace
    summary = {"epochs": state.epoch, "steps": state.steps}
    if tr:
        per = max(1, len(corpus) // tc.batch_size)
        summary["first_epoch_loss"] = float(np.mean([r["total"] for r in tr[:per]]))
        summary["last_epoch_loss"] = float(np.mean([r["total"] for r in tr[-per:]]))
    write_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_probe(args: argparse.Namespace) -> int:
    cfg = resolve(args)
    out = out_dir(args, cfg)
    state, source = encoder_params(args, cfg)
    bench = load_bench(cfg)
    seeds = list(range(int(cfg["probe"]["seeds"])))
    res = linear_probe(state.encoder, state.theta_q, bench, seeds, lam=float(cfg["probe"]["lam"]))
    res["encoder"] = source
    write_json(out / "metrics.json", res)
    text = metrics_text(f"linear probe ({source})", res)
    (out / "metrics.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    cfg = resolve(args)
    out = out_dir(args, cfg)
    state, source = encoder_params(args, cfg)
    bench = load_bench(cfg)
    ft, n_seeds = finetune_config(cfg)
    images = bench.images()
    per_seed = []
    for s in range(n_seeds):
        r = finetune(state.encoder, state.theta_q, bench, s, ft, images)
        per_seed.append({k: r[k] for k in ("seed", "srcc", "plcc")})
    res = summarize(per_seed)
    res["encoder"] = source
    write_json(out / "metrics.json", res)
    text = metrics_text(f"fine-tune ({source})", res)
    (out / "metrics.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = resolve(args)
    out = out_dir(args, cfg)
    base = train_config(cfg)
    corpus = load_corpus(cfg)
    bench = load_bench(cfg)
    seeds = list(range(int(cfg["probe"]["seeds"])))
    lam = float(cfg["probe"]["lam"])
    images = bench.images()
    resize_to = int(cfg["finetune"]["resize_to"])
    results: dict[str, Any] = {}
    grid = None
    for name in ["none", *args.variants]:
        if name == "none":
            state = PretrainState.fresh(base)
        else:
            tc = ablation_config(base, name)
            state = pretrain(corpus, tc, out_dir=out / name)
        X = five_crop_features(state.encoder, state.theta_q, images, resize_to)
        res = linear_probe(None, None, bench, seeds, lam=lam, features=X)
        results[name] = {"median_srcc": res["median_srcc"], "median_plcc": res["median_plcc"], "per_seed": res["per_seed"]}
        print(f"{name}\tsrcc {fmt(res['median_srcc'])}\tplcc {fmt(res['median_plcc'])}")
        if name == "full" and any("family" in it.meta for it in bench.items):
            grid = cross_family_grid(X, bench, seeds, lam)
    write_json(out / "ablation.json", {"variants": results, "cross_family": grid})
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.run_dir)
    if not run.is_dir():
        raise DataError(f"run directory not found: {run}")
    trace_path = run / "trace.jsonl"
    metric_path = run / "metrics.json"
    abl_path = run / "ablation.json"
    if not (trace_path.exists() or metric_path.exists() or abl_path.exists()):
        raise DataError(f"{run} holds no trace.jsonl, metrics.json or ablation.json")
    plt.rcParams.update({"font.family": "DejaVu Sans", "font.size": 9, "svg.hashsalt": "qualcon"})
    lines = [f"report for {run}"]
    if trace_path.exists():
        trace = [json.loads(l) for l in trace_path.read_text().splitlines() if l.strip()]
        if not trace:
            lines.append("loss trace: no steps recorded")
        else:
            steps = np.arange(len(trace))
            fig, ax = plt.subplots(figsize=(6, 3.5), dpi=100)
            for key in ("total", "term1", "term2"):
                ax.plot(steps, [r[key] for r in trace], label=key, lw=1)
            ax.set_xlabel("step")
            ax.set_ylabel("loss")
            ax.legend()
            fig.tight_layout()
            fig.savefig(run / "loss.png", metadata={"Software": None})
            plt.close(fig)
            lines.append(
                f"loss trace: {len(trace)} steps, total {trace[0]['total']:.4f} -> {trace[-1]['total']:.4f} (loss.png)"
            )
    if metric_path.exists():
        m = json.loads(metric_path.read_text())
        lines.append(metrics_text(f"metrics ({m.get('encoder', '?')})", m).rstrip())
    if abl_path.exists():
        a = json.loads(abl_path.read_text())
        lines.append("# ablation\nvariant\tmedian srcc\tmedian plcc")
        for name, r in a["variants"].items():
            lines.append(f"{name}\t{fmt(r['median_srcc'])}\t{fmt(r['median_plcc'])}")
        grid = a.get("cross_family")
        if grid:
            names = list(grid)
            M = np.array([[np.nan if grid[r][c] is None else grid[r][c] for c in names] for r in names])
            lines.append("# cross-family srcc (rows: train family, columns: test family)")
            lines.append("\t" + "\t".join(names))
            for r, row in zip(names, M):
                lines.append(r + "\t" + "\t".join(fmt(v, 3) for v in row))
            fig, ax = plt.subplots(figsize=(4.5, 4), dpi=100)
            im = ax.imshow(M, vmin=-1, vmax=1, cmap="RdYlGn")
            ax.set_xticks(range(len(names)), names, rotation=45)
            ax.set_yticks(range(len(names)), names)
            for i in range(len(names)):
                for j in range(len(names)):
                    ax.text(j, i, fmt(M[i, j], 2), ha="center", va="center")
            fig.colorbar(im)
            fig.tight_layout()
            fig.savefig(run / "cross_family.png", metadata={"Software": None})
            plt.close(fig)
    text = "\n".join(lines) + "\n"
    (run / "summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML config file (default: $QUALCON_CONFIG)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--workers", type=int, help="data-preparation worker processes")
    common.add_argument("--out", help="output directory")
    p = _Parser(prog="qualcon", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("degrade", parents=[common], help="write degraded copies of a folder of images")
    s.add_argument("--input", help="folder of PNG/PPM images")
    s.add_argument("--count", type=int, default=1, help="degraded copies per image")
    s.add_argument("--replay", help="manifest to re-render without re-sampling plans")
    s.set_defaults(fn=cmd_degrade)

    s = sub.add_parser("count-space", parents=[common], help="exact number of degradation compositions")
    s.add_argument("--num-ops", type=int, default=9)
    s.add_argument("--max-order", type=int, default=2)
    s.set_defaults(fn=cmd_count_space)

    s = sub.add_parser("pretrain", parents=[common], help="contrastive pretraining")
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(fn=cmd_pretrain)

    for name, fn, text in (("probe", cmd_probe, "linear probe on a frozen encoder"), ("finetune", cmd_finetune, "end-to-end fine-tuning")):
        s = sub.add_parser(name, parents=[common], help=text)
        g = s.add_mutually_exclusive_group(required=True)
        g.add_argument("--checkpoint")
        g.add_argument("--random-init", action="store_true")
        s.set_defaults(fn=fn)

    s = sub.add_parser("ablate", parents=[common], help="pretrain and probe ablation variants")
    s.add_argument(
        "--variants", nargs="+", default=["full", "inter_only", "fixed_sequence"], choices=sorted(ABLATIONS)
    )
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("report", parents=[common], help="text summary and plots for a run directory")
    s.add_argument("run_dir")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, DegenerateFeatureError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, IngestError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
