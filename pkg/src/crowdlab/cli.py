"""Command line: gen, split, filter, train, adapt, eval, report.

Relative paths resolve against ``--root``, else $CROWDLAB_ROOT, else the
working directory. Every failure exits non-zero with a one-line message.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import scenes
from .config import ConfigError, validate_config, write_config
from .dataset import CrowdDataset, generate_samples, write_dataset
from .labels import STRATEGIES, Split, split_manifest
from .regularizers import DensityBound, FilterRule, scene_filter

log = logging.getLogger("crowdlab")


class CommandError(Exception):
    pass


def _root(args) -> Path:
    return Path(args.root or os.environ.get("CROWDLAB_ROOT") or ".")


def _path(args, p) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else _root(args) / p


def _existing(args, p, what) -> Path:
    path = _path(args, p)
    if path is None or not path.exists():
        raise CommandError(f"{what}: {p} does not exist")
    return path


def _load_split(args, p) -> Split:
    return Split.from_json(_existing(args, p, "--split"))


def _config(args):
    src = _existing(args, args.config, "--config") if args.config else None
    return validate_config(src, args.set or ())


def cmd_gen(args):
    out = _path(args, args.out)
    items = generate_samples(args.locations, args.seed, (args.height, args.width), args.scale,
                             scenes.STYLES[args.style], args.threshold, args.per_scene)
    manifest = write_dataset(out, items)
    scenes_seen = {(r["location_id"], r["camera_id"]) for r in manifest}
    print(f"wrote {len(manifest)} images from {len(scenes_seen)} scenes to {out}")


def cmd_split(args):
    ds = CrowdDataset(_existing(args, args.data, "--data"))
    split = split_manifest(ds.records, args.strategy, args.seed)
    out = _path(args, args.out) if args.out else _path(args, args.data) / f"split_{args.strategy}_{args.seed}.json"
    split.to_json(out)
    print(f"{args.strategy}: train {len(split.train_ids)} / val {len(split.val_ids)} / test {len(split.test_ids)} -> {out}")


def cmd_filter(args):
    data = _existing(args, args.data, "--data")
    rule_path = _path(args, args.rule)
    rule = FilterRule.load(rule_path if rule_path.exists() else args.rule)
    manifest = json.loads((data / "manifest.json").read_text())
    kept, rejected = scene_filter(manifest, rule)
    out = _path(args, args.out) if args.out else data
    out.mkdir(parents=True, exist_ok=True)
    tag = rule.name or Path(args.rule).stem
    (out / f"manifest.{tag}.json").write_text(json.dumps(kept, indent=1))
    (out / f"rejections.{tag}.json").write_text(json.dumps(rejected, indent=1))
    print(f"kept {len(kept)} of {len(manifest)}; rejection log: {out / f'rejections.{tag}.json'}")


def _run_dir(args, cfg) -> Path:
    runs = _path(args, args.runs)
    return runs / (args.run_id or f"{cfg.regime}-{cfg.hash}")


def cmd_train(args):
    from .train import pretrain_then_finetune, train_supervised

    cfg = _config(args)
    ds = CrowdDataset(_existing(args, args.data, "--data"))
    split = _load_split(args, args.split)
    run_dir = _run_dir(args, cfg)
    if cfg.regime == "supervised":
        rec = train_supervised(cfg, ds, split, run_dir)
        print(f"best epoch {rec.best_epoch}; checkpoint {rec.best_checkpoint}")
    elif cfg.regime == "pretrain_finetune":
        if not args.source_data or not args.source_split:
            raise CommandError("regime pretrain_finetune needs --source-data and --source-split")
        src = CrowdDataset(_existing(args, args.source_data, "--source-data"))
        res = pretrain_then_finetune(cfg, cfg, src, _load_split(args, args.source_split), ds, split, run_dir)
        write_config(cfg, run_dir)
        print(f"fine-tuned best {res.finetune.best_checkpoint}; scratch best {res.scratch.best_checkpoint}")
    else:
        raise CommandError(f"regime: {cfg.regime!r} is trained with the adapt verb")


def cmd_adapt(args):
    from .train import reconstruction_ssim, train_da_joint

    cfg = _config(args)
    if cfg.regime != "da_joint":
        cfg = validate_config({**cfg.to_dict(), "regime": "da_joint"})
    synth = CrowdDataset(_existing(args, args.data, "--data"))
    real = CrowdDataset(_existing(args, args.real, "--real")).images_only()
    split = _load_split(args, args.split)
    run_dir = _run_dir(args, cfg)
    run = train_da_joint(cfg, synth, split, real, run_dir)
    shown = [synth.image(i) for i in split.val_ids[:4]]
    ssim = reconstruction_ssim(run.models, shown, [real.image(i) for i in real.ids[:4]]) if shown else float("nan")
    print(f"best epoch {run.record.best_epoch}; reconstruction SSIM {ssim:.4f}; checkpoint {run.record.best_checkpoint}")


def cmd_eval(args):
    from .checkpoint import load_model
    from .metrics import evaluate_model, oracle_predictor

    ds = CrowdDataset(_existing(args, args.data, "--data"))
    ids = getattr(_load_split(args, args.split), f"{args.subset}_ids") if args.split else ds.ids
    if args.oracle:
        model = oracle_predictor(ds)
    elif args.ckpt:
        model = load_model(_existing(args, args.ckpt, "--ckpt"), "sfcn").eval()
    else:
        raise CommandError("eval needs --ckpt or --oracle")
    bound = None
    if args.bound:
        bound = DensityBound(json.loads(_existing(args, args.bound, "--bound").read_text())["max_s"])
    out = _path(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_model(model, ids, ds, bound=bound, csv_path=out / "per_sample.csv",
                            json_path=out / "report.json")
    print(report.table())


def cmd_report(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = _path(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["| run | best epoch | MAE | MSE | PSNR | SSIM | mIoU |", "|---|---|---|---|---|---|---|"]
    fig, (ax_loss, ax_mae) = plt.subplots(1, 2, figsize=(10, 4))
    for run in args.run_dirs:
        rd = _existing(args, run, "run directory")
        rec_path = rd / "record.json"
        if not rec_path.exists():
            raise CommandError(f"run directory: {rd} has no record.json")
        rec = json.loads(rec_path.read_text())
        name = rd.name
        steps = rec["steps"]
        ax_loss.plot([s["step"] for s in steps], [s["total"] for s in steps], label=name, lw=0.8)
        maes = [(e["epoch"], e["val"]["mae"]) for e in rec["epochs"] if e.get("val")]
        if maes:
            ax_mae.plot(*zip(*maes), label=name)
        best = next((e["val"] for e in rec["epochs"] if e["epoch"] == rec["best_epoch"] and e.get("val")), None)
        if best:
            lines.append(f"| {name} | {rec['best_epoch']} | {best['mae']:.2f} | {best['mse']:.2f} | "
                         f"{best['psnr']:.2f} | {best['ssim']:.3f} | {100 * best['miou']:.1f} |")
        else:
            lines.append(f"| {name} | {rec['best_epoch']} | - | - | - | - | - |")
    ax_loss.set(xlabel="step", ylabel="total loss", yscale="log")
    ax_mae.set(xlabel="epoch", ylabel="val MAE")
    for ax in (ax_loss, ax_mae):
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "curves.png", dpi=120)
    plt.close(fig)
    (out / "report.md").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crowdlab", description=__doc__.splitlines()[0])
    p.add_argument("--root", help="output root (default $CROWDLAB_ROOT or .)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset tree")
    g.add_argument("--locations", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="data")
    g.add_argument("--height", type=int, default=240)
    g.add_argument("--width", type=int, default=320)
    g.add_argument("--scale", type=float, default=0.1, help="factor on the 30/40/50 images-per-scene rule")
    g.add_argument("--per-scene", type=int, help="fixed images per scene (overrides --scale)")
    g.add_argument("--style", choices=sorted(scenes.STYLES), default="synthetic")
    g.add_argument("--threshold", type=float, default=0.5, help="visible-head fraction to keep a dot")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("split", help="write a train/val/test split")
    s.add_argument("--data", default="data")
    s.add_argument("--strategy", choices=STRATEGIES, default="random")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_split)

    f = sub.add_parser("filter", help="apply a scene-filter rule to a manifest")
    f.add_argument("--data", default="data")
    f.add_argument("--rule", required=True, help="rule JSON file or bundled name (e.g. sht_b)")
    f.add_argument("--out")
    f.set_defaults(func=cmd_filter)

    for verb, func, helptext in (("train", cmd_train, "supervised or pre-train/fine-tune run"),
                                 ("adapt", cmd_adapt, "joint domain-adaptation run")):
        t = sub.add_parser(verb, help=helptext)
        t.add_argument("--config")
        t.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override")
        t.add_argument("--data", default="data")
        t.add_argument("--split", required=True)
        t.add_argument("--runs", default="runs")
        t.add_argument("--run-id")
        if verb == "train":
            t.add_argument("--source-data")
            t.add_argument("--source-split")
        else:
            t.add_argument("--real", required=True, help="target-domain dataset (images only are read)")
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", default="data")
    e.add_argument("--split")
    e.add_argument("--subset", choices=("train", "val", "test"), default="test")
    e.add_argument("--ckpt")
    e.add_argument("--oracle", action="store_true", help="score the groundtruth itself")
    e.add_argument("--bound", help="density_bound.json from an adapt run")
    e.add_argument("--out", default="eval")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="markdown table and loss/metric plots over runs")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--out", default="report")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (CommandError, ConfigError, ValueError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"crowdlab {args.verb}: error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
