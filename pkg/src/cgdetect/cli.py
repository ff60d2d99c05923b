"""Command-line surface: train, eval, predict, gradcheck, ablate, split,
gen-synthetic, dump-kernels, summary.

Config precedence is defaults < config file < flags. The config file is flat
`key=value` text whose keys match the flag names: lr, batch_size, epochs,
lr_step, lr_gamma, weight_decay, seed, fusion, pooling_residual,
pooling_joint, residual_layers, filter_set, crop, width_multiplier.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gradcheck
from .data import (DataError, Manifest, generate_synthetic, load_and_crop,
                   split_manifest)
from .model import (ABLATION_NAMES, ModelConfig, ablation_variant, build_model)
from .ops import NumericError, softmax_cross_entropy
from .params import (CheckpointError, SgdConfig, load_into_store,
                     read_checkpoint, save_checkpoint)
from .srm import SUBSET_NAMES, format_kernels, load_bank
from .train import evaluate, train


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration (defaults are the published recipe)
# ---------------------------------------------------------------------------

def _parse_layers(text: str) -> tuple:
    text = text.strip()
    if text in ("", "none"):
        return ()
    try:
        return tuple(sorted(int(t) for t in text.split(",")))
    except ValueError:
        raise UsageError(f"residual_layers must be comma-separated integers "
                         f"or 'none', got {text!r}")


@dataclass
class RunConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 120
    lr_step: int = 20
    lr_gamma: float = 0.5
    weight_decay: float = 1e-3
    seed: int = 0
    fusion: str = "concat"
    pooling_residual: str = "softpool"
    pooling_joint: str = "softpool"
    residual_layers: tuple = (2, 3, 4)
    filter_set: str = "all_30"
    crop: int = 224
    width_multiplier: float = 1.0
    joint_residual_blocks: bool = False

    def sgd_config(self) -> SgdConfig:
        return SgdConfig(lr0=self.lr, lr_gamma=self.lr_gamma,
                         lr_step_epochs=self.lr_step,
                         weight_decay=self.weight_decay,
                         batch_size=self.batch_size, epochs=self.epochs)

    def model_config(self) -> ModelConfig:
        return ModelConfig(fusion=self.fusion,
                           residual_block_layers=self.residual_layers,
                           joint_stream_residual_blocks=self.joint_residual_blocks,
                           pooling_residual=self.pooling_residual,
                           pooling_joint=self.pooling_joint,
                           filter_subset=self.filter_set,
                           crop=self.crop,
                           width_multiplier=self.width_multiplier)

    def log_items(self) -> list:
        items = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "residual_layers":
                v = ",".join(str(i) for i in v) or "none"
            items.append((f.name, v))
        return items


_FILE_KEYS = {
    "lr": float, "batch_size": int, "epochs": int, "lr_step": int,
    "lr_gamma": float, "weight_decay": float, "seed": int, "fusion": str,
    "pooling_residual": str, "pooling_joint": str,
    "residual_layers": _parse_layers, "filter_set": str, "crop": int,
    "width_multiplier": float,
}


def _read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    values = {}
    for i, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{i}: expected key=value")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _FILE_KEYS:
            raise UsageError(f"{path}:{i}: unknown config key {key!r}")
        try:
            values[key] = _FILE_KEYS[key](raw)
        except UsageError:
            raise
        except ValueError:
            raise UsageError(f"{path}:{i}: bad value for {key}: {raw!r}")
    return values


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = dataclasses.replace(cfg, **_read_config_file(args.config))
    overrides = {}
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            if f.name == "residual_layers":
                v = _parse_layers(v)
            if f.name == "joint_residual_blocks":
                v = bool(v)
            overrides[f.name] = v
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr-step", type=int)
    p.add_argument("--lr-gamma", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--fusion", choices=("concat", "logit_avg", "residual_only",
                                        "joint_only"))
    p.add_argument("--pooling-residual", choices=("softpool", "maxpool"))
    p.add_argument("--pooling-joint", choices=("softpool", "maxpool"))
    p.add_argument("--residual-layers", metavar="I,J,K",
                   help="layers with the two-branch block, e.g. 2,3,4 or none")
    p.add_argument("--filter-set", choices=SUBSET_NAMES)
    p.add_argument("--crop", type=int)
    p.add_argument("--width-multiplier", type=float)
    p.add_argument("--joint-residual-blocks", type=int, choices=(0, 1))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    train_m = Manifest.read(args.train_manifest)
    val_m = Manifest.read(args.val_manifest)
    model = build_model(cfg.model_config(), seed=cfg.seed)
    resolved = cfg.log_items() + [
        ("train_manifest", args.train_manifest),
        ("val_manifest", args.val_manifest),
        ("checkpoint", args.checkpoint),
    ]
    history = train(model, cfg.sgd_config(), train_m, val_m, cfg.seed,
                    log_path=args.log, checkpoint_path=args.checkpoint,
                    resolved_config=resolved)
    best = max(h[3] for h in history)
    print(f"trained {len(history)} epochs; best val_acc {best:.4f}; "
          f"checkpoint: {args.checkpoint}")
    return 0


def _load_model(checkpoint_path):
    entries, config_json = read_checkpoint(checkpoint_path)
    if config_json is None:
        raise CheckpointError("checkpoint carries no model config")
    model = build_model(ModelConfig.from_json(config_json))
    load_into_store(model.store, entries)
    return model


def _print_metrics(metrics, prefix=""):
    print(f"{prefix}Acc {100 * metrics.acc:.2f}%  TP={metrics.tp} TN={metrics.tn} "
          f"P={metrics.p} N={metrics.n}")


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    manifest = Manifest.read(args.manifest)
    if args.repeat_splits:
        ratios = tuple(float(r) for r in args.ratios.split(":"))
        accs = []
        for k in range(args.repeat_splits):
            _, _, test_m = split_manifest(manifest, ratios, args.seed + k)
            metrics = evaluate(model, test_m)
            accs.append(metrics.acc)
            _print_metrics(metrics, prefix=f"split {k}: ")
        print(f"mean Acc over {len(accs)} splits: {100 * float(np.mean(accs)):.2f}%")
    else:
        _print_metrics(evaluate(model, manifest))
    return 0


def cmd_predict(args) -> int:
    model = _load_model(args.checkpoint)
    pixels = load_and_crop(args.image, model.cfg.crop)
    start = time.perf_counter()
    logits = model.forward(pixels, mode="eval")
    latency_ms = (time.perf_counter() - start) * 1000.0
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    label = "pg" if int(logits.argmax()) == 1 else "cg"
    print(f"{label}  p(cg)={probs[0, 0]:.4f} p(pg)={probs[0, 1]:.4f}  "
          f"latency {latency_ms:.1f} ms")
    return 0


def _tiny_model_check(seed=0):
    cfg = ModelConfig(crop=32, width_multiplier=0.25, filter_subset="first_left")
    model = build_model(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 255.0, (2, 3, 32, 32))
    labels = np.array([0, 1])
    return gradcheck.check_model(model, x, labels, n_coords=50, seed=seed,
                                 tolerance=1e-3)


def cmd_gradcheck(args) -> int:
    override = None
    if args.perturb_softpool:
        from .softpool import softpool_backward

        def override(g, x):  # noqa: F811 - negative-control hook
            bad = softpool_backward(g, x)
            bad.flat[0] += 0.05
            return bad
    results = gradcheck.run_operator_suite(seed=args.seed or 0,
                                           softpool_backward_override=override)
    results.append(_tiny_model_check(seed=args.seed or 0))
    ok = True
    for r in results:
        print(r.line())
        ok = ok and r.passed
    if not ok:
        print("gradient check FAILED")
        return 3
    print("all gradient checks passed")
    return 0


_FAMILIES = {
    "streams": [("Only residual stream", "only_residual"),
                ("Only joint channel stream", "only_joint"),
                ("Ours", "default")],
    "filters": [("1st order", "subset:first_order"),
                ("2nd order", "subset:second_order"),
                ("3rd order", "subset:third_order"),
                ("3x3", "subset:all_3x3"),
                ("5x5", "subset:all_5x5"),
                ("Ours (all 30)", "default")],
    "residual": [("VA", "VA"), ("VB", "VB"), ("VC", "VC"),
                 ("4 layers", "layers4"), ("5 layers", "layers5"),
                 ("Ours (3 layers)", "default")],
    "pooling": [("M1", "M1"), ("M2", "M2"), ("M3", "M3"), ("Ours", "default")],
}


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    train_m = Manifest.read(args.train_manifest)
    val_m = Manifest.read(args.val_manifest)
    test_m = Manifest.read(args.test_manifest)
    rows = []
    for label, variant in _FAMILIES[args.family]:
        vcfg = ablation_variant(variant, cfg.model_config())
        try:
            model = build_model(vcfg, seed=cfg.seed)
            train(model, cfg.sgd_config(), train_m, val_m, cfg.seed, quiet=True)
            acc = evaluate(model, test_m).acc
            rows.append((label, f"{100 * acc:.1f}%", model.param_count()))
        except (DataError, NumericError, ValueError) as exc:
            rows.append((label, f"error: {exc}", "-"))
        print(f"{args.family}: finished {label}: {rows[-1][1]}", flush=True)
    width = max(len(r[0]) for r in rows)
    print(f"\n{'Model':<{width}}  {'Acc':>8}  Params")
    for label, acc, count in rows:
        print(f"{label:<{width}}  {acc:>8}  {count}")
    if args.out:
        Path(args.out).write_text(
            "model,acc,params\n"
            + "".join(f"{label},{acc},{count}\n" for label, acc, count in rows))
    return 0


def cmd_split(args) -> int:
    manifest = Manifest.read(args.manifest)
    ratios = tuple(float(r) for r in args.ratios.split(":"))
    parts = split_manifest(manifest, ratios, args.seed)
    for part, suffix in zip(parts, (".train", ".val", ".test")):
        out = Path(str(args.manifest) + suffix)
        part.write(out)
        print(f"{out}: {len(part)} records")
    return 0


def cmd_gen_synthetic(args) -> int:
    manifest = generate_synthetic(args.out_dir, args.count_per_class,
                                  args.size, args.seed, args.noise_sigma)
    print(f"wrote {len(manifest)} images and {Path(args.out_dir) / 'manifest.txt'}")
    return 0


def cmd_dump_kernels(args) -> int:
    print(format_kernels(load_bank()))
    return 0


def cmd_summary(args) -> int:
    cfg = _resolve_config(args)
    print(build_model(cfg.model_config(), seed=cfg.seed).summary())
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cgdetect",
                     description="CG-vs-photo detector: dual-stream CNN "
                                 "with residual preprocessing, from scratch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--checkpoint", default="model.ckpt")
    p.add_argument("--log", help="per-epoch CSV log path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--repeat-splits", type=int, default=0,
                   help="average over k seeded re-splits (tests on each "
                        "split's test portion)")
    p.add_argument("--ratios", default="3:1:1")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify a single image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("image")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every "
                                         "operator and a tiny whole model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb-softpool", action="store_true",
                   help="negative control: inject an error into the softpool "
                        "backward and expect a reported failure")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score one ablation family")
    _add_config_flags(p)
    p.add_argument("--family", required=True, choices=sorted(_FAMILIES))
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--out", help="also write the table as CSV")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("split", help="write .train/.val/.test manifests")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ratios", default="10:3:4")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("gen-synthetic", help="generate the synthetic "
                                             "noise-cue dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count-per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sigma", type=float, default=3.0)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("dump-kernels", help="print every filter kernel")
    p.set_defaults(func=cmd_dump_kernels)

    p = sub.add_parser("summary", help="print the architecture for a config")
    _add_config_flags(p)
    p.set_defaults(func=cmd_summary)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
