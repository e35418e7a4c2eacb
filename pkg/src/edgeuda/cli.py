"""Command-line surface: dataset generation, training, evaluation,
inference, and the four-arm ablation benchmark.

Exit codes: 0 success, 1 usage error, 2 data error (bad files, bad config),
3 numerical abort during training.  Config files are plain ``key=value``
lines; every key is documented in ``edgeuda train --help``.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

import numpy as np

from . import synthdata
from .checkpoint import CheckpointError
from .losses import LossWeights
from .metrics import evaluate, pixel_entropy, write_metrics_csv
from .pgm import PgmError, gray_to_float, read_pgm, write_pgm
from .tensor import NonFiniteError
from .trainer import (
    ARM_ORDER,
    ARM_PRESETS,
    ModelBundle,
    NumericalAbort,
    TrainConfig,
    apply_arm,
    benchmark_summary,
    infer,
    run_benchmark,
    run_experiment,
)

VERSION = "0.1.0"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# key=value config files
# ---------------------------------------------------------------------------

_BOOL_WORDS = {"1": True, "0": False, "true": True, "false": False, "yes": True, "no": False}


def _parse_bool(raw: str) -> bool:
    try:
        return _BOOL_WORDS[raw.strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean (true/false/1/0), got {raw!r}") from None


# key -> (parser, description); alpha/beta/lam fold into LossWeights
CONFIG_KEYS = {
    "lr_nets": (float, "learning rate for the contour and segmentation networks"),
    "lr_disc": (float, "learning rate for both discriminators"),
    "momentum": (float, "SGD momentum for every optimizer"),
    "alpha": (float, "weight of the edge-map adversarial term"),
    "beta": (float, "weight of the feature adversarial term"),
    "lam": (float, "weight of the target self-entropy term"),
    "steps": (int, "number of training steps (required)"),
    "batch": (int, "batch size per domain"),
    "seed": (int, "master seed for init, data, and augmentation (required)"),
    "use_edge_adv": (_parse_bool, "enable edge-map adversarial adaptation"),
    "use_feat_adv": (_parse_bool, "enable feature adversarial adaptation"),
    "use_entropy": (_parse_bool, "enable target self-entropy minimization"),
    "use_edge_conditioning": (_parse_bool, "feed the edge map into the segmenter"),
    "detach_edges": (_parse_bool, "stop segmentation gradients at the edge map"),
    "literal_adversarial": (_parse_bool, "generator maximizes the discriminator loss directly"),
    "eval_every": (int, "evaluate held-out sets every N steps (0 = only at the end)"),
    "eval_n": (int, "held-out samples per domain"),
    "image_hw": (int, "image side length (multiple of 16)"),
    "classes": (int, "number of segmentation classes"),
    "tumor_probability": (float, "probability a phantom contains a tumor complex"),
    "augment_data": (_parse_bool, "rotate/crop training samples"),
}
REQUIRED_KEYS = ("steps", "seed")


def parse_config_text(text: str) -> dict:
    """Parse key=value lines (# comments, blank lines allowed) into a dict."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        parser = CONFIG_KEYS[key][0]
        try:
            values[key] = parser(val)
        except ConfigError:
            raise
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {val!r} for {key!r}") from None
    return values


def build_train_config(values: dict) -> TrainConfig:
    for key in REQUIRED_KEYS:
        if key not in values:
            raise ConfigError(f"missing required config key: {key}")
    values = dict(values)
    weights = LossWeights(
        alpha=values.pop("alpha", LossWeights().alpha),
        beta=values.pop("beta", LossWeights().beta),
        lam=values.pop("lam", LossWeights().lam),
    )
    try:
        return TrainConfig(weights=weights, **values)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_train_config(path) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}") from None
    return build_train_config(parse_config_text(text))


def config_to_dict(cfg: TrainConfig) -> dict:
    """Flat key=value view; feeding it back reproduces the run."""
    out = {}
    for key in CONFIG_KEYS:
        if key == "alpha":
            out[key] = cfg.weights.alpha
        elif key == "beta":
            out[key] = cfg.weights.beta
        elif key == "lam":
            out[key] = cfg.weights.lam
        else:
            out[key] = getattr(cfg, key)
    return out


# ---------------------------------------------------------------------------
# run manifests
# ---------------------------------------------------------------------------


def _utc_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def write_manifest(out_dir, command: str, config: dict, seed, outputs, started: str) -> str:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "started_utc": started,
        "finished_utc": _utc_now(),
        "version": f"edgeuda-{VERSION}",
        "outputs": sorted(os.path.relpath(p, out_dir) for p in outputs),
    }
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    started = _utc_now()
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    samples = [
        synthdata.sample_at(
            args.seed,
            i,
            domain=args.domain,
            hw=args.size,
            augment_data=False,
            with_label=args.domain == "source",
            with_edge=args.domain == "source",
        )
        for i in range(args.n)
    ]
    lines = synthdata.save_pgm_dataset(args.out, samples)
    outputs = [os.path.join(args.out, name) for row in lines for name in row.split("\t")]
    outputs.append(os.path.join(args.out, synthdata.MANIFEST_NAME))
    config = {"n": args.n, "size": args.size, "seed": args.seed, "domain": args.domain}
    write_manifest(args.out, "gen", config, args.seed, outputs, started)
    print(f"wrote {args.n} {args.domain} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    started = _utc_now()
    cfg = load_train_config(args.config)
    if args.arm is not None:
        cfg = apply_arm(cfg, args.arm)
    result = run_experiment(cfg, out_dir=args.out, resume_from=getattr(args, "resume", None))
    write_manifest(args.out, "train", config_to_dict(cfg), cfg.seed, result.paths.values(), started)
    final = result.target_reports[-1][1]
    print(
        f"trained {result.bundle.step} steps; "
        f"target whole dice {final.dice_whole:.4f}, mean entropy {final.mean_entropy:.4f}"
    )
    return 0


def cmd_eval(args) -> int:
    bundle = ModelBundle.load(args.checkpoint)
    samples = [s for s in synthdata.load_pgm_dataset(args.data) if s.label is not None]
    if not samples:
        raise ValueError(f"no labeled samples in {args.data}")
    report = evaluate(bundle.infer, samples)
    write_metrics_csv(args.out, [(bundle.step, report)])
    print(
        f"evaluated {report.n_samples} samples: whole dice {report.dice_whole:.4f}, "
        f"mean entropy {report.mean_entropy:.4f} -> {args.out}"
    )
    return 0


def cmd_infer(args) -> int:
    bundle = ModelBundle.load(args.checkpoint)
    image = gray_to_float(read_pgm(args.image))
    class_map, edge_prob, soft = infer(bundle, image[None, None, :, :])
    classes = soft.shape[1]
    entropy = pixel_entropy(soft)[0] / math.log(classes)
    outputs = {
        f"{args.out_prefix}_seg.pgm": class_map[0].astype(np.uint8),
        f"{args.out_prefix}_edge.pgm": np.rint(edge_prob[0] * 255.0).astype(np.uint8),
        f"{args.out_prefix}_entropy.pgm": np.rint(np.clip(entropy, 0, 1) * 255.0).astype(np.uint8),
    }
    for path, arr in outputs.items():
        write_pgm(path, arr)
    print("wrote " + ", ".join(outputs))
    return 0


def cmd_bench(args) -> int:
    started = _utc_now()
    if args.config is not None:
        base = load_train_config(args.config)
    else:
        base = TrainConfig(steps=args.steps, seed=0)
    arms = tuple(args.arms.split(","))
    for arm in arms:
        if arm not in ARM_PRESETS:
            raise ConfigError(f"unknown arm {arm!r}; choose from {', '.join(ARM_ORDER)}")
    workers = max(1, int(os.environ.get("EDGEUDA_THREADS", "1")))
    outcomes = run_benchmark(
        base,
        seeds=tuple(range(args.seeds)),
        arms=arms,
        out_dir=args.out,
        max_workers=workers,
        progress=lambda o: print(
            f"  {o.arm} seed {o.seed}: target whole dice {o.target.dice_whole:.4f}"
        ),
    )
    summary = benchmark_summary(outcomes)
    outputs = [os.path.join(args.out, "benchmark.csv")]
    for arm, seed in ((o.arm, o.seed) for o in outcomes):
        run_dir = os.path.join(args.out, f"{arm}-seed{seed}")
        outputs.extend(os.path.join(run_dir, n) for n in os.listdir(run_dir))
    config = dict(config_to_dict(base), arms=",".join(arms), seeds=args.seeds)
    write_manifest(args.out, "bench", config, base.seed, outputs, started)
    print("arm means (target whole dice / target entropy):")
    for arm in arms:
        s = summary[arm]
        print(f"  {arm:>7}: {s['target_whole']:.4f} / {s['target_entropy']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _config_help() -> str:
    lines = ["config file keys (key=value, # comments allowed):"]
    for key, (_, desc) in CONFIG_KEYS.items():
        lines.append(f"  {key:<22} {desc}")
    lines.append("")
    lines.append("exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort")
    return "\n".join(lines)


def build_parser() -> _Parser:
    parser = _Parser(
        prog="edgeuda",
        description="Edge-guided unsupervised domain adaptation for synthetic segmentation.",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"edgeuda-{VERSION}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a synthetic PGM dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=32, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="image side length")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domain", choices=("source", "target"), default="source")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser(
        "train",
        help="train from a key=value config file",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--out", required=True, help="output directory (CSVs + checkpoint)")
    p.add_argument("--arm", choices=ARM_ORDER, help="ablation preset overriding the flags")
    p.add_argument("--from", dest="resume", help="resume from a checkpoint file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a PGM dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory (needs labels)")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "infer",
        help="segment one PGM image",
        description="Writes PREFIX_seg.pgm (class index per pixel), PREFIX_edge.pgm "
        "(edge probability scaled to 0..255), and PREFIX_entropy.pgm (prediction "
        "entropy scaled so ln(classes) maps to 255).",
    )
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input PGM (dims divisible by 8)")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser(
        "bench",
        help="run the ablation benchmark",
        description="Trains each arm on several seeds and writes benchmark.csv with "
        "columns arm,seed,class,dice_source,dice_target,hd_source,hd_target,"
        "entropy_target (class rows c1,c2,c3,whole). EDGEUDA_THREADS caps "
        "parallel arm training.",
    )
    p.add_argument("--seeds", type=int, default=3, help="number of seeds (0..n-1)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--arms", default=",".join(ARM_ORDER), help="comma-separated arm list")
    p.add_argument("--steps", type=int, default=800, help="steps per run (without --config)")
    p.add_argument("--config", help="base config file overriding defaults")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (NumericalAbort, NonFiniteError) as e:
        print(f"edgeuda: numerical abort: {e}", file=sys.stderr)
        return 3
    except (ConfigError, CheckpointError, PgmError, OSError, ValueError, KeyError) as e:
        print(f"edgeuda: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
