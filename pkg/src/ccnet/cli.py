"""Command-line interface: data synthesis, training, evaluation, ablation,
gradient checks, complexity reporting and plotting.

Configuration is a sectioned key=value file; profile and task pick defaults,
the file overrides them, and repeatable --set section.key=value flags override
the file. The resolved configuration is echoed into every output directory.
"""

import argparse
import configparser
import io
import json
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .backbone import (
    CALIBRATION,
    DESK_BASE_CHANNELS,
    PAPER_BASE_CHANNELS,
    TASK_BLOCKS,
    ModelConfig,
    build_model,
    count_macs,
    count_parameters,
)
from .data_synth import DegradationSpec, load_pairs, make_dataset
from .train_eval import (
    GRAD_SUITE_OPS,
    TrainConfig,
    evaluate,
    grad_check,
    load_checkpoint,
    run_ablation,
    train,
)

TASK_KINDS = {"dehaze": "haze", "deblur": "motion_blur", "desnow": "snow"}

PROFILES = ("desk", "paper")


@dataclass
class RunConfig:
    """Fully resolved run settings: model + training + data + bookkeeping."""

    model: ModelConfig
    train: TrainConfig
    degradation: DegradationSpec
    dataset: str = ""
    count: int = 16
    image_size: int = 64
    out: str = ""
    seed: int = 0
    profile: str = "desk"
    task: str = "dehaze"


def _parse_bool(text):
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text):
    return tuple(int(tok) for tok in str(text).replace("(", "").replace(")", "").split(",") if tok.strip())


def _parse_float_pair(text):
    a, b = (float(tok) for tok in str(text).split(","))
    return (a, b)


def _parse_int_pair(text):
    a, b = (int(tok) for tok in str(text).split(","))
    return (a, b)


_MODEL_PARSERS = {
    "base_channels": int,
    "blocks_per_scale": int,
    "block_type": str,
    "use_ldim": _parse_bool,
    "strip_sizes": _parse_int_tuple,
    "dw_kernel": int,
    "expansion": int,
    "image_channels": int,
}

_TRAIN_PARSERS = {
    "lr_max": float,
    "lr_min": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "batch_size": int,
    "total_iters": int,
    "seed": int,
    "eval_every": int,
    "patch": int,
    "hflip_prob": float,
    "loss_lambda": float,
}

_DEGRADATION_PARSERS = {
    "kind": str,
    "airlight_range": _parse_float_pair,
    "beta_range": _parse_float_pair,
    "depth_smoothness": float,
    "blur_length_range": _parse_int_pair,
    "snow_density": float,
    "snow_size_range": _parse_float_pair,
    "snow_opacity": float,
}

_RUN_PARSERS = {
    "dataset": str,
    "count": int,
    "image_size": int,
    "out": str,
    "seed": int,
    "profile": str,
    "task": str,
}

_SECTION_PARSERS = {
    "model": _MODEL_PARSERS,
    "train": _TRAIN_PARSERS,
    "degradation": _DEGRADATION_PARSERS,
    "run": _RUN_PARSERS,
}


def profile_defaults(profile, task):
    """Section defaults for a profile/task combination."""
    if profile not in PROFILES:
        raise ValueError(f"profile must be one of {PROFILES}, got {profile!r}")
    if task not in TASK_KINDS:
        raise ValueError(f"task must be one of {tuple(TASK_KINDS)}, got {task!r}")
    if profile == "paper":
        model = {"base_channels": PAPER_BASE_CHANNELS, "blocks_per_scale": TASK_BLOCKS[task]}
        train_section = {
            "patch": 256,
            "batch_size": 8 if task == "dehaze" else 4,
            "total_iters": 2000,
        }
        run = {"count": 256, "image_size": 256}
    else:
        model = {"base_channels": DESK_BASE_CHANNELS, "blocks_per_scale": 2}
        train_section = {"patch": 64, "batch_size": 4, "total_iters": 2000}
        run = {"count": 16, "image_size": 64}
    return {
        "model": model,
        "train": train_section,
        "degradation": {"kind": TASK_KINDS[task]},
        "run": run,
    }


def _read_config_file(path):
    parser = configparser.ConfigParser()
    with open(path) as handle:
        parser.read_file(handle)
    sections = {}
    for section in parser.sections():
        sections[section.lower()] = dict(parser.items(section))
    return sections


def _apply_section(values, section, parsers, label):
    for key, raw in section.items():
        if key not in parsers:
            raise ValueError(f"unknown key {label}.{key}")
        values[key] = parsers[key](raw)
    return values


def resolve_config(config_path=None, overrides=(), profile=None, task=None, seed=None, out=None):
    """Pure resolution: profile/task defaults <- config file <- --set overrides.

    The same inputs always produce the same RunConfig; the result serializes
    through to_config_text and parses back identically.
    """
    file_sections = _read_config_file(config_path) if config_path else {}
    override_sections = {}
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"--set expects section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        override_sections.setdefault(section.lower(), {})[key.strip()] = value

    def pick(name, flag, fallback):
        if flag is not None:
            return flag
        for source in (override_sections, file_sections):
            if name in source.get("run", {}):
                return source["run"][name]
        return fallback

    profile = pick("profile", profile, "desk")
    task = pick("task", task, "dehaze")
    merged = profile_defaults(profile, task)
    for source in (file_sections, override_sections):
        for section, values in source.items():
            if section not in _SECTION_PARSERS:
                raise ValueError(f"unknown config section [{section}]")
            _apply_section(merged.setdefault(section, {}), values, _SECTION_PARSERS[section], section)

    run_values = merged.get("run", {})
    run_values["profile"] = profile
    run_values["task"] = task
    if seed is not None:
        run_values["seed"] = int(seed)
    if out is not None:
        run_values["out"] = str(out)

    model = ModelConfig(**merged.get("model", {}))
    train_values = merged.get("train", {})
    train_values["seed"] = int(run_values.get("seed", train_values.get("seed", 0)))
    train_cfg = TrainConfig(**train_values)
    degradation = DegradationSpec(**merged.get("degradation", {}))
    cfg = RunConfig(
        model=model,
        train=train_cfg,
        degradation=degradation,
        dataset=str(run_values.get("dataset", "")),
        count=int(run_values.get("count", 16)),
        image_size=int(run_values.get("image_size", 64)),
        out=str(run_values.get("out", "")),
        seed=int(run_values.get("seed", 0)),
        profile=profile,
        task=task,
    )
    cfg.model.validate()
    cfg.train.validate()
    cfg.degradation.validate()
    return cfg


def _format_value(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def to_config_text(cfg: RunConfig):
    """Serialize a resolved RunConfig; re-ingesting reproduces it exactly."""
    parser = configparser.ConfigParser()
    parser["model"] = {f.name: _format_value(getattr(cfg.model, f.name)) for f in fields(cfg.model)}
    parser["train"] = {f.name: _format_value(getattr(cfg.train, f.name)) for f in fields(cfg.train)}
    parser["degradation"] = {
        f.name: _format_value(getattr(cfg.degradation, f.name)) for f in fields(cfg.degradation)
    }
    parser["run"] = {
        "dataset": cfg.dataset,
        "count": str(cfg.count),
        "image_size": str(cfg.image_size),
        "out": cfg.out,
        "seed": str(cfg.seed),
        "profile": cfg.profile,
        "task": cfg.task,
    }
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def _resolve_from_args(args):
    return resolve_config(
        config_path=args.config,
        overrides=args.set or (),
        profile=args.profile,
        task=args.task,
        seed=args.seed,
        out=args.out,
    )


def _out_dir(cfg, args, default_name):
    root = cfg.out or args.out or os.environ.get("CCNET_OUT", ".")
    path = Path(root)
    if path.name != default_name:
        path = path / default_name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(cfg, out_dir):
    (Path(out_dir) / "resolved.cfg").write_text(to_config_text(cfg))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    cfg = _resolve_from_args(args)
    out_dir = _out_dir(cfg, args, "dataset")
    _echo_config(cfg, out_dir)
    manifest = make_dataset(
        args.clean_dir,
        cfg.degradation,
        out_dir,
        count=args.count if args.count is not None else cfg.count,
        seed=cfg.seed,
        size=(cfg.image_size, cfg.image_size),
    )
    print(f"wrote dataset: {manifest}")
    return 0


def cmd_train(args):
    cfg = _resolve_from_args(args)
    if args.data:
        cfg = replace(cfg, dataset=str(args.data))
    if args.iters:
        cfg = replace(cfg, train=replace(cfg.train, total_iters=args.iters))
    if args.dry_run:
        print(to_config_text(cfg), end="")
        return 0
    if not cfg.dataset:
        raise ValueError("no dataset given; pass --data or set run.dataset")
    out_dir = _out_dir(cfg, args, "train")
    _echo_config(cfg, out_dir)
    pairs = load_pairs(cfg.dataset)
    model = build_model(cfg.model, seed=cfg.seed)
    ckpt, history = train(model, pairs, cfg.train, out_dir, resume_from=args.resume)
    final = history["eval"][-1] if history["eval"] else {}
    print(f"checkpoint: {ckpt}")
    if final:
        print(f"final: iter={final['iter']} loss={final['loss']:.5g} psnr={final['psnr']:.2f} dB")
    return 0


def cmd_eval(args):
    cfg = _resolve_from_args(args)
    if args.data:
        cfg = replace(cfg, dataset=str(args.data))
    if not cfg.dataset:
        raise ValueError("no dataset given; pass --data or set run.dataset")
    out_dir = _out_dir(cfg, args, "eval")
    _echo_config(cfg, out_dir)
    pairs = load_pairs(cfg.dataset)
    model = build_model(cfg.model, seed=cfg.seed)
    if args.checkpoint:
        load_checkpoint(args.checkpoint, model, cfg.train)
    report = evaluate(model, pairs)
    line = f"psnr={report['psnr']:.4f} ssim={report['ssim']:.5f} count={report['count']}"
    (out_dir / "eval.txt").write_text(line + "\n")
    print(line)
    return 0


def cmd_ablate(args):
    cfg = _resolve_from_args(args)
    if args.data:
        cfg = replace(cfg, dataset=str(args.data))
    if not cfg.dataset:
        raise ValueError("no dataset given; pass --data or set run.dataset")
    if args.iters:
        cfg = replace(cfg, train=replace(cfg.train, total_iters=args.iters))
    out_dir = _out_dir(cfg, args, "ablation")
    _echo_config(cfg, out_dir)
    pairs = load_pairs(cfg.dataset)
    seeds = tuple(range(cfg.seed, cfg.seed + args.seeds))
    rows = run_ablation(cfg.model, cfg.train, pairs, out_dir, seeds=seeds)
    print((out_dir / "ablation.txt").read_text(), end="")
    return 0


def cmd_gradcheck(args):
    ops = [args.op] if args.op else list(GRAD_SUITE_OPS)
    all_passed = True
    for op in ops:
        report = grad_check(op, seed=args.seed or 0, tol=args.tol)
        status = "PASS" if report["passed"] else "FAIL"
        print(f"{status} {op}: max_rel_err={report['max_rel_err']:.3e} (tol {report['tol']:.0e})")
        all_passed &= report["passed"]
    return 0 if all_passed else 1


def _band(value, target, tolerance):
    low, high = target * (1 - tolerance), target * (1 + tolerance)
    status = "ok" if low <= value <= high else "OUT OF BAND"
    return f"band [{low:.3e}, {high:.3e}]: {status}"


def cmd_complexity(args):
    cfg = _resolve_from_args(args)
    model = build_model(cfg.model, seed=cfg.seed)
    params = count_parameters(model)
    size = args.size
    macs = count_macs(model, size, size)
    tol = CALIBRATION["tolerance"]
    print(f"profile={cfg.profile} task={cfg.task} block={cfg.model.block_type} "
          f"ldim={cfg.model.use_ldim} C={cfg.model.base_channels} N={cfg.model.blocks_per_scale}")
    print(f"params: {params} ({params / 1e6:.3f} M)")
    print(f"macs@{size}: {macs} ({macs / 1e9:.2f} G)")
    if cfg.profile == "paper" and cfg.task == "dehaze":
        if cfg.model.block_type == "ersm" and cfg.model.use_ldim:
            print(f"  params vs reference {CALIBRATION['params_full'] / 1e6:.2f} M "
                  + _band(params, CALIBRATION["params_full"], tol))
            if size == 256:
                print(f"  macs vs reference {CALIBRATION['macs_full_256'] / 1e9:.2f} G "
                      + _band(macs, CALIBRATION["macs_full_256"], tol))
        elif cfg.model.block_type == "plain" and not cfg.model.use_ldim:
            print(f"  params vs reference {CALIBRATION['params_baseline'] / 1e6:.2f} M "
                  + _band(params, CALIBRATION["params_baseline"], tol))
    return 0


def cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(args.out or os.environ.get("CCNET_OUT", ".")) / "plots"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    if args.log:
        records = []
        for line in Path(args.log).read_text().splitlines():
            if line.strip():
                records.append(dict(tok.split("=", 1) for tok in line.split()))
        iters = [int(r["iter"]) for r in records]
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
        axes[0].plot(iters, [float(r["loss"]) for r in records])
        axes[0].set_xlabel("iteration")
        axes[0].set_ylabel("loss")
        axes[0].set_yscale("log")
        axes[1].plot(iters, [float(r["psnr"]) for r in records])
        axes[1].set_xlabel("iteration")
        axes[1].set_ylabel("train PSNR (dB)")
        fig.tight_layout()
        path = out_dir / "training_curve.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    if args.ablation:
        rows = json.loads((Path(args.ablation) / "ablation.json").read_text())
        for key, unit, scale, name in (
            ("params", "params (M)", 1e6, "params_vs_psnr.png"),
            ("macs", "MACs (G)", 1e9, "macs_vs_psnr.png"),
        ):
            fig, ax = plt.subplots(figsize=(5, 4))
            for row in rows:
                ax.scatter(row[key] / scale, row["psnr"])
                ax.annotate(row["variant"], (row[key] / scale, row["psnr"]), fontsize=8,
                            xytext=(3, 3), textcoords="offset points")
            ax.set_xlabel(unit)
            ax.set_ylabel("train PSNR (dB)")
            fig.tight_layout()
            path = out_dir / name
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)

    if not written:
        raise ValueError("nothing to plot; pass --log and/or --ablation")
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(sub):
    sub.add_argument("--config", help="sectioned key=value configuration file")
    sub.add_argument("--seed", type=int, help="master seed (overrides config)")
    sub.add_argument("--out", help="output directory (default $CCNET_OUT or .)")
    sub.add_argument("--profile", choices=PROFILES, help="scale profile")
    sub.add_argument("--task", choices=tuple(TASK_KINDS), help="restoration task")
    sub.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                     help="override a single config field (repeatable)")


def build_parser():
    parser = argparse.ArgumentParser(prog="ccnet",
                                     description="context-aware convolutional image restoration")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("synth", help="generate a synthetic paired dataset")
    _add_common(p)
    p.add_argument("--count", type=int, help="number of pairs")
    p.add_argument("--clean-dir", help="optional directory of clean source PNGs")
    p.set_defaults(func=cmd_synth)

    p = commands.add_parser("train", help="train a model on a paired dataset")
    _add_common(p)
    p.add_argument("--data", help="dataset directory (with manifest.txt)")
    p.add_argument("--iters", type=int, help="override total iterations")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--dry-run", action="store_true",
                   help="print the resolved configuration and exit")
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("ablate", help="run the six-variant ablation")
    _add_common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds per variant")
    p.add_argument("--iters", type=int, help="override total iterations")
    p.set_defaults(func=cmd_ablate)

    p = commands.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--op", help="single op to check (default: full suite)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = commands.add_parser("complexity", help="parameter and MAC report")
    _add_common(p)
    p.add_argument("--size", type=int, default=256, help="input size for the MAC count")
    p.set_defaults(func=cmd_complexity)

    p = commands.add_parser("plot", help="render charts from logs and ablation rows")
    p.add_argument("--log", help="metrics.log from a training run")
    p.add_argument("--ablation", help="ablation output directory (with ablation.json)")
    p.add_argument("--out", help="output directory (default $CCNET_OUT or .)")
    p.set_defaults(func=cmd_plot)

    return parser


def dispatch(argv=None):
    """Run one CLI invocation; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
