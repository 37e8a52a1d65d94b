"""Training loop, evaluation, ablation runner, checkpointing, and the
finite-difference gradient checker.

Training is bit-reproducible: every batch is drawn from a counter-based RNG
keyed on (seed, iteration), so a resumed run continues the exact trace of an
uninterrupted one.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import build_model, count_macs, count_parameters, multiscale_targets
from .blocks import (
    DRSM,
    ERSM,
    ContextStarUnit,
    PlainResidualBlock,
    layer_norm_channels,
)
from .data_synth import extract_patches
from .losses import dual_domain_loss, psnr, ssim
from .rsam import RSAM
from .strip_attention import (
    HORIZONTAL,
    LDIM,
    LDSI,
    VERTICAL,
    StripWeightGenerator,
    strip_apply,
)


@dataclass
class TrainConfig:
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    total_iters: int = 2000
    seed: int = 0
    eval_every: int = 100
    patch: int = 64
    hflip_prob: float = 0.5
    loss_lambda: float = 0.1

    def validate(self):
        if not (0 < self.lr_min < self.lr_max):
            raise ValueError(f"need 0 < lr_min < lr_max, got {self.lr_min}/{self.lr_max}")
        if self.total_iters < 1:
            raise ValueError(f"total_iters must be >= 1, got {self.total_iters}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 <= self.hflip_prob <= 1.0):
            raise ValueError(f"hflip_prob must lie in [0, 1], got {self.hflip_prob}")


def cosine_lr(t, cfg):
    """Cosine annealing from lr_max at t=0 to lr_min at t=total_iters."""
    span = cfg.lr_max - cfg.lr_min
    return cfg.lr_min + 0.5 * span * (1.0 + np.cos(np.pi * t / cfg.total_iters))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0


def init_adam_state(params):
    return AdamState(
        m=[torch.zeros_like(p) for p in params],
        v=[torch.zeros_like(p) for p in params],
        step=0,
    )


def adam_step(params, grads, state, lr, cfg):
    """One bias-corrected Adam update; mutates params and state in place."""
    state.step += 1
    bc1 = 1.0 - cfg.beta1**state.step
    bc2 = 1.0 - cfg.beta2**state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(cfg.eps), value=-lr)
    return state


# ---------------------------------------------------------------------------
# data plumbing


def _to_batch(arrays):
    stacked = np.stack(arrays).astype(np.float32)
    batch = torch.from_numpy(stacked).permute(0, 3, 1, 2)
    # channels-last layout: markedly faster depth-wise convolutions on CPU
    return batch.contiguous(memory_format=torch.channels_last)


def sample_batch(pairs, cfg, iteration):
    """Deterministic batch for one iteration, keyed on (seed, iteration)."""
    rng = np.random.default_rng([cfg.seed, iteration])
    idx = rng.integers(0, len(pairs), size=cfg.batch_size)
    degraded, clean = [], []
    for pos, i in enumerate(idx):
        d, c = extract_patches(
            pairs[int(i)], cfg.patch, cfg.hflip_prob, seed=[cfg.seed, iteration, pos]
        )
        degraded.append(d)
        clean.append(c)
    return _to_batch(degraded), _to_batch(clean)


# ---------------------------------------------------------------------------
# checkpointing

TENSOR_MAGIC = b"CCNT"
_DTYPE_CODES = {torch.float32: 0, torch.float64: 1}
_DTYPE_FROM_CODE = {v: k for k, v in _DTYPE_CODES.items()}
_NUMPY_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


def _write_tensor_blob(path, tensor):
    t = tensor.detach().contiguous().cpu()
    code = _DTYPE_CODES[t.dtype]
    header = TENSOR_MAGIC + struct.pack("<BB", code, t.dim())
    header += struct.pack(f"<{t.dim()}q", *t.shape) if t.dim() else b""
    data = t.numpy().astype(_NUMPY_DTYPES[t.dtype], copy=False).tobytes()
    Path(path).write_bytes(header + data)


def _read_tensor_blob(path):
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path} is not a tensor blob")
    code, ndim = struct.unpack("<BB", raw[4:6])
    offset = 6 + 8 * ndim
    shape = struct.unpack(f"<{ndim}q", raw[6:offset]) if ndim else ()
    dtype = _DTYPE_FROM_CODE[code]
    arr = np.frombuffer(raw[offset:], dtype=_NUMPY_DTYPES[dtype]).copy()
    return torch.from_numpy(arr).reshape(shape)


def _config_lines(cfg):
    return [f"{f.name}={getattr(cfg, f.name)!r}" for f in fields(cfg)]


def config_digest(model_cfg, train_cfg):
    text = "\n".join(["[model]", *_config_lines(model_cfg), "[train]", *_config_lines(train_cfg)])
    return hashlib.sha256(text.encode()).hexdigest()


def save_checkpoint(ckpt_dir, model, adam_state, iteration, train_cfg):
    """Serialize parameters, Adam moments and the schedule position.

    Layout: manifest.json plus one raw little-endian blob per tensor with a
    binary shape header. Deterministic, so save -> load -> save round-trips
    bit-identically.
    """
    ckpt_dir = Path(ckpt_dir)
    (ckpt_dir / "tensors").mkdir(parents=True, exist_ok=True)
    named = dict(model.named_parameters())
    tensors = dict(named)
    for key, m, v in zip(named, adam_state.m, adam_state.v):
        tensors[f"adam.m.{key}"] = m
        tensors[f"adam.v.{key}"] = v

    index = {}
    for i, name in enumerate(sorted(tensors)):
        t = tensors[name]
        filename = f"tensors/t{i:04d}.bin"
        _write_tensor_blob(ckpt_dir / filename, t)
        index[name] = {
            "file": filename,
            "dtype": str(t.dtype).removeprefix("torch."),
            "shape": list(t.shape),
        }

    manifest = {
        "format": 1,
        "iteration": int(iteration),
        "adam_step": int(adam_state.step),
        "seed": int(train_cfg.seed),
        "config_digest": config_digest(model.cfg, train_cfg),
        "tensors": index,
    }
    (ckpt_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return ckpt_dir


def load_checkpoint(ckpt_dir, model, train_cfg):
    """Restore parameters and optimizer moments; returns (AdamState, iteration).

    Refuses checkpoints whose config digest does not match the given model and
    training configuration.
    """
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "manifest.json").read_text())
    expected = config_digest(model.cfg, train_cfg)
    if manifest["config_digest"] != expected:
        raise ValueError(
            f"checkpoint config digest {manifest['config_digest'][:12]} does not match "
            f"current configuration {expected[:12]}"
        )
    index = manifest["tensors"]
    loaded = {name: _read_tensor_blob(ckpt_dir / entry["file"]) for name, entry in index.items()}
    with torch.no_grad():
        for name, param in model.named_parameters():
            param.copy_(loaded[name])
    state = AdamState(
        m=[loaded[f"adam.m.{name}"] for name, _ in model.named_parameters()],
        v=[loaded[f"adam.v.{name}"] for name, _ in model.named_parameters()],
        step=manifest["adam_step"],
    )
    return state, manifest["iteration"]


# ---------------------------------------------------------------------------
# training / evaluation


def _log_line(handle, **kv):
    line = " ".join(f"{k}={v}" for k, v in kv.items())
    handle.write(line + "\n")
    handle.flush()


def evaluate(model, pairs, batch_size=8):
    """Mean PSNR/SSIM over all pairs; full-resolution output, clamped to [0, 1]."""
    if not pairs:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    psnrs, ssims = [], []
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            degraded = _to_batch([p[0] for p in chunk])
            clean = _to_batch([p[1] for p in chunk])
            restored = model(degraded).full.clamp(0.0, 1.0)
            for j in range(len(chunk)):
                psnrs.append(psnr(restored[j], clean[j]))
                ssims.append(ssim(restored[j], clean[j]))
    model.train(was_training)
    return {
        "psnr": float(np.mean(psnrs)),
        "ssim": float(np.mean(ssims)),
        "count": len(pairs),
    }


def train(model, pairs, cfg, out_dir, resume_from=None, stop_after=None):
    """Optimize the model on paired data; returns (checkpoint dir, history).

    Writes an append-only metrics log (iteration, lr, loss terms, PSNR) at the
    eval cadence and a checkpoint at the end. Aborts on a non-finite loss.
    stop_after checkpoints and returns once that many total iterations have
    run; resuming from the checkpoint continues the exact uninterrupted trace,
    since batches are keyed on (seed, iteration) alone.
    """
    cfg.validate()
    if not pairs:
        raise ValueError("cannot train on an empty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    # convert before any resume load so resumed runs share the fresh-run layout
    model.to(memory_format=torch.channels_last)
    params = list(model.parameters())
    if resume_from is not None:
        adam_state, start_iter = load_checkpoint(resume_from, model, cfg)
    else:
        adam_state, start_iter = init_adam_state(params), 0

    end_iter = cfg.total_iters if stop_after is None else min(cfg.total_iters, stop_after)
    history = {"loss": [], "eval": []}
    model.train()
    with open(out_dir / "metrics.log", "a") as log:
        for t in range(start_iter, end_iter):
            lr = float(cosine_lr(t, cfg))
            degraded, clean = sample_batch(pairs, cfg, t)
            outputs = model(degraded)
            terms = dual_domain_loss(outputs, multiscale_targets(clean), cfg.loss_lambda)
            total = terms.total
            if not torch.isfinite(total):
                raise RuntimeError(
                    f"non-finite loss at iteration {t}: lr={lr:.3e} "
                    f"spatial={terms.spatial.item()} frequency={terms.frequency.item()}"
                )
            model.zero_grad(set_to_none=True)
            total.backward()
            adam_step(params, [p.grad for p in params], adam_state, lr, cfg)
            history["loss"].append(total.item())

            if (t + 1) % cfg.eval_every == 0 or (t + 1) == end_iter:
                metrics = evaluate(model, pairs)
                record = {
                    "iter": t + 1,
                    "lr": lr,
                    "loss_spatial": terms.spatial.item(),
                    "loss_freq": terms.frequency.item(),
                    "loss": total.item(),
                    "psnr": metrics["psnr"],
                }
                history["eval"].append(record)
                _log_line(log, **{k: f"{v:.10g}" if isinstance(v, float) else v for k, v in record.items()})

    ckpt_dir = save_checkpoint(out_dir / "checkpoint", model, adam_state, end_iter, cfg)
    return ckpt_dir, history


def moving_average(values, window=50):
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return values.copy()
    return np.convolve(values, np.ones(window) / window, mode="valid")


# ---------------------------------------------------------------------------
# ablation

ABLATION_VARIANTS = (
    ("baseline", "plain", False),
    ("drsm", "drsm", False),
    ("ersm", "ersm", False),
    ("ldim", "plain", True),
    ("drsm_ldim", "drsm", True),
    ("ersm_ldim", "ersm", True),
)


def run_ablation(model_cfg, train_cfg, pairs, out_dir, seeds=(0,)):
    """Train and evaluate the six block/LDIM variants under identical budgets.

    Returns one row per variant with the parameter count and the per-seed and
    mean train-set PSNR/SSIM. Expected-ordering violations are reported by
    ablation_ordering_report, never raised.
    """
    out_dir = Path(out_dir)
    rows = []
    for name, block_type, use_ldim in ABLATION_VARIANTS:
        cfg_v = replace(model_cfg, block_type=block_type, use_ldim=use_ldim)
        psnrs, ssims = [], []
        params = macs = None
        for seed in seeds:
            tc = replace(train_cfg, seed=seed)
            model = build_model(cfg_v, seed=seed)
            params = count_parameters(model)
            macs = count_macs(model, train_cfg.patch, train_cfg.patch)
            train(model, pairs, tc, out_dir / name / f"seed{seed}")
            metrics = evaluate(model, pairs)
            psnrs.append(metrics["psnr"])
            ssims.append(metrics["ssim"])
        rows.append(
            {
                "variant": name,
                "block_type": block_type,
                "use_ldim": use_ldim,
                "params": params,
                "macs": macs,
                "psnr": float(np.mean(psnrs)),
                "ssim": float(np.mean(ssims)),
                "psnr_per_seed": psnrs,
            }
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    report = format_ablation_table(rows)
    for line in ablation_ordering_report(rows):
        report += line + "\n"
    (out_dir / "ablation.txt").write_text(report)
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=1))
    return rows


def format_ablation_table(rows):
    header = f"{'variant':<12} {'params':>10} {'psnr':>8} {'ssim':>8}\n"
    body = "".join(
        f"{r['variant']:<12} {r['params']:>10d} {r['psnr']:>8.2f} {r['ssim']:>8.4f}\n"
        for r in rows
    )
    return header + body


def ablation_ordering_report(rows):
    """Expected-direction notes: star-context blocks and strip integration help."""
    by_name = {r["variant"]: r for r in rows}
    checks = [
        ("ersm", "drsm", "context-aware star blocks vs relocated depth-wise"),
        ("ldim", "baseline", "strip integration vs plain baseline"),
        ("ersm_ldim", "drsm_ldim", "full model vs relocated depth-wise + strips"),
    ]
    lines = []
    for better, worse, label in checks:
        a, b = by_name[better]["psnr"], by_name[worse]["psnr"]
        status = "holds" if a >= b else "INVERTED"
        lines.append(f"ordering {better} >= {worse} ({label}): {status} ({a:.2f} vs {b:.2f} dB)")
    return lines


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def _rand(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def _module_leaves(module, x):
    return [x] + [p for p in module.parameters()]


def _build_layer_norm(gen):
    x = _rand(gen, 1, 4, 8, 8)
    gain = _rand(gen, 4)
    bias = _rand(gen, 4)
    leaves = [x, gain, bias]
    return lambda: layer_norm_channels(x, gain, bias).sum(), leaves


def _build_module_op(make):
    def builder(gen):
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
        module = make().double()
        x = _rand(gen, 1, 4, 8, 8)
        return lambda: module(x).sum(), _module_leaves(module, x)

    return builder


def _build_generate_weights(gen):
    torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
    module = StripWeightGenerator(4, 5).double()
    x = _rand(gen, 1, 4, 8, 8)
    # random projection: the plain sum of softmax weights is constant
    probe = _rand(gen, 1, 5, 8, 8)
    return lambda: (module(x) * probe).sum(), _module_leaves(module, x)


def _build_strip_apply(axis, dilation):
    def builder(gen):
        x = _rand(gen, 1, 4, 8, 8)
        weights = _rand(gen, 1, 5, 8, 8)
        return lambda: strip_apply(x, weights, axis, dilation).sum(), [x, weights]

    return builder


def _build_dual_domain_loss(gen):
    pred = [_rand(gen, 1, 4, 8, 8), _rand(gen, 1, 4, 4, 4), _rand(gen, 1, 4, 2, 2)]
    target = [_rand(gen, 1, 4, 8, 8), _rand(gen, 1, 4, 4, 4), _rand(gen, 1, 4, 2, 2)]
    return lambda: dual_domain_loss(pred, target).total, pred


def _build_conv1x1(gen):
    x = _rand(gen, 1, 4, 8, 8)
    weight = _rand(gen, 4, 4, 1, 1)
    bias = _rand(gen, 4)
    return lambda: F.conv2d(x, weight, bias).sum(), [x, weight, bias]


GRAD_CHECK_OPS = {
    "layer_norm_channels": _build_layer_norm,
    "csu_forward": _build_module_op(lambda: ContextStarUnit(4)),
    "ersm_forward": _build_module_op(lambda: ERSM(4)),
    "drsm_forward": _build_module_op(lambda: DRSM(4)),
    "plain_block_forward": _build_module_op(lambda: PlainResidualBlock(4)),
    "rsam_forward": _build_module_op(lambda: RSAM(4, strip_sizes=(3, 5))),
    "generate_strip_weights": _build_generate_weights,
    "strip_apply_horizontal_d1": _build_strip_apply(HORIZONTAL, 1),
    "strip_apply_horizontal_d4": _build_strip_apply(HORIZONTAL, 4),
    "strip_apply_vertical_d1": _build_strip_apply(VERTICAL, 1),
    "strip_apply_vertical_d4": _build_strip_apply(VERTICAL, 4),
    "ldsi_forward": _build_module_op(lambda: LDSI(4, 5, HORIZONTAL)),
    "ldim_forward": _build_module_op(lambda: LDIM(4, (3, 5))),
    "dual_domain_loss": _build_dual_domain_loss,
    "conv1x1": _build_conv1x1,
}

GRAD_SUITE_OPS = (
    "layer_norm_channels",
    "csu_forward",
    "ersm_forward",
    "drsm_forward",
    "generate_strip_weights",
    "strip_apply_horizontal_d1",
    "strip_apply_horizontal_d4",
    "strip_apply_vertical_d1",
    "strip_apply_vertical_d4",
    "ldsi_forward",
    "ldim_forward",
    "rsam_forward",
    "dual_domain_loss",
)


def _central_fd_grads(f, leaves, h):
    grads = []
    for leaf in leaves:
        flat = leaf.detach().reshape(-1)
        g = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g.view_as(leaf))
    return grads


def grad_check(op_id, seed=0, tol=1e-4, h=1e-5):
    """Central finite differences vs reverse-mode gradients for a named op.

    Runs at float64 and reports the maximum relative error over the input and
    every parameter, with the denominator floored at 1 so near-zero entries
    compare absolutely.
    """
    if op_id not in GRAD_CHECK_OPS:
        raise ValueError(f"unknown op {op_id!r}; known: {sorted(GRAD_CHECK_OPS)}")
    gen = torch.Generator().manual_seed(seed)
    f, leaves = GRAD_CHECK_OPS[op_id](gen)
    for leaf in leaves:
        leaf.requires_grad_(True)
    analytic = torch.autograd.grad(f(), leaves, allow_unused=True)
    numeric = _central_fd_grads(f, leaves, h)
    max_err = 0.0
    for a, n in zip(analytic, numeric):
        if a is None:
            a = torch.zeros_like(n)
        denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=1.0)
        max_err = max(max_err, ((a - n).abs() / denom).max().item())
    return {"op": op_id, "max_rel_err": max_err, "tol": tol, "passed": max_err < tol}


def grad_check_all(ops=GRAD_SUITE_OPS, seed=0, tol=1e-4, h=1e-5):
    return [grad_check(op, seed=seed, tol=tol, h=h) for op in ops]
