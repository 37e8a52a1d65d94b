"""Optimizer, checkpoint, training determinism, ablation and gradcheck tests."""

import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from ccnet.backbone import ModelConfig, build_model
from ccnet.train_eval import (
    AdamState,
    TrainConfig,
    adam_step,
    config_digest,
    cosine_lr,
    evaluate,
    grad_check,
    init_adam_state,
    load_checkpoint,
    moving_average,
    run_ablation,
    save_checkpoint,
    train,
)

TINY_MODEL = ModelConfig(
    base_channels=4, blocks_per_scale=1, block_type="ersm", use_ldim=True, strip_sizes=(3, 5)
)


def tiny_pairs(n=4, size=16, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        clean = rng.uniform(0.1, 0.9, size=(size, size, 3))
        degraded = np.clip(clean + rng.normal(0, 0.05, clean.shape), 0.0, 1.0)
        pairs.append((degraded, clean))
    return pairs


def tiny_train_cfg(**overrides):
    base = dict(total_iters=6, batch_size=2, patch=16, eval_every=3, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


class TestCosineLr:
    def test_endpoints(self):
        cfg = TrainConfig(total_iters=1000)
        assert cosine_lr(0, cfg) == pytest.approx(1e-4, rel=1e-12)
        assert cosine_lr(1000, cfg) == pytest.approx(1e-6, rel=1e-9)

    def test_midpoint(self):
        cfg = TrainConfig(total_iters=1000)
        assert cosine_lr(500, cfg) == pytest.approx(5.05e-5, rel=1e-9)

    def test_monotone_decay(self):
        cfg = TrainConfig(total_iters=50)
        values = [cosine_lr(t, cfg) for t in range(51)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_min=1e-3, lr_max=1e-4).validate()
        with pytest.raises(ValueError):
            TrainConfig(total_iters=0).validate()


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        cfg = TrainConfig()
        p = torch.tensor([1.0, -2.0], dtype=torch.float64)
        state = init_adam_state([p])
        before = p.clone()
        for _ in range(3):
            adam_step([p], [torch.zeros_like(p)], state, lr=1e-3, cfg=cfg)
        assert torch.equal(p, before)
        assert state.m[0].abs().max().item() == 0.0

    def test_moments_decay_under_zero_gradient(self):
        cfg = TrainConfig()
        p = torch.tensor([0.5], dtype=torch.float64)
        state = init_adam_state([p])
        adam_step([p], [torch.tensor([0.8], dtype=torch.float64)], state, lr=1e-3, cfg=cfg)
        m_before, v_before = state.m[0].item(), state.v[0].item()
        adam_step([p], [torch.zeros_like(p)], state, lr=1e-3, cfg=cfg)
        assert abs(state.m[0].item()) < abs(m_before)
        assert state.v[0].item() < v_before

    def test_first_step_is_signed_lr(self):
        cfg = TrainConfig()
        p = torch.tensor([0.0], dtype=torch.float64)
        g = torch.tensor([0.3], dtype=torch.float64)
        adam_step([p], [g], init_adam_state([p]), lr=1e-3, cfg=cfg)
        assert p.item() == pytest.approx(-1e-3, rel=1e-6)

    def test_two_steps_match_reference_trace(self):
        cfg = TrainConfig()
        p = torch.tensor([0.7], dtype=torch.float64)
        state = init_adam_state([p])
        grads = [0.25, -0.1]
        for g in grads:
            adam_step([p], [torch.tensor([g], dtype=torch.float64)], state, lr=1e-2, cfg=cfg)

        # plain-python reference trace
        theta, m, v = 0.7, 0.0, 0.0
        for step, g in enumerate(grads, start=1):
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            m_hat = m / (1 - cfg.beta1**step)
            v_hat = v / (1 - cfg.beta2**step)
            theta -= 1e-2 * m_hat / (math.sqrt(v_hat) + cfg.eps)
        assert p.item() == pytest.approx(theta, abs=1e-12)
        assert state.step == 2


class TestCheckpoint:
    def test_save_load_save_is_bit_identical(self, tmp_path):
        cfg = tiny_train_cfg()
        model = build_model(TINY_MODEL, seed=1)
        state = init_adam_state(list(model.parameters()))
        state.step = 7
        first = save_checkpoint(tmp_path / "a", model, state, iteration=7, train_cfg=cfg)

        model2 = build_model(TINY_MODEL, seed=2)  # different init, gets overwritten
        state2, it = load_checkpoint(first, model2, cfg)
        assert it == 7 and state2.step == 7
        second = save_checkpoint(tmp_path / "b", model2, state2, iteration=it, train_cfg=cfg)

        files_a = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(second) for p in second.rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (first / rel).read_bytes() == (second / rel).read_bytes(), rel

    def test_digest_mismatch_rejected(self, tmp_path):
        cfg = tiny_train_cfg()
        model = build_model(TINY_MODEL, seed=3)
        ckpt = save_checkpoint(tmp_path / "c", model, init_adam_state(list(model.parameters())), 0, cfg)
        with pytest.raises(ValueError, match="digest"):
            load_checkpoint(ckpt, model, replace(cfg, seed=99))

    def test_digest_covers_both_configs(self):
        cfg = tiny_train_cfg()
        base = config_digest(TINY_MODEL, cfg)
        assert config_digest(replace(TINY_MODEL, base_channels=8), cfg) != base
        assert config_digest(TINY_MODEL, replace(cfg, lr_max=2e-4)) != base


class TestTraining:
    def test_single_iteration_smoke(self, tmp_path):
        cfg = tiny_train_cfg(total_iters=1, eval_every=1)
        model = build_model(TINY_MODEL, seed=4)
        ckpt, history = train(model, tiny_pairs(), cfg, tmp_path / "run")
        assert len(history["loss"]) == 1
        assert (tmp_path / "run" / "metrics.log").exists()
        model2 = build_model(TINY_MODEL, seed=5)
        state, it = load_checkpoint(ckpt, model2, cfg)
        assert it == 1

    def test_fixed_seed_reproduces_loss_trace(self, tmp_path):
        cfg = tiny_train_cfg(total_iters=5)
        pairs = tiny_pairs()
        _, h1 = train(build_model(TINY_MODEL, seed=6), pairs, cfg, tmp_path / "r1")
        _, h2 = train(build_model(TINY_MODEL, seed=6), pairs, cfg, tmp_path / "r2")
        assert h1["loss"] == h2["loss"]

    def test_resume_continues_exact_trace(self, tmp_path):
        cfg = tiny_train_cfg(total_iters=8)
        pairs = tiny_pairs()
        _, full = train(build_model(TINY_MODEL, seed=7), pairs, cfg, tmp_path / "full")

        ckpt, first = train(
            build_model(TINY_MODEL, seed=7), pairs, cfg, tmp_path / "part", stop_after=4
        )
        model = build_model(TINY_MODEL, seed=7)
        _, rest = train(model, pairs, cfg, tmp_path / "part2", resume_from=ckpt)
        assert first["loss"] + rest["loss"] == full["loss"]

    def test_non_finite_loss_aborts_with_diagnostic(self, tmp_path):
        cfg = tiny_train_cfg(total_iters=3)
        model = build_model(TINY_MODEL, seed=8)
        with torch.no_grad():
            model.stem.weight.fill_(float("inf"))
        with pytest.raises(RuntimeError, match="non-finite loss at iteration 0"):
            train(model, tiny_pairs(), cfg, tmp_path / "bad")

    def test_empty_dataset_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="empty"):
            train(build_model(TINY_MODEL, seed=9), [], tiny_train_cfg(), tmp_path / "e")

    def test_metrics_log_is_line_structured(self, tmp_path):
        cfg = tiny_train_cfg(total_iters=3, eval_every=1)
        train(build_model(TINY_MODEL, seed=10), tiny_pairs(), cfg, tmp_path / "log")
        lines = (tmp_path / "log" / "metrics.log").read_text().strip().splitlines()
        assert len(lines) == 3
        record = dict(tok.split("=", 1) for tok in lines[-1].split())
        assert set(record) == {"iter", "lr", "loss_spatial", "loss_freq", "loss", "psnr"}
        assert int(record["iter"]) == 3


class TestEvaluate:
    def test_identity_model_on_clean_pairs(self):
        model = build_model(TINY_MODEL, seed=11)  # zero heads: identity restoration
        clean = tiny_pairs(n=2)
        identical = [(c, c.copy()) for _, c in clean]
        report = evaluate(model, identical)
        assert report["psnr"] == math.inf
        assert report["ssim"] == pytest.approx(1.0, abs=1e-12)
        assert report["count"] == 2

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            evaluate(build_model(TINY_MODEL, seed=12), [])

    def test_report_matches_per_image_recomputation(self):
        from ccnet.losses import psnr as psnr_fn
        from ccnet.losses import ssim as ssim_fn

        model = build_model(TINY_MODEL, seed=13)
        with torch.no_grad():
            for head in model.heads:
                head.weight.normal_(0, 0.01)
        pairs = tiny_pairs(n=3)
        report = evaluate(model, pairs)
        per_image = []
        with torch.no_grad():
            for degraded, clean in pairs:
                d = torch.from_numpy(degraded.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
                d = d.contiguous(memory_format=torch.channels_last)
                c = torch.from_numpy(clean.astype(np.float32)).permute(2, 0, 1)
                restored = model(d).full[0].clamp(0, 1)
                per_image.append(psnr_fn(restored, c))
        assert report["psnr"] == pytest.approx(float(np.mean(per_image)), rel=1e-9)


class TestAblation:
    def test_six_variants_with_finite_metrics(self, tmp_path):
        cfg = tiny_train_cfg(total_iters=2, eval_every=2)
        rows = run_ablation(TINY_MODEL, cfg, tiny_pairs(), tmp_path / "abl", seeds=(0,))
        assert [r["variant"] for r in rows] == [
            "baseline",
            "drsm",
            "ersm",
            "ldim",
            "drsm_ldim",
            "ersm_ldim",
        ]
        for row in rows:
            assert math.isfinite(row["psnr"]) and math.isfinite(row["ssim"])
        by_name = {r["variant"]: r for r in rows}
        assert by_name["ersm"]["params"] == by_name["drsm"]["params"]
        assert by_name["ldim"]["params"] > by_name["baseline"]["params"]
        report = (tmp_path / "abl" / "ablation.txt").read_text()
        assert "ordering" in report


class TestGradCheck:
    def test_linear_op_is_near_exact(self):
        # FD of a linear map carries no truncation error; the wider step
        # only suppresses float64 cancellation noise
        report = grad_check("conv1x1", seed=0, h=1e-3)
        assert report["max_rel_err"] < 1e-9

    def test_strip_apply_passes(self):
        report = grad_check("strip_apply_horizontal_d1", seed=0)
        assert report["passed"] and report["max_rel_err"] < 1e-4

    def test_ersm_passes(self):
        report = grad_check("ersm_forward", seed=0)
        assert report["passed"] and report["max_rel_err"] < 1e-4

    def test_unknown_op_rejected(self):
        with pytest.raises(ValueError, match="unknown op"):
            grad_check("not_an_op")


def test_moving_average():
    values = [1.0] * 10 + [0.0] * 10
    ma = moving_average(values, window=5)
    assert len(ma) == 16
    assert ma[0] == 1.0 and ma[-1] == 0.0
    short = moving_average([3.0, 4.0], window=5)
    assert list(short) == [3.0, 4.0]
