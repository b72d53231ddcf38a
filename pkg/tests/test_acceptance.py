"""Acceptance criteria 1-10; each test prints one ``CRITERION n: PASS|FAIL`` line."""

import math
import statistics
import time

import numpy as np
import pytest

from barlow_swin import tensor as T
from barlow_swin.checkpoint import load_checkpoint, save_checkpoint
from barlow_swin.cli import build_model, load_model, main
from barlow_swin.config import RunConfig
from barlow_swin.data import synth_dataset
from barlow_swin.decoder import BarlowSwin, DecoderConfig
from barlow_swin.encoder import (
    EncoderConfig,
    SwinBlock,
    SwinEncoder,
    shift_attention_mask,
    window_partition_reverse,
)
from barlow_swin.gradcheck import run_suite
from barlow_swin.losses import (
    Projector,
    SegLossConfig,
    barlow_twins_loss,
    bce_loss,
    combined_seg_loss,
    cross_correlation,
    dice_coefficient,
)
from barlow_swin.metrics import compute_metrics
from barlow_swin.tensor import Tensor
from barlow_swin.training import AugmentSpec, evaluate, finetune, pretrain


@pytest.fixture
def verdict(capsys):
    def emit(n, checks, detail=""):
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}"
        if detail:
            line += f"  {detail}"
        if failed:
            line += f"  failed: {', '.join(failed)}"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return emit


def test_criterion_01_shape_ladder(verdict):
    start = time.perf_counter()
    model = BarlowSwin(EncoderConfig(), DecoderConfig(), np.random.default_rng(0))
    skips, ladder = model.trace_shapes()
    elapsed = time.perf_counter() - start
    verdict(1, {
        "skips": skips == [(128, 128, 96), (64, 64, 192), (32, 32, 384)],
        "decoder ladder": ladder == [(32, 32, 384), (64, 64, 192), (128, 128, 96), (256, 256, 64),
                                     (512, 512, 32), (512, 512, 1)],
        "runtime < 1 s": elapsed < 1.0,
    }, f"{elapsed:.2f}s")


def test_criterion_02_gradient_integrity(verdict):
    start = time.perf_counter()
    reports = run_suite()
    elapsed = time.perf_counter() - start
    names = {r.name for r in reports}
    worst = max(r.max_rel_error for r in reports)
    checks = {r.name: r.passed and r.max_rel_error < 1e-4 for r in reports}
    checks["swin_block present"] = "swin_block" in names
    checks["double_conv present"] = "double_conv" in names
    checks["runtime < 2 min"] = elapsed < 120
    verdict(2, checks, f"{len(reports)} checks, worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_03_loss_oracles(verdict):
    rng = np.random.default_rng(3)
    target = np.zeros((4, 4, 1))
    pred = np.zeros((4, 4, 1))
    target[0, :] = 1.0
    pred[0, 2:] = 1.0
    pred[1, :2] = 1.0
    probs = Tensor(rng.uniform(0.05, 0.95, (2, 8, 8, 1)))
    y = (rng.random((2, 8, 8, 1)) > 0.5).astype(np.float32)
    a1, a0 = SegLossConfig(alpha=1.0), SegLossConfig(alpha=0.0)
    verdict(3, {
        "BT(I)=0": barlow_twins_loss(Tensor(np.eye(8))).item() == 0.0,
        "BT(d=1,-1)=4": abs(barlow_twins_loss(Tensor(np.array([[-1.0]]))).item() - 4.0) <= 1e-6,
        "BCE(0.5)=ln2": abs(bce_loss(Tensor(np.full((4, 4, 1), 0.5)), target).item() - math.log(2)) <= 1e-6,
        "Dice fixture=0.5": dice_coefficient(pred, target, eps=0.0).item() == 0.5,
        "alpha=1 is BCE": combined_seg_loss(probs, y, a1).item() == bce_loss(probs, y, a1.bce_clip).item(),
        "alpha=0 is 1-Dice": combined_seg_loss(probs, y, a0).item()
        == (1.0 - dice_coefficient(probs, y, a0.dice_eps)).item(),
    })


def test_criterion_04_attention_equivalences(verdict):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 8, 12, 5))
    win = window_partition_reverse(Tensor(x), 4, "partition")
    roundtrip = window_partition_reverse(win, 4, "reverse", 8, 12).data.tobytes() == x.tobytes()

    with T.default_dtype(np.float64):
        block = SwinBlock(8, 2, 4, 2, rng).eval()
        for p in block.parameters().values():
            p.data[...] = rng.standard_normal(p.shape)
        _, probs = block.attention_branch(Tensor(rng.standard_normal((2, 8, 8, 8))), return_probs=True)
    p = probs.data.reshape(2, 4, 2, 16, 16)
    blocked = shift_attention_mask(8, 8, 4, 2) != 0
    row_err = float(np.abs(p.sum(-1) - 1.0).max())
    leak = float(p.transpose(0, 2, 1, 3, 4)[:, :, blocked].max())

    ident = SwinBlock(8, 2, 4, 2, rng, drop_path=0.1).eval()
    for lin in (ident.attn.proj, ident.mlp.fc2):
        lin.weight.data[...] = 0.0
        lin.bias.data[...] = 0.0
    xi = rng.standard_normal((2, 8, 8, 8)).astype(np.float32)
    verdict(4, {
        "partition roundtrip": roundtrip,
        "rows sum to 1": row_err <= 1e-6,
        "masked pairs < 1e-6": leak < 1e-6,
        "zero block is identity": ident(Tensor(xi)).data.tobytes() == xi.tobytes(),
    }, f"row err {row_err:.1e}, max masked prob {leak:.1e}")


def test_criterion_05_cross_correlation_oracle(verdict):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        z1, z2 = rng.standard_normal((64, 8)), rng.standard_normal((64, 8))
        c = cross_correlation(Tensor(z1), Tensor(z2)).data.astype(np.float64)
        a = z1 - z1.mean(0)
        b = z2 - z2.mean(0)
        ref = np.empty((8, 8))
        for i in range(8):
            for j in range(8):
                ref[i, j] = (a[:, i] * b[:, j]).sum() / math.sqrt((a[:, i] ** 2).sum() * (b[:, j] ** 2).sum())
        worst = max(worst, float(np.abs(c - ref).max()))
    verdict(5, {"within 1e-6": worst <= 1e-6}, f"max abs err {worst:.1e}")


def test_criterion_06_metrics_oracle(verdict):
    rng = np.random.default_rng(6)
    exact = dice_f1 = True
    for _ in range(100):
        p = rng.random((16, 16)) < rng.uniform(0.05, 0.95)
        t = rng.random((16, 16)) < rng.uniform(0.05, 0.95)
        tp = fp = tn = fn = 0
        for a, b in zip(p.ravel().tolist(), t.ravel().tolist()):
            tp += a and b
            fp += a and not b
            fn += b and not a
            tn += not a and not b
        m = compute_metrics(p.astype(np.float64), t.astype(np.float64))
        prec = tp / (tp + fp) if tp + fp else 1.0
        rec = tp / (tp + fn) if tp + fn else 1.0
        exact &= m["accuracy"] == (tp + tn) / 256 and m["precision"] == prec and m["recall"] == rec
        exact &= m["miou"] == ((tp / (tp + fp + fn) if tp + fp + fn else 1.0)
                               + (tn / (tn + fp + fn) if tn + fp + fn else 1.0)) / 2
        dice_f1 &= m["dice"] == m["f1"]
    verdict(6, {"confusion exact": exact, "dice == f1": dice_f1})


# --- desk-scale training -----------------------------------------------------------


def desk_pretrain(seed, images):
    cfg = RunConfig.desk(seed=seed, pretrain_epochs=1000, pretrain_max_steps=50)
    encoder = SwinEncoder(cfg.encoder, np.random.default_rng([seed, 0]))
    projector = Projector(cfg.encoder.stage_channels[-1], cfg.projector, np.random.default_rng([seed, 5]))
    result = pretrain(encoder, projector, images, cfg.train, cfg.bt, cfg.augment, config_snapshot=cfg.snapshot())
    return cfg, result


@pytest.mark.slow
def test_criterion_07_desk_pretraining(verdict):
    images = [p[0] for p in synth_dataset(8, 64, "vessels", 0)]
    start = time.perf_counter()
    _, first = desk_pretrain(0, images)
    _, second = desk_pretrain(0, images)
    elapsed = time.perf_counter() - start
    h = first.history
    ratio = h[-1] / h[0]
    verdict(7, {
        "50 steps": first.steps == 50,
        "loss < 50% of initial": ratio < 0.5,
        "identical history": first.history == second.history,
        "runtime < 5 min": elapsed < 300,
    }, f"epoch-mean BT loss {h[0]:.1f} -> {h[-1]:.1f} (ratio {ratio:.3f}), {elapsed:.0f}s")


def epochs_to_dice(cfg, pairs, init, target, cap):
    x, y = [p[0] for p in pairs], [p[1] for p in pairs]
    model = build_model(cfg)
    result = finetune(model, (x, y), (x, y), cfg.train, cfg.seg, cfg.augment, init=init,
                      config_snapshot=cfg.snapshot(), stop_at_dice=target)
    for row in result.history:
        if row["val_dice"] >= target:
            return row["epoch"], row["val_dice"]
    return math.inf, max(r["val_dice"] for r in result.history)


@pytest.mark.slow
def test_criterion_08_desk_finetuning(verdict):
    start = time.perf_counter()
    overfit = dict(max_epochs=300, patience=300, augment_finetune=False)
    disks = synth_dataset(4, 64, "disks", 0)
    disk_epochs, disk_dice = epochs_to_dice(RunConfig.desk(**overfit), disks, None, 0.951, 300)

    bt, scratch = [], []
    for s in range(3):
        vessels = synth_dataset(8, 64, "vessels", s)
        cfg, pre = desk_pretrain(s, [p[0] for p in vessels])
        cfg = cfg.replace(**overfit)
        bt.append(epochs_to_dice(cfg, vessels[:4], pre.checkpoint, 0.8, 300)[0])
        scratch.append(epochs_to_dice(cfg, vessels[:4], None, 0.8, 300)[0])
    elapsed = time.perf_counter() - start
    med_bt, med_scratch = statistics.median(bt), statistics.median(scratch)
    verdict(8, {
        "disk Dice > 0.95 within 300 epochs": disk_dice > 0.95 and disk_epochs <= 300,
        "BT median <= scratch median": med_bt <= med_scratch,
        "runtime < 15 min": elapsed < 900,
    }, f"disks Dice {disk_dice:.3f} at epoch {disk_epochs}; epochs to Dice 0.8 BT {bt} vs scratch {scratch}, "
       f"{elapsed:.0f}s")


# --- persistence and determinism -------------------------------------------------


def test_criterion_09_persistence(verdict, tmp_path):
    cfg = RunConfig.desk(max_epochs=2)
    pairs = synth_dataset(6, 64, "disks", 9)
    x, y = [p[0] for p in pairs], [p[1] for p in pairs]
    model = build_model(cfg)
    result = finetune(model, (x[:4], y[:4]), (x[4:], y[4:]), cfg.train, cfg.seg, cfg.augment,
                      config_snapshot=cfg.snapshot())
    names = [str(i) for i in range(6)]
    before = evaluate(model, x, y, names, batch_size=2)
    path = save_checkpoint(result.checkpoint, tmp_path / "model.bin")
    reloaded = load_model(path, cfg)
    after = evaluate(reloaded, x, y, names, batch_size=2)
    state_a, state_b = model.state_dict(), reloaded.state_dict()
    params_exact = state_a.keys() == state_b.keys() and all(
        state_a[k].dtype == state_b[k].dtype and state_a[k].tobytes() == state_b[k].tobytes() for k in state_a)
    optim = load_checkpoint(path).optimizer
    optim_exact = all(optim[k].tobytes() == v.tobytes() for k, v in result.checkpoint.optimizer.items())
    verdict(9, {
        "parameters bit-exact": params_exact,
        "optimizer moments bit-exact": optim_exact and bool(optim),
        "report bit-exact": before.records == after.records and before.samples == after.samples,
    })


def test_criterion_10_determinism(verdict, tmp_path):
    outputs = []
    for run in ("a", "b"):
        root = tmp_path / run
        settings = ["--set", "max_epochs=2", "--set", "seed=3"]
        assert main(["synth", "--out", str(root / "data"), "--n", "20", "--size", "64", "--seed", "3"]) == 0
        assert main(["finetune", "--data", str(root / "data"), "--out", str(root / "m.bin"),
                     "--set", "image_size=64", "--set", "batch_size=2", *settings]) == 0
        assert main(["evaluate", "--data", str(root / "data"), "--ckpt", str(root / "m.bin"),
                     "--report", str(root / "report.csv"), "--set", "image_size=64", "--set", "batch_size=2",
                     *settings]) == 0
        outputs.append((root / "report.csv").read_bytes())
    verdict(10, {"byte-identical CSV": outputs[0] == outputs[1]}, f"{len(outputs[0])} bytes")
