"""Acceptance suite: one PASS/FAIL line per acceptance criterion.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are printed
to the terminal even when output capture is on.
"""

import math
import time

import numpy as np
import pytest

from slsdeep import checks, cli, data, ops
from slsdeep.loss import LossConfig, epe_loss, nll_loss, total_loss
from slsdeep.metrics import binarize, confusion, metrics_from_counts
from slsdeep.network import NetworkConfig, build, desk_config, shape_plan
from slsdeep.tensor import Tensor
from slsdeep.trainer import TrainConfig, group_lrs, poly_lr, train
from test_metrics import pixel_loop
from test_ops import _conv_cases, brute_conv

RESULTS: dict = {}


@pytest.fixture
def verdict(capsys):
    """Record and print the outcome of one criterion; the test itself still asserts."""

    def report(key, title, ok, detail):
        RESULTS[key] = bool(ok)
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {key}: {title} -- {detail}")
        assert ok, detail

    return report


def test_architecture_fidelity(verdict):
    t0 = time.perf_counter()
    plan = dict(shape_plan(NetworkConfig()))
    elapsed = time.perf_counter() - t0
    enc, cat = plan["encoder.stage4"], plan["decoder.concat"]
    ok = enc == (None, 2048, 48, 48) and cat == (None, 6144, 48, 48) and elapsed < 1.0
    verdict("architecture", "shape plan at width 1, 384x384", ok,
            f"encoder {enc[1:]}, concat {cat[1:]}, {elapsed * 1e3:.2f} ms")


def test_gradient_suite(verdict, network_gradcheck):
    t0 = time.perf_counter()
    results = checks.run_scope("ops", seed=0)
    ops_elapsed = time.perf_counter() - t0
    worst_ops = max(r.max_rel_err for _, r in results)
    covered = {name.split("[")[0] for name, _ in results}
    (_, net), = network_gradcheck
    total = ops_elapsed + network_gradcheck.elapsed
    ok = (all(r.passed for _, r in results) and worst_ops < 1e-3 and net.passed and net.max_rel_err < 1e-3
          and {"nll_loss", "epe_loss", "total_loss", "conv2d", "maxpool2d", "batchnorm2d"} <= covered
          and total < 300)
    verdict("gradients", "finite-difference suite, operators + losses + network", ok,
            f"{len(results)} operator/loss cases worst {worst_ops:.1e}; network worst {net.max_rel_err:.1e}; "
            f"{total:.0f} s")


def test_conv_oracle(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    cases = _conv_cases()
    for case in cases:
        n, c, h, w, oc, k, stride, pad, dil, has_bias = case
        rng = np.random.default_rng(hash(case) % (1 << 32))
        x, wt = rng.standard_normal((n, c, h, w)), rng.standard_normal((oc, c, k, k))
        b = rng.standard_normal(oc) if has_bias else None
        got = ops.conv2d(Tensor(x), Tensor(wt), None if b is None else Tensor(b), stride=stride, padding=pad,
                         dilation=dil).data
        worst = max(worst, float(np.abs(got - brute_conv(x, wt, b, stride, pad, dil)).max()))
    elapsed = time.perf_counter() - t0
    ok = len(cases) == 50 and worst <= 1e-10 and elapsed < 60
    verdict("conv-oracle", "conv2d vs six-loop oracle", ok, f"{len(cases)} cases, max |diff| {worst:.1e}, "
            f"{elapsed:.1f} s")


def test_loss_oracles(verdict):
    half = Tensor(np.full((1, 1, 8, 8), 0.5))
    nll = nll_loss(half, np.ones((1, 1, 8, 8))).item()
    epe = epe_loss(Tensor(np.array([[[[0.0, 1.0], [0.0, 1.0]]]])), np.zeros((1, 1, 2, 2))).item()
    rng = np.random.default_rng(0)
    p = 0.05 + 0.9 * rng.random((2, 1, 8, 8))
    b = total_loss(Tensor(np.concatenate([1 - p, p], axis=1)), (rng.random((2, 1, 8, 8)) < 0.5).astype(float))
    ok = abs(nll - math.log(2)) < 1e-6 and abs(epe - 0.5) < 1e-3 and b.l_total == b.l_log + 0.5 * b.l_epe
    verdict("loss-oracles", "nll ln 2, epe step example, total arithmetic", ok,
            f"nll {nll:.9f}, epe {epe:.6f}, total identity exact: {b.l_total == b.l_log + 0.5 * b.l_epe}")


def test_metrics_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    counts_ok = formulas_ok = identity_ok = True
    for _ in range(100):
        shape = tuple(rng.integers(1, 24, size=2))
        pred = (rng.random(shape) < rng.random()).astype(np.uint8)
        gt = (rng.random(shape) < rng.random()).astype(np.uint8)
        c = confusion(pred, gt)
        tp, fp, tn, fn = pixel_loop(pred, gt)
        counts_ok &= (c.tp, c.fp, c.tn, c.fn) == (tp, fp, tn, fn)
        m = metrics_from_counts(c)
        safe = lambda a, d: 1.0 if d == 0 else a / d  # noqa: E731
        want = ((tp + tn) / (tp + fp + tn + fn), safe(2 * tp, 2 * tp + fp + fn), safe(tp, tp + fp + fn),
                safe(tp, tp + fn), safe(tn, tn + fp))
        formulas_ok &= all(abs(a - b) <= 1e-12 for a, b in zip((m.acc, m.dic, m.jac, m.sen, m.spe), want))
        identity_ok &= abs(m.dic - 2 * m.jac / (1 + m.jac)) <= 1e-12
    elapsed = time.perf_counter() - t0
    ok = counts_ok and formulas_ok and identity_ok and elapsed < 10
    verdict("metrics-oracle", "100 random mask pairs vs pixel loop", ok,
            f"counts {counts_ok}, formulas {formulas_ok}, dice-jaccard identity {identity_ok}, {elapsed:.2f} s")


def test_overfit_sanity(verdict):
    t0 = time.perf_counter()
    image, mask = data.synthetic_lesion(64, np.random.default_rng(0), radius=16, centre=(31.5, 31.5))
    model = build(desk_config(input_size=(64, 64)), init_seed=0)
    result = train(model, data.ArrayDataset(image[None], mask[None]), TrainConfig(epochs=200, batch_size=1))
    pred = binarize(model.forward(Tensor(image[None]), training=False))[0, 0]
    jac = metrics_from_counts(confusion(pred, mask[0])).jac
    first, last = result.log[0]["l_total"], result.log[-1]["l_total"]
    elapsed = time.perf_counter() - t0
    ok = len(result.log) == 200 and last < first and jac >= 0.95 and elapsed < 600
    verdict("overfit", "width 1/16, one 64x64 disk, 200 Adam iterations", ok,
            f"l_total {first:.4f} -> {last:.4f}, JAC {jac:.4f}, {elapsed:.1f} s")


def test_ablation_identities(verdict, tmp_path):
    image, mask = data.synthetic_lesion(64, np.random.default_rng(2))
    ds = data.ArrayDataset(image[None], mask[None])
    logs = []
    for loss in (LossConfig(alpha=0.0), LossConfig(use_epe=False)):
        out = tmp_path / f"run{len(logs)}"
        train(build(desk_config(input_size=(64, 64)), init_seed=1), ds, TrainConfig(epochs=3, batch_size=1,
                                                                                    loss=loss), out_dir=out)
        logs.append((out / "train_log.jsonl").read_bytes())
    epe_identical = logs[0] == logs[1]

    cfg = desk_config(skip_mode="all")
    model = build(cfg, init_seed=0)
    rng = np.random.default_rng(3)
    x = Tensor(rng.random((2, 3, 96, 96), dtype=np.float32))
    trace = []
    model.forward(x, training=False, trace=trace)
    audit = trace == [(n, (2,) + s[1:]) for n, s in shape_plan(cfg)]
    before = {k: t.data.copy() for k, t in model.params.items()}
    masks = (rng.random((2, 1, 96, 96)) < 0.4).astype(np.float32)
    step = train(model, data.ArrayDataset(x.data, masks), TrainConfig(epochs=1, batch_size=2))
    moved = all(not np.array_equal(before[k], t.data) for k, t in model.params.items())
    ok = epe_identical and audit and len(step.log) == 1 and moved
    verdict("ablations", "no-EPE == alpha 0; all-skip variant builds, trains, audits", ok,
            f"logs identical {epe_identical}; skip audit {audit}; one step updated every tensor {moved}")


def test_schedule(verdict):
    base, K = 0.001, 1000
    values = [poly_lr(base, k, K) for k in (0, K // 2, K)]
    want = [base, base * 0.5 ** 0.9, 0.0]
    points_ok = all(abs(a - b) <= 1e-12 for a, b in zip(values, want))
    image, mask = data.synthetic_lesion(64, np.random.default_rng(4))
    ds = data.ArrayDataset(np.stack([image] * 3), np.stack([mask] * 3))
    log = train(build(desk_config(input_size=(64, 64))), ds, TrainConfig(epochs=2, batch_size=2)).log
    ratio_ok = all(abs(r["lr_dec"] / r["lr_enc"] - 10) <= 1e-12 for r in log if r["lr_enc"] > 0)
    # record k+1 carries the rates used at iteration k
    spot_ok = all(group_lrs(TrainConfig(), r["iter"] - 1, len(log)) == {"encoder": r["lr_enc"], "decoder": r["lr_dec"]}
                  for r in log)
    ok = points_ok and ratio_ok and spot_ok
    verdict("schedule", "poly values and 1:10 encoder:decoder ratio", ok,
            f"poly at 0, K/2, K = {values}; ratio 1:10 on all {len(log)} logged iterations {ratio_ok}")


def test_determinism(verdict, synthetic_dir, tmp_path, monkeypatch):
    _, train_manifest, val_manifest = synthetic_dir
    monkeypatch.chdir(tmp_path)
    args = ["train", "--network.width_scale=1/16", "--network.input_size=64,64", "--train.epochs=2",
            "--train.batch_size=2", f"--paths.train_manifest={train_manifest}",
            f"--paths.val_manifest={val_manifest}", "--seed", "11"]
    codes = [cli.main(args + ["--out", name]) for name in ("a", "b")]
    files = ["train_log.jsonl", "val_log.jsonl", "checkpoints/final.ckpt", "checkpoints/best.ckpt"]
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files}
    n_iters = len((tmp_path / "a" / "train_log.jsonl").read_text().splitlines())
    augmented = "augment.enabled = true" in (tmp_path / "a" / "config.resolved.txt").read_text()
    ok = codes == [0, 0] and all(same.values()) and augmented
    verdict("determinism", "two seeded desk-scale training runs", ok,
            f"{n_iters} iterations each with augmentation; byte-identical: {same}")


def test_published_scores_substitute(verdict):
    # The published challenge scores need the challenge data, pretrained weights and GPU time;
    # this criterion is met by the substitute property suite above passing in full.
    expected = {"architecture", "gradients", "conv-oracle", "loss-oracles", "metrics-oracle", "overfit",
                "ablations", "schedule", "determinism"}
    missing = sorted(expected - set(RESULTS))
    failed = sorted(k for k, v in RESULTS.items() if not v)
    ok = not missing and not failed
    verdict("scores-substitute", "published scores not reproducible; property suite substitutes", ok,
            f"substitute criteria passed: {sum(RESULTS.values())}/{len(expected)}"
            + (f"; missing {missing}" if missing else "") + (f"; failed {failed}" if failed else ""))
