"""Acceptance gate: one PASS/FAIL line per criterion, tolerances pinned here.

Criteria 1-4 train LeNet models on the real MNIST / Fashion-MNIST sources
(seeds 0, 1, 2) and take a few minutes on one CPU core.  Criteria 5-6 need a
GPU and hours of training and are reported as skipped.
"""

import time

import numpy as np
import pytest
import torch
from scipy import stats

from ctxshift.context_bank import ContextBank
from ctxshift.evaluation import RunRecord, compare_runs, holds_ordering
from ctxshift.lt_data import (
    LongTailDataset,
    assign_shot_groups,
    build_cmnist_lt,
    build_longtail_profile,
)
from ctxshift.models import DualBranchModel, TinyConvNet
from ctxshift.recipes import csa_over_seeds, table1_checks, trio_over_seeds
from ctxshift.saliency import ContextEntry, grad_cam_batch
from ctxshift.sampling import SamplerSpec, class_sampling_probs, draw_indices
from ctxshift.sources import SourceMissingError, load_source
from ctxshift.training import TrainConfig, blend, train_csa

from conftest import make_synthetic

SEEDS = (0, 1, 2)
TOL_MNIST = 4.0
TOL_FASHION = 5.0
RUNTIME_TABLE1 = 600.0
RUNTIME_FIG5 = 900.0
SAMPLER_L1 = 0.01
SAMPLER_SUM = 1e-9
GRADCHECK_REL = 1e-3
CHI2_P = 0.01


def _require(name):
    try:
        load_source(name, "train")
    except SourceMissingError as exc:
        pytest.fail(f"source data missing, criterion cannot run: {exc}")


_CACHE = {}


def _trio(name):
    if name not in _CACHE:
        _require("fashion-mnist" if name == "fashion-lt" else "mnist")
        t0 = time.time()
        trio = trio_over_seeds(name, SEEDS)
        _CACHE[name] = (trio, time.time() - t0)
    return _CACHE[name]


def _table1(name, tol, report_line, criterion):
    trio, seconds = _trio(name)
    checks = table1_checks(name, trio, tol)
    for c in checks:
        report_line(f"{criterion} {c.name}", c.passed, c.detail)
    fast = seconds < RUNTIME_TABLE1
    report_line(f"{criterion} {name} runtime < {RUNTIME_TABLE1:.0f}s", fast, f"{seconds:.0f}s for 3 seeds")
    assert all(c.passed for c in checks) and fast


@pytest.mark.slow
def test_c1_mnist_table1(report_line):
    _table1("mnist-lt", TOL_MNIST, report_line, "C1")


@pytest.mark.slow
def test_c2_fashion_table1(report_line):
    _table1("fashion-lt", TOL_FASHION, report_line, "C2")


@pytest.mark.slow
def test_c3_cmnist_inversion(report_line):
    mnist, _ = _trio("mnist-lt")
    t0 = time.time()
    cmnist, seconds = _trio("cmnist-lt")
    ce, crt, cb = (100 * cmnist[m].overall_acc for m in ("CE", "CRT", "CB_RS"))
    inverted = cb < ce and cb < crt
    report_line("C3 cmnist-lt CB-RS < CE and CB-RS < cRT", inverted, f"CB-RS {cb:.1f}, CE {ce:.1f}, cRT {crt:.1f}")
    plain = mnist["CB_RS"].overall_acc > mnist["CE"].overall_acc
    report_line("C3 mnist-lt CB-RS > CE", plain,
                f"CB-RS {100 * mnist['CB_RS'].overall_acc:.1f}, CE {100 * mnist['CE'].overall_acc:.1f}")
    report = compare_runs([RunRecord(m, "cmnist-lt", cmnist[m]) for m in ("CE", "CRT", "CB_RS")])
    flagged = holds_ordering(report, "CE", "CB_RS") and holds_ordering(report, "CRT", "CB_RS")
    fast = seconds < RUNTIME_FIG5
    report_line(f"C3 cmnist-lt runtime < {RUNTIME_FIG5:.0f}s", fast, f"{seconds:.0f}s for 3 seeds")
    assert inverted and plain and flagged and fast


@pytest.mark.slow
def test_c4_csa_beats_cbrs_on_cmnist(report_line):
    cmnist, _ = _trio("cmnist-lt")
    csa = csa_over_seeds("cmnist-lt", SEEDS)
    a, b = 100 * csa.overall_acc, 100 * cmnist["CB_RS"].overall_acc
    report_line("C4 cmnist-lt CSA > CB-RS (3-seed mean)", a > b, f"CSA {a:.1f}, CB-RS {b:.1f}")
    assert a > b


@pytest.mark.parametrize("criterion", [
    "C5 cifar100-lt rho=100 CE/cRT/CSA/CSA+mixup within +-1.5",
    "C6 cifar100-lt head ordering balanced > ensemble > uniform",
])
def test_c5_c6_gpu_extended(criterion, report_line):
    report_line(criterion, None, "GPU-scale target; run `ctxshift reproduce table2_cifar100_100` on a GPU host")
    pytest.skip("needs one GPU and hours of ResNet-32 training")


def test_c7_sampler(report_line):
    ds = make_synthetic([400, 150, 40, 9, 2])
    worst_l1, worst_sum = 0.0, 0.0
    for q in (0.0, 0.5, 1.0):
        spec = SamplerSpec.from_counts(ds.class_counts(), q)
        idx = draw_indices(ds, spec, 100_000, seed=int(10 * q))
        emp = np.bincount(ds.labels[idx], minlength=5) / len(idx)
        worst_l1 = max(worst_l1, float(np.abs(emp - np.array(spec.class_probs)).sum()))
        worst_sum = max(worst_sum, abs(class_sampling_probs(ds.class_counts(), q).sum() - 1))
    ok = worst_l1 < SAMPLER_L1 and worst_sum <= SAMPLER_SUM
    report_line("C7 sampler", ok, f"max L1 {worst_l1:.4f} (< {SAMPLER_L1}), max |sum-1| {worst_sum:.1e}")
    assert ok


def test_c8_blend(report_line):
    g = torch.Generator().manual_seed(0)
    t, c, m = torch.rand(4, 3, 8, 8, generator=g), torch.rand(4, 3, 8, 8, generator=g), torch.rand(4, 8, 8, generator=g)
    identity = torch.equal(blend(t, c, m, 0.0), t)
    swap = torch.equal(blend(t, c, torch.ones(4, 8, 8), 1.0), c)
    bounded = True
    for _ in range(1000):
        a, b = torch.rand(3, 5, 5, generator=g), torch.rand(3, 5, 5, generator=g)
        out = blend(a, b, torch.rand(5, 5, generator=g), float(torch.rand(1, generator=g)))
        bounded &= bool(torch.all(out >= torch.minimum(a, b)) and torch.all(out <= torch.maximum(a, b)))
    ok = identity and swap and bounded
    report_line("C8 blend", ok, f"identity {identity}, swap {swap}, convex on 1000 triples {bounded}")
    assert ok


def test_c9_bank_fifo(report_line):
    rng = np.random.default_rng(9)
    bad = 0
    for _ in range(1000):
        V = int(rng.integers(1, 16))
        bank, pushed = ContextBank(V), []
        for _ in range(int(rng.integers(0, 50))):
            tag = int(rng.integers(0, 10**6))
            bank.push(ContextEntry(torch.full((1, 2, 2), float(tag)), torch.zeros(2, 2)))
            pushed.append(tag)
        held = [int(e.image[0, 0, 0]) for e in bank]
        bad += held != pushed[-V:] if pushed else held != []
    report_line("C9 bank FIFO", bad == 0, f"{bad} mismatches in 1000 randomized trials")
    assert bad == 0


def test_c10_gradcam_gradient_check(report_line):
    torch.manual_seed(0)
    model = DualBranchModel(TinyConvNet(1, 3, 4), 3).double()
    x = torch.randn(3, 1, 4, 4, dtype=torch.float64)
    y = torch.tensor([0, 1, 2])
    fmap = model.conv_features(x).detach().requires_grad_(True)
    score = model.head_logits(model.features_from_conv(fmap), "uniform").gather(1, y.view(-1, 1)).sum()
    (analytic,) = torch.autograd.grad(score, fmap)
    eps, numeric = 1e-6, torch.zeros_like(fmap)
    base = fmap.detach().flatten()
    with torch.no_grad():
        for i in range(base.numel()):
            vals = []
            for sign in (1, -1):
                f = base.clone()
                f[i] += sign * eps
                z = model.head_logits(model.features_from_conv(f.view_as(fmap)), "uniform")
                vals.append(z.gather(1, y.view(-1, 1)).sum())
            numeric.view(-1)[i] = (vals[0] - vals[1]) / (2 * eps)
    rel = float((analytic - numeric).abs().max() / numeric.abs().max())
    cams, _ = grad_cam_batch(model, x, y)
    from ctxshift.saliency import cam_from_features
    cam_err = float((cams - cam_from_features(fmap.detach(), numeric, (4, 4))).abs().max())
    ok = rel < GRADCHECK_REL
    report_line("C10 Grad-CAM gradient check", ok, f"max rel err {rel:.2e} (< {GRADCHECK_REL}), cam diff {cam_err:.1e}")
    assert ok


def test_c11_loss_additivity(report_line):
    ds = make_synthetic([80, 40, 16, 8])
    cfg = TrainConfig(backbone="tiny", epochs=4, batch_size=16, warmup_epochs=1, freeze_aug_last_epochs=1,
                      delta=0.5, seed=0)
    model, _ = train_csa(ds, cfg)
    recs = model.loss_records
    exact = all(r.total == r.loss_uniform + r.loss_balanced for r in recs)
    zero_before = all(r.loss_balanced == 0.0 for r in recs if not r.bank_ready)
    ready = sum(r.bank_ready for r in recs)
    ok = exact and zero_before and ready > 0
    report_line("C11 loss additivity", ok,
                f"L = Lu + Lb exact on {len(recs)} steps: {exact}; Lb = 0 before ready: {zero_before}; ready steps {ready}")
    assert ok


def test_c12_cmnist_construction(report_line):
    profile = build_longtail_profile(10, 5000, 100)
    labels = np.concatenate([np.full(n, k) for k, n in enumerate(profile.counts)]).astype(np.int64)
    images = np.ones((len(labels), 2, 2, 1), np.float32)
    base = LongTailDataset(images, labels, profile, assign_shot_groups(profile), 0, "mnist-lt")
    ds = build_cmnist_lt(base, 0.25, seed=0)
    n = len(labels)
    rate = len(ds.metadata["flips"]) / n
    sigma = np.sqrt(0.25 * 0.75 / n)
    flip_ok = abs(rate - 0.25) <= 3 * sigma
    ids = np.array(ds.metadata["color_ids"])
    heads = ds.metadata["head_classes"]
    p = stats.chisquare(np.bincount(ids[np.isin(ds.labels, heads)], minlength=10)).pvalue
    purity = all(len({tuple(px) for px in ds.images[ds.labels == k].reshape(-1, 3)}) == 1
                 for k in range(10) if k not in heads)
    ok = flip_ok and p > CHI2_P and purity
    report_line("C12 CMNIST-LT construction", ok,
                f"flip rate {rate:.4f} (|d| {abs(rate - 0.25) / sigma:.2f} sigma), head color chi2 p {p:.3f}, "
                f"tail purity {purity}")
    assert ok
