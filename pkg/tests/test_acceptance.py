"""End-to-end acceptance checks.

Each test prints one ``[acceptance n] PASS|FAIL ...`` line (visible with
``pytest -s`` or in ``-v`` runs) before asserting, so a failing criterion
still reports its measured numbers. Run just this file with::

    pytest tests/test_acceptance.py -v -s
"""

import math
import statistics
import time
from dataclasses import replace

import numpy as np
import pytest

from oracles import check_against_oracle, random_hierarchy_case

from pointedge.autodiff import Tensor
from pointedge.config import load_config
from pointedge.graph import edge_upsample_weights
from pointedge.losses import edge_loss, metrics, point_loss
from pointedge.pipeline import ablate, evaluate, loss_csv, run_gradcheck, train

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {n}] {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return emit


def test_1_full_gradient_check(report):
    t0 = time.perf_counter()
    rep = run_gradcheck(load_config("gradcheck"), eps=1e-5)
    dt = time.perf_counter() - t0
    worst = max(rep.errors, key=rep.errors.get)
    ok = rep.max_error < 1e-4 and dt < 120
    assert report(1, ok, f"max relative error {rep.max_error:.2e} ({worst}), {len(rep.errors)} tensors, {dt:.1f}s")


def test_2_random_hierarchies(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    failures = []
    for case in range(200):
        layers, k_list, k_interp = random_hierarchy_case(rng)
        try:
            check_against_oracle(layers, k_list, k_interp)
        except AssertionError as exc:
            failures.append((case, str(exc)[:200]))
    dt = time.perf_counter() - t0
    ok = not failures and dt < 60
    assert report(2, ok, f"200 hierarchies, {len(failures)} failures, {dt:.1f}s"), failures[:3]


def test_3_toy_overfit(report):
    cfg = load_config("toy")
    t0 = time.perf_counter()
    rec = train(cfg)
    res = evaluate(cfg, rec.params, "train")
    dt = time.perf_counter() - t0
    ok = cfg.epochs <= 300 and res.metrics.oa >= 0.95 and res.edge_acc >= 0.90 and dt < 300
    assert report(3, ok, f"OA {res.metrics.oa:.4f}, edge accuracy {res.edge_acc:.4f} after {cfg.epochs} epochs, {dt:.1f}s")


def test_4_hierarchical_vs_independent(report, capsys):
    base = load_config("toy_geometry")
    scores = {}
    for mode in ("hierarchical", "independent"):
        for seed in (0, 1, 2):
            cfg = replace(base.with_network(graph_mode=mode), seed=seed)
            res = evaluate(cfg, train(cfg).params, "test")
            scores.setdefault(mode, []).append(res.metrics.miou)
    with capsys.disabled():
        print(f"\n{'graph mode':<14} {'seed 0':>8} {'seed 1':>8} {'seed 2':>8} {'median':>8}")
        for mode, vals in scores.items():
            cells = " ".join(f"{v:8.4f}" for v in vals)
            print(f"{mode:<14} {cells} {statistics.median(vals):8.4f}")
    h, i = statistics.median(scores["hierarchical"]), statistics.median(scores["independent"])
    assert report(4, h >= i, f"held-out median mIoU hierarchical {h:.4f} vs independent {i:.4f} (diff {h - i:+.4f})")


def test_5_ablation_row_counts(report):
    cfg = load_config("ablation_smoke")
    counts = {axis: len(ablate(cfg, axis).rows) for axis in ("edge_function", "message_passing", "graph_mode")}
    ok = counts == {"edge_function": 5, "message_passing": 3, "graph_mode": 2}
    assert report(5, ok, f"rows per axis {counts}")


def test_6_spot_checks(report):
    w = edge_upsample_weights([1.0, 1.0], [1.0, 2.0])
    c = 5
    lp = float(point_loss(Tensor(np.zeros((10, c))), np.arange(10) % c).data)
    le = float(edge_loss(Tensor(np.full(6, 0.5)), np.array([1, 0, 1, 1, 0, 0.0]), 1.0).data)
    m = metrics(np.array([[3, 1], [1, 3]]))
    checks = {
        "upsample weights": np.allclose(w, [0.8, 0.2], rtol=0, atol=1e-6),
        "uniform point loss": abs(lp - math.log(c)) < 1e-12,
        "half edge loss": abs(le - math.log(2)) < 1e-12,
        "mIoU fixture": m.miou == 0.6,
    }
    detail = ", ".join(f"{k} {'ok' if v else 'off'}" for k, v in checks.items())
    assert report(6, all(checks.values()), f"{detail}; weights {w.tolist()}, mIoU {m.miou!r}")


def test_7_seeded_runs_are_bitwise_identical(report, tmp_path):
    cfg = replace(load_config("toy"), epochs=3)
    a = train(cfg, tmp_path / "a")
    b = train(cfg, tmp_path / "b")
    same_ckpt = (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    same_csv = loss_csv(a) == loss_csv(b)
    assert report(7, same_ckpt and same_csv, f"checkpoint identical {same_ckpt}, loss CSV identical {same_csv}")


def test_8_full_configs(report):
    want = {"s3dis": (100, 25), "scannet": (120, 30)}
    problems = []
    for name, (epochs, every) in want.items():
        cfg = load_config(name)
        got = (
            cfg.network.layer_sizes, cfg.network.k_list, cfg.network.k_interp, cfg.batch_size,
            cfg.base_lr, cfg.momentum, cfg.weight_decay, cfg.epochs, cfg.lr_decay_every,
        )
        expected = ((16, 64, 256, 1024, 4096), (4, 6, 10, 14, 16), 3, 16, 0.05, 0.9, 1e-4, epochs, every)
        if got != expected:
            problems.append(f"{name}: {got}")
    assert report(8, not problems, "s3dis and scannet presets" + (f": {problems}" if problems else " match"))
