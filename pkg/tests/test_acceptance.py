"""Acceptance criteria 1-9, each at its stated tolerance.

Every test records a one-line outcome that is printed in the session
summary. The end-to-end run (criterion 7) caches its run directory under
``STYLEALIGN_ACCEPTANCE_DIR`` (default ``.acceptance`` in the repository) and
resumes from it, which is safe because the manifest pins the config digest.
"""
import math
import os
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE, TINY
from stylealign.alignment import (
    AlignmentConfig,
    align_image,
    calibrate_thresholds,
    prediction_uncertainty_detection,
    prediction_uncertainty_segmentation,
)
from stylealign.conditioning import ProducerConfig
from stylealign.config import parse_config
from stylealign.diffusion.model import DiffusionHyper, train_control
from stylealign.evidential.model import TaskHyper, predict_batch, train_task_model
from stylealign.evidential.nig import NIGParams, nig_nll_loss, uncertainty_map
from stylealign.io import load_samples
from stylealign.measure import ScanSeries, cimt_from_mask, curvature_proxy_from_series
from stylealign.metrics import bland_altman, correlation_r2, dice_iou, match_landmarks
from stylealign.pipeline import compare_source_only, run_pipeline
from stylealign.synthdata import SOURCE_STYLE, TARGET_STYLE, SceneSpec, generate_dataset
from test_diffusion import zero_init_max_difference
from test_measure import polyline_series
from test_metrics import exhaustive_matching, textbook_pearson
from test_nig import _nll_oracle, max_relative_gradient_error, random_grid_case
from test_selection import selection_agreement

REPO = Path(__file__).resolve().parents[1]

# desk-scale end-to-end experiment; see the decisions ledger for the reduced DDIM steps
E2E_CONFIG = {
    "name": "acceptance_detection",
    "seed": 0,
    "task": "detection",
    "data": {"synthetic": {"train": 200, "val": 50, "target": 50}},
    "diffusion": {"base_epochs": 60, "control_epochs": 60, "lr": 1e-3},
    "task_model": {"epochs": 30},
    "alignment": {"m": 8, "n": 4, "ddim_steps": 20, "calibration_quantile": 0.95},
}


def record(k: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'} | {detail}")


def test_criterion_1_closed_form_oracles():
    one = torch.ones(1, dtype=torch.float64)
    loss = nig_nll_loss(NIGParams(0 * one, one, 2 * one, one), 0 * one).item()
    oracle = float(_nll_oracle(0, 0, 1, 2, 1))
    ok_loss = abs(loss - 0.981) < 1e-3 and abs(loss - oracle) < 1e-9

    rng = np.random.default_rng(0)
    w, a, b = 1 + rng.random((4, 16, 16)), 1.001 + rng.random((4, 16, 16)), rng.random((4, 16, 16)) + 1e-4
    umap = uncertainty_map(NIGParams(np.zeros_like(w), w, a, b))
    ok_map = np.array_equal(umap, b / (w * (a - 1)))

    eq11 = prediction_uncertainty_detection([np.array([[0.0, 0.0]]), np.array([[2.0, 0.0]])])
    m = np.array([1, 1, 0, 0, 0, 0], bool)
    other = np.array([0, 0, 0, 0, 1, 1], bool)
    a4 = np.array([1, 1, 1, 1, 0, 0], bool)
    b4 = np.array([0, 0, 1, 1, 1, 1], bool)
    eq12 = [prediction_uncertainty_segmentation(x) for x in ([m, m], [m, other], [a4, b4])]
    ok = ok_loss and ok_map and eq11 == 1.0 and eq12 == [0.0, 1.0, 2 / 3]
    record(1, ok, f"loss {loss:.6f} (oracle {oracle:.6f}), U map exact={ok_map}, Eq11 {eq11}, Eq12 {eq12}")
    assert ok


def test_criterion_2_gradient_checks():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        worst = max(worst, max_relative_gradient_error(*random_grid_case(rng)))
    ok = worst < 1e-4
    record(2, ok, f"100 random 2x3 grids, worst relative error {worst:.2e} (< 1e-4)")
    assert ok


def test_criterion_3_zero_init_identity(tiny_base):
    rng = np.random.default_rng(3)
    conds = (rng.random((5, 64, 64)) < rng.uniform(0.05, 0.5, size=(5, 1, 1))).astype(np.float32)
    diff = zero_init_max_difference(tiny_base, conds, steps=10, seed=7)
    record(3, diff == 0.0, f"5 random conditions, 10 DDIM steps, max pixel diff {diff}")
    assert diff == 0.0


def test_criterion_4_frozen_models(tiny_base, source_images, source_conditions, source_samples):
    ctl = train_control(source_images[:16], source_conditions[:16], tiny_base, DiffusionHyper(epochs=1, **TINY))
    task = train_task_model(source_samples[:16], "detection", TaskHyper(epochs=1, hourglass_channels=16), seed=0)
    before = (ctl.digest(), ctl.base_digest(), task.digest())
    targets = generate_dataset(SceneSpec(), TARGET_STYLE, 50, 4)
    cfg = AlignmentConfig(m=2, n=2, t_model=1.0, t_pre=5.0, ddim_steps=2, seed=0)
    for k, s in enumerate(targets):
        align_image(s.image, ctl, task, ProducerConfig(m=2), AlignmentConfig(**{**cfg.__dict__, "seed": k}))
    after = (ctl.digest(), ctl.base_digest(), task.digest())
    record(4, before == after, f"50 align_image calls, digests unchanged={before == after}")
    assert before == after


def test_criterion_5_selection_oracle():
    disagreements, fallbacks = selection_agreement(1000, seed=5)
    ok = disagreements == 0 and fallbacks > 0
    record(5, ok, f"1000 random instances (m,n <= 6): {disagreements} disagreements, {fallbacks} fallback cases")
    assert ok


def test_criterion_6_metric_oracles():
    checks = {}
    a = np.array([1, 1, 0, 0, 0], bool)
    b = np.array([1, 1, 1, 1, 0], bool)
    checks["dice_iou"] = dice_iou(a, b) == pytest.approx((2 / 3, 0.5)) and dice_iou(a, a) == (1.0, 1.0) \
        and dice_iou(a, ~a) == (0.0, 0.0)

    rng = np.random.default_rng(6)
    ok_match = True
    for _ in range(200):
        pred = rng.uniform(0, 25, size=(rng.integers(0, 6), 2))
        truth = rng.uniform(0, 25, size=(rng.integers(1, 6), 2))
        pairs = match_landmarks(pred, truth, 10.0)
        count, total = exhaustive_matching(pred, truth, 10.0)
        ok_match &= len(pairs) == count and abs(sum(p[2] for p in pairs) - total) < 1e-9
    checks["matching"] = ok_match

    ba = bland_altman([1.0, 3.0], [0.0, 0.0])
    checks["bland_altman_fixture"] = abs(ba.bias - 2) < 1e-12 and abs(ba.sd - math.sqrt(2)) < 1e-12
    z = rng.normal(size=40)
    z = (z - z.mean()) / z.std(ddof=1)
    replay = bland_altman(1.2 + 3.4 * z, np.zeros(40))
    checks["paper_replay"] = abs(replay.loa_low + 5.4) <= 0.1 and abs(replay.loa_high - 7.8) <= 0.1

    xa = [1.2, 2.4, 3.1, 4.8, 5.0, 6.3, 7.7, 8.1, 9.4, 10.0]
    xb = [1.0, 2.9, 2.7, 5.1, 4.4, 6.9, 7.1, 8.8, 9.0, 10.7]
    got, want = correlation_r2(xa, xb), textbook_pearson(xa, xb)
    checks["correlation"] = abs(got[0] - want[0]) < 1e-9 and abs(got[1] - want[1]) < 1e-9
    ok = all(checks.values())
    record(6, ok, f"{checks}; replay limits ({replay.loa_low:.3f}, {replay.loa_high:.3f}) vs (-5.4, 7.8)")
    assert ok


def test_criterion_8_measurements():
    mask = np.zeros((64, 64), np.uint8)
    mask[20:30] = 1
    cimt = cimt_from_mask(mask, 0.15)
    angle = curvature_proxy_from_series(ScanSeries(polyline_series([10, -10])))
    ok = cimt == 10 * 0.15 and abs(angle - 20.0) <= 0.5
    record(8, ok, f"uniform band CIMT {cimt} (closed form {10 * 0.15}), two-segment proxy {angle:.3f} deg")
    assert ok


@pytest.fixture(scope="module")
def e2e_run():
    root = Path(os.environ.get("STYLEALIGN_ACCEPTANCE_DIR", REPO / ".acceptance"))
    cfg = parse_config({**E2E_CONFIG, "output_root": str(root)})
    t0 = time.perf_counter()
    run_dir = run_pipeline(cfg, resume=True)
    return cfg, run_dir, time.perf_counter() - t0


def test_criterion_9_calibration_consistency(e2e_run):
    import json

    from stylealign.evidential.model import TaskCheckpoint

    cfg, run_dir, _ = e2e_run
    task = TaskCheckpoint.load(run_dir / "checkpoints" / "task.pt")
    val = load_samples(run_dir / "data" / "val")
    t_model = calibrate_thresholds(task, val, 0.95)
    u = np.array([p.model_uncertainty for p in predict_batch(task, np.stack([s.image for s in val]))])
    frac = float(np.mean(u <= t_model))
    stored = json.loads((run_dir / "calibration.json").read_text())["t_model"]
    ok = frac >= 0.95 - 1.0 / len(val) and stored == t_model
    record(9, ok, f"T_model {t_model:.5g}; {frac:.1%} of {len(val)} source validation images pass (need >= 95%)")
    assert ok


def _convention_mean(report: dict) -> float:
    """Mean per-image model uncertainty, an image without output counting as infinite."""
    u = [math.inf if v is None else v for v in report["model_uncertainties"]]
    return float(np.mean(u))


def _paired_finite_means(a: dict, b: dict) -> tuple[float, float, int]:
    pairs = [(x, y) for x, y in zip(a["model_uncertainties"], b["model_uncertainties"])
             if x is not None and y is not None]
    if not pairs:
        return math.nan, math.nan, 0
    xs, ys = np.array(pairs).T
    return float(xs.mean()), float(ys.mean()), len(pairs)


def test_criterion_7_end_to_end(e2e_run):
    import json

    cfg, run_dir, seconds = e2e_run
    reports = json.loads((run_dir / "reports" / "evaluation.json").read_text())
    src, aligned = reports["source_only"], reports["aligned"]
    gain = aligned["f1"] - src["f1"]
    u_raw, u_aligned = _convention_mean(src), _convention_mean(aligned)
    u_drop = u_aligned < u_raw
    raw_paired, aligned_paired, n_paired = _paired_finite_means(src, aligned)
    ok = gain >= 10.0 and u_drop
    record(7, ok, f"F1 source-only {src['f1']:.2f} -> aligned {aligned['f1']:.2f} (gain {gain:+.2f}, need >= 10); "
                  f"mean U (no output = inf) {u_raw:.4g} -> {u_aligned:.4g}, "
                  f"{src['num_without_output']}/{src['n_images']} raw targets without output; "
                  f"finite-only mean U {src['mean_model_uncertainty']} -> {aligned['mean_model_uncertainty']}; "
                  f"paired finite mean U over {n_paired} images {raw_paired:.4g} -> {aligned_paired:.4g}; "
                  f"source-val F1 {reports['source_validation']['f1']:.2f}; this session {seconds / 60:.1f} min")
    assert ok


def test_target_uncertainty_exceeds_source(e2e_run):
    """Finite per-image model uncertainty is higher on raw targets than on source validation."""
    import json

    _, run_dir, _ = e2e_run
    reports = json.loads((run_dir / "reports" / "evaluation.json").read_text())
    u_src = reports["source_validation"]["mean_model_uncertainty"]
    u_tgt = reports["source_only"]["mean_model_uncertainty"]
    print(f"finite mean U: source validation {u_src}, raw targets {u_tgt}; "
          f"map mean {reports['source_validation']['mean_uncertainty_map']:.3g} vs "
          f"{reports['source_only']['mean_uncertainty_map']:.3g}")
    assert u_tgt is not None and u_tgt > u_src
