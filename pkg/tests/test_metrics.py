import json

import numpy as np
import pytest

import oracles
from wholebody_lift.metrics import MetricReport, align_pelvis, evaluate, format_table, mpjpe


def test_align_pelvis(topo, rng):
    pose = rng.normal(size=(133, 3))
    centered = align_pelvis(pose, topo)
    np.testing.assert_allclose(align_pelvis(centered, topo), centered, atol=1e-12)
    np.testing.assert_allclose(align_pelvis(pose + (7, 8, 9), topo), centered, atol=1e-12)
    hips = np.zeros((133, 3))
    hips[topo.left_hip] = (1, 0, 0)
    hips[topo.right_hip] = (-1, 0, 0)
    np.testing.assert_array_equal(align_pelvis(hips, topo), hips)


def test_mpjpe_offsets(topo, rng):
    gt = rng.normal(size=(4, 133, 3)) * 100
    everything = np.arange(133)
    for alignment in ("pelvis", "nose", "none"):
        assert mpjpe(gt, gt, everything, alignment, topo) == 0.0
    assert mpjpe(gt, gt, np.arange(91, 133), "wrist", topo) == 0.0
    shifted = gt + (3.0, 0.0, 4.0)
    assert mpjpe(shifted, gt, everything, "none", topo) == pytest.approx(5.0, abs=1e-12)
    assert mpjpe(shifted, gt, everything, "pelvis", topo) == pytest.approx(0.0, abs=1e-12)


def test_mpjpe_errors(topo):
    z = np.zeros((1, 133, 3))
    with pytest.raises(ValueError, match="alignment"):
        mpjpe(z, z, [0], "procrustes", topo)
    with pytest.raises(ValueError, match="empty"):
        mpjpe(z, z, [], "pelvis", topo)
    with pytest.raises(ValueError, match="hand"):
        mpjpe(z, z, [0, 1], "wrist", topo)


def test_evaluate_matches_loop_oracle(topo, rng):
    gt = rng.normal(size=(5, 133, 3)) * 200
    pred = gt + rng.normal(size=(5, 133, 3)) * 25 + rng.normal(size=(5, 1, 3)) * 50
    rep = evaluate(pred, gt, topo)
    ref = oracles.six_metrics(pred.tolist(), gt.tolist(), topo)
    for key, value in ref.items():
        assert getattr(rep, key) == pytest.approx(value, abs=1e-9), key


def test_face_block_offset(topo, rng):
    gt = rng.normal(size=(3, 133, 3)) * 200
    pred = gt.copy()
    pred[:, 23:91] += (0, 0, 10)
    rep = evaluate(pred, gt, topo)
    ref = oracles.six_metrics(pred.tolist(), gt.tolist(), topo)
    assert rep.mpjpe_face == pytest.approx(10.0, abs=1e-9) == ref["mpjpe_face"]
    assert rep.mpjpe_face_aligned == pytest.approx(0.0, abs=1e-9)
    assert ref["mpjpe_face_aligned"] == pytest.approx(0.0, abs=1e-9)
    assert rep.mpjpe_body == 0.0


def test_block_translation_invariance(topo, rng):
    gt = rng.normal(size=(3, 133, 3)) * 200
    pred = gt + rng.normal(size=(3, 133, 3)) * 10
    base = evaluate(pred, gt, topo)
    moved = pred.copy()
    moved[:, 23:91] += rng.normal(size=(3, 1, 3)) * 100
    moved[:, 91:112] += rng.normal(size=(3, 1, 3)) * 100
    moved[:, 112:133] += rng.normal(size=(3, 1, 3)) * 100
    rep = evaluate(moved, gt, topo)
    assert rep.mpjpe_face_aligned == pytest.approx(base.mpjpe_face_aligned, abs=1e-9)
    assert rep.mpjpe_hands_aligned == pytest.approx(base.mpjpe_hands_aligned, abs=1e-9)


def test_evaluate_identical_is_zero(topo, rng):
    gt = rng.normal(size=(2, 133, 3))
    rep = evaluate(gt, gt, topo)
    assert all(v == 0.0 for v in vars(rep).values())


def test_sample_count_mismatch(topo):
    with pytest.raises(ValueError, match="sample count"):
        evaluate(np.zeros((2, 133, 3)), np.zeros((3, 133, 3)), topo)


def test_report_serialization(tmp_path):
    rep = MetricReport(47.87, 45.39, 36.37, 15.95, 67.86, 27.77)
    p = tmp_path / "r.json"
    p.write_text(rep.to_json(method="Proposed"))
    doc = json.loads(p.read_text())
    assert doc["units"] == "mm"
    assert MetricReport.load(p) == rep
    table = format_table([("Proposed", rep)])
    header, _, row, units = table.strip().splitlines()
    assert header.split() == ["Method", "All", "Body", "Face/Aligned", "Hand/Aligned"]
    assert row.split() == ["Proposed", "47.87", "45.39", "36.37/15.95", "67.86/27.77"]
    assert "mm" in units
