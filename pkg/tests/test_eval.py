import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynflow.data import SynthConfig, generate_synthetic_sequence
from dynflow.eval import (EmptyPredictor, EvalError, KeypointSet, OraclePredictor, crop_window,
                          evaluate_novel_views, format_study, mask_scale, misalign, misalignment_study, oks,
                          psnr, silhouette_iou, training_view_psnr, write_report)


@pytest.fixture(scope="module")
def seq():
    cfg = SynthConfig(frame_count=4, width=32, height=32, focal=57.5, lat_steps=8, lon_steps=12)
    return generate_synthetic_sequence(cfg, seed=0)


class TestPsnr:
    def test_closed_forms(self):
        a = np.zeros((4, 4, 3))
        assert psnr(a, a) == math.inf
        assert psnr(a, a + 0.1) == pytest.approx(20.0)
        assert psnr(a, a + 1.0) == pytest.approx(0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))


class TestOks:
    names = ("a", "b")

    def test_exp_minus_one(self):
        gt = KeypointSet(self.names, [[0, 0], [0, 10]], scale=10.0)
        pred = KeypointSet(self.names, [[0, 0], [0, 10 + 2 * math.sqrt(2)]])
        assert oks(pred, gt, 0.1) == pytest.approx(math.exp(-1), rel=1e-12)

    def test_translation_invariant(self):
        gt = KeypointSet(self.names, [[3, 4], [8, 1]], scale=5.0)
        pred = KeypointSet(self.names, [[103, -4], [108, -7]])
        assert oks(pred, gt) == 1.0

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=8, max_size=8), st.floats(0.05, 1.0))
    def test_bounded(self, coords, kappa):
        names = ("a", "b", "c", "d")
        gt = KeypointSet(names, np.arange(8).reshape(4, 2) * 3.0)
        pred = KeypointSet(names, np.reshape(coords, (4, 2)))
        assert 0.0 <= oks(pred, gt, kappa) <= 1.0

    def test_visibility_and_errors(self):
        gt = KeypointSet(self.names, [[0, 0], [5, 5]], visible=[True, False], scale=1.0)
        pred = KeypointSet(self.names, [[1, 1], [100, 100]])
        assert oks(pred, gt) == 1.0
        none = KeypointSet(self.names, [[0, 0], [0, 0]], visible=[False, False], scale=1.0)
        with pytest.raises(EvalError):
            oks(pred, none)
        with pytest.raises(ValueError):
            oks(KeypointSet(("x", "y"), [[0, 0], [1, 1]]), gt)

    def test_scales(self):
        kp = KeypointSet(("a", "b"), [[0, 0], [4, 9]])
        assert kp.bbox_scale() == 6.0
        m = np.zeros((10, 10), bool)
        m[2:6, 1:10] = True
        assert mask_scale(m) == 6.0
        with pytest.raises(ValueError):
            mask_scale(np.zeros((3, 3)))


class TestIou:
    def test_values(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[:2] = True
        b[1:3] = True
        assert silhouette_iou(a, b) == pytest.approx(1 / 3)
        assert silhouette_iou(a, a) == 1.0
        assert silhouette_iou(a, ~a) == 0.0
        assert silhouette_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


class TestMisalignment:
    def _frame(self):
        rng = np.random.default_rng(0)
        img = np.full((96, 96, 3), 0.9)
        mask = np.zeros((96, 96), bool)
        mask[30:70, 38:58] = True
        img[mask] = rng.random((mask.sum(), 3)) * 0.5
        return img, mask

    def test_identity_is_exact(self):
        img, mask = self._frame()
        np.testing.assert_allclose(misalign(img, np.eye(2), np.zeros(2), mask=mask), img, atol=1e-12)

    def test_integer_shift_moves_subject(self):
        img, mask = self._frame()
        out = misalign(img, np.eye(2), np.array([-5.0, 0.0]), mask=mask)
        np.testing.assert_allclose(out[35:75, 38:58], img[30:70, 38:58], atol=1e-12)
        np.testing.assert_allclose(out[30:35, 38:58], 0.9, atol=1e-12)

    def test_study_strictly_decreasing(self):
        img, mask = self._frame()
        rows = misalignment_study(img, (2, 4, 8, 12), (5, 10, 20, 30), mask=mask, seed=1)
        for kind in ("translation", "rotation"):
            vals = [r.psnr for r in rows if r.kind == kind]
            assert all(a > b for a, b in zip(vals, vals[1:]))
        table = format_study(rows)
        assert "reference_db" in table.splitlines()[0]
        assert len(table.splitlines()) == 9

    def test_reference_column_only_for_tabulated_amounts(self):
        img, mask = self._frame()
        rows = misalignment_study(img, (10, 7), (5,), mask=mask)
        assert rows[0].reference is not None and rows[1].reference is None and rows[2].reference is not None

    def test_whole_image_mode(self):
        img, _ = self._frame()
        out = misalign(img, np.eye(2), np.array([0.0, -3.0]))
        np.testing.assert_allclose(out[:, 3:], img[:, :-3], atol=1e-12)


class TestNovelViews:
    def test_crop_window(self):
        m = np.zeros((100, 80), bool)
        m[0:4, 0:4] = True
        r, c = crop_window(m, 64, m.shape)
        assert (r.start, r.stop, c.start, c.stop) == (0, 64, 0, 64)
        r, c = crop_window(m, 128, m.shape)
        assert (r.stop - r.start, c.stop - c.start) == (100, 80)

    def test_oracle_scores_perfectly(self, seq):
        rep = evaluate_novel_views(OraclePredictor(seq), seq, patch=32)
        assert rep.means["psnr"] == math.inf
        assert rep.means["oks"] == 1.0 and rep.means["iou"] == 1.0
        assert len(rep.views) == len(seq.eval)
        assert all(v == math.inf for v in training_view_psnr(OraclePredictor(seq), seq))

    def test_empty_predictor(self, seq, tmp_path):
        rep = evaluate_novel_views(EmptyPredictor(seq), seq, patch=32, keep_images=True)
        assert rep.means["iou"] == 0.0
        assert rep.means["psnr"] == pytest.approx(np.mean([v["psnr"] for v in rep.views]))
        assert len(rep.images) == len(seq.eval)
        write_report(rep, tmp_path / "r.json")
        assert json.loads((tmp_path / "r.json").read_text())["means"]["iou"] == 0.0

    def test_missing_split(self, seq):
        from dataclasses import replace
        with pytest.raises(EvalError):
            evaluate_novel_views(OraclePredictor(seq), replace(seq, eval=None))
