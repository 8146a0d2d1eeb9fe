import numpy as np
import pytest

from taskrec.report import (MetricsRow, accuracy, emit_image_grid,
                            emit_plots, emit_table, pixel_accuracy,
                            read_table)
from taskrec.tensor import Tensor


class TestAccuracy:
    def test_perfect_predictions(self):
        labels = np.array([3, 1, 4])
        preds = np.zeros((3, 10))
        preds[np.arange(3), labels] = 1.0
        assert accuracy(preds, labels) == 1.0

    def test_uniform_predictions_tiebreak_lowest_index(self):
        # argmax of a uniform row is class 0, so accuracy equals the
        # fraction of zeros among the labels
        labels = np.array([0, 0, 1, 2, 0, 9])
        preds = np.full((6, 10), 0.1)
        assert accuracy(preds, labels) == pytest.approx(3 / 6)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            accuracy(np.zeros((0, 10)), np.zeros(0, np.int64))

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(0)
        preds = rng.random((50, 10))
        labels = rng.integers(0, 10, 50)
        want = sum(int(np.argmax(p) == z) for p, z in zip(preds, labels)) / 50
        assert accuracy(Tensor(preds, np.float64), labels) == want


class TestPixelAccuracy:
    def test_exact_and_inverted(self):
        rng = np.random.default_rng(1)
        mask = (rng.random((16, 16)) < 0.5).astype(np.float64)
        assert pixel_accuracy(mask, mask) == 1.0
        assert pixel_accuracy(1.0 - mask, mask) == 0.0

    def test_half_everywhere_counts_as_foreground(self):
        mask = (np.random.default_rng(2).random((10, 10)) < 0.3) \
            .astype(np.float64)
        pred = np.full((10, 10), 0.5)
        assert pixel_accuracy(pred, mask) == pytest.approx(mask.mean())

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            pixel_accuracy(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(3)
        pred = rng.random((12, 12))
        mask = (rng.random((12, 12)) < 0.5).astype(np.float64)
        want = np.mean([(1 if (p >= 0.5) == (m >= 0.5) else 0)
                        for p, m in zip(pred.ravel(), mask.ravel())])
        assert pixel_accuracy(pred, mask) == want


class TestMetricsTable:
    def rows(self):
        return [MetricsRow("joint", 0.5, 0.97, 0.0117281, 0.100123,
                           10000, 3, 123.45),
                MetricsRow("sequential", 0.0, 0.9601, 0.0115, 0.124, 8000,
                           3, 99.9)]

    def test_empty_rows_header_only(self, tmp_path):
        path = emit_table([], tmp_path / "t.csv")
        text = path.read_text().strip().splitlines()
        assert len(text) == 1
        assert text[0].startswith("regime,C,accuracy_or_pixacc")

    def test_roundtrip(self, tmp_path):
        path = emit_table(self.rows(), tmp_path / "t.csv")
        back = read_table(path)
        for a, b in zip(self.rows(), back):
            assert a.regime == b.regime
            assert a.C == b.C
            np.testing.assert_allclose(b.accuracy_or_pixacc,
                                       a.accuracy_or_pixacc, rtol=1e-5)
            np.testing.assert_allclose(b.l2_loss, a.l2_loss, rtol=1e-5)

    def test_six_rows_for_six_C_values(self, tmp_path):
        rows = [MetricsRow("joint", c, 0.5, 1.0, 1.0)
                for c in (0.01, 0.1, 0.5, 0.9, 0.99, 0.999)]
        path = emit_table(rows, tmp_path / "t.csv")
        assert len(path.read_text().strip().splitlines()) == 7

    def test_six_significant_digits(self, tmp_path):
        path = emit_table(self.rows(), tmp_path / "t.csv")
        assert "0.0117281" in path.read_text()

    def test_validation(self):
        with pytest.raises(ValueError, match="fraction"):
            MetricsRow("joint", 0.5, 1.5, 0.0, 0.0)
        with pytest.raises(ValueError, match="l2_loss"):
            MetricsRow("joint", 0.5, 0.5, -1.0, 0.0)

    def test_unwritable_path_rejected(self, tmp_path):
        target = tmp_path / "dir_as_file"
        target.mkdir()
        with pytest.raises(OSError, match="cannot write"):
            emit_table(self.rows(), target)


class TestPlots:
    def sweep_rows(self):
        return [{"C": c, "d_x": 0.01 * (1 + c), "d_d": 0.2 / (0.01 + c)}
                for c in (0.01, 0.1, 0.5, 0.9, 0.999)]

    def test_single_point_curve_valid_file(self, tmp_path):
        paths = emit_plots([{"C": 0.5, "d_x": 1.0, "d_d": 2.0}], tmp_path)
        for p in paths:
            assert p.exists()
            assert p.read_text().lstrip().startswith("<?xml")

    def test_deterministic_bytes(self, tmp_path):
        a = emit_plots(self.sweep_rows(), tmp_path / "a")
        b = emit_plots(self.sweep_rows(), tmp_path / "b")
        for pa, pb in zip(a, b):
            assert pa.read_bytes() == pb.read_bytes()

    def test_log_axes_variant_differs(self, tmp_path):
        lin = emit_plots(self.sweep_rows(), tmp_path / "lin",
                         log_axes=False)
        log = emit_plots(self.sweep_rows(), tmp_path / "log", log_axes=True)
        assert lin[0].read_bytes() != log[0].read_bytes()

    def test_image_grid(self, tmp_path):
        rng = np.random.default_rng(4)
        imgs = rng.random((5, 16, 16))
        path = emit_image_grid(imgs, [f"C={c}" for c in range(5)],
                               tmp_path / "grid.svg")
        assert path.exists() and path.stat().st_size > 0
