import numpy as np
import numpy.testing as npt
import pytest
from skimage.metrics import structural_similarity as skimage_ssim

from nfcl import metrics
from nfcl.metrics import MetricsRow
from nfcl.errors import ContractError, ShapeError


class TestPsnr:
    def test_identity_hits_cap(self):
        a = np.random.default_rng(0).random((8, 8, 4))
        assert metrics.psnr(a, a) == 100.0

    def test_known_mse(self):
        ref = np.zeros((10, 10))
        pred = ref + 0.1  # MSE = 0.01
        npt.assert_allclose(metrics.psnr(pred, ref), 20.0, rtol=1e-9)

    def test_unit_mse_is_zero_db(self):
        ref = np.zeros((10, 10))
        npt.assert_allclose(metrics.psnr(ref + 1.0, ref), 0.0, atol=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((6, 6, 3)), rng.random((6, 6, 3))
        assert metrics.psnr(a, b) == metrics.psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            metrics.psnr(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_monotone_in_noise_amplitude(self):
        rng = np.random.default_rng(2)
        ref = rng.random((16, 16, 4))
        noise = rng.normal(size=ref.shape)
        values = [metrics.psnr(ref + amp * noise, ref) for amp in (0.01, 0.05, 0.25)]
        assert values[0] > values[1] > values[2]


class TestSsim:
    def test_identity_is_exactly_one(self):
        a = np.random.default_rng(3).random((12, 12, 3))
        assert metrics.ssim(a, a) == 1.0

    def test_identical_constants(self):
        a = np.full((8, 8, 2), 0.5)
        assert metrics.ssim(a, a.copy()) == 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((10, 10, 2)), rng.random((10, 10, 2))
        assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a), abs=1e-12)

    def test_matches_reference_implementation(self):
        # cross-implementation oracle on 20 random slice pairs
        rng = np.random.default_rng(5)
        for _ in range(20):
            a = rng.random((16, 16))
            b = np.clip(a + rng.normal(scale=rng.uniform(0.01, 0.3), size=a.shape), 0, 1)
            ours = metrics.ssim(a, b)
            theirs = skimage_ssim(
                a, b, win_size=7, data_range=1.0, gaussian_weights=False
            )
            assert ours == pytest.approx(theirs, abs=1e-4)

    def test_volume_matches_reference_slicewise_mean(self):
        rng = np.random.default_rng(6)
        a = rng.random((12, 12, 5))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
        theirs = np.mean(
            [
                skimage_ssim(a[:, :, k], b[:, :, k], win_size=7, data_range=1.0,
                             gaussian_weights=False)
                for k in range(5)
            ]
        )
        assert metrics.ssim(a, b) == pytest.approx(theirs, abs=1e-4)

    def test_too_small_slice_rejected(self):
        with pytest.raises(ContractError):
            metrics.ssim(np.zeros((5, 12, 2)), np.zeros((5, 12, 2)))


class TestDice:
    def test_identity_with_class_present(self):
        labels = np.zeros((6, 6, 2), dtype=np.uint8)
        labels[2:4, 2:4, :] = 1
        assert metrics.dice(labels, labels, 1) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0, 0] = 1
        b[3, 3] = 1
        assert metrics.dice(a, b, 1) == 0.0

    def test_partial_overlap(self):
        a = np.zeros(8, dtype=np.uint8)
        b = np.zeros(8, dtype=np.uint8)
        a[0:2] = 1  # |P| = 2
        b[1] = 1    # |G| = 1, overlap 1
        assert metrics.dice(a, b, 1) == pytest.approx(2.0 / 3.0)

    def test_both_empty_defined_as_one(self):
        a = np.zeros((3, 3), dtype=np.uint8)
        assert metrics.dice(a, a, 2) == 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(7)
        a = rng.integers(0, 4, size=(6, 6, 3))
        b = rng.integers(0, 4, size=(6, 6, 3))
        for c in (0, 1, 2, 3):
            assert metrics.dice(a, b, c) == metrics.dice(b, a, c)

    def test_argmax_ties_break_low(self):
        probs = np.array([[0.4, 0.4, 0.2], [0.1, 0.45, 0.45]])
        npt.assert_array_equal(metrics.labels_from_probs(probs), [0, 1])


class TestAggregate:
    def row(self, case, psnr=10.0, target="frame1", task=1):
        return MetricsRow(case, "siren", "baseline", task, target, psnr=psnr, ssim=0.5)

    def test_single_row_is_itself(self):
        out = metrics.aggregate([self.row("case000")])
        assert len(out) == 1
        assert out[0].psnr == 10.0
        assert out[0].model == "siren"

    def test_mean_of_two(self):
        out = metrics.aggregate([self.row("case000", 10.0), self.row("case001", 20.0)])
        assert len(out) == 1
        assert out[0].psnr == 15.0

    def test_grouping_keys_preserved(self):
        rows = [self.row("case000", target="frame1"), self.row("case000", target="frame2")]
        out = metrics.aggregate(rows)
        assert {r.eval_target for r in out} == {"frame1", "frame2"}
        assert all(r.strategy == "baseline" for r in out)

    def test_dice_averaged_per_class(self):
        rows = [
            MetricsRow("c0", "siren", "baseline", 2, "mask", dice=[1.0, 0.5, 0.0]),
            MetricsRow("c1", "siren", "baseline", 2, "mask", dice=[0.0, 0.5, 1.0]),
        ]
        out = metrics.aggregate(rows)
        npt.assert_allclose(out[0].dice, [0.5, 0.5, 0.5])

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            metrics.aggregate([])


class TestCsv:
    def test_round_trip(self, tmp_path):
        rows = [
            MetricsRow("case000", "diner", "distillation", 4, "frame1", psnr=31.25, ssim=0.93),
            MetricsRow("case000", "diner", "distillation", 2, "mask", dice=[0.9, 0.8, 0.7]),
        ]
        path = tmp_path / "metrics.csv"
        metrics.write_metrics_csv(rows, path)
        header = path.read_text().splitlines()[0]
        assert header == ",".join(metrics.CSV_COLUMNS)
        loaded = metrics.read_metrics_csv(path)
        assert loaded[0].psnr == pytest.approx(31.25)
        assert loaded[0].dice is None
        assert loaded[1].dice == pytest.approx([0.9, 0.8, 0.7])
        assert loaded[1].psnr is None
