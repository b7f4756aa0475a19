import csv

import numpy as np
import pytest

from srkd.errors import ConfigurationError, ShapeError, StructuralError
from srkd.metrics import PSNR_CAP_DB, evaluate_run, psnr, ssim
from srkd.volume import Volume


class TestPsnr:
    def test_identical_inputs_hit_cap_with_flag(self):
        a = np.random.default_rng(0).random((16, 16))
        r = psnr(a, a.copy())
        assert r.db == PSNR_CAP_DB
        assert r.exact

    def test_mse_001_gives_20db(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)
        r = psnr(a, b)
        assert r.db == pytest.approx(20.0, abs=1e-9)
        assert not r.exact

    def test_mse_1e4_gives_40db(self):
        a = np.zeros((25, 4))
        b = np.full((25, 4), 0.01)
        r = psnr(a, b)
        assert r.db == pytest.approx(40.0, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_monotone_in_noise_amplitude(self):
        rng = np.random.default_rng(1)
        a = rng.random((32, 32))
        noise = rng.standard_normal((32, 32))
        values = [psnr(a, a + amp * noise).db for amp in (0.01, 0.02, 0.05, 0.1, 0.2)]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_volume_input_uses_full_voxel_set(self):
        rng = np.random.default_rng(2)
        data = rng.random((8, 8, 8)).astype(np.float32)
        v = Volume(data=data)
        w = Volume(data=np.clip(data + 0.05, 0, 1))
        direct = psnr(v.data, w.data)
        wrapped = psnr(v, w)
        assert wrapped.db == pytest.approx(direct.db)


def _brute_force_ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, peak=1.0):
    """Independent oracle: explicit loops over every valid window position."""
    half = (window - 1) / 2.0
    x = np.arange(window) - half
    g = np.exp(-(x**2) / (2 * sigma * sigma))
    w = np.outer(g, g)
    w /= w.sum()
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    h, ww = a.shape
    vals = []
    for i in range(h - window + 1):
        for j in range(ww - window + 1):
            pa = a[i : i + window, j : j + window]
            pb = b[i : i + window, j : j + window]
            mu_a = (w * pa).sum()
            mu_b = (w * pb).sum()
            var_a = (w * pa * pa).sum() - mu_a**2
            var_b = (w * pb * pb).sum() - mu_b**2
            cov = (w * pa * pb).sum() - mu_a * mu_b
            vals.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
            )
    return float(np.mean(vals))


class TestSsim:
    def test_identity_is_one(self):
        a = np.random.default_rng(3).random((32, 32))
        assert ssim(a, a.copy()) == pytest.approx(1.0, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((24, 24)), rng.random((24, 24))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-14)

    def test_matches_brute_force_window_oracle(self):
        rng = np.random.default_rng(5)
        a = np.full((20, 20), 0.5)
        b = 0.5 + rng.uniform(-0.1, 0.1, size=(20, 20))
        assert ssim(a, b) == pytest.approx(_brute_force_ssim(a, b), abs=1e-10)

    def test_matches_oracle_on_random_pair(self):
        rng = np.random.default_rng(6)
        a = rng.random((16, 18))
        b = rng.random((16, 18))
        assert ssim(a, b) == pytest.approx(_brute_force_ssim(a, b), abs=1e-10)

    def test_constant_shift_invariance(self):
        rng = np.random.default_rng(7)
        a = rng.uniform(0.2, 0.6, size=(32, 32))
        b = np.clip(a + 0.03 * rng.standard_normal((32, 32)), 0, 1)
        assert ssim(a + 0.2, b + 0.2) == pytest.approx(ssim(a, b), abs=1e-3)

    def test_too_small_input_rejected(self):
        with pytest.raises(ConfigurationError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_volume_mean_over_axial_slices(self):
        rng = np.random.default_rng(8)
        a = rng.random((16, 16, 3))
        b = rng.random((16, 16, 3))
        per_slice = [ssim(a[:, :, d], b[:, :, d]) for d in range(3)]
        assert ssim(a, b) == pytest.approx(float(np.mean(per_slice)))


class TestEvaluateRun:
    def _volumes(self, n, seed=0, shape=(16, 16, 16)):
        rng = np.random.default_rng(seed)
        return {
            f"s{i:04d}": Volume(data=rng.random(shape).astype(np.float32))
            for i in range(n)
        }

    def test_identical_predictions(self):
        refs = self._volumes(3)
        meta = {k: ("test", "t1") for k in refs}
        report = evaluate_run(refs, refs, meta)
        assert all(r.psnr_db == PSNR_CAP_DB and r.psnr_exact for r in report.rows)
        assert all(r.ssim == pytest.approx(1.0, abs=1e-9) for r in report.rows)

    def test_single_sample_median_equals_mean(self):
        refs = self._volumes(1)
        preds = {k: Volume(data=np.clip(v.data + 0.01, 0, 1)) for k, v in refs.items()}
        meta = {k: ("val", "t2") for k in refs}
        report = evaluate_run(preds, refs, meta)
        agg = report.aggregates[("val", "t2")]["psnr"]
        assert agg["median"] == agg["mean"] == pytest.approx(report.rows[0].psnr_db)

    def test_two_sample_quartiles_match_hand_computation(self):
        refs = self._volumes(2, seed=9)
        preds = {}
        for i, (k, v) in enumerate(sorted(refs.items())):
            preds[k] = Volume(data=np.clip(v.data + 0.01 * (i + 1), 0, 1))
        meta = {k: ("test", "t1") for k in refs}
        report = evaluate_run(preds, refs, meta)
        vals = sorted(r.psnr_db for r in report.rows)
        agg = report.aggregates[("test", "t1")]["psnr"]
        # Linear-interpolation order statistics on two points.
        assert agg["median"] == pytest.approx((vals[0] + vals[1]) / 2)
        assert agg["q1"] == pytest.approx(vals[0] + 0.25 * (vals[1] - vals[0]))
        assert agg["q3"] == pytest.approx(vals[0] + 0.75 * (vals[1] - vals[0]))

    def test_id_mismatch_rejected(self):
        refs = self._volumes(2)
        preds = dict(list(refs.items())[:1])
        with pytest.raises(StructuralError, match="s0001"):
            evaluate_run(preds, refs, {k: ("test", "t1") for k in refs})

    def test_csv_emission(self, tmp_path):
        refs = self._volumes(2)
        meta = {k: ("test", "t1") for k in refs}
        report = evaluate_run(refs, refs, meta)
        path = tmp_path / "report.csv"
        report.to_csv(path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["sample_id", "split", "contrast", "psnr_db", "psnr_exact", "ssim"]
        assert len(rows) == 3
        assert rows[1][0] == "s0000"
        assert rows[1][4] == "1"
