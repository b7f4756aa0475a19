import json

import numpy as np
import pytest
from scipy import ndimage, signal

from srkd.errors import ConfigurationError
from srkd.metrics import psnr
from srkd.phantom import (
    DATASET_BIAS_AMP,
    FieldStrength,
    GuidancePair,
    PhantomSpec,
    PhantomDataset,
    build_dataset,
    degrade_to_field,
    gaussian_blur,
    generate_phantom,
    load_guidance,
    resolution_sigma,
    save_guidance,
    synth_guidance,
)
from srkd.volume import Axis, Volume


def _scipy_style_kernel1d(sigma, truncate=4.0):
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * x * x / (sigma * sigma))
    return k / k.sum()


class TestGeneratePhantom:
    def test_deterministic_in_seed(self):
        spec = PhantomSpec(shape=(24, 24, 24), seed=1)
        a = generate_phantom(spec)
        b = generate_phantom(spec)
        assert a.data.tobytes() == b.data.tobytes()

    def test_range_and_spacing(self):
        v = generate_phantom(PhantomSpec(shape=(16, 20, 24), seed=5))
        assert v.data.min() >= 0.0 and v.data.max() <= 1.0
        assert v.spacing == (0.7, 0.7, 0.7)

    def test_single_blob_single_component(self):
        spec = PhantomSpec(shape=(32, 32, 32), seed=3, n_ellipsoids=1, edge_sharpness=20.0)
        v = generate_phantom(spec)
        _, n = ndimage.label(v.data > 0.5)
        assert n == 1

    def test_component_count_matches_n_ellipsoids(self):
        for seed in (0, 1, 2):
            spec = PhantomSpec(shape=(48, 48, 48), seed=seed, n_ellipsoids=3, edge_sharpness=16.0)
            v = generate_phantom(spec)
            _, n = ndimage.label(v.data > 0.5)
            assert n == 3

    def test_contrast_flip_inverts_ordering(self):
        t1 = generate_phantom(PhantomSpec(shape=(32, 32, 32), seed=9, contrast_mode="t1"))
        t2 = generate_phantom(PhantomSpec(shape=(32, 32, 32), seed=9, contrast_mode="t2"))
        blob_mask = t1.data > 0.5
        assert blob_mask.any()
        np.testing.assert_allclose(t2.data, 1.0 - t1.data, atol=1e-6)
        assert t1.data[blob_mask].mean() > t1.data[~blob_mask].mean()
        assert t2.data[blob_mask].mean() < t2.data[~blob_mask].mean()

    def test_too_small_shape_rejected(self):
        with pytest.raises(ConfigurationError):
            PhantomSpec(shape=(7, 16, 16), seed=0)


def _hf_energy(data, cutoff=0.25):
    spec = np.abs(np.fft.fftn(np.asarray(data, dtype=np.float64))) ** 2
    freqs = [np.fft.fftfreq(s) for s in data.shape]
    grids = np.meshgrid(*freqs, indexing="ij")
    radial = np.sqrt(sum(g**2 for g in grids))
    return float(spec[radial > cutoff].sum())


class TestDegradeToField:
    def test_same_field_is_identity(self):
        v = generate_phantom(PhantomSpec(shape=(16, 16, 16), seed=2))
        out = degrade_to_field(v, FieldStrength.F7)
        np.testing.assert_array_equal(out.data, v.data)
        assert out.data is not v.data

    def test_constant_volume_unchanged(self):
        v = Volume(data=np.full((16, 16, 16), 0.37, dtype=np.float32))
        out = degrade_to_field(v, FieldStrength.F1_5)
        np.testing.assert_allclose(out.data, 0.37, atol=1e-6)

    def test_finer_target_rejected(self):
        v = Volume(data=np.zeros((8, 8, 8), dtype=np.float32))
        with pytest.raises(ConfigurationError):
            degrade_to_field(v, FieldStrength.F7, from_=FieldStrength.F3)

    def test_impulse_matches_dense_convolution_oracle(self):
        sigma = resolution_sigma(FieldStrength.F1_5)
        assert sigma == pytest.approx(1.4 * (2.0 / 0.7 - 1.0))
        data = np.zeros((33, 33, 33), dtype=np.float64)
        data[16, 16, 16] = 1.0
        out = degrade_to_field(Volume(data=data), FieldStrength.F1_5)
        k1 = _scipy_style_kernel1d(sigma)
        kernel3 = k1[:, None, None] * k1[None, :, None] * k1[None, None, :]
        oracle = signal.convolve(data, kernel3, mode="same", method="direct")
        np.testing.assert_allclose(out.data, oracle, atol=1e-6)

    def test_strictly_reduces_high_frequency_energy(self):
        rng = np.random.default_rng(21)
        v = Volume(data=rng.random((24, 24, 24)))
        for fs in (FieldStrength.F3, FieldStrength.F1_5):
            out = degrade_to_field(v, fs)
            assert out.shape == v.shape
            assert _hf_energy(out.data) < _hf_energy(v.data)

    def test_variance_additivity_of_composed_blurs(self):
        # Blurring by sigma_1 then by the variance residual must match the
        # direct blur: second moments of the impulse responses within 5%.
        s1 = resolution_sigma(FieldStrength.F3)
        s_direct = resolution_sigma(FieldStrength.F1_5)
        s_resid = np.sqrt(s_direct**2 - s1**2)
        data = np.zeros((49, 49, 49))
        data[24, 24, 24] = 1.0
        two_stage = gaussian_blur(gaussian_blur(data, s1), s_resid)
        direct = gaussian_blur(data, s_direct)

        def second_moment(img):
            idx = np.arange(img.shape[0], dtype=np.float64) - 24.0
            profile = img.sum(axis=(1, 2))
            return float((profile * idx**2).sum() / profile.sum())

        assert second_moment(two_stage) == pytest.approx(second_moment(direct), rel=0.05)


def _spectral_fraction_above(field, cutoff):
    f = np.asarray(field, dtype=np.float64)
    f = f - f.mean()
    spec = np.abs(np.fft.fft2(f)) ** 2
    fr = np.fft.fftfreq(f.shape[0])[:, None]
    fc = np.fft.fftfreq(f.shape[1])[None, :]
    radial = np.sqrt(fr**2 + fc**2)
    return float(spec[radial > cutoff].sum() / spec.sum())


class TestSynthGuidance:
    def test_deterministic(self):
        a = synth_guidance((32, 32), seed=0)
        b = synth_guidance((32, 32), seed=0)
        assert a.bias.tobytes() == b.bias.tobytes()
        assert a.warp.tobytes() == b.warp.tobytes()

    def test_bias_mean_and_bounds(self):
        for seed in range(5):
            pair = synth_guidance((48, 40), seed=seed)
            assert abs(float(pair.bias.mean()) - 1.0) <= 1e-3
            assert pair.bias.min() >= 0.7 and pair.bias.max() <= 1.3

    def test_warp_bounds_and_zero_mean(self):
        pair = synth_guidance((40, 40), seed=11, warp_max=2.5)
        mag = np.sqrt((pair.warp.astype(np.float64) ** 2).sum(axis=0))
        assert mag.max() <= 2.5 + 1e-6
        assert abs(float(pair.warp[0].mean())) < 1e-3
        assert abs(float(pair.warp[1].mean())) < 1e-3

    def test_band_limited_by_fourier_oracle(self):
        for seed in range(4):
            pair = synth_guidance((64, 64), seed=seed)
            assert _spectral_fraction_above(pair.bias - 1.0, 0.15) < 0.01
            assert _spectral_fraction_above(pair.warp[0], 0.15) < 0.01
            assert _spectral_fraction_above(pair.warp[1], 0.15) < 0.01

    def test_validate_passes(self):
        synth_guidance((32, 48), seed=3).validate()

    def test_too_small_rejected(self):
        with pytest.raises(ConfigurationError):
            synth_guidance((4, 32), seed=0)

    def test_container_round_trip(self, tmp_path):
        pair = synth_guidance((16, 24), seed=7)
        path = tmp_path / "g.gdnc"
        save_guidance(path, pair)
        out = load_guidance(path)
        assert out.bias.tobytes() == pair.bias.astype("<f4").tobytes()
        assert out.warp.tobytes() == pair.warp.astype("<f4").tobytes()


class TestBuildDataset:
    def test_split_counts_and_determinism(self, tmp_path):
        m1 = build_dataset(tmp_path / "d1", n_samples=10, seed=77, shape=(16, 16, 16))
        m2 = build_dataset(tmp_path / "d2", n_samples=10, seed=77, shape=(16, 16, 16))
        splits = [e["split"] for e in m1["samples"]]
        assert splits.count("train") == 8
        assert splits.count("val") == 1
        assert splits.count("test") == 1
        assert json.dumps(m1, sort_keys=True) == json.dumps(m2, sort_keys=True)
        b1 = (tmp_path / "d1" / "manifest.json").read_bytes()
        b2 = (tmp_path / "d2" / "manifest.json").read_bytes()
        assert b1 == b2

    def test_bad_fracs_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError):
            build_dataset(tmp_path / "d", n_samples=4, seed=0, split_fracs=(0.5, 0.2, 0.2))

    def test_samples_load_and_degradation_nontrivial(self, tmp_path):
        build_dataset(tmp_path / "d", n_samples=4, seed=5, shape=(16, 16, 16))
        ds = PhantomDataset(tmp_path / "d")
        assert len(ds.ids()) == 4
        for sid in ds.ids():
            hr = ds.volume(sid, "hr")
            lr = ds.volume(sid, "lr")
            mid = ds.volume(sid, "mid")
            assert hr.shape == lr.shape == mid.shape == (16, 16, 16)
            assert 0.0 <= lr.data.min() and lr.data.max() <= 1.0
            assert psnr(hr, lr).db < 60.0
            for axis in Axis:
                pair = ds.guidance(sid, axis)
                assert pair.shape == (16, 16)
                pair.validate()

    def test_corruption_uses_modest_amplitudes(self):
        assert DATASET_BIAS_AMP <= 0.1
