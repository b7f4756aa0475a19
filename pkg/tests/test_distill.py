import numpy as np
import pytest
import torch
from scipy import signal

from srkd.distill import (
    DistillationPlan,
    FeatureBank,
    StudentConfig,
    StudentUNet,
    build_plan,
    degrade_image,
    degrade_target,
    feature_alignment_loss,
    init_student_training,
    standardize_map,
    student_denoise,
    student_infer,
    student_train_step,
)
from srkd.errors import ConfigurationError
from srkd.phantom import FieldStrength
from srkd.schedule import build_schedule, make_plan
from srkd.volume import Axis, Slice, Volume

TINY_STUDENT = StudentConfig(inner_ch=8, ch_mult=(1, 2), attn_spatial=(), heads=4,
                             input_spatial=16, T=50)


class TestBuildPlan:
    def test_n20_reproduces_published_allocation(self):
        plan = build_plan(20)
        assert list(plan.stage_map[(FieldStrength.F1_5, FieldStrength.F3)]) == [1, 2, 3, 4]
        assert list(plan.stage_map[(FieldStrength.F3, FieldStrength.F7)]) == list(range(5, 21))

    def test_n20_ratio_endpoints(self):
        plan = build_plan(20)
        assert plan.ratio(1) == pytest.approx(0.95)
        assert plan.ratio(20) == 0.0

    def test_smallest_plan(self):
        plan = build_plan(2)
        assert plan.ratios == (0.5, 0.0)
        assert list(plan.stage_map[(FieldStrength.F1_5, FieldStrength.F3)]) == [1]
        assert list(plan.stage_map[(FieldStrength.F3, FieldStrength.F7)]) == [2]

    def test_n1_rejected(self):
        with pytest.raises(ConfigurationError):
            build_plan(1)

    def test_ratios_strictly_decreasing(self):
        plan = build_plan(13)
        assert all(a > b for a, b in zip(plan.ratios, plan.ratios[1:]))

    def test_serialization_round_trip(self):
        plan = build_plan(20, k=2.5)
        again = DistillationPlan.from_dict(plan.to_dict())
        assert again.N == plan.N and again.k == plan.k
        assert again.ratios == plan.ratios
        assert again.stages_for(FieldStrength.F1_5, FieldStrength.F7) == list(range(1, 21))


class TestDegradeTarget:
    def test_final_stage_is_identity(self):
        plan = build_plan(20)
        rng = np.random.default_rng(0)
        s = Slice(data=rng.random((32, 32)), axis=Axis.AXIAL, depth=0)
        out = degrade_target(s, plan, 20)
        np.testing.assert_array_equal(out.data, s.data)
        assert out.axis is s.axis and out.depth == s.depth

    def test_constant_slice_unchanged_any_stage(self):
        plan = build_plan(10)
        s = np.full((24, 24), 0.4)
        for n in (1, 4, 10):
            np.testing.assert_allclose(degrade_image(s, plan, n), 0.4, atol=1e-12)

    def test_impulse_matches_dense_convolution_oracle(self):
        plan = build_plan(2, k=2.0)  # stage 1: r=0.5 -> sigma=1.0
        assert plan.sigma(1) == pytest.approx(1.0)
        img = np.zeros((21, 21))
        img[10, 10] = 1.0
        out = degrade_image(img, plan, 1)
        radius = int(4.0 * 1.0 + 0.5)
        x = np.arange(-radius, radius + 1, dtype=np.float64)
        k1 = np.exp(-0.5 * x * x)
        k1 /= k1.sum()
        kernel = np.outer(k1, k1)
        oracle = signal.convolve2d(img, kernel, mode="same")
        np.testing.assert_allclose(out, oracle, atol=1e-6)

    def test_sigma_ordering_exact(self):
        plan = build_plan(20, k=2.0)
        sigmas = [plan.sigma(n) for n in range(1, 21)]
        assert all(a > b for a, b in zip(sigmas, sigmas[1:]))

    def test_pyramid_spectral_monotonicity(self):
        plan = build_plan(20, k=2.0)
        rng = np.random.default_rng(5)
        o7t = rng.random((48, 48))

        def hf(img):
            spec = np.abs(np.fft.fft2(img)) ** 2
            fr = np.fft.fftfreq(img.shape[0])[:, None]
            fc = np.fft.fftfreq(img.shape[1])[None, :]
            return float(spec[np.sqrt(fr**2 + fc**2) > 0.25].sum())

        energies = [hf(degrade_image(o7t, plan, n)) for n in range(1, 21)]
        assert all(b >= a for a, b in zip(energies, energies[1:]))


class TestStudentNet:
    def test_zero_init_and_shape(self):
        torch.manual_seed(0)
        model = StudentUNet(StudentConfig())
        img = torch.rand(2, 1, 64, 64)
        cond = torch.rand(2, 1, 64, 64)
        out = student_denoise(model, img, 7, cond)
        assert tuple(out.shape) == (2, 1, 64, 64)
        assert torch.all(out == 0.0)

    def test_deterministic(self):
        torch.manual_seed(1)
        model = StudentUNet(TINY_STUDENT)
        img = torch.rand(1, 1, 16, 16, generator=torch.Generator().manual_seed(3))
        cond = torch.rand(1, 1, 16, 16, generator=torch.Generator().manual_seed(4))
        assert torch.equal(student_denoise(model, img, 2, cond),
                           student_denoise(model, img, 2, cond))

    def test_standalone_parameter_tree(self):
        torch.manual_seed(2)
        model = StudentUNet(TINY_STUDENT)
        names = [n for n, _ in model.named_parameters()]
        for marker in ("bias_proj", "warp_proj", "guidance", "cond_enc", "ae."):
            assert not any(marker in n for n in names)

    def test_in_ch_contract(self):
        with pytest.raises(ConfigurationError):
            StudentConfig(in_ch=3, out_ch=1)


class TestFeatureAlignmentLoss:
    def test_perfect_alignment_is_zero(self):
        x = torch.randn(2, 1, 16, 16)
        bank = x.repeat(1, 5, 1, 1)
        loss = feature_alignment_loss(x, bank, torch.ones(2))
        assert float(loss) == 0.0

    def test_single_stage_single_map_constant_difference(self):
        # N=1, K=1, r=1: constant difference c at every pixel -> c^2 (mean convention).
        c = 0.37
        x = torch.zeros(1, 1, 8, 8)
        bank = torch.full((1, 1, 8, 8), c)
        loss = feature_alignment_loss(x, bank, torch.ones(1))
        assert float(loss) == pytest.approx(c * c, rel=1e-6)

    def test_zero_ratio_contributes_nothing(self):
        x = torch.zeros(1, 1, 8, 8)
        bank = torch.full((1, 1, 8, 8), 5.0)
        loss = feature_alignment_loss(x, bank, torch.zeros(1))
        assert float(loss) == 0.0

    def test_scales_linearly_in_lambda(self):
        x = torch.zeros(1, 1, 8, 8)
        bank = torch.full((1, 1, 8, 8), 2.0)
        base = feature_alignment_loss(x, bank, torch.ones(1))
        assert float(0.3 * base) == pytest.approx(0.3 * float(base))


def _fake_bank(rng, K=4, res=16):
    entries = [(K - i, standardize_map(rng.random((res, res)))) for i in range(K)]
    return FeatureBank(entries=entries)


class TestStudentTraining:
    def test_smoke_loss_decreases(self):
        sched = build_schedule(TINY_STUDENT.T, 1e-4, 0.05)
        plan = build_plan(4, k=1.5)
        state = init_student_training(TINY_STUDENT, sched, plan, lr=2e-3, seed=0)
        rng = np.random.default_rng(1)
        o7t = rng.random((6, 16, 16)).astype(np.float32)
        lr_cond = np.clip(o7t + 0.05 * rng.standard_normal(o7t.shape), 0, 1).astype(np.float32)
        banks = {f"s{i}": _fake_bank(rng) for i in range(6)}
        ids = [f"s{i}" for i in range(6)]
        history = [
            student_train_step(state, o7t, lr_cond, banks, ids) for _ in range(200)
        ]
        first = np.mean([h["total"] for h in history[:20]])
        last = np.mean([h["total"] for h in history[-20:]])
        assert last < first
        assert all(np.isfinite(h["total"]) for h in history)

    def test_missing_bank_names_sample(self):
        sched = build_schedule(TINY_STUDENT.T, 1e-4, 0.05)
        plan = build_plan(4)
        state = init_student_training(TINY_STUDENT, sched, plan, seed=0)
        o7t = np.zeros((2, 16, 16), dtype=np.float32)
        with pytest.raises(ConfigurationError, match="s0007"):
            student_train_step(state, o7t, o7t, {"s0001": None}, ["s0001", "s0007"])


class TestStudentInfer:
    def _mock_fn(self, calls):
        def fn(z, t, cond):
            calls.append(int(z.shape[0]))
            return torch.zeros_like(z)

        return fn

    @pytest.mark.parametrize(
        "pair,expected",
        [
            ((FieldStrength.F1_5, FieldStrength.F3), 4),
            ((FieldStrength.F3, FieldStrength.F7), 16),
            ((FieldStrength.F1_5, FieldStrength.F7), 20),
        ],
    )
    def test_stage_iteration_counts(self, pair, expected):
        plan = build_plan(20)
        sched = build_schedule(10, 1e-3, 0.02)
        ddim = make_plan(10, 2)
        vol = Volume(data=np.random.default_rng(0).random((16, 16, 16)).astype(np.float32))
        stages = []
        out = student_infer(
            self._mock_fn([]),
            vol,
            pair[0],
            pair[1],
            plan,
            sched,
            ddim,
            seed=0,
            stage_hook=lambda n, v: stages.append(n),
        )
        assert len(stages) == expected
        assert out.shape == vol.shape

    def test_combined_range_equals_concatenation(self):
        plan = build_plan(20)
        combined = plan.stages_for(FieldStrength.F1_5, FieldStrength.F7)
        coarse = plan.stages_for(FieldStrength.F1_5, FieldStrength.F3)
        fine = plan.stages_for(FieldStrength.F3, FieldStrength.F7)
        assert combined == coarse + fine

    def test_unknown_pair_rejected(self):
        plan = build_plan(20)
        sched = build_schedule(10, 1e-3, 0.02)
        vol = Volume(data=np.zeros((16, 16, 16), dtype=np.float32))
        with pytest.raises(ConfigurationError):
            student_infer(
                self._mock_fn([]), vol, FieldStrength.F7, FieldStrength.F1_5,
                plan, sched, make_plan(10, 2), seed=0,
            )

    def test_deterministic_with_real_model(self):
        torch.manual_seed(5)
        model = StudentUNet(TINY_STUDENT)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(torch.randn_like(p) * 0.01)
        plan = build_plan(4)
        sched = build_schedule(TINY_STUDENT.T, 1e-4, 0.02)
        ddim = make_plan(sched.T, 2)
        vol = Volume(data=np.random.default_rng(3).random((16, 16, 16)).astype(np.float32))
        a = student_infer(model, vol, FieldStrength.F1_5, FieldStrength.F3, plan, sched, ddim, seed=9)
        b = student_infer(model, vol, FieldStrength.F1_5, FieldStrength.F3, plan, sched, ddim, seed=9)
        assert a.data.tobytes() == b.data.tobytes()
