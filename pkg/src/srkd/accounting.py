"""Parameter and FLOP accounting by layer enumeration.

Models are instantiated on the meta device (shapes only, no storage), so
billion-parameter configurations cost nothing to count.  FLOPs are measured
as multiply-accumulates x 2 over one forward pass at the configured
reference input size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch.utils.flop_counter import FlopCounterMode

from .autoencoder import AEConfig, KLAutoencoder
from .distill import StudentConfig, StudentUNet
from .teacher import CondEncoderConfig, GuidedUNet, TeacherConfig, build_cond_encoder


@dataclass
class ModelAccount:
    params: int
    flops: int
    parts: dict = field(default_factory=dict)

    @property
    def params_m(self) -> float:
        return self.params / 1e6

    @property
    def gflops(self) -> float:
        return self.flops / 1e9


def _param_count(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _forward_flops(fn) -> int:
    with FlopCounterMode(display=False) as counter:
        fn()
    return counter.get_total_flops()


def count_teacher(
    cfg: TeacherConfig, cond_cfg: CondEncoderConfig, ae_cfg: AEConfig
) -> ModelAccount:
    """Teacher inference stack: denoiser U-Net, condition encoder, latent codec.

    FLOPs cover one slice step: a denoiser evaluation plus one condition
    encode and one latent decode at the configured sizes.
    """
    with torch.device("meta"):
        unet = GuidedUNet(cfg)
        cond = build_cond_encoder(cond_cfg)
        ae = KLAutoencoder(ae_cfg)
        parts = {
            "unet": _param_count(unet),
            "cond_encoder": _param_count(cond),
            "autoencoder": _param_count(ae),
        }
        sp = cfg.input_spatial
        z = torch.randn(1, cfg.out_ch, sp, sp)
        t = torch.zeros(1, dtype=torch.long)
        feat = torch.randn(1, cfg.out_ch, sp, sp)
        ctx = torch.randn(1, 1, cfg.context_dim)
        bias = torch.ones(1, 1, ae_cfg.in_res, ae_cfg.in_res)
        warp = torch.zeros(1, 2, ae_cfg.in_res, ae_cfg.in_res)
        flops = _forward_flops(lambda: unet(z, t, feat, ctx, bias, warp))
        flops += _forward_flops(lambda: cond(torch.randn(1, cond_cfg.in_ch, cond_cfg.in_res, cond_cfg.in_res)))
        flops += _forward_flops(lambda: ae.decode(torch.randn(1, *ae_cfg.latent_shape)))
    return ModelAccount(params=sum(parts.values()), flops=flops, parts=parts)


def count_student(cfg: StudentConfig) -> ModelAccount:
    with torch.device("meta"):
        model = StudentUNet(cfg)
        params = _param_count(model)
        sp = cfg.input_spatial
        img = torch.randn(1, cfg.out_ch, sp, sp)
        cond = torch.randn(1, cfg.out_ch, sp, sp)
        t = torch.zeros(1, dtype=torch.long)
        flops = _forward_flops(lambda: model(img, t, cond))
    return ModelAccount(params=params, flops=flops, parts={"student": params})


def count_params_and_flops(
    teacher_cfg: TeacherConfig,
    cond_cfg: CondEncoderConfig,
    ae_cfg: AEConfig,
    student_cfg: StudentConfig,
) -> dict:
    """Joint accounting for the CLI: params, FLOPs, and the student/teacher ratio."""
    teacher = count_teacher(teacher_cfg, cond_cfg, ae_cfg)
    student = count_student(student_cfg)
    return {
        "teacher_params_m": round(teacher.params_m, 2),
        "teacher_gflops": round(teacher.gflops, 2),
        "teacher_parts_m": {k: round(v / 1e6, 2) for k, v in teacher.parts.items()},
        "student_params_m": round(student.params_m, 2),
        "student_gflops": round(student.gflops, 2),
        "param_ratio": round(student.params / teacher.params, 4),
    }
