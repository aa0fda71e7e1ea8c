"""Training losses and the per-stage loss activation table."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch

TERMS = ("vol", "eik", "hess", "surf", "pcd", "phys", "smth", "lam", "ref")
STAGES = ("sdf_init", "mat_init", "joint")

# Activation pattern per stage: "on", "off", "optional", or "down" (must not
# exceed the weight used in sdf_init).
STAGE_TABLE = {
    "sdf_init": dict(ref="off", vol="on", eik="on", hess="on", surf="on", pcd="optional",
                     phys="off", smth="off", lam="off"),
    "mat_init": dict(ref="on", vol="off", eik="off", hess="off", surf="off", pcd="off",
                     phys="on", smth="on", lam="on"),
    "joint": dict(ref="on", vol="on", eik="on", hess="down", surf="down", pcd="off",
                  phys="on", smth="on", lam="on"),
}


@dataclass
class LossWeights:
    vol: float = 0.0
    eik: float = 0.0
    hess: float = 0.0
    surf: float = 0.0
    pcd: float = 0.0
    phys: float = 0.0
    smth: float = 0.0
    lam: float = 0.0
    ref: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0.0 and math.isfinite(v)):
                raise ValueError(f"loss weight {f.name} must be a finite non-negative number, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)

    def active(self) -> list[str]:
        return [t for t in TERMS if getattr(self, t) > 0.0]


def default_stage_weights() -> dict[str, LossWeights]:
    return {
        "sdf_init": LossWeights(vol=1.0, eik=0.1, hess=5e-3, surf=1e-3, pcd=1.0),
        "mat_init": LossWeights(phys=1.0, smth=1e-3, lam=1e-4, ref=0.1),
        "joint": LossWeights(vol=1.0, eik=0.1, hess=5e-4, surf=1e-4, phys=1.0, smth=1e-3,
                             lam=1e-4, ref=0.1),
    }


def validate_stage_weights(weights: dict[str, LossWeights]):
    """Reject weight sets that break the stage activation table."""
    for stage in STAGES:
        w = weights[stage]
        for term, rule in STAGE_TABLE[stage].items():
            value = getattr(w, term)
            if rule == "off" and value != 0.0:
                raise ValueError(f"loss '{term}' is not used in stage {stage}; its weight must be 0")
            if rule == "down" and value > getattr(weights["sdf_init"], term):
                raise ValueError(f"loss '{term}' must be downscaled in stage {stage} "
                                 f"({value} > {getattr(weights['sdf_init'], term)})")


def tone_map(x):
    """LDR display transform: clip to [0, 1] then sRGB-encode."""
    from .scene.color import srgb_encode

    return srgb_encode(torch.clamp(x, 0.0, 1.0))


def l1_color(rendered, target, ldr: bool = False):
    if ldr:
        rendered, target = tone_map(rendered), tone_map(target)
    return (rendered - target).abs().mean(-1)


def loss_vol(rendered, target, ldr: bool = False, radiance_scale: float = 1.0):
    """Volume-rendered color error, divided by the radiance output scale."""
    return l1_color(rendered, target, ldr).mean() / radiance_scale


def loss_phys(rendered, target, ldr: bool = False):
    return l1_color(rendered, target, ldr).mean()


def loss_eikonal(grad):
    return (grad.norm(dim=-1) - 1.0).abs().mean()


def loss_hessian(hessian):
    """Element-wise matrix 1-norm, averaged over points."""
    return hessian.abs().sum(dim=(-2, -1)).mean()


def dirac_eps(z, eps: float = 0.01):
    return (eps / math.pi) / (eps * eps + z * z)


def loss_minimal_surface(sdf_values, eps: float = 0.01):
    return dirac_eps(sdf_values, eps).mean()


def loss_point_cloud(sdf_values, grad, normals):
    g = grad / grad.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return (sdf_values.abs() + (1.0 - (normals * g).sum(-1))).mean()


def loss_smoothness(grad_r, grad_m, grad_image_norm):
    """``(|grad r| + |grad m|) exp(-|grad I|)``, averaged."""
    return ((grad_r.norm(dim=-1) + grad_m.norm(dim=-1)) * torch.exp(-grad_image_norm)).mean()


def loss_lambertian(roughness, metallic):
    return ((roughness - 1.0).abs() + metallic.abs()).mean()


def loss_ref(residuals):
    return residuals.mean()


def weighted_total(terms: dict, weights: LossWeights):
    total = None
    for name, value in terms.items():
        w = getattr(weights, name)
        if w == 0.0:
            continue
        total = w * value if total is None else total + w * value
    return total
