"""Simplified Disney principled BRDF: Lambertian diffuse plus a microfacet
specular lobe with a spherical-Gaussian NDF, Schlick Fresnel and a
separable GGX shadowing term.

All functions are batched over leading dimensions. Colors are ``[..., 3]``,
scalar material channels are ``[..., 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

ROUGHNESS_MIN = 0.04
COS_EPS = 1e-4
DIELECTRIC_F0 = 0.04


@dataclass
class BrdfParams:
    """Base color ``b`` in [0,1]^3, roughness ``r`` and metallic ``m`` in [0,1]."""

    base_color: torch.Tensor
    roughness: torch.Tensor
    metallic: torch.Tensor

    @classmethod
    def of(cls, base_color, roughness, metallic, dtype=torch.float64) -> "BrdfParams":
        b = torch.as_tensor(base_color, dtype=dtype)
        r = torch.as_tensor(roughness, dtype=dtype)
        m = torch.as_tensor(metallic, dtype=dtype)
        if r.dim() == 0 or r.shape[-1] != 1:
            r = r.unsqueeze(-1)
        if m.dim() == 0 or m.shape[-1] != 1:
            m = m.unsqueeze(-1)
        return cls(b, r, m)

    def detach(self) -> "BrdfParams":
        return BrdfParams(self.base_color.detach(), self.roughness.detach(), self.metallic.detach())

    def unsqueeze(self, dim: int) -> "BrdfParams":
        return BrdfParams(self.base_color.unsqueeze(dim), self.roughness.unsqueeze(dim),
                          self.metallic.unsqueeze(dim))


@dataclass
class ShadingFrame:
    n: torch.Tensor
    wo: torch.Tensor
    wi: torch.Tensor
    h: torch.Tensor

    @classmethod
    def build(cls, n, wo, wi) -> "ShadingFrame":
        n, wo, wi = torch.broadcast_tensors(torch.as_tensor(n), torch.as_tensor(wo), torch.as_tensor(wi))
        h = F.normalize(wi + wo, dim=-1, eps=1e-12)
        return cls(n, wo, wi, h)


def _dot(a, b):
    return (a * b).sum(-1, keepdim=True)


def diffuse_term(base_color, metallic):
    return (1.0 - metallic) / math.pi * base_color


def normal_distribution(h_dot_n, roughness):
    r = torch.clamp(torch.as_tensor(roughness), ROUGHNESS_MIN, 1.0)
    r4 = r**4
    return torch.exp(2.0 / r4 * (h_dot_n - 1.0)) / (math.pi * r4)


def fresnel(o_dot_h, base_color, metallic):
    # Schlick; exponent on (1 - cos), not on cos
    f0 = DIELECTRIC_F0 * (1.0 - metallic) + base_color * metallic
    return f0 + (1.0 - f0) * (1.0 - o_dot_h) ** 5


def ggx_shadowing(z, roughness):
    r2 = torch.as_tensor(roughness) ** 2
    return 2.0 * z / ((2.0 - r2) * z + r2)


def geometry_term(i_dot_n, o_dot_n, roughness):
    return ggx_shadowing(i_dot_n, roughness) * ggx_shadowing(o_dot_n, roughness)


def specular_term(frame: ShadingFrame, params: BrdfParams):
    ni = _dot(frame.n, frame.wi).clamp_min(COS_EPS)
    no = _dot(frame.n, frame.wo).clamp_min(COS_EPS)
    hn = _dot(frame.h, frame.n).clamp(-1.0, 1.0)
    oh = _dot(frame.wo, frame.h).clamp(0.0, 1.0)
    r = params.roughness.clamp(0.0, 1.0)
    d = normal_distribution(hn, r)
    f = fresnel(oh, params.base_color, params.metallic)
    g = geometry_term(ni, no, r)
    return d * f * g / (4.0 * ni * no)


def brdf_full(frame: ShadingFrame, params: BrdfParams):
    """``f_d + f_s``; zero where either direction is below the horizon."""
    ni = _dot(frame.n, frame.wi)
    no = _dot(frame.n, frame.wo)
    visible = ((ni > 0) & (no > 0)).to(params.base_color.dtype)
    f = diffuse_term(params.base_color, params.metallic) + specular_term(frame, params)
    return f * visible


def brdf_lambertian(frame: ShadingFrame, params: BrdfParams):
    """Diffuse lobe only, used as a reference integrand."""
    ni = _dot(frame.n, frame.wi)
    no = _dot(frame.n, frame.wo)
    visible = ((ni > 0) & (no > 0)).to(params.base_color.dtype)
    return diffuse_term(params.base_color, params.metallic) * visible
