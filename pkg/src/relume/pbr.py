"""Monte Carlo shading with an incident light field and back-tracing of
incident rays for the inter-reflection constraint."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from .brdf import BrdfParams, ShadingFrame, brdf_full
from .volren import HIT_THRESHOLD, Ray, volume_render

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0


def fibonacci_hemisphere(n: int, dtype=torch.float64) -> torch.Tensor:
    """``[n, 3]`` equal-area spiral around +z; ``cos(theta)`` is uniform."""
    k = torch.arange(n, dtype=dtype)
    z = 1.0 - (k + 0.5) / n
    phi = 2.0 * math.pi * k / GOLDEN_RATIO
    s = torch.sqrt(1.0 - z * z)
    return torch.stack([s * torch.cos(phi), s * torch.sin(phi), z], dim=-1)


def rotation_to(n: torch.Tensor) -> torch.Tensor:
    """Minimal rotation ``[..., 3, 3]`` taking +z onto the unit vector ``n``."""
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    k = 1.0 / (1.0 + z).clamp_min(1e-12)
    # Rodrigues with axis z x n = (-y, x, 0)
    r = torch.stack([
        torch.stack([1.0 - x * x * k, -x * y * k, x], -1),
        torch.stack([-x * y * k, 1.0 - y * y * k, y], -1),
        torch.stack([-x, -y, z], -1),
    ], dim=-2)
    flip = torch.diag(torch.tensor([1.0, -1.0, -1.0], dtype=n.dtype))
    antipodal = (z < -1.0 + 1e-9)[..., None, None]
    return torch.where(antipodal, flip.expand_as(r), r)


@dataclass
class HemisphereSampleSet:
    directions: torch.Tensor  # [..., N, 3]

    @property
    def count(self) -> int:
        return self.directions.shape[-2]


def sample_hemisphere(n, count: int) -> HemisphereSampleSet:
    """Fixed Fibonacci lattice rotated into the hemisphere around ``n``."""
    if count < 4:
        raise ValueError(f"need at least 4 hemisphere samples, got {count}")
    n = torch.as_tensor(n)
    if not n.is_floating_point():
        n = n.double()
    lattice = fibonacci_hemisphere(count, n.dtype)
    rot = rotation_to(n)
    dirs = torch.einsum("...ij,kj->...ki", rot, lattice)
    return HemisphereSampleSet(F.normalize(dirs, dim=-1))


def shade(x, n, wo, params: BrdfParams, light, directions, brdf=brdf_full):
    """``(2 pi / N) sum f L_i cos`` over the given hemisphere directions.

    No horizon check on ``wo``; callers filter back-facing points.
    """
    wi = directions
    count = wi.shape[-2]
    if callable(light):
        li = light(x[..., None, :].expand_as(wi), wi)
    else:
        li = torch.as_tensor(light, dtype=wi.dtype).expand(*wi.shape)
    frame = ShadingFrame.build(n[..., None, :], wo[..., None, :], wi)
    f = brdf(frame, params.unsqueeze(-2))
    cos = (wi * n[..., None, :]).sum(-1, keepdim=True).clamp_min(0.0)
    return (2.0 * math.pi / count) * (f * li * cos).sum(-2)


def render_pbr(x, n, wo, params: BrdfParams, light, count: int = 128, brdf=brdf_full):
    """Physically based color of surface points lit by ``light``.

    ``light`` is either a callable ``(x, w_i) -> RGB`` (such as the incident
    light field) or a constant RGB value.
    """
    n = torch.as_tensor(n)
    wo = torch.as_tensor(wo, dtype=n.dtype)
    x = torch.as_tensor(x, dtype=n.dtype)
    if torch.any((n * wo).sum(-1) <= 0):
        raise ValueError("backfacing shading point: view direction below the horizon")
    dirs = sample_hemisphere(n, count).directions
    return shade(x, n, wo, params, light, dirs, brdf)


@dataclass
class IncidentTraceResult:
    hit: torch.Tensor  # [...] bool
    x2: torch.Tensor  # [..., 3]
    traced_radiance: torch.Tensor  # [..., 3]
    opacity: torch.Tensor  # [...]


def sphere_exit(origin, direction, bound: float):
    """Distance along the ray to the bounding sphere of radius ``bound``."""
    b = (origin * direction).sum(-1)
    c = (origin * origin).sum(-1) - bound * bound
    return -b + torch.sqrt((b * b - c).clamp_min(0.0))


def trace_incident(x1, wi, sdf_field, radiance_fn: Callable, num_samples: int = 32, bound: float = 1.5,
                   offset: float | None = None, hit_threshold: float = HIT_THRESHOLD,
                   generator: torch.Generator | None = None, normal=None,
                   lift: float = 4.0) -> IncidentTraceResult:
    """Volume-render the outgoing radiance field along ``wi`` starting at ``x1``.

    The radiance arriving at ``x1`` from ``wi`` is emitted toward ``-wi``, so
    the field is queried with that direction. The origin is pushed by
    ``offset`` (default: three mean sample spacings) to leave the surface.

    When ``normal`` is given the origin is also raised ``lift * beta`` along
    it. Without that, grazing rays stay inside the density shell of their own
    surface and report a self-hit.
    """
    if normal is not None:
        x1 = x1 + (lift * sdf_field.beta) * normal
    far = sphere_exit(x1, wi, bound).clamp_min(1e-3)
    if offset is None:
        offset = 3.0 * far / num_samples
    offset = torch.as_tensor(offset, dtype=x1.dtype).expand_as(far)
    near = torch.minimum(offset, 0.5 * far)
    ray = Ray(x1, wi, near, far)
    out = volume_render(ray, sdf_field, radiance_fn, num_samples, generator=generator,
                        hit_threshold=hit_threshold, with_normals=False)
    return IncidentTraceResult(out.hit, out.x_surf, out.color, out.opacity)


def interreflection_residual(incident, trace: IncidentTraceResult):
    """Mean-over-channels L1 gap between queried incident light and traced radiance."""
    if not bool(torch.all(trace.hit)):
        raise ValueError("inter-reflection residual needs a surface hit; trace missed")
    return (incident - trace.traced_radiance).abs().mean(-1)
