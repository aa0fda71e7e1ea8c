"""Batched rendering of trained fields: camera rays, surface caches and image modes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .fields import FieldSet
from .pbr import sample_hemisphere, shade
from .scene.camera import Camera
from .volren import Ray, bound_rays, volume_render

MODES = ("volume", "pbr", "basecolor", "roughness", "metallic", "normal")


@dataclass
class RayBundle:
    origins: torch.Tensor  # [P, 3]
    directions: torch.Tensor  # [P, 3]
    near: torch.Tensor  # [P]
    far: torch.Tensor  # [P]
    valid: torch.Tensor  # [P] bool, ray meets the bounding sphere

    def ray(self, idx) -> Ray:
        return Ray(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx])


def camera_rays(camera: Camera, bound: float, dtype=torch.float32) -> RayBundle:
    o, d = camera.rays_from_uv(camera.pixel_centers())
    near, far, valid = bound_rays(o, d, bound)
    t = lambda a: torch.as_tensor(a, dtype=dtype)
    return RayBundle(t(o), t(d), t(near), t(far), torch.as_tensor(valid))


@dataclass
class SurfaceCache:
    hit: torch.Tensor  # [P] bool
    x: torch.Tensor  # [P, 3]
    n: torch.Tensor  # [P, 3]
    color: torch.Tensor  # [P, 3] volume-rendered


def surface_cache(fields: FieldSet, rays: RayBundle, samples: int = 64, chunk: int = 2048,
                  background=None) -> SurfaceCache:
    """Volume-render every valid ray once (bin midpoints) and keep hits and normals."""
    p = len(rays.origins)
    dtype = rays.origins.dtype
    hit = torch.zeros(p, dtype=torch.bool)
    x = torch.zeros(p, 3, dtype=dtype)
    n = torch.zeros(p, 3, dtype=dtype)
    color = torch.zeros(p, 3, dtype=dtype)
    if background is not None:
        color[:] = torch.as_tensor(background, dtype=dtype)
    idx = torch.nonzero(rays.valid).flatten()
    for s in range(0, len(idx), chunk):
        sel = idx[s:s + chunk]
        out = volume_render(rays.ray(sel), fields.sdf, fields.radiance, samples, generator=None,
                            background=background, create_graph=False)
        hit[sel] = out.hit
        x[sel] = out.x_surf.detach()
        n[sel] = out.n_surf.detach()
        color[sel] = out.color.detach()
    return SurfaceCache(hit, x, n, color)


def render_image(fields: FieldSet, camera: Camera, bound: float, mode: str = "volume", samples: int = 64,
                 incident_samples: int = 128, background=(0.0, 0.0, 0.0), chunk: int = 2048) -> np.ndarray:
    """``[H, W, 3]`` float32 image of one rendering channel."""
    if mode not in MODES:
        raise ValueError(f"unknown render mode {mode!r}; valid modes: {', '.join(MODES)}")
    dtype = next(fields.parameters()).dtype
    rays = camera_rays(camera, bound, dtype)
    with torch.no_grad():
        cache = surface_cache(fields, rays, samples, chunk, background)
    out = torch.zeros(len(rays.origins), 3, dtype=dtype)
    if mode == "volume":
        out = cache.color
    else:
        sel = torch.nonzero(cache.hit).flatten()
        if mode == "normal":
            out[sel] = 0.5 * (cache.n[sel] + 1.0)
        elif len(sel):
            step = max(1, chunk // 8)
            with torch.no_grad():
                for s in range(0, len(sel), step):
                    ids = sel[s:s + step]
                    xs, ns = cache.x[ids], cache.n[ids]
                    params = fields.brdf(xs)
                    if mode == "basecolor":
                        out[ids] = params.base_color
                    elif mode == "roughness":
                        out[ids] = params.roughness.expand(-1, 3)
                    elif mode == "metallic":
                        out[ids] = params.metallic.expand(-1, 3)
                    else:
                        wo = -rays.directions[ids]
                        front = (ns * wo).sum(-1) > 0
                        dirs = sample_hemisphere(ns, incident_samples).directions
                        li = fields.light(xs[:, None].expand_as(dirs), dirs)
                        rgb = shade(xs, ns, wo, params, li, dirs)
                        out[ids] = torch.where(front[:, None], rgb, torch.zeros_like(rgb))
        if mode == "pbr":
            bg = torch.as_tensor(background, dtype=dtype)
            out[~cache.hit] = bg
    return out.reshape(camera.height, camera.width, 3).double().numpy().astype(np.float32)
