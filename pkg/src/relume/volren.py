"""Volume rendering of an SDF-derived density and mesh extraction."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .scene.camera import Camera

log = logging.getLogger(__name__)

HIT_THRESHOLD = 0.5


def sdf_to_density(s, alpha, beta):
    """``alpha * Psi_beta(-s)`` with ``Psi_beta`` the zero-mean Laplace CDF."""
    s = torch.as_tensor(s)
    return alpha * (0.5 + 0.5 * torch.sign(s) * torch.expm1(-s.abs() / beta))


@dataclass
class Ray:
    origin: torch.Tensor  # [..., 3]
    direction: torch.Tensor  # [..., 3], unit
    near: torch.Tensor  # [...]
    far: torch.Tensor  # [...]

    def __post_init__(self):
        if torch.any(self.far <= self.near) or torch.any(self.near < 0):
            raise ValueError("rays need far > near >= 0")

    def __len__(self):
        return self.origin.shape[0]

    def __getitem__(self, idx) -> "Ray":
        return Ray(self.origin[idx], self.direction[idx], self.near[idx], self.far[idx])


def sample_ray(camera: Camera, pixel, near: float = 0.0, far: float = 10.0, dtype=torch.float64) -> Ray:
    """Ray through the center of integer pixel ``(i, j)`` (column, row)."""
    i, j = pixel
    if not (0 <= i < camera.width and 0 <= j < camera.height):
        raise ValueError(f"pixel {pixel} outside a {camera.width}x{camera.height} image")
    return ray_through(camera, [[i + 0.5, j + 0.5]], near, far, dtype)


def ray_through(camera: Camera, uv, near: float = 0.0, far: float = 10.0, dtype=torch.float64) -> Ray:
    if abs(np.linalg.det(camera.world_to_camera)) < 1e-12:
        raise ValueError("singular extrinsic matrix")
    o, d = camera.rays_from_uv(np.asarray(uv, dtype=np.float64))
    o = torch.as_tensor(o, dtype=dtype)
    d = torch.as_tensor(d, dtype=dtype)
    n = o.shape[0]
    return Ray(o, d, torch.full((n,), float(near), dtype=dtype), torch.full((n,), float(far), dtype=dtype))


def bound_rays(origins: np.ndarray, directions: np.ndarray, radius: float):
    """Near/far distances of rays against a bounding sphere at the origin.

    Returns ``near, far, valid``; misses get ``valid=False``.
    """
    b = (origins * directions).sum(-1)
    c = (origins * origins).sum(-1) - radius * radius
    disc = b * b - c
    valid = disc > 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    near = np.maximum(-b - sq, 0.0)
    far = -b + sq
    valid &= far > near + 1e-6
    far = np.where(valid, far, near + 1.0)
    return near, far, valid


def stratified_depths(near, far, n: int, generator: torch.Generator | None = None):
    """``n`` depths per ray, one per equal bin; bin midpoints without a generator."""
    u = torch.linspace(0.0, 1.0, n + 1, dtype=near.dtype)
    lo, width = u[:-1], 1.0 / n
    if generator is None:
        jitter = torch.full((*near.shape, n), 0.5, dtype=near.dtype)
    else:
        jitter = torch.rand((*near.shape, n), generator=generator, dtype=near.dtype)
    t = lo + jitter * width
    return near[..., None] + (far - near)[..., None] * t


def composite(sigma, deltas):
    """Blend weights and transmittances for front-to-back alpha compositing.

    Returns ``weights [..., N]`` and ``trans [..., N+1]`` with ``trans[..., 0] = 1``.
    """
    tau = sigma * deltas
    zeros = torch.zeros_like(tau[..., :1])
    trans = torch.exp(-torch.cat([zeros, torch.cumsum(tau, dim=-1)], dim=-1))
    weights = trans[..., :-1] * (1.0 - torch.exp(-tau))
    return weights, trans


def composite_colors(sigma, deltas, colors, background=None):
    weights, trans = composite(sigma, deltas)
    color = (weights[..., None] * colors).sum(-2)
    if background is not None:
        color = color + trans[..., -1:] * torch.as_tensor(background, dtype=color.dtype)
    return color, weights, trans


@dataclass
class RenderResult:
    color: torch.Tensor  # [R, 3]
    opacity: torch.Tensor  # [R]
    hit: torch.Tensor  # [R] bool
    x_surf: torch.Tensor  # [R, 3]
    n_surf: torch.Tensor | None  # [R, 3]
    weights: torch.Tensor  # [R, N]
    points: torch.Tensor  # [R, N, 3]
    sdf: torch.Tensor  # [R, N]
    sdf_grad: torch.Tensor | None  # [R, N, 3]


def volume_render(ray: Ray, sdf_field, radiance_fn: Callable, num_samples: int,
                  generator: torch.Generator | None = None, background=None,
                  hit_threshold: float = HIT_THRESHOLD, with_normals: bool = True,
                  sample_gradients: bool = False, create_graph: bool = True) -> RenderResult:
    """Alpha-composite ``radiance_fn(x, w_o)`` along rays through the SDF density.

    ``sdf_field`` must provide ``__call__``, ``sdf_and_gradient`` and ``beta``;
    ``alpha`` is tied to ``1 / beta``. The surface point is the
    opacity-normalized blend of sample positions and its normal is the SDF
    gradient evaluated there.
    """
    if num_samples < 2:
        raise ValueError("volume rendering needs at least 2 samples per ray")
    t = stratified_depths(ray.near, ray.far, num_samples, generator)
    pts = ray.origin[..., None, :] + t[..., None] * ray.direction[..., None, :]
    deltas = torch.cat([t[..., 1:] - t[..., :-1], ((ray.far - ray.near) / num_samples)[..., None]], dim=-1)
    if sample_gradients:
        s, g = sdf_field.sdf_and_gradient(pts, create_graph=create_graph)
    else:
        s, g = sdf_field(pts), None
    beta = sdf_field.beta
    sigma = sdf_to_density(s, 1.0 / beta, beta)
    view = -ray.direction[..., None, :].expand_as(pts)
    colors = radiance_fn(pts, view)
    color, weights, trans = composite_colors(sigma, deltas, colors, background)
    opacity = weights.sum(-1)
    hit = opacity > hit_threshold
    x_surf = (weights[..., None] * pts).sum(-2) / opacity.clamp_min(1e-8)[..., None]
    n_surf = None
    if with_normals:
        _, gs = sdf_field.sdf_and_gradient(x_surf, create_graph=create_graph)
        n_surf = F.normalize(gs, dim=-1, eps=1e-12)
    return RenderResult(color, opacity, hit, x_surf, n_surf, weights, pts, s, g)


@dataclass
class Mesh:
    vertices: np.ndarray  # [V, 3]
    faces: np.ndarray  # [F, 3] int

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0


def evaluate_grid(sdf_fn: Callable[[np.ndarray], np.ndarray], resolution: int, bound: float,
                  chunk: int = 65536) -> np.ndarray:
    axis = np.linspace(-bound, bound, resolution)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.concatenate([np.asarray(sdf_fn(grid[i:i + chunk])) for i in range(0, len(grid), chunk)])
    return vals.reshape(resolution, resolution, resolution)


def extract_mesh(sdf_fn: Callable[[np.ndarray], np.ndarray], resolution: int = 64, bound: float = 1.0) -> Mesh:
    """Marching-cubes mesh of the zero level set on ``[-bound, bound]^3``.

    ``sdf_fn`` maps ``[N, 3]`` numpy points to ``[N]`` distances.
    """
    from skimage.measure import marching_cubes

    if resolution < 16:
        raise ValueError("grid resolution must be at least 16")
    vol = evaluate_grid(sdf_fn, resolution, bound)
    if not (vol.min() < 0.0 < vol.max()):
        warnings.warn("SDF has no sign change on the grid; returning an empty mesh")
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    spacing = 2.0 * bound / (resolution - 1)
    verts, faces, _, _ = marching_cubes(vol, level=0.0, spacing=(spacing,) * 3)
    # with a negative interior, skimage's winding already gives outward normals
    return Mesh(verts - bound, faces.astype(np.int64))


def field_sdf_fn(sdf_field) -> Callable[[np.ndarray], np.ndarray]:
    dtype = next(sdf_field.parameters()).dtype

    def fn(pts):
        with torch.no_grad():
            return sdf_field(torch.as_tensor(pts, dtype=dtype)).double().numpy()

    return fn


def write_obj(path, mesh: Mesh):
    with open(path, "w") as f:
        f.write(f"# {len(mesh.vertices)} vertices, {len(mesh.faces)} faces\n")
        for v in mesh.vertices:
            f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for tri in mesh.faces:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


def read_obj(path) -> Mesh:
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return Mesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3))
