"""Analytic test scenes and a reference renderer for them.

Scenes are unions of spheres and boxes with per-primitive materials, lit by a
constant ambient environment, optional directional lights and emissive
primitives. The renderer integrates the rendering equation over a fixed
hemisphere lattice with shadow rays traced against the analytic SDF. Shadow
rays that hit geometry recursively gather that surface's radiance for a fixed
number of bounces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ..brdf import BrdfParams, ShadingFrame, brdf_full, brdf_lambertian
from ..pbr import sample_hemisphere
from .camera import Camera

SHADOW_STEPS = 64
PRIMARY_STEPS = 128
HIT_EPS = 1e-4
SURFACE_OFFSET = 1e-3


@dataclass
class Region:
    """Half-space ``dot(p, axis) > offset`` that overrides the base material."""

    axis: tuple
    offset: float
    base_color: tuple
    roughness: float = 1.0
    metallic: float = 0.0


@dataclass
class Material:
    base_color: tuple = (0.5, 0.5, 0.5)
    roughness: float = 1.0
    metallic: float = 0.0
    emission: tuple = (0.0, 0.0, 0.0)
    regions: list[Region] = field(default_factory=list)

    def params_at(self, p: np.ndarray):
        n = len(p)
        b = np.tile(np.asarray(self.base_color, dtype=np.float64), (n, 1))
        r = np.full(n, float(self.roughness))
        m = np.full(n, float(self.metallic))
        for reg in self.regions:
            sel = p @ np.asarray(reg.axis, dtype=np.float64) > reg.offset
            b[sel] = reg.base_color
            r[sel] = reg.roughness
            m[sel] = reg.metallic
        return b, r, m

    def to_dict(self) -> dict:
        return {"base_color": list(self.base_color), "roughness": self.roughness, "metallic": self.metallic,
                "emission": list(self.emission),
                "regions": [dict(axis=list(g.axis), offset=g.offset, base_color=list(g.base_color),
                                 roughness=g.roughness, metallic=g.metallic) for g in self.regions]}

    @classmethod
    def from_dict(cls, d: dict) -> "Material":
        regions = [Region(tuple(g["axis"]), g["offset"], tuple(g["base_color"]), g["roughness"], g["metallic"])
                   for g in d.get("regions", [])]
        return cls(tuple(d["base_color"]), d["roughness"], d["metallic"], tuple(d.get("emission", (0, 0, 0))),
                   regions)


@dataclass
class Sphere:
    center: tuple
    radius: float
    material: Material

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def area(self) -> float:
        return 4.0 * math.pi * self.radius**2

    def sample_surface(self, n: int, rng: np.random.Generator):
        u = rng.normal(size=(n, 3))
        u /= np.linalg.norm(u, axis=-1, keepdims=True)
        return np.asarray(self.center) + self.radius * u

    def to_dict(self):
        return {"type": "sphere", "center": list(self.center), "radius": self.radius,
                "material": self.material.to_dict()}


@dataclass
class Box:
    center: tuple
    half_extents: tuple
    material: Material

    def sdf(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def area(self) -> float:
        hx, hy, hz = self.half_extents
        return 8.0 * (hx * hy + hy * hz + hx * hz)

    def sample_surface(self, n: int, rng: np.random.Generator):
        h = np.asarray(self.half_extents, dtype=np.float64)
        face_areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
        faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        p = rng.uniform(-1.0, 1.0, size=(n, 3)) * h
        axis = faces // 2
        sign = np.where(faces % 2 == 0, 1.0, -1.0)
        p[np.arange(n), axis] = sign * h[axis]
        return p + np.asarray(self.center)

    def to_dict(self):
        return {"type": "box", "center": list(self.center), "half_extents": list(self.half_extents),
                "material": self.material.to_dict()}


@dataclass
class DirectionalLight:
    direction: tuple  # unit vector pointing toward the light
    irradiance: tuple  # RGB


@dataclass
class SyntheticScene:
    name: str
    primitives: list
    ambient: tuple = (1.0, 1.0, 1.0)
    lights: list[DirectionalLight] = field(default_factory=list)
    bound: float = 1.2
    brdf_model: str = "lambertian"  # or "disney"
    background: tuple = (0.0, 0.0, 0.0)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.min(np.stack([prim.sdf(p) for prim in self.primitives]), axis=0)

    def primitive_index(self, p: np.ndarray) -> np.ndarray:
        return np.argmin(np.stack([prim.sdf(p) for prim in self.primitives]), axis=0)

    def normal(self, p: np.ndarray, h: float = 1e-5) -> np.ndarray:
        g = np.stack([self.sdf(p + h * e) - self.sdf(p - h * e) for e in np.eye(3)], axis=-1)
        return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)

    def material_at(self, p: np.ndarray):
        """Base color ``[N,3]``, roughness ``[N]``, metallic ``[N]``, emission ``[N,3]``."""
        idx = self.primitive_index(p)
        b = np.zeros((len(p), 3))
        r = np.ones(len(p))
        m = np.zeros(len(p))
        e = np.zeros((len(p), 3))
        for k, prim in enumerate(self.primitives):
            sel = idx == k
            if sel.any():
                b[sel], r[sel], m[sel] = prim.material.params_at(p[sel])
                e[sel] = prim.material.emission
        return b, r, m, e

    def sample_surface(self, n: int, seed: int = 0):
        """Area-uniform points on the visible union surface with outward normals."""
        rng = np.random.default_rng(seed)
        areas = np.array([p.area() for p in self.primitives])
        counts = rng.multinomial(int(n * 1.5) + 16, areas / areas.sum())
        pts = np.concatenate([prim.sample_surface(c, rng) for prim, c in zip(self.primitives, counts)])
        pts = pts[np.abs(self.sdf(pts)) < 1e-6]
        # faces pressed against another primitive sit on a kink of the union and have no gradient
        h = 1e-5
        g = np.stack([self.sdf(pts + h * e) - self.sdf(pts - h * e) for e in np.eye(3)], axis=-1) / (2 * h)
        pts = pts[np.linalg.norm(g, axis=-1) > 0.5]
        pts = pts[rng.permutation(len(pts))[:n]]
        return pts, self.normal(pts)

    def to_dict(self) -> dict:
        return {"name": self.name, "primitives": [p.to_dict() for p in self.primitives],
                "ambient": list(self.ambient),
                "lights": [dict(direction=list(l.direction), irradiance=list(l.irradiance)) for l in self.lights],
                "bound": self.bound, "brdf_model": self.brdf_model, "background": list(self.background)}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        prims = []
        for p in d["primitives"]:
            mat = Material.from_dict(p["material"])
            if p["type"] == "sphere":
                prims.append(Sphere(tuple(p["center"]), p["radius"], mat))
            elif p["type"] == "box":
                prims.append(Box(tuple(p["center"]), tuple(p["half_extents"]), mat))
            else:
                raise ValueError(f"unknown primitive type {p['type']!r}")
        lights = [DirectionalLight(tuple(l["direction"]), tuple(l["irradiance"])) for l in d.get("lights", [])]
        return cls(d["name"], prims, tuple(d["ambient"]), lights, d["bound"], d.get("brdf_model", "lambertian"),
                   tuple(d.get("background", (0, 0, 0))))

    def scaled_light(self, k: float) -> "SyntheticScene":
        """Copy with every light source (ambient, directional, emissive) scaled by ``k``."""
        d = self.to_dict()
        d["ambient"] = [k * a for a in d["ambient"]]
        for l in d["lights"]:
            l["irradiance"] = [k * a for a in l["irradiance"]]
        for p in d["primitives"]:
            p["material"]["emission"] = [k * a for a in p["material"]["emission"]]
        return SyntheticScene.from_dict(d)


# -- built-in scenes ---------------------------------------------------------

def sphere_scene(base_color=(0.8, 0.3, 0.1), radius: float = 0.8, ambient: float = 1.0) -> SyntheticScene:
    return SyntheticScene("sphere", [Sphere((0.0, 0.0, 0.0), radius, Material(tuple(base_color)))],
                          ambient=(ambient,) * 3, bound=1.2)


def two_planes_scene() -> SyntheticScene:
    """A grey floor (plane A) next to a red wall (plane B)."""
    floor = Box((0.0, 0.0, -0.3), (0.8, 0.8, 0.05), Material((0.6, 0.6, 0.6)))
    wall = Box((0.55, 0.0, 0.25), (0.05, 0.8, 0.5), Material((0.9, 0.15, 0.1)))
    return SyntheticScene("two-planes", [floor, wall], ambient=(1.0, 1.0, 1.0), bound=1.3)


def sphere_on_plane_scene() -> SyntheticScene:
    floor = Box((0.0, 0.0, -0.45), (0.9, 0.9, 0.05), Material((0.7, 0.7, 0.7)))
    ball = Sphere((0.0, 0.0, -0.05), 0.35, Material((0.2, 0.4, 0.8), roughness=0.4))
    return SyntheticScene("sphere-on-plane", [floor, ball], ambient=(0.6, 0.6, 0.6),
                          lights=[DirectionalLight(tuple(np.array([0.3, 0.2, 1.0]) / np.linalg.norm([0.3, 0.2, 1.0])),
                                                   (1.5, 1.5, 1.5))],
                          bound=1.4, brdf_model="disney")


BUILTIN_SCENES = {
    "sphere": sphere_scene,
    "two-planes": two_planes_scene,
    "sphere-on-plane": sphere_on_plane_scene,
}


def builtin_scene(name: str) -> SyntheticScene:
    if name not in BUILTIN_SCENES:
        raise KeyError(f"unknown scene {name!r}; valid names: {', '.join(sorted(BUILTIN_SCENES))}")
    return BUILTIN_SCENES[name]()


def orbit_cameras(n_views: int, distance: float, size: int = 64, fov_deg: float = 40.0,
                  min_elevation_deg: float = -90.0, max_elevation_deg: float = 90.0) -> list[Camera]:
    """Cameras on a Fibonacci spiral over a latitude band, all looking at the origin."""
    zmin, zmax = math.sin(math.radians(min_elevation_deg)), math.sin(math.radians(max_elevation_deg))
    cams = []
    for k in range(n_views):
        z = zmax - (k + 0.5) / n_views * (zmax - zmin)
        phi = 2.0 * math.pi * k / ((1 + math.sqrt(5.0)) / 2.0)
        s = math.sqrt(max(1.0 - z * z, 0.0))
        eye = distance * np.array([s * math.cos(phi), s * math.sin(phi), z])
        up = np.array([0.0, 0.0, 1.0]) if s > 1e-3 else np.array([0.0, 1.0, 0.0])
        cams.append(Camera.look_at(eye, np.zeros(3), up, size, size, fov_deg))
    return cams


CAMERA_PRESETS = {
    "sphere": dict(distance=3.0, fov_deg=40.0),
    # low orbits see walls from below their top edge, the directions inter-reflection queries use
    "two-planes": dict(distance=3.5, fov_deg=45.0, min_elevation_deg=-5.0, max_elevation_deg=70.0),
    "sphere-on-plane": dict(distance=3.5, fov_deg=45.0, min_elevation_deg=15.0, max_elevation_deg=70.0),
}


def scene_cameras(scene: SyntheticScene, n_views: int, size: int = 64) -> list[Camera]:
    preset = CAMERA_PRESETS.get(scene.name, dict(distance=3.5, fov_deg=45.0, min_elevation_deg=-5.0,
                                                 max_elevation_deg=70.0))
    return orbit_cameras(n_views, size=size, **preset)


# -- reference renderer ------------------------------------------------------

def _exit_distance(o, d, radius):
    b = (o * d).sum(-1)
    c = (o * o).sum(-1) - radius * radius
    return -b + np.sqrt(np.maximum(b * b - c, 0.0))


def sphere_trace(scene: SyntheticScene, origins, dirs, t_max, steps: int = SHADOW_STEPS, eps: float = HIT_EPS):
    """March rays against the analytic SDF; returns ``hit [N]`` and ``t [N]``."""
    n = len(origins)
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.arange(n)
    t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,))
    for _ in range(steps):
        if not len(active):
            break
        p = origins[active] + t[active, None] * dirs[active]
        d = scene.sdf(p)
        done_hit = d < eps
        hit[active[done_hit]] = True
        t[active] += np.where(done_hit, 0.0, d)
        escaped = t[active] > t_max[active]
        active = active[~(done_hit | escaped)]
    return hit, t


def _brdf_eval(model, n, wo, wi, b, r, m):
    fn = brdf_lambertian if model == "lambertian" else brdf_full
    t = lambda a: torch.tensor(np.asarray(a), dtype=torch.float64)
    frame = ShadingFrame.build(t(n), t(wo), t(wi))
    params = BrdfParams(t(b), t(r)[..., None], t(m)[..., None])
    with torch.no_grad():
        return fn(frame, params).numpy()


def _direct_lights(scene, x, n, wo, b, r, m):
    out = np.zeros((len(x), 3))
    for light in scene.lights:
        l = np.broadcast_to(np.asarray(light.direction, dtype=np.float64), x.shape)
        cos = (n * l).sum(-1)
        lit = cos > 0
        if not lit.any():
            continue
        o = x[lit] + SURFACE_OFFSET * n[lit]
        blocked, _ = sphere_trace(scene, o, l[lit], _exit_distance(o, l[lit], scene.bound))
        vis = np.zeros(len(x))
        vis[np.flatnonzero(lit)[~blocked]] = 1.0
        f = _brdf_eval(scene.brdf_model, n, wo, l, b, r, m)
        out += f * np.asarray(light.irradiance) * (np.maximum(cos, 0.0) * vis)[:, None]
    return out


def _terminal_radiance(scene, y, v, lattice_size: int):
    """Radiance leaving ``y`` toward ``v`` with unoccluded ambient: the last bounce."""
    n = scene.normal(y)
    b, r, m, e = scene.material_at(y)
    out = e.copy()
    front = (n * v).sum(-1) > 0
    if front.any():
        yf, nf, vf = y[front], n[front], v[front]
        dirs = sample_hemisphere(torch.as_tensor(nf), lattice_size).directions.numpy()
        f = _brdf_eval(scene.brdf_model, nf[:, None], vf[:, None], dirs, b[front][:, None], r[front][:, None],
                       m[front][:, None])
        cos = np.maximum((dirs * nf[:, None]).sum(-1), 0.0)
        amb = (2.0 * math.pi / lattice_size) * (f * cos[..., None]).sum(1) * np.asarray(scene.ambient)
        out[front] += amb + _direct_lights(scene, yf, nf, vf, b[front], r[front], m[front])
    return out


def _outgoing(scene, x, n, wo, samples: int, bounces: int, secondary_samples: int, chunk_rays: int = 1 << 20):
    """Outgoing radiance of surface points; ``bounces`` traced indirect levels remain."""
    b, r, m, e = scene.material_at(x)
    out = e + _direct_lights(scene, x, n, wo, b, r, m)
    front = (n * wo).sum(-1) > 0
    ambient = np.asarray(scene.ambient, dtype=np.float64)
    idx = np.flatnonzero(front)
    step = max(1, chunk_rays // samples)
    for s in range(0, len(idx), step):
        sl = idx[s:s + step]
        xs, ns, ws = x[sl], n[sl], wo[sl]
        k = len(xs)
        dirs = sample_hemisphere(torch.as_tensor(ns), samples).directions.numpy()  # [k, S, 3]
        o = np.repeat(xs + SURFACE_OFFSET * ns, samples, axis=0)
        d = dirs.reshape(-1, 3)
        hit, t = sphere_trace(scene, o, d, _exit_distance(o, d, scene.bound))
        li = np.broadcast_to(ambient, (len(d), 3)).copy()
        li[hit] = 0.0
        if hit.any():
            y = o[hit] + t[hit, None] * d[hit]
            if bounces <= 0:
                li[hit] = scene.material_at(y)[3]
            elif bounces == 1:
                li[hit] = _terminal_radiance(scene, y, -d[hit], secondary_samples)
            else:
                li[hit] = _outgoing(scene, y, scene.normal(y), -d[hit], secondary_samples, bounces - 1,
                                    secondary_samples, chunk_rays)
        li = li.reshape(k, samples, 3)
        f = _brdf_eval(scene.brdf_model, ns[:, None], ws[:, None], dirs, b[sl][:, None], r[sl][:, None],
                       m[sl][:, None])
        cos = np.maximum((dirs * ns[:, None]).sum(-1), 0.0)
        out[sl] += (2.0 * math.pi / samples) * (f * li * cos[..., None]).sum(1)
    return out


def shade_points(scene: SyntheticScene, x, n, wo, samples: int = 256, indirect: bool = True,
                 secondary_samples: int = 16, bounces: int = 2, chunk_rays: int = 1 << 20):
    """Outgoing radiance of surface points ``x`` toward ``wo``.

    Shadow rays that hit geometry pick up the radiance of the hit point,
    itself shaded with ``secondary_samples`` traced directions for up to
    ``bounces`` levels; the last level uses unoccluded ambient light.
    """
    return _outgoing(scene, x, n, wo, samples, bounces if indirect else 0, secondary_samples, chunk_rays)


@dataclass
class SurfaceHits:
    hit: np.ndarray  # [P] bool
    position: np.ndarray  # [P, 3]
    normal: np.ndarray  # [P, 3]
    view: np.ndarray  # [P, 3], toward the camera


def trace_camera(scene: SyntheticScene, camera: Camera) -> SurfaceHits:
    o, d = camera.rays_from_uv(camera.pixel_centers())
    hit, t = sphere_trace(scene, o, d, _exit_distance(o, d, scene.bound) , steps=PRIMARY_STEPS)
    pos = o + t[:, None] * d
    nrm = np.zeros_like(pos)
    if hit.any():
        nrm[hit] = scene.normal(pos[hit])
    return SurfaceHits(hit, pos, nrm, -d)


def render_ground_truth(scene: SyntheticScene, camera: Camera, samples: int = 256, indirect: bool = True,
                        secondary_samples: int = 16, bounces: int = 2) -> np.ndarray:
    """Linear ``[H, W, 3]`` float32 image of the analytic scene."""
    hits = trace_camera(scene, camera)
    img = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), (len(hits.hit), 3)).copy()
    sel = hits.hit
    if sel.any():
        img[sel] = shade_points(scene, hits.position[sel], hits.normal[sel], hits.view[sel], samples, indirect,
                                secondary_samples, bounces)
    return img.reshape(camera.height, camera.width, 3).astype(np.float32)


def material_maps(scene: SyntheticScene, camera: Camera, hits: SurfaceHits | None = None):
    """Per-pixel base color, roughness and metallic; background pixels are -1."""
    hits = hits or trace_camera(scene, camera)
    shape = (camera.height, camera.width, 3)
    base = np.full((len(hits.hit), 3), -1.0)
    rough = np.full((len(hits.hit), 3), -1.0)
    metal = np.full((len(hits.hit), 3), -1.0)
    if hits.hit.any():
        b, r, m, _ = scene.material_at(hits.position[hits.hit])
        base[hits.hit] = b
        rough[hits.hit] = r[:, None]
        metal[hits.hit] = m[:, None]
    return (base.reshape(shape).astype(np.float32), rough.reshape(shape).astype(np.float32),
            metal.reshape(shape).astype(np.float32))
