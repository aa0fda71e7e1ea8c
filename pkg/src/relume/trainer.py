"""Three-stage optimization of the four fields against a multi-view dataset.

``sdf_init`` fits geometry and outgoing radiance by volume rendering.
``mat_init`` fits materials and incident light on a frozen surface.
``joint`` optimizes everything with differentiable surface points.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .checkpoint import save_checkpoint
from .fields import FieldConfig, FieldSet
from .losses import STAGES, TERMS, LossWeights, default_stage_weights, validate_stage_weights
from .pbr import sample_hemisphere, shade, trace_incident
from .render import RayBundle, camera_rays, surface_cache
from .scene.dataset import SceneDataset, image_gradient_norm
from .volren import volume_render

log = logging.getLogger(__name__)

STAGE_PARAMS = {
    "sdf_init": ("sdf", "radiance"),
    "mat_init": ("brdf", "light"),
    "joint": ("sdf", "radiance", "brdf", "light"),
}


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    rays_per_step: int = 512
    samples_per_ray: int = 32
    incident_samples: int = 128
    ref_subset: int = 16
    ref_points: int = 32
    trace_samples: int = 32
    steps: dict = field(default_factory=lambda: {"sdf_init": 2000, "mat_init": 2000, "joint": 3000})
    learning_rate: float = 5e-4
    # per-field multipliers; "beta" scales the density sharpness separately from the SDF network
    lr_scale: dict = field(default_factory=lambda: {"sdf": 1.0, "beta": 10.0, "brdf": 1.0, "light": 1.0,
                                                    "radiance": 1.0})
    stage_lr_decay: float = 0.5
    weights: dict = field(default_factory=default_stage_weights)
    seed: int = 0
    hdr_mode: bool = True
    threads: int = 1
    holdout_every: int = 10
    eik_points: int = 256
    hess_points: int = 64
    surf_points: int = 256
    pcd_points: int = 256
    surf_eps: float = 0.01
    fd_step: float = 1e-3
    cache_samples: int = 64
    ref_stop_gradient: bool = False
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    fields: FieldConfig = field(default_factory=FieldConfig)

    def __post_init__(self):
        if isinstance(self.fields, dict):
            self.fields = FieldConfig(**self.fields)
        self.weights = {k: v if isinstance(v, LossWeights) else LossWeights(**v) for k, v in self.weights.items()}
        for stage in STAGES:
            self.weights.setdefault(stage, default_stage_weights()[stage])
        if set(self.steps) - set(STAGES):
            raise ValueError(f"unknown stage in steps: {sorted(set(self.steps) - set(STAGES))}")
        for stage in STAGES:
            self.steps.setdefault(stage, 0)
        counts = ("rays_per_step", "samples_per_ray", "incident_samples", "ref_subset", "ref_points", "trace_samples",
                  "eik_points", "hess_points", "surf_points", "pcd_points", "threads", "cache_samples")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if any(v < 0 for v in self.steps.values()):
            raise ValueError("stage lengths must be non-negative")
        if self.ref_subset > self.incident_samples:
            raise ValueError("ref_subset cannot exceed incident_samples")
        if self.incident_samples < 4:
            raise ValueError("incident_samples must be at least 4")
        unknown = set(self.lr_scale) - {"sdf", "beta", "brdf", "light", "radiance"}
        if unknown:
            raise ValueError(f"unknown lr_scale keys: {', '.join(sorted(unknown))}")
        for k in ("sdf", "brdf", "light", "radiance"):
            self.lr_scale.setdefault(k, 1.0)
        self.lr_scale.setdefault("beta", 10.0)
        validate_stage_weights(self.weights)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = {k: v.to_dict() for k, v in self.weights.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        d = dict(d)
        if "fields" in d:
            fc = set(d["fields"]) - set(FieldConfig.__dataclass_fields__)
            if fc:
                raise ValueError(f"unknown field config keys: {', '.join(sorted(fc))}")
        if "weights" in d:
            base = default_stage_weights()
            merged = {}
            for stage, w in d["weights"].items():
                if stage not in STAGES:
                    raise ValueError(f"unknown stage in weights: {stage}")
                bad = set(w) - set(TERMS)
                if bad:
                    raise ValueError(f"unknown loss terms: {', '.join(sorted(bad))}")
                merged[stage] = LossWeights(**{**base[stage].to_dict(), **w})
            d["weights"] = merged
        return cls(**d)


@dataclass
class StepResult:
    stage: str
    step: int
    terms: dict  # every loss term, 0.0 when inactive
    total: float


class Trainer:
    """Holds fields, precomputed rays and per-stage optimizers."""

    def __init__(self, config: TrainConfig, dataset: SceneDataset, fields: FieldSet | None = None,
                 dtype=torch.float32):
        self.config = config
        self.dataset = dataset
        torch.set_num_threads(config.threads)
        torch.manual_seed(config.seed)
        self.fields = fields if fields is not None else FieldSet(config.fields)
        self.fields.to(dtype)
        self.dtype = dtype
        self.generator = torch.Generator().manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)
        self.train_views = [k for k in range(len(dataset))
                            if not (config.holdout_every and k % config.holdout_every == config.holdout_every - 1)]
        if not self.train_views:
            raise ValueError("no training views left after the held-out split")
        self._prepare_rays()
        self.stage: str | None = None
        self.optimizer: torch.optim.Optimizer | None = None
        self.step_in_stage = 0
        self.global_step = 0
        self.cache = None
        self._order = None
        self._cursor = 0
        self.background = torch.as_tensor(config.background, dtype=dtype)

    # -- data --------------------------------------------------------------

    def _prepare_rays(self):
        bundles, targets, grad_norms = [], [], []
        for k in self.train_views:
            cam = self.dataset.cameras[k]
            bundles.append(camera_rays(cam, self.dataset.bound, self.dtype))
            targets.append(torch.as_tensor(self.dataset.images[k].reshape(-1, 3), dtype=self.dtype))
            grad_norms.append(torch.as_tensor(image_gradient_norm(self.dataset.images[k]).ravel(), dtype=self.dtype))
        cat = lambda name: torch.cat([getattr(b, name) for b in bundles])
        rays = RayBundle(cat("origins"), cat("directions"), cat("near"), cat("far"), cat("valid"))
        keep = torch.nonzero(rays.valid).flatten()
        self.rays = RayBundle(rays.origins[keep], rays.directions[keep], rays.near[keep], rays.far[keep],
                              rays.valid[keep])
        self.targets = torch.cat(targets)[keep]
        self.grad_norms = torch.cat(grad_norms)[keep]
        cloud = self.dataset.point_cloud
        self.cloud = None
        if cloud is not None and len(cloud):
            self.cloud = (torch.as_tensor(cloud.positions, dtype=self.dtype),
                          torch.as_tensor(cloud.normals, dtype=self.dtype))

    def _pool(self, stage: str) -> torch.Tensor:
        if stage == "mat_init":
            return torch.nonzero(self.cache.hit).flatten()
        return torch.arange(len(self.targets))

    def next_batch(self) -> torch.Tensor:
        """Indices into the training rays, by seeded reshuffling of the stage's pool."""
        pool = self._pool(self.stage)
        if not len(pool):
            raise RuntimeError(f"no usable pixels for stage {self.stage}")
        n = min(self.config.rays_per_step, len(pool))
        if self._order is None or self._cursor + n > len(self._order):
            self._order = pool[torch.as_tensor(self.rng.permutation(len(pool)))]
            self._cursor = 0
        batch = self._order[self._cursor:self._cursor + n]
        self._cursor += n
        return batch

    # -- stages ------------------------------------------------------------

    def stage_learning_rate(self, stage: str) -> float:
        return self.config.learning_rate * self.config.stage_lr_decay ** STAGES.index(stage)

    def begin_stage(self, stage: str):
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        self.stage = stage
        self.step_in_stage = 0
        self._order = None
        lr = self.stage_learning_rate(stage)
        scale = self.config.lr_scale
        groups = []
        for name in STAGE_PARAMS[stage]:
            module = getattr(self.fields, name)
            if name == "sdf":
                beta = module.log_beta
                groups.append({"params": [p for p in module.parameters() if p is not beta], "lr": lr * scale["sdf"]})
                groups.append({"params": [beta], "lr": lr * scale["beta"]})
            else:
                groups.append({"params": list(module.parameters()), "lr": lr * scale[name]})
        self.optimizer = torch.optim.Adam(groups, lr=lr)
        for name in self.fields.NAMES:
            getattr(self.fields, name).requires_grad_(name in STAGE_PARAMS[stage])
        if stage == "mat_init":
            with torch.no_grad():
                self.cache = surface_cache(self.fields, self.rays, self.config.cache_samples,
                                           background=self.background)
            log.info("mat_init: %d of %d pixels hit the surface", int(self.cache.hit.sum()), len(self.cache.hit))
        else:
            self.cache = None

    def train_step(self, stage: str, batch: torch.Tensor | None = None) -> StepResult:
        if stage != self.stage:
            self.begin_stage(stage)
        if batch is None:
            batch = self.next_batch()
        if not len(batch):
            raise ValueError("empty pixel batch")
        w = self.config.weights[stage]
        terms = self.compute_terms(stage, batch, w)
        for name, value in terms.items():
            if not torch.isfinite(value).all():
                raise NonFiniteLossError(f"non-finite loss term '{name}' at {stage} step {self.step_in_stage}")
        total = L.weighted_total(terms, w)
        self.optimizer.zero_grad(set_to_none=True)
        for p in self.fields.parameters():
            p.grad = None
        if total is not None and total.requires_grad:
            total.backward()
        self.optimizer.step()
        self.step_in_stage += 1
        self.global_step += 1
        values = {t: float(terms[t].detach()) if t in terms else 0.0 for t in TERMS}
        return StepResult(stage, self.step_in_stage, values, float(total.detach()) if total is not None else 0.0)

    # -- loss terms --------------------------------------------------------

    def _uniform_points(self, n: int) -> torch.Tensor:
        b = self.dataset.bound
        u = torch.rand(n, 3, generator=self.generator, dtype=self.dtype)
        return (2.0 * u - 1.0) * b

    def _subset(self, pts: torch.Tensor, n: int) -> torch.Tensor:
        flat = pts.reshape(-1, 3)
        idx = torch.randint(0, len(flat), (min(n, len(flat)),), generator=self.generator)
        return flat[idx]

    def _geometry_terms(self, w: LossWeights, sample_points: torch.Tensor, terms: dict):
        sdf = self.fields.sdf
        if w.eik > 0:
            pts = torch.cat([self._uniform_points(self.config.eik_points),
                             self._subset(sample_points.detach(), self.config.eik_points)])
            _, g = sdf.sdf_and_gradient(pts)
            terms["eik"] = L.loss_eikonal(g)
        if w.hess > 0:
            pts = self._subset(sample_points.detach(), self.config.hess_points)
            terms["hess"] = L.loss_hessian(sdf.hessian(pts))
        if w.surf > 0:
            terms["surf"] = L.loss_minimal_surface(sdf(self._uniform_points(self.config.surf_points)),
                                                   self.config.surf_eps)
        if w.pcd > 0 and self.cloud is not None:
            pos, nrm = self.cloud
            idx = torch.randint(0, len(pos), (min(self.config.pcd_points, len(pos)),), generator=self.generator)
            s, g = sdf.sdf_and_gradient(pos[idx])
            terms["pcd"] = L.loss_point_cloud(s, g, nrm[idx])

    def _material_gradients(self, x: torch.Tensor):
        """Central-difference spatial gradients of roughness and metallic."""
        h = self.config.fd_step
        offsets = torch.eye(3, dtype=x.dtype) * h
        pts = torch.cat([x[:, None] + offsets, x[:, None] - offsets], dim=1)  # [H, 6, 3]
        p = self.fields.brdf(pts)
        gr = (p.roughness[:, :3, 0] - p.roughness[:, 3:, 0]) / (2 * h)
        gm = (p.metallic[:, :3, 0] - p.metallic[:, 3:, 0]) / (2 * h)
        return gr, gm

    def _pbr_terms(self, w: LossWeights, x, n, wo, target, grad_norm, terms: dict, differentiable: bool):
        cfg = self.config
        front = (n * wo).sum(-1) > 0
        if not bool(front.any()):
            return
        x, n, wo, target, grad_norm = x[front], n[front], wo[front], target[front], grad_norm[front]
        params = self.fields.brdf(x)
        dirs = sample_hemisphere(n, cfg.incident_samples).directions  # [H, N, 3]
        li = self.fields.light(x[:, None].expand_as(dirs), dirs)
        if w.phys > 0:
            rendered = shade(x, n, wo, params, li, dirs)
            terms["phys"] = L.loss_phys(rendered, target, ldr=not cfg.hdr_mode)
        if w.smth > 0:
            gr, gm = self._material_gradients(x)
            terms["smth"] = L.loss_smoothness(gr, gm, grad_norm)
        if w.lam > 0:
            terms["lam"] = L.loss_lambertian(params.roughness, params.metallic)
        if w.ref > 0:
            k = cfg.ref_subset
            start = (self.global_step * k) % cfg.incident_samples
            idx = (start + torch.arange(k)) % cfg.incident_samples
            pts = torch.randperm(len(x), generator=self.generator)[:cfg.ref_points]
            wi = dirs[pts][:, idx].reshape(-1, 3)
            x1 = x[pts, None].expand(-1, k, -1).reshape(-1, 3)
            n1 = n[pts, None].expand(-1, k, -1).reshape(-1, 3)
            incident = li[pts][:, idx].reshape(-1, 3)
            if differentiable and not cfg.ref_stop_gradient:
                trace = trace_incident(x1, wi, self.fields.sdf, self.fields.radiance, cfg.trace_samples,
                                       self.dataset.bound, generator=self.generator, normal=n1)
            else:
                with torch.no_grad():
                    trace = trace_incident(x1.detach(), wi.detach(), self.fields.sdf, self.fields.radiance,
                                           cfg.trace_samples, self.dataset.bound, generator=self.generator,
                                           normal=n1)
            hit = trace.hit
            if bool(hit.any()):
                traced = trace.traced_radiance[hit]
                if cfg.ref_stop_gradient:
                    traced = traced.detach()
                terms["ref"] = L.loss_ref((incident[hit] - traced).abs().mean(-1))

    def compute_terms(self, stage: str, batch: torch.Tensor, w: LossWeights | None = None) -> dict:
        w = w or self.config.weights[stage]
        cfg = self.config
        terms: dict = {}
        target = self.targets[batch]
        if stage == "mat_init":
            c = self.cache
            self._pbr_terms(w, c.x[batch], c.n[batch], -self.rays.directions[batch], target,
                            self.grad_norms[batch], terms, differentiable=False)
            return terms
        ray = self.rays.ray(batch)
        out = volume_render(ray, self.fields.sdf, self.fields.radiance, cfg.samples_per_ray,
                            generator=self.generator, background=self.background,
                            with_normals=stage == "joint")
        if w.vol > 0:
            terms["vol"] = L.loss_vol(out.color, target, ldr=not cfg.hdr_mode,
                                      radiance_scale=self.fields.radiance.radiance_scale)
        self._geometry_terms(w, out.points, terms)
        if stage == "joint" and bool(out.hit.any()):
            hit = out.hit
            self._pbr_terms(w, out.x_surf[hit], out.n_surf[hit], -ray.direction[hit], target[hit],
                            self.grad_norms[batch][hit], terms, differentiable=True)
        return terms


@dataclass
class TrainingResult:
    fields: FieldSet
    checkpoints: dict  # stage -> path
    log_path: Path | None
    final_losses: dict  # stage -> last StepResult


LOG_COLUMNS = ["step", "stage", "stage_step", *TERMS, *[f"w_{t}" for t in TERMS], "total", "lr"]


def run_training(config: TrainConfig, dataset: SceneDataset, out_dir=None, stages=STAGES,
                 fields: FieldSet | None = None, log_every: int = 1) -> TrainingResult:
    """Run the given stages in order, writing a CSV log and one checkpoint per stage."""
    stages = list(stages)
    for s in stages:
        if s not in STAGES:
            raise ValueError(f"unknown stage {s!r}")
    if stages != sorted(stages, key=STAGES.index):
        raise ValueError("stages must run in order")
    trainer = Trainer(config, dataset, fields)
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
    checkpoints, final, timings = {}, {}, {}
    try:
        for stage in stages:
            n = config.steps[stage]
            if n <= 0:
                continue
            t0 = time.perf_counter()
            trainer.begin_stage(stage)
            w = config.weights[stage]
            lr = trainer.stage_learning_rate(stage)
            log.info("stage %s: %d steps, lr %.3g, active terms %s", stage, n, lr, ",".join(w.active()))
            res = None
            for _ in range(n):
                res = trainer.train_step(stage)
                if writer is not None and (res.step % log_every == 0 or res.step == n):
                    writer.writerow([trainer.global_step, stage, res.step,
                                     *[repr(res.terms[t]) for t in TERMS],
                                     *[repr(getattr(w, t)) for t in TERMS], repr(res.total), repr(lr)])
                if res.step % 100 == 0:
                    log.debug("%s %d total %.5f %s", stage, res.step, res.total,
                              {k: round(v, 5) for k, v in res.terms.items() if v})
            final[stage] = res
            timings[stage] = time.perf_counter() - t0
            if out is not None:
                path = out / f"{stage}.ckpt"
                save_checkpoint(path, trainer.fields, checkpoint_meta(config, dataset, stage))
                checkpoints[stage] = path
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        with open(out / "timings.json", "w") as f:
            json.dump({k: round(v, 3) for k, v in timings.items()}, f, indent=1)
    return TrainingResult(trainer.fields, checkpoints, out / "train_log.csv" if out else None, final)


def checkpoint_meta(config: TrainConfig, dataset: SceneDataset, stage: str) -> dict:
    return {
        "stage": stage,
        "train_config": config.to_dict(),
        "bound": dataset.bound,
        "dataset": str(dataset.root) if dataset.root is not None else None,
        "cameras": [c.to_dict() for c in dataset.cameras],
        "background": list(config.background),
    }

