import torch


class AnalyticSDF(torch.nn.Module):
    """Closed-form distance function with the interface the renderers expect."""

    def __init__(self, fn, beta=0.01):
        super().__init__()
        self.fn = fn
        self.log_beta = torch.nn.Parameter(torch.tensor(float(beta), dtype=torch.float64).log())

    @property
    def beta(self):
        return torch.exp(self.log_beta)

    def forward(self, x):
        return self.fn(x)

    def sdf_and_gradient(self, x, create_graph=True):
        with torch.enable_grad():
            if not x.requires_grad:
                x = x.detach().requires_grad_(True)
            s = self(x)
            (g,) = torch.autograd.grad(s.sum(), x, create_graph=create_graph)
        return s, g


def sphere_sdf(radius=1.0, beta=0.01):
    return AnalyticSDF(lambda x: x.norm(dim=-1) - radius, beta)


def plane_sdf(normal, offset, beta=0.01):
    n = torch.tensor(normal, dtype=torch.float64)
    return AnalyticSDF(lambda x: x @ n - offset, beta)


import pytest  # noqa: E402

from relume.scene import synthetic as S  # noqa: E402
from relume.scene.dataset import OrientedPointCloud, load_dataset, write_dataset  # noqa: E402


def synth_dataset(root, scene, views, size, samples=32, hdr=True):
    cams = S.scene_cameras(scene, views, size)
    images = [S.render_ground_truth(scene, c, samples=samples) for c in cams]
    maps = [S.material_maps(scene, c) for c in cams]
    pts, nrm = scene.sample_surface(500, seed=0)
    write_dataset(root, cams, images, hdr=hdr, bound=scene.bound, point_cloud=OrientedPointCloud(pts, nrm),
                  materials={name: [m[k] for m in maps] for k, name in enumerate(("basecolor", "roughness", "metallic"))},
                  scene_description=scene.to_dict())
    return load_dataset(root)


@pytest.fixture(scope="session")
def tiny_sphere(tmp_path_factory):
    return synth_dataset(tmp_path_factory.mktemp("tiny_sphere"), S.sphere_scene(), views=6, size=12)


@pytest.fixture(scope="session")
def tiny_planes(tmp_path_factory):
    return synth_dataset(tmp_path_factory.mktemp("tiny_planes"), S.two_planes_scene(), views=6, size=12)


TINY_FIELDS = dict(sdf_width=16, sdf_depth=3, sdf_skips=[1], brdf_width=16, brdf_depth=2, light_width=16,
                   light_depth=2, radiance_width=16, radiance_depth=2)


def tiny_config(**overrides):
    from relume.trainer import TrainConfig

    base = dict(rays_per_step=32, samples_per_ray=16, incident_samples=16, ref_subset=4, ref_points=4,
                trace_samples=8, steps={"sdf_init": 3, "mat_init": 3, "joint": 3}, eik_points=16, hess_points=8,
                surf_points=16, pcd_points=16, cache_samples=16, fields=dict(TINY_FIELDS))
    base.update(overrides)
    return TrainConfig.from_dict(base)


ACCEPTANCE: dict = {}


def record_acceptance(key, title, passed, detail):
    ACCEPTANCE[key] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in range(1, 11):
        if key not in ACCEPTANCE:
            terminalreporter.write_line(f"[FAIL] {key}. no result recorded (test errored, was skipped or not selected)")
            continue
        title, passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {key}. {title}: {detail}")
