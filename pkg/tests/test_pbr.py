import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import AnalyticSDF
from relume.brdf import BrdfParams, brdf_lambertian
from relume.fields import IncidentLightField, OutgoingRadianceField
from relume.pbr import (IncidentTraceResult, fibonacci_hemisphere, interreflection_residual, render_pbr,
                        rotation_to, sample_hemisphere, trace_incident)

t = lambda x: torch.tensor(x, dtype=torch.float64)
UP = t([0.0, 0.0, 1.0])


def random_unit(seed, n=1):
    g = torch.Generator().manual_seed(seed)
    return torch.nn.functional.normalize(torch.randn(n, 3, generator=g, dtype=torch.float64), dim=-1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 300))
def test_samples_in_upper_hemisphere(seed, count):
    n = random_unit(seed)[0]
    d = sample_hemisphere(n, count).directions
    assert d.shape == (count, 3)
    assert torch.all(d @ n > 0)
    assert torch.allclose(d.norm(dim=-1), torch.ones(count, dtype=torch.float64))


def test_antipodal_normal():
    d = sample_hemisphere(t([0.0, 0.0, -1.0]), 64).directions
    assert torch.all(d[:, 2] < 0)


def test_mean_cosine_is_half():
    for seed in range(10):
        n = random_unit(seed)[0]
        assert float((sample_hemisphere(n, 128).directions @ n).mean()) == pytest.approx(0.5, abs=0.02)


def test_deterministic_for_fixed_inputs():
    n = random_unit(3)[0]
    assert torch.equal(sample_hemisphere(n, 100).directions, sample_hemisphere(n, 100).directions)


def test_rotation_equivariance():
    n = random_unit(4)[0]
    m = random_unit(5)[0]
    # rotation taking n to m, built from the two minimal rotations
    r = rotation_to(m) @ rotation_to(n).T
    a = sample_hemisphere(n, 128).directions @ r.T
    b = sample_hemisphere(m, 128).directions
    # same lattice up to a twist about m: compare as sets of cosines and as sorted point sets
    assert torch.allclose(a @ m, b @ m, atol=1e-6)
    assert torch.allclose(torch.sort(a @ m).values, torch.sort(b @ m).values, atol=1e-6)


def test_rotation_matrix_is_proper():
    for seed in range(20):
        n = random_unit(seed)[0]
        r = rotation_to(n)
        assert torch.allclose(r @ r.T, torch.eye(3, dtype=torch.float64), atol=1e-12)
        assert float(torch.linalg.det(r)) == pytest.approx(1.0, abs=1e-12)
        assert torch.allclose(r @ UP, n, atol=1e-12)


def test_too_few_samples_rejected():
    with pytest.raises(ValueError):
        sample_hemisphere(UP, 3)


def test_fibonacci_cosines_uniform():
    z = fibonacci_hemisphere(100)[:, 2]
    assert torch.allclose(torch.sort(z).values, (torch.arange(100, dtype=torch.float64) + 0.5) / 100)


def white():
    return BrdfParams.of([1.0, 1.0, 1.0], 1.0, 0.0)


def test_furnace():
    x = torch.zeros(3, dtype=torch.float64)
    for c in (0.5, 1.0, 3.0):
        out = render_pbr(x, UP, UP, white(), [c, c, c], 128, brdf=brdf_lambertian)
        assert torch.allclose(out, torch.full((3,), c, dtype=torch.float64), rtol=0.02)
    # full model with its specular lobe adds a few percent at normal view
    full = render_pbr(x, UP, UP, white(), [1.0, 1.0, 1.0], 128)
    assert torch.all((full > 1.0) & (full < 1.05))


def test_furnace_converges_with_samples():
    x = torch.zeros(3, dtype=torch.float64)
    wo = t([0.3, 0.0, math.sqrt(0.91)])
    a = render_pbr(x, UP, wo, white(), [1.0] * 3, 128)
    b = render_pbr(x, UP, wo, white(), [1.0] * 3, 256)
    assert torch.all((a - b).abs() / b < 0.01)


def test_lambertian_albedo():
    p = BrdfParams.of([0.8, 0.2, 0.1], 1.0, 0.0)
    out = render_pbr(torch.zeros(3, dtype=torch.float64), UP, UP, p, [2.0] * 3, 128, brdf=brdf_lambertian)
    assert torch.allclose(out, t([1.6, 0.4, 0.2]), rtol=0.02)


def test_zero_light_is_black():
    p = BrdfParams.of([0.8, 0.2, 0.1], 0.4, 0.3)
    assert torch.equal(render_pbr(torch.zeros(3, dtype=torch.float64), UP, UP, p, [0.0] * 3), torch.zeros(3, dtype=torch.float64))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 20.0), st.integers(0, 1000))
def test_linear_in_light(k, seed):
    rng = np.random.default_rng(seed)
    p = BrdfParams.of(rng.uniform(0, 1, 3), rng.uniform(0, 1), rng.uniform(0, 1))
    n = random_unit(seed)[0]
    wo = torch.nn.functional.normalize(n + 0.3 * random_unit(seed + 1)[0], dim=-1)
    x = torch.zeros(3, dtype=torch.float64)
    base = render_pbr(x, n, wo, p, [1.0] * 3)
    scaled = render_pbr(x, n, wo, p, [k] * 3)
    assert torch.all(torch.isfinite(base)) and torch.all(base >= 0)
    assert torch.allclose(scaled, k * base, rtol=1e-12, atol=0)


def test_light_field_is_queried_per_direction():
    light = lambda x, w: w[..., 2:3].clamp_min(0).expand(*w.shape[:-1], 3)
    out = render_pbr(torch.zeros(3, dtype=torch.float64), UP, UP, white(), light, 256, brdf=brdf_lambertian)
    # (1/pi) * integral of cos^2 over the hemisphere = 2/3
    assert torch.allclose(out, torch.full((3,), 2 / 3, dtype=torch.float64), rtol=0.01)


def test_backfacing_rejected():
    with pytest.raises(ValueError, match="backfacing"):
        render_pbr(torch.zeros(3, dtype=torch.float64), UP, -UP, white(), [1.0] * 3)


def test_differentiable_in_light_and_normal():
    light = IncidentLightField(width=8, depth=1).double()
    n = t([0.1, 0.0, 1.0])
    n = (n / n.norm()).requires_grad_(True)
    out = render_pbr(torch.zeros(3, dtype=torch.float64), n, UP, white(), light, 32)
    out.sum().backward()
    assert n.grad is not None and light.net.hidden[0].weight.grad is not None


def two_planes(gap=1.0, beta=0.005):
    # floor at z = 0 facing up, ceiling at z = gap facing down
    return AnalyticSDF(lambda x: torch.minimum(x[..., 2], gap - x[..., 2]), beta)


def test_trace_hits_opposite_plane():
    x1 = t([[0.0, 0.0, 0.0], [0.2, -0.1, 0.0]])
    wi = torch.nn.functional.normalize(t([[0.0, 0.0, 1.0], [0.3, 0.2, 1.0]]), dim=-1)
    out = trace_incident(x1, wi, two_planes(), lambda x, w: torch.ones_like(x), num_samples=128, bound=3.0)
    assert torch.all(out.hit)
    voxel = 2 * 1.5 / 64
    assert torch.all((out.x2.detach()[:, 2] - 1.0).abs() < 2 * voxel)


def test_trace_to_open_sky_misses():
    floor = AnalyticSDF(lambda x: x[..., 2], 0.005)
    out = trace_incident(t([[0.0, 0.0, 0.0]]), t([[0.0, 0.0, 1.0]]), floor, lambda x, w: torch.ones_like(x),
                         num_samples=64, bound=3.0)
    assert not bool(out.hit)


def test_trace_of_constant_radiance_field():
    torch.manual_seed(0)
    rad = OutgoingRadianceField(width=16, depth=2).double()
    opt = torch.optim.Adam(rad.parameters(), lr=1e-2)
    g = torch.Generator().manual_seed(0)
    for _ in range(300):
        x = torch.rand(256, 3, generator=g, dtype=torch.float64) * 2 - 1
        w = torch.nn.functional.normalize(torch.randn(256, 3, generator=g, dtype=torch.float64), dim=-1)
        loss = (rad(x, w) - 1.0).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        out = trace_incident(t([[0.0, 0.0, 0.0]]), t([[0.0, 0.0, 1.0]]), two_planes(), rad, num_samples=128, bound=3.0)
    assert bool(out.hit)
    assert torch.allclose(out.traced_radiance, torch.ones(1, 3, dtype=torch.float64), atol=0.02)


def _fake_trace(value, hit=True):
    v = torch.full((1, 3), value, dtype=torch.float64)
    return IncidentTraceResult(torch.tensor([hit]), torch.zeros(1, 3, dtype=torch.float64), v, torch.ones(1))


def test_residual_examples():
    assert float(interreflection_residual(torch.full((1, 3), 1.5, dtype=torch.float64), _fake_trace(1.5))) == 0.0
    assert float(interreflection_residual(torch.full((1, 3), 2.0, dtype=torch.float64), _fake_trace(1.0))) == 1.0
    with pytest.raises(ValueError, match="missed"):
        interreflection_residual(torch.ones(1, 3, dtype=torch.float64), _fake_trace(1.0, hit=False))


def test_residual_reaches_both_fields():
    torch.manual_seed(1)
    light = IncidentLightField(width=8, depth=1).double()
    rad = OutgoingRadianceField(width=8, depth=1).double()
    x1 = t([[0.0, 0.0, 0.0]])
    wi = t([[0.0, 0.0, 1.0]])
    tr = trace_incident(x1, wi, two_planes(), rad, 32, bound=3.0)
    interreflection_residual(light(x1, wi), tr).sum().backward()
    assert light.net.hidden[0].weight.grad.abs().sum() > 0
    assert rad.net.hidden[0].weight.grad.abs().sum() > 0


def test_residual_decreases_under_optimization():
    torch.manual_seed(2)
    light = IncidentLightField(width=16, depth=2).double()
    rad = OutgoingRadianceField(width=16, depth=2).double()
    # pull the radiance field away from the light field's initial guess
    with torch.no_grad():
        rad.net.out.bias.fill_(2.0)
    scene = two_planes()
    g = torch.Generator().manual_seed(0)
    x1 = torch.cat([torch.rand(64, 2, generator=g, dtype=torch.float64) - 0.5, torch.zeros(64, 1, dtype=torch.float64)], -1)
    wi = sample_hemisphere(UP, 16).directions
    wi = wi[wi[:, 2] > 0.5]  # steep enough to reach the ceiling inside the bound
    k = len(wi)
    x1 = x1[:, None].expand(64, k, 3).reshape(-1, 3)
    wi = wi[None].expand(64, k, 3).reshape(-1, 3)
    opt = torch.optim.Adam(list(light.parameters()) + list(rad.parameters()), lr=1e-2)

    def residual():
        tr = trace_incident(x1, wi, scene, rad, 32, bound=3.0)
        return interreflection_residual(light(x1, wi), tr).mean()

    first = float(residual().detach())
    for _ in range(200):
        loss = residual()
        opt.zero_grad()
        loss.backward()
        opt.step()
    final = float(residual().detach())
    assert final < first / 5
