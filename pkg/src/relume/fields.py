"""Neural fields: SDF, BRDF, incident light and outgoing radiance.

Every field is a small MLP over sinusoidally encoded inputs. The SDF uses a
softplus trunk so that its Hessian is non-trivial, and starts from a
geometric initialization that approximates a sphere.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .brdf import BrdfParams

EXP_CLAMP = (-30.0, 15.0)
OUTPUT_ACTIVATIONS = ("none", "logistic", "exponential", "scaled-logistic")


class PositionalEncoding(nn.Module):
    """``p -> (p, sin(2^k pi p), cos(2^k pi p))`` for ``k = 0..L-1``."""

    def __init__(self, in_dim: int, num_frequencies: int, include_input: bool = True):
        super().__init__()
        self.in_dim = in_dim
        self.num_frequencies = num_frequencies
        self.include_input = include_input

    @property
    def out_dim(self) -> int:
        return self.in_dim * (2 * self.num_frequencies + int(self.include_input))

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        parts = [p] if self.include_input else []
        if self.num_frequencies:
            freqs = (2.0 ** torch.arange(self.num_frequencies, dtype=p.dtype)) * math.pi
            scaled = p[..., None, :] * freqs[:, None]  # [..., L, D]
            enc = torch.stack([torch.sin(scaled), torch.cos(scaled)], dim=-2)  # [..., L, 2, D]
            parts.append(enc.flatten(-3))
        return torch.cat(parts, dim=-1)


def positional_encode(p, num_frequencies: int, include_input: bool = True) -> torch.Tensor:
    p = torch.as_tensor(p, dtype=torch.float64)
    return PositionalEncoding(p.shape[-1], num_frequencies, include_input).to(p.dtype)(p)


class FieldNetwork(nn.Module):
    """MLP with optional input skip connections and a fixed output activation.

    ``skips`` lists hidden-layer indices whose input is concatenated with the
    network input (IDR style, scaled by 1/sqrt(2)).
    """

    def __init__(self, in_dim: int, out_dim: int, widths: Sequence[int], skips: Sequence[int] = (),
                 hidden_activation: str = "relu", output_activation: str = "none",
                 output_scale: float = 1.0):
        super().__init__()
        if output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.widths = list(widths)
        self.skips = set(skips)
        self.output_activation = output_activation
        self.output_scale = float(output_scale)
        layers = []
        prev = in_dim
        for i, w in enumerate(self.widths):
            if i in self.skips:
                prev = prev + in_dim
            layers.append(nn.Linear(prev, w))
            prev = w
        self.hidden = nn.ModuleList(layers)
        self.out = nn.Linear(prev, out_dim)
        if hidden_activation == "relu":
            self.act = nn.ReLU()
        elif hidden_activation == "softplus":
            self.act = nn.Softplus(beta=100)
        else:
            raise ValueError(f"unknown hidden activation {hidden_activation!r}")

    def pre_activation(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for i, layer in enumerate(self.hidden):
            if i in self.skips:
                h = torch.cat([h, x], dim=-1) / math.sqrt(2.0)
            h = self.act(layer(h))
        return self.out(h)

    def activate(self, z: torch.Tensor) -> torch.Tensor:
        if self.output_activation == "logistic":
            return torch.sigmoid(z)
        if self.output_activation == "exponential":
            return torch.exp(torch.clamp(z, *EXP_CLAMP))
        if self.output_activation == "scaled-logistic":
            return self.output_scale * torch.sigmoid(z)
        return z

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.activate(self.pre_activation(x))

    def zero_output(self):
        """Zero the last layer so every pre-activation is exactly 0."""
        with torch.no_grad():
            self.out.weight.zero_()
            self.out.bias.zero_()


@dataclass
class FieldConfig:
    sdf_width: int = 128
    sdf_depth: int = 4
    sdf_skips: list[int] = field(default_factory=lambda: [2])
    brdf_width: int = 128
    brdf_depth: int = 4
    light_width: int = 128
    light_depth: int = 4
    radiance_width: int = 128
    radiance_depth: int = 4
    position_frequencies: int = 6
    direction_frequencies: int = 4
    light_position_frequencies: int = 2
    radiance_scale: float = 5.0
    init_radius: float = 0.5
    beta_init: float = 0.1
    beta_min: float = 1e-4

    def to_dict(self) -> dict:
        return asdict(self)


def _check_unit(d: torch.Tensor):
    tol = max(1e-6, 16 * torch.finfo(d.dtype).eps)
    if d.numel() and (d.norm(dim=-1) - 1.0).abs().max() > tol:
        raise ValueError("direction not normalized")


class SDFField(nn.Module):
    """Signed distance network plus the trainable Laplace scale ``beta``."""

    def __init__(self, width=128, depth=4, skips=(2,), frequencies=6, init_radius=0.5,
                 beta_init=0.1, beta_min=1e-4):
        super().__init__()
        self.encoding = PositionalEncoding(3, frequencies)
        self.net = FieldNetwork(self.encoding.out_dim, 1, [width] * depth, skips,
                                hidden_activation="softplus")
        self.beta_min = beta_min
        self.log_beta = nn.Parameter(torch.tensor(math.log(beta_init - beta_min)))
        self.geometric_init(init_radius)

    @property
    def beta(self) -> torch.Tensor:
        return self.beta_min + torch.exp(self.log_beta)

    def geometric_init(self, radius: float):
        """Weights such that the network approximates ``|x| - radius``.

        Encoded (sin/cos) inputs start with zero weight so the initial field
        only sees raw coordinates.
        """
        net = self.net
        with torch.no_grad():
            in_dim = net.in_dim
            for i, layer in enumerate(net.hidden):
                out_dim = layer.out_features
                nn.init.normal_(layer.weight, 0.0, math.sqrt(2.0) / math.sqrt(out_dim))
                nn.init.zeros_(layer.bias)
                if i == 0:
                    layer.weight[:, 3:] = 0.0
                elif i in net.skips:
                    layer.weight[:, -(in_dim - 3):] = 0.0
            width = net.out.in_features
            nn.init.normal_(net.out.weight, math.sqrt(math.pi) / math.sqrt(width), 1e-4)
            nn.init.constant_(net.out.bias, -radius)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(self.encoding(x))[..., 0]

    def sdf_and_gradient(self, x: torch.Tensor, create_graph: bool = True):
        """Distance and spatial gradient; the gradient stays differentiable."""
        with torch.enable_grad():
            if not x.requires_grad:
                x = x.detach().requires_grad_(True)
            s = self(x)
            (g,) = torch.autograd.grad(s.sum(), x, create_graph=create_graph)
        return s, g

    def hessian(self, x: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
        """``[..., 3, 3]`` Hessian by nested differentiation."""
        with torch.enable_grad():
            x = x.detach().requires_grad_(True)
            _, g = self.sdf_and_gradient(x, create_graph=True)
            rows = []
            for k in range(3):
                (hk,) = torch.autograd.grad(g[..., k].sum(), x, create_graph=create_graph, retain_graph=True)
                rows.append(hk)
        return torch.stack(rows, dim=-2)


class BRDFField(nn.Module):
    def __init__(self, width=128, depth=4, frequencies=6):
        super().__init__()
        self.encoding = PositionalEncoding(3, frequencies)
        self.net = FieldNetwork(self.encoding.out_dim, 5, [width] * depth, output_activation="logistic")

    def forward(self, x: torch.Tensor) -> BrdfParams:
        out = self.net(self.encoding(x))
        return BrdfParams(out[..., :3], out[..., 3:4], out[..., 4:5])


class IncidentLightField(nn.Module):
    """Radiance arriving at ``x`` from direction ``w`` (strictly positive)."""

    def __init__(self, width=128, depth=4, position_frequencies=2, direction_frequencies=4):
        super().__init__()
        self.pos_encoding = PositionalEncoding(3, position_frequencies)
        self.dir_encoding = PositionalEncoding(3, direction_frequencies)
        self.net = FieldNetwork(self.pos_encoding.out_dim + self.dir_encoding.out_dim, 3,
                                [width] * depth, output_activation="exponential")

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        _check_unit(w)
        x, w = torch.broadcast_tensors(x, w)
        return self.net(torch.cat([self.pos_encoding(x), self.dir_encoding(w)], dim=-1))


class OutgoingRadianceField(nn.Module):
    """Radiance leaving ``x`` toward ``w``, in ``[0, radiance_scale]``."""

    def __init__(self, width=128, depth=4, position_frequencies=6, direction_frequencies=4,
                 radiance_scale=5.0):
        super().__init__()
        self.pos_encoding = PositionalEncoding(3, position_frequencies)
        self.dir_encoding = PositionalEncoding(3, direction_frequencies)
        self.net = FieldNetwork(self.pos_encoding.out_dim + self.dir_encoding.out_dim, 3,
                                [width] * depth, output_activation="scaled-logistic",
                                output_scale=radiance_scale)

    @property
    def radiance_scale(self) -> float:
        return self.net.output_scale

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        _check_unit(w)
        x, w = torch.broadcast_tensors(x, w)
        return self.net(torch.cat([self.pos_encoding(x), self.dir_encoding(w)], dim=-1))


class FieldSet(nn.Module):
    """The four fields of a scene."""

    NAMES = ("sdf", "brdf", "light", "radiance")

    def __init__(self, config: FieldConfig | None = None):
        super().__init__()
        c = config or FieldConfig()
        self.config = c
        self.sdf = SDFField(c.sdf_width, c.sdf_depth, c.sdf_skips, c.position_frequencies,
                            c.init_radius, c.beta_init, c.beta_min)
        self.brdf = BRDFField(c.brdf_width, c.brdf_depth, c.position_frequencies)
        self.light = IncidentLightField(c.light_width, c.light_depth, c.light_position_frequencies,
                                        c.direction_frequencies)
        self.radiance = OutgoingRadianceField(c.radiance_width, c.radiance_depth, c.position_frequencies,
                                              c.direction_frequencies, c.radiance_scale)


def sdf_eval(sdf: SDFField, x) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.as_tensor(x, dtype=next(sdf.parameters()).dtype)
    return sdf.sdf_and_gradient(x.clone(), create_graph=True)


def fit_sdf(sdf: SDFField, target: Callable[[np.ndarray], np.ndarray], bound: float, steps: int = 500,
            batch: int = 2048, lr: float = 1e-3, seed: int = 0, surface_points: np.ndarray | None = None,
            eikonal_weight: float = 0.1) -> float:
    """Regress the SDF network onto an analytic signed distance function.

    Points are drawn uniformly in ``[-bound, bound]^3``; when surface samples
    are given, half of every batch is drawn in a thin shell around them.
    Returns the final mean absolute error on the batch.
    """
    rng = np.random.default_rng(seed)
    dtype = next(sdf.parameters()).dtype
    opt = torch.optim.Adam(sdf.net.parameters(), lr=lr)
    err = float("nan")
    for _ in range(steps):
        pts = rng.uniform(-bound, bound, size=(batch, 3))
        if surface_points is not None and len(surface_points):
            idx = rng.integers(0, len(surface_points), batch // 2)
            pts[: batch // 2] = surface_points[idx] + rng.normal(0.0, 0.02, size=(batch // 2, 3))
        x = torch.as_tensor(pts, dtype=dtype)
        y = torch.as_tensor(target(pts), dtype=dtype)
        s, g = sdf.sdf_and_gradient(x, create_graph=True)
        residual = (s - y).abs().mean()
        loss = residual + eikonal_weight * (g.norm(dim=-1) - 1.0).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        err = float(residual.detach())
    return err
