"""B-spline KAN layer.

Every (input, output) edge carries phi(x) = w_b * silu(x) + w_s * sum_j c_j B_j(x)
with cubic B-splines on a uniform grid.  Inputs are clamped to the grid
range before the spline path; the base path sees the raw input.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def uniform_knots(grid_size: int, order: int, grid_range: float) -> torch.Tensor:
    """Knot vector of the uniform grid on [-grid_range, grid_range], extended by ``order`` on each side."""
    h = 2.0 * grid_range / grid_size
    return torch.arange(-order, grid_size + order + 1, dtype=torch.float64) * h - grid_range


def bspline_basis(x: torch.Tensor, knots: torch.Tensor, order: int) -> torch.Tensor:
    """Cox-de Boor recursion; returns shape ``x.shape + (len(knots) - order - 1,)``."""
    knots = knots.to(x.dtype)
    x = x.unsqueeze(-1)
    bases = ((x >= knots[:-1]) & (x < knots[1:])).to(x.dtype)
    for k in range(1, order + 1):
        left = (x - knots[: -(k + 1)]) / (knots[k:-1] - knots[: -(k + 1)]) * bases[..., :-1]
        right = (knots[k + 1:] - x) / (knots[k + 1:] - knots[1:-k]) * bases[..., 1:]
        bases = left + right
    return bases


class KanLayer(nn.Module):
    def __init__(self, in_width: int, out_width: int, grid_size: int = 5, order: int = 3,
                 grid_range: float = 1.0, spline_init_std: float = 0.1):
        super().__init__()
        self.in_width = in_width
        self.out_width = out_width
        self.grid_size = grid_size
        self.order = order
        self.grid_range = grid_range
        self.register_buffer("knots", uniform_knots(grid_size, order, grid_range), persistent=False)
        n_basis = grid_size + order
        self.coef = nn.Parameter(torch.empty(out_width, in_width, n_basis))
        self.base_weight = nn.Parameter(torch.empty(out_width, in_width))
        self.spline_weight = nn.Parameter(torch.empty(out_width, in_width))
        nn.init.kaiming_uniform_(self.base_weight, a=math.sqrt(5))
        nn.init.normal_(self.coef, std=spline_init_std)
        nn.init.ones_(self.spline_weight)

    def basis(self, x: torch.Tensor) -> torch.Tensor:
        return bspline_basis(x.clamp(-self.grid_range, self.grid_range), self.knots, self.order)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise FloatingPointError("non-finite input to KAN layer")
        shape = x.shape
        x = x.reshape(-1, self.in_width)
        base = F.linear(F.silu(x), self.base_weight)
        weighted = self.coef * self.spline_weight.unsqueeze(-1)
        spline = F.linear(self.basis(x).reshape(x.shape[0], -1), weighted.reshape(self.out_width, -1))
        return (base + spline).reshape(*shape[:-1], self.out_width)


def kan_apply(layer: KanLayer, x: torch.Tensor) -> torch.Tensor:
    return layer(x)
