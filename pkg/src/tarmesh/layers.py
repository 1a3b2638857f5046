"""Groups of independent small layers evaluated in one batched contraction."""
from __future__ import annotations

import math

import torch
from torch import nn


def init_head(weight: torch.Tensor, bias: torch.Tensor | None, mode: str) -> None:
    """Initialization for output heads: ``zero``, ``small`` (xavier, gain 0.01) or ``default``."""
    with torch.no_grad():
        if mode == "zero":
            weight.zero_()
        elif mode == "small":
            for g in range(weight.shape[0]):
                nn.init.xavier_uniform_(weight[g], gain=0.01)
        elif mode != "default":
            raise ValueError(f"unknown head init {mode!r}")
        if bias is not None and mode != "default":
            bias.zero_()


class GroupedLinear(nn.Module):
    """G independent linear maps. Input (..., G, in) or shared (..., in); output (..., G, out)."""

    def __init__(self, groups: int, in_dim: int, out_dim: int, bias: bool = True):
        super().__init__()
        self.groups, self.in_dim, self.out_dim = groups, in_dim, out_dim
        bound = 1.0 / math.sqrt(in_dim)
        self.weight = nn.Parameter(torch.empty(groups, in_dim, out_dim).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(groups, out_dim).uniform_(-bound, bound)) if bias else None

    def forward(self, x: torch.Tensor, shared: bool = False) -> torch.Tensor:
        if shared:
            y = torch.einsum("...i,gio->...go", x, self.weight)
        else:
            y = torch.einsum("...gi,gio->...go", x, self.weight)
        return y if self.bias is None else y + self.bias


class GroupedGRU(nn.Module):
    """G independent GRU cells (standard scalar gates) updated in parallel."""

    def __init__(self, groups: int, in_dim: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.inp = GroupedLinear(groups, in_dim, 3 * hidden)
        self.rec = GroupedLinear(groups, hidden, 3 * hidden)

    def forward(self, x: torch.Tensor, h: torch.Tensor, shared: bool = False) -> torch.Tensor:
        gi = self.inp(x, shared=shared)
        gh = self.rec(h)
        ir, iz, in_ = gi.split(self.hidden, dim=-1)
        hr, hz, hn = gh.split(self.hidden, dim=-1)
        r = torch.sigmoid(ir + hr)
        z = torch.sigmoid(iz + hz)
        n = torch.tanh(in_ + r * hn)
        return (1 - z) * n + z * h
