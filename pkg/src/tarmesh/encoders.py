"""Global temporal encoder (transformer + weighted average + disentangled
initial regressor) and local temporal encoder (bidirectional ConvGRU)."""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
from torch import nn

from .bodymodel import BodyParams
from .diffcore import ops
from .layers import GroupedLinear, init_head

N_STATES = 26
# state order shared with the marker set and the refinement GRUs
STATE_NAMES = ("global_orient",) + tuple(f"joint{j}" for j in range(1, 24)) + ("shape", "camera")
CAM_BIAS = (1.0, 0.0, 0.0)


class GlobalTemporalEncoder(nn.Module):
    def __init__(self, frames: int, in_dim: int, model_dim: int = 128, layers: int = 4, heads: int = 4,
                 mlp_dim: int = 256, positional: str = "learned"):
        super().__init__()
        self.frames = frames
        self.in_proj = nn.Linear(in_dim, model_dim) if in_dim != model_dim else None
        self.pos = nn.Parameter(torch.randn(frames, model_dim) * 0.02) if positional == "learned" else None
        layer = nn.TransformerEncoderLayer(model_dim, heads, mlp_dim, dropout=0.0, batch_first=True,
                                           norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(model_dim)
        # weighted-average kernel over the frame axis, softmax-normalized
        self.frame_logits = nn.Parameter(torch.zeros(frames))

    def encode_frames(self, F: torch.Tensor) -> torch.Tensor:
        if F.shape[-2] != self.frames:
            raise ValueError(f"expected {self.frames} frames, got {F.shape[-2]}")
        x = F if self.in_proj is None else self.in_proj(F)
        if self.pos is not None:
            x = x + self.pos
        return self.norm(self.encoder(x))

    def forward(self, F: torch.Tensor) -> torch.Tensor:
        """(B, T, d) -> (B, model_dim)."""
        x = self.encode_frames(F)
        w = ops.softmax(self.frame_logits, dim=0)
        return ops.conv1d_temporal(x, w)[:, 0]


class InitialRegressor(nn.Module):
    """Global feature -> 26 hidden states -> per-state MLP heads -> initial parameters."""

    def __init__(self, in_dim: int, state_dim: int = 64, hidden: int = 64, cliff_dim: int = 3,
                 head_init: str = "small"):
        super().__init__()
        self.state_dim = state_dim
        self.to_states = nn.Linear(in_dim, N_STATES * state_dim)
        d = state_dim + cliff_dim
        self.rot1 = GroupedLinear(24, d, hidden)
        self.rot2 = GroupedLinear(24, hidden, 3)
        self.shape1 = GroupedLinear(1, d, hidden)
        self.shape2 = GroupedLinear(1, hidden, 10)
        self.cam1 = GroupedLinear(1, d, hidden)
        self.cam2 = GroupedLinear(1, hidden, 3)
        for head in (self.rot2, self.shape2, self.cam2):
            init_head(head.weight, head.bias, head_init)
        self.register_buffer("cam_bias", torch.tensor(CAM_BIAS), persistent=False)

    def forward(self, f: torch.Tensor, cliff: torch.Tensor):
        bank = self.to_states(f).unflatten(-1, (N_STATES, self.state_dim))
        x = torch.cat([bank, cliff[..., None, :].expand(bank.shape[:-1] + (cliff.shape[-1],))], dim=-1)
        theta = self.rot2(torch.relu(self.rot1(x[..., :24, :])))
        beta = self.shape2(torch.relu(self.shape1(x[..., 24:25, :])))[..., 0, :]
        cam = self.cam2(torch.relu(self.cam1(x[..., 25:26, :])))[..., 0, :] + self.cam_bias.to(f.dtype)
        return BodyParams(theta, beta, cam), bank


class GateTrace(NamedTuple):
    update: torch.Tensor
    reset: torch.Tensor
    candidate: torch.Tensor


class ConvGRUCell(nn.Module):
    """Convolutional GRU over D x h x w maps, bias free.

    update = sigmoid(W_z*m + U_z*h), reset = sigmoid(W_r*m + U_r*h),
    cand = tanh(W*m + U*(reset . h)), h' = (1 - update) . h + update . cand.
    With ``paper_literal_eq2`` the reset gate reuses U_z.
    """

    def __init__(self, channels: int, kernel: int = 3, paper_literal_eq2: bool = False):
        super().__init__()
        self.kernel = kernel
        self.literal = paper_literal_eq2
        shape = (channels, channels, kernel, kernel)
        names = ["w_z", "u_z", "w_r", "w", "u"] + ([] if paper_literal_eq2 else ["u_r"])
        bound = 1.0 / math.sqrt(channels * kernel * kernel)
        for n in names:
            setattr(self, n, nn.Parameter(torch.empty(shape).uniform_(-bound, bound)))

    def forward(self, m: torch.Tensor, h: torch.Tensor, trace: list | None = None) -> torch.Tensor:
        if m.shape != h.shape:
            raise ops.ShapeError("convgru_step", tuple(m.shape), tuple(h.shape))
        pad = self.kernel // 2
        c = m.shape[1]
        u_r = self.u_z if self.literal else self.u_r
        xm = ops.conv2d(m, torch.cat([self.w_z, self.w_r, self.w]), padding=pad)
        xh = ops.conv2d(h, torch.cat([self.u_z, u_r]), padding=pad)
        z = torch.sigmoid(xm[:, :c] + xh[:, :c])
        r = torch.sigmoid(xm[:, c:2 * c] + xh[:, c:])
        cand = torch.tanh(xm[:, 2 * c:] + ops.conv2d(r * h, self.u, padding=pad))
        if trace is not None:
            trace.append(GateTrace(z, r, cand))
        return (1 - z) * h + z * cand


def _down_up(channels: int, levels: int):
    if levels == 0:
        down = [nn.Conv2d(channels, channels, 3, 1, 1)]
        up = [nn.Conv2d(2 * channels, 2 * channels, 3, 1, 1)]
    else:
        down = [nn.Conv2d(channels, channels, 3, 2, 1) for _ in range(levels)]
        up = [nn.ConvTranspose2d(2 * channels, 2 * channels, 4, 2, 1) for _ in range(levels)]
    return nn.ModuleList(down), nn.ModuleList(up)


def _chain(layers, x):
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < len(layers) - 1:
            x = torch.relu(x)
    return x


class LocalTemporalEncoder(nn.Module):
    """Bidirectional ConvGRU over an L-frame window centered on the mid-frame.

    The past branch reads window frames 0..tau forward, the future branch reads
    L-1..tau backward, both from zero hidden maps; the two final hidden maps are
    concatenated and projected back to D channels.
    """

    def __init__(self, channels: int, window: int = 5, kernel: int = 3, variant: str = "full",
                 downsample_size: int | None = None, feature_size: int = 16,
                 paper_literal_eq2: bool = False):
        super().__init__()
        if window % 2 == 0 or window < 1:
            raise ValueError(f"window length must be odd, got {window}")
        self.window = window
        self.tau = (window - 1) // 2
        self.past = ConvGRUCell(channels, kernel, paper_literal_eq2)
        self.future = ConvGRUCell(channels, kernel, paper_literal_eq2)
        self.proj = nn.Conv2d(2 * channels, channels, 3, 1, 1)
        self.down = self.up = None
        if variant == "downsampled":
            S = downsample_size
            if S is None or S <= 0 or feature_size % S:
                raise ValueError(f"hidden size {S} does not divide feature size {feature_size}")
            ratio = feature_size // S
            if ratio & (ratio - 1):
                raise ValueError(f"feature size / hidden size must be a power of two, got {ratio}")
            self.down, self.up = _down_up(channels, int(math.log2(ratio)))
        elif variant != "full":
            raise ValueError(f"unknown LTE variant {variant!r}")

    def select_window(self, M: torch.Tensor) -> torch.Tensor:
        T = M.shape[1]
        if self.window > T:
            raise ValueError(f"window {self.window} longer than sequence {T}")
        mid = (T - 1) // 2
        return M[:, mid - self.tau: mid + self.tau + 1]

    def branches(self, win: torch.Tensor, trace: dict | None = None):
        """Run both GRU branches over a (B, L, D, h, w) window -> (m_p, m_f)."""
        h_p = torch.zeros_like(win[:, 0])
        h_f = torch.zeros_like(win[:, 0])
        tp = None if trace is None else trace.setdefault("past", [])
        tf = None if trace is None else trace.setdefault("future", [])
        for t in range(self.tau + 1):
            h_p = self.past(win[:, t], h_p, tp)
        for t in range(self.window - 1, self.tau - 1, -1):
            h_f = self.future(win[:, t], h_f, tf)
        return h_p, h_f

    def forward(self, M: torch.Tensor, trace: dict | None = None) -> torch.Tensor:
        """(B, T, D, h, w) -> (B, D, h, w)."""
        win = self.select_window(M)
        if self.down is not None:
            b, L = win.shape[:2]
            win = _chain(self.down, win.flatten(0, 1))
            win = win.unflatten(0, (b, L))
        h_p, h_f = self.branches(win, trace)
        x = torch.cat([h_p, h_f], dim=1)
        if self.up is not None:
            x = _chain(self.up, x)
        return self.proj(x)
