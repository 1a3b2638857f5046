from __future__ import annotations

import torch

from .errors import NonFiniteError


class Adam:
    """Adam over named parameters; refuses to step on non-finite gradients."""

    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.named = [(n, p) for n, p in named_params if p.requires_grad]
        self.opt = torch.optim.Adam([p for _, p in self.named], lr=lr, betas=betas, eps=eps,
                                    weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for _, p in self.named:
            if p.grad is not None:
                p.grad.zero_()

    def step(self) -> None:
        for n, p in self.named:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient in parameter {n}")
        self.opt.step()

    def state_tensors(self) -> dict[str, torch.Tensor]:
        """Flat name -> tensor view of the moment state, for checkpointing."""
        out = {}
        for n, p in self.named:
            st = self.opt.state.get(p)
            if not st:
                continue
            out[f"adam/{n}/exp_avg"] = st["exp_avg"]
            out[f"adam/{n}/exp_avg_sq"] = st["exp_avg_sq"]
            out[f"adam/{n}/step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(1)
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        for n, p in self.named:
            key = f"adam/{n}/exp_avg"
            if key not in tensors:
                continue
            self.opt.state[p] = {
                "step": torch.tensor(float(tensors[f"adam/{n}/step"].reshape(-1)[0])),
                "exp_avg": tensors[key].to(p.dtype).clone(),
                "exp_avg_sq": tensors[f"adam/{n}/exp_avg_sq"].to(p.dtype).clone(),
            }
