from __future__ import annotations

from typing import Callable, Mapping, Sequence

import torch
from torch.overrides import TorchFunctionMode

from .errors import NonDeterministicError

# ops with a derivative jump: relu/clamp switch branch, floor changes the bilinear cell
_BRANCHING = {
    torch.relu, torch.nn.functional.relu, torch.Tensor.relu,
    torch.clamp, torch.Tensor.clamp, torch.clip, torch.Tensor.clip,
}
_STEPS = {torch.floor, torch.Tensor.floor}


class BranchProbe(TorchFunctionMode):
    """Records which side of every relu/clamp kink and which floor cell each
    element lands on while active, so two evaluations can be compared."""

    def __init__(self):
        super().__init__()
        self.pattern: list[torch.Tensor] = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        if func in _BRANCHING:
            self.pattern.append((out == args[0]).detach())
        elif func in _STEPS:
            self.pattern.append(out.detach().clone())
        return out


def _probe(f: Callable[[], torch.Tensor]):
    with BranchProbe() as probe:
        value = f().item()
    return value, probe.pattern


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and torch.equal(x, y) for x, y in zip(a, b))


class GradCheckResult(dict):
    """Max relative error per parameter; ``skipped`` counts probed entries
    that had no kink-free stencil and ``checked`` those that were compared."""

    def __init__(self, errors, checked=None, skipped=None):
        super().__init__(errors)
        self.checked = dict(checked or {})
        self.skipped = dict(skipped or {})


def _named(params) -> list[tuple[str, torch.Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    out = []
    for i, p in enumerate(params):
        out.append(p if isinstance(p, tuple) else (f"param{i}", p))
    return out


def analytic_grads(f: Callable[[], torch.Tensor], params) -> dict[str, torch.Tensor]:
    named = _named(params)
    loss = f()
    if loss.dim() != 0 and loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g.detach().clone())
            for (n, p), g in zip(named, grads)}


def grad_check(
    f: Callable[[], torch.Tensor],
    params,
    eps: float = 1e-6,
    floor: float = 1e-6,
    rel_floor: float = 0.0,
    max_entries: int | None = None,
    generator: torch.Generator | None = None,
    eps_ladder: Sequence[float] | None = None,
) -> GradCheckResult:
    """Compare taped gradients of ``f`` against central finite differences.

    ``f`` takes no arguments and closes over ``params`` (leaf tensors with
    ``requires_grad``), which are perturbed in place and restored. Returns the
    max relative error per parameter, measured as
    ``|a - n| / max(|a|, |n|, floor, rel_floor * max|a_param|)``, so with a
    nonzero ``rel_floor`` entries far below the parameter's gradient scale are
    judged against that scale instead of their own. ``max_entries`` caps how many randomly
    chosen coordinates of each parameter are probed.

    With ``eps_ladder`` each entry uses the largest step whose stencil points
    (at +-h and +-2h) take the same relu/clamp/floor branches as the base
    point, and the two central differences are Richardson-extrapolated to
    fourth order. Entries where every step crosses a kink are skipped and counted.
    """
    ladder = [eps] if eps_ladder is None else sorted(eps_ladder, reverse=True)
    if not ladder or min(ladder) <= 0:
        raise ValueError("eps must be positive")
    named = _named(params)
    with torch.no_grad():
        v0 = f().detach().clone()
        v1 = f().detach().clone()
    if not torch.equal(v0, v1):
        raise NonDeterministicError(f"f is not deterministic: {v0.item()!r} != {v1.item()!r}")

    grads = analytic_grads(f, named)
    errors: dict[str, float] = {}
    checked: dict[str, int] = {}
    skipped: dict[str, int] = {}
    with torch.no_grad():
        base = _probe(f)[1] if eps_ladder is not None else None
    for name, p in named:
        n = p.numel()
        if max_entries is not None and n > max_entries:
            idx = torch.randperm(n, generator=generator)[:max_entries].tolist()
        else:
            idx = range(n)
        flat = p.data.view(-1)
        g = grads[name].reshape(-1)
        worst = 0.0
        denom_floor = max(floor, rel_floor * g.abs().max().item()) if g.numel() else floor
        checked[name] = skipped[name] = 0
        for i in idx:
            num = _central_difference(f, flat, i, ladder, base)
            if num is None:
                skipped[name] += 1
                continue
            checked[name] += 1
            ana = g[i].item()
            rel = abs(ana - num) / max(abs(ana), abs(num), denom_floor)
            worst = max(worst, rel)
        errors[name] = worst
    with torch.no_grad():
        v2 = f().detach()
    if not torch.equal(v0, v2):
        raise NonDeterministicError("f changed after restoring parameters")
    return GradCheckResult(errors, checked, skipped)


def _central_difference(f, flat: torch.Tensor, i: int, ladder, base) -> float | None:
    """Plain central difference at ``ladder[0]`` without ``base``; otherwise the
    Richardson-extrapolated (4 D(h) - D(2h)) / 3 at the largest kink-free h."""
    orig = flat[i].item()

    def at(x):
        with torch.no_grad():
            flat[i] = x
            return _probe(f) if base is not None else (f().item(), None)

    try:
        if base is None:
            h = ladder[0]
            return (at(orig + h)[0] - at(orig - h)[0]) / (2 * h)
        for h in ladder:
            pts = [at(orig + k * h) for k in (1, -1, 2, -2)]
            if all(_same_branches(base, b) for _, b in pts):
                (f1, _), (m1, _), (f2, _), (m2, _) = pts
                return (8 * (f1 - m1) - (f2 - m2)) / (12 * h)
        return None
    finally:
        with torch.no_grad():
            flat[i] = orig
