"""Reverse-mode gradients, a finite-difference checker and first-order optimizers.

Forward passes are recorded by torch autograd; :func:`backward` reads the
recorded graph back into a name -> gradient mapping.  The finite-difference
harness only ever calls the forward function, so it stays independent of the
backward pass it verifies.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss; parameters not on the graph get exact zeros."""
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    names = list(params)
    grads = torch.autograd.grad(loss.reshape(()), [params[n] for n in names], allow_unused=True)
    return {n: torch.zeros_like(params[n]) if g is None else g for n, g in zip(names, grads)}


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    checked: int
    worst_index: int


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_json(self) -> str:
        d = asdict(self)
        d["passed"] = self.passed
        d["max_rel_error"] = self.max_rel_error
        return json.dumps(d, indent=2)


def rel_error(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), 1e-8)


def finite_diff_check(
    fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    samples: int = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() against central differences of ``fn``.

    Each probed entry is perturbed by ``step * max(1, |x|)``.  Tensors with
    more than ``samples`` entries are probed at a seeded random subset.
    """
    params = dict(params)
    analytic = backward(fn(), params)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance, step)
    for name, p in params.items():
        flat = p.data.view(-1)
        n = flat.numel()
        idx = np.arange(n) if n <= samples else np.sort(rng.choice(n, size=samples, replace=False))
        a_flat = analytic[name].reshape(-1)
        worst, worst_i = 0.0, -1
        for i in idx:
            i = int(i)
            orig = flat[i].item()
            h = step * max(1.0, abs(orig))
            with torch.no_grad():
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
                flat[i] = orig
            err = rel_error(a_flat[i].item(), (fp - fm) / (2 * h))
            if err > worst or worst_i < 0:
                worst, worst_i = err, i
        report.params.append(ParamCheck(name, worst, len(idx), worst_i))
    return report


def sgd_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor], lr: float = 1e-2):
    with torch.no_grad():
        for name, p in params.items():
            p -= lr * grads[name]
    return params


class Adam:
    """Adam with bias-corrected first and second moments."""

    def __init__(self, params: Mapping[str, torch.Tensor], lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}

    def step(self, grads: Mapping[str, torch.Tensor]) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        names = list(self.params)
        p = [self.params[n] for n in names]
        g = [grads[n] for n in names]
        m = [self.m[n] for n in names]
        v = [self.v[n] for n in names]
        # fused list ops: one kernel launch per stage instead of one per tensor
        with torch.no_grad():
            torch._foreach_mul_(m, self.beta1)
            torch._foreach_add_(m, g, alpha=1 - self.beta1)
            torch._foreach_mul_(v, self.beta2)
            torch._foreach_addcmul_(v, g, g, value=1 - self.beta2)
            denom = torch._foreach_sqrt(torch._foreach_div(v, c2))
            torch._foreach_add_(denom, self.eps)
            torch._foreach_addcdiv_(p, m, denom, value=-self.lr / c1)


def adam_step(params, grads, state: Adam | None = None, **hyper) -> Adam:
    """One Adam update; pass the returned state back in for the next step."""
    state = Adam(params, **hyper) if state is None else state
    state.step(grads)
    return state
