"""Differentiable computation substrate shared by every stage.

Dense float tensors (torch CPU), a named parameter store with an Adam/AdamW
optimizer, the multi-head attention kernel used by both the denoiser and the
view-set reconstructor, and a central-finite-difference gradient checker.
Training runs in float32; verification suites run the same code in float64,
where finite differences are trustworthy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .utils import NonFiniteError, assert_finite

TRAIN_DTYPE = torch.float32
VERIFY_DTYPE = torch.float64


@dataclass
class AdamHyper:
    """Adam hyperparameters with optional decoupled weight decay."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1/beta2 must lie in (0,1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


class ParamStore:
    """Named parameter tensors plus per-parameter Adam moments and a step counter.

    The store holds the live tensors used by the forward pass (they are not
    copied), so `adam_step` updates propagate to the owning model. Exactly one
    optimizer should write to a store; frozen stores may be read concurrently.
    """

    def __init__(self, params: dict[str, torch.Tensor], lr_scales: dict[str, float] | None = None):
        self.params: dict[str, torch.Tensor] = dict(params)
        for name, p in self.params.items():
            if not p.is_floating_point():
                raise TypeError(f"parameter '{name}' is not a float tensor")
        self.m: dict[str, torch.Tensor] = {k: torch.zeros_like(v) for k, v in self.params.items()}
        self.v: dict[str, torch.Tensor] = {k: torch.zeros_like(v) for k, v in self.params.items()}
        # per-parameter learning-rate multipliers (e.g. 10x for the camera encoder)
        self.lr_scales: dict[str, float] = dict(lr_scales or {})
        self.step_count = 0

    @classmethod
    def from_module(cls, module: torch.nn.Module, lr_scales: dict[str, float] | None = None) -> "ParamStore":
        return cls(dict(module.named_parameters()), lr_scales=lr_scales)

    def names(self) -> list[str]:
        return list(self.params.keys())

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def num_scalars(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def grads(self) -> dict[str, torch.Tensor]:
        """Collect autograd gradients for every parameter (zeros where absent)."""
        out = {}
        for name, p in self.params.items():
            out[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        return out

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clone_values(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.params.items()}

    def load_values(self, values: dict[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for name, p in self.params.items():
                if name not in values:
                    raise KeyError(f"missing parameter '{name}'")
                src = values[name]
                if tuple(src.shape) != tuple(p.shape):
                    raise ValueError(
                        f"shape mismatch for '{name}': store {tuple(p.shape)} vs loaded {tuple(src.shape)}"
                    )
                p.copy_(src.to(p.dtype))


def adam_step(params: ParamStore, grads: dict[str, torch.Tensor], hyper: AdamHyper) -> None:
    """One Adam update with bias correction (decoupled weight decay when enabled).

    `grads` maps parameter names to gradient tensors of identical shape;
    missing names are treated as zero gradient (their moments still decay).
    """
    for name, g in grads.items():
        if name not in params.params:
            raise KeyError(f"gradient for unknown parameter '{name}'")
        if tuple(g.shape) != tuple(params.params[name].shape):
            raise ValueError(
                f"gradient shape mismatch for '{name}': "
                f"param {tuple(params.params[name].shape)} vs grad {tuple(g.shape)}"
            )
        assert_finite(g, f"grad[{name}]")

    params.step_count += 1
    t = params.step_count
    b1, b2 = hyper.beta1, hyper.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    with torch.no_grad():
        for name, p in params.params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m, v = params.m[name], params.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            lr = hyper.learning_rate * params.lr_scales.get(name, 1.0)
            m_hat = m / bc1
            v_hat = v / bc2
            if hyper.weight_decay > 0.0:
                p.mul_(1.0 - lr * hyper.weight_decay)
            p.addcdiv_(m_hat, v_hat.sqrt().add_(hyper.epsilon), value=-lr)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    """Multi-head scaled dot-product attention.

    q: (..., Lq, D); k, v: (..., Lk, D) with D divisible by `heads`.
    Returns (..., Lq, D): softmax(QK^T / sqrt(D/heads)) V per head, concatenated.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"q/k feature dims differ: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"k/v sequence lengths differ: {k.shape[-2]} vs {v.shape[-2]}")
    d = q.shape[-1]
    if d % heads != 0:
        raise ValueError(f"feature dim {d} not divisible by {heads} heads")
    d_head = d // heads

    def split(x: torch.Tensor) -> torch.Tensor:
        # (..., L, D) -> (..., heads, L, d_head)
        return x.reshape(*x.shape[:-1], heads, d_head).transpose(-3, -2)

    qh, kh, vh = split(q), split(k), split(v)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(d_head)
    out = torch.softmax(scores, dim=-1) @ vh
    return out.transpose(-3, -2).reshape(*q.shape[:-2], q.shape[-2], heads * d_head)


def grad_check(
    loss_fn,
    params: ParamStore,
    eps: float = 1e-5,
    max_entries_per_param: int = 32,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central finite differences.

    Runs in the parameters' own dtype; callers wanting trustworthy numbers
    should hand in float64 parameters. For large tensors only a subset of
    entries is probed: the entries with the largest analytic gradient plus a
    random sample, `max_entries_per_param` in total per tensor.
    """
    params.zero_grad()
    loss = loss_fn(params)
    if not torch.isfinite(loss):
        raise NonFiniteError("loss is non-finite at the evaluation point")
    loss.backward()
    analytic = params.grads()
    params.zero_grad()

    gen = torch.Generator().manual_seed(seed)
    max_rel = 0.0
    # central differences bottom out at ~ulp(loss)/h; gradients below this
    # scale are rounding noise, so they only have to agree to the noise floor
    noise_floor = 1e-6 * max(1.0, abs(float(loss)))
    with torch.no_grad():
        for name, p in params.params.items():
            flat = p.reshape(-1)
            n = flat.numel()
            a_flat = analytic[name].reshape(-1)
            if n <= max_entries_per_param:
                idx = torch.arange(n)
            else:
                k = max_entries_per_param // 2
                top = torch.topk(a_flat.abs(), k).indices
                rnd = torch.randint(0, n, (max_entries_per_param - k,), generator=gen)
                idx = torch.unique(torch.cat([top, rnd]))
            for i in idx.tolist():
                orig = flat[i].item()
                h = eps * max(1.0, abs(orig))
                flat[i] = orig + h
                lp = float(loss_fn(params))
                flat[i] = orig - h
                lm = float(loss_fn(params))
                flat[i] = orig
                if not (math.isfinite(lp) and math.isfinite(lm)):
                    raise NonFiniteError(f"non-finite loss while perturbing '{name}'[{i}]")
                fd = (lp - lm) / (2.0 * h)
                an = a_flat[i].item()
                rel = abs(an - fd) / max(abs(an), abs(fd), noise_floor)
                max_rel = max(max_rel, rel)
    return max_rel
