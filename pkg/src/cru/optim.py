"""Adam, global-norm gradient clipping, and the embedding L2 penalty."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm.

    Returns the pre-clip global norm.
    """
    if max_norm <= 0:
        raise ConfigError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


class Adam:
    """Moment-tracking optimizer over named parameters.

    update: m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
            theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
    with bias-corrected m_hat = m / (1 - b1^t), v_hat = v / (1 - b2^t).
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ConfigError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        if eps <= 0:
            raise ConfigError(f"eps must be positive, got {eps}")
        items = list(params.items()) if isinstance(params, dict) else list(params)
        names = [n for n, _ in items]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names")
        self.params: list[tuple[str, Tensor]] = items
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in items}
        self.v = {n: np.zeros_like(p.data) for n, p in items}

    def step(self) -> None:
        """Apply one update from the .grad buffers (missing grads are zero)."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ContractError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{name} {p.data.shape}"
                )
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def clip_gradients(self, max_norm: float) -> float:
        grads = [p.grad for _, p in self.params if p.grad is not None]
        return clip_global_norm(grads, max_norm)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"step_count": np.array(float(self.t))}
        for name in self.m:
            out[f"m.{name}"] = self.m[name].copy()
            out[f"v.{name}"] = self.v[name].copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if "step_count" not in state:
            raise ContractError("optimizer state is missing step_count")
        self.t = int(state["step_count"])
        for name in self.m:
            for slot, store in (("m", self.m), ("v", self.v)):
                key = f"{slot}.{name}"
                if key not in state:
                    raise ContractError(f"optimizer state is missing {key}")
                if state[key].shape != store[name].shape:
                    raise ContractError(
                        f"optimizer state {key} has shape {state[key].shape}, "
                        f"expected {store[name].shape}"
                    )
                store[name] = state[key].astype(np.float64).copy()


def l2_penalty(weights: Tensor, lam: float) -> Tensor:
    """lam * sum(w^2), recorded on the tape so it regularizes through the loss."""
    if lam < 0:
        raise ConfigError(f"l2 coefficient must be >= 0, got {lam}")
    if lam == 0.0:
        return Tensor(0.0)
    return ad.mul(ad.sum_all(ad.mul(weights, weights)), lam)
