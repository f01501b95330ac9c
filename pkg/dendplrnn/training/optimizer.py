from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Adam moments for a dict of parameter arrays"""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for name, value in params.items():
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        return state

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        """Update params in place"""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        step_size = lr / bc1

        for name in params:
            g = grads[name]
            if self.m[name].shape != g.shape:
                raise ValueError(
                    f"gradient for '{name}' has shape {g.shape}, moments have {self.m[name].shape}"
                )
            self.m[name] *= self.beta1
            self.m[name] += (1.0 - self.beta1) * g
            self.v[name] *= self.beta2
            self.v[name] += (1.0 - self.beta2) * (g * g)
            params[name] -= step_size * self.m[name] / (
                np.sqrt(self.v[name] / bc2) + self.eps
            )


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale grads in place so their joint norm is at most max_norm.

    Returns:
        float: the norm before clipping
    """
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm
