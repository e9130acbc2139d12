"""
Adaptive-moment gradient ascent over named arrays.
"""

from typing import Dict, Mapping, Optional

import numpy as np


class Adam:
    """Adam with per-key step counts, so batched keys keep correct bias correction"""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-8, maximize: bool = True):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.direction = 1.0 if maximize else -1.0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t: Dict[str, int] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: Optional[float] = None) -> None:
        """In-place update of every key present in grads"""
        step_size = self.lr if lr is None else lr
        for key, g in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(params[key])
                self.v[key] = np.zeros_like(params[key])
                self.t[key] = 0
            self.t[key] += 1
            t = self.t[key]

            self.m[key] *= self.beta1
            self.m[key] += (1.0 - self.beta1) * g
            self.v[key] *= self.beta2
            self.v[key] += (1.0 - self.beta2) * (g * g)

            m_hat = self.m[key] / (1.0 - self.beta1 ** t)
            v_hat = self.v[key] / (1.0 - self.beta2 ** t)
            params[key] += self.direction * step_size * m_hat / (np.sqrt(v_hat) + self.epsilon)

    def state(self) -> Dict[str, np.ndarray]:
        """Flattened moments for checkpointing"""
        state: Dict[str, np.ndarray] = {}
        for key in self.m:
            state[f"adam_m/{key}"] = self.m[key]
            state[f"adam_v/{key}"] = self.v[key]
            state[f"adam_t/{key}"] = np.array([self.t[key]], dtype=np.float64)
        return state

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for name, value in state.items():
            kind, _, key = name.partition("/")
            if kind == "adam_m":
                self.m[key] = np.array(value)
            elif kind == "adam_v":
                self.v[key] = np.array(value)
            elif kind == "adam_t":
                self.t[key] = int(value[0])


def cosine_step_size(base: float, iteration: int, total: int, final_fraction: float = 1.0) -> float:
    """Cosine decay from base to base·final_fraction over total steps"""
    if total <= 1 or final_fraction >= 1.0:
        return base
    progress = min(iteration / (total - 1), 1.0)
    return base * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + np.cos(np.pi * progress)))
