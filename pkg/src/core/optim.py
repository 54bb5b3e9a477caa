"""Adam over flat dictionaries of float64 arrays."""
from typing import Dict, Mapping

import numpy as np

from src.utils.errors import InputError


class Adam:
    def __init__(self, params: Mapping[str, np.ndarray], lr: float = 2e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0 or not 0 <= beta1 < 1 or not 0 <= beta2 < 1 or eps <= 0:
            raise InputError(f"Adam: invalid hyperparameters lr={lr} beta1={beta1} beta2={beta2} eps={eps}")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros(np.shape(v)) for name, v in params.items()}
        self.v = {name: np.zeros(np.shape(v)) for name, v in params.items()}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Return updated parameters. Names missing from ``grads`` get a zero gradient."""
        unknown = set(params) ^ set(self.m)
        if unknown:
            raise InputError(f"Adam: parameter set changed: {sorted(unknown)}")
        self.step_count += 1
        t = self.step_count
        updated = {}
        for name in params:
            g = grads.get(name)
            g = np.zeros(self.m[name].shape) if g is None else np.asarray(g, dtype=np.float64)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1 ** t)
            v_hat = self.v[name] / (1 - self.beta2 ** t)
            updated[name] = np.asarray(params[name]) - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return updated
