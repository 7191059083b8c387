"""Adam optimizer with bias correction."""

import logging

import numpy as np

from ..errors import StateError
from .core import Tensor

log = logging.getLogger(__name__)


class AdamState:
    """Optimizer state over a fixed, named parameter set.

    Moment arrays live per parameter and are zero until the first step.
    ``debug`` logs a note when a step sees all-zero gradients (legal, but
    usually means a wiring mistake).
    """

    def __init__(self, params: dict, learning_rate: float = 5e-3, beta1: float = 0.5,
                 beta2: float = 0.999, epsilon: float = 1e-8, debug: bool = False):
        if not 0.0 < beta1 < 1.0 or not 0.0 < beta2 < 1.0:
            raise ValueError("betas must lie in (0, 1)")
        self.params = dict(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.debug = debug
        self.step_count = 0
        self.first_moment = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.second_moment = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def state_tensors(self, prefix: str = "_opt/") -> dict:
        """Moments plus step count as checkpointable arrays."""
        out = {prefix + "step": np.asarray([self.step_count], dtype=np.float32)}
        for k in self.params:
            out[prefix + k + "/m"] = self.first_moment[k]
            out[prefix + k + "/v"] = self.second_moment[k]
        return out

    def load_state_tensors(self, tensors: dict, prefix: str = "_opt/"):
        self.step_count = int(tensors[prefix + "step"][0])
        for k, t in self.params.items():
            self.first_moment[k] = tensors[prefix + k + "/m"].reshape(t.data.shape).astype(t.data.dtype)
            self.second_moment[k] = tensors[prefix + k + "/v"].reshape(t.data.shape).astype(t.data.dtype)

    def step(self):
        """One bias-corrected update; requires backward to have run."""
        missing = [k for k, t in self.params.items() if t.grad is None]
        if missing:
            raise StateError(
                f"adam step before backward: {len(missing)} parameters have no "
                f"gradient (first: {missing[0]})"
            )
        if self.debug and all(not np.any(t.grad) for t in self.params.values()):
            log.debug("adam step %d: all gradients are zero", self.step_count + 1)
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for k, t in self.params.items():
            g = t.grad
            m = self.first_moment[k]
            v = self.second_moment[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            t.data -= (self.learning_rate * mhat / (np.sqrt(vhat) + self.epsilon)).astype(
                t.data.dtype, copy=False
            )


def adam_step(params: dict, state: AdamState):
    """Functional spelling of AdamState.step for a prepared state."""
    if state.params is not params and list(state.params) != list(params):
        raise StateError("adam_step: state was built for a different parameter set")
    state.step()
