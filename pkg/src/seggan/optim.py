"""Optimizers and the polynomial learning-rate schedule.

Both optimizers own per-parameter state buffers keyed by parameter name so
that checkpoints can capture and restore them exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError


def poly_lr(base_lr, iteration, max_iterations, power=0.9):
    """base_lr * (1 - iteration / max_iterations) ** power."""
    if not 0 <= iteration <= max_iterations:
        raise ConfigurationError(
            f"iteration {iteration} outside [0, {max_iterations}]"
        )
    return base_lr * (1.0 - iteration / max_iterations) ** power


class SgdNesterov:
    """SGD with Nesterov momentum and decoupled-from-exempt weight decay.

    Update per parameter p with gradient g:
        g' = g + weight_decay * p      (skipped for decay-exempt parameters)
        v  = momentum * v + g'
        p -= lr * (g' + momentum * v)
    """

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate parameter names in optimizer")
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr, decayed_out=None):
        """One update from the accumulated gradients.

        ``decayed_out`` (a list, when given) collects the names of parameters
        that weight decay actually touched; instrumentation for tests.
        """
        for p in self.params:
            if self.weight_decay and not p.decay_exempt:
                g = p.grad + self.weight_decay * p.data
                if decayed_out is not None:
                    decayed_out.append(p.name)
            else:
                g = p.grad
            v = self.velocity[p.name]
            v *= self.momentum
            v += g
            p.data -= lr * (g + self.momentum * v)

    def state_buffers(self):
        return [(f"velocity/{name}", buf) for name, buf in self.velocity.items()]


class Adam:
    """Standard Adam with bias correction."""

    def __init__(self, params, beta1=0.9, beta2=0.999, epsilon=1e-8):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate parameter names in optimizer")
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            mhat = m / c1
            vhat = v / c2
            p.data -= lr * mhat / (np.sqrt(vhat) + self.epsilon)

    def state_buffers(self):
        out = [(f"adam_m/{name}", buf) for name, buf in self.m.items()]
        out += [(f"adam_v/{name}", buf) for name, buf in self.v.items()]
        return out
