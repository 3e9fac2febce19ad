"""Learning-rate schedules for the SGD L step."""

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class LearnRateSchedule:
    """Robbins-Monro schedule ``alpha / (beta + t)``, optionally clipped at ``1/clip_mu``.

    ``clip_mu = 0`` disables clipping.
    """

    alpha: float
    beta: float
    clip_mu: float = 0.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ConfigError(
                f"schedule needs alpha > 0 and beta > 0, got {self.alpha}, {self.beta}"
            )
        if not self.clip_mu >= 0:
            raise ConfigError(f"clip_mu must be >= 0, got {self.clip_mu}")

    def base_rate(self, t):
        return self.alpha / (self.beta + t)

    def rate(self, t):
        eta = self.alpha / (self.beta + t)
        if self.clip_mu > 0:
            return min(eta, 1.0 / self.clip_mu)
        return eta

    def rates(self, n):
        return np.array([self.rate(t) for t in range(n)])

    def clipped(self, mu):
        return replace(self, clip_mu=float(mu))

    def crossover(self):
        """First step index from which the clipped and base schedules coincide."""
        if self.clip_mu == 0:
            return 0
        return max(0, math.ceil(self.clip_mu * self.alpha - self.beta))


@dataclass(frozen=True)
class ConstantSchedule:
    """Fixed step size. Not Robbins-Monro; used for full-batch GD equivalence."""

    eta: float

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError(f"constant rate must be > 0, got {self.eta}")

    def rate(self, t):
        return self.eta

    def rates(self, n):
        return np.full(n, self.eta)

    def clipped(self, mu):
        return self
