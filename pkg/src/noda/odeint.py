"""Fixed-step Euler / RK4 integration of ``du/dt = field(u, a, t)``.

The same routine serves plain numpy arrays and diffcore tensors: the steps
are written with arithmetic operators only, so when ``u0`` (or the field's
parameters) sit on a tape the unrolled solution is differentiable.
"""
from dataclasses import dataclass

import numpy as np

from .diffcore import DomainError, Tensor

METHODS = ("euler", "rk4")


class DivergenceError(RuntimeError):
    def __init__(self, substep, message="non-finite field output"):
        super().__init__(f"{message} at substep {substep}")
        self.substep = substep


@dataclass(frozen=True)
class IntegratorConfig:
    tau: float
    method: str = "rk4"
    t0: float = 0.0
    substeps: int = 10

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown integration method {self.method!r}")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ValueError("substeps must be a positive integer")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def step_size(self):
        return self.tau / self.substeps


def _checked(field, u, a, t, substep):
    try:
        k = field(u, a, t)
    except DomainError as e:
        raise DivergenceError(substep, str(e)) from e
    data = k.data if isinstance(k, Tensor) else np.asarray(k)
    if not np.isfinite(data).all():
        raise DivergenceError(substep)
    return k


def integrate(field, u0, a, cfg):
    """Solution at ``t0 + tau`` after ``cfg.substeps`` steps; ``a`` is held constant."""
    h = cfg.step_size
    u = u0
    t = cfg.t0
    for i in range(cfg.substeps):
        if cfg.method == "euler":
            u = u + _checked(field, u, a, t, i) * h
        else:
            k1 = _checked(field, u, a, t, i)
            k2 = _checked(field, u + k1 * (0.5 * h), a, t + 0.5 * h, i)
            k3 = _checked(field, u + k2 * (0.5 * h), a, t + 0.5 * h, i)
            k4 = _checked(field, u + k3 * h, a, t + h, i)
            u = u + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
        t = cfg.t0 + (i + 1) * h
    return u


def convergence_order(field, u0, a, method, substep_list, reference, tau, t0=0.0):
    """Error against ``reference`` (array at ``t0 + tau``) for each substep count."""
    rows = []
    for s in substep_list:
        u = integrate(field, np.asarray(u0, dtype=np.float64), a,
                      IntegratorConfig(tau=tau, method=method, t0=t0, substeps=s))
        rows.append((s, float(np.max(np.abs(np.asarray(u) - reference)))))
    return rows
