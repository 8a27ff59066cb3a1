"""Time integration support: multistep weights and step-size control.

The solvers use backward-difference formulas of order 1 to 4 on possibly
nonuniform step sequences.  Weights are generated by derivative collocation:
for time nodes ``t_0 > t_1 > ... > t_k`` (newest first) the weights ``w``
satisfy ``sum_j w_j p(t_j) = p'(t_0)`` for every polynomial ``p`` of degree
at most ``k``.  On uniform steps this reproduces the classical BDF tables.

Step-size control is deliberately simple: a CFL-based candidate, a growth
clamp so the step at most grows by a fixed factor per step, halving on
rejection, and a hard abort after too many consecutive rejections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TimestepError(RuntimeError):
    """Raised when step-size control cannot find an acceptable step."""


def derivative_weights(times):
    """Collocation weights for the first derivative at ``times[0]``.

    ``times`` has the newest node first.  Returns ``w`` with
    ``sum_j w_j f(times[j]) ~ f'(times[0])``, exact for polynomials of
    degree ``len(times) - 1``.
    """
    t = np.asarray(times, dtype=float)
    k = t.size - 1
    if k < 1:
        raise ValueError("need at least two time levels")
    h = t[0] - t[1]
    if h <= 0.0:
        raise ValueError("times must be strictly decreasing")
    # scale nodes by the leading step to keep the Vandermonde well conditioned
    xi = (t - t[0]) / h
    vand = np.vander(xi, k + 1, increasing=True).T
    rhs = np.zeros(k + 1)
    rhs[1] = 1.0
    w = np.linalg.solve(vand, rhs)
    return w / h


def extrapolation_weights(times, t_eval):
    """Lagrange basis values at ``t_eval`` for the nodes ``times``.

    ``sum_j w_j f(times[j])`` equals the interpolating polynomial through
    the nodes evaluated at ``t_eval``; exact for polynomial data.
    """
    t = np.asarray(times, dtype=float)
    n = t.size
    w = np.ones(n)
    for j in range(n):
        for m in range(n):
            if m != j:
                w[j] *= (t_eval - t[m]) / (t[j] - t[m])
    return w


def cfl_timestep(cell_size, cell_speed, cfl, dt_max):
    """CFL step candidate ``cfl * min_i h_i / speed_i`` capped at ``dt_max``.

    A tiny floor on the speed keeps the quotient finite for a fluid at rest,
    in which case the cap wins.
    """
    h = np.asarray(cell_size, dtype=float)
    s = np.asarray(cell_speed, dtype=float)
    dt = cfl * float(np.min(h / (s + 1e-10)))
    return min(dt, dt_max)


def ramp_steps(dt, order):
    """Initial step sizes for a cold start of a high-order multistep run.

    The first step runs at order 1, so its size is shrunk until its local
    error is commensurate with the global accuracy of the target order; the
    step then doubles until it reaches ``dt``.  Order 1 needs no ramp.
    """
    if order <= 1:
        return [dt]
    first = min(dt, dt ** (order / 2.0))
    steps = []
    s = first
    while s < dt * (1.0 - 1e-12):
        steps.append(s)
        s *= 2.0
    steps.append(dt)
    return steps


@dataclass
class StepController:
    """Accept/reject bookkeeping for adaptive step sizes."""

    dt_init: float
    dt_max: float
    dt_min: float = 1e-12
    growth: float = 1.5
    max_rejects: int = 8

    def __post_init__(self):
        self.dt = min(self.dt_init, self.dt_max)
        self.rejects = 0

    def accept(self, dt_candidate):
        """Register a successful step; returns the next step size."""
        self.rejects = 0
        self.dt = max(self.dt_min, min(dt_candidate, self.growth * self.dt, self.dt_max))
        return self.dt

    def reject(self):
        """Halve the step after a failed solve; abort when halving stalls."""
        self.rejects += 1
        if self.rejects > self.max_rejects:
            raise TimestepError(
                f"step rejected {self.rejects} times in a row (dt={self.dt:.3e})"
            )
        self.dt = max(self.dt_min, 0.5 * self.dt)
        return self.dt
