"""Time stepping for lattice dynamics.

``srkn5_step`` is an explicit symplectic Runge-Kutta-Nystrom method with five
stages and order four. Written as a composition it is five kicks separated by
four drifts::

    Q_1 = q
    Q_i = Q_{i-1} + (c_i - c_{i-1}) h v(P_{i-1})       (drift)
    P_i = P_{i-1} + b_i h f(Q_i)                         (kick)

with ``c_1 = 0`` and ``c_5 = 1``. For ``v(p) = p`` this is exactly the RKN
tableau ``a_ij = b_j (c_i - c_j)``, ``bbar_i = b_i (1 - c_i)``. Allowing a
general velocity map keeps the step symplectic for any separable
``H = T(p) + V(q)``, which is what learned separable models need.

``rk4_step`` is the classical fallback for fields that are not separable.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .lattice import PhaseState

Force = Callable[[np.ndarray], np.ndarray]
Velocity = Callable[[np.ndarray], np.ndarray]
Field = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]

# One member of the one-parameter family of 5-stage explicit symplectic RKN
# methods of order 4 with c_1 = 0, c_5 = 1. All RKN order conditions up to
# order 4 hold to ~1e-16 (see tests/test_integrate.py).
SRKN5_B = (
    0.06923997622733725,
    0.33755125022059335,
    0.6073291735890635,
    -0.13927775125723899,
    0.1251573512202449,
)
SRKN5_C = (
    0.0,
    0.21516780687058706,
    0.6100940463654211,
    0.49049777017995205,
    1.0,
)


class IntegrationError(RuntimeError):
    """Raised when a step produces non-finite values."""

    def __init__(self, message: str, step: int | None = None, time: float | None = None):
        super().__init__(message)
        self.step = step
        self.time = time


@dataclass(frozen=True)
class IntegratorConfig:
    h: float = 0.0025
    scheme: str = "Srkn5"

    def __post_init__(self) -> None:
        if not self.h > 0:
            raise ValueError(f"step size must be positive, got {self.h}")
        if self.scheme not in ("Srkn5", "Rk4"):
            raise ValueError(f"unknown scheme {self.scheme!r}; expected 'Srkn5' or 'Rk4'")


@dataclass(frozen=True)
class Trajectory:
    """States sampled at ``t0 + k * dt_sample``.

    ``q`` and ``p`` have shape ``(T, ..., D)``: time first, then any batch
    axes, particles last.
    """

    t0: float
    dt_sample: float
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self) -> None:
        if self.q.shape != self.p.shape or self.q.ndim < 2 or len(self.q) == 0:
            raise ValueError("trajectory needs non-empty q, p of equal shape (T, ..., D)")

    def __len__(self) -> int:
        return len(self.q)

    def __getitem__(self, k: int) -> PhaseState:
        return PhaseState(self.q[k], self.p[k])

    def __iter__(self) -> Iterator[PhaseState]:
        return (self[k] for k in range(len(self)))

    @property
    def states(self) -> list[PhaseState]:
        return list(self)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt_sample * np.arange(len(self))

    def select(self, index) -> "Trajectory":
        """Pick batch members: ``traj.select(3)`` or ``traj.select(slice(0, 5))``."""
        return Trajectory(self.t0, self.dt_sample, self.q[:, index], self.p[:, index])


def srkn5_step(force: Force, s: PhaseState, h: float, velocity: Velocity | None = None) -> PhaseState:
    """One step of the 5-stage symplectic RKN method (five force calls)."""
    q, p = s.q, s.p
    prev_c = 0.0
    for b, c in zip(SRKN5_B, SRKN5_C):
        if c != prev_c:
            q = q + (c - prev_c) * h * (p if velocity is None else velocity(p))
        p = p + b * h * force(q)
        prev_c = c
    return PhaseState(q, p)


def rk4_step(field: Field, s: PhaseState, h: float) -> PhaseState:
    """Classical fourth-order Runge-Kutta step for a general field."""
    q, p = s.q, s.p
    k1q, k1p = field(q, p)
    k2q, k2p = field(q + h / 2 * k1q, p + h / 2 * k1p)
    k3q, k3p = field(q + h / 2 * k2q, p + h / 2 * k2p)
    k4q, k4p = field(q + h * k3q, p + h * k3p)
    return PhaseState(q + h / 6 * (k1q + 2 * k2q + 2 * k3q + k4q),
                      p + h / 6 * (k1p + 2 * k2p + 2 * k3p + k4p))


@dataclass(frozen=True)
class Dynamics:
    """What to integrate.

    Separable dynamics give ``force`` (and optionally ``velocity``, default
    identity); general dynamics give ``field``. SRKN5 requires the former.
    """

    force: Force | None = None
    velocity: Velocity | None = None
    field: Field | None = None

    def as_field(self) -> Field:
        if self.field is not None:
            return self.field
        vel = self.velocity or (lambda p: p)
        return lambda q, p: (vel(p), self.force(q))


def n_steps(t_end: float, h: float) -> int:
    """Number of steps of size ``h`` covering ``t_end``; must be integral."""
    if not t_end > 0:
        raise ValueError(f"t_end must be positive, got {t_end}")
    k = round(t_end / h)
    if abs(k * h - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError(f"t_end={t_end} is not an integer multiple of h={h}")
    return k


def integrate(dynamics: Dynamics, s0: PhaseState, t_end: float,
              cfg: IntegratorConfig = IntegratorConfig()) -> Trajectory:
    """Dense trajectory at spacing ``cfg.h``, initial state included.

    Raises ``IntegrationError`` carrying the failing step index and time if
    any state becomes non-finite.
    """
    steps = n_steps(t_end, cfg.h)
    if cfg.scheme == "Srkn5":
        if dynamics.force is None:
            raise ValueError("Srkn5 needs separable dynamics (a force function)")

        def step(s: PhaseState) -> PhaseState:
            return srkn5_step(dynamics.force, s, cfg.h, dynamics.velocity)
    else:
        fld = dynamics.as_field()

        def step(s: PhaseState) -> PhaseState:
            return rk4_step(fld, s, cfg.h)

    qs = np.empty((steps + 1,) + s0.q.shape)
    ps = np.empty_like(qs)
    qs[0], ps[0] = s0.q, s0.p
    s = s0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, steps + 1):
            s = step(s)
            if not s.is_finite():
                raise IntegrationError(f"non-finite state at step {k} (t={k * cfg.h:g})",
                                       step=k, time=k * cfg.h)
            qs[k], ps[k] = s.q, s.p
    return Trajectory(0.0, cfg.h, qs, ps)


def subsample(traj: Trajectory, stride: int) -> Trajectory:
    """Keep every ``stride``-th state, starting with the first."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return Trajectory(traj.t0, traj.dt_sample * stride, traj.q[::stride], traj.p[::stride])
