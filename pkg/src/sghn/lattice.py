"""Hamiltonian lattice systems with periodic boundaries.

Every system here has unit masses, so the kinetic energy is ``sum(p**2) / 2``
and the canonical equations reduce to ``dq/dt = p``, ``dp/dt = -dV/dq``.

The 1D nearest-neighbour systems (FK, rotator, Toda and the two hybrids) share
one evaluation path built from an inter-site potential ``V1(q[i+1] - q[i])``
and an on-site potential ``V2(q[i])``. Keeping a single path makes the hybrid
limits (mu = 0 and mu = 1) reproduce the pure systems bit for bit.

Arrays may carry leading batch axes; the particle axis is always last.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class LatticeError(ValueError):
    """Invalid lattice parameters or a state that does not fit the lattice."""


class Kind(str, enum.Enum):
    FK = "FK"
    ROTATOR = "Rotator"
    TODA = "Toda"
    FK_TODA = "FkToda"
    FPUT_TODA = "FputToda"
    KG_LRI = "KgLri"
    FK_2D = "Fk2d"


@dataclass(frozen=True)
class LatticeSpec:
    """Which Hamiltonian, its size and its physical parameters.

    For ``Fk2d`` the lattice has ``m`` rows and ``n`` columns; particles are
    stored row-major, particle ``(i, j)`` at flat index ``i * n + j``.
    Boundary conditions are always periodic.
    """

    kind: Kind
    n: int
    m: int | None = None
    mu: float = 0.0
    a: float = 1.0
    b: float = 1.0
    rho: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.n < 3:
            raise LatticeError(f"need at least 3 particles per axis, got n={self.n}")
        if self.kind is Kind.FK_2D:
            if self.m is None or self.m < 3:
                raise LatticeError(f"Fk2d needs m >= 3 rows, got m={self.m}")
            if not (self.a > 0 and self.b > 0):
                raise LatticeError("Fk2d needs a > 0 and b > 0")
        elif self.m is not None:
            raise LatticeError(f"m (rows) only applies to Fk2d, not {self.kind.value}")
        if self.kind in (Kind.FK_TODA, Kind.FPUT_TODA) and not 0.0 <= self.mu <= 1.0:
            raise LatticeError(f"mu must lie in [0, 1], got {self.mu}")
        if self.kind is Kind.KG_LRI and not (self.a > 0 and self.b >= 0):
            raise LatticeError("KgLri needs a > 0 and b >= 0")

    @property
    def dim(self) -> int:
        """Total particle count D."""
        return self.n * (self.m or 1)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "n": self.n, "m": self.m, "mu": self.mu,
                "a": self.a, "b": self.b, "rho": self.rho}

    @classmethod
    def from_dict(cls, d: dict) -> "LatticeSpec":
        return cls(**d)


@dataclass(frozen=True)
class PhaseState:
    """Canonical coordinates. ``q`` and ``p`` share shape ``(..., D)``."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=np.float64)
        p = np.asarray(self.p, dtype=np.float64)
        if q.shape != p.shape or q.ndim == 0:
            raise LatticeError(f"q and p must be vectors of equal shape, got {q.shape} and {p.shape}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def dim(self) -> int:
        return self.q.shape[-1]

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.q).all() and np.isfinite(self.p).all())


def canonical_structure(d: int) -> np.ndarray:
    """The 2D x 2D symplectic matrix ``[[0, I], [-I, 0]]``."""
    eye = np.eye(d)
    zero = np.zeros((d, d))
    return np.block([[zero, eye], [-eye, zero]])


# ---------------------------------------------------------------------------
# nearest-neighbour building blocks: (V1, V1', V2, V2')

@dataclass(frozen=True)
class _Chain:
    v1: Callable[[np.ndarray], np.ndarray]
    dv1: Callable[[np.ndarray], np.ndarray]
    v2: Callable[[np.ndarray], np.ndarray]
    dv2: Callable[[np.ndarray], np.ndarray]


def _zero(x: np.ndarray) -> np.ndarray:
    return np.zeros_like(x)


def _chain(spec: LatticeSpec) -> _Chain:
    k, mu = spec.kind, spec.mu
    if k is Kind.FK:
        return _Chain(lambda d: d * d / 2, lambda d: d,
                      lambda q: 1 - np.cos(q), np.sin)
    if k is Kind.ROTATOR:
        return _Chain(lambda d: d * d / 2 + 1 - np.cos(d), lambda d: d + np.sin(d),
                      _zero, _zero)
    if k is Kind.TODA:
        return _Chain(lambda d: np.exp(-d), lambda d: -np.exp(-d), _zero, _zero)
    if k is Kind.FK_TODA:
        return _Chain(lambda d: mu * np.exp(-d) + (1 - mu) * (d * d / 2),
                      lambda d: mu * -np.exp(-d) + (1 - mu) * d,
                      lambda q: (1 - mu) * (1 - np.cos(q)),
                      lambda q: (1 - mu) * np.sin(q))
    if k is Kind.FPUT_TODA:
        return _Chain(lambda d: mu * np.exp(-d) + (1 - mu) * (d * d / 2 + d ** 3 / 6),
                      lambda d: mu * -np.exp(-d) + (1 - mu) * (d + d * d / 2),
                      _zero, _zero)
    raise LatticeError(f"{k.value} is not a nearest-neighbour chain")


def _neighbours(n: int, shift: int) -> np.ndarray:
    return (np.arange(n) + shift) % n


def _check_q(spec: LatticeSpec, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1:] != (spec.dim,):
        raise LatticeError(f"{spec.kind.value} expects {spec.dim} coordinates, got shape {q.shape}")
    return q


def potential(spec: LatticeSpec, q: np.ndarray) -> np.ndarray:
    """Potential energy V(q), summed over particles."""
    q = _check_q(spec, q)
    n = spec.n
    if spec.kind is Kind.KG_LRI:
        d1 = q[..., _neighbours(n, 1)] - q
        d2 = q[..., _neighbours(n, 2)] - q
        site = spec.a * d1 ** 2 / 2 + spec.b * d2 ** 2 / 2 + q ** 2 / 2 + q ** 4 / 4
        return site.sum(axis=-1)
    if spec.kind is Kind.FK_2D:
        g = q.reshape(q.shape[:-1] + (spec.m, n))
        dx = np.roll(g, -1, axis=-2) - g - spec.rho
        dy = np.roll(g, -1, axis=-1) - g
        site = spec.a * dx ** 2 / 2 + spec.b * dy ** 2 / 2 - np.cos(g)
        return site.sum(axis=(-2, -1))
    c = _chain(spec)
    return (c.v1(q[..., _neighbours(n, 1)] - q) + c.v2(q)).sum(axis=-1)


def hamiltonian(spec: LatticeSpec, s: PhaseState) -> np.ndarray | float:
    """Total energy H = T(p) + V(q)."""
    q = _check_q(spec, s.q)
    if not s.is_finite():
        raise LatticeError("state contains non-finite entries")
    n = spec.n
    if spec.kind in (Kind.KG_LRI, Kind.FK_2D):
        h = (s.p ** 2 / 2).sum(axis=-1) + potential(spec, q)
    else:
        c = _chain(spec)
        site = s.p ** 2 / 2 + c.v1(q[..., _neighbours(n, 1)] - q) + c.v2(q)
        h = site.sum(axis=-1)
    return h if np.ndim(h) else float(h)


def force(spec: LatticeSpec, q: np.ndarray) -> np.ndarray:
    """Closed-form force -dV/dq."""
    q = _check_q(spec, q)
    n = spec.n
    if spec.kind is Kind.KG_LRI:
        d1 = q[..., _neighbours(n, 1)] - q
        d2 = q[..., _neighbours(n, 2)] - q
        return (spec.a * (d1 - d1[..., _neighbours(n, -1)])
                + spec.b * (d2 - d2[..., _neighbours(n, -2)])
                - q - q ** 3)
    if spec.kind is Kind.FK_2D:
        g = q.reshape(q.shape[:-1] + (spec.m, n))
        rows, cols = _neighbours(spec.m, 1), _neighbours(n, 1)
        dx = g[..., rows, :] - g - spec.rho
        dy = g[..., :, cols] - g
        f = (spec.a * (dx - dx[..., _neighbours(spec.m, -1), :])
             + spec.b * (dy - dy[..., :, _neighbours(n, -1)])
             - np.sin(g))
        return f.reshape(q.shape)
    c = _chain(spec)
    g = c.dv1(q[..., _neighbours(n, 1)] - q)
    return g - g[..., _neighbours(n, -1)] - c.dv2(q)


def vector_field(spec: LatticeSpec, s: PhaseState) -> tuple[np.ndarray, np.ndarray]:
    """Canonical equations with m = 1: (dq/dt, dp/dt) = (p, force(q))."""
    if not s.is_finite():
        raise LatticeError("state contains non-finite entries")
    return s.p.copy(), force(spec, s.q)


def momentum(s: PhaseState) -> np.ndarray | float:
    """Total momentum sum(p)."""
    m = s.p.sum(axis=-1)
    return m if np.ndim(m) else float(m)


# ---------------------------------------------------------------------------
# Toda integrals

def toda_lax(s: PhaseState) -> np.ndarray:
    """Periodic tridiagonal Lax matrix of the Toda chain.

    Diagonal ``p[i]``; off-diagonal and corner entries
    ``v[i] = -exp((q[i] - q[i+1]) / 2)`` coupling ``i`` and ``i+1 (mod D)``.
    """
    d = s.dim
    if d < 3:
        raise LatticeError(f"Lax matrix needs D >= 3, got {d}")
    i = np.arange(d)
    j = _neighbours(d, 1)
    v = -np.exp((s.q - s.q[..., j]) / 2)
    lax = np.zeros(s.q.shape + (d,))
    lax[..., i, i] = s.p
    lax[..., i, j] = v
    lax[..., j, i] = v
    return lax


def toda_invariant(s: PhaseState, n: int) -> np.ndarray | float:
    """C_n = Tr(L^n) for the Toda Lax matrix L."""
    if not 1 <= n <= s.dim:
        raise LatticeError(f"Toda invariant order must lie in [1, {s.dim}], got {n}")
    c = np.trace(np.linalg.matrix_power(toda_lax(s), n), axis1=-2, axis2=-1)
    return c if np.ndim(c) else float(c)


# ---------------------------------------------------------------------------
# conserved quantities

@dataclass(frozen=True)
class ConservedDescriptor:
    """A named quantity; ``order`` is set for Toda traces C_n."""

    name: str
    order: int | None = field(default=None)

    @property
    def label(self) -> str:
        return self.name if self.order is None else f"C{self.order}"


ENERGY = ConservedDescriptor("Energy")
MOMENTUM = ConservedDescriptor("Momentum")


def toda_c(n: int) -> ConservedDescriptor:
    return ConservedDescriptor("TodaC", n)


def _is_toda_like(spec: LatticeSpec) -> bool:
    return spec.kind is Kind.TODA or (
        spec.kind in (Kind.FK_TODA, Kind.FPUT_TODA) and spec.mu == 1.0)


def conserved_set(spec: LatticeSpec) -> list[ConservedDescriptor]:
    """Quantities conserved by the true dynamics of ``spec``.

    Toda traces for hybrids appear only at the integrable point mu = 1.
    """
    out = [ENERGY]
    translation_invariant = spec.kind in (Kind.ROTATOR, Kind.TODA, Kind.FPUT_TODA) or (
        spec.kind is Kind.FK_TODA and spec.mu == 1.0)
    if translation_invariant:
        out.append(MOMENTUM)
    if _is_toda_like(spec):
        out.extend(toda_c(k) for k in range(3, spec.dim + 1))
    return out


def conserved_value(spec: LatticeSpec, s: PhaseState, desc: ConservedDescriptor) -> np.ndarray | float:
    """Evaluate ``desc`` on ``s``; raises if it is not defined for ``spec``."""
    if desc == ENERGY:
        return hamiltonian(spec, s)
    if desc == MOMENTUM:
        return momentum(s)
    if desc.name == "TodaC":
        if spec.kind not in (Kind.TODA, Kind.FK_TODA, Kind.FPUT_TODA):
            raise LatticeError(f"Toda invariants are undefined for {spec.kind.value}")
        return toda_invariant(s, desc.order)
    raise LatticeError(f"unknown conserved quantity {desc}")


def descriptor_from_label(label: str) -> ConservedDescriptor:
    if label == "Energy":
        return ENERGY
    if label == "Momentum":
        return MOMENTUM
    if label.startswith("C") and label[1:].isdigit():
        return toda_c(int(label[1:]))
    raise LatticeError(f"unknown conserved quantity label {label!r}")


# ---------------------------------------------------------------------------
# ground-truth interaction graphs

def interaction_graph(spec: LatticeSpec) -> set[tuple[int, int]]:
    """Undirected particle pairs ``(i, j)``, ``i < j``, coupled by the potential."""
    def ring(n: int, r: int) -> set[tuple[int, int]]:
        return {tuple(sorted((i, (i + r) % n))) for i in range(n) if (i + r) % n != i}

    if spec.kind is Kind.FK_2D:
        m, n = spec.m, spec.n
        edges = set()
        for i in range(m):
            for j in range(n):
                here = i * n + j
                edges.add(tuple(sorted((here, ((i + 1) % m) * n + j))))
                edges.add(tuple(sorted((here, i * n + (j + 1) % n))))
        return edges
    edges = ring(spec.n, 1)
    if spec.kind is Kind.KG_LRI and spec.b > 0:
        edges |= ring(spec.n, 2)
    return edges
