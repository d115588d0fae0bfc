"""Learnable dynamics models: MLP vector field, HNN and the separable graph
Hamiltonian network with a trainable interaction matrix alpha.

Parameters live as plain float64 arrays in ``model.params`` (an ordered
dict). Training wraps them in fresh autodiff leaves every step via
``field_graph``; evaluation uses ``field``, ``force`` and ``velocity`` which
only differentiate with respect to the state.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .integrate import Dynamics
from .lattice import LatticeSpec, PhaseState, force as true_force, vector_field

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class MlpConfig:
    """``depth`` hidden layers of ``width`` units; named like ``MLP-1-100-gelu``."""

    depth: int = 1
    width: int = 32
    activation: str = "tanh"
    in_dim: int = 1
    out_dim: int = 1

    def __post_init__(self) -> None:
        if self.depth < 1 or self.width < 1:
            raise ValueError(f"depth and width must be >= 1, got {self.depth}, {self.width}")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; "
                             f"allowed: {sorted(ad.ACTIVATIONS)}")

    @property
    def label(self) -> str:
        return f"{self.depth}-{self.width}-{self.activation}"

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        dims = [self.in_dim] + [self.width] * self.depth + [self.out_dim]
        out = []
        for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            out += [(f"w{k}", (fan_in, fan_out)), (f"b{k}", (fan_out,))]
        return out


def mlp_init(cfg: MlpConfig, rng: np.random.Generator, prefix: str = "") -> Params:
    """Uniform fan-in scaled initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    params = {}
    fan_in = cfg.in_dim
    for name, shape in cfg.shapes():
        if name.startswith("w"):
            fan_in = shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        params[prefix + name] = rng.uniform(-bound, bound, size=shape)
    return params


def mlp_apply(cfg: MlpConfig, P: dict[str, Value], x: Value, prefix: str = "") -> Value:
    act = ad.ACTIVATIONS[cfg.activation]
    h = x
    for k in range(cfg.depth + 1):
        h = h @ P[f"{prefix}w{k}"] + P[f"{prefix}b{k}"]
        if k < cfg.depth:
            h = act(h)
    return h


class Model:
    """Common surface. ``separable`` models roll out with SRKN5, others RK4."""

    kind: str = ""
    separable: bool = False

    def __init__(self, dim: int):
        self.dim = dim
        self.params: Params = {}

    # -- to override
    def field_graph(self, P: dict[str, Value], q: Value, p: Value) -> tuple[Value, Value]:
        raise NotImplementedError

    def config(self) -> dict:
        raise NotImplementedError

    @property
    def label(self) -> str:
        return self.kind

    # -- shared
    def leaves(self, trainable: bool = True) -> dict[str, Value]:
        return {k: Value(v, requires_grad=trainable) for k, v in self.params.items()}

    def field(self, q: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Model vector field at fixed parameters, as arrays."""
        self._check(q, p)
        P = self.leaves(trainable=False)
        qv, pv = Value(q), Value(p)
        with ad.no_grad():
            dq, dp = self.field_graph(P, qv, pv)
        return dq.data, dp.data

    def dynamics(self) -> Dynamics:
        return Dynamics(field=self.field)

    def _check(self, q: np.ndarray, p: np.ndarray) -> None:
        if np.shape(q)[-1:] != (self.dim,) or np.shape(p) != np.shape(q):
            raise ValueError(f"{self.kind} model expects states of dimension {self.dim}, "
                             f"got {np.shape(q)} and {np.shape(p)}")

    def copy_params(self) -> Params:
        return {k: v.copy() for k, v in self.params.items()}


class MlpModel(Model):
    """Maps (q, p) straight to (dq/dt, dp/dt)."""

    kind = "mlp"

    def __init__(self, dim: int, net: MlpConfig):
        super().__init__(dim)
        self.net = MlpConfig(net.depth, net.width, net.activation, 2 * dim, 2 * dim)

    @classmethod
    def init(cls, dim: int, net: MlpConfig, seed: int) -> "MlpModel":
        m = cls(dim, net)
        m.params = mlp_init(m.net, np.random.default_rng(seed))
        return m

    @property
    def label(self) -> str:
        return f"MLP-{self.net.label}"

    def config(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "net": asdict(self.net)}

    def field_graph(self, P, q, p):
        out = mlp_apply(self.net, P, ad.concat([q, p], axis=-1))
        return out[..., : self.dim], out[..., self.dim:]


class HnnModel(Model):
    """A single MLP H(q, p); field is J grad H."""

    kind = "hnn"

    def __init__(self, dim: int, net: MlpConfig):
        super().__init__(dim)
        self.net = MlpConfig(net.depth, net.width, net.activation, 2 * dim, 1)

    @classmethod
    def init(cls, dim: int, net: MlpConfig, seed: int) -> "HnnModel":
        m = cls(dim, net)
        m.params = mlp_init(m.net, np.random.default_rng(seed))
        return m

    @property
    def label(self) -> str:
        return f"HNN-{self.net.label}"

    def config(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "net": asdict(self.net)}

    def energy_graph(self, P, q, p) -> Value:
        return mlp_apply(self.net, P, ad.concat([q, p], axis=-1)).sum()

    def energy(self, q: np.ndarray, p: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            h = mlp_apply(self.net, self.leaves(False), ad.concat([Value(q), Value(p)], axis=-1))
        return h.data[..., 0]

    def field_graph(self, P, q, p):
        if not q.requires_grad:
            q, p = Value(q.data, requires_grad=True), Value(p.data, requires_grad=True)
        with ad.enable_grad():
            dhdq, dhdp = ad.grad_graph(self.energy_graph(P, q, p), [q, p])
        return dhdp, -dhdq


class SghnModel(Model):
    """Separable graph Hamiltonian network.

    H(q, p) = sum_i T(p_i) + sum_i U(q_i) + sum_{(i, j) in mask} alpha_ij V(e_ij)

    ``T``, ``U`` and ``V`` are small MLPs shared by all nodes / edges. The edge
    input ``e_ij`` is ``q_j - q_i`` (``edge_input="diff"``) or the ordered pair
    ``(q_i, q_j)`` (``edge_input="pair"``). Either way ``alpha_ij`` and
    ``alpha_ji`` weight different terms, so non-symmetric potentials are
    representable. The diagonal of alpha is never used and stays zero.
    """

    kind = "sghn"
    separable = True

    def __init__(self, dim: int, net: MlpConfig = MlpConfig(), edge_input: str = "diff"):
        super().__init__(dim)
        if edge_input not in ("diff", "pair"):
            raise ValueError(f"edge_input must be 'diff' or 'pair', got {edge_input!r}")
        self.net = MlpConfig(net.depth, net.width, net.activation, 1, 1)
        self.edge_net = MlpConfig(net.depth, net.width, net.activation,
                                  1 if edge_input == "diff" else 2, 1)
        self.edge_input = edge_input
        self.edge_mask = ~np.eye(dim, dtype=bool)

    @classmethod
    def init(cls, dim: int, net: MlpConfig = MlpConfig(), seed: int = 0,
             edge_input: str = "diff") -> "SghnModel":
        m = cls(dim, net, edge_input)
        rng = np.random.default_rng(seed)
        m.params = {**mlp_init(m.net, rng, "t."), **mlp_init(m.net, rng, "u."),
                    **mlp_init(m.edge_net, rng, "v.")}
        alpha = rng.uniform(-0.1, 0.1, size=(dim, dim))
        np.fill_diagonal(alpha, 0.0)
        m.params["alpha"] = alpha
        return m

    @property
    def label(self) -> str:
        return "α-SGHN"

    def config(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "net": asdict(self.net),
                "edge_input": self.edge_input}

    @property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        return np.nonzero(self.edge_mask)

    def set_edge_mask(self, mask: np.ndarray) -> None:
        mask = np.asarray(mask, dtype=bool).copy()
        if mask.shape != (self.dim, self.dim):
            raise ValueError(f"edge mask must be {self.dim}x{self.dim}")
        np.fill_diagonal(mask, False)
        self.edge_mask = mask
        self.params["alpha"] = np.where(mask, self.params["alpha"], 0.0)

    def extract_alpha(self) -> np.ndarray:
        """Read-only copy of alpha (zero diagonal, zero outside the mask)."""
        a = np.where(self.edge_mask, self.params["alpha"], 0.0)
        a.setflags(write=False)
        return a

    # energy pieces
    def kinetic_graph(self, P, p: Value) -> Value:
        return mlp_apply(self.net, P, p.reshape(p.shape + (1,)), "t.").sum()

    def potential_graph(self, P, q: Value) -> Value:
        onsite = mlp_apply(self.net, P, q.reshape(q.shape + (1,)), "u.").sum()
        i, j = self.edges
        if len(i) == 0:
            return onsite
        qi, qj = q[..., i], q[..., j]
        if self.edge_input == "diff":
            e = (qj - qi).reshape(qi.shape + (1,))
        else:
            e = ad.concat([qi.reshape(qi.shape + (1,)), qj.reshape(qj.shape + (1,))], axis=-1)
        v = mlp_apply(self.edge_net, P, e, "v.").reshape(qi.shape)
        return onsite + (v * P["alpha"][i, j]).sum()

    def energy_graph(self, P, q: Value, p: Value) -> Value:
        return self.kinetic_graph(P, p) + self.potential_graph(P, q)

    def energy(self, q: np.ndarray, p: np.ndarray) -> float:
        """Total learned energy summed over any batch axes."""
        with ad.no_grad():
            return self.energy_graph(self.leaves(False), Value(q), Value(p)).item()

    def field_graph(self, P, q, p):
        if not q.requires_grad:
            q, p = Value(q.data, requires_grad=True), Value(p.data, requires_grad=True)
        with ad.enable_grad():
            dhdq, dhdp = ad.grad_graph(self.energy_graph(P, q, p), [q, p])
        return dhdp, -dhdq

    def force(self, q: np.ndarray) -> np.ndarray:
        """-dH/dq; depends on q only."""
        qv = Value(q, requires_grad=True)
        return -ad.grad(self.potential_graph(self.leaves(False), qv), [qv])[0]

    def velocity(self, p: np.ndarray) -> np.ndarray:
        """dH/dp = T'(p_i) per node; depends on p only."""
        pv = Value(p, requires_grad=True)
        return ad.grad(self.kinetic_graph(self.leaves(False), pv), [pv])[0]

    def field(self, q, p):
        self._check(q, p)
        return self.velocity(p), self.force(q)

    def dynamics(self) -> Dynamics:
        return Dynamics(force=self.force, velocity=self.velocity)


class OracleModel(Model):
    """The true lattice field, for harness checks. No parameters."""

    kind = "oracle"
    separable = True

    def __init__(self, spec: LatticeSpec):
        super().__init__(spec.dim)
        self.spec = spec

    def config(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "spec": self.spec.to_dict()}

    def field(self, q, p):
        self._check(q, p)
        return vector_field(self.spec, PhaseState(q, p))

    def field_graph(self, P, q, p):
        dq, dp = self.field(q.data, p.data)
        return Value(dq), Value(dp)

    def dynamics(self) -> Dynamics:
        return Dynamics(force=lambda q: true_force(self.spec, q))


MODEL_KINDS = ("mlp", "hnn", "sghn")


def build_model(kind: str, dim: int, net: MlpConfig, seed: int, edge_input: str = "diff") -> Model:
    if kind == "mlp":
        return MlpModel.init(dim, net, seed)
    if kind == "hnn":
        return HnnModel.init(dim, net, seed)
    if kind == "sghn":
        return SghnModel.init(dim, net, seed, edge_input)
    raise ValueError(f"unknown model kind {kind!r}; allowed: {list(MODEL_KINDS)}")


def model_from_config(cfg: dict) -> Model:
    """Empty (parameter-less) model matching a ``Model.config()`` dict."""
    kind = cfg["kind"]
    if kind == "oracle":
        return OracleModel(LatticeSpec.from_dict(cfg["spec"]))
    net = MlpConfig(**cfg["net"])
    if kind == "mlp":
        return MlpModel(cfg["dim"], net)
    if kind == "hnn":
        return HnnModel(cfg["dim"], net)
    if kind == "sghn":
        return SghnModel(cfg["dim"], net, cfg.get("edge_input", "diff"))
    raise ValueError(f"unknown model kind {kind!r}")


def expected_shapes(model: Model) -> dict[str, tuple[int, ...]]:
    """Parameter shapes implied by a model's configuration."""
    if isinstance(model, OracleModel):
        return {}
    if isinstance(model, SghnModel):
        out = {f"t.{k}": s for k, s in model.net.shapes()}
        out.update({f"u.{k}": s for k, s in model.net.shapes()})
        out.update({f"v.{k}": s for k, s in model.edge_net.shapes()})
        out["alpha"] = (model.dim, model.dim)
        return out
    return dict(model.net.shapes())
