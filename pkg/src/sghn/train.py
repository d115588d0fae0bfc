"""Datasets, losses and optimisation.

Training matches model vector fields to derivative targets. Targets come from
the true field (``Oracle``) or from central differences of the sampled
trajectories (``FiniteDiff``), the trajectories-only setting.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import store
from .autodiff import Value
from .integrate import Dynamics, IntegrationError, IntegratorConfig, Trajectory, integrate, subsample
from .lattice import LatticeSpec, PhaseState, force, vector_field
from .links import LinkGraph, complete_graph, direct_links, extract_links
from .models import Model, SghnModel, expected_shapes, model_from_config

log = logging.getLogger(__name__)

TARGET_MODES = ("Oracle", "FiniteDiff")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data

@dataclass(frozen=True)
class IcSampler:
    """Initial conditions, one independent stream per trajectory.

    ``Uniform01``: q_i, p_i ~ U(0, 1).
    ``SineDisplacement``: q_i = lam_i sin(i pi / (D - 1)) (0-based i),
    lam_i ~ U(0, 1), p = 0.
    """

    kind: str = "Uniform01"
    seed: int = 0
    stream: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("Uniform01", "SineDisplacement"):
            raise ValueError(f"unknown sampler {self.kind!r}; allowed: ['SineDisplacement', 'Uniform01']")

    def draw(self, dim: int, n: int) -> PhaseState:
        children = np.random.SeedSequence([self.seed, self.stream]).spawn(n)
        q = np.empty((n, dim))
        p = np.empty((n, dim))
        for k, child in enumerate(children):
            rng = np.random.default_rng(child)
            if self.kind == "Uniform01":
                q[k] = rng.uniform(0.0, 1.0, dim)
                p[k] = rng.uniform(0.0, 1.0, dim)
            else:
                lam = rng.uniform(0.0, 1.0, dim)
                q[k] = lam * np.sin(np.arange(dim) * np.pi / (dim - 1))
                p[k] = 0.0
        return PhaseState(q, p)


@dataclass
class Dataset:
    """Flat (state, derivative) pairs, trajectory-major.

    ``q, p, dq, dp`` have shape ``(S, D)`` with
    ``S = n_traj * samples_per_traj``.
    """

    q: np.ndarray
    p: np.ndarray
    dq: np.ndarray
    dp: np.ndarray
    n_traj: int
    samples_per_traj: int
    dt_sample: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.q)
        if not (len(self.p) == len(self.dq) == len(self.dp) == n):
            raise ValueError("inputs and targets must have equal length")
        if n != self.n_traj * self.samples_per_traj:
            raise ValueError("sample count does not match n_traj * samples_per_traj")
        for a in (self.q, self.p, self.dq, self.dp):
            if not np.isfinite(a).all():
                raise ValueError("dataset contains non-finite values")

    def __len__(self) -> int:
        return len(self.q)

    @property
    def dim(self) -> int:
        return self.q.shape[1]

    def trajectories(self) -> Trajectory:
        """Samples regrouped as a batched trajectory ``(T, n_traj, D)``."""
        shape = (self.n_traj, self.samples_per_traj, self.dim)
        q = self.q.reshape(shape).transpose(1, 0, 2)
        p = self.p.reshape(shape).transpose(1, 0, 2)
        t0 = self.provenance.get("t_first", 0.0)
        return Trajectory(t0, self.dt_sample, q, p)

    def save(self, path) -> None:
        meta = {"n_traj": self.n_traj, "samples_per_traj": self.samples_per_traj,
                "dt_sample": self.dt_sample, "provenance": self.provenance}
        inputs = np.concatenate([self.q, self.p], axis=1)
        targets = np.concatenate([self.dq, self.dp], axis=1)
        store.write(path, "dataset", meta, {"inputs": inputs, "targets": targets})

    @classmethod
    def load(cls, path) -> "Dataset":
        meta, arrays = store.read(path, "dataset")
        try:
            inputs, targets = arrays["inputs"], arrays["targets"]
        except KeyError as exc:
            raise store.CorruptFileError(f"{path}: missing block {exc}") from None
        if inputs.shape != targets.shape or inputs.ndim != 2 or inputs.shape[1] % 2:
            raise store.ShapeMismatchError(f"{path}: inputs {inputs.shape} / targets {targets.shape}")
        d = inputs.shape[1] // 2
        return cls(inputs[:, :d].copy(), inputs[:, d:].copy(), targets[:, :d].copy(),
                   targets[:, d:].copy(), meta["n_traj"], meta["samples_per_traj"],
                   meta["dt_sample"], meta["provenance"])


def derivative_targets(traj: Trajectory, mode: str = "Oracle",
                       spec: LatticeSpec | None = None) -> tuple[Trajectory, np.ndarray, np.ndarray]:
    """Return ``(states, dq, dp)`` aligned sample for sample.

    ``Oracle`` evaluates the true field of ``spec``; ``FiniteDiff`` uses
    central differences and drops both end samples.
    """
    if mode == "Oracle":
        if spec is None:
            raise ValueError("Oracle targets need the lattice spec")
        dq, dp = vector_field(spec, PhaseState(traj.q, traj.p))
        return traj, dq, dp
    if mode == "FiniteDiff":
        if len(traj) < 3:
            raise ValueError(f"finite differences need at least 3 samples, got {len(traj)}")
        two_dt = 2.0 * traj.dt_sample
        dq = (traj.q[2:] - traj.q[:-2]) / two_dt
        dp = (traj.p[2:] - traj.p[:-2]) / two_dt
        inner = Trajectory(traj.t0 + traj.dt_sample, traj.dt_sample, traj.q[1:-1], traj.p[1:-1])
        return inner, dq, dp
    raise ValueError(f"unknown target mode {mode!r}; allowed: {list(TARGET_MODES)}")


def simulate(spec: LatticeSpec, s0: PhaseState, t_end: float,
             cfg: IntegratorConfig = IntegratorConfig()) -> tuple[Trajectory, list[int]]:
    """Integrate a batch of initial states ``(n, D)`` under the true dynamics.

    Returns the dense trajectory of the survivors and the indices of initial
    states whose integration failed.
    """
    dyn = Dynamics(force=lambda q: force(spec, q))
    try:
        return integrate(dyn, s0, t_end, cfg), []
    except IntegrationError:
        pass
    kept, failed = [], []
    for k in range(len(s0.q)):
        try:
            kept.append(integrate(dyn, PhaseState(s0.q[k], s0.p[k]), t_end, cfg))
        except IntegrationError as exc:
            log.warning("trajectory %d failed at step %s", k, exc.step)
            failed.append(k)
    if not kept:
        raise IntegrationError("every trajectory failed")
    q = np.stack([t.q for t in kept], axis=1)
    p = np.stack([t.p for t in kept], axis=1)
    return Trajectory(0.0, cfg.h, q, p), failed


def generate_dataset(spec: LatticeSpec, n_traj: int = 50, t_end: float = 5.0,
                     cfg: IntegratorConfig = IntegratorConfig(),
                     sampler: IcSampler = IcSampler(), stride: int = 20,
                     target_mode: str = "Oracle") -> Dataset:
    """Integrate ``n_traj`` initial conditions with SRKN5, subsample every
    ``stride`` steps and pair each sample with its derivative target."""
    if target_mode not in TARGET_MODES:
        raise ValueError(f"unknown target mode {target_mode!r}; allowed: {list(TARGET_MODES)}")
    dense, failed = simulate(spec, sampler.draw(spec.dim, n_traj), t_end, cfg)
    sampled = subsample(dense, stride)
    states, dq, dp = derivative_targets(sampled, target_mode, spec)
    # (T, n, D) -> trajectory-major (n * T, D)
    flat = lambda a: a.transpose(1, 0, 2).reshape(-1, spec.dim)
    prov = {"spec": spec.to_dict(), "n_traj": n_traj, "t_end": t_end, "h": cfg.h,
            "stride": stride, "sampler": asdict(sampler), "target_mode": target_mode,
            "failed": failed, "t_first": states.t0}
    return Dataset(flat(states.q), flat(states.p), flat(dq), flat(dp),
                   n_traj - len(failed), len(states), states.dt_sample, prov)


# ---------------------------------------------------------------------------
# objective

def _loss_graph(model: Model, P: dict[str, Value], q: np.ndarray, p: np.ndarray,
                dq: np.ndarray, dp: np.ndarray) -> Value:
    qv, pv = Value(q, requires_grad=True), Value(p, requires_grad=True)
    fq, fp = model.field_graph(P, qv, pv)
    sq = ad.square(fq - dq).sum() + ad.square(fp - dp).sum()
    return sq * (1.0 / (2 * q.size))


def loss(model: Model, batch: Dataset | tuple) -> float:
    """Mean squared error between the model field and the targets, averaged
    over samples and all 2D coordinates."""
    q, p, dq, dp = (batch.q, batch.p, batch.dq, batch.dp) if isinstance(batch, Dataset) else batch
    mq, mp = model.field(q, p)
    return float((np.sum((mq - dq) ** 2) + np.sum((mp - dp) ** 2)) / (2 * np.size(q)))


# ---------------------------------------------------------------------------
# optimisation

@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant learning rate on half-open segments
    ``[0, b0), [b0, b1), [b1, epochs)``."""

    rates: tuple[float, ...] = (1e-3, 1e-4, 1e-5)
    boundaries: tuple[int, ...] = (3500, 5000)
    epochs: int = 10000

    def __post_init__(self) -> None:
        if len(self.rates) != len(self.boundaries) + 1:
            raise ValueError("need exactly one more rate than boundaries")
        if any(r <= 0 for r in self.rates) or any(a < b for a, b in zip(self.rates, self.rates[1:])):
            raise ValueError(f"rates must be positive and non-increasing, got {self.rates}")
        if list(self.boundaries) != sorted(self.boundaries):
            raise ValueError("boundaries must be increasing")

    def scaled(self, epochs: int) -> "Schedule":
        """Same shape over a different budget (boundaries scale proportionally)."""
        f = epochs / self.epochs
        return replace(self, boundaries=tuple(int(round(b * f)) for b in self.boundaries), epochs=epochs)


def lr_at(epoch: int, schedule: Schedule) -> float:
    if not 0 <= epoch < schedule.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.epochs})")
    k = int(np.searchsorted(schedule.boundaries, epoch, side="right"))
    return schedule.rates[k]


def table_rates(model_kind: str, activation: str, system: str) -> tuple[float, float, float]:
    """Per-model piecewise rates used for the published runs.

    silu baselines use (1e-2, 5e-3, 1e-4) except on the rotator lattice;
    everything else uses (1e-3, 1e-4, 1e-5).
    """
    if model_kind in ("mlp", "hnn") and activation == "silu" and system != "Rotator":
        return (1e-2, 5e-3, 1e-4)
    return (1e-3, 1e-4, 1e-5)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()}, 0)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              rate: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam update; returns new parameter arrays and the state."""
    if params.keys() != grads.keys():
        raise ValueError("params and grads name different parameters")
    t = state.step + 1
    new = {}
    for k, theta in params.items():
        g = grads[k]
        if g.shape != theta.shape or state.m[k].shape != theta.shape:
            raise ValueError(f"shape mismatch for {k}: {theta.shape} vs {g.shape}")
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new[k] = theta - rate * m_hat / (np.sqrt(v_hat) + eps)
    state.step = t
    return new, state


@dataclass(frozen=True)
class SghnOptions:
    l1: float = 1e-4
    tau: float = 0.1
    phase1_fraction: float = 0.6


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10000
    batch_size: int = 256
    schedule: Schedule = Schedule()
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sghn: SghnOptions = SghnOptions()

    def with_budget(self, epochs: int) -> "TrainConfig":
        return replace(self, epochs=epochs, schedule=self.schedule.scaled(epochs))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    penalty: float = 0.0


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord]
    adam: AdamState
    epoch: int


def _batches(n: int, size: int, seed: int, epoch: int):
    perm = np.random.default_rng(np.random.SeedSequence([seed, 7, epoch])).permutation(n)
    for lo in range(0, n, size):
        yield perm[lo:lo + size]


def train(model: Model, dataset: Dataset, cfg: TrainConfig = TrainConfig(), *,
          start_epoch: int = 0, stop_epoch: int | None = None, adam: AdamState | None = None,
          l1: float = 0.0, on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Minibatch Adam on the derivative-matching loss.

    Epochs run from ``start_epoch`` to ``stop_epoch`` (default ``cfg.epochs``)
    using the global schedule, so a resumed or multi-phase run sees the same
    learning rates as an uninterrupted one. ``l1`` adds ``l1 * sum|alpha|``
    for SGHN models.
    """
    if dataset.dim != model.dim:
        raise TrainingError(f"dataset dimension {dataset.dim} does not match model dimension {model.dim}")
    stop = cfg.epochs if stop_epoch is None else stop_epoch
    schedule = cfg.schedule if cfg.schedule.epochs == cfg.epochs else cfg.schedule.scaled(cfg.epochs)
    adam = adam or AdamState.zeros_like(model.params)
    names = list(model.params)
    sghn = isinstance(model, SghnModel)
    history: list[EpochRecord] = []
    n = len(dataset)
    for epoch in range(start_epoch, stop):
        rate = lr_at(epoch, schedule)
        total = pen_total = 0.0
        for idx in _batches(n, cfg.batch_size, cfg.seed, epoch):
            P = model.leaves(True)
            data_loss = _loss_graph(model, P, dataset.q[idx], dataset.p[idx],
                                    dataset.dq[idx], dataset.dp[idx])
            objective = data_loss
            pen = 0.0
            if sghn and l1 > 0:
                i, j = model.edges
                penalty = l1 * ad.abs_(P["alpha"][i, j]).sum()
                objective = data_loss + penalty
                pen = penalty.item()
            if not np.isfinite(objective.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch of {len(idx)} samples "
                                    f"(data loss {data_loss.item()!r}, rate {rate})")
            grads = dict(zip(names, ad.grad(objective, [P[k] for k in names])))
            model.params, adam = adam_step(model.params, grads, adam, rate,
                                           cfg.beta1, cfg.beta2, cfg.eps)
            if sghn:
                model.params["alpha"] = np.where(model.edge_mask, model.params["alpha"], 0.0)
            total += data_loss.item() * len(idx)
            pen_total += pen * len(idx)
        rec = EpochRecord(epoch, rate, total / n, pen_total / n)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(model, history, adam, stop)


def train_sghn_two_phase(dataset: Dataset, cfg: TrainConfig = TrainConfig(),
                         model: SghnModel | None = None,
                         on_epoch: Callable[[EpochRecord], None] | None = None, *,
                         start_epoch: int = 0, adam: AdamState | None = None,
                         links_fixed: bool = False
                         ) -> tuple[SghnModel, np.ndarray, LinkGraph, TrainResult]:
    """Phase 1 trains on the complete graph with an L1 penalty on alpha; the
    links read off alpha then fix the edge mask for a penalty-free phase 2.

    ``start_epoch``/``adam`` resume an interrupted run; pass
    ``links_fixed=True`` when the model's edge mask already came from phase 1.
    """
    model = model or SghnModel.init(dataset.dim, seed=cfg.seed)
    opts = cfg.sghn
    split = int(round(opts.phase1_fraction * cfg.epochs))
    history: list[EpochRecord] = []
    if links_fixed:
        i, j = model.edges
        links = LinkGraph(frozenset((int(a), int(b)) for a, b in zip(i, j) if a < b), opts.tau)
    else:
        if start_epoch < split:
            first = train(model, dataset, cfg, start_epoch=start_epoch, stop_epoch=split,
                          adam=adam, l1=opts.l1, on_epoch=on_epoch)
            history, adam, start_epoch = first.history, first.adam, split
        alpha = model.extract_alpha()
        links = complete_graph(model.dim) if opts.tau == 0 else extract_links(alpha, opts.tau)
        if not links.edges:
            raise TrainingError("no links extracted; check l1 and tau")
        model.set_edge_mask(links.mask(model.dim))
    links = direct_links(model.extract_alpha(), links)
    second = train(model, dataset, cfg, start_epoch=start_epoch, adam=adam, on_epoch=on_epoch)
    result = TrainResult(model, history + second.history, second.adam, second.epoch)
    return model, model.extract_alpha(), links, result


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    model: Model
    seed: int
    epoch: int
    adam: AdamState | None
    meta: dict


def save_checkpoint(model: Model, path, *, seed: int = 0, epoch: int = 0,
                    adam: AdamState | None = None, meta: dict | None = None) -> None:
    arrays = dict(model.params)
    if isinstance(model, SghnModel):
        arrays["edge_mask"] = model.edge_mask.astype(np.float64)
    if adam is not None:
        arrays.update({f"adam.m.{k}": a for k, a in adam.m.items()})
        arrays.update({f"adam.v.{k}": a for k, a in adam.v.items()})
    info = {"config": model.config(), "seed": seed, "epoch": epoch,
            "adam_step": None if adam is None else adam.step, "extra": meta or {}}
    store.write(path, "checkpoint", info, arrays)


def load_checkpoint(path) -> Checkpoint:
    info, arrays = store.read(path, "checkpoint")
    try:
        model = model_from_config(info["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise store.CorruptFileError(f"{path}: bad model config ({exc})") from None
    for name, shape in expected_shapes(model).items():
        if name not in arrays:
            raise store.CorruptFileError(f"{path}: missing parameter {name}")
        if tuple(arrays[name].shape) != tuple(shape):
            raise store.ShapeMismatchError(
                f"{path}: parameter {name} has shape {arrays[name].shape}, model expects {shape}")
        model.params[name] = arrays[name]
    if isinstance(model, SghnModel):
        mask = arrays.get("edge_mask")
        if mask is None or mask.shape != (model.dim, model.dim):
            raise store.ShapeMismatchError(f"{path}: edge mask missing or misshapen")
        model.edge_mask = mask.astype(bool)
    adam = None
    if info.get("adam_step") is not None:
        adam = AdamState({k: arrays[f"adam.m.{k}"] for k in model.params},
                         {k: arrays[f"adam.v.{k}"] for k in model.params}, info["adam_step"])
    return Checkpoint(model, info["seed"], info["epoch"], adam, info.get("extra", {}))


def write_loss_csv(history: list[EpochRecord], path, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("w" if new else "a", encoding="utf-8") as fh:
        if new:
            fh.write("epoch,lr,loss,penalty\n")
        for r in history:
            fh.write(f"{r.epoch},{r.lr!r},{r.loss!r},{r.penalty!r}\n")
