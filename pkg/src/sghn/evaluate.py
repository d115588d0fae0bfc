"""Rollouts, error metrics, conserved-quantity tracking and the mu sweep."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .integrate import IntegrationError, IntegratorConfig, Trajectory, integrate, subsample
from .lattice import (ConservedDescriptor, Kind, LatticeError, LatticeSpec, PhaseState,
                      _is_toda_like, conserved_set, conserved_value, hamiltonian)
from .links import LinkGraph, direct_links, extract_links, write_links  # noqa: F401  (re-export)
from .models import MlpConfig, Model, build_model
from .train import (Dataset, IcSampler, Schedule, TrainConfig, generate_dataset, loss, table_rates,
                    train, train_sghn_two_phase)

log = logging.getLogger(__name__)


class DivergenceError(IntegrationError):
    """A learned field blew up during rollout."""


# ---------------------------------------------------------------------------
# rollout

def rollout(model: Model, s0: PhaseState, t_end: float = 15.0, h: float = 0.0025,
            stride: int = 20) -> Trajectory:
    """Integrate a model's field from ``s0`` and subsample every ``stride``
    steps (0.05 time units at the default step).

    Separable models use SRKN5, others RK4. Raises :class:`DivergenceError`
    with the blow-up time.
    """
    scheme = "Srkn5" if model.separable else "Rk4"
    try:
        dense = integrate(model.dynamics(), s0, t_end, IntegratorConfig(h, scheme))
    except IntegrationError as exc:
        raise DivergenceError(f"{model.label} rollout diverged at t={exc.time:g}",
                              step=exc.step, time=exc.time) from None
    return subsample(dense, stride)


def rollout_batch(model: Model, s0: PhaseState, t_end: float = 15.0, h: float = 0.0025,
                  stride: int = 20) -> tuple[Trajectory, list[float | None]]:
    """Roll out a batch ``(n, D)``; diverged members come back as NaN with
    their blow-up time, the rest are unaffected."""
    try:
        return rollout(model, s0, t_end, h, stride), [None] * len(s0.q)
    except DivergenceError:
        pass
    trajs, blowups = [], []
    for k in range(len(s0.q)):
        try:
            trajs.append(rollout(model, PhaseState(s0.q[k], s0.p[k]), t_end, h, stride))
            blowups.append(None)
        except DivergenceError as exc:
            trajs.append(None)
            blowups.append(exc.time)
    length = next((len(t) for t in trajs if t is not None), round(t_end / h) // stride + 1)
    nan = np.full((length, s0.dim), np.nan)
    q = np.stack([nan if t is None else t.q for t in trajs], axis=1)
    p = np.stack([nan if t is None else t.p for t in trajs], axis=1)
    return Trajectory(0.0, h * stride, q, p), blowups


# ---------------------------------------------------------------------------
# metrics

def _aligned(pred: Trajectory, truth: Trajectory) -> None:
    if pred.q.shape != truth.q.shape:
        raise ValueError(f"trajectories are misaligned: {pred.q.shape} vs {truth.q.shape}")


def trajectory_mse(pred: Trajectory, truth: Trajectory) -> tuple[np.ndarray, np.ndarray | float]:
    """Per-time ``sum_i (q_i - q^_i)^2 + (p_i - p^_i)^2`` and its time average."""
    _aligned(pred, truth)
    per_time = ((pred.q - truth.q) ** 2 + (pred.p - truth.p) ** 2).sum(axis=-1)
    mean = per_time.mean(axis=0)
    return per_time, (mean if np.ndim(mean) else float(mean))


def _check_descriptor(spec: LatticeSpec, desc: ConservedDescriptor) -> None:
    if desc in conserved_set(spec):
        return
    if desc.name == "TodaC" and _is_toda_like(spec) and 1 <= desc.order <= spec.dim:
        return
    raise LatticeError(f"{desc.label} is not conserved by {spec.kind.value}")


def conserved_series(spec: LatticeSpec, traj: Trajectory, desc: ConservedDescriptor) -> np.ndarray:
    _check_descriptor(spec, desc)
    return np.asarray(conserved_value(spec, PhaseState(traj.q, traj.p), desc))


def conserved_mse(spec: LatticeSpec, pred: Trajectory, desc: ConservedDescriptor,
                  reference=None) -> np.ndarray | float:
    """Time-mean of ``(Q(pred_t) - Q_ref)^2``.

    ``Q_ref`` defaults to the quantity at the first predicted state, which is
    the true initial condition for rollouts.
    """
    series = conserved_series(spec, pred, desc)
    ref = series[0] if reference is None else reference
    out = ((series - ref) ** 2).mean(axis=0)
    return out if np.ndim(out) else float(out)


def mape(pred, true, return_excluded: bool = False):
    """Mean absolute percentage error averaged over entries, then time.

    Arrays are ``(T,)`` (a scalar series) or ``(T, N)``. Entries whose true
    magnitude is below 1e-12 are undefined and skipped; pass
    ``return_excluded=True`` to also get how many were skipped.
    """
    pred = np.asarray(pred, dtype=float)
    true = np.asarray(true, dtype=float)
    if pred.shape != true.shape:
        raise ValueError(f"shapes differ: {pred.shape} vs {true.shape}")
    if true.ndim == 1:
        pred, true = pred[:, None], true[:, None]
    ok = np.abs(true) >= 1e-12
    rel = np.where(ok, np.abs(pred - true) / np.where(ok, np.abs(true), 1.0), 0.0)
    counts = ok.sum(axis=1)
    rows = counts > 0
    value = float((rel.sum(axis=1)[rows] / counts[rows]).mean()) if rows.any() else math.nan
    excluded = int((~ok).sum())
    return (value, excluded) if return_excluded else value


# ---------------------------------------------------------------------------
# per-sample evaluation

@dataclass
class MetricsRecord:
    sample: int
    test_loss: float
    trajectory_mse: float
    conserved: dict[str, float]
    mape: dict[str, float]
    n_t: int
    mape_excluded: int = 0
    diverged_at: float | None = None


def evaluate_model(model: Model, spec: LatticeSpec, test: Dataset, h: float = 0.0025,
                   stride: int | None = None) -> list[MetricsRecord]:
    """Roll out every test trajectory from its initial state and score it.

    The test set must hold full (Oracle-target) trajectories.
    """
    truth = test.trajectories()
    stride = stride or int(round(test.dt_sample / h))
    t_end = test.dt_sample * (len(truth) - 1)
    s0 = truth[0]
    pred, blowups = rollout_batch(model, s0, t_end, h, stride)
    descs = conserved_set(spec)
    per = test.samples_per_traj
    records = []
    for k in range(test.n_traj):
        sl = slice(k * per, (k + 1) * per)
        tl = loss(model, (test.q[sl], test.p[sl], test.dq[sl], test.dp[sl]))
        pk, tk = pred.select(k), truth.select(k)
        if blowups[k] is not None:
            records.append(MetricsRecord(k, tl, math.nan, {d.label: math.nan for d in descs},
                                         {"trajectory": math.nan, "energy": math.nan},
                                         len(tk), 0, blowups[k]))
            continue
        _, tmse = trajectory_mse(pk, tk)
        cons = {d.label: conserved_mse(spec, pk, d, conserved_value(spec, tk[0], d)) for d in descs}
        state_pred = np.concatenate([pk.q, pk.p], axis=-1)
        state_true = np.concatenate([tk.q, tk.p], axis=-1)
        traj_mape, excl = mape(state_pred, state_true, return_excluded=True)
        e_pred = hamiltonian(spec, PhaseState(pk.q, pk.p))
        e_true = hamiltonian(spec, PhaseState(tk.q, tk.p))
        records.append(MetricsRecord(k, tl, tmse, cons,
                                     {"trajectory": traj_mape, "energy": mape(e_pred, e_true)},
                                     len(tk), excl))
    return records


def _flatten(rec: MetricsRecord) -> dict:
    row = {"sample": rec.sample, "test_loss": rec.test_loss, "trajectory_mse": rec.trajectory_mse}
    row.update({f"{k}_mse": v for k, v in rec.conserved.items()})
    row.update({f"{k}_mape": v for k, v in rec.mape.items()})
    row.update({"n_t": rec.n_t, "mape_excluded": rec.mape_excluded,
                "diverged_at": "" if rec.diverged_at is None else rec.diverged_at})
    return row


def summarize(records: list[MetricsRecord]) -> dict[str, dict[str, float]]:
    """Mean and (population) std of every numeric column over samples."""
    rows = [_flatten(r) for r in records]
    keys = [k for k in rows[0] if k not in ("sample", "n_t", "mape_excluded", "diverged_at")]
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in rows], dtype=float)
        out[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    return out


def write_metrics(records: list[MetricsRecord], out_dir, label: str, spec: LatticeSpec) -> tuple[Path, Path]:
    """``metrics.csv`` (one row per sample plus mean/std rows) and ``metrics.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [_flatten(r) for r in records]
    summary = summarize(records)
    csv_path = out / "metrics.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        for stat in ("mean", "std"):
            agg = {k: "" for k in rows[0]}
            agg["sample"] = stat
            agg.update({k: repr(v[stat]) for k, v in summary.items()})
            w.writerow(agg)
    json_path = out / "metrics.json"
    doc = {"model": label, "system": spec.to_dict(), "n_samples": len(records),
           "diverged": sum(r.diverged_at is not None for r in records), "summary": summary}
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    return csv_path, json_path


# ---------------------------------------------------------------------------
# integrability sweep

@dataclass(frozen=True)
class SweepSettings:
    kind: str = "FkToda"
    n: int = 5
    mu_grid: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    models: tuple[str, ...] = ("sghn", "hnn", "mlp")
    epochs: int = 2000
    n_traj: int = 50
    n_test: int = 20
    t_end: float = 5.0
    t_end_test: float = 15.0
    seed: int = 0
    sghn_net: MlpConfig = MlpConfig(1, 32, "tanh")
    hnn_net: MlpConfig = MlpConfig(1, 25, "silu")
    mlp_net: MlpConfig = MlpConfig(1, 50, "silu")
    batch_size: int = 256


@dataclass
class SweepRow:
    mu: float
    model: str
    trajectory_mape: float
    energy_mape: float
    status: str = "ok"
    message: str = ""


def _sweep_cell(args: tuple[SweepSettings, float, str, int]) -> SweepRow:
    st, mu, kind, cell_seed = args
    spec = LatticeSpec(Kind(st.kind), st.n, mu=mu)
    try:
        data = generate_dataset(spec, st.n_traj, st.t_end, sampler=IcSampler(seed=cell_seed))
        test = generate_dataset(spec, st.n_test, st.t_end_test, sampler=IcSampler(seed=cell_seed, stream=1))
        net = {"sghn": st.sghn_net, "hnn": st.hnn_net, "mlp": st.mlp_net}[kind]
        rates = table_rates(kind, net.activation, st.kind)
        cfg = TrainConfig(epochs=st.epochs, batch_size=st.batch_size, seed=cell_seed,
                          schedule=Schedule(rates).scaled(st.epochs))
        model = build_model(kind, spec.dim, net, cell_seed)
        if kind == "sghn":
            model, *_ = train_sghn_two_phase(data, cfg, model)
        else:
            train(model, data, cfg)
        recs = evaluate_model(model, spec, test)
    except Exception as exc:  # one failed cell must not sink the table
        log.warning("sweep cell mu=%s model=%s failed: %s", mu, kind, exc)
        return SweepRow(mu, kind, math.nan, math.nan, "failed", str(exc))
    ok = [r for r in recs if r.diverged_at is None]
    if not ok:
        return SweepRow(mu, kind, math.nan, math.nan, "diverged", "all test rollouts diverged")
    return SweepRow(mu, kind,
                    float(np.mean([r.mape["trajectory"] for r in ok])),
                    float(np.mean([r.mape["energy"] for r in ok])),
                    "ok" if len(ok) == len(recs) else "partial",
                    "" if len(ok) == len(recs) else f"{len(recs) - len(ok)} rollouts diverged")


def mu_sweep(settings: SweepSettings = SweepSettings(), workers: int = 1) -> list[SweepRow]:
    """Train and score every (mu, model) cell; mean MAPE over the test samples.

    Each cell gets its own seed derived from the run seed and the cell index,
    so results do not depend on ``workers`` or execution order.
    """
    if not settings.mu_grid or min(settings.mu_grid) < 0 or max(settings.mu_grid) > 1:
        raise ValueError("mu grid must be a non-empty subset of [0, 1]")
    if settings.kind not in ("FkToda", "FputToda"):
        raise ValueError(f"mu sweep needs a hybrid system, got {settings.kind}")
    cells = []
    for a, mu in enumerate(settings.mu_grid):
        for b, kind in enumerate(settings.models):
            seed = int(np.random.SeedSequence([settings.seed, a, b]).generate_state(1)[0])
            cells.append((settings, float(mu), kind, seed))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_sweep_cell, cells))
    return [_sweep_cell(c) for c in cells]


def write_sweep(rows: list[SweepRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(asdict(rows[0])))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(r).items()})
    return path


def format_sci(x: float, digits: int = 2) -> str:
    """``4.26E-7`` style: no exponent padding, no ``+`` sign."""
    if not np.isfinite(x):
        return "n/a"
    mant, exp = f"{x:.{digits}E}".split("E")
    return f"{mant}E{int(exp)}"


def format_pm(mean: float, std: float) -> str:
    return f"{format_sci(mean)} ± {format_sci(std)}"
