"""``sghn`` command line: generate, train, eval, links, sweep, report.

Every subcommand reads one JSON config (``--config``; defaults apply when it
is omitted) and writes under the run directory (``--out`` or the config's
``out``). Exit status is 0 on success, 1 for a bad config and 2 when the
run itself fails.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import store
from .config import ConfigError, ExperimentConfig, load_config
from .integrate import IntegrationError
from .lattice import LatticeError, LatticeSpec, conserved_set
from .links import LinkError, direct_links, extract_links, write_links
from .models import OracleModel, SghnModel, build_model
from .train import (Dataset, TrainingError, generate_dataset, load_checkpoint, save_checkpoint,
                    train, train_sghn_two_phase, write_loss_csv)

log = logging.getLogger("sghn")

TRAIN_FILE = "data/train.ds"
TEST_FILE = "data/test.ds"
CHECKPOINT = "model.ckpt"


class RunError(RuntimeError):
    """Missing inputs or a failed stage; maps to exit status 2."""


def _dataset(run: Path, name: str) -> Dataset:
    path = run / name
    if not path.exists():
        raise RunError(f"missing input {path}; run `sghn generate` first")
    return Dataset.load(path)


def _check_spec(data: Dataset, spec: LatticeSpec, path: str) -> None:
    stored = data.provenance.get("spec")
    if stored is not None and LatticeSpec.from_dict(stored) != spec:
        raise RunError(f"{path} was generated for {stored}, config asks for {spec.to_dict()}")


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(cfg: ExperimentConfig, run: Path) -> int:
    spec = cfg.spec()
    d = cfg.data
    train_set = generate_dataset(spec, d.n_traj, d.t_end, cfg.integrator(), cfg.sampler(0),
                                 d.stride, d.target_mode)
    test_set = generate_dataset(spec, cfg.eval.n_test, cfg.eval.t_end_test, cfg.integrator(),
                                cfg.sampler(0).__class__(d.sampler, cfg.eval.seed, 1), d.stride, "Oracle")
    train_set.save(run / TRAIN_FILE)
    test_set.save(run / TEST_FILE)
    for name, ds in (("train", train_set), ("test", test_set)):
        failed = ds.provenance["failed"]
        note = f", {len(failed)} trajectories dropped" if failed else ""
        print(f"{name}: {len(ds)} pairs ({ds.n_traj} trajectories x {ds.samples_per_traj} samples{note})")
    return 0


def cmd_train(cfg: ExperimentConfig, run: Path, resume: bool = False) -> int:
    spec = cfg.spec()
    if cfg.model.kind == "oracle":
        raise ConfigError("the oracle model has nothing to train")
    data = _dataset(run, TRAIN_FILE)
    _check_spec(data, spec, TRAIN_FILE)
    tc = cfg.train_config()
    ckpt_path = run / CHECKPOINT
    loss_path = run / "loss.csv"
    start, adam, links_fixed = 0, None, False
    if resume:
        if not ckpt_path.exists():
            raise RunError(f"--resume given but {ckpt_path} does not exist")
        ck = load_checkpoint(ckpt_path)
        model, start, adam = ck.model, ck.epoch, ck.adam
        links_fixed = bool(ck.meta.get("links_fixed", False))
        if model.dim != spec.dim:
            raise RunError(f"checkpoint dimension {model.dim} does not match system dimension {spec.dim}")
        if start >= tc.epochs:
            print(f"checkpoint already at epoch {start}; budget is {tc.epochs}")
            return 0
    else:
        model = build_model(cfg.model.kind, spec.dim, cfg.model.net(), cfg.train.seed, cfg.model.edge_input)
    if data.dim != model.dim:
        raise RunError(f"dataset dimension {data.dim} does not match model dimension {model.dim}")

    if isinstance(model, SghnModel):
        model, alpha, links, res = train_sghn_two_phase(data, tc, model, start_epoch=start, adam=adam,
                                                        links_fixed=links_fixed)
        write_links(links, alpha, run)
        links_fixed = True
    else:
        res = train(model, data, tc, start_epoch=start, adam=adam)
    write_loss_csv(res.history, loss_path, append=resume)
    save_checkpoint(model, ckpt_path, seed=cfg.train.seed, epoch=res.epoch, adam=res.adam,
                    meta={"system": spec.to_dict(), "links_fixed": links_fixed})
    last = res.history[-1] if res.history else None
    msg = f"{model.label}: epochs {start}..{res.epoch - 1}"
    if last is not None:
        msg += f", final loss {last.loss:.3e}"
    print(msg)
    return 0


def _load_model(cfg: ExperimentConfig, run: Path):
    if cfg.model.kind == "oracle":
        return OracleModel(cfg.spec())
    path = run / CHECKPOINT
    if not path.exists():
        raise RunError(f"missing input {path}; run `sghn train` first")
    model = load_checkpoint(path).model
    if model.dim != cfg.spec().dim:
        raise RunError(f"checkpoint dimension {model.dim} does not match system dimension {cfg.spec().dim}")
    return model


def cmd_eval(cfg: ExperimentConfig, run: Path) -> int:
    spec = cfg.spec()
    model = _load_model(cfg, run)
    test = _dataset(run, TEST_FILE)
    _check_spec(test, spec, TEST_FILE)
    records = ev.evaluate_model(model, spec, test, cfg.data.h, cfg.data.stride)
    ev.write_metrics(records, run / "eval", model.label, spec)
    summary = ev.summarize(records)
    for key in ("test_loss", "trajectory_mse", *(f"{d.label}_mse" for d in conserved_set(spec))):
        print(f"{key}: {ev.format_pm(summary[key]['mean'], summary[key]['std'])}")
    diverged = sum(r.diverged_at is not None for r in records)
    if diverged:
        print(f"{diverged}/{len(records)} rollouts diverged")
    return 0


def cmd_links(cfg: ExperimentConfig, run: Path) -> int:
    model = _load_model(cfg, run)
    if not isinstance(model, SghnModel):
        raise RunError(f"links need an SGHN checkpoint, {run / CHECKPOINT} holds {model.label}")
    alpha = model.extract_alpha()
    graph = direct_links(alpha, extract_links(alpha, cfg.eval.tau))
    write_links(graph, alpha, run / "links")
    print(f"{len(graph.edges)} links at tau={cfg.eval.tau}")
    sys.stdout.write("".join(line + "\n" for line in graph.to_text().splitlines()[1:]))
    return 0


def cmd_sweep(cfg: ExperimentConfig, run: Path, workers: int | None = None) -> int:
    if cfg.model.kind == "oracle":
        raise ConfigError("sweep trains models; oracle is not a trainable kind")
    st = ev.SweepSettings(
        kind=cfg.system.kind.value, n=cfg.system.n, mu_grid=tuple(cfg.sweep.mu_grid),
        models=tuple(cfg.sweep.models), epochs=cfg.train.epochs, n_traj=cfg.data.n_traj,
        n_test=cfg.eval.n_test, t_end=cfg.data.t_end, t_end_test=cfg.eval.t_end_test,
        seed=cfg.train.seed, batch_size=cfg.train.batch_size)
    try:
        rows = ev.mu_sweep(st, workers or cfg.sweep.workers)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ev.write_sweep(rows, run / "sweep.csv")
    for r in rows:
        tail = "" if r.status == "ok" else f"  [{r.status}: {r.message}]"
        print(f"mu={r.mu:<5g} {r.model:<5} traj MAPE {ev.format_sci(r.trajectory_mape)}  "
              f"energy MAPE {ev.format_sci(r.energy_mape)}{tail}")
    return 0


def cmd_report(cfg: ExperimentConfig, run: Path) -> int:
    """Collect whatever artifacts exist under the run directory into report.md."""
    lines = [f"# Run report: {run.name}", ""]
    missing = []
    found = 0

    metrics = sorted(run.rglob("metrics.json"))
    if metrics:
        found += 1
        docs = [json.loads(p.read_text(encoding="utf-8")) for p in metrics]
        first = ["test_loss", "trajectory_mse", "Energy_mse", "Momentum_mse"]
        cols = sorted({k for d in docs for k in d["summary"]},
                      key=lambda k: (first.index(k) if k in first else len(first), k.endswith("mape"), k))
        lines += ["## Prediction errors (mean ± std over test samples)", "",
                  "| Model | " + " | ".join(cols) + " |", "|---" * (len(cols) + 1) + "|"]
        for d in docs:
            cells = [ev.format_pm(**d["summary"][c]) if c in d["summary"] else "" for c in cols]
            lines.append(f"| {d['model']} | " + " | ".join(cells) + " |")
        lines.append("")
    else:
        missing.append("metrics.json (run `sghn eval`)")

    sweep = run / "sweep.csv"
    if sweep.exists():
        found += 1
        with sweep.open(encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        models = list(dict.fromkeys(r["model"] for r in rows))
        mus = list(dict.fromkeys(r["mu"] for r in rows))
        cell = {(r["mu"], r["model"]): r for r in rows}
        for metric, title in (("trajectory_mape", "Trajectory MAPE"), ("energy_mape", "Energy MAPE")):
            lines += [f"## {title} across mu", "", "| mu | " + " | ".join(models) + " |",
                      "|---" * (len(models) + 1) + "|"]
            for mu in mus:
                vals = [ev.format_sci(float(cell[(mu, m)][metric])) if (mu, m) in cell else ""
                        for m in models]
                lines.append(f"| {float(mu):g} | " + " | ".join(vals) + " |")
            lines.append("")
    else:
        missing.append("sweep.csv (run `sghn sweep`)")

    link_files = sorted(run.rglob("links.txt"))
    if link_files:
        found += 1
        lines += ["## Extracted links", ""]
        for p in link_files:
            body = p.read_text(encoding="utf-8").splitlines()
            lines += [f"`{p.relative_to(run)}`: {body[0].lstrip('# ')}", "", "```", *body[1:], "```", ""]
    else:
        missing.append("links.txt (run `sghn train` or `sghn links` on an SGHN model)")

    if missing:
        lines += ["## Missing artifacts", "", *(f"- {m}" for m in missing), ""]
        for m in missing:
            print(f"missing: {m}", file=sys.stderr)
    if not found:
        raise RunError(f"nothing to report under {run}")
    out = run / "report.md"
    out.write_text("\n".join(lines), encoding="utf-8")
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sghn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--out", help="run directory (overrides the config)")
    common.add_argument("--seed", type=int, help="replace every seed in the config")
    common.add_argument("--budget", type=int, help="training epochs (desk-scale override)")
    for name, text in (("generate", "simulate training and test trajectories"),
                       ("train", "fit the configured model"),
                       ("eval", "roll out the trained model on the test set"),
                       ("links", "extract the interaction graph from an SGHN checkpoint"),
                       ("sweep", "integrability sweep over mu"),
                       ("report", "aggregate run artifacts into report.md")):
        p = sub.add_parser(name, parents=[common], help=text)
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
        if name == "sweep":
            p.add_argument("--workers", type=int, help="parallel cells")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        if args.budget is not None and args.budget < 1:
            raise ConfigError("--budget must be a positive epoch count")
        cfg = load_config(args.config).with_overrides(args.seed, args.budget, args.out)
        run = Path(cfg.out)
        run.mkdir(parents=True, exist_ok=True)
        if args.command == "generate":
            return cmd_generate(cfg, run)
        if args.command == "train":
            return cmd_train(cfg, run, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, run)
        if args.command == "links":
            return cmd_links(cfg, run)
        if args.command == "sweep":
            return cmd_sweep(cfg, run, args.workers)
        return cmd_report(cfg, run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (RunError, store.FormatError, TrainingError, IntegrationError, LatticeError,
            LinkError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
