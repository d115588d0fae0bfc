import hashlib

import numpy as np
import pytest

from sghn import store
from sghn.integrate import Trajectory
from sghn.lattice import LatticeSpec, PhaseState, vector_field
from sghn.models import HnnModel, MlpConfig, MlpModel, SghnModel
from sghn.train import (AdamState, Dataset, IcSampler, Schedule, SghnOptions, TrainConfig, TrainingError,
                        adam_step, derivative_targets, generate_dataset, load_checkpoint, loss, lr_at,
                        save_checkpoint, table_rates, train, train_sghn_two_phase, write_loss_csv)

NET = MlpConfig(1, 8, "tanh")


@pytest.fixture(scope="module")
def toda_small():
    return generate_dataset(LatticeSpec("Toda", 3), n_traj=4, t_end=1.0)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_sampler_ranges_and_streams():
    s = IcSampler(seed=5).draw(6, 10)
    assert s.q.shape == (10, 6)
    assert s.q.min() >= 0 and s.q.max() < 1 and s.p.min() >= 0 and s.p.max() < 1
    again = IcSampler(seed=5).draw(6, 10)
    assert np.array_equal(s.q, again.q)
    # trajectory k does not depend on how many are drawn
    assert np.array_equal(IcSampler(seed=5).draw(6, 3).q, s.q[:3])
    assert not np.array_equal(IcSampler(seed=5, stream=1).draw(6, 3).q, s.q[:3])


def test_sine_displacement():
    s = IcSampler("SineDisplacement", 0).draw(5, 4)
    assert np.all(s.p == 0)
    assert np.all(s.q[:, 0] == 0) and np.allclose(s.q[:, -1], 0, atol=1e-15)
    assert np.all(s.q[:, 1:-1] >= 0)
    with pytest.raises(ValueError):
        IcSampler("Gaussian")


def test_default_protocol_counts():
    ds = generate_dataset(LatticeSpec("FK", 32))
    assert len(ds) == 5050
    assert (ds.n_traj, ds.samples_per_traj) == (50, 101)
    assert ds.dt_sample == pytest.approx(0.05)


def test_dataset_determinism_and_round_trip(tmp_path, toda_small):
    again = generate_dataset(LatticeSpec("Toda", 3), n_traj=4, t_end=1.0)
    toda_small.save(tmp_path / "a.ds")
    again.save(tmp_path / "b.ds")
    assert sha(tmp_path / "a.ds") == sha(tmp_path / "b.ds")
    back = Dataset.load(tmp_path / "a.ds")
    for k in ("q", "p", "dq", "dp"):
        assert np.array_equal(getattr(back, k), getattr(toda_small, k))
    assert back.provenance == toda_small.provenance
    tr = back.trajectories()
    assert tr.q.shape == (21, 4, 3)
    assert np.array_equal(tr.q[:, 1], toda_small.q[21:42])


def test_dataset_rejects_mismatched_blocks(tmp_path):
    store.write(tmp_path / "bad.ds", "dataset", {"n_traj": 1, "samples_per_traj": 2, "dt_sample": 0.05,
                                                 "provenance": {}},
                {"inputs": np.zeros((2, 4)), "targets": np.zeros((2, 6))})
    with pytest.raises(store.ShapeMismatchError):
        Dataset.load(tmp_path / "bad.ds")


def test_oracle_targets_at_equilibrium():
    spec = LatticeSpec("FK", 4)
    z = np.zeros((5, 4))
    _, dq, dp = derivative_targets(Trajectory(0, 0.05, z, z), "Oracle", spec)
    assert not dq.any() and not dp.any()


def test_finite_diff_exact_on_free_particle():
    t = np.arange(6) * 0.05
    p = np.array([0.3, -1.0, 2.0])
    q = t[:, None] * p
    states, dq, dp = derivative_targets(Trajectory(0, 0.05, q, np.tile(p, (6, 1))), "FiniteDiff")
    assert len(states) == 4 and states.t0 == pytest.approx(0.05)
    assert np.allclose(dq, p, atol=1e-13) and not dp.any()
    with pytest.raises(ValueError):
        derivative_targets(Trajectory(0, 0.05, q[:2], q[:2]), "FiniteDiff")


def test_finite_diff_close_to_oracle():
    spec = LatticeSpec("FK", 8)
    fd = generate_dataset(spec, n_traj=3, t_end=2.0, target_mode="FiniteDiff")
    dq, dp = vector_field(spec, PhaseState(fd.q, fd.p))
    err = np.linalg.norm(np.concatenate([fd.dq - dq, fd.dp - dp])) / np.linalg.norm(np.concatenate([dq, dp]))
    assert err < 3e-3


def test_loss_brute_force(rng, toda_small):
    m = MlpModel.init(3, NET, 0)
    q, p, dq, dp = toda_small.q[:10], toda_small.p[:10], toda_small.dq[:10], toda_small.dp[:10]
    total, count = 0.0, 0
    for k in range(10):
        fq, fp = m.field(q[k], p[k])
        for i in range(3):
            total += (fq[i] - dq[k, i]) ** 2 + (fp[i] - dp[k, i]) ** 2
            count += 2
    assert loss(m, (q, p, dq, dp)) == pytest.approx(total / count, rel=1e-12)


def test_loss_zero_and_quadratic_scaling(rng):
    m = HnnModel.init(3, NET, 0)
    q, p = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    fq, fp = m.field(q, p)
    assert loss(m, (q, p, fq, fp)) == 0.0
    r = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    one = loss(m, (q, p, fq + r[0], fp + r[1]))
    two = loss(m, (q, p, fq + 2 * r[0], fp + 2 * r[1]))
    assert two == pytest.approx(4 * one, rel=1e-12)


def test_lr_schedule():
    s = Schedule()
    assert lr_at(0, s) == 1e-3
    assert lr_at(3499, s) == 1e-3
    assert lr_at(3500, s) == 1e-4
    assert lr_at(5000, s) == 1e-5
    assert lr_at(9999, s) == 1e-5
    with pytest.raises(ValueError):
        lr_at(10000, s)
    with pytest.raises(ValueError):
        Schedule((1e-3, 1e-2, 1e-5))
    scaled = s.scaled(2000)
    assert scaled.boundaries == (700, 1000)
    assert lr_at(699, scaled) == 1e-3 and lr_at(700, scaled) == 1e-4


def test_table_rates():
    assert table_rates("sghn", "tanh", "FK") == (1e-3, 1e-4, 1e-5)
    assert table_rates("mlp", "silu", "FK") == (1e-2, 5e-3, 1e-4)
    assert table_rates("hnn", "silu", "Rotator") == (1e-3, 1e-4, 1e-5)


def test_adam_scalar_hand_computation():
    g, rate, b1, b2, eps = 0.5, 0.01, 0.9, 0.999, 1e-8
    params = {"x": np.array(1.0)}
    state = AdamState.zeros_like(params)
    new, state = adam_step(params, {"x": np.array(g)}, state, rate)
    m, v = (1 - b1) * g, (1 - b2) * g * g
    expect = 1.0 - rate * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
    assert new["x"] == expect
    # second step
    g2 = -0.2
    new2, state = adam_step(new, {"x": np.array(g2)}, state, rate)
    m2, v2 = b1 * m + (1 - b1) * g2, b2 * v + (1 - b2) * g2 * g2
    expect2 = expect - rate * (m2 / (1 - b1 ** 2)) / (np.sqrt(v2 / (1 - b2 ** 2)) + eps)
    assert new2["x"] == pytest.approx(expect2, abs=1e-16)
    assert state.step == 2


def test_adam_zero_gradient_and_shape_check():
    params = {"w": np.arange(3.0)}
    new, _ = adam_step(params, {"w": np.zeros(3)}, AdamState.zeros_like(params), 0.1)
    assert np.array_equal(new["w"], params["w"])
    with pytest.raises(ValueError):
        adam_step(params, {"w": np.zeros(2)}, AdamState.zeros_like(params), 0.1)


def test_training_on_own_field_stays_at_zero(rng):
    m = SghnModel.init(3, NET, 0)
    q, p = rng.normal(size=(40, 3)), rng.normal(size=(40, 3))
    dq, dp = m.field(q, p)
    ds = Dataset(q, p, dq, dp, 1, 40, 0.05)
    res = train(m, ds, TrainConfig(epochs=3, batch_size=16))
    assert all(r.loss == 0.0 for r in res.history)


def test_training_reduces_loss_and_is_deterministic(toda_small):
    cfg = TrainConfig(epochs=30, batch_size=32, seed=3)
    runs = [train(SghnModel.init(3, NET, 1), toda_small, cfg) for _ in range(2)]
    h0 = [r.loss for r in runs[0].history]
    assert h0 == [r.loss for r in runs[1].history]
    assert h0[-1] < h0[0]
    assert all(np.array_equal(runs[0].model.params[k], runs[1].model.params[k]) for k in runs[0].model.params)
    assert np.all(np.diag(runs[0].model.params["alpha"]) == 0)


def test_training_rejects_dimension_mismatch(toda_small):
    with pytest.raises(TrainingError):
        train(MlpModel.init(4, NET, 0), toda_small, TrainConfig(epochs=1))


def test_non_finite_loss_aborts(toda_small):
    m = MlpModel.init(3, NET, 0)
    m.params["b1"] = np.full_like(m.params["b1"], np.inf)
    with pytest.raises(TrainingError, match="epoch 0"):
        train(m, toda_small, TrainConfig(epochs=2))


def test_two_phase_degenerate_config(toda_small):
    cfg = TrainConfig(epochs=4, batch_size=64, sghn=SghnOptions(l1=0.0, tau=0.0))
    m, alpha, links, res = train_sghn_two_phase(toda_small, cfg, SghnModel.init(3, NET, 0))
    assert links.edges == {(0, 1), (0, 2), (1, 2)}
    assert m.edge_mask.sum() == 6
    assert [r.epoch for r in res.history] == [0, 1, 2, 3]
    assert res.history[0].penalty == 0.0


def test_two_phase_masks_alpha(toda_small):
    cfg = TrainConfig(epochs=5, batch_size=64, sghn=SghnOptions(l1=1e-3, tau=0.9))
    m, alpha, links, res = train_sghn_two_phase(toda_small, cfg, SghnModel.init(3, NET, 0))
    assert res.history[0].penalty > 0 and res.history[-1].penalty == 0
    off = ~links.mask(3)
    assert np.all(alpha[off] == 0)


def test_two_phase_resume_matches_uninterrupted(toda_small, tmp_path):
    cfg = TrainConfig(epochs=6, batch_size=64, sghn=SghnOptions(l1=1e-3, tau=0.1))
    full = train_sghn_two_phase(toda_small, cfg, SghnModel.init(3, NET, 0))[3]
    # stop inside phase 1, checkpoint, resume
    m = SghnModel.init(3, NET, 0)
    first = train(m, toda_small, cfg, stop_epoch=2, l1=cfg.sghn.l1)
    save_checkpoint(m, tmp_path / "c.ckpt", epoch=2, adam=first.adam)
    ck = load_checkpoint(tmp_path / "c.ckpt")
    rest = train_sghn_two_phase(toda_small, cfg, ck.model, start_epoch=ck.epoch, adam=ck.adam)[3]
    assert [r.epoch for r in rest.history] == [2, 3, 4, 5]
    assert [r.loss for r in rest.history] == [r.loss for r in full.history[2:]]


@pytest.mark.parametrize("kind", [MlpModel, HnnModel, SghnModel])
def test_checkpoint_round_trip(kind, tmp_path, rng):
    m = kind.init(3, NET, 0)
    if kind is SghnModel:
        mask = np.ones((3, 3), dtype=bool)
        mask[0, 2] = mask[2, 0] = False
        m.set_edge_mask(mask)
    adam = AdamState.zeros_like(m.params)
    adam.step = 7
    save_checkpoint(m, tmp_path / "m.ckpt", seed=11, epoch=42, adam=adam, meta={"note": "x"})
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert (ck.seed, ck.epoch, ck.adam.step, ck.meta) == (11, 42, 7, {"note": "x"})
    for k in m.params:
        assert np.array_equal(ck.model.params[k], m.params[k])
    for _ in range(10):
        q, p = rng.normal(size=3), rng.normal(size=3)
        a, b = m.field(q, p), ck.model.field(q, p)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    if kind is SghnModel:
        assert np.array_equal(ck.model.extract_alpha(), m.extract_alpha())


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(MlpModel.init(3, NET, 0), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(store.CorruptFileError):
        load_checkpoint(path)
    path.write_bytes(b"garbage")
    with pytest.raises(store.CorruptFileError):
        load_checkpoint(path)


def test_checkpoint_shape_tampering(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(MlpModel.init(3, NET, 0), path)
    raw = path.read_bytes()
    # w0 is (6, 8); claim (8, 6): byte count unchanged, model shape check fires
    tampered = raw.replace(b'"name":"w0","shape":[6,8]', b'"name":"w0","shape":[8,6]', 1)
    assert tampered != raw
    path.write_bytes(tampered)
    with pytest.raises(store.ShapeMismatchError):
        load_checkpoint(path)
    # a shape that changes the byte count is caught by the container itself
    path.write_bytes(raw.replace(b'"name":"w0","shape":[6,8]', b'"name":"w0","shape":[6,9]', 1))
    with pytest.raises(store.ShapeMismatchError):
        load_checkpoint(path)


def test_checkpoint_version_checked(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(MlpModel.init(3, NET, 0), path)
    path.write_bytes(path.read_bytes().replace(b"checkpoint v1", b"checkpoint v9", 1))
    with pytest.raises(store.FormatError, match="version"):
        load_checkpoint(path)


def test_loss_csv(tmp_path, toda_small):
    res = train(MlpModel.init(3, NET, 0), toda_small, TrainConfig(epochs=2))
    write_loss_csv(res.history, tmp_path / "loss.csv")
    write_loss_csv(res.history, tmp_path / "loss.csv", append=True)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,")
    assert len(lines) == 5
