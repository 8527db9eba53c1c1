import hashlib
import io

import numpy as np
import pytest

from crispe import network as nw
from crispe.data import LabeledDataset, synthetic_tasks
from crispe.editor import edit_batch
from crispe.errors import SizeError, ValidationError
from crispe.experiments import (CSV_HEADER, HELDOUT_FRACTION, SWEEP_CONFIG, TradeoffRecord, TrajectoryPoint,
                                frontier_cap, gamma_of, job_seed, matched_ft_point, pretrain, read_csv,
                                sweep_gamma, sweep_metadata, write_csv)
from crispe.network import FeedForwardNet

from conftest import small_net


@pytest.fixture(scope="module")
def tiny():
    A, B = synthetic_tasks(2, 300, 40, 10)
    net = FeedForwardNet.random([40, 8, 10], np.random.default_rng(0))
    net, _ = pretrain(net, A, 10, 0.1)
    return net, A, B


def _fast(cfg=SWEEP_CONFIG):
    return cfg.replace(max_steps=3)


# --------------------------------------------------------------- helpers


def test_gamma_of():
    assert gamma_of(1) == pytest.approx(0.9, abs=1e-15)
    assert gamma_of(7) == pytest.approx(1 - 1e-7, abs=1e-15)
    assert gamma_of(0.1) == pytest.approx(1 - 10 ** -0.1)


def test_job_seed_is_sha256():
    assert job_seed("kfac", 1, 0) == int.from_bytes(hashlib.sha256(b"kfac|1.0|0").digest()[:4], "little")
    assert job_seed("kfac", 1, 0) == 902091824
    assert job_seed("kfac", 1, 0) != job_seed("gnh", 1, 0) != job_seed("gnh", 1, 1)


def test_record_validation_and_row():
    r = TradeoffRecord("kfac", gamma_of(1), 1.0, 0.5, 1.0, 0.912345678, 2)
    assert r.row() == ["kfac", "0.9", "1", "0.500000", "1.000000", "0.912346", "2", "0"]
    with pytest.raises(ValidationError):
        TradeoffRecord("kfac", 0.9, 1.0, 1.5, 0.0, 0.0, 0)


def test_csv_roundtrip(tmp_path):
    recs = [TradeoffRecord("kfac", gamma_of(k), k, 0.25, 0.75, 0.5, 1) for k in (0.1, 7.0)]
    meta = sweep_metadata(SWEEP_CONFIG, seed=3)
    write_csv(recs, tmp_path / "s.csv", meta)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("# batch_size=32 drift=0.25 early_stop=0.01 epochs=25")
    assert lines[1] == ",".join(CSV_HEADER)
    got_meta, got = read_csv(tmp_path / "s.csv")
    assert got_meta["optimizer"] == "sgd" and got_meta["seed"] == "3"
    assert [r.k for r in got] == [0.1, 7.0]
    buf = io.StringIO()
    write_csv(got, buf, meta)
    assert buf.getvalue() == (tmp_path / "s.csv").read_text()


def test_csv_bad_header(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n")
    with pytest.raises(ValidationError):
        read_csv(tmp_path / "x.csv")


def test_matched_ft_point():
    traj = [TrajectoryPoint(0, 1.0, 0.0), TrajectoryPoint(1, 0.9, 0.8), TrajectoryPoint(2, 0.6, 0.95),
            TrajectoryPoint(3, 0.4, 1.0)]
    assert matched_ft_point(traj, 1.0).step == 3  # end of the run is the reference when matched
    assert matched_ft_point(traj, 0.93).step == 2  # otherwise the latest checkpoint in the window
    assert matched_ft_point(traj, 0.5) is None


def test_frontier_cap():
    recs = [TradeoffRecord("gnh", 0.9, 1, 0.7, 1.0, 0.9, 0), TradeoffRecord("gnh", 0.99, 2, 0.9, 0.8, 0.99, 0)]
    assert frontier_cap(recs, 1.0) == 0.7
    assert frontier_cap(recs, 0.82) == 0.9
    assert frontier_cap([], 0.5) is None


# -------------------------------------------------------------- pretrain


def test_pretrain_zero_epochs(rng):
    net = small_net(rng)
    ds = LabeledDataset(rng.random((5, 4)), rng.integers(0, 3, 5), 3)
    out, rep = pretrain(net, ds, 0, 0.1)
    np.testing.assert_array_equal(out.flat_params(), net.flat_params())
    assert rep.epochs == 0 and rep.test_acc is None
    with pytest.raises(ValidationError):
        pretrain(net, ds, -1, 0.1)


def test_desk_pretraining_accuracy(desk_task):
    assert desk_task.report.test_acc >= 0.95
    assert desk_task.net0.architecture() == [(64, 41, "tanh"), (10, 65, "identity")]


# ----------------------------------------------------------------- sweep


def test_sweep_grid_endpoints_and_determinism(tiny):
    net, A, B = tiny
    kw = dict(config=_fast(), cap_samples=200)
    recs = sweep_gamma(net, A, B, ["kfac", "activation_cov"], [0.1, 7], **kw)
    assert [(r.curvature, r.k) for r in recs] == [("kfac", 0.1), ("kfac", 7.0), ("actcov", 0.1), ("actcov", 7.0)]
    assert all(r.wall_ms == 0 for r in recs)
    assert recs == sweep_gamma(net, A, B, ["kfac", "actcov"], [0.1, 7], **kw)
    a, b = io.StringIO(), io.StringIO()
    write_csv(recs, a)
    write_csv(sweep_gamma(net, A, B, ["kfac", "actcov"], [0.1, 7], **kw), b)
    assert a.getvalue() == b.getvalue()


def test_sweep_control_row_is_plain_fine_tuning(tiny):
    net, A, B = tiny
    (rec,) = sweep_gamma(net, A, B, ["ft"], [1.0], config=_fast())
    cap_test = A.split(HELDOUT_FRACTION, 0)[1]
    edit_train, edit_test = B.split(HELDOUT_FRACTION, 0)
    cfg = _fast().replace(gamma=0.9, seed=job_seed("none", 1.0, 0))
    ft, _ = edit_batch(net, edit_train.inputs, edit_train.labels, None, cfg)
    assert rec.curvature == "none" and rec.retained_energy == 0.0
    assert rec.cap_acc == nw.accuracy(ft, cap_test.inputs, cap_test.labels)
    assert rec.edit_acc == nw.accuracy(ft, edit_test.inputs, edit_test.labels)


def test_sweep_timing_fills_wall_ms(tiny):
    net, A, B = tiny
    (rec,) = sweep_gamma(net, A, B, ["kfac"], [1.0], config=_fast(), timing=True, cap_samples=100)
    assert rec.wall_ms >= 0


def test_sweep_callback_and_energy(tiny):
    net, A, B = tiny
    seen = []
    recs = sweep_gamma(net, A, B, ["gnh"], [1, 3], config=_fast(), cap_samples=100, on_record=seen.append)
    assert seen == recs
    assert 0.9 <= recs[0].retained_energy < recs[1].retained_energy <= 1.0


def test_sweep_errors(tiny):
    net, A, B = tiny
    with pytest.raises(ValidationError):
        sweep_gamma(net, A, B, ["lbfgs"], [1.0])
    wide = FeedForwardNet.random([40, 128, 10], np.random.default_rng(0))  # 6538 parameters
    with pytest.raises(SizeError, match="5000"):
        sweep_gamma(wide, A, B, ["hessian"], [1.0])


def test_sweep_hessian_tiny_net():
    A, B = synthetic_tasks(0, 120, 40, 10)
    net = FeedForwardNet.random([40, 4, 10], np.random.default_rng(1))
    (rec,) = sweep_gamma(net, A, B, ["exact_hessian"], [1.0], config=_fast(), cap_samples=50)
    assert rec.curvature == "hessian"


def test_sweep_stricter_threshold_retains_more(desk_task):
    """gamma = 1 - 10^-k grows with k, so k = 7 constrains far more than k = 0.1."""
    recs = sweep_gamma(desk_task.net0, desk_task.cap_data, desk_task.edit_data, ["kfac"], [0.1, 7],
                       split_seed=desk_task.split_seed)
    loose, strict = recs
    assert strict.cap_acc >= loose.cap_acc - 0.02
    assert strict.retained_energy > loose.retained_energy
