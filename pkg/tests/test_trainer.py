import math

import numpy as np
import pytest

from sgdphases.data import NoisyDataset, corrupt_labels
from sgdphases.ensemble import probe_order_params, probe_split_order_params
from sgdphases.mathcore import PrngState
from sgdphases.model import MlpConfig, init_weights, loss_and_gradient
from sgdphases.trainer import (CSV_COLUMNS, STREAM_PROBE, STREAM_SPLIT, DivergenceError, MetricsRow,
                               TrainConfig, extract_timescales, on_cadence, read_metrics_csv,
                               sgd_epoch, train, two_phase_boundary)

from conftest import blobs

NET = MlpConfig((8, 6, 3))


def test_config_validation():
    for bad in (dict(alpha=0), dict(B=0), dict(epochs=0), dict(probe_every=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_cadence():
    assert [e for e in range(1, 11) if on_cadence(e, 4)] == [1, 4, 8]
    assert not any(on_cadence(e, 0) for e in range(1, 5))


def test_zero_learning_rate_keeps_weights(blob_data):
    w = init_weights(NET, PrngState(0))
    assert sgd_epoch(w, blob_data, 0.0, 10, PrngState(1)) == w


def test_full_batch_epoch_is_gradient_descent(blob_data):
    w = init_weights(NET, PrngState(0))
    stepped = sgd_epoch(w, blob_data, 0.1, blob_data.n, PrngState(1))
    g = loss_and_gradient(w, blob_data.images, blob_data.labels)[1]
    assert np.allclose(stepped.values, w.values - 0.1 * g, rtol=0, atol=1e-14)


def test_epoch_step_count(blob_data, monkeypatch):
    import sgdphases.trainer as tr

    calls = []
    orig = tr.backprop

    def spy(layers, act, X, y, grads):
        calls.append(len(y))
        return orig(layers, act, X, y, grads)

    monkeypatch.setattr(tr, "backprop", spy)
    sgd_epoch(init_weights(NET, PrngState(0)), blob_data, 0.01, 25, PrngState(0))
    assert calls == [25] * 4 + [20]  # ceil(120/25) steps, every sample exactly once


def test_one_epoch_one_row(blob_data):
    res = train(TrainConfig(epochs=1), NET, blob_data)
    assert len(res.trajectory) == 1 and res.trajectory[0].epoch == 1


def test_identical_seed_bit_identical(noisy_blobs):
    cfg = TrainConfig(alpha=0.1, B=10, epochs=5, seed=3)
    a = train(cfg, NET, noisy_blobs)
    b = train(cfg, NET, noisy_blobs)
    assert a.weights == b.weights
    assert [r.as_dict() for r in a.trajectory] == [r.as_dict() for r in b.trajectory]
    c = train(TrainConfig(alpha=0.1, B=10, epochs=5, seed=4), NET, noisy_blobs)
    assert not c.weights == a.weights


def test_resume_reproduces_run(noisy_blobs):
    cfg = TrainConfig(alpha=0.1, B=10, epochs=6, seed=1, checkpoint_every=3)
    full = train(cfg, NET, noisy_blobs)
    tail = train(TrainConfig(alpha=0.1, B=10, epochs=3, seed=1), NET, noisy_blobs,
                 init=full.checkpoints[3], start_epoch=3)
    assert tail.weights == full.weights
    assert [r.epoch for r in tail.trajectory] == [4, 5, 6]


def test_error_decomposition_and_ranges(noisy_blobs):
    res = train(TrainConfig(alpha=0.1, B=10, epochs=4), NET, noisy_blobs, blobs(seed=5))
    rho = noisy_blobs.n_corrupt / noisy_blobs.n
    for r in res.trajectory:
        assert r.eps_tr == pytest.approx((1 - rho) * r.eps_c + rho * r.eps_w, abs=1e-9)
        assert r.L == pytest.approx((1 - rho) * r.L_c + rho * r.L_w, rel=1e-12)
        assert 0 <= r.eps_te <= 1


def test_probe_rows_equal_standalone_probes(noisy_blobs):
    cfg = TrainConfig(alpha=0.1, B=10, epochs=4, probe_every=2, probe_M=8, checkpoint_every=2, seed=2)
    res = train(cfg, NET, noisy_blobs)
    probed = [r for r in res.trajectory if r.order is not None]
    assert [r.epoch for r in probed] == [1, 2, 4]
    for row in probed:
        if row.epoch not in res.checkpoints:
            continue
        w = res.checkpoints[row.epoch]
        assert row.order == probe_order_params(w, noisy_blobs, "given", 10, 8,
                                               PrngState(2, STREAM_PROBE).spawn(row.epoch))
        assert row.split == probe_split_order_params(w, noisy_blobs, 10, 8,
                                                     PrngState(2, STREAM_SPLIT).spawn(row.epoch))


def test_snapshots_and_spectra(noisy_blobs):
    cfg = TrainConfig(alpha=0.1, B=10, epochs=4, snapshot_every=2, spectrum_every=4,
                      spectrum_M=6, spectrum_layer="W1")
    res = train(cfg, NET, noisy_blobs)
    assert [s.epoch for s in res.snapshots] == [0, 1, 2, 4]
    assert all(len(s.losses) == noisy_blobs.n and np.all(s.losses >= 0) for s in res.snapshots)
    assert sorted(res.spectra) == [1, 4]


def test_metrics_csv_roundtrip(tmp_path, noisy_blobs):
    path = tmp_path / "m.csv"
    res = train(TrainConfig(alpha=0.1, B=10, epochs=3, probe_every=2, probe_M=4), NET, noisy_blobs,
                metrics_path=path, checkpoint_dir=tmp_path / "ck")
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS) and len(lines) == 4
    rows = read_metrics_csv(path)
    assert rows[0]["L"] == res.trajectory[0].L
    assert not math.isnan(rows[1]["R"]) and math.isnan(rows[2]["R"])


def test_metrics_csv_independent_of_workers(tmp_path, noisy_blobs):
    for jobs in (1, 3):
        cfg = TrainConfig(alpha=0.1, B=10, epochs=3, probe_every=1, probe_M=12, n_jobs=jobs)
        train(cfg, NET, noisy_blobs, metrics_path=tmp_path / f"m{jobs}.csv")
    assert (tmp_path / "m1.csv").read_bytes() == (tmp_path / "m3.csv").read_bytes()


def test_divergence_detected(blob_data):
    with pytest.raises(DivergenceError) as info:
        train(TrainConfig(alpha=1e200, B=10, epochs=3), NET, blob_data)
    assert info.value.epoch == 1
    assert np.all(np.isfinite(info.value.last_good.values))


def test_class_count_check(blob_data):
    with pytest.raises(ValueError):
        train(TrainConfig(epochs=1), MlpConfig((8, 4, 2)), blob_data)


# -- trajectory analysis ---------------------------------------------------------------

def _rows(eps_tr=None, eps_te=None, L=None):
    n = len(next(x for x in (eps_tr, eps_te, L) if x is not None))
    eps_tr = eps_tr or [0.0] * n
    eps_te = eps_te or [0.0] * n
    L = L or [1.0] * n
    return [MetricsRow(i, L[i], L[i], L[i], eps_tr[i], eps_te[i], eps_tr[i], eps_tr[i])
            for i in range(n)]


def test_two_phase_boundary():
    assert two_phase_boundary(_rows(eps_tr=[0.9, 0.1, 0.0, 0.0]), 0.005) == 2
    assert two_phase_boundary(_rows(eps_tr=[0.9, 0.1, 0.0, 0.0]), 1.0) == 0
    assert two_phase_boundary(_rows(eps_tr=[0.9, 0.1]), 0.005) is None
    with pytest.raises(ValueError):
        two_phase_boundary([])


def test_timescales_monotone_test_error():
    ts = extract_timescales(_rows(eps_te=[0.5, 0.4, 0.3, 0.2]))
    assert ts.t_m == 3 and ts.eps_m == 0.2 and ts.eps_f == 0.2


def test_timescales_earliest_tie_and_loss_rules():
    L = [2.0, 1.0, 0.19, 0.12, 0.1, 0.1]
    rows = _rows(eps_te=[0.5, 0.1, 0.3, 0.1, 0.4, 0.4], L=L)
    ts = extract_timescales(rows)
    assert ts.t_m == 1 and ts.eps_f == 0.4
    assert ts.t_f == 2  # 0.19 <= 0.1 + 0.05 * 1.9
    assert extract_timescales(rows, loss_rule="relative").t_f == 4  # first L <= 1.05 * 0.1
    with pytest.raises(ValueError):
        extract_timescales(rows, loss_rule="other")
