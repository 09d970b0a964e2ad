import numpy as np
import pytest

from tbnet import gradcheck, temporal
from tbnet.gradcheck import OPS, relative_error, run, worst_by_op


@pytest.mark.parametrize("op", [op for op in OPS if op != "network"])
def test_op_passes(op):
    results = run([op], seeds=5)
    assert all(r.passed for r in results), max(r.rel_error for r in results)


def test_network_passes():
    results = run(["network"], seeds=3)
    assert all(r.rel_error < gradcheck.NETWORK_TOLERANCE for r in results)


def test_ops_filter_and_seed_count():
    results = run(["relu", "linear"], seeds=4)
    assert [r.op for r in results] == ["relu"] * 4 + ["linear"] * 4
    assert set(worst_by_op(results)) == {"relu", "linear"}


def test_unknown_op():
    with pytest.raises(KeyError):
        run(["warp"])


def test_deterministic():
    a = [r.rel_error for r in run(["tb_forward"], seeds=3)]
    b = [r.rel_error for r in run(["tb_forward"], seeds=3)]
    assert a == b


def test_relative_error():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 0.0]), np.array([0.0, 0.0])) == 1.0


def test_detects_sign_bug(monkeypatch):
    good = temporal._shift_backward
    monkeypatch.setattr(temporal, "_shift_backward", lambda g: -good(g))
    results = run(["temporal_shift"], seeds=5)
    assert not any(r.passed for r in results)


def test_detects_dropped_boundary_term(monkeypatch):
    def lossy(g):
        gx = np.zeros_like(g)
        gx[:, 1:] += g[:, :-1]
        return gx

    monkeypatch.setattr(temporal, "_shift_backward", lossy)
    assert not all(r.passed for r in run(["temporal_shift"], seeds=5))
