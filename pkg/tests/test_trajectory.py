import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssmchaos.trajectory import TrajectoryError, TrajectorySet, read_csv, write_csv


def test_basic_properties():
    tr = TrajectorySet([np.zeros((5, 2)), np.ones((3, 2))], 0.5, t0=1.0)
    assert tr.state_dim == 2 and len(tr) == 2 and tr.total_samples() == 8
    np.testing.assert_allclose(tr.times(1), [1.0, 1.5, 2.0])
    assert tr.stacked().shape == (8, 2)
    assert TrajectorySet(np.arange(4.0), 1.0)[0].shape == (4, 1)


def test_validation():
    with pytest.raises(TrajectoryError):
        TrajectorySet([np.zeros((4, 2)), np.zeros((4, 3))], 1.0)
    with pytest.raises(TrajectoryError):
        TrajectorySet([np.array([[0.0, np.nan]])], 1.0)
    with pytest.raises(TrajectoryError):
        TrajectorySet([np.zeros((4, 2))], 0.0)
    with pytest.raises(TrajectoryError):
        TrajectorySet([], 1.0)
    with pytest.raises(TrajectoryError):
        TrajectorySet([np.zeros((4, 2))], 1.0, labels=["a", "b"])


def test_select_drop_map():
    x = np.arange(20.0).reshape(10, 2)
    tr = TrajectorySet([x], 0.1)
    np.testing.assert_array_equal(tr.select(1)[0][:, 0], x[:, 1])
    d = tr.drop_before(0.3)
    assert d.t0 == pytest.approx(0.3) and d[0].shape == (7, 2)
    np.testing.assert_array_equal(tr.map(lambda s: 2 * s)[0], 2 * x)


@given(st.lists(arrays(float, st.tuples(st.integers(2, 12), st.just(3)),
                       elements=st.floats(-1e6, 1e6, allow_subnormal=False)), min_size=1, max_size=3),
       st.floats(1e-4, 10.0), st.floats(-5.0, 5.0))
@settings(max_examples=30, deadline=None)
def test_csv_round_trip(tmp_path_factory, states, dt, t0):
    path = tmp_path_factory.mktemp("csv") / "t.csv"
    tr = TrajectorySet(states, dt, t0=t0)
    write_csv(tr, path, ["config_hash=abc"])
    back = read_csv(path)
    assert back.dt == dt and back.t0 == t0 and len(back) == len(tr)
    for a, b in zip(tr.states, back.states):
        np.testing.assert_array_equal(a, b)
    assert path.read_text().startswith("# config_hash=abc\n")


def test_read_csv_without_metadata(tmp_path):
    p = tmp_path / "plain.csv"
    p.write_text("t,x1\n0.0,1.0\n0.25,2.0\n0.5,3.0\n")
    tr = read_csv(p)
    assert tr.dt == pytest.approx(0.25)
    np.testing.assert_array_equal(tr[0][:, 0], [1.0, 2.0, 3.0])
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(TrajectoryError):
        read_csv(tmp_path / "bad.csv")
