import numpy as np
import pytest

from diffq.calibration import (CalibrationSet, GroupSpec, assign_groups, collection_steps,
                               generate_calibration, split_validation)
from diffq.diffusion import DenoiserModel, NoiseSchedule
from diffq.errors import CalibrationSetError, ConfigError, GroupingError, SplitError


@pytest.fixture(scope="module")
def toy():
    s = NoiseSchedule.linear(20)
    return DenoiserModel.mlp(hidden=8, depth=2, emb_dim=4, T_steps=20, seed=0), s


def test_interval_counting(toy):
    fp, s = toy
    cs = generate_calibration(fp, s, 32, interval=4, seed=0)
    assert len(cs.timesteps) == 5 and len(cs) == 5 * 32
    assert all((cs.t == t).sum() == 32 for t in cs.timesteps)


def test_interval_equal_to_steps_keeps_only_noise(toy):
    fp, s = toy
    cs = generate_calibration(fp, s, 10, interval=20, seed=3)
    assert list(cs.timesteps) == [19]
    x_T = np.random.default_rng(3).standard_normal((10, 2))
    assert np.array_equal(cs.x[np.argsort(cs.traj)], x_T)


def test_generation_is_byte_deterministic(toy):
    fp, s = toy
    a = generate_calibration(fp, s, 8, seed=5).dumps()
    assert a == generate_calibration(fp, s, 8, seed=5).dumps()
    assert a != generate_calibration(fp, s, 8, seed=6).dumps()


def test_bad_generation_arguments(toy):
    fp, s = toy
    with pytest.raises(CalibrationSetError):
        generate_calibration(fp, s, 0)
    with pytest.raises(ConfigError):
        collection_steps(list(range(20)), 3)


def _fake(n_per, T=20, stride=1):
    ts = np.repeat(np.arange(0, T, stride), n_per)
    return CalibrationSet(np.zeros((len(ts), 2)), ts, np.tile(np.arange(n_per), T // stride),
                          T_steps=T)


def test_stratified_split_counts():
    cs = split_validation(_fake(100), 0.05, seed=0)
    for t in cs.timesteps:
        assert (cs.is_val & (cs.t == t)).sum() == 5
    half = split_validation(_fake(2), 0.5, seed=0)
    for t in half.timesteps:
        assert (half.is_val & (half.t == t)).sum() == 1


def test_split_seeds_change_membership_not_counts():
    a = split_validation(_fake(50), 0.1, seed=0)
    b = split_validation(_fake(50), 0.1, seed=1)
    assert not np.array_equal(a.is_val, b.is_val)
    for t in a.timesteps:
        assert (a.is_val & (a.t == t)).sum() == (b.is_val & (b.t == t)).sum()


def test_split_errors_name_the_timestep():
    with pytest.raises(SplitError) as e:
        split_validation(_fake(10), 0.01)
    assert "timestep" in str(e.value)
    with pytest.raises(ConfigError):
        split_validation(_fake(10), 1.5)


def test_grouping_cases():
    cs = _fake(2)
    g1 = assign_groups(cs, 1)
    assert set(g1.group_ids) == {0}
    g20 = assign_groups(cs, 20)
    assert all(len(set(g20.t[g20.group_ids == g])) == 1 for g in range(20))
    g5 = assign_groups(cs, 5)
    widths = [len(set(g5.t[g5.group_ids == g])) for g in range(5)]
    assert widths == [4] * 5
    assert g5.groups.boundaries == [0, 4, 8, 12, 16, 20]
    with pytest.raises(GroupingError):
        assign_groups(cs, 21)
    with pytest.raises(GroupingError):
        GroupSpec(2, [0, 5, 5])


def test_groups_are_contiguous_in_time():
    cs = assign_groups(_fake(3, stride=2), 4)
    gm = cs.group_map()
    ts = sorted(gm)
    assert [gm[t] for t in ts] == sorted(gm[t] for t in ts)


def test_persistence_roundtrip(tmp_path, small_calib):
    path = tmp_path / "c.qcal"
    small_calib.save(path)
    back = CalibrationSet.load(path)
    assert back.dumps() == small_calib.dumps()
    assert np.array_equal(back.group_ids, small_calib.group_ids)
    with pytest.raises(CalibrationSetError):
        CalibrationSet.loads(b"XXXX" + small_calib.dumps()[4:])


def test_indices_partition(small_calib):
    tr, va = small_calib.indices("train"), small_calib.indices("val")
    assert len(np.intersect1d(tr, va)) == 0 and len(tr) + len(va) == len(small_calib)
    per_group = np.concatenate([small_calib.indices("val", g) for g in range(small_calib.G)])
    assert np.array_equal(np.sort(per_group), va)
