import csv
import json
import math

import numpy as np
import pytest

from diffq.diagnostics import (AlignmentTable, DiagnosticsReport, GroupLosses, RunSummary,
                               alignment_correlation, cosine_distance_matrix, dissimilarity_matrix,
                               export, loss_delta_by_group, per_group_loss, sample_alignment)
from diffq.errors import ConfigMismatchError, EmptyBatchError, NonFiniteError
from diffq.weighting import tiny_instance


# -- dissimilarity ------------------------------------------------------------

def test_identical_and_opposite_gradients():
    g = np.array([1.0, -2.0, 0.5])
    assert np.array_equal(cosine_distance_matrix([g, g, 3 * g]).values, np.zeros((3, 3)))
    m = cosine_distance_matrix([g, -g]).values
    assert m[0, 1] == 2.0 and m[1, 0] == 2.0


def test_three_vector_example():
    m = cosine_distance_matrix([[1, 0], [0, 1], [1 / math.sqrt(2), 1 / math.sqrt(2)]]).values
    off = sorted([m[0, 1], m[0, 2], m[1, 2]])
    assert np.allclose(off, [1 - 1 / math.sqrt(2)] * 2 + [1.0], atol=1e-12)
    assert m[0, 1] == pytest.approx(1.0, abs=1e-15)
    assert m[0, 2] == pytest.approx(0.2929, abs=1e-4)


def test_zero_norm_gradient_is_missing(tmp_path):
    m = cosine_distance_matrix([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    assert m.missing[0, 1] and m.missing[1, 2] and not m.missing[0, 2]
    assert np.all(np.diag(m.values) == 0)
    assert m.to_dict()["values"][0][1] is None
    from diffq.diagnostics import write_matrix_csv
    write_matrix_csv(tmp_path / "m.csv", m)
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[1][2] == "missing"


def test_random_matrices_are_valid():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = cosine_distance_matrix(rng.standard_normal((6, 9))).values
        assert np.array_equal(m, m.T) and np.all(np.diag(m) == 0)
        assert np.all((m >= 0) & (m <= 2))


@pytest.mark.parametrize("pooling", ["mean", "samples"])
def test_dissimilarity_on_objective(pooling):
    obj, theta, gi = tiny_instance(seed=1)
    m = dissimilarity_matrix(obj, theta, gi, pooling=pooling)
    assert m.values.shape == (3, 3)
    m.check()
    with pytest.raises(ValueError):
        dissimilarity_matrix(obj, theta, gi, pooling="max")


# -- group losses -------------------------------------------------------------

def test_group_losses_zero_at_teacher():
    obj, _, gi = tiny_instance(seed=0)
    theta_fp = obj.model.params
    ids = np.arange(obj.n_samples)
    gid = np.zeros(len(ids), dtype=int)
    for g, part in enumerate(gi.train):
        gid[part] = g
    for g, part in enumerate(gi.val):
        gid[part] = g
    gl = per_group_loss(obj.losses(theta_fp, ids), gid)
    assert gl.values == [0.0, 0.0, 0.0] and gl.overall == 0.0


def test_single_group_equals_global_and_recombination():
    rng = np.random.default_rng(3)
    losses = rng.random(101)
    one = per_group_loss(losses, np.zeros(101, dtype=int))
    assert one.values[0] == one.overall == math.fsum(losses) / 101
    gid = rng.integers(0, 5, 101)
    gl = per_group_loss(losses, gid)
    assert abs(gl.recombined() - gl.overall) <= 1e-10
    assert sum(gl.counts) == 101


def test_group_loss_errors():
    with pytest.raises(EmptyBatchError):
        per_group_loss([1.0, 2.0], [0, 2], G=3)
    with pytest.raises(NonFiniteError):
        per_group_loss([1.0, np.nan], [0, 1])


# -- loss deltas --------------------------------------------------------------

CFG = {"quant": {"bits": 4}, "weighting": {"tau": 1.0}, "run": {"mode": "weighted", "seed": 1}}


def _summary(values, **over):
    cfg = json.loads(json.dumps(CFG))
    for key, val in over.items():
        sec, name = key.split("__")
        cfg[sec][name] = val
    return RunSummary(cfg, GroupLosses(list(values), [10] * len(values), float(np.mean(values))))


def test_delta_with_itself_is_zero():
    a = _summary([0.3, 0.1, 0.2])
    rows = loss_delta_by_group(a, a)
    assert [r.delta for r in rows] == [0.0, 0.0, 0.0]
    assert [r.group for r in rows] == [1, 2, 0]  # ascending uniform loss


def test_delta_sign_and_weighting_keys_ignored():
    w = _summary([0.1, 0.1], weighting__tau=0.5)
    u = _summary([0.2, 0.05], run__mode="uniform")
    rows = {r.group: r.delta for r in loss_delta_by_group(w, u)}
    assert rows[0] == pytest.approx(0.1) and rows[1] == pytest.approx(-0.05)


def test_delta_config_mismatch_lists_keys():
    with pytest.raises(ConfigMismatchError) as e:
        loss_delta_by_group(_summary([0.1], quant__bits=8, run__seed=2), _summary([0.1]))
    assert e.value.keys == ["quant.bits", "run.seed"]
    assert "quant.bits" in str(e.value)


# -- weight vs alignment ------------------------------------------------------

def test_alignment_few_samples_warns():
    rng = np.random.default_rng(0)
    with pytest.warns(RuntimeWarning):
        tab = alignment_correlation(rng.random(10), rng.standard_normal((10, 4)),
                                    rng.standard_normal((2, 4)), n_buckets=50)
    assert len(tab.bucket_sizes) == 10


def test_alignment_uniform_weights_degenerate():
    rng = np.random.default_rng(1)
    tab = alignment_correlation(np.full(200, 1 / 200), rng.standard_normal((200, 5)),
                                rng.standard_normal((3, 5)))
    assert tab.degenerate and tab.correlation is None and tab.reason == "constant weights"


def test_alignment_proportional_weights():
    rng = np.random.default_rng(2)
    M, Q = rng.standard_normal((500, 6)), rng.standard_normal((3, 6))
    a = sample_alignment(M, Q)
    w = np.exp(a)
    w /= w.sum()
    tab = alignment_correlation(w, M, Q)
    assert not tab.degenerate and tab.correlation == pytest.approx(1.0)
    assert sum(tab.bucket_sizes) == 500


def test_sample_alignment_oracle():
    M = np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]])
    Q = np.array([[1.0, 0.0], [1.0, 1.0]])
    a = sample_alignment(M, Q)
    assert np.allclose(a, [(1 + 1 / math.sqrt(2)) / 2, (0 + 1 / math.sqrt(2)) / 2, 0.0])


# -- report -------------------------------------------------------------------

def test_report_export_and_finite_check(tmp_path):
    m = cosine_distance_matrix(np.eye(3))
    gl = per_group_loss([0.1, 0.2, 0.3], [0, 1, 2])
    rep = DiagnosticsReport("r1", "abc", {"run": 1}, dissimilarity_before=m,
                            dissimilarity_after=m, losses_before=gl, losses_after=gl,
                            alignment=AlignmentTable([1.0], [0.0], [1.0], [0.0], [1], None, True,
                                                     "constant weights"))
    export(rep, tmp_path / "reports", tmp_path / "csv")
    d = json.loads((tmp_path / "reports" / "r1.diagnostics.json").read_text())
    assert d["losses_after"]["values"] == [0.1, 0.2, 0.3]
    assert (tmp_path / "csv" / "r1.group_loss.csv").exists()
    bad = DiagnosticsReport("r2", "abc", {}, lemma43={"residual": float("nan")})
    with pytest.raises(NonFiniteError):
        bad.to_json()
