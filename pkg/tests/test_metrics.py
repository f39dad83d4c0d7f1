import json
import math

import numpy as np
import pytest

from clover import metrics
from clover.data import EncodedProfile, ItemTable, UserTask
from clover.metrics import MetricError
from clover.model import Architecture, ModelParams
from clover.trainer import TrainerConfig

from conftest import tiny_arch


def test_mae_oracles():
    assert metrics.mae([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert metrics.mae([2.0, 4.0], [1.0, 5.0]) == 1.0
    # Two-level average: user means 0 and 1, not the flat 1/3.
    assert metrics.mae([np.array([1.0, 1.0]), np.array([2.0])],
                       [np.array([1.0, 1.0]), np.array([1.0])]) == 0.5
    with pytest.raises(MetricError):
        metrics.mae([], [])


def test_mae_detects_translation():
    truth = np.full(6, 2.0)
    pred = np.array([2.5, 3.0, 2.1, 4.0, 2.0, 3.3])
    assert metrics.mae(pred + 0.75, truth) == pytest.approx(metrics.mae(pred, truth) + 0.75, abs=1e-12)


def test_ndcg_oracles():
    assert metrics.ndcg_at_k([5, 4, 3, 2, 1]) == 1.0
    # (7 + 15/log2 3 + 31/2) / (31 + 15/log2 3 + 7/2)
    assert metrics.ndcg_at_k([3, 4, 5, 2, 1], 3) == pytest.approx(0.72705, abs=5e-6)
    with pytest.raises(MetricError):
        metrics.ndcg_at_k([1, 2], 3)


def test_ndcg_ties_go_to_smaller_item_id():
    truth = np.array([1.0, 5.0, 3.0, 4.0])
    keys = ["10", "2", "7", "30"]
    order = metrics.rank_by_score(np.zeros(4), keys)
    assert [keys[i] for i in order] == ["2", "7", "10", "30"]
    assert metrics.ndcg_from_scores(np.zeros(4), truth, keys, 3) == metrics.ndcg_at_k([5, 3, 1, 4], 3)


@pytest.mark.property
def test_ndcg_invariant_under_monotone_transform():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = rng.normal(size=10)
        truth = rng.integers(1, 6, size=10).astype(float)
        keys = [str(k) for k in rng.permutation(10) + 1]
        base = metrics.ndcg_from_scores(s, truth, keys)
        assert metrics.ndcg_from_scores(np.exp(3 * s) + 1, truth, keys) == base
        assert metrics.ndcg_from_scores(np.arctan(s), truth, keys) == base


def test_auc_oracles():
    assert metrics.roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert metrics.roc_auc([1.0, 1.0], [0, 1]) == 0.5
    assert math.isnan(metrics.roc_auc([0.3, 0.4], [1, 1]))


@pytest.mark.property
def test_auc_complement_identity():
    rng = np.random.default_rng(1)
    for _ in range(50):
        s = np.round(rng.normal(size=40), 1)
        y = rng.integers(0, 2, size=40)
        y[:2] = [0, 1]
        assert metrics.roc_auc(s, y) + metrics.roc_auc(-s, y) == pytest.approx(1.0, abs=1e-9)


def test_attacker_on_coin_flip_labels_is_near_chance():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1000, 8))
    y = rng.integers(0, 2, size=1000)
    auc = metrics.attacker_auc(x[:500], y[:500], x[500:], y[500:])
    assert 0.4 <= auc <= 0.6


def test_attacker_on_separable_representations():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 2, size=200)
    x = rng.normal(size=(200, 5))
    x[:, 0] += 6 * (2 * y - 1)
    assert metrics.attacker_auc(x[:100], y[:100], x[100:], y[100:]) == 1.0


def test_attacker_needs_two_training_classes():
    with pytest.raises(MetricError):
        metrics.AttackerModel.fit(np.ones((4, 2)), [1, 1, 1, 1])


def test_group_gap_oracles():
    assert metrics.group_gap([0.90, 0.85], [0, 1]) == pytest.approx(0.05, abs=1e-12)
    assert metrics.group_gap([0.4, 0.4, 0.4], [0, 1, 1]) == 0.0
    assert math.isnan(metrics.group_gap([0.4, 0.5], [1, 1]))


@pytest.mark.property
def test_group_gap_symmetry():
    rng = np.random.default_rng(4)
    for _ in range(50):
        v = rng.random(20)
        g = rng.integers(0, 2, size=20)
        g[:2] = [0, 1]
        assert metrics.group_gap(v, g) == metrics.group_gap(v, 1 - g)


def _one_item_task(gender):
    profile = EncodedProfile("1", (("age", np.eye(3)[0]), ("gender", np.eye(2)[gender])), 1, gender)
    items = ItemTable([EncodedProfile("1", (("genre", np.array([1.0, 0, 0, 0])),))])
    one = np.array([0])
    return UserTask("1", profile, one, np.array([2]), one, np.array([2])), items


def _shift_model(delta):
    # Zero network except one path: the "M" gender row lights e_u[0], which adds delta to logit 2.
    p = ModelParams.init(tiny_arch(), np.random.default_rng(0))
    for t in p.tensors.values():
        t.values[:] = 0.0
    p["emb.user.gender"].values[1, 0] = 1.0
    p["rec.user_proj.0.W"].values[4, 0] = 1.0
    p["rec.decision.0.W"].values[0, 0] = 1.0
    p["rec.decision.1.W"].values[0, 0] = 1.0
    p["rec.decision.2.W"].values[0, 2] = delta
    return p


def test_counterfactual_gap_closed_form():
    p = _shift_model(1.0)
    task, items = _one_item_task(0)
    want = (math.e - 1) / (2 + math.e)
    assert metrics.counterfactual_gap(p, task, items) == pytest.approx(want, abs=1e-12)
    task, items = _one_item_task(1)
    assert metrics.counterfactual_gap(p, task, items) == pytest.approx(want, abs=1e-12)


@pytest.mark.property
def test_attribute_blind_model_has_zero_counterfactual_gap(small_tasks):
    arch = Architecture.from_space(small_tasks.space)
    p = ModelParams.init(arch, np.random.default_rng(0))
    p["emb.user.gender"].values[:] = 0.0
    for task in small_tasks.test:
        assert metrics.counterfactual_gap(p, task, small_tasks.items) == 0.0


def test_counterfactual_gap_needs_binary_attribute():
    p = ModelParams.init(tiny_arch(n_classes=3), np.random.default_rng(0))
    task, items = _one_item_task(0)
    with pytest.raises(MetricError):
        metrics.counterfactual_gap(p, task, items)


@pytest.fixture(scope="module")
def fresh_report(small_tasks):
    arch = Architecture.from_space(small_tasks.space)
    meta = ModelParams.init(arch, np.random.default_rng(0))
    return metrics.evaluate(meta, small_tasks.test, TrainerConfig(), small_tasks.items, small_tasks.train)


def test_fresh_model_report_is_finite_and_in_range(fresh_report):
    h = fresh_report.headline()
    assert list(h) == ["MAE", "NDCG", "AUC", "CF", "GF"]
    assert all(math.isfinite(v) for v in h.values())
    assert 0 <= h["NDCG"] <= 1 and 0 <= h["AUC"] <= 1
    assert h["MAE"] >= 0 and h["CF"] >= 0 and h["GF"] >= 0


def test_per_user_rows_reaggregate(fresh_report):
    rows = fresh_report.per_user
    assert [r.user_id for r in rows] == sorted((r.user_id for r in rows), key=int)
    assert abs(np.mean([r.mae for r in rows]) - fresh_report.mae) <= 1e-9
    assert abs(np.mean([r.ndcg for r in rows]) - fresh_report.ndcg3) <= 1e-9
    assert abs(np.mean([r.cf for r in rows]) - fresh_report.cf) <= 1e-9
    gf = metrics.group_gap([r.mae for r in rows], [r.group for r in rows])
    assert abs(gf - fresh_report.gf) <= 1e-9


def test_json_and_csv_headlines_agree(fresh_report, tmp_path):
    jp, cp = fresh_report.write(tmp_path)
    doc = json.loads(jp.read_text())
    from_csv = metrics.read_csv_headline(cp)
    for k in metrics.HEADLINE:
        assert abs(doc["headline"][k] - from_csv[k]) <= 1e-9


def test_nan_is_written_as_null(tmp_path):
    rep = metrics.MetricsReport(0.9, 0.6, math.nan, 0.1, 0.02)
    assert json.loads(json.dumps(rep.to_json()))["headline"]["AUC"] is None


def test_evaluate_rejects_empty_test_set(small_tasks):
    arch = Architecture.from_space(small_tasks.space)
    meta = ModelParams.init(arch, np.random.default_rng(0))
    with pytest.raises(MetricError):
        metrics.evaluate(meta, [], TrainerConfig(), small_tasks.items)
