import numpy as np
import pytest

from streamrec import ranking
from streamrec import simgen
from streamrec.core import EmbeddingVector
from streamrec.core import QuantizedLog
from streamrec.core import SemanticCode
from streamrec.errors import DimensionMismatch
from streamrec.errors import EmptyLog
from streamrec.errors import IdOutOfRange
from streamrec.errors import InvalidConfig
from streamrec.errors import NoEligibleUsers
from streamrec.errors import ShapeMismatch
from streamrec.errors import SingleClass
from streamrec.history import HistoryBatch
from streamrec.history import HistorySequence
from streamrec.nnkit import grad_check
from streamrec.ranking import RankingBatch
from streamrec.ranking import RankingConfig
from streamrec.ranking import RankingParams
from streamrec.tests.test_core import make_log
from streamrec.tests.test_simgen import tiny_world

TWO_TASKS = ("click", "like")


def small_params(seed=0):
    config = RankingConfig(
        d=4, code_dim=2, n_experts=2, tasks=TWO_TASKS, init_scale=0.5
    )
    return RankingParams.init(4, 5, (3, 2, 2), config, np.random.default_rng(seed))


def small_batch():
    gen = np.random.default_rng(7)
    codes = np.stack(
        [gen.integers(0, size, (4, 3)) for size in (3, 2, 2)], axis=-1
    ).astype(np.int64)
    mask = np.array(
        [
            [True, True, True],
            [True, False, False],
            [False, False, False],
            [True, True, False],
        ]
    )
    authors = np.where(mask, gen.integers(0, 5, (4, 3)), -1)
    codes = codes * mask[..., None]
    return RankingBatch(
        np.array([0, 1, 2, 3]),
        np.array([4, 0, 2, 0]),
        np.array([[2, 1, 0], [0, 0, 1], [1, 1, 1], [2, 0, 0]]),
        HistoryBatch(authors, codes, mask),
        np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0], [0.0, 1.0]]),
    )


def random_qlog(log, sizes=(4, 2, 2), seed=0):
    gen = np.random.default_rng(seed)
    codes = np.stack([gen.integers(0, size, len(log)) for size in sizes], axis=1)
    return QuantizedLog(log, codes, sizes)


def pairwise_auc(scores, labels):
    scores, labels = np.asarray(scores), np.asarray(labels)
    pos = scores[labels == 1][:, None]
    neg = scores[labels == 0][None, :]
    wins = np.sum(pos > neg) + 0.5 * np.sum(pos == neg)
    return float(wins) / (pos.size * neg.size)


def test_auc_examples():
    assert ranking.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)
    assert ranking.auc([0.1, 0.2, 0.9], [0, 1, 1]) == 1.0
    with pytest.raises(SingleClass):
        ranking.auc([0.1, 0.2], [1, 1])
    with pytest.raises(SingleClass):
        ranking.auc([], [])


def test_auc_matches_pairwise_count_with_ties():
    gen = np.random.default_rng(11)
    for _ in range(100):
        n = int(gen.integers(4, 501))
        scores = np.round(gen.random(n), 1)
        labels = gen.integers(0, 2, n)
        labels[:2] = [0, 1]
        expected = pairwise_auc(scores, labels)
        assert ranking.auc(scores, labels) == pytest.approx(expected, abs=1e-12)
        # strictly monotone transforms keep the ordering
        assert ranking.auc(np.exp(3 * scores), labels) == pytest.approx(expected)


def test_gauc_weights_users_by_sample_count():
    scores = [0.2, 0.9, 0.1, 0.4, 0.35, 0.8, 0.5]
    labels = [0, 1, 0, 0, 1, 1, 1]
    users = [1, 1, 2, 2, 2, 2, 3]
    # user 3 has a single class and is dropped
    assert ranking.gauc(scores, labels, users) == pytest.approx(5 / 6, abs=1e-12)

    one_user = ranking.gauc(scores[2:6], labels[2:6], users[2:6])
    assert one_user == pytest.approx(ranking.auc(scores[2:6], labels[2:6]))

    with pytest.raises(NoEligibleUsers):
        ranking.gauc([0.1, 0.2], [1, 0], [0, 1])


def test_ranking_config_validate():
    assert RankingConfig(d=8).resolved_code_dim == 2
    assert RankingConfig(d=2).resolved_code_dim == 1
    with pytest.raises(InvalidConfig) as excinfo:
        RankingConfig(tasks=("click", "share")).validate()
    assert "non-empty subset" in str(excinfo.value)
    with pytest.raises(InvalidConfig):
        RankingConfig(n_experts=0).validate()


def test_params_dimensions():
    params = small_params()
    assert (params.d, params.code_dim) == (4, 2)
    assert params.tuple_dim == 10
    assert params.input_dim == 26
    assert [t.shape for t in params.code_tables] == [(3, 2), (2, 2), (2, 2)]
    assert (params.n_users, params.n_authors) == (4, 5)

    checkpoint = params.to_checkpoint(trained=False)
    restored = RankingParams.from_checkpoint(checkpoint)
    assert restored.tasks == TWO_TASKS
    assert restored.n_experts == 2
    checkpoint.kind = "two_tower"
    with pytest.raises(InvalidConfig):
        RankingParams.from_checkpoint(checkpoint)


def test_tuple_embed():
    params = small_params()
    vec = ranking.tuple_embed(params, 3, SemanticCode(2, 1, 0))
    expected = np.concatenate(
        [
            params.tensors["author_table"][3],
            params.code_tables[0][2],
            params.code_tables[1][1],
            params.code_tables[2][0],
        ]
    )
    np.testing.assert_array_equal(vec.values, expected)

    with pytest.raises(IdOutOfRange) as excinfo:
        ranking.tuple_embed(params, 5, SemanticCode(0, 0, 0))
    assert excinfo.value.kind == "author"
    with pytest.raises(IdOutOfRange) as excinfo:
        ranking.tuple_embed(params, 0, SemanticCode(0, 2, 0))
    assert excinfo.value.kind == "c2"
    assert str(excinfo.value) == "c2 id 2 outside table of size 2"


def test_cross_feature():
    out = ranking.cross_feature([1.0, -2.0], EmbeddingVector([3.0, 1.0]))
    assert out.values.tolist() == [3.0, -2.0, 2.0, 3.0]
    with pytest.raises(DimensionMismatch):
        ranking.cross_feature([1.0], [1.0, 2.0])


def test_code_attention():
    params = small_params()
    target = (1, SemanticCode(0, 1, 1))
    empty = ranking.code_attention(params, target, HistorySequence())
    assert empty.values.tolist() == [0.0] * params.tuple_dim

    entry = (2, SemanticCode(1, 0, 1))
    single = ranking.code_attention(params, target, HistorySequence((entry,)))
    value = ranking.tuple_embed(params, *entry).values @ params.tensors["attn.v"]
    np.testing.assert_allclose(single.values, value)

    other = (4, SemanticCode(2, 1, 0))
    pair = ranking.code_attention(params, target, HistorySequence((entry, other)))
    value_b = ranking.tuple_embed(params, *other).values @ params.tensors["attn.v"]
    # the feature is a convex combination of the two value rows
    diff = value_b - value
    t = float(np.dot(pair.values - value, diff) / np.dot(diff, diff))
    assert 0.0 <= t <= 1.0
    np.testing.assert_allclose(pair.values, value + t * diff, atol=1e-12)


def test_multitask_forward():
    params = small_params()
    u = params.tensors["user_table"][0]
    a = params.tensors["author_table"][1]
    features = [a, u, ranking.cross_feature(u, a), np.zeros(params.tuple_dim)]
    out = ranking.multitask_forward(params, features)
    assert list(out) == list(TWO_TASKS)
    assert all(0.0 < p < 1.0 for p in out.values())

    with pytest.raises(ShapeMismatch):
        ranking.multitask_forward(params, [a, u])


@pytest.mark.parametrize("seed", range(5))  # type: ignore[misc]
@pytest.mark.parametrize("with_codes", [True, False])  # type: ignore[misc]
def test_batch_loss_gradients(with_codes, seed):
    params = small_params(seed)
    batch = small_batch()

    def f(_):
        return ranking.batch_loss(params, batch, with_codes)

    worst = grad_check(
        f, params.tensors, max_entries=8, gen=np.random.default_rng(seed)
    )
    assert worst < 1e-5


def test_batch_without_codes_ignores_code_tables():
    params = small_params()
    batch = small_batch()
    _, grads = ranking.batch_loss(params, batch, with_codes=False)
    for level in (1, 2, 3):
        assert not np.any(grads[f"code_table.{level}"])
    assert not np.any(grads["attn.q"])

    before = ranking.predict_batch(params, batch, with_codes=False)
    params.tensors["code_table.1"] += 1.0
    after = ranking.predict_batch(params, batch, with_codes=False)
    np.testing.assert_array_equal(before, after)


def test_batch_rejects_out_of_range_codes():
    params = small_params()
    batch = small_batch()._replace(codes=np.array([[3, 0, 0]] * 4))
    with pytest.raises(IdOutOfRange) as excinfo:
        ranking.predict_batch(params, batch, with_codes=True)
    assert excinfo.value.kind == "c1"
    # codes are not read without the attention block
    assert ranking.predict_batch(params, batch, with_codes=False).shape == (4, 2)


def test_train_and_evaluate_ranking():
    world, windows = tiny_world()
    log = simgen.simulate_interactions(world, windows)
    qlog = random_qlog(log)
    train, test = qlog[:1400], qlog[1400:]
    config = RankingConfig(
        d=4, n_experts=2, tasks=TWO_TASKS, epochs=2, batch_size=256, history_length=5
    )
    checkpoint, losses = ranking.train_ranking(
        train, config, n_users=120, n_authors=24, seed=9
    )
    assert len(losses) == 2
    assert all(np.isfinite(losses))
    meta = checkpoint.metadata
    assert meta["trained"] and meta["with_codes"]
    assert meta["tasks"] == list(TWO_TASKS)
    assert meta["history_length"] == 5

    again, _ = ranking.train_ranking(train, config, n_users=120, n_authors=24, seed=9)
    np.testing.assert_array_equal(
        checkpoint.tensors["attn.q"], again.tensors["attn.q"]
    )

    preds = ranking.predict_ranking(
        checkpoint, test, history_source=QuantizedLog.concat([train, test])
    )
    assert preds.shape == (len(test), 2)
    assert np.all((preds > 0.0) & (preds < 1.0))

    metrics = ranking.evaluate_ranking(preds, test, TWO_TASKS)
    assert set(metrics) == set(TWO_TASKS)
    assert 0.0 <= metrics["click"].auc <= 1.0


def test_ranking_loss_decreases():
    world, windows = tiny_world(n_users=600, exposures_per_user=40)
    qlog = random_qlog(simgen.simulate_interactions(world, windows))
    config = RankingConfig(
        d=4, n_experts=2, tasks=TWO_TASKS, epochs=3, batch_size=256, history_length=5
    )
    _, losses = ranking.train_ranking(qlog, config, n_users=600, n_authors=24, seed=2)
    assert len(losses) == 3
    assert losses[2] < losses[0]


def test_train_ranking_errors():
    log = make_log([(0, 1, 10, 5, 1)])
    qlog = random_qlog(log)
    with pytest.raises(EmptyLog):
        ranking.train_ranking(qlog[:0], RankingConfig(d=4))
    with pytest.raises(InvalidConfig):
        ranking.train_ranking(qlog, RankingConfig(d=0))

    checkpoint, losses = ranking.train_ranking(qlog, RankingConfig(d=4, epochs=0))
    assert losses == []
    assert not checkpoint.trained


def test_evaluate_ranking_undefined_metrics():
    log = make_log([(0, 1, 10, 5, 1), (0, 2, 20, 5, 0), (1, 1, 30, 5, 1)])
    qlog = random_qlog(log)
    preds = np.array([[0.9, 0.5], [0.1, 0.5], [0.4, 0.5]])
    metrics = ranking.evaluate_ranking(preds, qlog, TWO_TASKS)
    assert metrics["click"].auc == 1.0
    assert metrics["click"].gauc == 1.0
    # nothing was liked
    assert metrics["like"] == ranking.TaskMetrics(None, None)
