from dataclasses import replace

import numpy as np
import pytest

from streamrec import quantizer
from streamrec.core import QuantizedLog
from streamrec.core import SemanticCode
from streamrec.errors import CodeOutOfRange
from streamrec.errors import CorpusTooSmall
from streamrec.errors import InvalidConfig
from streamrec.errors import InvalidK
from streamrec.quantizer import Codebook
from streamrec.quantizer import QuantizerConfig
from streamrec.retrieval import RetrievalConfig
from streamrec.retrieval import TwoTowerParams
from streamrec.retrieval import item_tower
from streamrec.simgen import emit_windows
from streamrec.simgen import simulate_interactions
from streamrec.tests.test_core import make_log
from streamrec.tests.test_simgen import tiny_world


def test_kmeans_two_clusters():
    result = quantizer.kmeans([0.0, 1.0, 10.0, 11.0], 2, seed=4)
    assert sorted(result.centroids.ravel().tolist()) == [0.5, 10.5]
    assert result.inertia == pytest.approx(1.0)
    assert result.assignments[0] == result.assignments[1]
    assert result.assignments[2] == result.assignments[3]
    assert result.assignments[0] != result.assignments[2]


def test_kmeans_inertia_never_increases():
    points = np.random.default_rng(0).normal(size=(200, 3))
    result = quantizer.kmeans(points, 8, max_iters=30, seed=1)
    history = result.inertia_history
    assert all(b <= a for a, b in zip(history, history[1:]))

    again = quantizer.kmeans(points, 8, max_iters=30, seed=1)
    np.testing.assert_array_equal(result.centroids, again.centroids)


def test_kmeans_inertia_never_increases_on_random_inputs():
    gen = np.random.default_rng(5)
    for trial in range(100):
        n = int(gen.integers(3, 120))
        points = gen.normal(size=(n, int(gen.integers(1, 6))))
        k = int(gen.integers(1, min(n, 12) + 1))
        history = quantizer.kmeans(points, k, max_iters=20, seed=trial).inertia_history
        assert all(b <= a for a, b in zip(history, history[1:]))


def test_kmeans_with_duplicate_points():
    result = quantizer.kmeans(np.zeros((5, 2)), 3, seed=0)
    assert result.inertia == 0.0
    assert result.centroids.shape == (3, 2)


@pytest.mark.parametrize("k", [0, 5])  # type: ignore[misc]
def test_kmeans_rejects_bad_k(k):
    with pytest.raises(InvalidK) as excinfo:
        quantizer.kmeans(np.zeros((4, 2)), k)
    assert str(excinfo.value) == f"Invalid cluster count k={k} for 4 points"


def test_build_codebooks_residual_levels():
    corpus = np.random.default_rng(2).normal(size=(60, 4))
    cb = quantizer.build_codebooks(corpus, (6, 4, 3), seed=0)
    assert cb.sizes == (6, 4, 3)
    assert cb.dim == 4
    assert cb.mse[0] >= cb.mse[1] >= cb.mse[2]
    errors = quantizer.reconstruction_errors(corpus, cb)
    np.testing.assert_allclose(errors, cb.mse)

    with pytest.raises(CorpusTooSmall) as excinfo:
        quantizer.build_codebooks(corpus[:3], (4, 2, 2))
    assert "Corpus of 3 rows" in str(excinfo.value)
    with pytest.raises(InvalidConfig):
        quantizer.build_codebooks(corpus, (2, 2, 2), max_iters=0)


def test_codes_reconstruct_exactly_when_level_one_covers_corpus():
    corpus = np.array([[0.0, 1.0], [2.0, 0.0], [4.0, 4.0], [-1.0, 3.0]])
    cb = quantizer.build_codebooks(corpus, (4, 1, 1), seed=0)
    assert cb.mse[0] == pytest.approx(0.0)
    for point in corpus:
        code = quantizer.assign_codes(point, cb)
        assert code.c2 == code.c3 == 0
        np.testing.assert_allclose(quantizer.reconstruct(code, cb).values, point)


def test_assign_codes_prefers_lower_index_on_ties():
    cb = Codebook([np.array([[0.0], [2.0]]), np.zeros((1, 1)), np.zeros((1, 1))])
    assert quantizer.assign_codes([1.0], cb) == SemanticCode(0, 0, 0)
    assert quantizer.assign_codes([1.5], cb) == SemanticCode(1, 0, 0)

    with pytest.raises(CodeOutOfRange):
        quantizer.reconstruct(SemanticCode(2, 0, 0), cb)
    with pytest.raises(ValueError):
        quantizer.reconstruct(SemanticCode(0, 0, 0), cb, levels=0)
    partial = quantizer.reconstruct(SemanticCode(1, 0, 0), cb, levels=1)
    assert partial.values.tolist() == [2.0]


def test_codebook_file(tmp_path):
    cb = Codebook([np.array([[0.5, 1.0]]), np.array([[0.25, 0.0], [1.0, 2.0]])])
    path = str(tmp_path / "cb.bin")
    cb.save(path)
    loaded = Codebook.load(path)
    assert loaded.sizes == (1, 2)
    np.testing.assert_array_equal(loaded.levels[1], cb.levels[1])


def test_storage_estimate():
    est = quantizer.storage_estimate(10**8, 10**4, 256, 32, 3, 8)
    assert est.raw_bytes == 1024000000000000
    assert est.coded_bytes == 3000000000000
    assert est.ratio == pytest.approx(1024 / 3)

    small = quantizer.storage_estimate(10**6, 100, 64, 32, 3, 16)
    assert small.raw_bytes == 25_600_000_000
    assert small.coded_bytes == 600_000_000

    with pytest.raises(ValueError):
        quantizer.storage_estimate(0, 1, 1, 1, 1, 1)


def test_code_widths():
    assert quantizer.code_bits_required((64, 32, 16)) == [6, 5, 4]
    assert quantizer.code_bits_required((512, 256, 128)) == [9, 8, 7]
    assert quantizer.code_bits_required((1,)) == [1]
    assert quantizer.code_storage_bytes((512, 256, 128)) == [2, 1, 1]

    figures = quantizer.describe_storage(quantizer.PRODUCTION_SIZES)
    assert figures["raw_bytes"] == 1024000000000000.0
    assert figures["width_bytes"] == 4 * 10**12
    assert figures["bits_c1"] == 9.0


def test_quantizer_config_validate():
    assert QuantizerConfig().validate().sizes == (64, 32, 16)
    with pytest.raises(InvalidConfig):
        QuantizerConfig(sizes=(4, 4)).validate()
    with pytest.raises(InvalidConfig):
        QuantizerConfig(corpus="everything").validate()


def test_code_stats():
    log = make_log([(0, a, t, 5, 1) for t, a in enumerate([0, 1, 1, 2, 3])])
    codes = [[0, 1, 0], [0, 1, 1], [0, 1, 0], [1, 0, 0], [1, 0, 1]]
    qlog = QuantizedLog(log, codes, (2, 2, 2))
    stats = quantizer.code_stats(qlog, author_topics=[0, 0, 1, 1])
    assert stats.level_counts[0] == {0: 3, 1: 2}
    assert stats.prefix_groups[0] == quantizer.PrefixGroup((0, 1), 3, (0, 1))
    assert stats.prefix_groups[1] == quantizer.PrefixGroup((1, 0), 2, (2, 3))
    assert stats.purity == pytest.approx(1.0)

    lines = quantizer.format_code_stats(stats)
    assert lines[0] == "level 1: 2 codes used"
    assert "prefix 0-1: 3 events, authors 0,1" in lines
    assert lines[-1] == "prefix purity: 1.000000"

    empty = quantizer.code_stats(qlog[:0])
    assert empty.empty
    assert quantizer.format_code_stats(empty) == ["no codes"]


def test_corpus_and_quantize_log():
    world, windows = tiny_world()
    raw = quantizer.codebook_corpus(windows, None, 24)
    assert raw.shape == (24, 8)
    every = quantizer.codebook_corpus(windows, None, 24, kind="windows")
    assert every.shape == (len(windows), 8)

    params = TwoTowerParams.init(
        120, 24, 8, RetrievalConfig(d=4), "fusion", np.random.default_rng(0)
    )
    fused = quantizer.codebook_corpus(windows, params, 24)
    assert fused.shape == (24, 4)

    cb = quantizer.build_codebooks(raw, (4, 2, 2), seed=0)
    log = simulate_interactions(world, windows)
    qlog = quantizer.quantize_log(log, windows, None, cb)
    assert len(qlog) == len(log)
    assert qlog.sizes == (4, 2, 2)
    np.testing.assert_array_equal(
        qlog.codes, quantizer.assign_codes_batch(windows.mm[windows.rows_for(log)], cb)
    )

    fused_cb = quantizer.build_codebooks(fused, (4, 2, 2), seed=0)
    fused_q = quantizer.quantize_log(log[:10], windows, params, fused_cb)
    assert fused_q.codes.shape == (10, 3)
    event = log[3]
    row = windows[windows.row(event.author_id, event.session_id, event.window_index)]
    vec, _ = item_tower(params, event.author_id, row.mm_embedding, row.pooled_embedding)
    expected = SemanticCode(*fused_q.codes[3].tolist())
    assert quantizer.assign_codes(vec, fused_cb) == expected
    assert len(quantizer.quantize_log(log[:0], windows, None, cb)) == 0

    with pytest.raises(InvalidConfig):
        quantizer.codebook_corpus(windows, None, 24, kind="sessions")


def nested_argmin(point, cb):
    residual = np.asarray(point, dtype=np.float64)
    code = []
    for centroids in cb.levels:
        best = min(
            range(len(centroids)),
            key=lambda j: float(np.sum((residual - centroids[j]) ** 2)),
        )
        code.append(best)
        residual = residual - centroids[best]
    return code


def test_assign_codes_matches_nested_argmin():
    gen = np.random.default_rng(8)
    cb = quantizer.build_codebooks(gen.normal(size=(80, 5)), (8, 4, 2), seed=2)
    points = gen.normal(size=(1000, 5))
    codes = quantizer.assign_codes_batch(points, cb)
    assert codes.tolist() == [nested_argmin(p, cb) for p in points]


def test_prefixes_are_pure_when_authors_have_disjoint_topics():
    world, _ = tiny_world(embedding_noise=0.0, topic_drift=0.0)
    topic = np.arange(24) % 4
    one_hot = np.eye(4)[topic]
    world = replace(
        world,
        author_base_topics=one_hot,
        session_topics=np.repeat(one_hot[:, None, :], 3, axis=1),
    )
    windows = emit_windows(world)
    cb = quantizer.build_codebooks(
        quantizer.codebook_corpus(windows, None, 24), (4, 2, 2), seed=0
    )
    log = simulate_interactions(world, windows)
    stats = quantizer.code_stats(
        quantizer.quantize_log(log, windows, None, cb),
        author_topics=world.dominant_topics(),
    )
    assert stats.purity == 1.0
    assert len(stats.prefix_groups) >= 4
    for group in stats.prefix_groups:
        assert len({int(topic[a]) for a in group.authors}) == 1
