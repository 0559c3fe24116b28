import numpy as np
import pytest

from streamrec.core import TASKS
from streamrec.core import EmbeddingVector
from streamrec.core import InteractionEvent
from streamrec.core import InteractionLog
from streamrec.core import QuantizedLog
from streamrec.core import Rng
from streamrec.core import SemanticCode
from streamrec.core import rng_stream
from streamrec.core import validate_corpus
from streamrec.errors import EXIT_DATA
from streamrec.errors import EXIT_NUMERIC
from streamrec.errors import EXIT_USAGE
from streamrec.errors import CodeOutOfRange
from streamrec.errors import DimensionMismatch
from streamrec.errors import EmptyCorpus
from streamrec.errors import FormatError
from streamrec.errors import InvalidConfig
from streamrec.errors import MissingArtifact
from streamrec.errors import NonFiniteValue
from streamrec.errors import NumericFailure
from streamrec.errors import StageError
from streamrec.errors import UnknownKey


def labels(**on):
    out = {task: 0 for task in TASKS}
    out.update(on)
    return out


def event(user, author, ts, watch=0, session=0, window=0, **on):
    return InteractionEvent(
        user_id=user,
        author_id=author,
        session_id=session,
        window_index=window,
        timestamp=ts,
        labels=labels(**on),
        watch_seconds=watch,
    )


def make_log(rows):
    """Log from ``(user, author, ts, watch, click)`` tuples."""
    return InteractionLog.from_events(
        event(u, a, t, watch=w, click=c) for u, a, t, w, c in rows
    )


def test_embedding_vector_rejects_non_finite():
    with pytest.raises(NonFiniteValue) as excinfo:
        EmbeddingVector([0.0, 1.0, float("nan")])
    assert excinfo.value.index == 2


def test_embedding_vector_is_read_only_and_bit_exact():
    v = EmbeddingVector([1.0, 2.0])
    assert v.d == 2
    assert v == EmbeddingVector(np.array([1.0, 2.0]))
    assert v != EmbeddingVector([1.0, 2.0 + 1e-15])
    with pytest.raises(ValueError):
        v.values[0] = 5.0


def test_validate_corpus():
    assert validate_corpus([[1.0, 2.0], EmbeddingVector([3.0, 4.0])]) == 2

    with pytest.raises(EmptyCorpus):
        validate_corpus([])

    with pytest.raises(DimensionMismatch) as excinfo:
        validate_corpus([[1.0, 2.0], [1.0, 2.0], [1.0]])
    assert excinfo.value.index == 2

    with pytest.raises(NonFiniteValue) as excinfo:
        validate_corpus([[1.0, 2.0], [float("inf"), 0.0]])
    assert excinfo.value.index == 1


def test_interaction_event_validation():
    assert event(1, 2, 3, watch=70, click=1, long_view=1).is_valid_view

    with pytest.raises(FormatError):
        event(1, 2, 3, long_view=1)

    with pytest.raises(FormatError):
        event(1, 2, 3, watch=-1)

    with pytest.raises(FormatError):
        InteractionEvent(1, 2, 0, 0, 3, {"click": 1}, 0)


def test_semantic_code_validate():
    assert SemanticCode(1, 2, 3).validate((4, 4, 4)) == (1, 2, 3)
    with pytest.raises(CodeOutOfRange) as excinfo:
        SemanticCode(1, 4, 0).validate((4, 4, 4))
    assert excinfo.value.level == 2


def test_rng_streams_are_reproducible_and_disjoint():
    a = Rng(7).child(3).generator().random(5)
    b = Rng(7).child(3).generator().random(5)
    c = Rng(7).child(4).generator().random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert Rng(7).child(3, 1) == Rng(7, (3, 1))

    np.testing.assert_array_equal(rng_stream(7, 5, 3), a)
    assert rng_stream(1, 0).shape == (0,)
    with pytest.raises(ValueError):
        rng_stream(1, -1)


def test_interaction_log_indexing_and_order():
    log = make_log([(1, 2, 30, 5, 1), (0, 1, 10, 0, 0), (2, 0, 20, 1, 1)])
    assert len(log) == 3
    assert log.first_unsorted() == 1
    first = log[0]
    assert isinstance(first, InteractionEvent)
    assert first.labels["click"] == 1
    assert log[-1].user_id == 2

    ordered = log.sorted()
    assert ordered.timestamp.tolist() == [10, 20, 30]
    assert ordered.first_unsorted() is None
    assert list(ordered.label("click")) == [0, 1, 1]
    assert ordered.valid_views().tolist() == [False, False, True]
    assert ordered.user_ids() == [0, 1, 2]

    assert ordered[1:] == ordered.take([1, 2])
    assert InteractionLog.concat([ordered[:1], ordered[1:]]) == ordered
    assert list(InteractionLog.from_events(list(ordered))) == list(ordered)

    with pytest.raises(IndexError):
        log[3]


def test_interaction_log_rejects_bad_columns():
    with pytest.raises(FormatError):
        InteractionLog([0], [0], [0], [0], [0], [[0, 1, 0, 0, 0, 0]], [0])

    with pytest.raises(FormatError):
        InteractionLog([0, 1], [0], [0, 0], [0, 0], [0, 0], [[0] * 6] * 2, [0, 0])


def test_quantized_log():
    log = make_log([(0, 1, 10, 5, 1), (1, 0, 20, 0, 0)])
    qlog = QuantizedLog(log, [[0, 1, 2], [3, 0, 1]], (4, 2, 3))
    assert len(qlog) == 2
    record = qlog[1]
    assert record.event.author_id == 0
    assert record.code == SemanticCode(3, 0, 1)
    assert len(qlog[1:]) == 1
    both = QuantizedLog.concat([qlog[:1], qlog[1:]])
    np.testing.assert_array_equal(both.codes, qlog.codes)
    assert [r.code for r in both] == [(0, 1, 2), (3, 0, 1)]

    with pytest.raises(CodeOutOfRange) as excinfo:
        QuantizedLog(log, [[0, 2, 0], [0, 0, 0]], (4, 2, 3))
    assert excinfo.value.level == 2


def test_error_exit_codes():
    assert InvalidConfig("x").exit_code == EXIT_USAGE
    assert UnknownKey("a.b").exit_code == EXIT_USAGE
    assert str(UnknownKey("a.b")) == "Unknown config key 'a.b'"
    assert EmptyCorpus().exit_code == EXIT_DATA
    assert NumericFailure("nan").exit_code == EXIT_NUMERIC

    wrapped = StageError("train-ranking", NumericFailure("nan"))
    assert wrapped.exit_code == EXIT_NUMERIC
    assert "[train-ranking]" in str(wrapped)

    missing = MissingArtifact("simulate", "out/log.tsv")
    assert isinstance(missing, FileNotFoundError)
    assert "simulate" in str(missing)
