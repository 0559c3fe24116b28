"""Shared domain types, corpus validation and deterministic randomness."""
from dataclasses import dataclass
from typing import Any
from typing import Dict
from typing import Iterable
from typing import Iterator
from typing import List
from typing import Mapping
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union
from typing import overload

import numpy as np
import numpy.typing as npt

from streamrec.errors import CodeOutOfRange
from streamrec.errors import DimensionMismatch
from streamrec.errors import EmptyCorpus
from streamrec.errors import FormatError
from streamrec.errors import NonFiniteValue

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

#: Fixed task order; also the column order of labels in every log file.
TASKS: Tuple[str, ...] = (
    "click",
    "long_view",
    "effective_view",
    "like",
    "comment",
    "gift",
)
TASK_INDEX: Dict[str, int] = {task: i for i, task in enumerate(TASKS)}

WINDOW_SECONDS = 30
VALID_VIEW_SECONDS = 3

_UINT64_MASK = (1 << 64) - 1


class EmbeddingVector:
    """Immutable dense real vector.

    Values are held as a read-only float64 array; equality is bit-exact.
    """

    __slots__ = ("_values",)

    def __init__(self, values: Union[Sequence[float], npt.ArrayLike]) -> None:
        arr = np.array(values, dtype=np.float64).reshape(-1)
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise NonFiniteValue(int(bad[0]))
        arr.setflags(write=False)
        self._values = arr

    @property
    def values(self) -> FloatArray:
        return self._values

    @property
    def d(self) -> int:
        return int(self._values.shape[0])

    def __len__(self) -> int:
        return self.d

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, EmbeddingVector):
            return False
        return bool(np.array_equal(self._values, other._values))

    def __hash__(self) -> int:
        return hash(self._values.tobytes())

    def __repr__(self) -> str:
        return f"EmbeddingVector(d={self.d}, values={self._values.tolist()!r})"


@dataclass(frozen=True)
class InteractionEvent:
    user_id: int
    author_id: int
    session_id: int
    window_index: int
    timestamp: int
    labels: Mapping[str, int]
    watch_seconds: int

    def __post_init__(self) -> None:
        if set(self.labels) != set(TASKS):
            raise FormatError(
                f"Label keys {sorted(self.labels)} differ from task set {list(TASKS)}"
            )
        for task, value in self.labels.items():
            if value not in (0, 1):
                raise FormatError(f"Label {task}={value} is not binary")
        if self.watch_seconds < 0:
            raise FormatError(f"Negative watch_seconds {self.watch_seconds}")
        if self.labels["long_view"] and not self.labels["click"]:
            raise FormatError("long_view=1 requires click=1")

    @property
    def is_valid_view(self) -> bool:
        return self.watch_seconds >= VALID_VIEW_SECONDS

    def label_vector(self) -> Tuple[int, ...]:
        return tuple(int(self.labels[task]) for task in TASKS)


class SemanticCode(NamedTuple):
    c1: int
    c2: int
    c3: int

    def validate(self, sizes: Sequence[int]) -> "SemanticCode":
        for level, (value, size) in enumerate(zip(self, sizes), start=1):
            if not 0 <= value < size:
                raise CodeOutOfRange(level, value, size)
        return self


class Rng:
    """Deterministic counter-based random source.

    Streams come from numpy's ``Philox`` bit generator keyed by
    ``SeedSequence(seed, spawn_key=stream)``. Philox output depends only on
    the key and the counter, so a fixed ``(seed, stream)`` gives the same
    numbers on every platform. ``child`` derives a disjoint substream; two
    different stream paths never share state.
    """

    __slots__ = ("seed", "stream")

    def __init__(self, seed: int, stream: Tuple[int, ...] = ()) -> None:
        self.seed = int(seed) & _UINT64_MASK
        self.stream = tuple(int(s) for s in stream)

    def child(self, *stream_id: int) -> "Rng":
        return Rng(self.seed, self.stream + tuple(stream_id))

    def generator(self) -> np.random.Generator:
        """Return a fresh generator positioned at the start of this stream."""
        seq = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(seq))

    def __eq__(self, other: Any) -> bool:
        return (
            isinstance(other, Rng)
            and self.seed == other.seed
            and self.stream == other.stream
        )

    def __hash__(self) -> int:
        return hash((self.seed, self.stream))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


def rng_stream(seed: int, n: int, stream_id: int = 0) -> FloatArray:
    """Return ``n`` uniform reals in [0, 1) from substream ``(seed, stream_id)``."""
    if n < 0:
        raise ValueError(f"Stream length must be non-negative, got {n}")
    return Rng(seed).child(stream_id).generator().random(n)


def validate_corpus(
    corpus: Sequence[Union[EmbeddingVector, Sequence[float], FloatArray]]
) -> int:
    """Check that every vector shares one dimension and is finite.

    Returns
    -------
    int
        The shared dimension ``d``.

    """
    if len(corpus) == 0:
        raise EmptyCorpus()
    dim: Optional[int] = None
    for i, vec in enumerate(corpus):
        values = vec.values if isinstance(vec, EmbeddingVector) else np.asarray(vec)
        if values.ndim != 1:
            raise DimensionMismatch(i, dim if dim is not None else -1, values.size)
        if dim is None:
            dim = int(values.shape[0])
        elif values.shape[0] != dim:
            raise DimensionMismatch(i, dim, int(values.shape[0]))
        if not np.all(np.isfinite(values.astype(np.float64))):
            raise NonFiniteValue(i)
    assert dim is not None
    return dim


class InteractionLog(Sequence[InteractionEvent]):
    """Columnar interaction log.

    Holds one int64 array per scalar field of :class:`InteractionEvent`
    plus an ``(n, len(TASKS))`` int8 label matrix. Indexing yields
    ``InteractionEvent`` values; slicing and :meth:`take` yield logs.
    """

    def __init__(
        self,
        user_id: npt.ArrayLike,
        author_id: npt.ArrayLike,
        session_id: npt.ArrayLike,
        window_index: npt.ArrayLike,
        timestamp: npt.ArrayLike,
        labels: npt.ArrayLike,
        watch_seconds: npt.ArrayLike,
    ) -> None:
        self.user_id: IntArray = np.asarray(user_id, dtype=np.int64).reshape(-1)
        self.author_id: IntArray = np.asarray(author_id, dtype=np.int64).reshape(-1)
        self.session_id: IntArray = np.asarray(session_id, dtype=np.int64).reshape(-1)
        self.window_index: IntArray = np.asarray(
            window_index, dtype=np.int64
        ).reshape(-1)
        self.timestamp: IntArray = np.asarray(timestamp, dtype=np.int64).reshape(-1)
        self.watch_seconds: IntArray = np.asarray(
            watch_seconds, dtype=np.int64
        ).reshape(-1)
        n = self.user_id.shape[0]
        self.labels: npt.NDArray[np.int8] = np.asarray(labels, dtype=np.int8).reshape(
            n, len(TASKS)
        )
        columns = (
            "author_id",
            "session_id",
            "window_index",
            "timestamp",
            "watch_seconds",
        )
        for name in columns:
            if getattr(self, name).shape[0] != n:
                raise FormatError(f"Column {name} has a different length than user_id")
        if n:
            if np.any((self.labels != 0) & (self.labels != 1)):
                raise FormatError("Labels must be 0 or 1")
            if np.any(self.watch_seconds < 0):
                raise FormatError("watch_seconds must be non-negative")
            lv = self.labels[:, TASK_INDEX["long_view"]]
            if np.any(lv > self.labels[:, TASK_INDEX["click"]]):
                raise FormatError("long_view=1 requires click=1")

    @classmethod
    def empty(cls) -> "InteractionLog":
        zeros = np.zeros(0, dtype=np.int64)
        return cls(zeros, zeros, zeros, zeros, zeros, np.zeros((0, len(TASKS))), zeros)

    @classmethod
    def from_events(cls, events: Iterable[InteractionEvent]) -> "InteractionLog":
        rows = list(events)
        if not rows:
            return cls.empty()
        return cls(
            [e.user_id for e in rows],
            [e.author_id for e in rows],
            [e.session_id for e in rows],
            [e.window_index for e in rows],
            [e.timestamp for e in rows],
            [e.label_vector() for e in rows],
            [e.watch_seconds for e in rows],
        )

    @classmethod
    def concat(cls, logs: Sequence["InteractionLog"]) -> "InteractionLog":
        if not logs:
            return cls.empty()
        return cls(
            np.concatenate([log.user_id for log in logs]),
            np.concatenate([log.author_id for log in logs]),
            np.concatenate([log.session_id for log in logs]),
            np.concatenate([log.window_index for log in logs]),
            np.concatenate([log.timestamp for log in logs]),
            np.concatenate([log.labels for log in logs]),
            np.concatenate([log.watch_seconds for log in logs]),
        )

    def __len__(self) -> int:
        return int(self.user_id.shape[0])

    @overload
    def __getitem__(self, idx: int) -> InteractionEvent:
        ...

    @overload
    def __getitem__(self, idx: slice) -> "InteractionLog":
        ...

    def __getitem__(
        self, idx: Union[int, slice]
    ) -> Union[InteractionEvent, "InteractionLog"]:
        if isinstance(idx, slice):
            return self.take(np.arange(len(self))[idx])
        i = int(idx)
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(f"Log index {idx} out of range")
        return InteractionEvent(
            user_id=int(self.user_id[i]),
            author_id=int(self.author_id[i]),
            session_id=int(self.session_id[i]),
            window_index=int(self.window_index[i]),
            timestamp=int(self.timestamp[i]),
            labels={task: int(self.labels[i, j]) for j, task in enumerate(TASKS)},
            watch_seconds=int(self.watch_seconds[i]),
        )

    def __iter__(self) -> Iterator[InteractionEvent]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, InteractionLog):
            return False
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in (
                "user_id",
                "author_id",
                "session_id",
                "window_index",
                "timestamp",
                "labels",
                "watch_seconds",
            )
        )

    def take(self, indices: npt.ArrayLike) -> "InteractionLog":
        idx = np.asarray(indices, dtype=np.int64)
        return InteractionLog(
            self.user_id[idx],
            self.author_id[idx],
            self.session_id[idx],
            self.window_index[idx],
            self.timestamp[idx],
            self.labels[idx],
            self.watch_seconds[idx],
        )

    def label(self, task: str) -> IntArray:
        return self.labels[:, TASK_INDEX[task]].astype(np.int64)

    def valid_views(self, threshold: int = VALID_VIEW_SECONDS) -> npt.NDArray[np.bool_]:
        return self.watch_seconds >= threshold

    def canonical_order(self) -> IntArray:
        """Indices sorting by (timestamp, user_id, author_id, session, window)."""
        return np.lexsort(
            (
                self.window_index,
                self.session_id,
                self.author_id,
                self.user_id,
                self.timestamp,
            )
        ).astype(np.int64)

    def sorted(self) -> "InteractionLog":
        return self.take(self.canonical_order())

    def first_unsorted(self) -> Optional[int]:
        """Position of the first record whose timestamp decreases, if any."""
        if len(self) < 2:
            return None
        bad = np.flatnonzero(np.diff(self.timestamp) < 0)
        return int(bad[0]) + 1 if bad.size else None

    def user_ids(self) -> List[int]:
        return [int(u) for u in np.unique(self.user_id)]


class QuantizedLogRecord(NamedTuple):
    event: InteractionEvent
    code: SemanticCode


class QuantizedLog(Sequence[QuantizedLogRecord]):
    """Interaction log plus the semantic code of each exposure.

    ``codes`` is an ``(n, 3)`` integer matrix aligned row for row with
    ``log``; every component lies inside ``sizes``.
    """

    def __init__(
        self, log: InteractionLog, codes: npt.ArrayLike, sizes: Sequence[int]
    ) -> None:
        self.log = log
        self.sizes: Tuple[int, ...] = tuple(int(s) for s in sizes)
        self.codes: IntArray = np.asarray(codes, dtype=np.int64).reshape(len(log), 3)
        for level, size in enumerate(self.sizes, start=1):
            column = self.codes[:, level - 1]
            bad = np.flatnonzero((column < 0) | (column >= size))
            if bad.size:
                raise CodeOutOfRange(level, int(column[bad[0]]), size)

    @classmethod
    def concat(cls, logs: Sequence["QuantizedLog"]) -> "QuantizedLog":
        if not logs:
            raise ValueError("Nothing to concatenate")
        return cls(
            InteractionLog.concat([q.log for q in logs]),
            np.concatenate([q.codes for q in logs]),
            logs[0].sizes,
        )

    def __len__(self) -> int:
        return len(self.log)

    @overload
    def __getitem__(self, idx: int) -> QuantizedLogRecord:
        ...

    @overload
    def __getitem__(self, idx: slice) -> "QuantizedLog":
        ...

    def __getitem__(
        self, idx: Union[int, slice]
    ) -> Union[QuantizedLogRecord, "QuantizedLog"]:
        if isinstance(idx, slice):
            return self.take(np.arange(len(self))[idx])
        event = self.log[idx]
        return QuantizedLogRecord(event, self.code(int(idx)))

    def __iter__(self) -> Iterator[QuantizedLogRecord]:
        for i in range(len(self)):
            yield self[i]

    def code(self, i: int) -> SemanticCode:
        c1, c2, c3 = (int(c) for c in self.codes[i])
        return SemanticCode(c1, c2, c3)

    def take(self, indices: npt.ArrayLike) -> "QuantizedLog":
        idx = np.asarray(indices, dtype=np.int64)
        return QuantizedLog(self.log.take(idx), self.codes[idx], self.sizes)
