"""Per-event viewing histories built from strictly earlier valid views."""
from dataclasses import dataclass
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
import numpy.typing as npt

from streamrec.core import VALID_VIEW_SECONDS
from streamrec.core import IntArray
from streamrec.core import InteractionLog
from streamrec.core import QuantizedLog
from streamrec.core import SemanticCode

DEFAULT_HISTORY_LENGTH = 50

_INT64_MAX = np.iinfo(np.int64).max


@dataclass(frozen=True)
class HistorySequence:
    """A user's most recent valid views, oldest first and most recent last."""

    entries: Tuple[Tuple[int, SemanticCode], ...] = ()
    max_len: int = DEFAULT_HISTORY_LENGTH

    def __post_init__(self) -> None:
        if len(self.entries) > self.max_len:
            raise ValueError(
                f"History of length {len(self.entries)} exceeds limit {self.max_len}"
            )

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def author_ids(self) -> Tuple[int, ...]:
        return tuple(author for author, _ in self.entries)

    @property
    def codes(self) -> Tuple[SemanticCode, ...]:
        return tuple(code for _, code in self.entries)


class HistoryBatch(NamedTuple):
    """Padded histories for a batch of targets.

    ``authors`` is ``(n, L)`` with ``-1`` padding on the right, ``codes`` is
    ``(n, L, 3)`` with zeros under padding, ``mask`` flags real entries.
    """

    authors: IntArray
    codes: IntArray
    mask: npt.NDArray[np.bool_]

    def __len__(self) -> int:
        return int(self.authors.shape[0])

    def take(self, indices: npt.ArrayLike) -> "HistoryBatch":
        idx = np.asarray(indices, dtype=np.int64)
        return HistoryBatch(self.authors[idx], self.codes[idx], self.mask[idx])

    def sequence(self, i: int) -> HistorySequence:
        length = int(self.mask[i].sum())
        entries = tuple(
            (int(self.authors[i, j]), SemanticCode(*(int(c) for c in self.codes[i, j])))
            for j in range(length)
        )
        return HistorySequence(entries, max_len=int(self.authors.shape[1]))

    @classmethod
    def from_sequences(
        cls, sequences: Sequence[HistorySequence], max_len: int
    ) -> "HistoryBatch":
        n = len(sequences)
        authors = np.full((n, max_len), -1, dtype=np.int64)
        codes = np.zeros((n, max_len, 3), dtype=np.int64)
        for i, seq in enumerate(sequences):
            for j, (author, code) in enumerate(seq.entries[-max_len:]):
                authors[i, j] = author
                codes[i, j] = tuple(code)
        return cls(authors, codes, authors >= 0)


def history_positions(
    source: InteractionLog,
    target_users: npt.ArrayLike,
    target_times: npt.ArrayLike,
    max_len: int = DEFAULT_HISTORY_LENGTH,
    valid_view_seconds: int = VALID_VIEW_SECONDS,
) -> IntArray:
    """Rows of ``source`` forming each target's history.

    For every target, the (at most ``max_len``) latest valid views by the
    same user with a timestamp strictly before the target's, ordered by time.
    The result is ``(n, max_len)``, left aligned and padded with ``-1``.
    """
    if max_len < 0:
        raise ValueError(f"History length must be non-negative, got {max_len}")
    users = np.asarray(target_users, dtype=np.int64).reshape(-1)
    times = np.asarray(target_times, dtype=np.int64).reshape(-1)
    n = users.shape[0]
    out = np.full((n, max_len), -1, dtype=np.int64)
    valid = np.flatnonzero(source.valid_views(valid_view_seconds))
    if n == 0 or max_len == 0 or valid.size == 0:
        return out
    vu_all = source.user_id[valid]
    vt_all = source.timestamp[valid]
    order = valid[np.lexsort((valid, vt_all, vu_all))]
    vu = source.user_id[order]
    vt = source.timestamp[order]

    tmin = int(min(vt.min(), times.min()))
    tmax = int(vt.max())
    clipped = np.clip(times, tmin, tmax + 1) - tmin
    span = tmax - tmin + 2
    top_user = int(max(vu.max(), users.max()))
    lo = np.searchsorted(vu, users, side="left")
    if (top_user + 1) * span < 2 ** 62 and int(min(vu.min(), users.min())) >= 0:
        key_v = vu * span + (vt - tmin)
        key_t = users * span + clipped
        end = np.searchsorted(key_v, key_t, side="left")
    else:
        hi = np.searchsorted(vu, users, side="right")
        end = np.array(
            [
                a + np.searchsorted(vt[a:b], t, side="left")
                for a, b, t in zip(lo.tolist(), hi.tolist(), times.tolist())
            ],
            dtype=np.int64,
        )
    start = np.maximum(lo, end - max_len)
    length = end - start
    offsets = np.arange(max_len)[None, :]
    idx = np.minimum(start[:, None] + offsets, order.size - 1)
    filled = offsets < length[:, None]
    out[filled] = order[idx][filled]
    return out


def gather_histories(source: QuantizedLog, positions: IntArray) -> HistoryBatch:
    mask = positions >= 0
    safe = np.where(mask, positions, 0)
    if len(source) == 0:
        authors = np.full(positions.shape, -1, dtype=np.int64)
        codes = np.zeros(positions.shape + (3,), dtype=np.int64)
        return HistoryBatch(authors, codes, mask)
    authors = np.where(mask, source.log.author_id[safe], -1)
    codes = np.where(mask[..., None], source.codes[safe], 0)
    return HistoryBatch(authors, codes, mask)


def event_histories(
    source: QuantizedLog,
    targets: InteractionLog,
    max_len: int = DEFAULT_HISTORY_LENGTH,
    valid_view_seconds: int = VALID_VIEW_SECONDS,
) -> HistoryBatch:
    """History of every target event, drawn from ``source`` without leakage."""
    positions = history_positions(
        source.log, targets.user_id, targets.timestamp, max_len, valid_view_seconds
    )
    return gather_histories(source, positions)


def user_histories(
    source: QuantizedLog,
    user_ids: npt.ArrayLike,
    cutoff: Optional[int] = None,
    max_len: int = DEFAULT_HISTORY_LENGTH,
    valid_view_seconds: int = VALID_VIEW_SECONDS,
) -> HistoryBatch:
    """State of each user's history at ``cutoff`` (inclusive), or at the end."""
    users = np.asarray(user_ids, dtype=np.int64).reshape(-1)
    moment = _INT64_MAX if cutoff is None else cutoff + 1
    times = np.full(users.shape[0], moment, dtype=np.int64)
    positions = history_positions(source.log, users, times, max_len, valid_view_seconds)
    return gather_histories(source, positions)
