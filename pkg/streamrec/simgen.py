"""Synthetic live-streaming world.

Authors drift across topics from session to session, and users watch
different, possibly disjoint, intervals of the same session. Each 30 second
window gets a multimodal embedding drawn from the session's topic mixture,
and users' engagement depends on how their preferences meet the session's
topics and the author's latent style.
"""
import logging
import math
import os
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from typing import TYPE_CHECKING
from typing import Any
from typing import Dict
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

from streamrec import _codec
from streamrec.core import TASK_INDEX
from streamrec.core import TASKS
from streamrec.core import VALID_VIEW_SECONDS
from streamrec.core import WINDOW_SECONDS
from streamrec.core import EmbeddingVector
from streamrec.core import FloatArray
from streamrec.core import IntArray
from streamrec.core import InteractionLog
from streamrec.core import Rng
from streamrec.errors import EmptySplit
from streamrec.errors import InvalidConfig
from streamrec.errors import MissingWindow
from streamrec.errors import UnsortedLog
from streamrec.nnkit import sigmoid

if TYPE_CHECKING:  # pragma: no cover
    _Path = Union[str, "os.PathLike[str]"]

logger = logging.getLogger("streamrec")

DAY_SECONDS = 86_400

DEFAULT_BASE_RATES: Dict[str, float] = {
    "click": 0.10,
    "long_view": 0.04,
    "effective_view": 0.06,
    "like": 0.02,
    "comment": 0.01,
    "gift": 0.005,
}
# engagement depth ordering the generator relies on
_RATE_ORDER = ("click", "effective_view", "long_view", "like", "comment", "gift")

# substream ids
_TOPIC_STREAM = 1
_AUTHOR_STREAM = 2
_USER_STREAM = 3
_DRIFT_STREAM = 4
_STYLE_STREAM = 5
_POPULARITY_STREAM = 6
_SCHEDULE_STREAM = 7
_WINDOW_STREAM = 8
_EXPOSURE_STREAM = 9
_LABEL_STREAM = 10
_RANGE_STREAM = 11


@dataclass(frozen=True)
class WorldConfig:
    n_users: int = 5000
    n_authors: int = 500
    n_topics: int = 8
    d: int = 32
    sessions_per_author: int = 10
    windows_per_session: int = 20
    topic_drift: float = 0.5
    embedding_noise: float = 0.05
    base_rates: Mapping[str, float] = field(
        default_factory=lambda: dict(DEFAULT_BASE_RATES)
    )
    seed: int = 0
    exposures_per_user: int = 40
    n_styles: int = 8
    affinity_weight: float = 12.0
    style_weight: float = 10.0
    topic_concentration: float = 0.2
    popularity_mix: float = 0.8
    popularity_exponent: float = 0.7
    long_view_seconds: int = 60
    effective_view_seconds: int = 10
    valid_view_seconds: int = VALID_VIEW_SECONDS
    user_shard_size: int = 1000
    calibration_tol: float = 1e-3

    def validate(self) -> "WorldConfig":
        for name in (
            "n_users",
            "n_authors",
            "n_topics",
            "d",
            "sessions_per_author",
            "windows_per_session",
            "exposures_per_user",
            "n_styles",
            "user_shard_size",
        ):
            if getattr(self, name) < 1:
                raise InvalidConfig(
                    f"world.{name} must be >= 1, got {getattr(self, name)}"
                )
        if set(self.base_rates) != set(TASKS):
            raise InvalidConfig(
                f"world.base_rates must name exactly {list(TASKS)}, "
                f"got {sorted(self.base_rates)}"
            )
        for task, rate in self.base_rates.items():
            if not 0.0 < rate < 1.0:
                raise InvalidConfig(f"world.base_rates.{task}={rate} outside (0, 1)")
        for upper, lower in zip(_RATE_ORDER, _RATE_ORDER[1:]):
            if self.base_rates[upper] < self.base_rates[lower]:
                raise InvalidConfig(
                    f"world.base_rates.{upper} must be >= world.base_rates.{lower}"
                )
        if not 0.0 <= self.topic_drift <= 1.0:
            raise InvalidConfig(f"world.topic_drift={self.topic_drift} outside [0, 1]")
        if self.embedding_noise < 0:
            raise InvalidConfig("world.embedding_noise must be non-negative")
        if not 0.0 <= self.popularity_mix <= 1.0:
            raise InvalidConfig("world.popularity_mix must lie in [0, 1]")
        if self.topic_concentration <= 0:
            raise InvalidConfig("world.topic_concentration must be positive")
        if not (
            0 <= self.valid_view_seconds
            < self.effective_view_seconds
            < self.long_view_seconds
        ):
            raise InvalidConfig(
                "Need valid_view_seconds < effective_view_seconds < long_view_seconds"
            )
        return self

    @property
    def session_period(self) -> int:
        """Seconds between consecutive session slots of one author (whole days)."""
        length = self.windows_per_session * WINDOW_SECONDS
        return DAY_SECONDS * max(1, math.ceil(length / DAY_SECONDS))


@dataclass(frozen=True, eq=False)
class World:
    config: WorldConfig
    author_base_topics: FloatArray  # (A, T)
    user_prefs: FloatArray  # (U, T)
    topic_embeddings: FloatArray  # (T, d)
    session_topics: FloatArray  # (A, S, T)
    author_styles: FloatArray  # (A, n_styles)
    user_styles: FloatArray  # (U, n_styles)
    author_popularity: FloatArray  # (A,)
    session_starts: IntArray  # (A, S)

    def validate(self) -> "World":
        for name in (
            "author_base_topics",
            "user_prefs",
            "session_topics",
            "author_styles",
            "user_styles",
        ):
            probs = getattr(self, name)
            if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=-1) - 1.0) > 1e-9):
                raise InvalidConfig(f"{name} rows are not probability vectors")
        return self

    def dominant_topics(self) -> IntArray:
        return np.argmax(self.author_base_topics, axis=1).astype(np.int64)


@dataclass(frozen=True)
class SessionWindow:
    author_id: int
    session_id: int
    window_index: int
    mm_embedding: EmbeddingVector
    pooled_embedding: EmbeddingVector
    start_ts: int


def _normalize_rows(x: FloatArray) -> FloatArray:
    return x / x.sum(axis=-1, keepdims=True)


def _dirichlet(
    gen: np.random.Generator, alpha: float, k: int, size: Tuple[int, ...]
) -> FloatArray:
    return _normalize_rows(gen.dirichlet(np.full(k, alpha), size=size))


def generate_world(config: WorldConfig) -> World:
    """Draw topics, preferences, styles, drifted session topics and a schedule."""
    config.validate()
    rng = Rng(config.seed)
    A, U, T = config.n_authors, config.n_users, config.n_topics
    S, conc = config.sessions_per_author, config.topic_concentration

    topic_emb = rng.child(_TOPIC_STREAM).generator().normal(size=(T, config.d))
    topic_emb /= np.linalg.norm(topic_emb, axis=1, keepdims=True)

    base = _dirichlet(rng.child(_AUTHOR_STREAM).generator(), conc, T, (A,))
    prefs = _dirichlet(rng.child(_USER_STREAM).generator(), conc, T, (U,))

    if config.topic_drift == 0.0:
        sessions = np.repeat(base[:, None, :], S, axis=1)
    else:
        draws = _dirichlet(rng.child(_DRIFT_STREAM).generator(), conc, T, (A, S))
        drift = config.topic_drift
        sessions = _normalize_rows((1.0 - drift) * base[:, None, :] + drift * draws)

    style_gen = rng.child(_STYLE_STREAM).generator()
    author_styles = _dirichlet(style_gen, conc, config.n_styles, (A,))
    user_styles = _dirichlet(style_gen, conc, config.n_styles, (U,))

    ranks = rng.child(_POPULARITY_STREAM).generator().permutation(A)
    popularity = 1.0 / np.power(ranks + 1.0, config.popularity_exponent)
    popularity /= popularity.sum()

    period = config.session_period
    slack = period - config.windows_per_session * WINDOW_SECONDS
    offsets = rng.child(_SCHEDULE_STREAM).generator().integers(0, slack + 1, size=A)
    starts = np.arange(S, dtype=np.int64)[None, :] * period + offsets[:, None]

    world = World(
        config=config,
        author_base_topics=base,
        user_prefs=prefs,
        topic_embeddings=topic_emb,
        session_topics=sessions,
        author_styles=author_styles,
        user_styles=user_styles,
        author_popularity=popularity,
        session_starts=starts.astype(np.int64),
    )
    logger.info(
        "simgen.world",
        extra={"authors": A, "users": U, "topics": T, "seed": config.seed},
    )
    return world.validate()


def running_pool(
    author_id: IntArray, start_ts: IntArray, mm: FloatArray
) -> FloatArray:
    """Per-author running mean of window embeddings in time order (inclusive)."""
    n = author_id.shape[0]
    if n == 0:
        return np.zeros_like(mm)
    order = np.lexsort((np.arange(n), start_ts, author_id))
    sorted_auth = author_id[order]
    csum = np.cumsum(mm[order], axis=0)
    first = np.ones(n, dtype=bool)
    first[1:] = sorted_auth[1:] != sorted_auth[:-1]
    group_start = np.maximum.accumulate(np.where(first, np.arange(n), 0))
    before = np.where(
        (group_start > 0)[:, None], csum[np.maximum(group_start - 1, 0)], 0.0
    )
    counts = (np.arange(n) - group_start + 1)[:, None]
    pooled = np.empty_like(mm)
    pooled[order] = (csum - before) / counts
    return pooled


class WindowTable(Sequence[SessionWindow]):
    """Columnar store of emitted windows, in (author, session, window) order."""

    def __init__(
        self,
        author_id: npt.ArrayLike,
        session_id: npt.ArrayLike,
        window_index: npt.ArrayLike,
        start_ts: npt.ArrayLike,
        mm: npt.ArrayLike,
        pooled: Optional[npt.ArrayLike] = None,
    ) -> None:
        self.author_id: IntArray = np.asarray(author_id, dtype=np.int64)
        self.session_id: IntArray = np.asarray(session_id, dtype=np.int64)
        self.window_index: IntArray = np.asarray(window_index, dtype=np.int64)
        self.start_ts: IntArray = np.asarray(start_ts, dtype=np.int64)
        self.mm: FloatArray = np.asarray(mm, dtype=np.float64)
        if pooled is None:
            self.pooled = running_pool(self.author_id, self.start_ts, self.mm)
        else:
            self.pooled = np.asarray(pooled, dtype=np.float64)
        self._rows: Optional[Dict[Tuple[int, int, int], int]] = None

    @property
    def d(self) -> int:
        return int(self.mm.shape[1])

    def __len__(self) -> int:
        return int(self.author_id.shape[0])

    @overload
    def __getitem__(self, idx: int) -> SessionWindow:
        ...

    @overload
    def __getitem__(self, idx: slice) -> List[SessionWindow]:
        ...

    def __getitem__(
        self, idx: Union[int, slice]
    ) -> Union[SessionWindow, List[SessionWindow]]:
        if isinstance(idx, slice):
            return [self[i] for i in range(len(self))[idx]]
        i = int(idx)
        return SessionWindow(
            author_id=int(self.author_id[i]),
            session_id=int(self.session_id[i]),
            window_index=int(self.window_index[i]),
            mm_embedding=EmbeddingVector(self.mm[i]),
            pooled_embedding=EmbeddingVector(self.pooled[i]),
            start_ts=int(self.start_ts[i]),
        )

    def __iter__(self) -> Iterator[SessionWindow]:
        for i in range(len(self)):
            yield self[i]

    def _index(self) -> Dict[Tuple[int, int, int], int]:
        if self._rows is None:
            self._rows = {
                key: row
                for row, key in enumerate(
                    zip(
                        self.author_id.tolist(),
                        self.session_id.tolist(),
                        self.window_index.tolist(),
                    )
                )
            }
        return self._rows

    def row(self, author_id: int, session_id: int, window_index: int) -> int:
        try:
            return self._index()[(author_id, session_id, window_index)]
        except KeyError:
            raise MissingWindow(author_id, session_id, window_index) from None

    def rows_for(self, log: InteractionLog) -> IntArray:
        """Row of the window each event was exposed in."""
        index = self._index()
        keys = zip(
            log.author_id.tolist(), log.session_id.tolist(), log.window_index.tolist()
        )
        rows = np.empty(len(log), dtype=np.int64)
        for i, key in enumerate(keys):
            row = index.get(key)
            if row is None:
                raise MissingWindow(*key)
            rows[i] = row
        return rows

    def latest_rows(self, n_authors: int, cutoff: Optional[int] = None) -> IntArray:
        """Per author, the most recent window starting at or before ``cutoff``."""
        eligible = np.ones(len(self), dtype=bool)
        if cutoff is not None:
            eligible = self.start_ts <= cutoff
        latest = np.full(n_authors, -1, dtype=np.int64)
        best_ts = np.full(n_authors, np.iinfo(np.int64).min, dtype=np.int64)
        for row in np.flatnonzero(eligible):
            a = int(self.author_id[row])
            if a >= n_authors:
                continue
            if self.start_ts[row] >= best_ts[a]:
                best_ts[a] = self.start_ts[row]
                latest[a] = row
        missing = np.flatnonzero(latest < 0)
        if missing.size:
            raise MissingWindow(int(missing[0]))
        return latest


def emit_windows(world: World) -> WindowTable:
    """One multimodal embedding per 30 s window of every session."""
    cfg = world.config
    A, S, W, d = cfg.n_authors, cfg.sessions_per_author, cfg.windows_per_session, cfg.d
    means = world.session_topics @ world.topic_embeddings  # (A, S, d)
    mm = np.broadcast_to(means[:, :, None, :], (A, S, W, d)).copy()
    if cfg.embedding_noise > 0:
        gen = Rng(cfg.seed).child(_WINDOW_STREAM).generator()
        mm += gen.normal(0.0, cfg.embedding_noise, size=(A, S, W, d))
    author = np.repeat(np.arange(A), S * W)
    session = np.tile(np.repeat(np.arange(S), W), A)
    window = np.tile(np.arange(W), A * S)
    start = world.session_starts[author, session] + WINDOW_SECONDS * window
    table = WindowTable(author, session, window, start, mm.reshape(A * S * W, d))
    logger.info("simgen.windows", extra={"windows": len(table), "dim": d})
    return table


def true_affinity_logits(
    world: World,
    user_id: IntArray,
    author_id: IntArray,
    session_id: IntArray,
    config: Optional[WorldConfig] = None,
) -> FloatArray:
    """Generator click logit without the calibrated bias."""
    cfg = config or world.config
    session = world.session_topics[author_id, session_id]
    topic = np.einsum("nt,nt->n", world.user_prefs[user_id], session)
    style = np.einsum(
        "ns,ns->n", world.user_styles[user_id], world.author_styles[author_id]
    )
    return cfg.affinity_weight * topic + cfg.style_weight * style


def true_click_logits(world: World, log: InteractionLog) -> FloatArray:
    return true_affinity_logits(world, log.user_id, log.author_id, log.session_id)


def calibrate_bias(
    logits: FloatArray, target: float, tol: float = 1e-3, max_iter: int = 200
) -> float:
    """Bisection for beta with mean(sigmoid(logits + beta)) ~= target."""
    lo, hi = -60.0, 60.0
    beta = 0.0
    for step in range(max_iter):
        beta = 0.5 * (lo + hi)
        rate = float(np.mean(sigmoid(logits + beta)))
        logger.debug(
            "simgen.calibrate", extra={"step": step, "beta": beta, "rate": rate}
        )
        if abs(rate - target) < tol:
            break
        if rate > target:
            hi = beta
        else:
            lo = beta
    return beta


class _SessionGroups(NamedTuple):
    """Window rows grouped by (author, session), sorted by window index."""

    order: IntArray
    start: IntArray
    length: IntArray
    first: IntArray
    count: IntArray


def _session_groups(windows: WindowTable, n_authors: int) -> _SessionGroups:
    order = np.lexsort(
        (windows.window_index, windows.session_id, windows.author_id)
    ).astype(np.int64)
    author = windows.author_id[order]
    session = windows.session_id[order]
    change = np.ones(order.size, dtype=bool)
    change[1:] = (author[1:] != author[:-1]) | (session[1:] != session[:-1])
    start = np.flatnonzero(change).astype(np.int64)
    length = np.diff(np.append(start, order.size)).astype(np.int64)
    count = np.bincount(author[start], minlength=n_authors)[:n_authors]
    first = np.concatenate([[0], np.cumsum(count)[:-1]]).astype(np.int64)
    return _SessionGroups(order, start, length, first, count.astype(np.int64))


def _watch_ranges(
    groups: _SessionGroups,
    user: IntArray,
    group: IntArray,
    gen: np.random.Generator,
) -> IntArray:
    """Window rows for exposures, one contiguous range per (user, session).

    A user exposed ``m`` times to a session watches ``m`` consecutive windows
    starting at a random offset; when ``m`` exceeds the session length the
    range wraps over the whole session.
    """
    n_groups = groups.start.size
    key = user.astype(np.int64) * n_groups + group
    uniq, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    length = groups.length[uniq % n_groups]
    span = np.minimum(counts, length)
    lo = np.floor(gen.random(uniq.size) * (length - span + 1)).astype(np.int64)
    order = np.argsort(inverse, kind="stable")
    first = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.empty_like(inverse)
    rank[order] = np.arange(inverse.size) - first[inverse[order]]
    pos = lo[inverse] + rank % span[inverse]
    return groups.order[groups.start[group] + pos]


def simulate_interactions(
    world: World, windows: WindowTable, config: Optional[WorldConfig] = None
) -> InteractionLog:
    """Sample exposures and engagement labels; returns a canonically sorted log."""
    cfg = (config or world.config).validate()
    if len(windows) == 0:
        raise InvalidConfig("Cannot simulate interactions without windows")
    A = world.author_base_topics.shape[0]
    U = world.user_prefs.shape[0]
    rng = Rng(cfg.seed)
    groups = _session_groups(windows, A)
    available = groups.count > 0
    popularity = world.author_popularity * available
    popularity /= popularity.sum()
    candidates = np.flatnonzero(available)

    # pass 1: exposures per user shard
    shards: List[Dict[str, Any]] = []
    for shard, start in enumerate(range(0, U, cfg.user_shard_size)):
        gen = rng.child(_EXPOSURE_STREAM, shard).generator()
        users = np.arange(start, min(start + cfg.user_shard_size, U))
        n = users.size * cfg.exposures_per_user
        user = np.repeat(users, cfg.exposures_per_user)
        popular = gen.random(n) < cfg.popularity_mix
        by_pop = gen.choice(A, size=n, p=popularity)
        by_uniform = candidates[gen.integers(0, candidates.size, size=n)]
        author = np.where(popular, by_pop, by_uniform)
        pick = np.floor(gen.random(n) * groups.count[author]).astype(np.int64)
        second = gen.integers(0, WINDOW_SECONDS, size=n)
        ranges = rng.child(_RANGE_STREAM, shard).generator()
        row = _watch_ranges(groups, user, groups.first[author] + pick, ranges)
        session = windows.session_id[row]
        logits = true_affinity_logits(world, user, author, session, cfg)
        shards.append(
            {
                "user": user,
                "author": author,
                "session": session,
                "window": windows.window_index[row],
                "timestamp": windows.start_ts[row] + second,
                "logits": logits,
            }
        )

    all_logits = np.concatenate([s["logits"] for s in shards])
    rates = cfg.base_rates
    beta = calibrate_bias(all_logits, rates["click"], cfg.calibration_tol)
    logger.info("simgen.calibrated", extra={"beta": beta, "exposures": all_logits.size})

    q = {task: rates[task] / rates["click"] for task in TASKS}
    extra_ev = (
        (q["effective_view"] - q["long_view"]) / (1.0 - q["long_view"])
        if q["long_view"] < 1.0
        else 0.0
    )
    lv_s, ev_s = cfg.long_view_seconds, cfg.effective_view_seconds

    # pass 2: labels and watch time
    for shard_idx, s in enumerate(shards):
        n = s["user"].size
        u = rng.child(_LABEL_STREAM, shard_idx).generator().random((n, 7))
        click = u[:, 0] < sigmoid(s["logits"] + beta)
        long_view = click & (u[:, 1] < q["long_view"])
        effective = click & (long_view | (u[:, 2] < extra_ev))
        labels = np.zeros((n, len(TASKS)), dtype=np.int8)
        labels[:, TASK_INDEX["click"]] = click
        labels[:, TASK_INDEX["long_view"]] = long_view
        labels[:, TASK_INDEX["effective_view"]] = effective
        for j, task in enumerate(("like", "comment", "gift"), start=3):
            labels[:, TASK_INDEX[task]] = click & (u[:, j] < q[task])
        watch = np.zeros(n, dtype=np.int64)
        watch = np.where(long_view, lv_s + np.floor(u[:, 6] * 3 * lv_s), watch)
        watch = np.where(
            effective & ~long_view, ev_s + np.floor(u[:, 6] * (lv_s - ev_s)), watch
        )
        watch = np.where(click & ~effective, np.floor(u[:, 6] * ev_s), watch)
        s["labels"] = labels
        s["watch"] = watch.astype(np.int64)

    log = InteractionLog(
        np.concatenate([s["user"] for s in shards]),
        np.concatenate([s["author"] for s in shards]),
        np.concatenate([s["session"] for s in shards]),
        np.concatenate([s["window"] for s in shards]),
        np.concatenate([s["timestamp"] for s in shards]),
        np.concatenate([s["labels"] for s in shards]),
        np.concatenate([s["watch"] for s in shards]),
    ).sorted()
    logger.info(
        "simgen.interactions",
        extra={"events": len(log), "click_rate": float(log.label("click").mean())},
    )
    return log


def split_log(
    log: InteractionLog, fraction: float, *, resort: bool = False
) -> Tuple[InteractionLog, InteractionLog]:
    """Temporal split: every eval timestamp is strictly after every train one.

    The cut starts at ``floor(fraction * n)`` and moves forward past records
    sharing the boundary timestamp. Unsorted input raises ``UnsortedLog``
    unless ``resort`` is set, in which case the log is sorted first.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"Split fraction {fraction} outside [0, 1]")
    bad = log.first_unsorted()
    if bad is not None:
        if not resort:
            raise UnsortedLog(bad)
        log = log.sorted()
    n = len(log)
    cut = int(math.floor(fraction * n))
    while 0 < cut < n and log.timestamp[cut] == log.timestamp[cut - 1]:
        cut += 1
    if cut == 0 or cut >= n:
        raise EmptySplit(cut, n - cut)
    return log[:cut], log[cut:]


def config_manifest(config: WorldConfig) -> Dict[str, Any]:
    items: Dict[str, Any] = {}
    for key, value in asdict(config).items():
        if isinstance(value, dict):
            for task in TASKS:
                items[f"world.{key}.{task}"] = value[task]
        else:
            items[f"world.{key}"] = value
    return items


def write_manifest(path: "_Path", config: WorldConfig, **extra: Any) -> None:
    items = config_manifest(config)
    items.update(extra)
    _codec.write_kv(path, items)


_WINDOW_KEYS = ("author_id", "session_id", "window_index", "start_ts")


def write_windows(table: WindowTable, corpus_path: "_Path", keys_path: "_Path") -> None:
    _codec.write_corpus(corpus_path, table.mm)
    _codec.write_int_table(
        keys_path,
        {
            "author_id": table.author_id,
            "session_id": table.session_id,
            "window_index": table.window_index,
            "start_ts": table.start_ts,
        },
    )


def read_windows(corpus_path: "_Path", keys_path: "_Path") -> WindowTable:
    mm = _codec.read_corpus(corpus_path)
    keys = _codec.read_int_table(keys_path, _WINDOW_KEYS)
    return WindowTable(
        keys["author_id"],
        keys["session_id"],
        keys["window_index"],
        keys["start_ts"],
        mm,
    )


def windows_from(windows: Sequence[SessionWindow]) -> WindowTable:
    """Build a table from individual windows (pooled embeddings recomputed)."""
    if isinstance(windows, WindowTable):
        return windows
    return WindowTable(
        [w.author_id for w in windows],
        [w.session_id for w in windows],
        [w.window_index for w in windows],
        [w.start_ts for w in windows],
        np.stack([w.mm_embedding.values for w in windows]),
    )
