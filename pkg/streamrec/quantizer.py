"""Three-level residual k-means codebooks and semantic codes."""
import logging
from collections import Counter
from dataclasses import dataclass
from dataclasses import field
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Set
from typing import Tuple
from typing import Union

import numpy as np
import numpy.typing as npt

from streamrec import _codec
from streamrec.core import EmbeddingVector
from streamrec.core import FloatArray
from streamrec.core import IntArray
from streamrec.core import InteractionLog
from streamrec.core import QuantizedLog
from streamrec.core import QuantizedLogRecord
from streamrec.core import Rng
from streamrec.core import SemanticCode
from streamrec.errors import CorpusTooSmall
from streamrec.errors import DimensionMismatch
from streamrec.errors import InvalidConfig
from streamrec.errors import InvalidK
from streamrec.retrieval import TwoTowerParams
from streamrec.retrieval import item_tower_batch
from streamrec.simgen import WindowTable

__all__ = [
    "Codebook",
    "KMeansResult",
    "QuantizedLog",
    "QuantizedLogRecord",
    "QuantizerConfig",
    "assign_codes",
    "assign_codes_batch",
    "build_codebooks",
    "code_stats",
    "kmeans",
    "quantize_log",
    "reconstruct",
    "storage_estimate",
]

logger = logging.getLogger("streamrec")

DEFAULT_SIZES = (64, 32, 16)
PRODUCTION_SIZES = (512, 256, 128)
CORPUS_KINDS = ("author_latest", "windows")

_KMEANS_STREAM = 201
_DIST_CHUNK = 1 << 22


@dataclass(frozen=True)
class QuantizerConfig:
    sizes: Tuple[int, ...] = DEFAULT_SIZES
    max_iters: int = 50
    corpus: str = "author_latest"

    def validate(self) -> "QuantizerConfig":
        if len(self.sizes) != 3 or any(k < 1 for k in self.sizes):
            raise InvalidConfig(
                f"quantizer.sizes must be three positive ints, got {self.sizes}"
            )
        if self.max_iters < 1:
            raise InvalidConfig("quantizer.max_iters must be >= 1")
        if self.corpus not in CORPUS_KINDS:
            raise InvalidConfig(f"quantizer.corpus must be one of {CORPUS_KINDS}")
        return self


def squared_distances(points: FloatArray, centroids: FloatArray) -> FloatArray:
    """Exact ``(n, k)`` squared euclidean distances, computed in row chunks."""
    n, k = points.shape[0], centroids.shape[0]
    out = np.empty((n, k))
    step = max(1, _DIST_CHUNK // max(1, k * points.shape[1]))
    for start in range(0, n, step):
        diff = points[start:start + step, None, :] - centroids[None, :, :]
        out[start:start + step] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


class KMeansResult(NamedTuple):
    centroids: FloatArray
    assignments: IntArray
    inertia_history: List[float]

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _plus_plus(points: FloatArray, k: int, gen: np.random.Generator) -> FloatArray:
    n = points.shape[0]
    chosen = [int(gen.integers(n))]
    d2 = squared_distances(points, points[chosen[0]][None, :])[:, 0]
    while len(chosen) < k:
        total = float(d2.sum())
        if total <= 0.0:
            # every point coincides with a chosen centre
            taken = set(chosen)
            nxt = next(i for i in range(n) if i not in taken)
        else:
            cumulative = np.cumsum(d2)
            nxt = int(np.searchsorted(cumulative, gen.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        chosen.append(nxt)
        d2 = np.minimum(d2, squared_distances(points, points[nxt][None, :])[:, 0])
    return points[chosen].copy()


def kmeans(
    points: npt.ArrayLike,
    k: int,
    max_iters: int = 50,
    seed: int = 0,
    *,
    stream: int = 0,
) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ start.

    Empty clusters are re-seeded at the points farthest from their current
    centre. The inertia history never increases: an iteration that would
    raise it is discarded and the loop stops. Iteration also stops when
    assignments no longer change or the relative inertia change drops
    below 1e-6.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if k < 1 or k > n:
        raise InvalidK(k, n)
    gen = Rng(seed).child(_KMEANS_STREAM, stream).generator()
    centroids = _plus_plus(x, k, gen)
    dist = squared_distances(x, centroids)
    assign = np.argmin(dist, axis=1)
    history = [float(dist[np.arange(n), assign].sum())]
    for it in range(max_iters):
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        new = centroids.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            own = dist[np.arange(n), assign]
            far = np.argsort(-own, kind="stable")[: empty.size]
            new[empty] = x[far]
            logger.warning(
                "quantizer.reseed", extra={"clusters": int(empty.size), "iter": it}
            )
        new_dist = squared_distances(x, new)
        new_assign = np.argmin(new_dist, axis=1)
        inertia = float(new_dist[np.arange(n), new_assign].sum())
        if inertia > history[-1]:
            break
        centroids, dist, previous, assign = new, new_dist, assign, new_assign
        history.append(inertia)
        logger.debug("quantizer.kmeans", extra={"iter": it, "k": k, "inertia": inertia})
        change = (history[-2] - inertia) / max(history[-2], 1e-300)
        if np.array_equal(previous, assign) or change < 1e-6:
            break
    return KMeansResult(centroids, assign.astype(np.int64), history)


@dataclass
class Codebook:
    levels: List[FloatArray]
    inertia: List[float] = field(default_factory=list)
    mse: List[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        dims = {int(level.shape[1]) for level in self.levels}
        if len(dims) != 1:
            raise DimensionMismatch(0, min(dims), max(dims))
        for level in self.levels:
            if not np.all(np.isfinite(level)):
                raise InvalidConfig("Codebook centroids must be finite")

    @property
    def sizes(self) -> Tuple[int, ...]:
        return tuple(int(level.shape[0]) for level in self.levels)

    @property
    def dim(self) -> int:
        return int(self.levels[0].shape[1])

    def save(self, path: str) -> None:
        _codec.write_codebook(path, self.levels)

    @classmethod
    def load(cls, path: str) -> "Codebook":
        return cls(_codec.read_codebook(path))


def assign_codes_batch(x: npt.ArrayLike, cb: Codebook) -> IntArray:
    """Nested nearest-centroid codes for each row; ties go to the lower index."""
    residual = np.array(x, dtype=np.float64, ndmin=2)
    if residual.shape[1] != cb.dim:
        raise DimensionMismatch(0, cb.dim, int(residual.shape[1]))
    codes = np.zeros((residual.shape[0], len(cb.levels)), dtype=np.int64)
    for level, centroids in enumerate(cb.levels):
        pick = np.argmin(squared_distances(residual, centroids), axis=1)
        codes[:, level] = pick
        residual = residual - centroids[pick]
    return codes


def assign_codes(
    x: Union[EmbeddingVector, npt.ArrayLike], cb: Codebook
) -> SemanticCode:
    values = x.values if isinstance(x, EmbeddingVector) else x
    c1, c2, c3 = (int(c) for c in assign_codes_batch(values, cb)[0])
    return SemanticCode(c1, c2, c3)


def reconstruct_batch(codes: IntArray, cb: Codebook, levels: int = 3) -> FloatArray:
    if not 1 <= levels <= len(cb.levels):
        raise ValueError(f"levels must lie in 1..{len(cb.levels)}, got {levels}")
    out = np.zeros((codes.shape[0], cb.dim))
    for level in range(levels):
        out += cb.levels[level][codes[:, level]]
    return out


def reconstruct(code: SemanticCode, cb: Codebook, levels: int = 3) -> EmbeddingVector:
    """Sum of the first ``levels`` centroids named by ``code``."""
    SemanticCode(*code).validate(cb.sizes)
    return EmbeddingVector(reconstruct_batch(np.array([tuple(code)]), cb, levels)[0])


def reconstruction_errors(x: npt.ArrayLike, cb: Codebook) -> List[float]:
    """Mean squared reconstruction error using 1, 2 and 3 levels."""
    points = np.array(x, dtype=np.float64, ndmin=2)
    codes = assign_codes_batch(points, cb)
    errors = []
    for levels in range(1, len(cb.levels) + 1):
        diff = points - reconstruct_batch(codes, cb, levels)
        errors.append(float(np.mean(np.sum(diff * diff, axis=1))))
    return errors


def build_codebooks(
    corpus: npt.ArrayLike,
    sizes: Sequence[int] = DEFAULT_SIZES,
    seed: int = 0,
    max_iters: int = 50,
) -> Codebook:
    """Fit each level on the residuals left by the levels above it."""
    residual = np.array(corpus, dtype=np.float64, ndmin=2)
    n = residual.shape[0]
    if max_iters < 1:
        raise InvalidConfig("max_iters must be >= 1")
    for k in sizes:
        if n < k:
            raise CorpusTooSmall(n, k)
    levels: List[FloatArray] = []
    inertia: List[float] = []
    mse: List[float] = []
    for level, k in enumerate(sizes, start=1):
        result = kmeans(residual, k, max_iters, seed, stream=level)
        pick = np.argmin(squared_distances(residual, result.centroids), axis=1)
        residual = residual - result.centroids[pick]
        levels.append(result.centroids)
        inertia.append(result.inertia)
        mse.append(float(np.mean(np.sum(residual * residual, axis=1))))
        logger.info(
            "quantizer.level",
            extra={"level": level, "k": k, "inertia": result.inertia, "mse": mse[-1]},
        )
    return Codebook(levels, inertia, mse)


def code_bits_required(sizes: Sequence[int]) -> List[int]:
    """Bits needed to store one code of each level."""
    return [max(1, (int(k) - 1).bit_length()) for k in sizes]


def code_storage_bytes(sizes: Sequence[int]) -> List[int]:
    """Bytes used per stored code: one when the level fits in a byte, else two."""
    return [1 if int(k) <= 256 else 2 for k in sizes]


class StorageEstimate(NamedTuple):
    raw_bytes: int
    coded_bytes: int
    ratio: float


def storage_estimate(
    n_users: int,
    seq_len: int,
    float_dim: int,
    float_bits: int,
    n_codes: int,
    code_bits: int,
) -> StorageEstimate:
    """Bytes to keep viewing histories as float vectors versus integer codes.

    Examples
    --------
    >>> est = storage_estimate(10**8, 10**4, 256, 32, 3, 8)
    >>> est.raw_bytes, est.coded_bytes
    (1024000000000000, 3000000000000)

    """
    args = (n_users, seq_len, float_dim, float_bits, n_codes, code_bits)
    if any(int(a) <= 0 for a in args):
        raise ValueError(f"Storage estimate needs positive arguments, got {args}")
    raw_bits = n_users * seq_len * float_dim * float_bits
    coded_bits = n_users * seq_len * n_codes * code_bits
    raw = -(-raw_bits // 8)
    coded = -(-coded_bits // 8)
    return StorageEstimate(int(raw), int(coded), raw / coded)


def codebook_corpus(
    windows: WindowTable,
    params: Optional[TwoTowerParams],
    n_authors: int,
    cutoff: Optional[int] = None,
    kind: str = "author_latest",
) -> FloatArray:
    """Vectors a codebook is fitted on.

    ``author_latest`` takes each author's most recent window at ``cutoff``;
    ``windows`` takes every window starting at or before it. Without
    ``params`` the raw multimodal embeddings are used, otherwise the fused
    item representation.
    """
    if kind == "author_latest":
        rows = windows.latest_rows(n_authors, cutoff)
    elif kind == "windows":
        eligible = np.ones(len(windows), dtype=bool)
        if cutoff is not None:
            eligible = windows.start_ts <= cutoff
        rows = np.flatnonzero(eligible & (windows.author_id < n_authors))
    else:
        raise InvalidConfig(f"Unknown codebook corpus {kind!r}")
    if params is None:
        return windows.mm[rows]
    vectors, _ = item_tower_batch(
        params, windows.author_id[rows], windows.mm[rows], windows.pooled[rows]
    )
    return vectors


def quantize_log(
    log: InteractionLog,
    windows: WindowTable,
    params: Optional[TwoTowerParams],
    cb: Codebook,
) -> QuantizedLog:
    """Code of each event, taken from its window at the exposure moment.

    With ``params`` the fused item representation is quantized; without,
    the raw multimodal window embedding. Output order follows ``log``.
    """
    if len(log) == 0:
        return QuantizedLog(log, np.zeros((0, 3), dtype=np.int64), cb.sizes)
    rows = windows.rows_for(log)
    if params is None:
        vectors = windows.mm[rows]
    else:
        vectors, _ = item_tower_batch(
            params, log.author_id, windows.mm[rows], windows.pooled[rows]
        )
    codes = assign_codes_batch(vectors, cb)
    logger.info(
        "quantizer.quantized",
        extra={"events": len(log), "fused": params is not None},
    )
    return QuantizedLog(log, codes, cb.sizes)


class PrefixGroup(NamedTuple):
    prefix: Tuple[int, int]
    count: int
    authors: Tuple[int, ...]


@dataclass
class CodeStats:
    level_counts: List[Dict[int, int]]
    prefix_groups: List[PrefixGroup]
    purity: Optional[float] = None

    @property
    def empty(self) -> bool:
        return not self.prefix_groups


def code_stats(
    qlog: QuantizedLog,
    author_topics: Optional[npt.ArrayLike] = None,
    top: int = 10,
) -> CodeStats:
    """Code histograms per level and the most used (c1, c2) prefixes.

    With ``author_topics`` (the dominant topic of each author) the purity of
    shared prefixes is reported: for every prefix used by two or more
    authors, the share of its authors belonging to its most common topic,
    averaged with weights equal to the number of authors.
    """
    levels = [
        dict(sorted(Counter(qlog.codes[:, level].tolist()).items()))
        for level in range(qlog.codes.shape[1])
    ]
    if len(qlog) == 0:
        return CodeStats(levels, [])
    members: Dict[Tuple[int, int], Set[int]] = {}
    counts: Dict[Tuple[int, int], int] = {}
    for author, c1, c2 in zip(
        qlog.log.author_id.tolist(),
        qlog.codes[:, 0].tolist(),
        qlog.codes[:, 1].tolist(),
    ):
        members.setdefault((c1, c2), set()).add(author)
        counts[(c1, c2)] = counts.get((c1, c2), 0) + 1
    ranked = sorted(counts, key=lambda p: (-counts[p], p))
    groups = [
        PrefixGroup(p, counts[p], tuple(sorted(members[p]))) for p in ranked[:top]
    ]
    purity = None
    if author_topics is not None:
        topics = np.asarray(author_topics, dtype=np.int64)
        pure = 0
        total = 0
        for authors in members.values():
            if len(authors) < 2:
                continue
            dominant = Counter(int(topics[a]) for a in authors).most_common(1)[0][1]
            pure += dominant
            total += len(authors)
        if total:
            purity = pure / total
    return CodeStats(levels, groups, purity)


def format_code_stats(stats: CodeStats) -> List[str]:
    if stats.empty:
        return ["no codes"]
    lines = []
    for level, counts in enumerate(stats.level_counts, start=1):
        used = sum(1 for c in counts.values() if c)
        lines.append(f"level {level}: {used} codes used")
    for group in stats.prefix_groups:
        shown = ",".join(str(a) for a in group.authors[:12])
        more = ""
        if len(group.authors) > 12:
            more = f",... ({len(group.authors)} authors)"
        c1, c2 = group.prefix
        lines.append(f"prefix {c1}-{c2}: {group.count} events, authors {shown}{more}")
    if stats.purity is not None:
        lines.append(f"prefix purity: {stats.purity:.6f}")
    return lines


def describe_storage(
    sizes: Sequence[int],
    n_users: int = 10 ** 8,
    seq_len: int = 10 ** 4,
    float_dim: int = 256,
) -> Dict[str, float]:
    """Storage figures for the report.

    The estimate assumes one byte per code; ``width_bytes`` counts the bytes
    the configured sizes actually need, which differs once a level exceeds
    256 centroids.
    """
    est = storage_estimate(n_users, seq_len, float_dim, 32, len(sizes), 8)
    out: Dict[str, float] = {
        "raw_bytes": float(est.raw_bytes),
        "coded_bytes": float(est.coded_bytes),
        "ratio": est.ratio,
        "width_bytes": float(n_users * seq_len * sum(code_storage_bytes(sizes))),
    }
    for level, bits in enumerate(code_bits_required(sizes), start=1):
        out[f"bits_c{level}"] = float(bits)
    return out
