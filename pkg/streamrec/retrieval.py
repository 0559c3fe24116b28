"""Two-tower retrieval with a gated item tower and in-batch softmax training.

The item tower mixes a multimodal branch and an ID branch::

    llm  = mlp_llm([llm_30s, llm_pooling])
    rec  = mlp_item(author_row)
    gate = sigmoid(author_row . w + b)
    item = gate * llm + (1 - gate) * rec

The user tower is ``mlp_user(user_row)``, optionally shifted by the sum of
the code embeddings of the user's recent views projected through
``code_proj``. Training pairs are click events; every other row of a batch
acts as a negative.
"""
import logging
from dataclasses import dataclass
from typing import Any
from typing import Dict
from typing import Iterable
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
import numpy.typing as npt

from streamrec.core import EmbeddingVector
from streamrec.core import FloatArray
from streamrec.core import IntArray
from streamrec.core import InteractionLog
from streamrec.core import QuantizedLog
from streamrec.core import Rng
from streamrec.core import SemanticCode
from streamrec.errors import DimensionMismatch
from streamrec.errors import EmptyP
from streamrec.errors import InvalidConfig
from streamrec.errors import KTooLarge
from streamrec.errors import NoPositives
from streamrec.errors import UnknownAuthor
from streamrec.errors import UnknownUser
from streamrec.errors import ZeroNormRow
from streamrec.history import DEFAULT_HISTORY_LENGTH
from streamrec.history import HistoryBatch
from streamrec.history import event_histories
from streamrec.history import user_histories
from streamrec.nnkit import AdamState
from streamrec.nnkit import Checkpoint
from streamrec.nnkit import MlpParams
from streamrec.nnkit import Params
from streamrec.nnkit import Tape
from streamrec.nnkit import adam_step
from streamrec.nnkit import ensure_finite
from streamrec.nnkit import gather_rows
from streamrec.nnkit import log_softmax
from streamrec.nnkit import mlp_backward
from streamrec.nnkit import mlp_forward
from streamrec.nnkit import scatter_rows
from streamrec.nnkit import sigmoid
from streamrec.nnkit import softmax
from streamrec.simgen import WindowTable

logger = logging.getLogger("streamrec")

CHECKPOINT_KIND = "retrieval"

VARIANTS = ("id_only", "llm_only", "fusion", "fusion_codes")
GATED_VARIANTS = ("fusion", "fusion_codes")
#: ``retrieved`` divides the overlap by |R|, ``recall`` by |P|.
HITRATE_DENOMINATORS = ("retrieved", "recall")

TOWER_ACTIVATIONS = ("relu", "identity")

_INIT_STREAM = 101
_SHUFFLE_STREAM = 102


@dataclass(frozen=True)
class RetrievalConfig:
    d: int = 32
    tau: float = 0.1
    lr: float = 0.01
    batch_size: int = 256
    epochs: int = 10
    normalize: bool = True
    hitrate_k: int = 100
    hitrate_denominator: str = "retrieved"
    history_length: int = DEFAULT_HISTORY_LENGTH
    init_scale: float = 0.1

    def validate(self) -> "RetrievalConfig":
        if self.d < 1:
            raise InvalidConfig(f"retrieval.d must be >= 1, got {self.d}")
        if self.tau <= 0:
            raise InvalidConfig(f"retrieval.tau must be positive, got {self.tau}")
        if self.lr <= 0:
            raise InvalidConfig("retrieval.lr must be positive")
        if self.batch_size < 1:
            raise InvalidConfig("retrieval.batch_size must be >= 1")
        if self.epochs < 0:
            raise InvalidConfig("retrieval.epochs must be >= 0")
        if self.hitrate_k < 1:
            raise InvalidConfig("retrieval.hitrate_k must be >= 1")
        if self.hitrate_denominator not in HITRATE_DENOMINATORS:
            raise InvalidConfig(
                f"retrieval.hitrate_denominator must be one of {HITRATE_DENOMINATORS}"
            )
        if self.history_length < 0:
            raise InvalidConfig("retrieval.history_length must be >= 0")
        return self


class GateStats(NamedTuple):
    mean: float
    q10: float
    q50: float
    q90: float


class TwoTowerParams:
    """Named tensors of the two towers plus the variant they were built for.

    The MLP views share storage with ``tensors``; in-place optimiser updates
    are visible through both.
    """

    def __init__(
        self,
        tensors: Params,
        variant: str = "fusion",
        tau: float = 0.1,
        normalize: bool = True,
    ) -> None:
        if variant not in VARIANTS:
            raise InvalidConfig(f"Unknown retrieval variant {variant!r}")
        if tau <= 0:
            raise InvalidConfig(f"Temperature must be positive, got {tau}")
        self.tensors = tensors
        self.variant = variant
        self.tau = float(tau)
        self.normalize = bool(normalize)
        self.mlp_llm = MlpParams.from_tensors(tensors, "mlp_llm", TOWER_ACTIVATIONS)
        self.mlp_item = MlpParams.from_tensors(tensors, "mlp_item", TOWER_ACTIVATIONS)
        self.mlp_user = MlpParams.from_tensors(tensors, "mlp_user", TOWER_ACTIVATIONS)
        if self.uses_codes and "code_proj" not in tensors:
            raise InvalidConfig("Variant fusion_codes needs code tables")

    @classmethod
    def init(
        cls,
        n_users: int,
        n_authors: int,
        mm_dim: int,
        config: RetrievalConfig,
        variant: str,
        gen: np.random.Generator,
        code_sizes: Optional[Sequence[int]] = None,
    ) -> "TwoTowerParams":
        d, scale = config.d, config.init_scale
        tensors: Params = {
            "author_table": gen.normal(0.0, scale, size=(n_authors, d)),
            "user_table": gen.normal(0.0, scale, size=(n_users, d)),
            "gate.weight": gen.normal(0.0, scale, size=d),
            "gate.bias": np.zeros(1),
        }
        towers = {
            "mlp_llm": [2 * mm_dim, 2 * d, d],
            "mlp_item": [d, 2 * d, d],
            "mlp_user": [d, 2 * d, d],
        }
        for prefix, sizes in towers.items():
            mlp = MlpParams.init(sizes, TOWER_ACTIVATIONS, gen)
            tensors.update(mlp.named_tensors(prefix))
        if variant == "fusion_codes":
            if code_sizes is None:
                raise InvalidConfig("Variant fusion_codes needs codebook sizes")
            for level, size in enumerate(code_sizes, start=1):
                tensors[f"code_table.{level}"] = gen.normal(0.0, scale, size=(size, d))
            tensors["code_proj"] = np.eye(d)
        return cls(tensors, variant, config.tau, config.normalize)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "TwoTowerParams":
        if checkpoint.kind != CHECKPOINT_KIND:
            raise InvalidConfig(
                f"Expected a {CHECKPOINT_KIND} checkpoint, got {checkpoint.kind!r}"
            )
        meta = checkpoint.metadata
        return cls(
            checkpoint.tensors,
            meta.get("variant", "fusion"),
            meta.get("tau", 0.1),
            meta.get("normalize", True),
        )

    def to_checkpoint(self, **metadata: Any) -> Checkpoint:
        meta: Dict[str, Any] = {
            "variant": self.variant,
            "tau": self.tau,
            "normalize": self.normalize,
        }
        meta.update(metadata)
        return Checkpoint(CHECKPOINT_KIND, self.tensors, meta)

    @property
    def d(self) -> int:
        return int(self.tensors["author_table"].shape[1])

    @property
    def mm_dim(self) -> int:
        return self.mlp_llm.in_dim // 2

    @property
    def n_authors(self) -> int:
        return int(self.tensors["author_table"].shape[0])

    @property
    def n_users(self) -> int:
        return int(self.tensors["user_table"].shape[0])

    @property
    def uses_codes(self) -> bool:
        return self.variant == "fusion_codes"

    @property
    def code_tables(self) -> List[FloatArray]:
        return [self.tensors[f"code_table.{level}"] for level in (1, 2, 3)]

    def gate_values(self, author_rows: FloatArray) -> FloatArray:
        n = author_rows.shape[0]
        if self.variant == "id_only":
            return np.zeros(n)
        if self.variant == "llm_only":
            return np.ones(n)
        logits = author_rows @ self.tensors["gate.weight"]
        return sigmoid(logits + self.tensors["gate.bias"][0])


def _check_ids(ids: IntArray, size: int, error: Any) -> None:
    bad = np.flatnonzero((ids < 0) | (ids >= size))
    if bad.size:
        raise error(int(ids[bad[0]]))


def _as_batch(x: npt.ArrayLike, dim: int) -> FloatArray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[1] != dim:
        raise DimensionMismatch(0, dim, int(arr.shape[1]))
    return arr


class _ItemPass(NamedTuple):
    out: FloatArray
    gate: FloatArray
    llm: FloatArray
    rec: FloatArray
    author_rows: FloatArray
    author_ids: IntArray
    tape_llm: Tape
    tape_item: Tape


class _UserPass(NamedTuple):
    out: FloatArray
    user_ids: IntArray
    tape_user: Tape
    pooled: Optional[FloatArray]
    history: Optional[HistoryBatch]


def _item_forward(
    p: TwoTowerParams,
    author_ids: npt.ArrayLike,
    llm_30s: npt.ArrayLike,
    llm_pooling: npt.ArrayLike,
) -> _ItemPass:
    ids = np.asarray(author_ids, dtype=np.int64).reshape(-1)
    _check_ids(ids, p.n_authors, UnknownAuthor)
    x = np.concatenate(
        [_as_batch(llm_30s, p.mm_dim), _as_batch(llm_pooling, p.mm_dim)], axis=1
    )
    llm, tape_llm = mlp_forward(p.mlp_llm, x)
    rows = gather_rows(p.tensors["author_table"], ids)
    rec, tape_item = mlp_forward(p.mlp_item, rows)
    gate = p.gate_values(rows)
    out = gate[:, None] * llm + (1.0 - gate)[:, None] * rec
    return _ItemPass(out, gate, llm, rec, rows, ids, tape_llm, tape_item)


def pool_codes(p: TwoTowerParams, history: HistoryBatch) -> FloatArray:
    """Sum of the code table rows of every history entry, per target."""
    pooled = np.zeros((len(history), p.d))
    for level, table in enumerate(p.code_tables):
        rows = table[history.codes[..., level]]
        pooled += np.sum(rows * history.mask[..., None], axis=1)
    return pooled


def _user_forward(
    p: TwoTowerParams, user_ids: npt.ArrayLike, history: Optional[HistoryBatch]
) -> _UserPass:
    ids = np.asarray(user_ids, dtype=np.int64).reshape(-1)
    _check_ids(ids, p.n_users, UnknownUser)
    out, tape = mlp_forward(p.mlp_user, gather_rows(p.tensors["user_table"], ids))
    pooled = None
    if p.uses_codes and history is not None:
        pooled = pool_codes(p, history)
        out = out + pooled @ p.tensors["code_proj"]
    return _UserPass(out, ids, tape, pooled, history)


def item_tower_batch(
    params: TwoTowerParams,
    author_ids: npt.ArrayLike,
    llm_30s: npt.ArrayLike,
    llm_pooling: npt.ArrayLike,
) -> Tuple[FloatArray, FloatArray]:
    """Fused item representations and gate values for many windows."""
    step = _item_forward(params, author_ids, llm_30s, llm_pooling)
    return step.out, step.gate


def item_tower(
    params: TwoTowerParams,
    author_id: int,
    llm_30s: Union[EmbeddingVector, npt.ArrayLike],
    llm_pooling: Union[EmbeddingVector, npt.ArrayLike],
) -> Tuple[EmbeddingVector, float]:
    def values(v: Union[EmbeddingVector, npt.ArrayLike]) -> FloatArray:
        if isinstance(v, EmbeddingVector):
            return v.values
        return np.asarray(v, dtype=np.float64)

    out, gate = item_tower_batch(
        params, [author_id], values(llm_30s), values(llm_pooling)
    )
    return EmbeddingVector(out[0]), float(gate[0])


def user_vectors(
    params: TwoTowerParams,
    user_ids: npt.ArrayLike,
    history: Optional[HistoryBatch] = None,
) -> FloatArray:
    return _user_forward(params, user_ids, history).out


def user_tower(
    params: TwoTowerParams,
    user_id: int,
    history_codes: Optional[Sequence[SemanticCode]] = None,
) -> EmbeddingVector:
    """``mlp_user`` of the user's row, shifted by pooled codes when enabled."""
    history = None
    if history_codes is not None:
        n = len(history_codes)
        codes = np.asarray([tuple(c) for c in history_codes], dtype=np.int64)
        history = HistoryBatch(
            np.zeros((1, n), dtype=np.int64),
            codes.reshape(1, n, 3),
            np.ones((1, n), dtype=bool),
        )
    return EmbeddingVector(user_vectors(params, [user_id], history)[0])


# loss


def _normalize(x: FloatArray, side: str) -> Tuple[FloatArray, FloatArray]:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    zero = np.flatnonzero(norms[:, 0] == 0.0)
    if zero.size:
        raise ZeroNormRow(side, int(zero[0]))
    return x / norms, norms


def _normalize_backward(
    grad: FloatArray, unit: FloatArray, norms: FloatArray
) -> FloatArray:
    return (grad - unit * np.sum(grad * unit, axis=1, keepdims=True)) / norms


def inbatch_softmax_loss(
    U: npt.ArrayLike, A: npt.ArrayLike, tau: float, normalize: bool = True
) -> Tuple[float, FloatArray, FloatArray]:
    """Cross-entropy of each row against its own item among the batch.

    Returns the mean loss and its gradients with respect to ``U`` and ``A``.
    """
    users = np.asarray(U, dtype=np.float64)
    items = np.asarray(A, dtype=np.float64)
    if users.shape != items.shape or users.ndim != 2:
        raise DimensionMismatch(0, users.shape[-1], items.shape[-1])
    batch = users.shape[0]
    if normalize:
        u_hat, u_norm = _normalize(users, "users")
        a_hat, a_norm = _normalize(items, "items")
    else:
        u_hat, a_hat = users, items
    logits = u_hat @ a_hat.T / tau
    loss = -float(np.mean(np.diag(log_softmax(logits, axis=1))))
    dlogits = (softmax(logits, axis=1) - np.eye(batch)) / batch
    du = dlogits @ a_hat / tau
    da = dlogits.T @ u_hat / tau
    if normalize:
        du = _normalize_backward(du, u_hat, u_norm)
        da = _normalize_backward(da, a_hat, a_norm)
    return loss, du, da


class RetrievalBatch(NamedTuple):
    user_ids: IntArray
    author_ids: IntArray
    llm_30s: FloatArray
    llm_pooling: FloatArray
    history: Optional[HistoryBatch] = None


def retrieval_loss(p: TwoTowerParams, batch: RetrievalBatch) -> Tuple[float, Params]:
    """In-batch loss of one batch and exact gradients for every tensor."""
    item = _item_forward(p, batch.author_ids, batch.llm_30s, batch.llm_pooling)
    user = _user_forward(p, batch.user_ids, batch.history)
    loss, d_user, d_item = inbatch_softmax_loss(user.out, item.out, p.tau, p.normalize)
    grads: Params = {name: np.zeros_like(value) for name, value in p.tensors.items()}

    gate = item.gate[:, None]
    g_llm, _ = mlp_backward(item.tape_llm, gate * d_item)
    grads.update(g_llm.named_tensors("mlp_llm"))
    g_item, d_rows = mlp_backward(item.tape_item, (1.0 - gate) * d_item)
    grads.update(g_item.named_tensors("mlp_item"))
    if p.variant in GATED_VARIANTS:
        d_gate = np.sum(d_item * (item.llm - item.rec), axis=1)
        d_logit = d_gate * item.gate * (1.0 - item.gate)
        grads["gate.weight"] = item.author_rows.T @ d_logit
        grads["gate.bias"] = np.array([d_logit.sum()])
        d_rows = d_rows + d_logit[:, None] * p.tensors["gate.weight"][None, :]
    grads["author_table"] = scatter_rows(
        p.tensors["author_table"].shape, item.author_ids, d_rows
    )

    g_user, d_urows = mlp_backward(user.tape_user, d_user)
    grads.update(g_user.named_tensors("mlp_user"))
    grads["user_table"] = scatter_rows(
        p.tensors["user_table"].shape, user.user_ids, d_urows
    )
    if user.pooled is not None and user.history is not None:
        grads["code_proj"] = user.pooled.T @ d_user
        d_pooled = d_user @ p.tensors["code_proj"].T
        hist = user.history
        spread = np.broadcast_to(d_pooled[:, None, :], hist.codes.shape[:2] + (p.d,))
        for level, table in enumerate(p.code_tables, start=1):
            grads[f"code_table.{level}"] = scatter_rows(
                table.shape, hist.codes[..., level - 1][hist.mask], spread[hist.mask]
            )
    return loss, grads


def gate_stats(params: TwoTowerParams) -> GateStats:
    """Mean and quantiles of the gate over every author's ID row."""
    gates = params.gate_values(params.tensors["author_table"])
    q10, q50, q90 = (float(q) for q in np.quantile(gates, [0.1, 0.5, 0.9]))
    return GateStats(float(gates.mean()), q10, q50, q90)


def train_retrieval(
    log: InteractionLog,
    windows: WindowTable,
    config: RetrievalConfig,
    variant: str = "fusion",
    *,
    n_users: Optional[int] = None,
    n_authors: Optional[int] = None,
    seed: int = 0,
    history_source: Optional[QuantizedLog] = None,
) -> Tuple[Checkpoint, GateStats]:
    """Fit the towers on the click events of ``log``.

    ``history_source`` supplies the codes of earlier views and is required
    by the ``fusion_codes`` variant. With ``epochs=0`` the initial weights
    are returned, marked untrained.
    """
    config.validate()
    if variant not in VARIANTS:
        raise InvalidConfig(f"Unknown retrieval variant {variant!r}")
    positives = log.take(np.flatnonzero(log.label("click") == 1))
    if len(positives) == 0:
        raise NoPositives()
    rows = windows.rows_for(positives)
    history = None
    code_sizes = None
    if variant == "fusion_codes":
        if history_source is None:
            raise InvalidConfig("Variant fusion_codes needs quantized history")
        history = event_histories(history_source, positives, config.history_length)
        code_sizes = history_source.sizes
    n_users = n_users if n_users is not None else int(log.user_id.max()) + 1
    n_authors = n_authors if n_authors is not None else int(log.author_id.max()) + 1

    rng = Rng(seed)
    params = TwoTowerParams.init(
        n_users,
        n_authors,
        windows.d,
        config,
        variant,
        rng.child(_INIT_STREAM).generator(),
        code_sizes,
    )
    state = AdamState.zeros(params.tensors)
    n = len(positives)
    epoch_losses: List[float] = []
    for epoch in range(config.epochs):
        perm = rng.child(_SHUFFLE_STREAM, epoch).generator().permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            batch = RetrievalBatch(
                positives.user_id[idx],
                positives.author_id[idx],
                windows.mm[rows[idx]],
                windows.pooled[rows[idx]],
                history.take(idx) if history is not None else None,
            )
            loss, grads = retrieval_loss(params, batch)
            ensure_finite(loss, "retrieval loss")
            adam_step(params.tensors, grads, state, lr=config.lr)
            total += loss * idx.size
        epoch_losses.append(total / n)
        logger.info(
            "retrieval.epoch",
            extra={"variant": variant, "epoch": epoch + 1, "loss": epoch_losses[-1]},
        )
    stats = gate_stats(params)
    checkpoint = params.to_checkpoint(
        trained=config.epochs > 0,
        epochs=config.epochs,
        epoch_losses=epoch_losses,
        positives=n,
        seed=seed,
        gate=stats._asdict(),
    )
    return checkpoint, stats


# index and search


@dataclass(frozen=True)
class AuthorIndex:
    """Cached fused representation of every author, rows in id order."""

    vectors: FloatArray
    normalized: bool
    gates: FloatArray

    def __len__(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def author_ids(self) -> IntArray:
        return np.arange(len(self), dtype=np.int64)


def _params(params: Union[TwoTowerParams, Checkpoint]) -> TwoTowerParams:
    if isinstance(params, TwoTowerParams):
        return params
    return TwoTowerParams.from_checkpoint(params)


def build_index(
    params: Union[TwoTowerParams, Checkpoint],
    windows: WindowTable,
    cutoff: Optional[int] = None,
) -> AuthorIndex:
    """Item tower on each author's most recent window at or before ``cutoff``."""
    p = _params(params)
    rows = windows.latest_rows(p.n_authors, cutoff)
    vectors, gates = item_tower_batch(
        p, np.arange(p.n_authors), windows.mm[rows], windows.pooled[rows]
    )
    if p.normalize:
        vectors, _ = _normalize(vectors, "index")
    logger.info("retrieval.index", extra={"authors": p.n_authors, "variant": p.variant})
    return AuthorIndex(vectors, p.normalize, gates)


def topk_batch(index: AuthorIndex, queries: npt.ArrayLike, k: int) -> IntArray:
    """Exact top ``k`` authors per query row by inner product.

    Scores are sorted descending with ties going to the smaller author id.
    """
    n = len(index)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise KTooLarge(k, n)
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if q.shape[1] != index.vectors.shape[1]:
        raise DimensionMismatch(0, int(index.vectors.shape[1]), int(q.shape[1]))
    if index.normalized:
        q, _ = _normalize(q, "query")
    scores = q @ index.vectors.T
    ids = np.broadcast_to(index.author_ids, scores.shape)
    order = np.lexsort(np.stack([ids, -scores]), axis=-1)
    return order[:, :k].astype(np.int64)


def retrieve_topk(
    index: AuthorIndex, query: Union[EmbeddingVector, npt.ArrayLike], k: int
) -> List[int]:
    values = query.values if isinstance(query, EmbeddingVector) else query
    return [int(a) for a in topk_batch(index, values, k)[0]]


def nearest_authors(
    index: AuthorIndex, author_id: int, k: int = 10
) -> List[Tuple[int, float]]:
    """Authors whose cached representation is closest to ``author_id``'s."""
    n = len(index)
    if not 0 <= author_id < n:
        raise UnknownAuthor(author_id)
    scores = index.vectors @ index.vectors[author_id]
    ids = index.author_ids
    order = np.lexsort((ids, -scores))
    order = order[order != author_id][:k]
    return [(int(a), float(scores[a])) for a in order]


def hit_rate(
    watched: Iterable[int], retrieved: Sequence[int], denominator: str = "retrieved"
) -> float:
    """Overlap between watched authors P and retrieved authors R.

    ``retrieved`` mode returns ``|P & R| / |R|``; ``recall`` mode returns
    ``|P & R| / |P|`` and needs a non-empty P.
    """
    if denominator not in HITRATE_DENOMINATORS:
        raise ValueError(f"Unknown hit rate denominator {denominator!r}")
    if len(retrieved) == 0:
        raise ValueError("Retrieved list is empty")
    p = set(int(a) for a in watched)
    r = set(int(a) for a in retrieved)
    overlap = len(p & r)
    if denominator == "recall":
        if not p:
            raise EmptyP()
        return overlap / len(p)
    return overlap / len(r)


class HitRateResult(NamedTuple):
    value: float
    users: int
    k: int
    denominator: str


def watched_sets(log: InteractionLog) -> Dict[int, List[int]]:
    """Deduplicated clicked authors per user, users ascending."""
    clicks = log.take(np.flatnonzero(log.label("click") == 1))
    out: Dict[int, List[int]] = {}
    if len(clicks) == 0:
        return out
    pairs = np.unique(np.stack([clicks.user_id, clicks.author_id], axis=1), axis=0)
    for user, author in pairs.tolist():
        out.setdefault(int(user), []).append(int(author))
    return out


def evaluate_hit_rate(
    params: Union[TwoTowerParams, Checkpoint],
    index: AuthorIndex,
    eval_log: InteractionLog,
    k: int,
    denominator: str = "retrieved",
    history_source: Optional[QuantizedLog] = None,
    history_length: int = DEFAULT_HISTORY_LENGTH,
    chunk: int = 1024,
) -> HitRateResult:
    """Mean hit rate over users with at least one click in ``eval_log``.

    With ``history_source`` each user's codes are pooled from their views in
    that log (the training period), as the code-enriched variant expects.
    """
    p = _params(params)
    watched = watched_sets(eval_log)
    users = np.asarray(sorted(watched), dtype=np.int64)
    if users.size == 0:
        logger.warning("retrieval.no_eval_clicks", extra={"variant": p.variant})
        return HitRateResult(0.0, 0, k, denominator)
    total = 0.0
    for start in range(0, users.size, chunk):
        block = users[start:start + chunk]
        batch_history = None
        if history_source is not None and p.uses_codes:
            batch_history = user_histories(history_source, block, None, history_length)
        top = topk_batch(index, user_vectors(p, block, batch_history), k)
        for user, ranked in zip(block.tolist(), top):
            total += hit_rate(watched[user], ranked.tolist(), denominator)
    value = total / users.size
    ensure_finite(value, "hit rate")
    logger.info(
        "retrieval.hit_rate",
        extra={"variant": p.variant, "k": k, "users": int(users.size), "value": value},
    )
    return HitRateResult(value, int(users.size), k, denominator)
