"""Multi-task ranking with code-enriched target attention.

Every exposure is scored from four blocks concatenated in a fixed order:
the author row, the user row, a cross feature of the two, and the output of
a target attention over the user's recent views. Attention keys and values
are ``[author row, c1 row, c2 row, c3 row]`` tuples. A mixture of experts
with one gate and one tower per task turns the blocks into probabilities.
"""
import logging
import math
from dataclasses import dataclass
from typing import Any
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
import numpy.typing as npt
import pandas as pd
from sklearn.metrics import roc_auc_score

from streamrec.core import TASK_INDEX
from streamrec.core import TASKS
from streamrec.core import EmbeddingVector
from streamrec.core import FloatArray
from streamrec.core import IntArray
from streamrec.core import QuantizedLog
from streamrec.core import Rng
from streamrec.core import SemanticCode
from streamrec.errors import DimensionMismatch
from streamrec.errors import EmptyLog
from streamrec.errors import IdOutOfRange
from streamrec.errors import InvalidConfig
from streamrec.errors import NoEligibleUsers
from streamrec.errors import ShapeMismatch
from streamrec.errors import SingleClass
from streamrec.history import DEFAULT_HISTORY_LENGTH
from streamrec.history import HistoryBatch
from streamrec.history import HistorySequence
from streamrec.history import event_histories
from streamrec.nnkit import AdamState
from streamrec.nnkit import Checkpoint
from streamrec.nnkit import MlpParams
from streamrec.nnkit import Params
from streamrec.nnkit import Tape
from streamrec.nnkit import adam_step
from streamrec.nnkit import binary_cross_entropy
from streamrec.nnkit import ensure_finite
from streamrec.nnkit import mlp_backward
from streamrec.nnkit import mlp_forward
from streamrec.nnkit import scatter_rows
from streamrec.nnkit import softmax

__all__ = [
    "HistorySequence",
    "RankingConfig",
    "RankingParams",
    "auc",
    "code_attention",
    "cross_feature",
    "evaluate_ranking",
    "gauc",
    "multitask_forward",
    "ranking_loss",
    "train_ranking",
    "tuple_embed",
]

logger = logging.getLogger("streamrec")

CHECKPOINT_KIND = "ranking"

EXPERT_ACTIVATIONS = ("relu", "relu")
GATE_ACTIVATIONS = ("identity",)
TOWER_ACTIVATIONS = ("relu", "sigmoid")

_INIT_STREAM = 301
_SHUFFLE_STREAM = 302


@dataclass(frozen=True)
class RankingConfig:
    d: int = 16
    #: 0 means ``d // 4``
    code_dim: int = 0
    n_experts: int = 4
    tasks: Tuple[str, ...] = TASKS
    history_length: int = DEFAULT_HISTORY_LENGTH
    lr: float = 0.01
    batch_size: int = 512
    epochs: int = 4
    init_scale: float = 0.1

    @property
    def resolved_code_dim(self) -> int:
        return self.code_dim or max(1, self.d // 4)

    def validate(self) -> "RankingConfig":
        if self.d < 1:
            raise InvalidConfig(f"ranking.d must be >= 1, got {self.d}")
        if self.code_dim < 0:
            raise InvalidConfig("ranking.code_dim must be >= 0")
        if self.n_experts < 1:
            raise InvalidConfig("ranking.n_experts must be >= 1")
        unknown = [t for t in self.tasks if t not in TASK_INDEX]
        if unknown or not self.tasks:
            raise InvalidConfig(
                f"ranking.tasks must be a non-empty subset of {list(TASKS)}"
            )
        if self.history_length < 0:
            raise InvalidConfig("ranking.history_length must be >= 0")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise InvalidConfig("ranking.lr, batch_size and epochs must be positive")
        return self


class RankingParams:
    """Named tensors of the ranking model.

    ``author_table`` and ``user_table`` are ``(n, d)``; ``code_table.l`` is
    ``(K_l, d_c)``; ``attn.q``, ``attn.k`` and ``attn.v`` are square over the
    tuple width ``d + 3 d_c``. Experts map the input block to ``d``, each
    task owns a gate over experts and a two layer tower ending in a sigmoid.
    """

    def __init__(self, tensors: Params, tasks: Sequence[str], n_experts: int) -> None:
        if n_experts < 1:
            raise ShapeMismatch("A mixture needs at least one expert")
        self.tensors = tensors
        self.tasks: Tuple[str, ...] = tuple(tasks)
        self.n_experts = n_experts
        self.experts = [
            MlpParams.from_tensors(tensors, f"expert.{e}", EXPERT_ACTIVATIONS)
            for e in range(n_experts)
        ]
        self.gates = [
            MlpParams.from_tensors(tensors, f"gate.{t}", GATE_ACTIVATIONS)
            for t in self.tasks
        ]
        self.towers = [
            MlpParams.from_tensors(tensors, f"tower.{t}", TOWER_ACTIVATIONS)
            for t in self.tasks
        ]
        width = self.tuple_dim
        for name in ("attn.q", "attn.k", "attn.v"):
            if tensors[name].shape != (width, width):
                raise ShapeMismatch(f"{name} must be {width}x{width}")
        for mlp in self.experts + self.gates:
            if mlp.in_dim != self.input_dim:
                raise ShapeMismatch(
                    f"Expert or gate expects {mlp.in_dim}, input is {self.input_dim}"
                )
        for gate in self.gates:
            if gate.out_dim != n_experts:
                raise ShapeMismatch("Gate width differs from the expert count")

    @classmethod
    def init(
        cls,
        n_users: int,
        n_authors: int,
        code_sizes: Sequence[int],
        config: RankingConfig,
        gen: np.random.Generator,
    ) -> "RankingParams":
        d, dc, scale = config.d, config.resolved_code_dim, config.init_scale
        width = d + 3 * dc
        in_dim = 4 * d + width
        tensors: Params = {
            "author_table": gen.normal(0.0, scale, size=(n_authors, d)),
            "user_table": gen.normal(0.0, scale, size=(n_users, d)),
        }
        for level, size in enumerate(code_sizes, start=1):
            tensors[f"code_table.{level}"] = gen.normal(0.0, scale, size=(size, dc))
        for name in ("attn.q", "attn.k", "attn.v"):
            bound = math.sqrt(6.0 / (2 * width))
            tensors[name] = gen.uniform(-bound, bound, size=(width, width))
        for e in range(config.n_experts):
            expert = MlpParams.init([in_dim, d, d], EXPERT_ACTIVATIONS, gen)
            tensors.update(expert.named_tensors(f"expert.{e}"))
        for task in config.tasks:
            gate = MlpParams.init([in_dim, config.n_experts], GATE_ACTIVATIONS, gen)
            tensors.update(gate.named_tensors(f"gate.{task}"))
            tower = MlpParams.init([d, d, 1], TOWER_ACTIVATIONS, gen)
            tensors.update(tower.named_tensors(f"tower.{task}"))
        return cls(tensors, config.tasks, config.n_experts)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "RankingParams":
        if checkpoint.kind != CHECKPOINT_KIND:
            raise InvalidConfig(
                f"Expected a {CHECKPOINT_KIND} checkpoint, got {checkpoint.kind!r}"
            )
        meta = checkpoint.metadata
        return cls(checkpoint.tensors, meta["tasks"], int(meta["n_experts"]))

    def to_checkpoint(self, **metadata: Any) -> Checkpoint:
        meta: Dict[str, Any] = {"tasks": list(self.tasks), "n_experts": self.n_experts}
        meta.update(metadata)
        return Checkpoint(CHECKPOINT_KIND, self.tensors, meta)

    @property
    def d(self) -> int:
        return int(self.tensors["author_table"].shape[1])

    @property
    def code_dim(self) -> int:
        return int(self.tensors["code_table.1"].shape[1])

    @property
    def tuple_dim(self) -> int:
        return self.d + 3 * self.code_dim

    @property
    def input_dim(self) -> int:
        return 4 * self.d + self.tuple_dim

    @property
    def code_tables(self) -> List[FloatArray]:
        return [self.tensors[f"code_table.{level}"] for level in (1, 2, 3)]

    @property
    def n_authors(self) -> int:
        return int(self.tensors["author_table"].shape[0])

    @property
    def n_users(self) -> int:
        return int(self.tensors["user_table"].shape[0])


def _values(v: Union[EmbeddingVector, npt.ArrayLike]) -> FloatArray:
    if isinstance(v, EmbeddingVector):
        return v.values
    return np.asarray(v, dtype=np.float64)


def _check_range(kind: str, ids: IntArray, size: int) -> None:
    bad = np.flatnonzero((ids < 0) | (ids >= size))
    if bad.size:
        raise IdOutOfRange(kind, int(ids[bad[0]]), size)


def _tuple_rows(p: RankingParams, authors: IntArray, codes: IntArray) -> FloatArray:
    """``[author, c1, c2, c3]`` rows for any leading shape of ids."""
    parts = [p.tensors["author_table"][authors]]
    for level, table in enumerate(p.code_tables):
        parts.append(table[codes[..., level]])
    return np.concatenate(parts, axis=-1)


def tuple_embed(
    params: RankingParams, author_id: int, code: SemanticCode
) -> EmbeddingVector:
    _check_range("author", np.array([author_id]), params.n_authors)
    for level, (value, table) in enumerate(zip(code, params.code_tables), start=1):
        _check_range(f"c{level}", np.array([value]), int(table.shape[0]))
    row = _tuple_rows(params, np.array([author_id]), np.array([tuple(code)]))
    return EmbeddingVector(row[0])


def cross_feature(
    u_emb: Union[EmbeddingVector, npt.ArrayLike],
    a_emb: Union[EmbeddingVector, npt.ArrayLike],
) -> EmbeddingVector:
    """``[u * a, |u - a|]``."""
    u = _values(u_emb)
    a = _values(a_emb)
    if u.shape != a.shape:
        raise DimensionMismatch(1, int(u.shape[-1]), int(a.shape[-1]))
    return EmbeddingVector(np.concatenate([u * a, np.abs(u - a)]))


class _Attention(NamedTuple):
    feature: FloatArray  # (B, t)
    target: FloatArray  # (B, t)
    hist: FloatArray  # (B, L, t)
    query: FloatArray
    keys: FloatArray
    values: FloatArray
    weights: FloatArray  # (B, L)


def _attention(
    p: RankingParams, target: FloatArray, hist: FloatArray, mask: npt.NDArray[np.bool_]
) -> _Attention:
    width = p.tuple_dim
    if target.shape[-1] != width or hist.shape[-1] != width:
        raise ShapeMismatch(f"Attention expects tuples of width {width}")
    query = target @ p.tensors["attn.q"]
    keys = hist @ p.tensors["attn.k"]
    values = hist @ p.tensors["attn.v"]
    scores = np.einsum("bt,blt->bl", query, keys) / math.sqrt(width)
    weights = softmax(scores, axis=1, mask=mask)
    feature = np.einsum("bl,blt->bt", weights, values)
    return _Attention(feature, target, hist, query, keys, values, weights)


def code_attention(
    params: RankingParams,
    target: Tuple[int, SemanticCode],
    history: HistorySequence,
) -> EmbeddingVector:
    """Target attention of one candidate over a viewing history.

    An empty history yields the zero vector.
    """
    author, code = target
    query = tuple_embed(params, author, code).values[None, :]
    n = len(history)
    if n == 0:
        return EmbeddingVector(np.zeros(params.tuple_dim))
    rows = [tuple_embed(params, a, c).values for a, c in history.entries]
    hist = np.stack(rows)[None]
    step = _attention(params, query, hist, np.ones((1, n), dtype=bool))
    return EmbeddingVector(step.feature[0])


class _Mixture(NamedTuple):
    preds: FloatArray  # (B, T)
    expert_out: List[FloatArray]
    expert_tapes: List[Tape]
    gate_weights: List[FloatArray]  # per task (B, E)
    gate_tapes: List[Tape]
    tower_tapes: List[Tape]


def _mixture_forward(p: RankingParams, x: FloatArray) -> _Mixture:
    if x.shape[1] != p.input_dim:
        raise ShapeMismatch(
            f"Multitask input has width {x.shape[1]}, expected {p.input_dim}"
        )
    expert_out, expert_tapes = [], []
    for expert in p.experts:
        h, tape = mlp_forward(expert, x)
        expert_out.append(h)
        expert_tapes.append(tape)
    stacked = np.stack(expert_out, axis=1)  # (B, E, d)
    preds, gate_weights, gate_tapes, tower_tapes = [], [], [], []
    for gate, tower in zip(p.gates, p.towers):
        logits, gate_tape = mlp_forward(gate, x)
        weights = softmax(logits, axis=1)
        mixed = np.einsum("be,bed->bd", weights, stacked)
        out, tower_tape = mlp_forward(tower, mixed)
        preds.append(out[:, 0])
        gate_weights.append(weights)
        gate_tapes.append(gate_tape)
        tower_tapes.append(tower_tape)
    return _Mixture(
        np.stack(preds, axis=1),
        expert_out,
        expert_tapes,
        gate_weights,
        gate_tapes,
        tower_tapes,
    )


def multitask_forward(
    params: RankingParams, features: Sequence[Union[EmbeddingVector, npt.ArrayLike]]
) -> Dict[str, float]:
    """Per-task probabilities for one ``[aID, uID, cross, code]`` feature list."""
    blocks = [_values(f).reshape(-1) for f in features]
    x = np.concatenate(blocks)[None, :]
    preds = _mixture_forward(params, x).preds[0]
    return {task: float(preds[i]) for i, task in enumerate(params.tasks)}


def ranking_loss(
    preds: npt.ArrayLike, labels: npt.ArrayLike
) -> Tuple[float, FloatArray]:
    """Binary cross-entropy summed over tasks and averaged over the batch."""
    return binary_cross_entropy(preds, labels)


class RankingBatch(NamedTuple):
    user_ids: IntArray
    author_ids: IntArray
    codes: IntArray  # (B, 3)
    history: HistoryBatch
    labels: FloatArray  # (B, T)


class _Forward(NamedTuple):
    x: FloatArray
    author_rows: FloatArray
    user_rows: FloatArray
    attention: Optional[_Attention]
    mixture: _Mixture


def _forward(p: RankingParams, batch: RankingBatch, with_codes: bool) -> _Forward:
    authors = np.asarray(batch.author_ids, dtype=np.int64)
    users = np.asarray(batch.user_ids, dtype=np.int64)
    _check_range("author", authors, p.n_authors)
    _check_range("user", users, p.n_users)
    a_rows = p.tensors["author_table"][authors]
    u_rows = p.tensors["user_table"][users]
    attention = None
    if with_codes:
        hist = batch.history
        for level, table in enumerate(p.code_tables, start=1):
            size = int(table.shape[0])
            _check_range(f"c{level}", batch.codes[:, level - 1], size)
            _check_range(f"c{level}", hist.codes[..., level - 1][hist.mask], size)
        _check_range("author", hist.authors[hist.mask], p.n_authors)
        target = _tuple_rows(p, authors, batch.codes)
        safe_authors = np.where(hist.mask, hist.authors, 0)
        rows = _tuple_rows(p, safe_authors, hist.codes) * hist.mask[..., None]
        attention = _attention(p, target, rows, hist.mask)
        feature = attention.feature
    else:
        feature = np.zeros((authors.size, p.tuple_dim))
    x = np.concatenate(
        [a_rows, u_rows, u_rows * a_rows, np.abs(u_rows - a_rows), feature], axis=1
    )
    return _Forward(x, a_rows, u_rows, attention, _mixture_forward(p, x))


def predict_batch(
    p: RankingParams, batch: RankingBatch, with_codes: bool
) -> FloatArray:
    return _forward(p, batch, with_codes).mixture.preds


def batch_loss(
    p: RankingParams, batch: RankingBatch, with_codes: bool
) -> Tuple[float, Params]:
    """Loss of one batch and exact gradients for every tensor."""
    fwd = _forward(p, batch, with_codes)
    mix = fwd.mixture
    loss, d_preds = ranking_loss(mix.preds, batch.labels)
    grads: Params = {name: np.zeros_like(value) for name, value in p.tensors.items()}

    d_experts = [np.zeros_like(h) for h in mix.expert_out]
    d_x = np.zeros_like(fwd.x)
    for t, task in enumerate(p.tasks):
        g_tower, d_mixed = mlp_backward(mix.tower_tapes[t], d_preds[:, t:t + 1])
        grads.update(g_tower.named_tensors(f"tower.{task}"))
        weights = mix.gate_weights[t]
        d_weights = np.stack(
            [np.sum(d_mixed * h, axis=1) for h in mix.expert_out], axis=1
        )
        for e in range(p.n_experts):
            d_experts[e] += weights[:, e:e + 1] * d_mixed
        mean = np.sum(weights * d_weights, axis=1, keepdims=True)
        d_logits = weights * (d_weights - mean)
        g_gate, d_xg = mlp_backward(mix.gate_tapes[t], d_logits)
        grads.update(g_gate.named_tensors(f"gate.{task}"))
        d_x += d_xg
    for e in range(p.n_experts):
        g_expert, d_xe = mlp_backward(mix.expert_tapes[e], d_experts[e])
        grads.update(g_expert.named_tensors(f"expert.{e}"))
        d_x += d_xe

    d = p.d
    d_a = d_x[:, :d].copy()
    d_u = d_x[:, d:2 * d].copy()
    d_prod = d_x[:, 2 * d:3 * d]
    d_diff = d_x[:, 3 * d:4 * d]
    d_feature = d_x[:, 4 * d:]
    a_rows, u_rows = fwd.author_rows, fwd.user_rows
    sign = np.sign(u_rows - a_rows)
    d_u += d_prod * a_rows + d_diff * sign
    d_a += d_prod * u_rows - d_diff * sign

    author_ids = np.asarray(batch.author_ids, dtype=np.int64)
    d_author_table = scatter_rows(p.tensors["author_table"].shape, author_ids, d_a)
    if fwd.attention is not None:
        att = fwd.attention
        hist = batch.history
        d_values = att.weights[:, :, None] * d_feature[:, None, :]
        d_w = np.einsum("blt,bt->bl", att.values, d_feature)
        mean = np.sum(att.weights * d_w, axis=1, keepdims=True)
        d_scores = att.weights * (d_w - mean)
        d_scores /= math.sqrt(p.tuple_dim)
        d_query = np.einsum("bl,blt->bt", d_scores, att.keys)
        d_keys = d_scores[:, :, None] * att.query[:, None, :]
        grads["attn.q"] = att.target.T @ d_query
        grads["attn.k"] = np.einsum("blt,blu->tu", att.hist, d_keys)
        grads["attn.v"] = np.einsum("blt,blu->tu", att.hist, d_values)
        d_target = d_query @ p.tensors["attn.q"].T
        d_hist = (d_keys @ p.tensors["attn.k"].T + d_values @ p.tensors["attn.v"].T)
        d_hist = d_hist * hist.mask[..., None]
        mask = hist.mask
        d_author_table += scatter_rows(
            p.tensors["author_table"].shape, author_ids, d_target[:, :d]
        )
        d_author_table += scatter_rows(
            p.tensors["author_table"].shape, hist.authors[mask], d_hist[..., :d][mask]
        )
        dc = p.code_dim
        for level, table in enumerate(p.code_tables, start=1):
            lo, hi = d + (level - 1) * dc, d + level * dc
            g = scatter_rows(table.shape, batch.codes[:, level - 1], d_target[:, lo:hi])
            hist_codes = hist.codes[..., level - 1][mask]
            g += scatter_rows(table.shape, hist_codes, d_hist[..., lo:hi][mask])
            grads[f"code_table.{level}"] = g
    grads["author_table"] = d_author_table
    grads["user_table"] = scatter_rows(
        p.tensors["user_table"].shape, np.asarray(batch.user_ids, dtype=np.int64), d_u
    )
    return loss, grads


def _batch(
    qlog: QuantizedLog, history: HistoryBatch, idx: IntArray, tasks: Sequence[str]
) -> RankingBatch:
    sub = qlog.log
    return RankingBatch(
        sub.user_id[idx],
        sub.author_id[idx],
        qlog.codes[idx],
        history.take(idx),
        sub.labels[idx][:, [TASK_INDEX[t] for t in tasks]].astype(np.float64),
    )


def train_ranking(
    qlog: QuantizedLog,
    config: RankingConfig,
    with_codes: bool = True,
    *,
    n_users: Optional[int] = None,
    n_authors: Optional[int] = None,
    seed: int = 0,
) -> Tuple[Checkpoint, List[float]]:
    """Fit the ranking model on every exposure of ``qlog``.

    Histories come from strictly earlier valid views inside ``qlog``. With
    ``with_codes=False`` the attention block is held at zero, so codes never
    influence the model.
    """
    config.validate()
    if len(qlog) == 0:
        raise EmptyLog()
    log = qlog.log
    n_users = n_users if n_users is not None else int(log.user_id.max()) + 1
    n_authors = n_authors if n_authors is not None else int(log.author_id.max()) + 1
    rng = Rng(seed)
    params = RankingParams.init(
        n_users, n_authors, qlog.sizes, config, rng.child(_INIT_STREAM).generator()
    )
    history = event_histories(qlog, log, config.history_length)
    state = AdamState.zeros(params.tensors)
    n = len(qlog)
    epoch_losses: List[float] = []
    for epoch in range(config.epochs):
        perm = rng.child(_SHUFFLE_STREAM, epoch).generator().permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            batch = _batch(qlog, history, idx, config.tasks)
            loss, grads = batch_loss(params, batch, with_codes)
            ensure_finite(loss, "ranking loss")
            adam_step(params.tensors, grads, state, lr=config.lr)
            total += loss * idx.size
        epoch_losses.append(total / n)
        logger.info(
            "ranking.epoch",
            extra={
                "with_codes": with_codes,
                "epoch": epoch + 1,
                "loss": epoch_losses[-1],
            },
        )
    checkpoint = params.to_checkpoint(
        trained=config.epochs > 0,
        with_codes=with_codes,
        epochs=config.epochs,
        epoch_losses=epoch_losses,
        history_length=config.history_length,
        seed=seed,
    )
    return checkpoint, epoch_losses


def predict_ranking(
    params: Union[RankingParams, Checkpoint],
    qlog: QuantizedLog,
    history_source: Optional[QuantizedLog] = None,
    with_codes: Optional[bool] = None,
    history_length: Optional[int] = None,
    chunk: int = 2048,
) -> FloatArray:
    """Predictions for every event of ``qlog``, shape ``(n, tasks)``.

    Histories are drawn from ``history_source`` (defaults to ``qlog``); pass
    the concatenated train and eval logs to score evaluation events.
    """
    meta: Dict[str, Any] = {}
    if isinstance(params, Checkpoint):
        meta = params.metadata
        params = RankingParams.from_checkpoint(params)
    if with_codes is None:
        with_codes = bool(meta.get("with_codes", True))
    if history_length is None:
        history_length = int(meta.get("history_length", DEFAULT_HISTORY_LENGTH))
    source = history_source if history_source is not None else qlog
    history = event_histories(source, qlog.log, history_length)
    out = np.zeros((len(qlog), len(params.tasks)))
    labels = np.zeros((0, len(params.tasks)))
    for start in range(0, len(qlog), chunk):
        idx = np.arange(start, min(start + chunk, len(qlog)))
        batch = RankingBatch(
            qlog.log.user_id[idx],
            qlog.log.author_id[idx],
            qlog.codes[idx],
            history.take(idx),
            labels,
        )
        out[idx] = predict_batch(params, batch, with_codes)
    return out


# metrics


def auc(scores: npt.ArrayLike, labels: npt.ArrayLike) -> float:
    """Area under the ROC curve; tied scores count one half."""
    y = np.asarray(labels).reshape(-1)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if y.size == 0 or np.all(y == y[0]):
        raise SingleClass()
    return float(roc_auc_score(y, s))


def gauc(scores: npt.ArrayLike, labels: npt.ArrayLike, users: npt.ArrayLike) -> float:
    """Per-user AUC weighted by each user's sample count.

    Users without both classes are dropped and the weights renormalized over
    the remaining ones.
    """
    frame = pd.DataFrame(
        {
            "user": np.asarray(users).reshape(-1),
            "score": np.asarray(scores, dtype=np.float64).reshape(-1),
            "label": np.asarray(labels).reshape(-1).astype(np.int64),
        }
    )
    frame["rank"] = frame.groupby("user")["score"].rank(method="average")
    frame["pos_rank"] = frame["rank"] * frame["label"]
    per_user = frame.groupby("user").agg(
        n=("label", "size"), pos=("label", "sum"), rank_sum=("pos_rank", "sum")
    )
    per_user["neg"] = per_user["n"] - per_user["pos"]
    eligible = per_user[(per_user["pos"] > 0) & (per_user["neg"] > 0)]
    if eligible.empty:
        raise NoEligibleUsers()
    pos = eligible["pos"].to_numpy(dtype=np.float64)
    neg = eligible["neg"].to_numpy(dtype=np.float64)
    user_auc = (eligible["rank_sum"].to_numpy() - pos * (pos + 1) / 2) / (pos * neg)
    weights = eligible["n"].to_numpy(dtype=np.float64)
    weights = weights / weights.sum()
    return float(np.sum(weights * user_auc))


class TaskMetrics(NamedTuple):
    auc: Optional[float]
    gauc: Optional[float]


def evaluate_ranking(
    preds: FloatArray, qlog: QuantizedLog, tasks: Sequence[str]
) -> Dict[str, TaskMetrics]:
    """Pooled AUC and GAUC per task; ``None`` where a metric is undefined."""
    out: Dict[str, TaskMetrics] = {}
    users = qlog.log.user_id
    for i, task in enumerate(tasks):
        labels = qlog.log.label(task)
        try:
            task_auc: Optional[float] = auc(preds[:, i], labels)
        except SingleClass:
            logger.warning("ranking.single_class", extra={"task": task})
            task_auc = None
        try:
            task_gauc: Optional[float] = gauc(preds[:, i], labels, users)
        except NoEligibleUsers:
            logger.warning("ranking.no_eligible_users", extra={"task": task})
            task_gauc = None
        out[task] = TaskMetrics(task_auc, task_gauc)
    return out
