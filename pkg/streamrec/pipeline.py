"""Stages of the end-to-end run and the artifacts they exchange.

Each stage reads its inputs from the output directory and writes its
results back there, so running the subcommands one after another and
calling :func:`run_pipeline` produce the same files. Artifact names embed
a digest of the configuration sections they depend on.
"""
import logging
import os
import time
from dataclasses import dataclass
from dataclasses import field
from typing import Any
from typing import Callable
from typing import Dict
from typing import Iterator
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import TypeVar

from streamrec import _codec
from streamrec.config import PipelineConfig
from streamrec.core import InteractionLog
from streamrec.core import QuantizedLog
from streamrec.errors import InvalidConfig
from streamrec.errors import MissingArtifact
from streamrec.errors import SingleClass
from streamrec.errors import StageError
from streamrec.errors import StreamRecError
from streamrec.nnkit import Checkpoint
from streamrec.nnkit import checkpoint_exists
from streamrec.nnkit import load_checkpoint
from streamrec.nnkit import save_checkpoint
from streamrec.quantizer import Codebook
from streamrec.quantizer import build_codebooks
from streamrec.quantizer import code_stats
from streamrec.quantizer import codebook_corpus
from streamrec.quantizer import describe_storage
from streamrec.quantizer import format_code_stats
from streamrec.quantizer import quantize_log
from streamrec.quantizer import reconstruction_errors
from streamrec.ranking import auc
from streamrec.ranking import evaluate_ranking
from streamrec.ranking import predict_ranking
from streamrec.ranking import train_ranking
from streamrec.retrieval import GATED_VARIANTS
from streamrec.retrieval import VARIANTS
from streamrec.retrieval import AuthorIndex
from streamrec.retrieval import TwoTowerParams
from streamrec.retrieval import build_index
from streamrec.retrieval import evaluate_hit_rate
from streamrec.retrieval import gate_stats
from streamrec.retrieval import nearest_authors
from streamrec.retrieval import train_retrieval
from streamrec.simgen import WindowTable
from streamrec.simgen import emit_windows
from streamrec.simgen import generate_world
from streamrec.simgen import read_windows
from streamrec.simgen import simulate_interactions
from streamrec.simgen import split_log
from streamrec.simgen import true_click_logits
from streamrec.simgen import write_manifest
from streamrec.simgen import write_windows

logger = logging.getLogger("streamrec")

STAGES = (
    "simulate",
    "train-retrieval",
    "eval-retrieval",
    "build-codebooks",
    "quantize",
    "train-ranking",
    "eval-ranking",
    "report",
)
BASE_RETRIEVAL_VARIANTS = ("id_only", "llm_only", "fusion")
CODE_KINDS = ("raw", "fused")
RANKING_VARIANTS = ("none", "raw", "fused")

EMPTY_REPORT = "No artifacts found in {out_dir}; nothing to report."

T = TypeVar("T")


class Artifacts:
    """File names of every artifact for one configuration."""

    def __init__(self, config: PipelineConfig, out_dir: Optional[str] = None) -> None:
        self.config = config
        self.out_dir = out_dir or config.out_dir

    def _path(self, stage: str, name: str, ext: str = "") -> str:
        digest = self.config.stage_hash(stage)
        return os.path.join(self.out_dir, f"{name}-{digest}{ext}")

    def ensure_dir(self) -> None:
        os.makedirs(self.out_dir, exist_ok=True)

    @property
    def manifest(self) -> str:
        return self._path("simulate", "world", ".txt")

    @property
    def windows_corpus(self) -> str:
        return self._path("simulate", "windows", ".larm")

    @property
    def windows_keys(self) -> str:
        return self._path("simulate", "windows", ".tsv")

    def log(self, split: str) -> str:
        return self._path("simulate", f"log-{split}", ".tsv")

    def retrieval(self, variant: str) -> str:
        stage = "quantize" if variant == "fusion_codes" else "train-retrieval"
        return self._path(stage, f"retrieval-{variant}")

    def codebook(self, kind: str) -> str:
        return self._path("build-codebooks", f"codebook-{kind}", ".larq")

    def quantized(self, kind: str, split: str) -> str:
        return self._path("quantize", f"quantized-{kind}-{split}", ".tsv")

    def ranking(self, variant: str) -> str:
        return self._path("train-ranking", f"ranking-{variant}")

    def metrics(self, stage: str, name: str) -> str:
        hash_stage = "quantize" if name == "fusion_codes" else stage
        return self._path(hash_stage, f"{stage}-{name}", ".metrics")

    def metric_files(self) -> List[str]:
        """Every metrics file the stages can write, in report order."""
        paths = [self.metrics("simulate", "log")]
        paths += [self.metrics("eval-retrieval", v) for v in VARIANTS]
        paths += [self.metrics("build-codebooks", k) for k in CODE_KINDS]
        paths += [self.metrics("quantize", k) for k in CODE_KINDS]
        paths += [self.metrics("eval-ranking", v) for v in RANKING_VARIANTS]
        paths.append(self.metrics("eval-ranking", "oracle"))
        return paths

    @property
    def report(self) -> str:
        return os.path.join(self.out_dir, "report.txt")

    @property
    def report_metrics(self) -> str:
        return os.path.join(self.out_dir, "metrics.txt")


def _require(stage: str, path: str, checkpoint: bool = False) -> str:
    present = checkpoint_exists(path) if checkpoint else os.path.exists(path)
    if not present:
        raise MissingArtifact(stage, path)
    return path


def _load_simulation(
    art: Artifacts,
) -> Tuple[WindowTable, InteractionLog, InteractionLog]:
    windows = read_windows(
        _require("simulate", art.windows_corpus), _require("simulate", art.windows_keys)
    )
    train, _ = _codec.read_log(_require("simulate", art.log("train")))
    evaluation, _ = _codec.read_log(_require("simulate", art.log("eval")))
    return windows, train, evaluation


def _load_quantized(art: Artifacts, kind: str, split: str) -> QuantizedLog:
    log, codes = _codec.read_log(
        _require("quantize", art.quantized(kind, split)), with_codes=True
    )
    assert codes is not None
    sizes = art.config.quantizer.sizes
    return QuantizedLog(log, codes, sizes)


def _load_retrieval_checkpoint(art: Artifacts, variant: str) -> Checkpoint:
    path = art.retrieval(variant)
    return load_checkpoint(_require("train-retrieval", path, checkpoint=True))


def _load_retrieval(art: Artifacts, variant: str) -> TwoTowerParams:
    return TwoTowerParams.from_checkpoint(_load_retrieval_checkpoint(art, variant))


def _cutoff(train: InteractionLog) -> int:
    return int(train.timestamp.max())


# stages


def stage_simulate(config: PipelineConfig, art: Artifacts) -> Dict[str, Any]:
    art.ensure_dir()
    world = generate_world(config.world)
    windows = emit_windows(world)
    log = simulate_interactions(world, windows)
    train, evaluation = split_log(log, config.pipeline.train_fraction)
    write_windows(windows, art.windows_corpus, art.windows_keys)
    _codec.write_log(art.log("train"), train)
    _codec.write_log(art.log("eval"), evaluation)
    metrics: Dict[str, Any] = {
        "simulate.events": len(log),
        "simulate.train_events": len(train),
        "simulate.eval_events": len(evaluation),
        "simulate.windows": len(windows),
        "simulate.click_rate": float(log.label("click").mean()),
    }
    write_manifest(art.manifest, config.world, **metrics)
    _codec.write_kv(art.metrics("simulate", "log"), metrics)
    return metrics


def stage_train_retrieval(
    config: PipelineConfig,
    art: Artifacts,
    variants: Sequence[str] = BASE_RETRIEVAL_VARIANTS,
) -> None:
    windows, train, _ = _load_simulation(art)
    for variant in variants:
        if variant not in VARIANTS:
            raise InvalidConfig(f"Unknown retrieval variant {variant!r}")
        history = None
        if variant == "fusion_codes":
            history = _load_quantized(art, "fused", "train")
        checkpoint, stats = train_retrieval(
            train,
            windows,
            config.retrieval,
            variant,
            n_users=config.world.n_users,
            n_authors=config.world.n_authors,
            seed=config.seed,
            history_source=history,
        )
        save_checkpoint(art.retrieval(variant), checkpoint)
        logger.info(
            "pipeline.retrieval_trained",
            extra={"variant": variant, "gate_mean": stats.mean},
        )


def _index(
    params: TwoTowerParams, windows: WindowTable, train: InteractionLog
) -> AuthorIndex:
    return build_index(params, windows, _cutoff(train))


def stage_eval_retrieval(
    config: PipelineConfig, art: Artifacts, variants: Optional[Sequence[str]] = None
) -> Dict[str, Any]:
    if variants is None:
        variants = list(BASE_RETRIEVAL_VARIANTS)
        if checkpoint_exists(art.retrieval("fusion_codes")):
            variants.append("fusion_codes")
    windows, train, evaluation = _load_simulation(art)
    rc = config.retrieval
    metrics: Dict[str, Any] = {}
    for variant in variants:
        checkpoint = _load_retrieval_checkpoint(art, variant)
        params = TwoTowerParams.from_checkpoint(checkpoint)
        history = _load_quantized(art, "fused", "train") if params.uses_codes else None
        result = evaluate_hit_rate(
            params,
            _index(params, windows, train),
            evaluation,
            rc.hitrate_k,
            rc.hitrate_denominator,
            history_source=history,
            history_length=rc.history_length,
        )
        found: Dict[str, Any] = {
            f"retrieval.trained_{variant}": checkpoint.trained,
            f"retrieval.hitrate_{variant}": result.value,
            f"retrieval.hitrate_users_{variant}": result.users,
        }
        if variant in GATED_VARIANTS:
            stats = gate_stats(params)
            for key, value in stats._asdict().items():
                found[f"retrieval.gate_{key}_{variant}"] = value
        found["retrieval.hitrate_k"] = rc.hitrate_k
        found["retrieval.hitrate_denominator"] = rc.hitrate_denominator
        _codec.write_kv(art.metrics("eval-retrieval", variant), found)
        metrics.update(found)
    return metrics


def stage_build_codebooks(config: PipelineConfig, art: Artifacts) -> Dict[str, Any]:
    windows, train, _ = _load_simulation(art)
    fused = _load_retrieval(art, "fusion")
    qc = config.quantizer.validate()
    metrics: Dict[str, Any] = {}
    for kind in CODE_KINDS:
        corpus = codebook_corpus(
            windows,
            fused if kind == "fused" else None,
            config.world.n_authors,
            _cutoff(train),
            qc.corpus,
        )
        cb = build_codebooks(corpus, qc.sizes, config.seed, qc.max_iters)
        cb.save(art.codebook(kind))
        found: Dict[str, Any] = {}
        for level, error in enumerate(reconstruction_errors(corpus, cb), start=1):
            found[f"quantizer.mse_l{level}_{kind}"] = error
        found[f"quantizer.corpus_rows_{kind}"] = int(corpus.shape[0])
        for key, value in describe_storage(qc.sizes).items():
            found[f"quantizer.storage_{key}"] = value
        _codec.write_kv(art.metrics("build-codebooks", kind), found)
        metrics.update(found)
    return metrics


def stage_quantize(config: PipelineConfig, art: Artifacts) -> Dict[str, Any]:
    windows, train, evaluation = _load_simulation(art)
    fused = _load_retrieval(art, "fusion")
    topics = generate_world(config.world).dominant_topics()
    metrics: Dict[str, Any] = {}
    for kind in CODE_KINDS:
        cb = Codebook.load(_require("build-codebooks", art.codebook(kind)))
        params = fused if kind == "fused" else None
        q_train = quantize_log(train, windows, params, cb)
        q_eval = quantize_log(evaluation, windows, params, cb)
        _codec.write_log(art.quantized(kind, "train"), q_train.log, q_train.codes)
        _codec.write_log(art.quantized(kind, "eval"), q_eval.log, q_eval.codes)
        stats = code_stats(q_train, topics)
        for line in format_code_stats(stats):
            logger.info("pipeline.code_stats", extra={"kind": kind, "line": line})
        found: Dict[str, Any] = {}
        for level, counts in enumerate(stats.level_counts, start=1):
            found[f"quantizer.codes_used_l{level}_{kind}"] = len(counts)
        found[f"quantizer.purity_{kind}"] = (
            stats.purity if stats.purity is not None else "n/a"
        )
        _codec.write_kv(art.metrics("quantize", kind), found)
        metrics.update(found)
    return metrics


def _codes_for(variant: str) -> str:
    return "fused" if variant == "none" else variant


def stage_train_ranking(
    config: PipelineConfig, art: Artifacts, variants: Sequence[str] = RANKING_VARIANTS
) -> None:
    for variant in variants:
        if variant not in RANKING_VARIANTS:
            raise InvalidConfig(f"Unknown ranking variant {variant!r}")
        q_train = _load_quantized(art, _codes_for(variant), "train")
        checkpoint, _ = train_ranking(
            q_train,
            config.ranking,
            with_codes=variant != "none",
            n_users=config.world.n_users,
            n_authors=config.world.n_authors,
            seed=config.seed,
        )
        checkpoint.metadata["variant"] = variant
        save_checkpoint(art.ranking(variant), checkpoint)


def _metric(value: Optional[float]) -> Any:
    return "n/a" if value is None else value


def stage_eval_ranking(
    config: PipelineConfig, art: Artifacts, variants: Sequence[str] = RANKING_VARIANTS
) -> Dict[str, Any]:
    metrics: Dict[str, Any] = {}
    for variant in variants:
        if variant not in RANKING_VARIANTS:
            raise InvalidConfig(f"Unknown ranking variant {variant!r}")
        path = _require("train-ranking", art.ranking(variant), checkpoint=True)
        checkpoint = load_checkpoint(path)
        kind = _codes_for(variant)
        q_train = _load_quantized(art, kind, "train")
        q_eval = _load_quantized(art, kind, "eval")
        source = QuantizedLog.concat([q_train, q_eval])
        preds = predict_ranking(checkpoint, q_eval, source)
        tasks = checkpoint.metadata["tasks"]
        found: Dict[str, Any] = {f"ranking.trained_{variant}": checkpoint.trained}
        for task, result in evaluate_ranking(preds, q_eval, tasks).items():
            found[f"ranking.auc_{task}_{variant}"] = _metric(result.auc)
            found[f"ranking.gauc_{task}_{variant}"] = _metric(result.gauc)
        _codec.write_kv(art.metrics("eval-ranking", variant), found)
        metrics.update(found)

    _, _, evaluation = _load_simulation(art)
    world = generate_world(config.world)
    oracle: Optional[float]
    try:
        oracle = auc(true_click_logits(world, evaluation), evaluation.label("click"))
    except SingleClass:
        oracle = None
    found = {"ranking.auc_click_oracle": _metric(oracle)}
    _codec.write_kv(art.metrics("eval-ranking", "oracle"), found)
    metrics.update(found)
    return metrics


# report


@dataclass
class RunReport:
    """Metrics of a run, keyed ``stage.metric``, with optional stage timings."""

    metrics: Dict[str, str] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    seed: int = 0
    out_dir: str = ""

    @property
    def empty(self) -> bool:
        return not self.metrics

    def sections(self) -> Iterator[Tuple[str, List[Tuple[str, str]]]]:
        grouped: Dict[str, List[Tuple[str, str]]] = {}
        for key, value in self.metrics.items():
            section, _, name = key.partition(".")
            grouped.setdefault(section, []).append((name, value))
        yield from grouped.items()

    def untrained(self) -> List[str]:
        return sorted(
            key.replace(".trained_", ".")
            for key, value in self.metrics.items()
            if ".trained_" in key and value == "false"
        )

    def metrics_text(self) -> str:
        return _codec.encode_kv(self.metrics)

    def render(self, with_timings: bool = True) -> str:
        """Aligned text report; ``with_timings=False`` drops wall-clock times."""
        if self.empty:
            return EMPTY_REPORT.format(out_dir=self.out_dir)
        lines = [f"streamrec report (seed={self.seed})", ""]
        untrained = self.untrained()
        if untrained:
            lines.append("untrained models: " + ", ".join(untrained))
            lines.append("")
        for section, items in self.sections():
            lines.append(f"[{section}]")
            width = max(len(name) for name, _ in items)
            for name, value in items:
                lines.append(f"  {name.ljust(width)}  {value}")
            lines.append("")
        if with_timings and self.timings:
            lines.append("[timings]")
            width = max(len(stage) for stage in self.timings)
            for stage, seconds in self.timings.items():
                lines.append(f"  {stage.ljust(width)}  {seconds:.2f}s")
            lines.append("")
        return "\n".join(lines)


def collect_report(
    config: PipelineConfig, art: Artifacts, timings: Optional[Dict[str, float]] = None
) -> RunReport:
    """Gather every metrics file present for this configuration."""
    report = RunReport(
        timings=dict(timings or {}), seed=config.seed, out_dir=art.out_dir
    )
    for path in art.metric_files():
        if os.path.exists(path):
            report.metrics.update(_codec.read_kv(path))
    if not report.empty:
        with open(art.report, "w", encoding="utf-8") as fh:
            fh.write(report.render())
        with open(art.report_metrics, "w", encoding="utf-8") as fh:
            fh.write(report.metrics_text())
    return report


def stage_report(config: PipelineConfig, art: Artifacts) -> RunReport:
    return collect_report(config, art)


def run_stage(
    stage: str, fn: Callable[[], T], timings: Optional[Dict[str, float]] = None
) -> T:
    """Run one stage, tagging library errors with the stage name."""
    start = time.perf_counter()
    logger.info("pipeline.stage_start", extra={"stage": stage})
    try:
        result = fn()
    except StageError:
        raise
    except StreamRecError as exc:
        raise StageError(stage, exc) from exc
    elapsed = time.perf_counter() - start
    if timings is not None:
        timings[stage] = timings.get(stage, 0.0) + elapsed
    logger.info(
        "pipeline.stage_done", extra={"stage": stage, "seconds": round(elapsed, 3)}
    )
    return result


def run_pipeline(config: PipelineConfig, out_dir: Optional[str] = None) -> RunReport:
    """Every stage in order; the same sequence the subcommands perform."""
    config.validate()
    art = Artifacts(config, out_dir)
    timings: Dict[str, float] = {}
    run_stage("simulate", lambda: stage_simulate(config, art), timings)
    run_stage("train-retrieval", lambda: stage_train_retrieval(config, art), timings)
    run_stage(
        "eval-retrieval",
        lambda: stage_eval_retrieval(config, art, BASE_RETRIEVAL_VARIANTS),
        timings,
    )
    run_stage("build-codebooks", lambda: stage_build_codebooks(config, art), timings)
    run_stage("quantize", lambda: stage_quantize(config, art), timings)
    run_stage(
        "train-retrieval",
        lambda: stage_train_retrieval(config, art, ["fusion_codes"]),
        timings,
    )
    run_stage(
        "eval-retrieval",
        lambda: stage_eval_retrieval(config, art, ["fusion_codes"]),
        timings,
    )
    run_stage("train-ranking", lambda: stage_train_ranking(config, art), timings)
    run_stage("eval-ranking", lambda: stage_eval_ranking(config, art), timings)
    return run_stage("report", lambda: collect_report(config, art, timings), timings)


def neighbors(
    art: Artifacts, author_id: int, k: int = 10, variant: str = "fusion"
) -> List[Tuple[int, float]]:
    """Closest authors to ``author_id`` in the index of a trained ``variant``."""
    windows, train, _ = _load_simulation(art)
    params = _load_retrieval(art, variant)
    return nearest_authors(_index(params, windows, train), author_id, k)
