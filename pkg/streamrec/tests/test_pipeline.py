import os

import pytest

from streamrec import pipeline
from streamrec.errors import EXIT_DATA
from streamrec.errors import EmptyLog
from streamrec.errors import MissingArtifact
from streamrec.errors import StageError
from streamrec.nnkit import checkpoint_exists
from streamrec.pipeline import Artifacts
from streamrec.pipeline import RunReport
from streamrec.tests.test_config import tiny_config


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    out_dir = str(tmp_path_factory.mktemp("run"))
    config = tiny_config(out_dir)
    report = pipeline.run_pipeline(config)
    return config, report


def test_run_pipeline_writes_every_metric(finished_run):
    config, report = finished_run
    art = Artifacts(config)
    metrics = report.metrics
    for key in (
        "simulate.events",
        "retrieval.hitrate_id_only",
        "retrieval.hitrate_llm_only",
        "retrieval.hitrate_fusion",
        "retrieval.hitrate_fusion_codes",
        "retrieval.gate_mean_fusion",
        "quantizer.mse_l1_raw",
        "quantizer.mse_l3_fused",
        "quantizer.storage_raw_bytes",
        "quantizer.purity_raw",
        "ranking.auc_click_none",
        "ranking.auc_click_raw",
        "ranking.gauc_click_fused",
        "ranking.auc_click_oracle",
    ):
        assert key in metrics, key
    assert metrics["simulate.events"] == "4000"
    assert metrics["retrieval.hitrate_k"] == "10"
    assert 0.0 <= float(metrics["retrieval.hitrate_fusion"]) <= 1.0
    assert report.untrained() == []
    assert report.seed == 7
    # the report stage is timed after the report is built
    assert set(report.timings) == set(pipeline.STAGES) - {"report"}

    assert os.path.exists(art.report)
    with open(art.report_metrics) as fh:
        assert fh.read() == report.metrics_text()
    for variant in pipeline.RANKING_VARIANTS:
        assert checkpoint_exists(art.ranking(variant))
    assert checkpoint_exists(art.retrieval("fusion_codes"))


def test_run_pipeline_is_deterministic(finished_run, tmp_path):
    config, report = finished_run
    again = pipeline.run_pipeline(config, out_dir=str(tmp_path))
    assert again.metrics_text() == report.metrics_text()
    assert again.render(with_timings=False) == report.render(with_timings=False)


def test_report_from_existing_artifacts(finished_run):
    config, report = finished_run
    collected = pipeline.stage_report(config, Artifacts(config))
    assert collected.metrics == report.metrics
    assert collected.timings == {}
    assert "[timings]" not in collected.render()


def test_neighbors(finished_run):
    config, _ = finished_run
    found = pipeline.neighbors(Artifacts(config), 3, k=5)
    assert len(found) == 5
    assert 3 not in [author for author, _ in found]
    scores = [score for _, score in found]
    assert scores == sorted(scores, reverse=True)


def test_stages_need_their_inputs(tmp_path):
    config = tiny_config(str(tmp_path))
    art = Artifacts(config)
    with pytest.raises(StageError) as excinfo:
        pipeline.run_stage(
            "eval-retrieval", lambda: pipeline.stage_eval_retrieval(config, art)
        )
    assert excinfo.value.stage == "eval-retrieval"
    assert excinfo.value.exit_code == EXIT_DATA
    assert isinstance(excinfo.value.cause, MissingArtifact)
    assert str(excinfo.value).startswith("[eval-retrieval] Stage 'simulate' has not")


def test_missing_code_aware_retrieval_names_its_training_stage(tmp_path):
    config = tiny_config(str(tmp_path))
    art = Artifacts(config)
    pipeline.stage_simulate(config, art)
    with pytest.raises(MissingArtifact) as excinfo:
        pipeline.stage_eval_retrieval(config, art, ["fusion_codes"])
    assert excinfo.value.stage == "train-retrieval"
    assert excinfo.value.path == art.retrieval("fusion_codes")


def test_empty_report(tmp_path):
    config = tiny_config(str(tmp_path))
    report = pipeline.stage_report(config, Artifacts(config))
    assert report.empty
    assert report.render() == f"No artifacts found in {tmp_path}; nothing to report."
    assert not os.path.exists(Artifacts(config).report)


def test_run_stage_records_timings():
    timings = {}
    assert pipeline.run_stage("simulate", lambda: 3, timings) == 3
    pipeline.run_stage("simulate", lambda: None, timings)
    assert list(timings) == ["simulate"]
    assert timings["simulate"] >= 0.0

    def fail():
        raise EmptyLog()

    with pytest.raises(StageError) as excinfo:
        pipeline.run_stage("train-ranking", fail, timings)
    assert str(excinfo.value) == "[train-ranking] Interaction log is empty"
    assert list(timings) == ["simulate"]


def test_render_report():
    report = RunReport(
        {
            "retrieval.trained_fusion": "false",
            "retrieval.hitrate_fusion": "0.125000",
            "ranking.auc_click_raw": "n/a",
        },
        {"simulate": 1.5},
        seed=4,
        out_dir="out",
    )
    assert report.untrained() == ["retrieval.fusion"]
    assert report.render().splitlines() == [
        "streamrec report (seed=4)",
        "",
        "untrained models: retrieval.fusion",
        "",
        "[retrieval]",
        "  trained_fusion  false",
        "  hitrate_fusion  0.125000",
        "",
        "[ranking]",
        "  auc_click_raw  n/a",
        "",
        "[timings]",
        "  simulate  1.50s",
    ]
    assert "[timings]" not in report.render(with_timings=False)
