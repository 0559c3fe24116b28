import pytest

from streamrec.config import PipelineConfig
from streamrec.config import parse_config
from streamrec.config import parse_config_text
from streamrec.errors import EXIT_USAGE
from streamrec.errors import InvalidConfig
from streamrec.errors import ParseError
from streamrec.errors import UnknownKey

TINY_CONFIG = """\
[world]
n_users = 200
n_authors = 40
n_topics = 4
d = 8
sessions_per_author = 3
windows_per_session = 5
exposures_per_user = 20
n_styles = 4
user_shard_size = 100

[retrieval]
d = 8
epochs = 1
batch_size = 128
hitrate_k = 10
history_length = 5

[quantizer]
sizes = [8, 4, 2]
max_iters = 20

[ranking]
d = 4
n_experts = 2
epochs = 1
batch_size = 256
history_length = 5

[pipeline]
seed = 7
"""


def tiny_config(out_dir=None, **pipeline):
    config = parse_config_text(TINY_CONFIG)
    return config.with_overrides(seed=pipeline.get("seed"), out_dir=out_dir)


def test_defaults():
    config = parse_config()
    assert config == PipelineConfig()
    assert config.quantizer.sizes == (64, 32, 16)
    assert config.retrieval.hitrate_denominator == "retrieved"
    assert config.out_dir == "streamrec-out"


def test_parse_sections():
    config = tiny_config()
    assert config.seed == 7
    assert config.world.seed == 7
    assert config.world.n_users == 200
    assert config.quantizer.sizes == (8, 4, 2)
    assert config.ranking.tasks == PipelineConfig().ranking.tasks
    assert config.retrieval.tau == 0.1


def test_dotted_keys_and_float_coercion():
    config = parse_config_text("retrieval.tau = 1\nworld.base_rates.click = 0.2\n")
    assert config.retrieval.tau == 1.0
    assert isinstance(config.retrieval.tau, float)
    assert config.world.base_rates["click"] == 0.2
    assert config.world.base_rates["like"] == PipelineConfig().world.base_rates["like"]


def test_parse_errors():
    with pytest.raises(ParseError) as excinfo:
        parse_config_text("[world]\nn_users = \n")
    assert excinfo.value.line == 2
    assert excinfo.value.exit_code == EXIT_USAGE

    with pytest.raises(UnknownKey) as excinfo:
        parse_config_text("[world]\nusers = 3\n")
    assert str(excinfo.value) == "Unknown config key 'world.users'"

    with pytest.raises(UnknownKey) as excinfo:
        parse_config_text("[serving]\nport = 80\n")
    assert excinfo.value.key == "serving"

    with pytest.raises(UnknownKey):
        parse_config_text("world.base_rates.share = 0.1\n")


@pytest.mark.parametrize(  # type: ignore[misc]
    "text",
    [
        "world.n_users = 2.5\n",
        "world.n_users = true\n",
        "retrieval.normalize = 1\n",
        "quantizer.sizes = 4\n",
        "quantizer.sizes = [4, 4]\n",
        "pipeline.train_fraction = 1.0\n",
        "retrieval.hitrate_denominator = 'precision'\n",
    ],
)
def test_invalid_values(text):
    with pytest.raises(InvalidConfig):
        parse_config_text(text)


def test_with_overrides():
    config = tiny_config()
    changed = config.with_overrides(seed=11, out_dir="elsewhere")
    assert changed.seed == changed.world.seed == 11
    assert changed.out_dir == "elsewhere"
    assert config.seed == 7
    assert config.with_overrides() == config


def test_stage_hash():
    config = tiny_config()
    digest = config.stage_hash("simulate")
    assert len(digest) == 12
    int(digest, 16)

    # out_dir never changes artifact names
    assert config.with_overrides(out_dir="x").stage_hash("simulate") == digest
    assert config.with_overrides(seed=8).stage_hash("simulate") != digest

    other = parse_config_text(TINY_CONFIG.replace("n_experts = 2", "n_experts = 3"))
    assert other.stage_hash("simulate") == digest
    assert other.stage_hash("quantize") == config.stage_hash("quantize")
    assert other.stage_hash("train-ranking") != config.stage_hash("train-ranking")

    with pytest.raises(ValueError):
        config.stage_hash("report")


def test_to_toml_round_trip():
    config = tiny_config()
    assert parse_config_text(config.to_toml()) == config


def test_parse_config_file(tmp_path):
    path = tmp_path / "streamrec.toml"
    path.write_text(TINY_CONFIG)
    assert parse_config(str(path)) == tiny_config()
