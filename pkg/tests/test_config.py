import pytest

from lfqgen.config import SEED_ENV, ConfigError, RunConfig, apply_env_overrides, load_config, parse_config
from lfqgen.generator import ARModel


def test_parse_learning_rate():
    assert parse_config("lr = 1e-4\n").lr == 1e-4


def test_comments_and_blank_lines():
    cfg = parse_config("# tokenizer\n\nsteps = 7  # short\nchannels = 8,16\n")
    assert cfg.steps == 7 and cfg.channels == (8, 16)


@pytest.mark.parametrize("text", ["lr = 1\nlr = 2\n", "nope = 1\n", "lr 1\n", "steps = many\n", "stage = other\n", "lr = -1\n"])
def test_rejects_bad_text(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_stage_defaults():
    assert (RunConfig(stage="tokenizer").beta1, RunConfig(stage="tokenizer").grad_clip) == (0.5, 0.0)
    ar = RunConfig(stage="ar")
    assert (ar.beta1, ar.beta2, ar.weight_decay, ar.grad_clip) == (0.9, 0.95, 0.05, 1.0)


def test_text_round_trip():
    cfg = RunConfig(stage="ar", lr=3e-4, subtoken_bits=(6, 12), ffn_mult=8 / 3, entropy_mode="exact")
    assert parse_config(cfg.to_text()) == cfg


def test_table_row_parses_and_constructs():
    cfg = parse_config("stage = ar\ninter_blocks = 24\nintra_blocks = 2\nwidth = 1024\nheads = 16\n"
                       "subtoken_bits = 6,12\nnum_classes = 1000\nseq_len = 256\n")
    model = ARModel(cfg.ar_config(), meta=True)
    assert model.config.width == 1024 and model.num_parameters() > 0


def test_seed_override(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 3\n")
    assert load_config(str(path), {}).seed == 3
    assert load_config(str(path), {SEED_ENV: "11"}).seed == 11
    with pytest.raises(ConfigError):
        apply_env_overrides(RunConfig(), {SEED_ENV: "x"})
