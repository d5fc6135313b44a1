import pytest

from compositor_lab.config import SCHEMA, ConfigError, RunConfig, load_config, parse_config


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# nothing set\n\n")
    cfg = load_config(p)
    assert cfg["sampler.steps"] == 50 and cfg["sampler.n"] == 5
    assert cfg["train.s3.alpha"] == 0.25
    assert cfg["schedule.T"] == 1000 and cfg["schedule.beta_start"] == 1e-4 and cfg["schedule.beta_end"] == 0.02
    assert cfg["model.channels"] == (32, 64, 96)
    assert cfg.values == RunConfig().values
    assert cfg.base_dir == tmp_path.resolve()


def test_no_path_gives_defaults():
    assert load_config(None).values == RunConfig().values


def test_alpha_parsed():
    cfg = parse_config("train.s3.alpha = 0.25  # merge weight\n")
    assert cfg["train.s3.alpha"] == 0.25
    assert parse_config("train.s3.alpha=0.5")["train.s3.alpha"] == 0.5


def test_unknown_key_names_key_and_line():
    with pytest.raises(ConfigError, match=r"<config>:2: unknown key 'train.s3.alhpa'"):
        parse_config("seed = 1\ntrain.s3.alhpa = 0.25\n")


def test_type_mismatch_and_syntax_errors():
    with pytest.raises(ConfigError, match=r":1: bad value for 'sampler.steps'"):
        parse_config("sampler.steps = fifty")
    with pytest.raises(ConfigError, match=r":3: expected 'key = value'"):
        parse_config("seed = 1\n\njust words\n")
    with pytest.raises(ConfigError, match=r":2: duplicate key 'seed' \(first set on line 1\)"):
        parse_config("seed = 1\nseed = 2\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")


@pytest.mark.parametrize("text", [
    "train.stages = S2,S1",
    "train.stages = S1,S1",
    "train.stages = S1,S9",
    "data.split = 0.5,0.5,0.5",
    "model.combine = median",
    "eval.identity_mask = bbox",
    "train.s3.alpha = 1.5",
    "sampler.n = 1",
    "sampler.steps = 0",
])
def test_validation_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_path_must_resolve_to_directory(tmp_path):
    f = tmp_path / "file.txt"
    f.write_text("x")
    with pytest.raises(ConfigError):
        parse_config(f"out_dir = {f}/runs", base_dir=tmp_path)
    cfg = parse_config("out_dir = runs/a/b", base_dir=tmp_path)
    assert cfg.path("out_dir") == tmp_path / "runs/a/b"


def test_stage_plans_from_config():
    cfg = parse_config("train.stages = S1,S2,S3\ntrain.steps = 40\ntrain.s2.steps = 8\ntrain.lr.unet = 1e-4\n"
                       "train.batch_size = 4\n")
    plans = cfg.plans()
    assert [p.stage_tag for p in plans] == ["S1", "S2", "S3"]
    assert [p.steps for p in plans] == [40, 8, 40]
    assert plans[1].encoder_steps == 2
    assert all(p.learning_rates["unet"] == 1e-4 and p.batch_size == 4 for p in plans)
    assert parse_config("train.encoder_steps = 3").plans()[1].encoder_steps == 3


def test_model_config_and_betas():
    cfg = parse_config("model.channels = 8,16\nmodel.combine = concatenate\nschedule.T = 100\n")
    mc = cfg.model_config()
    assert mc.channels == (8, 16) and mc.combine == "concatenate"
    assert cfg.betas().shape == (100,)


def test_resolved_echo_round_trips(tmp_path):
    cfg = parse_config("seed = 7\nmodel.channels = 8,16\ntrain.stages = S1,S2\n", base_dir=tmp_path)
    path = cfg.write_resolved(tmp_path / "out")
    assert path.name == "config.resolved"
    again = parse_config(path.read_text(), base_dir=tmp_path)
    assert again.values == cfg.values
    assert len([l for l in path.read_text().splitlines() if "=" in l]) == len(SCHEMA)


def test_model_flags_and_lr_decay():
    cfg = parse_config("model.bg_gate = false\nmodel.film = no\ntrain.lr_decay = cosine\n")
    mc = cfg.model_config()
    assert mc.bg_gate is False and mc.film is False
    assert all(p.lr_decay == "cosine" for p in cfg.plans())
    assert RunConfig().model_config().bg_gate and RunConfig().model_config().film
    with pytest.raises(ConfigError, match="train.lr_decay"):
        parse_config("train.lr_decay = step\n")
