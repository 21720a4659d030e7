import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uniflow.config import (ConfigError, RunConfig, dump_config, load_config, parse_config,
                            toy_config)


def test_empty_file_gives_paper_defaults(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("")
    cfg = load_config(path)
    assert cfg.beta == 2.0
    assert cfg.latent_dim == 64
    assert cfg.gtb_depth == 6
    assert cfg.optimizer_momenta == (0.5, 0.95)
    assert cfg.learning_rate == 2e-4
    assert cfg.epochs == 30
    assert cfg.lambda_d == cfg.lambda_f == 1.0
    assert cfg.timestep_distribution == "uniform"


def test_indivisible_patch_grid_is_rejected():
    with pytest.raises(ConfigError, match="image_size not divisible by patch_size"):
        parse_config("image_size = 30\npatch_size = 4\n")


def test_beta_zero_is_valid():
    assert parse_config("beta = 0").beta == 0.0


def test_comments_booleans_and_pairs():
    cfg = parse_config("""
        # toy run
        augment = true   # trailing comment
        optimizer_momenta = 0.9, 0.99
        teacher_source = pretrained_probe_teacher
        data_root = "/data/toy"
    """)
    assert cfg.augment is True
    assert cfg.optimizer_momenta == (0.9, 0.99)
    assert cfg.teacher_source == "pretrained_probe_teacher"
    assert cfg.data_root == "/data/toy"


@pytest.mark.parametrize("text, line", [
    ("beta = 2\nthis line has no equals sign\n", 2),
    ("\n\nnot_a_field = 3\n", 3),
    ("epochs = three\n", 1),
    ("augment = yes\n", 1),
    ("beta = 1\nbeta = 2\n", 2),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


@pytest.mark.parametrize("text, field", [
    ("encoder_layers = 0", "encoder_layers"),
    ("gtb_depth = -1", "gtb_depth"),
    ("latent_dim = 0", "latent_dim"),
    ("lambda_d = 0\nlambda_f = 0", "lambda_d"),
    ("optimizer_momenta = 0.5, 1.0", "optimizer_momenta"),
    ("teacher_source = imagenet", "teacher_source"),
    ("timestep_distribution = beta", "timestep_distribution"),
])
def test_invariant_violations_name_the_field(text, field):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.field_name == field
    assert field in str(err.value)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.cfg"):
        load_config(tmp_path / "nope.cfg")


def test_toy_preset_matches_documented_dims():
    cfg = toy_config()
    assert (cfg.image_size, cfg.patch_size, cfg.encoder_layers, cfg.hidden_dim) == (32, 4, 4, 128)
    assert (cfg.latent_dim, cfg.gtb_depth, cfg.flow_head_depth, cfg.flow_head_width) == (32, 2, 4, 128)
    assert cfg.batch_size == 64
    assert cfg.dec_dim == 128


configs = st.builds(
    lambda p, mult, layers, beta, ld, lf, lr, m1, m2, seed, root, aug, tsd: RunConfig(
        image_size=p * mult, patch_size=p, encoder_layers=layers, beta=beta, lambda_d=ld, lambda_f=lf,
        learning_rate=lr, optimizer_momenta=(m1, m2), seed=seed, data_root=root, augment=aug,
        timestep_distribution=tsd),
    st.integers(1, 8), st.integers(1, 8), st.integers(1, 6),
    st.floats(0, 10, allow_nan=False), st.floats(0.5, 100), st.floats(0, 100),
    st.floats(0, 1), st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.integers(-2**31, 2**31),
    st.text(alphabet="abc/_-.019", max_size=12), st.booleans(), st.sampled_from(["uniform", "logit_normal"]),
)


@settings(max_examples=100, deadline=None)
@given(configs)
def test_config_round_trip(cfg):
    text = dump_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert dump_config(again) == text
