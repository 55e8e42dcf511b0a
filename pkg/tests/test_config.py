from fractions import Fraction

import pytest

from himosa.config import FULL, TINY, ModelConfig, TrainConfig, dump_config, load_config, parse_config
from himosa.errors import ConfigError

REPO_CONFIGS = __import__("pathlib").Path(__file__).resolve().parents[1] / "configs"


def test_defaults_are_the_reported_architecture():
    assert (FULL.n_blocks, FULL.n_layers, FULL.channels, FULL.n_experts) == (4, 6, 60, 8)
    assert FULL.ratios == (Fraction(1, 2), 1, 2, 4, 6, 8) and FULL.sparsity == (1, 1, 2, 4, 8, 12)


def test_parse_with_comments_lists_and_fractions():
    model, train = parse_config("""
        # comment line
        ratios = 1/2, 1   # trailing comment
        sparsity = 1, 2
        n_layers = 2
        expert_dim = none
        base_lr = 2e-4
    """)
    assert model.ratios == (Fraction(1, 2), Fraction(1)) and model.expert_dim is None
    assert train.base_lr == 2e-4 and model.d_expert == 60


@pytest.mark.parametrize("cfg", [FULL, TINY, FULL.replace(expert_dim=48, use_gate=False)])
def test_dump_parse_roundtrip(cfg):
    train = TrainConfig(total_iters=10, warmup_iters=2, decay_points=(5, 8), base_lr=0.1 + 0.2)
    assert parse_config(dump_config(cfg, train)) == (cfg, train)


@pytest.mark.parametrize("text,match", [
    ("chanels = 4", "unknown key"),
    ("seed = 1\nseed = 2", "duplicate"),
    ("channels 60", "key = value"),
    ("channels = sixty", "channels"),
    ("use_norm = maybe", "use_norm"),
    ("n_layers = 2", "n_layers"),
    ("scale = 3", "scale"),
    ("sparsity = 12, 8, 4, 2, 1, 1", "non-decreasing"),
    ("cab_reduction = 7", "divisible"),
    ("warmup_iters = 300000", "warmup"),
    ("decay_points = 5, 3", "ascending"),
    ("optimizer = muon", "optimizer"),
])
def test_malformed_configs_rejected(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text, "t.cfg")


def test_error_carries_source_and_line(tmp_path):
    p = tmp_path / "x.cfg"
    p.write_text("seed = 1\nbogus = 2\n")
    with pytest.raises(ConfigError, match=r"x.cfg:2"):
        load_config(p)


def test_shipped_configs_load():
    full, _ = load_config(REPO_CONFIGS / "full.cfg")
    tiny, tiny_train = load_config(REPO_CONFIGS / "tiny.cfg")
    assert full == FULL.replace(expert_dim=48)
    assert tiny == TINY and tiny_train.total_iters == 2000


def test_derived_sizes():
    assert FULL.glu_hidden == 120 and FULL.cab_hidden == 20 and FULL.se_hidden == 15
    assert ModelConfig().window_sizes() == [4, 8, 16, 32, 48, 64] and FULL.pad_unit == 64
