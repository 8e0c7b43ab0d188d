import pytest

from aaformer.config import RunConfig, format_config, load_config, parse_config_text
from aaformer.model import ConfigError


def test_parse_sections():
    cfg = parse_config_text("""
        # comment
        seed = 4
        model.embed_dim = 32
        model.granularity_sets = 1, 2, 3
        model.part_pos_embed = true
        train.steps = 10   # trailing comment
        train.milestones = 3,5
        data.num_identities = 6
    """)
    assert cfg.seed == 4
    assert cfg.model.embed_dim == 32 and cfg.model.granularity_sets == (1, 2, 3)
    assert cfg.model.part_pos_embed is True
    assert cfg.train.steps == 10 and cfg.train.milestones == (3, 5)
    assert cfg.model.num_classes == 6


def test_roundtrip_text(tmp_path):
    cfg = parse_config_text("model.heads = 2\ndata.height = 32\ntrain.augment = false\n")
    path = tmp_path / "c.cfg"
    path.write_text(format_config(cfg))
    again = load_config(path)
    assert again.to_dict() == cfg.to_dict()
    assert RunConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


@pytest.mark.parametrize("text", [
    "model.depth = 3", "optim.lr = 1", "seed", "model.heads = 2\nmodel.heads = 4",
    "model.embed_dim = big", "train.augment = maybe", "model.num_classes = 3",
    "model.heads = 5",
])
def test_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_replace_model_only():
    cfg = RunConfig()
    other = cfg.replace(assignment="nn")
    assert other.model.assignment == "nn" and cfg.model.assignment == "ot"
    assert other.train is cfg.train
