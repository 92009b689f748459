import pytest

from pfanet import config
from pfanet.config import ConfigFileError, TrainConfig
from pfanet.data import SynthSceneSpec


def test_parse_types_and_comments():
    cfg = config.parse_text("""
# a comment
epochs = 3   # trailing comment
block_channels = 8, 16, 32, 64, 64
augment = false
lr = 2e-3
out_dir = runs/x
""")
    assert cfg.epochs == 3 and cfg.block_channels == (8, 16, 32, 64, 64)
    assert cfg.augment is False and cfg.lr == 2e-3 and cfg.out_dir == "runs/x"


@pytest.mark.parametrize("text,msg", [("nonsense = 1", "unknown key"), ("epochs 3", "key = value"),
                                      ("epochs = three", "cannot parse"),
                                      ("epochs = 1\nepochs = 2", "duplicate"),
                                      ("lr_step = sometimes", "lr_step"),
                                      ("augment = maybe", "cannot parse")])
def test_errors(text, msg):
    with pytest.raises(ConfigFileError, match=msg):
        config.parse_text(text)


def test_round_trip():
    cfg = TrainConfig(epochs=7, lr=3.3e-4, spacings=(1, 2), augment=False)
    assert config.parse_text(config.to_text(cfg)) == cfg


def test_synth_spec_file():
    spec = config.parse_text("seed = 4\nheight = 32\nshapes = circle", SynthSceneSpec)
    assert spec == SynthSceneSpec(seed=4, height=32, shapes=("circle",))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigFileError):
        config.load(tmp_path / "nope.txt")


def test_model_config_passthrough():
    cfg = TrainConfig(c_high=32, reduction=8, seed=9)
    m = cfg.model_config()
    assert (m.c_high, m.reduction, m.seed) == (32, 8, 9)
