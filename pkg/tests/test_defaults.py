from mmrkit.chords import N_CHORD_LABELS
from mmrkit.codec import bom
from mmrkit.model import ModelConfig
from mmrkit.runner import TrainConfig
from mmrkit.score_io import GRID, quantize_time


def test_four_four_measure_is_thirty_two_units():
    assert quantize_time(4 * 480, 480) == GRID == 32
    assert bom(32) - bom(1) == 31


def test_chord_label_count():
    assert N_CHORD_LABELS - 1 == 132


def test_full_scale_model_config():
    cfg = ModelConfig.paper_scale()
    assert (cfg.embed_dim, cfg.layers, cfg.heads, cfg.max_seq, cfg.event_vocab) == (512, 12, 16, 4096, 1000)


def test_optimizer_defaults():
    t = TrainConfig()
    assert t.lr == 3e-4
    assert (t.beta1, t.beta2, t.weight_decay, t.clip_norm) == (0.9, 0.999, 0.01, 1.0)
