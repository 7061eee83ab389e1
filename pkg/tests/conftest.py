from pathlib import Path
from typing import List

import numpy as np
import pytest

from fundus_vlm_cli.config import ForgeSettings, ModelConfig, TrainConfig
from fundus_vlm_cli.dialogue import DialogueRound
from fundus_vlm_cli.forge import CaptionDialogue
from fundus_vlm_cli.imaging import synth_fundus_image, write_image
from fundus_vlm_cli.model import init_params

TINY_TOKENS = 512


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(
        image_size=8,
        patch_size=4,
        embed_dim=8,
        encoder_layers=1,
        text_layers=1,
        decoder_layers=1,
        heads=2,
        ffn_hidden=16,
        max_tokens=TINY_TOKENS,
    )


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=7)


@pytest.fixture
def train_config() -> TrainConfig:
    return TrainConfig(batch_size=4, pretrain_epochs=1, finetune_epochs=1, warmup_epochs=0, max_tokens=TINY_TOKENS, seed=3)


@pytest.fixture
def forge_settings() -> ForgeSettings:
    return ForgeSettings(records=4, image_size=8, max_diseases=1, healthy_fraction=0.25)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def caption_corpus(tmp_path: Path) -> List[CaptionDialogue]:
    """Four short caption dialogues over 8x8 images written under tmp_path."""
    samples = []
    for i in range(4):
        signs = [0] * 6
        signs[i % 6] = 1
        rel = f"images/cap-{i}.ppm"
        write_image(tmp_path / rel, synth_fundus_image(signs, size=8, seed=i))
        samples.append(CaptionDialogue(f"cap-{i}", rel, "Describe it.", f"This is a fundus image. Case {i}.", "Fundus"))
    return samples


@pytest.fixture
def short_rounds() -> List[DialogueRound]:
    return [DialogueRound("Q1?", "A one."), DialogueRound("Q2?", "A two."), DialogueRound("Q3?", "A three.")]
