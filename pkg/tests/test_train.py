import dataclasses

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_array_equal

from fundus_vlm_cli.autodiff import grad_check
from fundus_vlm_cli.checkpoint import load_checkpoint
from fundus_vlm_cli.config import ModelConfig, TrainConfig
from fundus_vlm_cli.dialogue import TemplateDialogueGenerator
from fundus_vlm_cli.errors import ContractError
from fundus_vlm_cli.forge import forge_fundus_corpus
from fundus_vlm_cli.model import init_params
from fundus_vlm_cli.tokenizer import encode_answer, encode_prompt, tokenize
from fundus_vlm_cli.train import (
    METRIC_COLUMNS,
    TrainSample,
    answer_log_likelihood,
    answer_question,
    batch_loss,
    build_samples,
    run_finetune,
    run_pretrain,
    sequence_targets,
)


def _sample(record_id, rng, signs=None, question="Q?", answer="ok"):
    return TrainSample(
        record_id=record_id,
        image=rng.uniform(size=(8, 8, 3)),
        prompt=encode_prompt(question),
        answer=encode_answer(answer),
        text=tokenize(f"caption {record_id}").ids,
        signs=None if signs is None else np.asarray(signs, dtype=np.float64),
    )


def test_sequence_targets_mask_covers_answer_only():
    tokens = [256, 65, 10, 66, 67, 257]
    targets, mask = sequence_targets(3, tokens, 0)
    assert_array_equal(targets, tokens)
    assert mask.tolist() == [False, False, False, True, True, True]

    targets, mask = sequence_targets(3, tokens, 4)
    assert_array_equal(targets, [67, 257])
    assert mask.all()


def test_build_samples_one_per_round(tmp_path, forge_settings, train_config):
    records = forge_fundus_corpus(tmp_path, forge_settings, 0, TemplateDialogueGenerator())
    samples = build_samples(records, train_config, tmp_path)
    assert len(samples) == 3 * len(records)
    assert samples[0].record_id == samples[2].record_id
    assert samples[0].image is samples[1].image
    assert samples[0].signs.shape == (6,)


def test_build_samples_for_caption_dialogues(tmp_path, caption_corpus, train_config):
    samples = build_samples(caption_corpus, train_config, tmp_path)
    assert len(samples) == 4
    assert all(s.signs is None for s in samples)


class TestBatchLoss:
    def test_components(self, tiny_params, train_config, rng):
        batch = [_sample("a", rng, [1, 0, 0, 0, 0, 0]), _sample("b", rng, [0, 0, 0, 0, 0, 1])]
        total, values = batch_loss(batch, tiny_params, train_config)
        assert values["clip"] is not None and values["cls"] is not None
        assert total.item() == pytest.approx(values["clip"] + values["cls"] + values["llm"])
        assert values["llm"] > 0

    def test_pretrain_mode_only_generates_text(self, tiny_params, train_config, rng):
        total, values = batch_loss([_sample("a", rng)], tiny_params, train_config, mode="pretrain")
        assert values["clip"] is None and values["cls"] is None
        assert total.item() == pytest.approx(values["llm"])

    def test_sign_objective_needs_labels(self, tiny_params, train_config, rng):
        with pytest.raises(ContractError):
            batch_loss([_sample("a", rng)], tiny_params, train_config)

    def test_gradients_of_the_whole_model(self, tiny_config, train_config, rng):
        config = dataclasses.replace(tiny_config, max_tokens=64)
        params = init_params(config, seed=1)
        train = dataclasses.replace(train_config, max_tokens=64)
        batch = [
            _sample("a", rng, [1, 0, 0, 1, 0, 0], question="Why?", answer="Drusen."),
            _sample("b", rng, [0, 0, 0, 0, 0, 1], question="And?", answer="No."),
        ]
        report = grad_check(lambda: batch_loss(batch, params, train)[0], params.tensors, max_entries=3, seed=2)
        assert report.passed, report


class TestLoops:
    def test_pretrain_writes_metrics_and_checkpoints(self, tmp_path, tiny_params, caption_corpus, train_config):
        config = dataclasses.replace(train_config, pretrain_epochs=3, batch_size=2, keep_checkpoints=2)
        result = run_pretrain(caption_corpus, tiny_params, config, tmp_path, tmp_path / "run")

        assert len(result.metrics) == 6
        assert list(result.metrics.columns) == METRIC_COLUMNS
        assert result.metrics["clip"].isna().all()
        assert result.metrics["lr"].iloc[-1] < result.metrics["lr"].iloc[0]
        assert [p.name for p in result.checkpoints] == ["epoch-0002.vukp", "epoch-0003.vukp"]
        assert pd.read_csv(tmp_path / "run" / "metrics.csv")["step"].tolist() == list(range(1, 7))

        loaded = load_checkpoint(result.checkpoints[-1])
        assert loaded.meta["epoch"] == 3 and loaded.meta["mode"] == "pretrain"
        assert loaded.state.step == 6

    def test_max_steps(self, tmp_path, tiny_params, caption_corpus, train_config):
        config = dataclasses.replace(train_config, pretrain_epochs=5, batch_size=1)
        result = run_pretrain(caption_corpus, tiny_params, config, tmp_path, max_steps=3)
        assert len(result.metrics) == 3

    def test_runs_are_reproducible(self, tmp_path, tiny_config, caption_corpus, train_config):
        config = dataclasses.replace(train_config, batch_size=2)
        first = run_pretrain(caption_corpus, init_params(tiny_config, 4), config, tmp_path, tmp_path / "a")
        second = run_pretrain(caption_corpus, init_params(tiny_config, 4), config, tmp_path, tmp_path / "b")
        pd.testing.assert_frame_equal(first.metrics, second.metrics)
        assert first.checkpoints[-1].read_bytes() == second.checkpoints[-1].read_bytes()

    def test_finetune_skips_invalid_records(self, tmp_path, tiny_params, forge_settings, train_config):
        records = forge_fundus_corpus(tmp_path, forge_settings, 3, TemplateDialogueGenerator())
        records[0] = dataclasses.replace(records[0], dialogue=records[0].dialogue[:2])
        result = run_finetune(records, tiny_params, train_config, tmp_path, max_steps=2)
        assert result.skipped == 1
        assert result.metrics["cls"].notna().all() and result.metrics["clip"].notna().all()

    def test_finetune_with_nothing_valid(self, tmp_path, tiny_params, forge_settings, train_config):
        records = forge_fundus_corpus(tmp_path, forge_settings, 3, TemplateDialogueGenerator())
        broken = [dataclasses.replace(r, dialogue=[]) for r in records]
        with pytest.raises(ContractError):
            run_finetune(broken, tiny_params, train_config, tmp_path)

    def test_empty_corpus(self, tiny_params, train_config):
        with pytest.raises(ContractError):
            run_pretrain([], tiny_params, train_config)


class TestInference:
    def test_answer_question_is_text(self, tiny_params, rng):
        image = rng.uniform(size=(8, 8, 3))
        answer = answer_question(image, "What do you see?", tiny_params, max_new=4)
        assert isinstance(answer, str)
        assert answer == answer_question(image, "What do you see?", tiny_params, max_new=4)

    def test_log_likelihood_is_a_mean_log_probability(self, tiny_params, rng):
        image = rng.uniform(size=(8, 8, 3))
        value = answer_log_likelihood(image, "Which disease?", "Myopia", tiny_params)
        # near-uniform initial logits over 259 ids
        assert -np.log(259) - 0.5 < value < 0


@pytest.mark.slow
def test_training_reduces_the_loss(tmp_path, caption_corpus):
    config = ModelConfig(
        image_size=8, patch_size=4, embed_dim=16, encoder_layers=1, text_layers=1, decoder_layers=1, heads=2, ffn_hidden=32, max_tokens=128
    )
    train = TrainConfig(base_lr=0.5, batch_size=4, pretrain_epochs=60, warmup_epochs=2, max_tokens=128, contrast_factor=1.0, seed=0)
    result = run_pretrain(caption_corpus, init_params(config, 0), train, tmp_path)
    llm = result.metrics["llm"]
    assert llm.tail(5).mean() < 0.8 * llm.head(5).mean()
