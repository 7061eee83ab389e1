import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from fundus_vlm_cli.assets import HEALTHY, load_dialogue_prompt, load_instructions, load_rulebook
from fundus_vlm_cli.descriptions import build_description, parse_description
from fundus_vlm_cli.dialogue import DialogueRound, TemplateDialogueGenerator
from fundus_vlm_cli.errors import ContractError, GeneratorError, RuleLookupError, ValidationError
from fundus_vlm_cli.forge import (
    CaptionDialogue,
    FundusRecord,
    build_dialogue,
    corpus_kind,
    derive_signs,
    forge_fundus_corpus,
    forge_pretrain_corpus,
    ordered_map,
    read_fundus_corpus,
    read_pretrain_corpus,
    sample_disease_sets,
    select_instruction,
    synth_pretrain_pairs,
    validate_corpus,
    validate_record,
    write_corpus,
)
from fundus_vlm_cli.imaging import read_image, synth_fundus_image, write_image
from fundus_vlm_cli.preprocess import Modality, PretrainPair

MILD_NPDR = "Mild Non-Proliferative Diabetic Retinopathy"

SHORT_INSTRUCTIONS = [
    "Briefly depict the image.",
    "Provide a concise overview of the presented image.",
    "Summarize the visual elements in a succinct manner.",
    "Give a clear, short explanation of the image.",
    "Offer a compact interpretation of the provided image.",
    "Share a brief account of the key features captured in the photo.",
    "Relay a clear and concise description of the shown picture.",
    "Render a succinct summary of the photo's content.",
    "Craft a compact narrative encapsulating the presented picture.",
    "Create a brief, informative summary of the visual content.",
]
LONG_INSTRUCTIONS = [
    "Elaborate on the specifics of the given image.",
    "Offer an intricate explanation of the visual content.",
    "Share a comprehensive rundown of the image presented.",
    "Conduct a thorough analysis of the elements within the image.",
    "Explain in detail the various aspects portrayed in the image.",
    "Characterize the image through a well-detailed description.",
    "Analyze the image comprehensively, delving into its details.",
    "Illustrate the image through a descriptive explanation.",
    "Examine the image closely and articulate its intricate details.",
    "Craft an exhaustive depiction of the given image.",
]


class FixedGenerator:
    def __init__(self, rounds):
        self.rounds = rounds
        self.prompts = []

    def generate(self, prompt):
        self.prompts.append(prompt)
        return list(self.rounds)


class TestAssets:
    def test_rulebook(self):
        book = load_rulebook()
        assert book.healthy.text.startswith("Normal, Healthy")
        assert HEALTHY not in book.disease_names
        assert "Severe Diabetic Macular Edema" in book.disease_names

    def test_duplicate_disease_resolves_to_first_rule(self):
        book = load_rulebook()
        rule = book.by_name["Hypertensive Retinopathy"]
        assert rule.number == 7
        assert rule.clause == "Abnormal arterial vein ratio, Abnormal fundus color"

    def test_unknown_disease(self):
        with pytest.raises(RuleLookupError) as info:
            load_rulebook().lookup(["Myopia", "Dragon Pox"])
        assert info.value.names == ["Dragon Pox"]

    def test_instruction_pools(self):
        pools = load_instructions()
        assert len(pools["short"]) == 10 and len(pools["long"]) == 10

    def test_instruction_texts(self):
        pools = load_instructions()
        assert [t.text for t in pools["short"]] == SHORT_INSTRUCTIONS
        assert [t.text for t in pools["long"]] == LONG_INSTRUCTIONS
        assert {t.kind for t in pools["short"]} == {"short"}

    def test_dialogue_prompt_has_keyword_slot(self):
        assert load_dialogue_prompt().count("[Keyword]") == 1


class TestDescriptions:
    def test_single_disease(self):
        text = build_description([MILD_NPDR])
        assert text == "Abnormal, Mild Non-Proliferative Diabetic Retinopathy, Only microaneurysms observed."

    def test_healthy(self):
        assert build_description([], abnormal=False).startswith("Normal, Healthy, Normal optic disk color")

    @pytest.mark.parametrize(
        "diseases",
        [
            [MILD_NPDR],
            ["Cataract", "Myopia"],
            ["Myopia", "Cataract", "Drusen"],
            ["Severe Diabetic Macular Edema"],
        ],
    )
    def test_parse_recovers_diseases_in_order(self, diseases):
        parsed = parse_description(build_description(diseases))
        assert parsed.abnormal
        assert list(parsed.diseases) == diseases

    def test_parse_healthy(self):
        parsed = parse_description(build_description([], abnormal=False))
        assert not parsed.abnormal and parsed.diseases == ()

    def test_contradictions_are_rejected(self):
        with pytest.raises(ContractError):
            build_description([], abnormal=True)
        with pytest.raises(ContractError):
            build_description([HEALTHY, "Myopia"])
        with pytest.raises(RuleLookupError):
            build_description(["Dragon Pox"])

    def test_malformed_description(self):
        with pytest.raises(ValidationError):
            parse_description("Abnormal, something we never wrote.")
        with pytest.raises(ValidationError):
            parse_description("Looks fine")


class TestSigns:
    def test_union_of_disease_signs(self):
        assert derive_signs(["Severe Diabetic Macular Edema"]) == [0, 1, 0, 0, 1, 0]

    def test_no_disease_sets_other(self):
        assert derive_signs([]) == [0, 0, 0, 0, 0, 1]
        assert derive_signs([HEALTHY]) == [0, 0, 0, 0, 0, 1]

    def test_unknown_disease(self):
        with pytest.raises(RuleLookupError):
            derive_signs(["Dragon Pox"])


class TestImaging:
    def test_ppm_round_trip_is_quantised(self, tmp_path, rng):
        img = rng.uniform(size=(8, 8, 3))
        back = read_image(write_image(tmp_path / "x.ppm", img))
        assert back.shape == (8, 8, 3)
        assert_allclose(back, img, atol=0.5 / 255 + 1e-12)

    def test_npy_round_trip_is_exact(self, tmp_path, rng):
        img = rng.uniform(size=(8, 8, 3))
        assert_array_equal(read_image(write_image(tmp_path / "x.npy", img)), img)

    def test_synthetic_fundus_is_deterministic_and_sign_dependent(self):
        a = synth_fundus_image([1, 0, 0, 0, 0, 0], 16, seed=3)
        assert_array_equal(a, synth_fundus_image([1, 0, 0, 0, 0, 0], 16, seed=3))
        assert not np.array_equal(a, synth_fundus_image([0, 0, 0, 0, 1, 0], 16, seed=3))
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_synthetic_fundus_minimum_size(self):
        with pytest.raises(ContractError):
            synth_fundus_image([0] * 6, 4)


class TestDialogues:
    def test_template_generator_covers_every_disease(self):
        description = build_description(["Cataract", "Myopia"])
        rounds = build_dialogue(description, TemplateDialogueGenerator())
        assert len(rounds) == 3
        assert "Cataract" in rounds[0].answer and "Myopia" in rounds[0].answer
        assert rounds[0].answer.startswith("Abnormal")

    def test_wrong_round_count_is_a_generator_error(self, short_rounds):
        with pytest.raises(GeneratorError):
            build_dialogue(build_description(["Myopia"]), FixedGenerator(short_rounds[:2]))

    def test_long_answers_are_truncated(self, short_rounds):
        rounds = [DialogueRound("Q?", " ".join(["word"] * 250))] + short_rounds[1:]
        trimmed = build_dialogue(build_description(["Myopia"]), FixedGenerator(rounds), max_answer_words=200)
        assert len(trimmed[0].answer.split()) == 200

    def test_prompt_carries_the_description(self, short_rounds):
        generator = FixedGenerator(short_rounds)
        description = build_description(["Myopia"])
        build_dialogue(description, generator)
        assert description in generator.prompts[0]

    def test_instruction_length_rule(self):
        assert select_instruction("short answer", 0).kind == "short"
        assert select_instruction(" ".join(["w"] * 30), 0).kind == "long"
        assert select_instruction("a b", 5) == select_instruction("a b", 5)


class TestValidation:
    def _record(self, **changes):
        description = build_description(["Myopia"])
        record = FundusRecord(
            record_id="r1",
            image="images/r1.ppm",
            diseases=["Myopia"],
            abnormal=True,
            signs=derive_signs(["Myopia"]),
            description=description,
            dialogue=[DialogueRound("Q?", "A.")] * 3,
        )
        return dataclasses.replace(record, **changes)

    def test_valid_record(self):
        assert validate_record(self._record()) == []

    def test_each_violation_kind(self):
        assert validate_record(self._record(dialogue=[]))[0].kind == "round-count"
        assert validate_record(self._record(signs=[1, 0, 0, 0, 0, 0]))[0].kind == "sign-mismatch"
        assert validate_record(self._record(description="Maybe Myopia."))[0].kind == "description-prefix"
        assert validate_record(self._record(diseases=["Cataract"]))[0].kind == "description-diseases"
        long_round = [DialogueRound("Q?", "x" * 600)] * 3
        assert {v.kind for v in validate_record(self._record(dialogue=long_round))} == {"token-length"}

    def test_corpus_report(self):
        report = validate_corpus([self._record(), self._record(record_id="r2", dialogue=[])])
        assert not report.ok
        assert report.invalid_ids() == {"r2"}
        assert "round-count=1" in report.summary()


class TestCorpus:
    def test_disease_sets_are_seeded(self):
        assert sample_disease_sets(20, 4) == sample_disease_sets(20, 4)
        sets = sample_disease_sets(50, 4, max_diseases=2, healthy_fraction=0.0)
        assert all(1 <= len(s) <= 2 for s in sets)

    def test_forge_fundus_corpus(self, tmp_path, forge_settings):
        records = forge_fundus_corpus(tmp_path, forge_settings, seed=5, generator=TemplateDialogueGenerator())
        assert [r.record_id for r in records] == [f"rec-{i:05d}" for i in range(4)]
        assert validate_corpus(records).ok
        for record in records:
            assert read_image(tmp_path / record.image).shape == (8, 8, 3)

    def test_forge_is_reproducible_with_threads(self, tmp_path, forge_settings):
        serial = forge_fundus_corpus(tmp_path / "a", forge_settings, 9, TemplateDialogueGenerator())
        threaded = forge_fundus_corpus(
            tmp_path / "b", dataclasses.replace(forge_settings, workers=3), 9, TemplateDialogueGenerator()
        )
        assert [r.to_dict() for r in serial] == [r.to_dict() for r in threaded]

    def test_jsonl_round_trip(self, tmp_path, forge_settings):
        records = forge_fundus_corpus(tmp_path, forge_settings, 1, TemplateDialogueGenerator())
        path = tmp_path / "corpus.jsonl"
        assert write_corpus(path, records) == len(records)
        assert read_fundus_corpus(path) == records
        assert corpus_kind(path) == "fundus"

    def test_pretrain_corpus(self, tmp_path):
        pairs = [
            PretrainPair("a.ppm", "Yellow arrow on drusen.", Modality.FUNDUS, 0.9),
            PretrainPair("b.ppm", "A table.", Modality.TABLE_CHART, 0.9),
            PretrainPair("c.ppm", "Low confidence.", Modality.FUNDUS, 0.1),
        ]
        samples = forge_pretrain_corpus(pairs, seed=0, modality_threshold=0.5)
        assert len(samples) == 1
        assert samples[0].answer == "This is a Fundus image. on drusen."
        assert samples[0].question in [t.text for t in load_instructions()["short"]]

        path = tmp_path / "pretrain.jsonl"
        write_corpus(path, samples)
        assert read_pretrain_corpus(path) == samples
        assert corpus_kind(path) == "pretrain"

    def test_synth_pretrain_pairs_follow_records(self, tmp_path, forge_settings):
        records = forge_fundus_corpus(tmp_path, forge_settings, 2, TemplateDialogueGenerator())
        pairs = synth_pretrain_pairs(records, seed=2)
        assert [p.image_ref for p in pairs] == [r.image for r in records]
        assert all(0.5 <= p.confidence <= 1.0 for p in pairs)

    def test_ordered_map_keeps_order(self):
        assert ordered_map(lambda x: x * x, list(range(20)), workers=4) == [x * x for x in range(20)]

    def test_negative_record_count(self, tmp_path, forge_settings):
        with pytest.raises(ContractError):
            forge_fundus_corpus(tmp_path, dataclasses.replace(forge_settings, records=-1), 0, TemplateDialogueGenerator())


def test_caption_dialogue_from_dict_defaults_modality():
    row = {"id": "p", "image": "x.ppm", "question": "q", "answer": "a"}
    assert CaptionDialogue.from_dict(row).modality == "Fundus"
