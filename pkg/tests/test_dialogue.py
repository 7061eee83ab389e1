import pytest
import requests

from fundus_vlm_cli.descriptions import build_description
from fundus_vlm_cli.dialogue import (
    DialogueRound,
    RemoteDialogueGenerator,
    TemplateDialogueGenerator,
    create_dialogue_app,
    extract_keyword,
    parse_rounds,
    render_prompt,
    truncate_words,
    words_ok,
)
from fundus_vlm_cli.errors import GeneratorError, ValidationError

ROUNDS_PAYLOAD = {"rounds": [{"question": f"Q{i}?", "answer": f"A{i}."} for i in range(3)]}


class FakeResponse:
    def __init__(self, payload, status=200):
        self.payload = payload
        self.status_code = status

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.HTTPError(f"{self.status_code} error")

    def json(self):
        return self.payload


class FakeSession:
    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = []

    def post(self, url, json=None, timeout=None):
        self.calls.append((url, json, timeout))
        outcome = self.responses.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


def test_prompt_round_trip():
    description = build_description(["Glaucoma"])
    prompt = render_prompt(description)
    assert "[Keyword]" not in prompt
    assert extract_keyword(prompt) == description


def test_extract_keyword_rejects_foreign_prompt():
    with pytest.raises(ValidationError):
        extract_keyword("Tell me a story.")


def test_parse_rounds():
    rounds = parse_rounds(ROUNDS_PAYLOAD)
    assert rounds[2] == DialogueRound("Q2?", "A2.")
    with pytest.raises(ValidationError):
        parse_rounds({"rounds": ROUNDS_PAYLOAD["rounds"][:2]})
    with pytest.raises(ValidationError):
        parse_rounds({"rounds": [{"question": "q"}] * 3})


def test_truncate_words():
    assert truncate_words("a b c d", 2) == "a b"
    assert truncate_words("a  b", 5) == "a  b"


def test_template_generator_for_healthy_image():
    rounds = TemplateDialogueGenerator().generate(render_prompt(build_description([], abnormal=False)))
    assert rounds[0].answer.startswith("Normal")
    assert words_ok(rounds)


class TestRemoteGenerator:
    def test_success(self):
        session = FakeSession([FakeResponse(ROUNDS_PAYLOAD)])
        rounds = RemoteDialogueGenerator("http://gen/dialogue", timeout=5, session=session).generate("prompt")
        assert len(rounds) == 3
        assert session.calls == [("http://gen/dialogue", {"prompt": "prompt"}, 5)]

    def test_retries_once(self):
        session = FakeSession([requests.ConnectionError("down"), FakeResponse(ROUNDS_PAYLOAD)])
        assert len(RemoteDialogueGenerator("http://gen", session=session).generate("p")) == 3
        assert len(session.calls) == 2

    def test_second_failure_is_a_generator_error(self):
        session = FakeSession([FakeResponse({}, status=500), FakeResponse({"rounds": []})])
        with pytest.raises(GeneratorError):
            RemoteDialogueGenerator("http://gen", session=session).generate("p")
        assert len(session.calls) == 2


class TestDialogueService:
    @pytest.fixture
    def client(self):
        return create_dialogue_app().test_client()

    def test_health(self, client):
        assert client.get("/health").get_json() == {"status": "ok"}

    def test_dialogue(self, client):
        prompt = render_prompt(build_description(["Myopia"]))
        response = client.post("/dialogue", json={"prompt": prompt})
        assert response.status_code == 200
        assert len(parse_rounds(response.get_json())) == 3

    def test_missing_prompt(self, client):
        assert client.post("/dialogue", json={}).status_code == 400

    def test_unparseable_description(self, client):
        response = client.post("/dialogue", json={"prompt": "no template here"})
        assert response.status_code == 422

    def test_generator_failure(self):
        class Broken:
            def generate(self, prompt):
                raise GeneratorError("upstream down")

        client = create_dialogue_app(Broken()).test_client()
        assert client.post("/dialogue", json={"prompt": "x"}).status_code == 502
