import json
from pathlib import Path

import pytest

from panelboard import director
from panelboard.director import (
    ChatCompletionClient,
    Decomposition,
    DirectorConfigError,
    DirectorFormatError,
    DirectorTransportError,
    FixtureClient,
    build_instruction,
    common_reference,
    decompose,
    parse_reply,
    story_hash,
    validate_decomposition,
)
from panelboard.benchmark import load_benchmark, sample_benchmark_path

DATA = Path(director.__file__).parent / "data"
SAILOR = (DATA / "stories" / "sailor.txt").read_text()


class ScriptedClient:
    source = "fixture"

    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = 0

    def complete(self, prompt, *, key):
        self.calls += 1
        return self.replies[min(self.calls - 1, len(self.replies) - 1)]


def numbered(prompts):
    return "Storyboard panel prompts:\n" + "\n".join(f"{i + 1}. {p}" for i, p in enumerate(prompts))


def test_sailor_fixture_decomposes_to_benchmark_prompts():
    d = decompose(SAILOR, 7, FixtureClient(DATA / "director"))
    assert d.n == 7
    assert d.scene_prompts[0].startswith("A lone sailor in a wool cap and dark coat standing calmly")
    assert d.scene_prompts == load_benchmark(sample_benchmark_path())[0].panel_prompts
    assert d.reference_prompt == "A lone sailor in a wool cap and dark coat"
    assert d.source == "fixture"


def test_wrapped_item_is_joined():
    d = decompose(SAILOR, 7, FixtureClient(DATA / "director"))
    assert d.scene_prompts[3].endswith("massive arch of stone rising from the water")


def test_decompose_deterministic():
    c = FixtureClient(DATA / "director")
    assert decompose(SAILOR, 7, c) == decompose(SAILOR, 7, c)


def test_explicit_reference_wins():
    c = ScriptedClient(["Reference: a red fox\n" + numbered(["a fox runs", "a fox sits"])])
    assert decompose("story", 2, c).reference_prompt == "a red fox"
    assert decompose("story", 2, c, reference_prompt="a tiny fox").reference_prompt == "a tiny fox"


def test_wrong_count_retries_then_fails():
    bad = numbered(["one", "two"])
    c = ScriptedClient([bad])
    with pytest.raises(DirectorFormatError) as info:
        decompose("story", 3, c)
    assert c.calls == director.MAX_RETRIES + 1
    assert info.value.raw_reply == bad


def test_retry_recovers():
    c = ScriptedClient([numbered(["one"]), numbered(["a", "b"])])
    assert decompose("story", 2, c).scene_prompts == ["a", "b"]
    assert c.calls == 2


def test_single_panel():
    d = decompose("story", 1, ScriptedClient([numbered(["a cat on a roof"])]))
    assert d.scene_prompts == ["a cat on a roof"]
    assert d.reference_prompt == "a cat on a roof"


def test_parse_reply_ignores_story_numbers():
    reply = "Story:\n1. not an item\n\nStoryboard panel prompts:\n1) first\n2) second\nThanks!"
    items, ref = parse_reply(reply)
    assert items == ["first", "second"] and ref is None


def test_common_reference():
    assert common_reference(["a man in a hat runs", "a man in a hat sits"]) == "a man in a hat"
    assert common_reference(["dog", "cat"]) == "dog"


def test_instruction_mentions_count():
    text = build_instruction("Once upon a time.", 7)
    assert "seven" in text and "Once upon a time." in text


def test_story_hash_stable():
    assert story_hash(SAILOR) == "8c39757bbc105dd8"
    assert story_hash("  x \n") == story_hash("x")


def test_validation_flags_names_and_duplicates():
    d = Decomposition("a man", ["Tom went to the store", "a man walks", "a man walks"])
    warnings = validate_decomposition(d)
    assert any("Tom" in w for w in warnings)
    assert any("duplicates scene 1" in w for w in warnings)


def test_sailor_has_no_warnings():
    d = decompose(SAILOR, 7, FixtureClient(DATA / "director"))
    assert validate_decomposition(d) == []


def test_live_client_requires_token(monkeypatch):
    monkeypatch.delenv(director.DEFAULT_TOKEN_ENV, raising=False)
    with pytest.raises(DirectorConfigError):
        ChatCompletionClient(endpoint="http://127.0.0.1:9/v1/chat")


def test_live_client_transport_error(monkeypatch):
    monkeypatch.setenv(director.DEFAULT_TOKEN_ENV, "t")
    client = ChatCompletionClient(endpoint="http://127.0.0.1:9/v1/chat", timeout=2)
    with pytest.raises(DirectorTransportError):
        client.complete("hi", key="k")


def test_fixture_missing_key(tmp_path):
    with pytest.raises(DirectorConfigError):
        FixtureClient(tmp_path).complete("p", key="nope")


def test_fixture_record_roundtrip(tmp_path):
    c = FixtureClient(tmp_path)
    c.record("abc", "prompt", numbered(["x", "y"]), story="s")
    assert json.loads((tmp_path / "abc.json").read_text())["story_hash"] == "abc"
    assert parse_reply(c.complete("prompt", key="abc"))[0] == ["x", "y"]
