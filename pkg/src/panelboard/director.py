"""Story decomposition into one reference prompt and ``n`` scene prompts.

A language model does the decomposition. Live calls go to a chat-completion
endpoint; fixture mode replays recorded replies keyed by a hash of the story,
which keeps tests and demos offline and deterministic.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Protocol

logger = logging.getLogger(__name__)

DEFAULT_TOKEN_ENV = "PANELBOARD_LLM_TOKEN"
DEFAULT_ENDPOINT_ENV = "PANELBOARD_LLM_ENDPOINT"
MAX_RETRIES = 2

_NUMBER_WORDS = {
    1: "one", 2: "two", 3: "three", 4: "four", 5: "five", 6: "six",
    7: "seven", 8: "eight", 9: "nine", 10: "ten", 11: "eleven", 12: "twelve",
}

INSTRUCTION_TEMPLATE = """\
You are a storyboard designer helping to create cinematic, visually expressive storyboards. Your task is to:

(1) Read the story below.

(2) Keep not only the memorable character, but also the richly described background elements that evolve across scenes, such as weather, lighting, ruins, architecture, mountains, oceans, caves, temples, streets, or crowds. Do not focus only on the character.

(3) Break down the story into {count_word} distinct storyboard scene descriptions. Each should describe one key visual moment--something worth illustrating in a single panel. Replace names with a description of the character (e.g. instead of "Tom went to the store", say "A man went to the store").

Return:

- The full story, after the line "Story:"

- A list of {count} storyboard panel prompts that visually represent the story, after the line "Storyboard panel prompts:", formatted as a numbered list with one item per panel ("1. ...", "2. ...").

Story:
{story}
"""


class DirectorError(Exception):
    pass


class DirectorTransportError(DirectorError):
    """The completion service could not be reached or answered with an error."""


class DirectorFormatError(DirectorError):
    def __init__(self, message: str, raw_reply: str):
        super().__init__(message)
        self.raw_reply = raw_reply


class DirectorConfigError(DirectorError):
    pass


@dataclass
class Decomposition:
    reference_prompt: str
    scene_prompts: list[str]
    source: str = "fixture"  # "live" or "fixture"
    story: str = ""

    def __post_init__(self):
        if not self.scene_prompts:
            raise ValueError("decomposition needs at least one scene prompt")
        if not self.reference_prompt.strip():
            raise ValueError("decomposition has an empty reference prompt")

    @property
    def n(self) -> int:
        return len(self.scene_prompts)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_spec_dict(self, story_id: str, seed: int = 0) -> dict:
        """Shape accepted by ``StoryboardSpec.from_dict``."""
        return {
            "story_id": story_id,
            "reference_prompt": self.reference_prompt,
            "scene_prompts": list(self.scene_prompts),
            "seed": seed,
        }


class CompletionClient(Protocol):
    source: str

    def complete(self, prompt: str, *, key: str) -> str: ...


def story_hash(story: str) -> str:
    return hashlib.sha256(story.strip().encode("utf-8")).hexdigest()[:16]


def build_instruction(story: str, n: int) -> str:
    return INSTRUCTION_TEMPLATE.format(
        count=n, count_word=_NUMBER_WORDS.get(n, str(n)), story=story.strip()
    )


class ChatCompletionClient:
    """Minimal JSON chat-completion client (OpenAI-style request/response).

    The bearer token is read from an environment variable at construction.
    """

    source = "live"

    def __init__(
        self,
        endpoint: Optional[str] = None,
        model: str = "gpt-4o",
        token_env: str = DEFAULT_TOKEN_ENV,
        timeout: float = 60.0,
        record_dir=None,
    ):
        self.endpoint = endpoint or os.environ.get(DEFAULT_ENDPOINT_ENV)
        if not self.endpoint:
            raise DirectorConfigError(f"no endpoint given and {DEFAULT_ENDPOINT_ENV} is unset")
        self.token = os.environ.get(token_env)
        if not self.token:
            raise DirectorConfigError(f"environment variable {token_env} is not set")
        self.model = model
        self.timeout = timeout
        self.record_dir = Path(record_dir) if record_dir else None

    def complete(self, prompt: str, *, key: str) -> str:
        body = json.dumps(
            {"model": self.model, "messages": [{"role": "user", "content": prompt}]}
        ).encode("utf-8")
        req = urllib.request.Request(
            self.endpoint,
            data=body,
            headers={"Content-Type": "application/json", "Authorization": f"Bearer {self.token}"},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise DirectorTransportError(f"request to {self.endpoint} failed: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DirectorTransportError(f"non-JSON response from {self.endpoint}") from exc
        try:
            reply = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise DirectorTransportError(f"unexpected response shape: {payload!r:.200}") from exc
        if self.record_dir is not None:
            FixtureClient(self.record_dir).record(key, prompt, reply)
        return reply


class FixtureClient:
    """Replays recorded replies stored as ``<story hash>.json`` files."""

    source = "fixture"

    def __init__(self, directory):
        self.directory = Path(directory)

    def path_for(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def complete(self, prompt: str, *, key: str) -> str:
        path = self.path_for(key)
        if not path.exists():
            raise DirectorConfigError(f"no fixture transcript for story {key} in {self.directory}")
        return json.loads(path.read_text())["reply"]

    def record(self, key: str, prompt: str, reply: str, story: str = "") -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.path_for(key)
        data = {"story_hash": key, "prompt": prompt, "reply": reply}
        if story:
            data["story"] = story
        path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n")
        return path


_ITEM = re.compile(r"^\s*(\d+)[.)]\s+(.*\S)\s*$")
_PANEL_HEADER = re.compile(r"panel prompts?\s*:?\s*$", re.IGNORECASE)
_REFERENCE = re.compile(r"^\s*\**reference(?: prompt)?\**\s*:\s*(.+\S)\s*$", re.IGNORECASE)


def parse_reply(reply: str) -> tuple[list[str], Optional[str]]:
    """Numbered list items (joined across wrapped lines) and an optional
    explicit ``Reference:`` line.

    When a "panel prompts" header exists, only items after it count, so a
    story that itself contains numbered lines is not mistaken for panels.
    """
    lines = reply.splitlines()
    reference = None
    for line in lines:
        m = _REFERENCE.match(line)
        if m:
            reference = m.group(1)
    start = 0
    for i, line in enumerate(lines):
        if _PANEL_HEADER.search(line.strip().strip("*")):
            start = i + 1
    items: list[str] = []
    open_item = False
    for line in lines[start:]:
        m = _ITEM.match(line)
        if m:
            items.append(m.group(2))
            open_item = True
        elif open_item and line.strip() and line[:1].isspace():
            items[-1] += " " + line.strip()
        elif line.strip():
            open_item = False
    return [re.sub(r"\s+", " ", it).strip() for it in items], reference


def common_reference(prompts: list[str]) -> str:
    """Longest word-level common prefix of the prompts.

    Falls back to the first prompt when the prompts share no leading words.
    """
    words = [p.split() for p in prompts]
    prefix = []
    for column in zip(*words):
        if any(w != column[0] for w in column):
            break
        prefix.append(column[0])
    ref = " ".join(prefix).rstrip(",;:")
    return ref or prompts[0]


def decompose(
    story: str,
    n: int,
    client: CompletionClient,
    reference_prompt: Optional[str] = None,
) -> Decomposition:
    """Ask the language model for ``n`` scene prompts and derive the reference.

    Replies with the wrong item count are retried up to ``MAX_RETRIES`` times
    before a ``DirectorFormatError`` carrying the last raw reply is raised.
    """
    if not story or not story.strip():
        raise ValueError("story is empty")
    if n < 1:
        raise ValueError("n must be >= 1")
    prompt = build_instruction(story, n)
    key = story_hash(story)
    reply = ""
    for attempt in range(MAX_RETRIES + 1):
        reply = client.complete(prompt, key=key)
        items, explicit_ref = parse_reply(reply)
        if len(items) == n:
            ref = reference_prompt or explicit_ref or common_reference(items)
            return Decomposition(ref, items, source=client.source, story=story.strip())
        logger.warning("reply %d had %d panel items, expected %d", attempt + 1, len(items), n)
    raise DirectorFormatError(f"expected {n} panel prompts after {MAX_RETRIES + 1} attempts", reply)


# Capitalised words that routinely start a sentence without being names.
_SENTENCE_STARTERS = {
    "a", "an", "the", "this", "that", "these", "those", "his", "her", "their", "its",
    "our", "my", "your", "he", "she", "they", "it", "we", "i", "you", "one", "two",
    "three", "some", "many", "several", "each", "every", "in", "on", "at", "as",
    "under", "over", "beneath", "beside", "inside", "outside", "through", "across",
    "from", "with", "after", "before", "during", "when", "while", "later", "then",
    "now", "there", "here", "close", "wide", "aerial", "silhouetted", "alone",
    "high", "low", "far", "near", "by", "into", "onto", "atop", "above", "below",
}
_WORD = re.compile(r"[A-Za-z][A-Za-z'\-]*")


def _proper_names(prompt: str) -> list[str]:
    found = []
    for sentence in re.split(r"(?<=[.!?])\s+", prompt.strip()):
        for i, m in enumerate(_WORD.finditer(sentence)):
            word = m.group(0)
            if not word[0].isupper() or word == "I":
                continue
            if i == 0 and word.lower() in _SENTENCE_STARTERS:
                continue
            found.append(word)
    return found


def validate_decomposition(d: Decomposition) -> list[str]:
    """Warnings for empty prompts, likely proper names and duplicate scenes."""
    warnings = []
    if not d.reference_prompt.strip():
        warnings.append("reference prompt is empty")
    seen: dict[str, int] = {}
    for i, p in enumerate(d.scene_prompts):
        if not p.strip():
            warnings.append(f"scene {i}: empty prompt")
            continue
        names = _proper_names(p)
        if names:
            warnings.append(f"scene {i}: possible proper name(s) {', '.join(names)}")
        key = " ".join(p.lower().split())
        if key in seen:
            warnings.append(f"scene {i}: duplicates scene {seen[key]}")
        else:
            seen[key] = i
    return warnings
