"""Tumor phenotype extraction from free-text reports.

Three interchangeable backends produce a TumorPhenotype (involved lobes plus
malignant lymph stations): a deterministic rule extractor, a chat-completion
client speaking the standard JSON wire protocol, and a mock that replays
canned responses keyed by report hash through the same parsing path.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Literal, Mapping, Protocol

import httpx

from .lobes import LobeId, find_lobe_mentions

API_KEY_ENV = "EXACT_API_KEY"

MALIGNANCY_TERMS = ("tumor", "carcinoma", "malignancy", "malignant")
INDETERMINACY_MARKERS = ("indeterminate", "benign")
HISTORY_MARKERS = ("history", "previously", "prior", "treated in")

LOBE_PROMPT = (
    "find the current lung lobe that the determinate tumor/carcinoma/malignancy "
    "is involving in this report:"
)
LYMPH_PROMPT = "find out what lymph station/node are malignant in this report:"
LOBE_OPTIONS = (
    "right upper lobe (RUL), right middle lobe (RML), right lower lobe (RLL), "
    "left upper lobe (LUL), left lower lobe (LLL)"
)

PromptKind = Literal["lobe", "lymph"]

_SENTENCE_SPLIT = re.compile(r"[.!?;\n]+")
_STATION_WORD = re.compile(r"\b(?:station|node)s?\b", re.IGNORECASE)
_STATION_CODE = re.compile(r"\b(\d{1,2}\s?[RL]?)\b", re.IGNORECASE)
_NONE_MARKERS = (
    "none",
    "unknown",
    "n/a",
    "not specified",
    "not mentioned",
    "cannot determine",
    "no lobe",
    "unclear",
)


class ExtractionError(Exception):
    """Base class for phenotype extraction failures."""


class UnparseableResponseError(ExtractionError):
    """The response asserts nothing recognizable (empty or a none-style answer)."""


class InvalidOptionError(ExtractionError):
    """The response names a location that is not among the lobe options."""


class TransportError(ExtractionError):
    """The chat endpoint could not be reached or answered malformed data."""


class EmptyPhenotypeError(ExtractionError):
    """Extraction produced an empty lobe set; guided filtering fails closed."""


@dataclass(frozen=True)
class TumorPhenotype:
    """Current determinate tumor locations extracted from one report."""

    lobes: frozenset[LobeId] = frozenset()
    lymph_stations: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "lobes", frozenset(LobeId(l) for l in self.lobes))
        object.__setattr__(
            self, "lymph_stations", frozenset(str(s) for s in self.lymph_stations)
        )

    def to_json_dict(self) -> dict:
        return {
            "lobes": [l.name for l in sorted(self.lobes)],
            "lymph_stations": sorted(self.lymph_stations, key=_station_sort_key),
        }


def _station_sort_key(code: str) -> tuple[int, str]:
    digits = "".join(ch for ch in code if ch.isdigit())
    return (int(digits) if digits else 0, code)


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_SPLIT.split(text) if s.strip()]


def normalize_station(code: str) -> str:
    return code.replace(" ", "").upper()


def _station_codes(sentence: str) -> set[str]:
    if not _STATION_WORD.search(sentence):
        return set()
    return {normalize_station(m.group(1)) for m in _STATION_CODE.finditer(sentence)}


def rule_extract(report: str) -> TumorPhenotype:
    """Deterministic sentence-rule extraction.

    A lobe counts when a sentence names it, carries a malignancy term, and has
    no indeterminacy or history marker. Malignant lymph stations come from
    sentences containing "malignant" and a station code near station/node.
    """
    lobes: set[LobeId] = set()
    stations: set[str] = set()
    for sentence in split_sentences(report):
        low = sentence.lower()
        if "malignant" in low:
            stations |= _station_codes(sentence)
        mentioned = find_lobe_mentions(sentence)
        if not mentioned:
            continue
        if not any(term in low for term in MALIGNANCY_TERMS):
            continue
        if any(marker in low for marker in INDETERMINACY_MARKERS):
            continue
        if any(marker in low for marker in HISTORY_MARKERS):
            continue
        lobes |= mentioned
    return TumorPhenotype(lobes=frozenset(lobes), lymph_stations=frozenset(stations))


@dataclass(frozen=True)
class PromptTemplate:
    """Prompt strings and decoding settings for the chat backend."""

    assistant_context: str = LOBE_OPTIONS
    user_prompt_lobe: str = LOBE_PROMPT
    user_prompt_lymph: str = LYMPH_PROMPT
    temperature: float = 0.0
    model_id: str = "gpt-3.5-turbo"


@dataclass(frozen=True)
class ChatMessage:
    role: Literal["system", "assistant", "user"]
    content: str


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    temperature: float
    messages: tuple[ChatMessage, ...]

    def wire_payload(self) -> dict:
        # An integral temperature is rendered as an int so 0.0 serializes as 0.
        temp = self.temperature
        if float(temp).is_integer():
            temp = int(temp)
        return {
            "model": self.model_id,
            "temperature": temp,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
        }

    def to_json_bytes(self) -> bytes:
        return (json.dumps(self.wire_payload(), indent=2, ensure_ascii=False) + "\n").encode(
            "utf-8"
        )


@dataclass(frozen=True)
class ChatResponse:
    content: str


def build_chat_request(
    report: str, kind: PromptKind, tpl: PromptTemplate = PromptTemplate()
) -> ChatRequest:
    """Assemble the chat request for one prompt kind; exactly one user message."""
    if not report.strip():
        raise ValueError("report text is empty")
    if kind == "lobe":
        messages = (
            ChatMessage("assistant", tpl.assistant_context),
            ChatMessage("user", tpl.user_prompt_lobe + "\n" + report),
        )
    elif kind == "lymph":
        messages = (ChatMessage("user", tpl.user_prompt_lymph + report),)
    else:
        raise ValueError(f"unknown prompt kind {kind!r}")
    return ChatRequest(
        model_id=tpl.model_id, temperature=tpl.temperature, messages=messages
    )


def parse_phenotype_response(
    content: str, kind: PromptKind
) -> frozenset[LobeId] | frozenset[str]:
    """Parse one chat answer into the corresponding phenotype component.

    Lobe kind: every recognizable lobe mention counts. An empty or none-style
    answer raises UnparseableResponseError; a non-empty answer naming no valid
    option raises InvalidOptionError. Lymph kind: station codes are extracted
    and uppercased; an answer without codes is an empty set.
    """
    if kind == "lymph":
        return frozenset(
            normalize_station(m.group(1)) for m in _STATION_CODE.finditer(content)
        )
    if kind != "lobe":
        raise ValueError(f"unknown prompt kind {kind!r}")
    lobes = find_lobe_mentions(content)
    if lobes:
        return frozenset(lobes)
    stripped = re.sub(r"[^a-z0-9/ ]", " ", content.lower()).strip()
    if not stripped or any(marker in stripped for marker in _NONE_MARKERS):
        raise UnparseableResponseError(f"no recognizable lobe in response {content!r}")
    raise InvalidOptionError(
        f"response names a location outside the lobe options: {content!r}"
    )


class PhenotypeBackend(Protocol):
    def extract(self, report: str) -> TumorPhenotype: ...


class RuleBasedBackend:
    """Runs the deterministic sentence rules; no external calls."""

    def extract(self, report: str) -> TumorPhenotype:
        return rule_extract(report)


def report_sha256(report: str) -> str:
    return hashlib.sha256(report.encode("utf-8")).hexdigest()


class MockBackend:
    """Replays canned response contents keyed by report SHA-256.

    Fixture values are {"lobe": <content>, "lymph": <content>} objects; the
    contents run through the same parsing path as live chat answers.
    """

    def __init__(self, fixtures: Mapping[str, Mapping[str, str]]):
        self.fixtures = dict(fixtures)

    @classmethod
    def from_file(cls, path) -> "MockBackend":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))

    def _response(self, report: str, kind: PromptKind) -> ChatResponse:
        key = report_sha256(report)
        entry = self.fixtures.get(key)
        if entry is None or kind not in entry:
            raise TransportError(f"no mock fixture for report hash {key} kind {kind}")
        return ChatResponse(content=entry[kind])

    def extract(self, report: str) -> TumorPhenotype:
        lobes = parse_phenotype_response(self._response(report, "lobe").content, "lobe")
        stations = parse_phenotype_response(
            self._response(report, "lymph").content, "lymph"
        )
        return TumorPhenotype(lobes=lobes, lymph_stations=stations)


@dataclass
class ChatBackend:
    """POSTs chat requests to an OpenAI-style endpoint and parses the answers.

    The bearer token is read from the EXACT_API_KEY environment variable.
    Transport failures retry up to 3 attempts with exponential backoff
    starting at 1 s before raising TransportError.
    """

    endpoint: str
    template: PromptTemplate = PromptTemplate()
    timeout: float = 30.0
    max_attempts: int = 3
    backoff_start: float = 1.0
    client: httpx.Client | None = None
    sleep: Callable[[float], None] = field(default=time.sleep)

    def _post(self, request: ChatRequest) -> ChatResponse:
        key = os.environ.get(API_KEY_ENV)
        if not key:
            raise TransportError(f"{API_KEY_ENV} is not set")
        headers = {"Authorization": f"Bearer {key}"}
        payload = request.wire_payload()
        client = self.client or httpx.Client(timeout=self.timeout)
        owned = self.client is None
        try:
            delay = self.backoff_start
            last_error: Exception | None = None
            for attempt in range(self.max_attempts):
                if attempt:
                    self.sleep(delay)
                    delay *= 2.0
                try:
                    resp = client.post(self.endpoint, json=payload, headers=headers)
                    resp.raise_for_status()
                    body = resp.json()
                    return ChatResponse(content=body["choices"][0]["message"]["content"])
                except (httpx.HTTPError, KeyError, IndexError, ValueError) as err:
                    last_error = err
            raise TransportError(
                f"chat endpoint failed after {self.max_attempts} attempts: {last_error}"
            )
        finally:
            if owned:
                client.close()

    def extract(self, report: str) -> TumorPhenotype:
        lobe_req = build_chat_request(report, "lobe", self.template)
        lymph_req = build_chat_request(report, "lymph", self.template)
        lobes = parse_phenotype_response(self._post(lobe_req).content, "lobe")
        stations = parse_phenotype_response(self._post(lymph_req).content, "lymph")
        return TumorPhenotype(lobes=lobes, lymph_stations=stations)


def extract_phenotype(report: str, backend: PhenotypeBackend) -> TumorPhenotype:
    """Run one backend and fail closed on an empty lobe set."""
    phenotype = backend.extract(report)
    if not phenotype.lobes:
        raise EmptyPhenotypeError("extraction produced no involved lobes")
    return phenotype


def mock_fixture_entry(phenotype: TumorPhenotype) -> dict[str, str]:
    """Render canned response contents for a known phenotype."""
    names = [f"{l.full_name} ({l.name})" for l in sorted(phenotype.lobes)]
    if names:
        lobe_content = "The tumor is located in the " + " and the ".join(names) + "."
    else:
        lobe_content = "none"
    stations = sorted(phenotype.lymph_stations, key=_station_sort_key)
    if stations:
        lymph_content = "Malignant lymph stations: " + ", ".join(stations) + "."
    else:
        lymph_content = "No malignant lymph stations are identified."
    return {"lobe": lobe_content, "lymph": lymph_content}
