from __future__ import annotations

import json
from importlib import resources

import httpx
import pytest

from lobeguide.extract import (
    API_KEY_ENV,
    ChatBackend,
    EmptyPhenotypeError,
    InvalidOptionError,
    MockBackend,
    PromptTemplate,
    RuleBasedBackend,
    TransportError,
    TumorPhenotype,
    UnparseableResponseError,
    build_chat_request,
    extract_phenotype,
    mock_fixture_entry,
    parse_phenotype_response,
    report_sha256,
    rule_extract,
)
from lobeguide.lobes import LobeId, find_lobe_mentions


def _data(name: str) -> str:
    return resources.files("lobeguide.data").joinpath(name).read_text(encoding="utf-8")


def _golden_bytes(name: str) -> bytes:
    return resources.files("lobeguide.data").joinpath(f"golden/{name}").read_bytes()


# ---- lobe vocabulary --------------------------------------------------------


def test_lobe_parse_aliases():
    assert LobeId.parse("RUL") is LobeId.RUL
    assert LobeId.parse("left lower lobe") is LobeId.LLL
    assert LobeId.parse("right inferior lobe") is LobeId.RLL
    assert LobeId.parse("ril") is LobeId.RLL
    assert LobeId.parse("lil") is LobeId.LLL
    with pytest.raises(ValueError):
        LobeId.parse("middle lobe of nowhere")


def test_find_lobe_mentions_word_boundaries():
    assert find_lobe_mentions("nodule in the right upper lobe (RUL)") == {LobeId.RUL}
    assert find_lobe_mentions("BRULE is not a lobe") == set()
    assert find_lobe_mentions("RUL and LLL both involved") == {LobeId.RUL, LobeId.LLL}
    assert find_lobe_mentions("no lobes here") == set()


# ---- rule-based extraction ----------------------------------------------------


def test_rule_extract_determinate_tumor_sentence():
    got = rule_extract("There is a determinate tumor in the right upper lobe (RUL).")
    assert got.lobes == frozenset({LobeId.RUL})
    assert got.lymph_stations == frozenset()


def test_rule_extract_filters_indeterminate_and_history():
    report = (
        "An indeterminate nodule is noted in the left lower lobe (LLL). "
        "History of a treated carcinoma in the right middle lobe. "
        "Previously resected tumor in the left upper lobe. "
        "Biopsy-proven malignancy involving the right lower lobe (RLL)."
    )
    assert rule_extract(report).lobes == frozenset({LobeId.RLL})


def test_rule_extract_benign_marker_filters():
    assert rule_extract("Benign tumor in the right upper lobe.").lobes == frozenset()


def test_rule_extract_lymph_stations():
    report = (
        "Current carcinoma centered in the left upper lobe (LUL). "
        "The station 4R lymph node is malignant. "
        "Malignant involvement of station 7 nodes."
    )
    got = rule_extract(report)
    assert got.lymph_stations == frozenset({"4R", "7"})


def test_rule_extract_nodule_is_not_a_node():
    report = "A malignant 4 mm nodule is present."
    assert rule_extract(report).lymph_stations == frozenset()
    report = "A malignant 4R node is present."
    assert rule_extract(report).lymph_stations == frozenset({"4R"})


def test_rule_extract_requires_malignancy_term():
    assert rule_extract("The right upper lobe (RUL) is clear.").lobes == frozenset()


def test_rule_extract_splits_on_sentence_boundaries():
    # the indeterminate marker must not bleed into the next sentence
    report = (
        "Indeterminate nodule in the left lower lobe. "
        "Determinate tumor in the right upper lobe (RUL)!"
    )
    assert rule_extract(report).lobes == frozenset({LobeId.RUL})


def test_corpus_reports_match_expected_phenotypes():
    corpus = json.loads(_data("report_corpus.json"))["reports"]
    assert len(corpus) == 30
    for entry in corpus:
        got = rule_extract(entry["report"])
        assert got.to_json_dict() == entry["expected"], entry["id"]


# ---- phenotype container -------------------------------------------------------


def test_phenotype_json_ordering():
    ph = TumorPhenotype(
        lobes=frozenset({LobeId.LLL, LobeId.RUL}),
        lymph_stations=frozenset({"10L", "4R", "7"}),
    )
    d = ph.to_json_dict()
    assert d["lobes"] == ["RUL", "LLL"]
    assert d["lymph_stations"] == ["4R", "7", "10L"]


# ---- chat request assembly -----------------------------------------------------


def test_chat_request_wire_payload_shape():
    req = build_chat_request("Tumor in the right upper lobe (RUL).", "lobe")
    payload = req.wire_payload()
    assert set(payload) == {"model", "temperature", "messages"}
    assert payload["model"] == "gpt-3.5-turbo"
    assert payload["temperature"] == 0
    assert isinstance(payload["temperature"], int)
    assert [m["role"] for m in payload["messages"]] == ["assistant", "user"]


def test_chat_request_fractional_temperature_stays_float():
    tpl = PromptTemplate(temperature=0.7)
    req = build_chat_request("Tumor in the right upper lobe.", "lobe", tpl)
    assert req.wire_payload()["temperature"] == 0.7


def test_chat_request_lymph_has_single_user_message():
    req = build_chat_request("Report text.", "lymph")
    payload = req.wire_payload()
    assert [m["role"] for m in payload["messages"]] == ["user"]
    assert payload["messages"][0]["content"].endswith("Report text.")


def test_chat_request_rejects_empty_report():
    with pytest.raises(ValueError):
        build_chat_request("   ", "lobe")
    with pytest.raises(ValueError):
        build_chat_request("x", "nonsense")


def test_chat_request_golden_bytes():
    sample = _golden_bytes("sample_report.txt").decode("utf-8")
    lobe = build_chat_request(sample, "lobe").to_json_bytes()
    lymph = build_chat_request(sample, "lymph").to_json_bytes()
    assert lobe == _golden_bytes("chat_request_lobe.json")
    assert lymph == _golden_bytes("chat_request_lymph.json")


# ---- response parsing ------------------------------------------------------------


def test_parse_lobe_response_mentions():
    got = parse_phenotype_response(
        "The tumor is located in the right upper lobe (RUL).", "lobe"
    )
    assert got == frozenset({LobeId.RUL})


def test_parse_lobe_response_unparseable_vs_invalid():
    with pytest.raises(UnparseableResponseError):
        parse_phenotype_response("", "lobe")
    with pytest.raises(UnparseableResponseError):
        parse_phenotype_response("none", "lobe")
    with pytest.raises(UnparseableResponseError):
        parse_phenotype_response("N/A", "lobe")
    with pytest.raises(InvalidOptionError):
        parse_phenotype_response("The lesion is in the spleen.", "lobe")


def test_parse_lymph_response():
    assert parse_phenotype_response("Stations 4R and 7 are malignant.", "lymph") == frozenset(
        {"4R", "7"}
    )
    assert parse_phenotype_response("No malignant stations.", "lymph") == frozenset()
    assert parse_phenotype_response("station 10l", "lymph") == frozenset({"10L"})


# ---- backends ---------------------------------------------------------------------


def test_rule_backend_fail_closed_on_no_lobes():
    with pytest.raises(EmptyPhenotypeError):
        extract_phenotype("Nothing to see here.", RuleBasedBackend())


def test_mock_backend_replays_fixture():
    report = "There is a determinate tumor in the right upper lobe (RUL)."
    entry = mock_fixture_entry(
        TumorPhenotype(lobes=frozenset({LobeId.RUL}), lymph_stations=frozenset({"7"}))
    )
    backend = MockBackend({report_sha256(report): entry})
    got = extract_phenotype(report, backend)
    assert got.lobes == frozenset({LobeId.RUL})
    assert got.lymph_stations == frozenset({"7"})


def test_mock_backend_missing_fixture_is_transport_error():
    backend = MockBackend({})
    with pytest.raises(TransportError):
        backend.extract("unknown report")


def test_bundled_mock_fixtures_agree_with_rules():
    corpus = json.loads(_data("report_corpus.json"))["reports"]
    backend = MockBackend(json.loads(_data("mock_fixtures.json")))
    for entry in corpus:
        assert backend.extract(entry["report"]).to_json_dict() == entry["expected"]


class FakeResponse:
    def __init__(self, payload):
        self.payload = payload

    def raise_for_status(self):
        return None

    def json(self):
        return self.payload


class FakeClient:
    """Scripted stand-in for httpx.Client."""

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = []

    def post(self, url, json=None, headers=None):
        self.calls.append({"url": url, "json": json, "headers": headers})
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return FakeResponse(outcome)


def _chat_payload(content: str) -> dict:
    return {"choices": [{"message": {"content": content}}]}


def test_chat_backend_happy_path(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "sk-test")
    client = FakeClient(
        [
            _chat_payload("The tumor involves the right upper lobe (RUL)."),
            _chat_payload("Station 4R is malignant."),
        ]
    )
    backend = ChatBackend(endpoint="https://api.test/v1/chat", client=client)
    got = backend.extract("Tumor in the right upper lobe (RUL).")
    assert got.lobes == frozenset({LobeId.RUL})
    assert got.lymph_stations == frozenset({"4R"})
    assert len(client.calls) == 2
    assert client.calls[0]["headers"]["Authorization"] == "Bearer sk-test"
    body = client.calls[0]["json"]
    assert set(body) == {"model", "temperature", "messages"}


def test_chat_backend_retries_with_backoff(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "sk-test")
    sleeps = []
    client = FakeClient(
        [
            httpx.ConnectError("down"),
            httpx.ConnectError("down"),
            _chat_payload("right upper lobe"),
            _chat_payload("no stations"),
        ]
    )
    backend = ChatBackend(
        endpoint="https://api.test/v1/chat", client=client, sleep=sleeps.append
    )
    got = backend.extract("Tumor in the right upper lobe (RUL).")
    assert got.lobes == frozenset({LobeId.RUL})
    assert sleeps == [1.0, 2.0]


def test_chat_backend_gives_up_after_three_attempts(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "sk-test")
    sleeps = []
    client = FakeClient([httpx.ConnectError("down")] * 3)
    backend = ChatBackend(
        endpoint="https://api.test/v1/chat", client=client, sleep=sleeps.append
    )
    with pytest.raises(TransportError):
        backend.extract("Tumor in the right upper lobe (RUL).")
    assert len(client.calls) == 3
    assert sleeps == [1.0, 2.0]


def test_chat_backend_requires_api_key(monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    backend = ChatBackend(endpoint="https://api.test/v1/chat", client=FakeClient([]))
    with pytest.raises(TransportError):
        backend.extract("Tumor in the right upper lobe (RUL).")


def test_chat_backend_malformed_body_retries_then_fails(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "sk-test")
    client = FakeClient([{"choices": []}] * 3)
    backend = ChatBackend(
        endpoint="https://api.test/v1/chat", client=client, sleep=lambda _: None
    )
    with pytest.raises(TransportError):
        backend.extract("Tumor in the right upper lobe (RUL).")


def test_mock_fixture_entry_rendering():
    entry = mock_fixture_entry(
        TumorPhenotype(lobes=frozenset(), lymph_stations=frozenset())
    )
    assert entry["lobe"] == "none"
    assert entry["lymph"] == "No malignant lymph stations are identified."
    entry = mock_fixture_entry(
        TumorPhenotype(
            lobes=frozenset({LobeId.RUL, LobeId.LLL}),
            lymph_stations=frozenset({"10L", "7"}),
        )
    )
    assert "right upper lobe (RUL)" in entry["lobe"]
    assert "left lower lobe (LLL)" in entry["lobe"]
    assert entry["lymph"] == "Malignant lymph stations: 7, 10L."
