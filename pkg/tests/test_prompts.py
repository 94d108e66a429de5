import json

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptmil import prompts
from promptmil.prompts import (BackendError, FixtureBackend, HttpBackend,
                               PromptBuildError, PromptPack, ScriptedBackend,
                               build_prompt_pack, describe_entity,
                               discover_entities, load_pack, load_templates,
                               save_pack, summarize_slide, validate_pack_json)


def test_fixture_pack_is_reproducible():
    a = build_prompt_pack(["LUAD", "LUSC"], 4, FixtureBackend())
    b = build_prompt_pack(["LUAD", "LUSC"], 4, FixtureBackend())
    assert a.to_json() == b.to_json()


def test_discover_returns_fixture_names_in_order():
    names = discover_entities(["LUAD", "LUSC"], "high", 5, FixtureBackend())
    assert names == prompts._FIXTURE_ENTITIES[:5]


def test_discover_single_entity_single_query():
    backend = FixtureBackend()
    names = discover_entities(["LUAD", "LUSC"], "low", 1, backend)
    assert len(names) == 1
    assert len(backend.requests) == 1


def test_discover_dedups_with_one_extra_query():
    backend = ScriptedBackend(["nucleolus", "nucleolus", "stroma", "gland"])
    names = discover_entities(["LUAD", "LUSC"], "high", 3, backend)
    assert names == ["nucleolus", "stroma", "gland"]
    assert len(backend.requests) == 4  # the duplicate cost exactly one retry


def test_discover_duplicate_beyond_budget_carries_partial_pool():
    backend = ScriptedBackend(["nucleolus"] + ["nucleolus"] * 10)
    with pytest.raises(PromptBuildError) as err:
        discover_entities(["LUAD", "LUSC"], "high", 3, backend, retries=2)
    assert err.value.partial == ["nucleolus"]


def test_discover_backend_failure_carries_partial_pool():
    backend = ScriptedBackend(["stroma"])  # second query exhausts the script
    with pytest.raises(PromptBuildError) as err:
        discover_entities(["LUAD", "LUSC"], "low", 2, backend, retries=1)
    assert err.value.partial == ["stroma"]


def test_discovery_query_budget_bound():
    # worst case: every slot burns its full retry budget before succeeding
    n_e, retries = 3, 3
    responses = []
    for name in ["nucleolus", "stroma", "gland"]:
        responses.extend([""] * retries)
        responses.append(name)
    backend = ScriptedBackend(responses)
    names = discover_entities(["LUAD", "LUSC"], "low", n_e, backend, retries=retries)
    assert len(names) == n_e
    assert len(backend.requests) <= n_e + retries * n_e


def test_describe_entity_nsclc_attributes():
    ep = describe_entity("nucleolus", "high", ["LUAD", "LUSC"], FixtureBackend())
    assert "small and inconspicuous" in ep.attributes["LUAD"]
    assert "large and prominent" in ep.attributes["LUSC"]
    assert ep.generic


def test_describe_entity_single_subtype():
    ep = describe_entity("stroma", "low", ["LUAD"], FixtureBackend())
    assert list(ep.attributes) == ["LUAD"]


def test_describe_entity_replay_identical():
    a = describe_entity("gland", "low", ["LUAD", "LUSC"], FixtureBackend())
    b = describe_entity("gland", "low", ["LUAD", "LUSC"], FixtureBackend())
    assert a == b


def test_describe_entity_empty_completion_retry_then_error():
    backend = ScriptedBackend(["", "", "", "", ""])
    with pytest.raises(BackendError):
        describe_entity("gland", "low", ["LUAD"], backend, retries=1)


def test_summarize_slide_request_embeds_all_entity_names():
    backend = FixtureBackend()
    entities = [describe_entity(n, "low", ["LUAD", "LUSC"], FixtureBackend())
                for n in prompts._FIXTURE_ENTITIES[:8]]
    summarize_slide("LUAD", "low", entities, backend)
    request_user = backend.requests[-1][1]
    for e in entities:
        assert e.name in request_user


def test_summarize_slide_single_entity():
    backend = FixtureBackend()
    entities = [describe_entity("vacuole", "high", ["LUAD", "LUSC"], FixtureBackend())]
    summarize_slide("LUSC", "high", entities, backend)
    assert "vacuole" in backend.requests[-1][1]


def test_pack_counts_and_schema(nsclc_pack):
    raw = nsclc_pack.to_json()
    validate_pack_json(raw)
    for s in ("low", "high"):
        scale = raw["scales"][s]
        assert len(scale["entities"]) == 4
        for e in scale["entities"]:
            assert set(e["attributes"]) == {"LUAD", "LUSC"}
        assert set(scale["slide_prompts"]) == {"LUAD", "LUSC"}
        assert scale["region_prompt"]


def test_pack_missing_attribute_rejected(nsclc_pack):
    raw = nsclc_pack.to_json()
    del raw["scales"]["low"]["entities"][0]["attributes"]["LUSC"]
    with pytest.raises(PromptBuildError):
        validate_pack_json(raw)


def test_pack_duplicate_entity_rejected(nsclc_pack):
    raw = nsclc_pack.to_json()
    raw["scales"]["low"]["entities"][1]["name"] = \
        raw["scales"]["low"]["entities"][0]["name"]
    with pytest.raises(PromptBuildError, match="duplicate"):
        validate_pack_json(raw)


def test_pack_round_trip(tmp_path, nsclc_pack):
    path = tmp_path / "pack.json"
    save_pack(nsclc_pack, path)
    again = load_pack(path)
    assert again.to_json() == nsclc_pack.to_json()


names_strategy = st.lists(
    st.text(alphabet="abcdefghij", min_size=1, max_size=8), min_size=2,
    max_size=5, unique=True)


@given(subtypes=names_strategy, n_entities=st.integers(min_value=1, max_value=6),
       data=st.data())
@settings(max_examples=100, deadline=None)
def test_generator_and_validator_agree_on_random_packs(subtypes, n_entities, data):
    vocab = data.draw(st.lists(st.text(alphabet="klmnopqrs", min_size=1, max_size=8),
                               min_size=n_entities, max_size=n_entities + 4,
                               unique=True))
    pack = build_prompt_pack(subtypes, n_entities, FixtureBackend(vocabulary=vocab))
    validate_pack_json(pack.to_json())
    assert PromptPack.from_json(pack.to_json()).to_json() == pack.to_json()


def test_templates_load_and_reject_missing_keys(tmp_path):
    t = load_templates()
    assert "{entity}" in t["generic"]
    bad = tmp_path / "t.json"
    bad.write_text(json.dumps({"system": "x"}))
    with pytest.raises(ValueError, match="missing keys"):
        load_templates(bad)


# ---------------------------------------------------------------------------
# HTTP backend


def _http_backend(handler, retries=2):
    transport = httpx.MockTransport(handler)
    client = httpx.Client(transport=transport, base_url="http://llm.test")
    return HttpBackend("http://llm.test/v1", model="m", api_key="k",
                       max_retries=retries, backoff=0.0, client=client)


def _ok_payload(text):
    return {"choices": [{"index": 0, "message": {"role": "assistant",
                                                 "content": text}}]}


def test_http_backend_retries_on_429_then_succeeds():
    calls = []

    def handler(request):
        calls.append(json.loads(request.content))
        if len(calls) == 1:
            return httpx.Response(429, json={"error": "rate limited"})
        return httpx.Response(200, json=_ok_payload("stroma"))

    backend = _http_backend(handler)
    out = backend.complete("sys", "user text")
    assert out == "stroma"
    assert len(calls) == 2
    assert calls[0]["temperature"] == 0
    assert calls[0]["messages"][1]["content"] == "user text"


def test_http_backend_gives_up_after_retries():
    def handler(request):
        return httpx.Response(503, json={"error": "down"})

    backend = _http_backend(handler, retries=2)
    with pytest.raises(BackendError, match="gave up"):
        backend.complete("s", "u")


def test_http_backend_non_retryable_status_raises():
    def handler(request):
        return httpx.Response(400, json={"error": "bad request"})

    with pytest.raises(BackendError, match="400"):
        _http_backend(handler).complete("s", "u")


def test_http_backend_malformed_payload():
    def handler(request):
        return httpx.Response(200, json={"unexpected": True})

    with pytest.raises(BackendError, match="malformed"):
        _http_backend(handler).complete("s", "u")


def test_http_backend_requires_api_key(monkeypatch):
    monkeypatch.delenv(prompts.API_KEY_ENV, raising=False)
    with pytest.raises(BackendError, match="API key"):
        HttpBackend("http://llm.test", model="m")
