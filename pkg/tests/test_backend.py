import json
import random
import socket
import time

import httpx
import pytest

from negcoder.backend import (
    AuthenticationError,
    BackendConfig,
    BackendError,
    CompletionRequest,
    HttpBackend,
    RateLimitError,
    RunTag,
    TransportError,
    complete_batch,
    extract_path,
)
from negcoder.mock import MockBackend, NoiseSpec, noisy_variant, prompt_sha256, rewrite_sentence


def _cfg(**kw):
    base = dict(kind="http", endpoint_url="http://llm.test/v1/complete", model_id="m", retry_backoff_ms=1, max_retries=3)
    base.update(kw)
    return BackendConfig(**base)


def _transport(statuses, seen, body=None):
    body = body or {"choices": [{"text": "1 | Hi. | Other"}]}

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request)
        status = statuses[min(len(seen) - 1, len(statuses) - 1)]
        return httpx.Response(status, json=body if status == 200 else {"error": "x"})

    return httpx.MockTransport(handler)


def test_request_body_and_auth_header(monkeypatch):
    monkeypatch.setenv("TEST_TOKEN", "sekrit")
    seen = []
    be = HttpBackend(_cfg(auth_token_env_var_name="TEST_TOKEN"), _transport([200], seen))
    resp = be.complete(CompletionRequest("PROMPT", temperature=0.3, max_output_tokens=99))
    assert resp.text == "1 | Hi. | Other" and resp.backend_name == "http"
    sent = json.loads(seen[0].content)
    assert sent == {"model": "m", "temperature": 0.3, "max_tokens": 99, "prompt": "PROMPT"}
    assert seen[0].headers["authorization"] == "Bearer sekrit"


def test_messages_style_and_response_path():
    seen = []
    body = {"choices": [{"message": {"content": "ok"}}]}
    be = HttpBackend(_cfg(request_style="messages"), _transport([200], seen, body))
    assert be.complete(CompletionRequest("P")).text == "ok"
    assert json.loads(seen[0].content)["messages"] == [{"role": "user", "content": "P"}]
    be = HttpBackend(_cfg(response_path="out.text"), _transport([200], [], {"out": {"text": "deep"}}))
    assert be.complete(CompletionRequest("P")).text == "deep"


def test_missing_token_variable(monkeypatch):
    monkeypatch.delenv("NOT_SET_ANYWHERE", raising=False)
    be = HttpBackend(_cfg(auth_token_env_var_name="NOT_SET_ANYWHERE"), _transport([200], []))
    with pytest.raises(AuthenticationError, match="NOT_SET_ANYWHERE"):
        be.complete(CompletionRequest("P"))


@pytest.mark.parametrize("status", [401, 403])
def test_auth_failure_is_not_retried(status):
    seen = []
    be = HttpBackend(_cfg(), _transport([status], seen))
    with pytest.raises(AuthenticationError) as info:
        be.complete(CompletionRequest("P"))
    assert len(seen) == 1 and info.value.kind == "auth"


def test_rate_limit_then_success_is_retried():
    seen = []
    be = HttpBackend(_cfg(), _transport([429, 503, 200], seen))
    assert be.complete(CompletionRequest("P")).text.startswith("1 |")
    assert len(seen) == 3


def test_retries_exhaust():
    seen = []
    be = HttpBackend(_cfg(max_retries=2), _transport([429], seen))
    with pytest.raises(RateLimitError, match="3 attempts"):
        be.complete(CompletionRequest("P"))
    assert len(seen) == 3


def test_client_error_not_retried():
    seen = []
    with pytest.raises(BackendError, match="HTTP 400"):
        HttpBackend(_cfg(), _transport([400], seen)).complete(CompletionRequest("P"))
    assert len(seen) == 1


def test_bad_response_shape():
    be = HttpBackend(_cfg(), _transport([200], [], {"unexpected": 1}))
    with pytest.raises(BackendError, match="choices.0.text"):
        be.complete(CompletionRequest("P"))


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_unreachable_endpoint_is_transport_error():
    cfg = _cfg(endpoint_url=f"http://127.0.0.1:{_free_port()}/", max_retries=1, timeout_ms=2000)
    with pytest.raises(TransportError) as info:
        HttpBackend(cfg).complete(CompletionRequest("P", run_tag=RunTag(2, 4, "t9")))
    assert info.value.attempts == 2 and "t9#seg2/run4" in str(info.value)


def test_config_validation():
    with pytest.raises(ValueError):
        BackendConfig(kind="grpc")
    with pytest.raises(ValueError):
        BackendConfig(kind="http")
    with pytest.raises(ValueError):
        BackendConfig.from_dict({"kind": "mock", "colour": 1})
    with pytest.raises(ValueError):
        CompletionRequest("p", temperature=float("nan"))


def test_extract_path():
    assert extract_path({"a": [{"b": 3}]}, "a.0.b") == 3
    with pytest.raises(KeyError):
        extract_path({"a": 1}, "a.b")


def test_batch_preserves_order_under_jitter():
    entries = [{"segment": i, "text": f"answer {i}"} for i in range(12)]
    be = MockBackend({"entries": entries}, jitter_ms=15)
    reqs = [CompletionRequest(f"p{i}", run_tag=RunTag(i, 1)) for i in range(12)]
    started = time.monotonic()
    items = complete_batch(reqs, BackendConfig(), max_in_flight=6, backend=be)
    assert [it.response.text for it in items] == [f"answer {i}" for i in range(12)]
    assert time.monotonic() - started < 12 * 0.015  # ran concurrently
    with pytest.raises(ValueError):
        complete_batch(reqs, BackendConfig(), max_in_flight=0, backend=be)


def test_batch_collects_errors():
    be = MockBackend({"entries": [{"segment": 0, "text": "ok"}, {"segment": 1, "error": "rate_limit"}]})
    items = complete_batch([CompletionRequest("a", run_tag=RunTag(i, 1)) for i in (0, 1)], BackendConfig(), backend=be)
    assert items[0].ok and not items[1].ok
    assert isinstance(items[1].error, RateLimitError)


def test_mock_matching_specificity():
    digest = prompt_sha256("special")
    be = MockBackend({"entries": [
        {"text": "fallback"},
        {"segment": "t#0", "text": "segment"},
        {"segment": "t#0", "run": 2, "text": "segment+run"},
        {"prompt_sha256": digest, "text": "hash"},
    ]})
    ask = lambda p, run, tid="t": be.complete(CompletionRequest(p, run_tag=RunTag(0, run, tid))).text
    assert ask("x", 1) == "segment"
    assert ask("x", 2) == "segment+run"
    assert ask("special", 2) == "hash"
    assert ask("x", 1, tid="other") == "fallback"
    assert MockBackend({}).complete(CompletionRequest("x")).text == ""


def test_rewrite_edits():
    rng = random.Random(0)
    assert rewrite_sentence("We can't go lower.", rng) == "We cannot go lower."
    assert rewrite_sentence("Plain sentence.", rng) == "Plain sentence!"
    assert rewrite_sentence("Um, we agree", rng) == "We agree"


def test_noise_decisions_replay_from_fixed_draws():
    text = "".join(f"{i} | We can't pay {i}. | Other\n" for i in range(1, 31))
    noise = NoiseSpec(0.2, 0.3, 0.3)
    _, events = noisy_variant(text, noise, random.Random(5), ["Other", "Humor"])
    rng = random.Random(5)
    for e in events:
        u_skip, u_rw, u_rc = rng.random(), rng.random(), rng.random()
        rng.getrandbits(64)
        assert e.skipped == (u_skip < 0.2)
        if not e.skipped:
            assert (e.rewritten is not None) == (u_rw < 0.3)
            assert (e.recoded_to is not None) == (u_rc < 0.3)
            assert e.recoded_to in (None, "Humor")
    assert len(events) == 30


def test_noise_on_one_line_does_not_shift_later_lines():
    lines = [f"{i} | We can't pay {i}. | Other" for i in range(1, 11)]
    noise = NoiseSpec(0.0, 0.5, 0.5)
    _, base = noisy_variant("\n".join(lines), noise, random.Random(1), ["Other", "Humor"])
    lines[0] = "1 | Plain words here. | Other"  # different rewrite rule applies
    _, changed = noisy_variant("\n".join(lines), noise, random.Random(1), ["Other", "Humor"])
    assert [(e.skipped, e.recoded_to) for e in base] == [(e.skipped, e.recoded_to) for e in changed]
    assert [e.rewritten for e in base[1:]] == [e.rewritten for e in changed[1:]]


def test_noisy_mock_is_deterministic_per_seed():
    text = "".join(f"{i} | Sentence {i}. | Other\n" for i in range(1, 41))
    script = {"labels": ["Other", "Humor"], "noise": {"skip_rate": 0.1, "rewrite_rate": 0.2, "recode_rate": 0.2},
              "entries": [{"text": text}]}
    a, b = MockBackend(script, seed=3), MockBackend(script, seed=3)
    req = CompletionRequest("p", run_tag=RunTag(0, 2))
    assert a.respond(req) == b.respond(req)
    assert a.respond(req)[0] != MockBackend(script, seed=4).respond(req)[0]
    assert a.respond(req)[0] != a.respond(CompletionRequest("p", run_tag=RunTag(0, 3)))[0]
