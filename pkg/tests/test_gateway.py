from __future__ import annotations

import json
import math
import threading

import pytest
import requests

from suffbench.constrainer import count_words, extract_answer_and_explanation
from suffbench.gateway import (
    EmbeddingDimensionError,
    EmptyCompletion,
    Gateway,
    GatewayError,
    LogprobResult,
    LogprobsUnsupported,
    ModelEndpoint,
    RateLimiter,
    RequestFailed,
    ResponseCache,
    RetriesExhausted,
    TokenAlignmentError,
    request_fingerprint,
)
from suffbench.prompts import RenderedPrompt

from tests.conftest import CHAT_BODY

SCORING_PROMPT = "Question: Q?\nThe answer is "


def prompt_of(text: str) -> RenderedPrompt:
    return RenderedPrompt("generate", text, "q0001", 0, "t")


def live_endpoint(server, **kw) -> ModelEndpoint:
    defaults = {"base_url": server.base_url, "model_id": "live-1", "requests_per_minute": 10_000}
    defaults.update(kw)
    return ModelEndpoint(**defaults)


MOCK = ModelEndpoint(base_url="mock://7", model_id="mock-gen")


class VirtualClock:
    def __init__(self):
        self.now = 0.0
        self.sleeps: list[float] = []

    def clock(self) -> float:
        return self.now

    def sleep(self, seconds: float) -> None:
        self.sleeps.append(seconds)
        self.now += max(seconds, 0.0)


class FakeResponse:
    def __init__(self, status_code: int, body: dict):
        self.status_code = status_code
        self.content = json.dumps(body).encode("utf-8")
        self.text = self.content.decode("utf-8")


class FakeSession:
    """Scripted transport: each entry is a status code, a (status, body)
    pair, or an exception to raise."""

    def __init__(self, script):
        self.script = list(script)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers or {}, "timeout": timeout})
        action = self.script.pop(0)
        if isinstance(action, Exception):
            raise action
        if isinstance(action, tuple):
            status, body = action
        else:
            status, body = action, {"error": {"message": "scripted failure"}}
        return FakeResponse(status, body)


class TestFingerprint:
    def test_key_order_canonicalized(self):
        assert request_fingerprint({"a": 1, "b": [2, 3]}) == request_fingerprint({"b": [2, 3], "a": 1})

    def test_different_payloads_differ(self):
        assert request_fingerprint({"a": 1}) != request_fingerprint({"a": 2})

    def test_cache_salt_changes_fingerprint(self):
        base = {"kind": "chat.completions", "model": "m", "prompt": "p", "temperature": 0.0, "max_tokens": 4}
        salted = dict(base, cache_salt="retry-1")
        assert request_fingerprint(base) != request_fingerprint(salted)


class TestRateLimiter:
    def test_no_waiting_under_limit(self):
        vc = VirtualClock()
        limiter = RateLimiter(100, clock=vc.clock, sleep=vc.sleep)
        for _ in range(5):
            limiter.acquire()
        assert vc.sleeps == []

    def test_any_60s_window_bounded(self):
        vc = VirtualClock()
        limit = 3
        limiter = RateLimiter(limit, clock=vc.clock, sleep=vc.sleep)
        admissions = []
        for _ in range(10):
            limiter.acquire()
            admissions.append(vc.now)
        # bounded half-open windows: the (i+limit)-th admission must sit
        # at least 60s after the i-th
        for i in range(len(admissions) - limit):
            assert admissions[i + limit] - admissions[i] >= 60.0
        assert admissions == sorted(admissions)

    def test_burst_does_not_carry_over(self):
        vc = VirtualClock()
        limiter = RateLimiter(2, clock=vc.clock, sleep=vc.sleep)
        times = []
        for _ in range(6):
            limiter.acquire()
            times.append(vc.now)
        assert times == [0.0, 0.0, 60.0, 60.0, 120.0, 120.0]

    def test_thread_safe_counting(self):
        limiter = RateLimiter(1000)
        done = []

        def work():
            limiter.acquire()
            done.append(1)

        threads = [threading.Thread(target=work) for _ in range(50)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(done) == 50

    def test_limit_must_be_positive(self):
        with pytest.raises(ValueError):
            RateLimiter(0)


class TestMockBackend:
    def test_generation_deterministic_across_gateways(self):
        prompt = prompt_of("Question: why?\nOptions:\nA) a\nB) b\nC) c\nD) d")
        first = Gateway().generate(MOCK, prompt)
        second = Gateway().generate(MOCK, prompt)
        assert first.text == second.text
        assert first.request_fingerprint == second.request_fingerprint

    def test_different_seed_changes_output(self):
        prompt = prompt_of("Question: why?")
        a = Gateway().generate(MOCK, prompt)
        b = Gateway().generate(ModelEndpoint(base_url="mock://8", model_id="mock-gen"), prompt)
        assert a.text != b.text

    def test_unconstrained_output_is_parseable(self):
        result = Gateway().generate(MOCK, prompt_of("Question: why?"))
        letter, explanation = extract_answer_and_explanation(result)
        assert letter in "ABCD"
        assert count_words(explanation) > 0

    def test_budget_prompt_en_gets_exactly_budget_words(self):
        result = Gateway().generate(MOCK, prompt_of("Rewrite using at most 7 words."))
        assert count_words(result.text) == 7

    def test_budget_prompt_fa_gets_exactly_budget_words(self):
        result = Gateway().generate(MOCK, prompt_of("بازنویسی با حداکثر 5 کلمه انجام بده."))
        assert count_words(result.text) == 5

    def test_scoring_uniform_minus_one_per_token(self):
        result = Gateway().score_continuation(MOCK, SCORING_PROMPT, " A")
        assert result.continuation == " A"
        assert [lp for _, lp in result.token_logprobs] == [-1.0]
        assert result.total_logprob == -1.0

    def test_scoring_multiword_continuation(self):
        result = Gateway().score_continuation(MOCK, SCORING_PROMPT, " two words")
        assert "".join(t for t, _ in result.token_logprobs) == " two words"
        assert result.total_logprob == -2.0

    def test_embedding_unit_norm_and_fixed_dim(self):
        gw = Gateway()
        result = gw.embed(MOCK, "some text")
        assert len(result.vector) == 32
        assert math.isqrt  # noqa: B018 - keep flake quiet about import use
        assert abs(sum(x * x for x in result.vector) - 1.0) < 1e-9
        assert gw.embed(MOCK, "some text").vector == result.vector
        assert gw.embed(MOCK, "other text").vector != result.vector

    def test_counters_track_backend_calls(self):
        gw = Gateway()
        gw.generate(MOCK, prompt_of("p1"))
        gw.generate(MOCK, prompt_of("p2"))
        gw.score_continuation(MOCK, SCORING_PROMPT, " A")
        gw.embed(MOCK, "text")
        assert gw.mock_counts() == {"generate": 2, "logprobs": 1, "embeddings": 1}


class TestCache:
    def test_mock_hit_skips_backend(self, tmp_path):
        gw = Gateway(cache_dir=tmp_path)
        prompt = prompt_of("cache me")
        first = gw.generate(MOCK, prompt)
        second = gw.generate(MOCK, prompt)
        assert first.text == second.text
        assert gw.mock_counts()["generate"] == 1

    def test_cache_shared_between_gateways(self, tmp_path):
        prompt = prompt_of("cache me")
        Gateway(cache_dir=tmp_path).generate(MOCK, prompt)
        gw2 = Gateway(cache_dir=tmp_path)
        gw2.generate(MOCK, prompt)
        assert gw2.mock_counts()["generate"] == 0

    def test_http_hit_skips_network(self, server, tmp_path):
        endpoint = live_endpoint(server)
        gw = Gateway(cache_dir=tmp_path)
        prompt = prompt_of("net once")
        gw.generate(endpoint, prompt)
        gw.generate(endpoint, prompt)
        assert len(server.requests) == 1

    def test_force_refresh_bypasses_reads_but_writes(self, server, tmp_path):
        endpoint = live_endpoint(server)
        prompt = prompt_of("refresh me")
        Gateway(cache_dir=tmp_path).generate(endpoint, prompt)
        Gateway(cache_dir=tmp_path, force_refresh=True).generate(endpoint, prompt)
        assert len(server.requests) == 2
        # refreshed body is served from cache afterwards
        Gateway(cache_dir=tmp_path).generate(endpoint, prompt)
        assert len(server.requests) == 2

    def test_corrupt_cache_entry_fails_loudly(self, tmp_path):
        gw = Gateway(cache_dir=tmp_path)
        prompt = prompt_of("poison")
        result = gw.generate(MOCK, prompt)
        cache = ResponseCache(tmp_path)
        cache.put(result.request_fingerprint, b"\xff not json")
        with pytest.raises(GatewayError, match="unreadable response body"):
            Gateway(cache_dir=tmp_path).generate(MOCK, prompt)

    def test_roundtrip_bytes(self, tmp_path):
        cache = ResponseCache(tmp_path)
        key = "ab" + "0" * 62
        assert cache.get(key) is None
        cache.put(key, "متن".encode("utf-8"))
        assert cache.get(key) == "متن".encode("utf-8")


class TestRetryPolicy:
    def run_generate(self, script, **endpoint_kw):
        vc = VirtualClock()
        session = FakeSession(script)
        gw = Gateway(clock=vc.clock, sleep=vc.sleep, session=session)
        endpoint = ModelEndpoint(base_url="http://fake", model_id="m", **endpoint_kw)
        result = gw.generate(endpoint, prompt_of("p"))
        return result, session, vc

    def test_two_503s_then_success(self):
        result, session, vc = self.run_generate(
            [503, 503, (200, CHAT_BODY)], max_retries=2
        )
        assert result.text.startswith("Answer: B")
        assert len(session.calls) == 3
        assert vc.sleeps == [0.5, 1.0]

    def test_429_is_retryable(self):
        result, session, _ = self.run_generate([429, (200, CHAT_BODY)], max_retries=1)
        assert len(session.calls) == 2

    def test_timeout_is_retryable(self):
        result, session, _ = self.run_generate(
            [requests.Timeout("slow"), (200, CHAT_BODY)], max_retries=1
        )
        assert len(session.calls) == 2

    def test_retries_exhausted(self):
        with pytest.raises(RetriesExhausted, match="after 2 attempts"):
            self.run_generate([503, 503], max_retries=1)

    def test_400_fails_immediately_with_body(self):
        with pytest.raises(RequestFailed) as excinfo:
            self.run_generate([(400, {"error": {"message": "bad request"}})], max_retries=3)
        assert excinfo.value.status == 400
        assert "bad request" in excinfo.value.body

    def test_api_key_header_sent(self, monkeypatch):
        monkeypatch.setenv("FAKE_KEY", "sk-123")
        session = FakeSession([(200, CHAT_BODY)])
        gw = Gateway(session=session)
        endpoint = ModelEndpoint(
            base_url="http://fake", model_id="m", api_key_ref="FAKE_KEY"
        )
        gw.generate(endpoint, prompt_of("p"))
        assert session.calls[0]["headers"]["Authorization"] == "Bearer sk-123"

    def test_missing_api_key_env_fails(self, monkeypatch):
        monkeypatch.delenv("NO_SUCH_KEY", raising=False)
        gw = Gateway(session=FakeSession([(200, CHAT_BODY)]))
        endpoint = ModelEndpoint(
            base_url="http://fake", model_id="m", api_key_ref="NO_SUCH_KEY"
        )
        with pytest.raises(GatewayError, match="NO_SUCH_KEY"):
            gw.generate(endpoint, prompt_of("p"))


class TestLiveGeneration:
    def test_wire_payload_and_result(self, server):
        endpoint = live_endpoint(server)
        result = Gateway().generate(
            endpoint, prompt_of("Question: Q?"), temperature=0.0, max_tokens=128
        )
        assert result.text == "Answer: B\nExplanation: Light drives photosynthesis."
        assert result.finish_reason == "stop"
        sent = server.requests[0]
        assert sent["path"] == "/chat/completions"
        assert sent["payload"]["messages"] == [{"role": "user", "content": "Question: Q?"}]
        assert sent["payload"]["temperature"] == 0.0
        assert sent["payload"]["max_tokens"] == 128

    def test_empty_completion_is_distinct_error(self, server):
        server.route(
            "/chat/completions",
            lambda payload: {"choices": [{"message": {"content": "  "}, "finish_reason": "stop"}]},
        )
        with pytest.raises(EmptyCompletion):
            Gateway().generate(live_endpoint(server), prompt_of("p"))

    def test_unknown_finish_reason_mapped_to_other(self, server):
        server.route(
            "/chat/completions",
            lambda payload: {
                "choices": [{"message": {"content": "text"}, "finish_reason": "content_filter"}]
            },
        )
        result = Gateway().generate(live_endpoint(server), prompt_of("p"))
        assert result.finish_reason == "other"


class TestLiveScoring:
    def test_single_token_sum(self, server):
        result = Gateway().score_continuation(live_endpoint(server), SCORING_PROMPT, " A")
        # hand-summed from the fixture's logprob array
        assert result.total_logprob == -1.6875
        assert result.token_logprobs == ((" A", -1.6875),)

    def test_multi_token_sum(self, server):
        result = Gateway().score_continuation(live_endpoint(server), SCORING_PROMPT, " B")
        assert result.total_logprob == -1.5625
        assert result.token_logprobs == ((" ", -0.5), ("B", -1.0625))

    def test_wire_payload_uses_echo_mode(self, server):
        Gateway().score_continuation(live_endpoint(server), SCORING_PROMPT, " A")
        sent = server.requests[0]
        assert sent["path"] == "/completions"
        assert sent["payload"]["prompt"] == SCORING_PROMPT + " A"
        assert sent["payload"]["max_tokens"] == 0
        assert sent["payload"]["echo"] is True
        assert sent["payload"]["logprobs"] == 1

    def test_misaligned_boundary_is_fatal(self, server):
        with pytest.raises(TokenAlignmentError, match="expected 27"):
            Gateway().score_continuation(
                live_endpoint(server), "Question: R?\nThe answer is ", " A"
            )

    def test_missing_logprobs_is_fatal(self, server):
        with pytest.raises(LogprobsUnsupported, match="no logprobs"):
            Gateway().score_continuation(
                live_endpoint(server), "Question: S?\nThe answer is ", " A"
            )

    def test_empty_continuation_rejected(self, server):
        with pytest.raises(ValueError, match="non-empty"):
            Gateway().score_continuation(live_endpoint(server), SCORING_PROMPT, "")

    def test_logprob_result_validates_concatenation(self):
        with pytest.raises(TokenAlignmentError):
            LogprobResult(" A", ((" B", -1.0),), -1.0)

    def test_logprob_result_validates_total(self):
        with pytest.raises(ValueError, match="token sum"):
            LogprobResult(" A", ((" A", -1.0),), -2.0)


class TestLiveEmbeddings:
    def test_vector_dim_from_fixture(self, server):
        result = Gateway().embed(live_endpoint(server), "The sun warms the ground.")
        assert len(result.vector) == 1024

    def test_dimension_change_is_fatal(self, server):
        gw = Gateway()
        endpoint = live_endpoint(server)
        gw.embed(endpoint, "The sun warms the ground.")
        with pytest.raises(EmbeddingDimensionError, match="dim 8"):
            gw.embed(endpoint, "short vector")

    def test_empty_text_rejected(self, server):
        with pytest.raises(ValueError, match="non-empty"):
            Gateway().embed(live_endpoint(server), "   ")
