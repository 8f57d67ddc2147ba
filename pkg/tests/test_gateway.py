import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from olyharness.llm.gateway import (
    ChatRequest,
    ChatResponse,
    FinishReason,
    Gateway,
    IntegrityError,
    Message,
    ResponseCache,
    RetryPolicy,
    Role,
    TransportError,
    cache_key,
)
from olyharness.llm.providers import FunctionProvider, HashEmbeddingProvider

NO_SLEEP = RetryPolicy(sleep=lambda s: None)


def scripted(*outcomes):
    """Provider function returning or raising each outcome in turn."""
    queue = list(outcomes)

    def fn(req):
        item = queue.pop(0)
        if isinstance(item, Exception):
            raise item
        return item
    return fn


def gateway(fn, tmp_path=None, **kw):
    provider = FunctionProvider(fn)
    cache = ResponseCache(tmp_path / "cache") if tmp_path is not None else None
    return Gateway({"mock": provider}, cache=cache, policy=kw.pop("policy", NO_SLEEP), **kw), provider


class TestRequest:
    def test_messages_required(self):
        with pytest.raises(ValueError):
            ChatRequest("m", ())

    @pytest.mark.parametrize("t", [-0.1, float("inf"), float("nan")])
    def test_temperature(self, t):
        with pytest.raises(ValueError):
            ChatRequest.single("m", "x", temperature=t)

    def test_role_coercion(self):
        assert Message("assistant", "x").role is Role.assistant


class TestCacheKey:
    BASE = ChatRequest.single("mock/a", "hi", temperature=0.1, thinking_budget=0, max_tokens=5)

    def test_stable(self):
        assert cache_key(self.BASE) == cache_key(ChatRequest.single("mock/a", "hi", temperature=0.1,
                                                                      thinking_budget=0, max_tokens=5))
        assert len(cache_key(self.BASE)) == 64

    @pytest.mark.parametrize("change", [
        {"model_id": "mock/b"}, {"system_prompt": "sys"}, {"messages": (Message(Role.user, "ho"),)},
        {"temperature": 0.2}, {"thinking_budget": 1}, {"max_tokens": 6},
    ])
    def test_every_field_matters(self, change):
        fields = dict(model_id=self.BASE.model_id, messages=self.BASE.messages, temperature=0.1,
                      thinking_budget=0, max_tokens=5)
        fields.update(change)
        assert cache_key(ChatRequest(**fields)) != cache_key(self.BASE)

    def test_seed_matters(self):
        assert cache_key(self.BASE, 0) != cache_key(self.BASE, 1)


class TestCompleteChat:
    def test_second_call_cached(self, tmp_path):
        gw, provider = gateway(lambda r: "answer", tmp_path)
        req = ChatRequest.single("mock/a", "q")
        first = gw.complete_chat(req)
        second = gw.complete_chat(req)
        assert (first.cached, second.cached) == (False, True)
        assert second.text == "answer" and provider.call_count == 1
        assert gw.stats() == {"hits": 1, "misses": 1, "network_calls": 1}

    def test_provider_sees_bare_model(self, tmp_path):
        gw, provider = gateway(lambda r: "x", tmp_path)
        gw.complete_chat(ChatRequest.single("mock/model-7", "q"))
        assert provider.calls[0].model_id == "model-7"

    def test_empty_text_preserved(self, tmp_path):
        gw, _ = gateway(lambda r: ChatResponse("", FinishReason.stop), tmp_path)
        req = ChatRequest.single("mock/a", "q")
        assert gw.complete_chat(req).text == ""
        replay = gw.complete_chat(req)
        assert replay.text == "" and replay.finish_reason is FinishReason.stop and replay.cached

    def test_retry_then_success(self, tmp_path):
        gw, provider = gateway(scripted(TransportError("503", 503), TransportError("503", 503), "ok"), tmp_path)
        resp = gw.complete_chat(ChatRequest.single("mock/a", "q"))
        assert resp.text == "ok" and resp.provider_meta["attempts"] == 3 and provider.call_count == 3

    def test_backoff_schedule(self):
        delays = []
        policy = RetryPolicy(sleep=delays.append)
        gw, _ = gateway(scripted(TransportError("x", 500), TransportError("x", 500), "ok"), policy=policy)
        gw.complete_chat(ChatRequest.single("mock/a", "q"))
        assert delays == [1.0, 4.0]

    def test_exhaustion_carries_status(self, tmp_path):
        gw, provider = gateway(scripted(*[TransportError("busy", 429)] * 3), tmp_path)
        with pytest.raises(TransportError) as info:
            gw.complete_chat(ChatRequest.single("mock/a", "q"))
        assert info.value.status == 429 and provider.call_count == 3
        assert not any((tmp_path / "cache").rglob("*.json"))

    def test_non_retriable_stops(self):
        gw, provider = gateway(scripted(TransportError("bad", 400, retriable=False), "never"))
        with pytest.raises(TransportError) as info:
            gw.complete_chat(ChatRequest.single("mock/a", "q"))
        assert info.value.status == 400 and provider.call_count == 1

    def test_unknown_provider(self):
        gw, _ = gateway(lambda r: "x")
        with pytest.raises(TransportError):
            gw.complete_chat(ChatRequest.single("other/a", "q"))

    def test_default_provider(self):
        provider = FunctionProvider(lambda r: r.model_id)
        gw = Gateway({"default": provider})
        assert gw.complete_chat(ChatRequest.single("plain-model", "q")).text == "plain-model"

    def test_cache_layout(self, tmp_path):
        gw, _ = gateway(lambda r: "x", tmp_path)
        req = ChatRequest.single("mock/a", "q")
        gw.complete_chat(req, run_seed=3)
        key = cache_key(req, 3)
        entry = json.loads((tmp_path / "cache" / key[:2] / f"{key}.json").read_text())
        assert entry["request"] == req.to_dict() and entry["run_seed"] == 3
        assert entry["response"]["text"] == "x" and "created_at" in entry

    def test_run_seed_distinguishes(self, tmp_path):
        gw, provider = gateway(lambda r: f"call {len(provider.calls)}", tmp_path)
        req = ChatRequest.single("mock/a", "q")
        assert gw.complete_chat(req, 0).text != gw.complete_chat(req, 1).text
        assert provider.call_count == 2


@settings(max_examples=40, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(prompt=st.text(max_size=40), system=st.none() | st.text(max_size=20),
       temperature=st.sampled_from([0.0, 0.1, 0.75]), reply=st.text(max_size=60), seed=st.integers(0, 5))
def test_cache_round_trip(tmp_path_factory, prompt, system, temperature, reply, seed):
    cache_dir = tmp_path_factory.mktemp("rt")
    req = ChatRequest.single("mock/a", prompt, system_prompt=system, temperature=temperature)
    live = Gateway({"mock": FunctionProvider(lambda r: reply)}, cache=ResponseCache(cache_dir))
    original = live.complete_chat(req, seed)
    replay_gw = Gateway({}, cache=ResponseCache(cache_dir))
    replay = replay_gw.complete_chat(req, seed)
    assert replay.to_dict() == original.to_dict() and replay.cached
    assert replay_gw.network_calls == 0


class TestEmbeddings:
    def gw(self, tmp_path=None, provider=None):
        cache = ResponseCache(tmp_path / "cache") if tmp_path else None
        return Gateway(embedding_providers={"stub": provider or HashEmbeddingProvider(16)}, cache=cache)

    def test_empty_text_fixed_vector(self):
        (vec,) = self.gw().embed_texts([""], "stub/e")
        expected = np.zeros(16)
        expected[0] = 1.0
        assert np.array_equal(vec, expected)

    def test_deterministic_and_normalized(self):
        a, b, c = self.gw().embed_texts(["kala", "kala", "talo"], "stub/e")
        assert np.array_equal(a, b)
        for v in (a, c):
            assert v.shape == (16,) and abs(np.linalg.norm(v) - 1) < 1e-12

    def test_cached(self, tmp_path):
        gw = self.gw(tmp_path)
        first = gw.embed_texts(["x", "y"], "stub/e")
        calls = gw.network_calls
        again = gw.embed_texts(["y", "x"], "stub/e")
        assert gw.network_calls == calls
        assert np.array_equal(first[0], again[1])

    def test_dimension_mismatch(self):
        class Ragged:
            def embed(self, texts, model):
                return [[1.0] * (2 + i) for i in range(len(texts))]
        with pytest.raises(IntegrityError):
            self.gw(provider=Ragged()).embed_texts(["a", "b"], "stub/e")

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            self.gw().embed_texts([], "stub/e")
