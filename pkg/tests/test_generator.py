from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from popfix.errors import CacheMissError, ContractError, ScriptExhaustedError, TransportError
from popfix.generator import (
    BackendConfig,
    BackendKind,
    GeneratorExchange,
    HttpBackend,
    RecordingBackend,
    ReplayBackend,
    ScriptedBackend,
    ScriptedRule,
    make_backend,
    prompt_hash,
)
from popfix.operators import PromptBundle, PromptKind


def bundle(text: str = "hello", kind: PromptKind = PromptKind.INIT) -> PromptBundle:
    return PromptBundle(kind=kind, rendered_text=text, source_pool=(), token_estimate=1)


class TestScriptedBackend:
    def test_queue_semantics(self):
        backend = ScriptedBackend(["r1", "r2"])
        assert backend.generate(bundle()).response_text == "r1"
        assert backend.generate(bundle()).response_text == "r2"
        with pytest.raises(ScriptExhaustedError):
            backend.generate(bundle())

    def test_contains_rule(self):
        backend = ScriptedBackend(
            [
                ScriptedRule(response="special", contains="Candidate 2"),
                ScriptedRule(response="generic"),
            ]
        )
        assert backend.generate(bundle("pool with Candidate 2 inside")).response_text == "special"
        assert backend.generate(bundle("nothing of note")).response_text == "generic"

    def test_contains_requires_all_substrings(self):
        backend = ScriptedBackend(
            [ScriptedRule(response="both", contains=("alpha", "beta")), ScriptedRule(response="fallback")]
        )
        assert backend.generate(bundle("alpha only")).response_text == "fallback"
        assert backend.generate(bundle("alpha and beta")).response_text == "both"

    def test_kind_ordinal_rule(self):
        backend = ScriptedBackend(
            [
                ScriptedRule(response="third mutation", kind="mutation", ordinal=3),
                ScriptedRule(response="other"),
            ]
        )
        outs = [backend.generate(bundle(kind=PromptKind.MUTATION)).response_text for _ in range(3)]
        assert outs == ["other", "other", "third mutation"]

    def test_once_rule_consumed(self):
        backend = ScriptedBackend(
            [ScriptedRule(response="first time", once=True), ScriptedRule(response="after")]
        )
        assert backend.generate(bundle()).response_text == "first time"
        assert backend.generate(bundle()).response_text == "after"

    def test_default_response(self):
        backend = ScriptedBackend([], default_response="always this")
        for _ in range(5):
            assert backend.generate(bundle()).response_text == "always this"

    def test_call_count_and_deterministic_fields(self):
        backend = ScriptedBackend(["a", "b"])
        first = backend.generate(bundle())
        second = backend.generate(bundle())
        assert backend.call_count == 2
        assert (first.request_id, second.request_id) == ("q00001", "q00002")
        assert first.latency_s == 0.0
        assert first.backend_tag == "scripted"

    def test_from_file(self, tmp_path):
        script = [
            {"response": "one", "kind": "init"},
            {"response": "two", "contains": "magic", "once": True},
        ]
        path = tmp_path / "script.json"
        path.write_text(json.dumps(script), encoding="utf-8")
        backend = ScriptedBackend.from_file(path)
        assert backend.generate(bundle("has magic", kind=PromptKind.MUTATION)).response_text == "two"
        assert backend.generate(bundle(kind=PromptKind.INIT)).response_text == "one"


class TestRecordReplay:
    def test_roundtrip_identical_bytes(self, tmp_path):
        cache = tmp_path / "cache.jsonl"
        recorded = RecordingBackend(ScriptedBackend(["resp-A", "resp-B"]), cache)
        b1, b2 = bundle("prompt one"), bundle("prompt two", kind=PromptKind.MUTATION)
        first, second = recorded.generate(b1), recorded.generate(b2)

        replay = ReplayBackend(cache)
        again_1, again_2 = replay.generate(b1), replay.generate(b2)
        assert again_1.response_text == first.response_text == "resp-A"
        assert again_2.response_text == second.response_text
        assert again_1.request_id == first.request_id
        assert again_1.prompt_tokens == first.prompt_tokens

    def test_identical_prompts_replay_fifo(self, tmp_path):
        cache = tmp_path / "cache.jsonl"
        recorded = RecordingBackend(ScriptedBackend(["first", "second"]), cache)
        same = bundle("identical prompt")
        recorded.generate(same)
        recorded.generate(same)
        replay = ReplayBackend(cache)
        assert replay.generate(same).response_text == "first"
        assert replay.generate(same).response_text == "second"
        with pytest.raises(CacheMissError):
            replay.generate(same)

    def test_miss_on_unknown_prompt(self, tmp_path):
        cache = tmp_path / "cache.jsonl"
        RecordingBackend(ScriptedBackend(["x"]), cache).generate(bundle("known"))
        with pytest.raises(CacheMissError):
            ReplayBackend(cache).generate(bundle("unknown"))

    def test_missing_cache_file(self, tmp_path):
        with pytest.raises(CacheMissError):
            ReplayBackend(tmp_path / "absent.jsonl")

    def test_hash_covers_kind_model_temperature(self):
        base = prompt_hash("init", "text", "model-a", 0.8)
        assert prompt_hash("mutation", "text", "model-a", 0.8) != base
        assert prompt_hash("init", "text2", "model-a", 0.8) != base
        assert prompt_hash("init", "text", "model-b", 0.8) != base
        assert prompt_hash("init", "text", "model-a", 0.2) != base


class _StubHandler(BaseHTTPRequestHandler):
    server_version = "stub"

    def do_POST(self):
        state = self.server.state
        with state["lock"]:
            state["in_flight"] += 1
            state["high_water"] = max(state["high_water"], state["in_flight"])
            state["requests"].append(json.loads(self.rfile.read(int(self.headers["Content-Length"]))))
            state["auth_headers"].append(self.headers.get("Authorization"))
            behavior = state["behaviors"].pop(0) if state["behaviors"] else {"status": 200}
        try:
            if behavior.get("sleep"):
                time.sleep(behavior["sleep"])
            status = behavior.get("status", 200)
            if status != 200:
                self.send_response(status)
                self.end_headers()
                self.wfile.write(b"{}")
                return
            reply = behavior.get(
                "payload",
                {
                    "choices": [{"message": {"content": behavior.get("content", "stub reply")}}],
                    "usage": {"prompt_tokens": 11, "completion_tokens": 7},
                },
            )
            body = json.dumps(reply).encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
        finally:
            with state["lock"]:
                state["in_flight"] -= 1

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    server.state = {
        "lock": threading.Lock(),
        "in_flight": 0,
        "high_water": 0,
        "behaviors": [],
        "requests": [],
        "auth_headers": [],
    }
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()
    server.server_close()


def http_config(server, **kwargs) -> BackendConfig:
    defaults = dict(
        backend=BackendKind.HTTP,
        endpoint_url=f"http://127.0.0.1:{server.server_address[1]}",
        model_name="stub-model",
        max_retries=2,
        retry_backoff_s=0.01,
        request_timeout_s=5.0,
    )
    defaults.update(kwargs)
    return BackendConfig(**defaults)


class TestHttpBackend:
    def test_canned_completion_with_usage(self, stub_server, monkeypatch):
        monkeypatch.setenv("POPFIX_API_KEY", "sk-test")
        stub_server.state["behaviors"].append({"content": "the canned answer"})
        backend = HttpBackend(http_config(stub_server))
        exchange = backend.generate(bundle("live prompt"))
        assert exchange.response_text == "the canned answer"
        assert (exchange.prompt_tokens, exchange.completion_tokens) == (11, 7)
        assert exchange.latency_s > 0
        assert exchange.backend_tag == "http"
        assert stub_server.state["auth_headers"][0] == "Bearer sk-test"
        sent = stub_server.state["requests"][0]
        assert sent["model"] == "stub-model"
        assert sent["messages"] == [{"role": "user", "content": "live prompt"}]

    def test_retries_on_5xx_then_succeeds(self, stub_server):
        stub_server.state["behaviors"] += [{"status": 500}, {"status": 429}, {"content": "third time"}]
        backend = HttpBackend(http_config(stub_server))
        assert backend.generate(bundle()).response_text == "third time"

    def test_exhausted_retries_raise_transport_error(self, stub_server):
        stub_server.state["behaviors"] += [{"status": 503}] * 5
        backend = HttpBackend(http_config(stub_server, max_retries=1))
        with pytest.raises(TransportError):
            backend.generate(bundle())

    def test_cost_estimation_from_price_table(self, stub_server):
        stub_server.state["behaviors"].append({"content": "x"})
        cfg = http_config(
            stub_server, price_per_1k={"stub-model": {"prompt": 1.0, "completion": 2.0}}
        )
        exchange = HttpBackend(cfg).generate(bundle())
        assert exchange.estimated_cost == pytest.approx(11 / 1000 * 1.0 + 7 / 1000 * 2.0)

    def test_in_flight_bounded(self, stub_server):
        stub_server.state["behaviors"] += [{"sleep": 0.15}] * 8
        backend = HttpBackend(http_config(stub_server, max_in_flight=2))
        with ThreadPoolExecutor(max_workers=8) as pool:
            list(pool.map(lambda _: backend.generate(bundle()), range(8)))
        assert stub_server.state["high_water"] <= 2
        assert backend.in_flight_high_water <= 2

    def test_malformed_payload_is_backend_error(self, stub_server):
        from popfix.errors import BackendError

        stub_server.state["behaviors"].append({"payload": {"weird": True}})
        with pytest.raises(BackendError):
            HttpBackend(http_config(stub_server)).generate(bundle())


class TestMakeBackend:
    def test_dispatch(self, tmp_path):
        script = tmp_path / "script.json"
        script.write_text(json.dumps([{"response": "hi"}]), encoding="utf-8")
        cache = tmp_path / "cache.jsonl"
        RecordingBackend(ScriptedBackend(["resp"]), cache).generate(bundle())

        assert isinstance(
            make_backend(BackendConfig(backend=BackendKind.SCRIPTED, cache_path=str(script))),
            ScriptedBackend,
        )
        assert isinstance(
            make_backend(BackendConfig(backend=BackendKind.REPLAY, cache_path=str(cache))),
            ReplayBackend,
        )
        with pytest.raises(ContractError):
            make_backend(BackendConfig(backend=BackendKind.SCRIPTED))
        with pytest.raises(ContractError):
            BackendConfig(backend=BackendKind.HTTP)

    def test_exchange_serialization_roundtrip(self):
        exchange = ScriptedBackend(["x"]).generate(bundle())
        assert GeneratorExchange.from_dict(exchange.to_dict()) == exchange
