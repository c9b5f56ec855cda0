"""Tests for the synthetic world, stub backends, and the remote client."""

import json
import socket
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from sophia.backends import (
    ATTRIBUTE_DOMAIN,
    BackendConnectionError,
    BackendProtocolError,
    BackendRetryExhausted,
    BackendStatusError,
    GenRequest,
    GenResponse,
    RemoteChatBackend,
    StubReasonerBackend,
    StubVisionBackend,
    SyntheticWorld,
    UnknownImageError,
    make_backend,
    parse_caption_values,
    render_caption,
    sample_corruption_mask,
    stub_reasoner,
    stub_vision_caption,
)
from sophia.core import PipelineConfig, config_replace, derive_rng
from sophia.verifier import extract_answer


# ---------------------------------------------------------------------------
# Synthetic world
# ---------------------------------------------------------------------------


class TestSyntheticWorld:
    def world(self, **kwargs):
        world = SyntheticWorld(seed=7, **kwargs)
        world.register_image("img-a")
        return world

    def test_attributes_deterministic(self):
        assert self.world().attributes("img-a") == self.world().attributes("img-a")

    def test_attributes_in_domain(self):
        values = self.world(attr_count=9).attributes("img-a")
        assert len(values) == 9
        assert all(0 <= v < ATTRIBUTE_DOMAIN for v in values)

    def test_unknown_ref_raises(self):
        with pytest.raises(UnknownImageError):
            self.world().attributes("img-never-issued")

    def test_seed_changes_attributes(self):
        a = self.world().attributes("img-a")
        other = SyntheticWorld(seed=8)
        other.register_image("img-a")
        assert a != other.attributes("img-a")

    def test_decoy_never_equals_value(self):
        world = self.world()
        for v in range(ATTRIBUTE_DOMAIN):
            assert world.decoy(v) != v
            assert 0 <= world.decoy(v) < ATTRIBUTE_DOMAIN

    def test_corrupt_applies_mask(self):
        world = self.world()
        values = (1, 2, 3, 4)
        assert world.corrupt(values, [False, True, False, True]) == (1, 3, 3, 5)

    def test_corruption_always_changes_sum(self):
        """No corruption pattern may leave the sum intact (M < 10)."""
        world = self.world()
        values = world.attributes("img-a")
        for pattern in range(1, 2 ** len(values)):
            mask = [(pattern >> i) & 1 == 1 for i in range(len(values))]
            assert sum(world.corrupt(values, mask)) != sum(values)

    @pytest.mark.parametrize("gold_fn,values,expected", [
        ("sum", (3, 0, 9, 3), 15),
        ("max", (3, 0, 9, 3), 9),
        ("count", (3, 0, 9, 3), 3),
    ])
    def test_gold_fns(self, gold_fn, values, expected):
        assert SyntheticWorld(seed=0, gold_fn=gold_fn).gold_value(values) == expected

    def test_make_tasks(self):
        world = SyntheticWorld(seed=7)
        tasks = world.make_tasks(5)
        assert len({t.id for t in tasks}) == 5
        for task in tasks:
            assert task.gold_answer == str(world.gold_value(world.attributes(task.image_ref)))
            assert task.query == world.query_text()

    def test_bad_gold_fn(self):
        with pytest.raises(ValueError):
            SyntheticWorld(seed=0, gold_fn="median")


class TestCaptionRendering:
    def test_round_trip(self):
        values = [4, 0, 9, 7]
        assert parse_caption_values(render_caption(values)) == values

    def test_parse_ignores_surrounding_text(self):
        text = "Preamble. Dial 1 shows 5. Noise. Dial 2 shows 0. Postamble."
        assert parse_caption_values(text) == [5, 0]

    def test_parse_empty(self):
        assert parse_caption_values("a cat on a mat") == []

    def test_mask_fidelity_extremes(self):
        rng = derive_rng(1, "mask")
        assert sample_corruption_mask(rng, 6, 1.0) == [False] * 6
        assert sample_corruption_mask(rng, 6, 0.0) == [True] * 6

    def test_full_fidelity_caption_reports_truth(self):
        world = SyntheticWorld(seed=7)
        world.register_image("img-a")
        caption = stub_vision_caption(world, "img-a", derive_rng(0, "c"))
        assert tuple(parse_caption_values(caption)) == world.attributes("img-a")


class TestStubReasoner:
    def prompt_for(self, caption, query="What is the sum of all the dial readings shown in the image?"):
        return f"<description>\n{caption}\n</description>\n\nQuestion: {query}"

    def test_answers_gold_of_caption(self):
        world = SyntheticWorld(seed=7)
        text = stub_reasoner(world, self.prompt_for(render_caption([2, 3, 4, 5])), derive_rng(0, "r"))
        assert extract_answer(text) == "14"
        assert "<think>" in text

    def test_answer_follows_caption_not_truth(self):
        """A corrupted caption drags the answer with it."""
        world = SyntheticWorld(seed=7)
        world.register_image("img-a")
        true_values = world.attributes("img-a")
        wrong = [world.decoy(true_values[0]), *true_values[1:]]
        text = stub_reasoner(world, self.prompt_for(render_caption(wrong)), derive_rng(0, "r"))
        assert extract_answer(text) == str(sum(wrong))

    def test_last_description_block_wins(self):
        world = SyntheticWorld(seed=7)
        prompt = (
            f"<description>{render_caption([1, 1, 1, 1])}</description>"
            f"<description>{render_caption([2, 2, 2, 2])}</description>"
            "Question: what is the sum?"
        )
        assert extract_answer(stub_reasoner(world, prompt, derive_rng(0, "r"))) == "8"

    def test_no_readings_no_boxed_answer(self):
        world = SyntheticWorld(seed=7)
        text = stub_reasoner(world, self.prompt_for("a cat."), derive_rng(0, "r"))
        assert extract_answer(text) is None

    def test_zero_skill_always_off_by_one(self):
        world = SyntheticWorld(seed=7, reasoner_skill=0.0)
        gold = 14
        for i in range(20):
            text = stub_reasoner(world, self.prompt_for(render_caption([2, 3, 4, 5])), derive_rng(i, "r"))
            assert extract_answer(text) in (str(gold - 1), str(gold + 1))


class TestStubBackends:
    def setup_method(self):
        self.world = SyntheticWorld(seed=7)
        self.world.register_image("img-a")

    def test_vision_requires_image_ref(self):
        backend = StubVisionBackend(self.world)
        with pytest.raises(UnknownImageError):
            backend.generate(GenRequest(system_prompt="s", user_prompt="u"))

    def test_vision_deterministic_per_seed(self):
        backend = StubVisionBackend(self.world)
        req = GenRequest(system_prompt="s", user_prompt="u", seed=11, image_ref="img-a")
        assert backend.generate(req) == backend.generate(req)

    def test_reasoner_token_count_matches_whitespace_rule(self):
        backend = StubReasonerBackend(self.world)
        caption = render_caption(self.world.attributes("img-a"))
        req = GenRequest(
            system_prompt="s",
            user_prompt=f"<description>{caption}</description>",
            seed=3,
        )
        resp = backend.generate(req)
        assert resp.token_count == len(resp.text.split())

    def test_truncation_respects_max_tokens(self):
        backend = StubReasonerBackend(self.world)
        caption = render_caption(self.world.attributes("img-a"))
        req = GenRequest(
            system_prompt="s",
            user_prompt=f"<description>{caption}</description>",
            seed=3,
            max_tokens=5,
        )
        assert backend.generate(req).token_count <= 5

    def test_make_backend_stub(self):
        config = PipelineConfig()
        assert isinstance(make_backend("vision", config, self.world), StubVisionBackend)
        assert isinstance(make_backend("reasoning", config, self.world), StubReasonerBackend)

    def test_make_backend_remote(self):
        config = config_replace(
            PipelineConfig(),
            reasoning=PipelineConfig().reasoning.__class__(
                kind="remote", url="http://127.0.0.1:9/v1", model="m", max_attempts=2
            ),
        )
        backend = make_backend("reasoning", config, self.world)
        assert isinstance(backend, RemoteChatBackend)
        assert backend.max_attempts == 2

    def test_request_validation(self):
        with pytest.raises(ValueError):
            GenRequest(system_prompt="s", user_prompt="u", max_tokens=0)
        with pytest.raises(ValueError):
            GenRequest(system_prompt="s", user_prompt="u", temperature=-1.0)


# ---------------------------------------------------------------------------
# Remote client against a local mock endpoint
# ---------------------------------------------------------------------------


class _EndpointState:
    def __init__(self, script):
        # script: list of (status, body bytes) served in order; the last
        # entry repeats if more requests arrive.
        self.script = script
        self.bodies = []
        self.headers = []


def _make_handler(state):
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            state.bodies.append(self.rfile.read(length))
            state.headers.append(dict(self.headers))
            status, body = state.script[min(len(state.bodies) - 1, len(state.script) - 1)]
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, *args):
            pass

    return Handler


@pytest.fixture
def endpoint():
    servers = []

    def start(script):
        state = _EndpointState(script)
        server = HTTPServer(("127.0.0.1", 0), _make_handler(state))
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        servers.append(server)
        url = f"http://127.0.0.1:{server.server_address[1]}/v1/chat/completions"
        return url, state

    yield start
    for server in servers:
        server.shutdown()
        server.server_close()


def _ok_body(text="hello", completion_tokens=5):
    return json.dumps({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 3, "completion_tokens": completion_tokens},
    }).encode()


def _request(**kwargs):
    defaults = dict(system_prompt="sys", user_prompt="user text", seed=42, max_tokens=64)
    defaults.update(kwargs)
    return GenRequest(**defaults)


class TestRemoteClient:
    def test_success(self, endpoint):
        url, state = endpoint([(200, _ok_body("a caption", 7))])
        client = RemoteChatBackend(url, model="m1", sleep=lambda s: None)
        resp = client.generate(_request())
        assert isinstance(resp, GenResponse)
        assert resp.text == "a caption"
        assert resp.token_count == 7
        assert resp.backend_id == "remote:m1"

    def test_wire_shape(self, endpoint):
        url, state = endpoint([(200, _ok_body())])
        client = RemoteChatBackend(url, model="m1", sleep=lambda s: None)
        client.generate(_request(image_ref="img-9", temperature=0.3))
        sent = json.loads(state.bodies[0])
        assert sent["model"] == "m1"
        assert sent["seed"] == 42
        assert sent["temperature"] == 0.3
        assert sent["max_tokens"] == 64
        assert sent["messages"][0] == {"role": "system", "content": "sys"}
        assert sent["messages"][1]["content"] == "[image: img-9]\nuser text"

    def test_auth_header_from_env_only(self, endpoint, monkeypatch):
        url, state = endpoint([(200, _ok_body()), (200, _ok_body())])
        client = RemoteChatBackend(url, model="m", sleep=lambda s: None)
        monkeypatch.delenv("SOPHIA_API_TOKEN", raising=False)
        client.generate(_request())
        assert "Authorization" not in state.headers[0]
        monkeypatch.setenv("SOPHIA_API_TOKEN", "sk-test-123")
        client.generate(_request())
        assert state.headers[1]["Authorization"] == "Bearer sk-test-123"

    def test_retry_then_success_identical_bodies(self, endpoint):
        url, state = endpoint([(500, b"oops"), (503, b"busy"), (200, _ok_body())])
        delays = []
        client = RemoteChatBackend(url, model="m", max_attempts=3,
                                   backoff_base=0.5, sleep=delays.append)
        resp = client.generate(_request())
        assert resp.text == "hello"
        assert len(state.bodies) == 3
        assert state.bodies[0] == state.bodies[1] == state.bodies[2]
        assert delays == [0.5, 1.0]

    def test_429_is_retryable(self, endpoint):
        url, state = endpoint([(429, b"slow down"), (200, _ok_body())])
        client = RemoteChatBackend(url, model="m", max_attempts=2, sleep=lambda s: None)
        assert client.generate(_request()).text == "hello"
        assert len(state.bodies) == 2

    def test_client_error_immediate_no_retry(self, endpoint):
        url, state = endpoint([(400, b"bad request")])
        client = RemoteChatBackend(url, model="m", max_attempts=3, sleep=lambda s: None)
        with pytest.raises(BackendStatusError) as err:
            client.generate(_request())
        assert err.value.status == 400
        assert len(state.bodies) == 1

    def test_retry_exhausted(self, endpoint):
        url, state = endpoint([(500, b"oops")])
        client = RemoteChatBackend(url, model="m", max_attempts=3, sleep=lambda s: None)
        with pytest.raises(BackendRetryExhausted) as err:
            client.generate(_request())
        assert err.value.attempts == 3
        assert isinstance(err.value.last_error, BackendStatusError)
        assert len(state.bodies) == 3

    def test_never_exceeds_max_attempts(self, endpoint):
        url, state = endpoint([(500, b"oops")])
        client = RemoteChatBackend(url, model="m", max_attempts=2, sleep=lambda s: None)
        with pytest.raises(BackendRetryExhausted):
            client.generate(_request())
        assert len(state.bodies) == 2

    def test_malformed_json_is_protocol_error(self, endpoint):
        url, state = endpoint([(200, b"this is not json")])
        client = RemoteChatBackend(url, model="m", sleep=lambda s: None)
        with pytest.raises(BackendProtocolError):
            client.generate(_request())
        assert len(state.bodies) == 1

    def test_missing_choices_is_protocol_error(self, endpoint):
        url, state = endpoint([(200, json.dumps({"choices": []}).encode())])
        client = RemoteChatBackend(url, model="m", sleep=lambda s: None)
        with pytest.raises(BackendProtocolError):
            client.generate(_request())

    def test_connection_error_single_attempt(self):
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        dead_port = probe.getsockname()[1]
        probe.close()
        client = RemoteChatBackend(
            f"http://127.0.0.1:{dead_port}/v1", model="m",
            max_attempts=1, timeout=0.5, sleep=lambda s: None,
        )
        with pytest.raises(BackendConnectionError):
            client.generate(_request())

    def test_connection_error_exhausts_retries(self):
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        dead_port = probe.getsockname()[1]
        probe.close()
        client = RemoteChatBackend(
            f"http://127.0.0.1:{dead_port}/v1", model="m",
            max_attempts=2, timeout=0.5, sleep=lambda s: None,
        )
        with pytest.raises(BackendRetryExhausted) as err:
            client.generate(_request())
        assert isinstance(err.value.last_error, BackendConnectionError)

    def test_missing_usage_leaves_token_count_unset(self, endpoint):
        body = json.dumps({"choices": [{"message": {"content": "x"}}]}).encode()
        url, state = endpoint([(200, body)])
        client = RemoteChatBackend(url, model="m", sleep=lambda s: None)
        assert client.generate(_request()).token_count is None
