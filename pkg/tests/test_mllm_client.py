import json
import os
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from great.dataset import InteractionImage
from great.errors import BackendError, ConfigError, FixtureMissError, ProtocolError
from great.mllm_client import (
    BackendConfig,
    ChatTurn,
    ReasoningTranscript,
    cache_get,
    cache_put,
    converse,
)
from stub_server import StubServer

PROMPTS = ["p1", "p2", "p3", "p4"]


def _image(image_id="img_7"):
    return InteractionImage(image_id, "kettle", "pour", np.full((3, 32, 32), 0.5, dtype=np.float32))


def _fixture(tmp_path, table):
    path = tmp_path / "fixtures.json"
    path.write_text(json.dumps(table))
    return BackendConfig(kind="fixture", fixture_path=str(path))


def test_fixture_lookup(tmp_path):
    cfg = _fixture(tmp_path, {"img_7": ["one", "two", "three", "four"]})
    assert converse(_image(), PROMPTS, cfg) == ["one", "two", "three", "four"]


def test_fixture_ignores_prompt_text(tmp_path):
    cfg = _fixture(tmp_path, {"img_7": ["one", "two", "three", "four"]})
    assert converse(_image(), ["x"] * 4, cfg) == converse(_image(), PROMPTS, cfg)


def test_fixture_miss_names_image(tmp_path):
    cfg = _fixture(tmp_path, {})
    with pytest.raises(FixtureMissError, match="img_7"):
        converse(_image(), PROMPTS, cfg)


def test_fixture_empty_answer(tmp_path):
    cfg = _fixture(tmp_path, {"img_7": ["one", "  ", "three", "four"]})
    with pytest.raises(ProtocolError):
        converse(_image(), PROMPTS, cfg)


def test_needs_four_prompts(tmp_path):
    cfg = _fixture(tmp_path, {"img_7": ["a", "b", "c", "d"]})
    with pytest.raises(ValueError):
        converse(_image(), PROMPTS[:3], cfg)


def test_http_multi_turn_history():
    with StubServer() as stub:
        cfg = BackendConfig(kind="http", base_url=stub.url, model_name="stub-model", backoff_s=0.0)
        assert converse(_image(), PROMPTS, cfg) == ["A1", "A2", "A3", "A4"]
    assert len(stub.requests) == 4
    assert all(r["path"] == "/v1/chat/completions" for r in stub.requests)
    last = stub.requests[-1]["body"]
    assert last["model"] == "stub-model"
    roles = [m["role"] for m in last["messages"]]
    assert roles == ["user", "assistant"] * 3 + ["user"]
    assert [m["content"][0]["text"] for m in last["messages"][::2]] == PROMPTS
    assert [m["content"][0]["text"] for m in last["messages"][1::2]] == ["A1", "A2", "A3"]
    # only the first user turn carries the image
    images = [p for m in last["messages"] for p in m["content"] if p["type"] == "image"]
    assert len(images) == 1 and last["messages"][0]["content"][1]["type"] == "image"
    assert images[0]["data"]


def test_http_retries_then_succeeds():
    with StubServer(failures=[500, 500]) as stub:
        cfg = BackendConfig(kind="http", base_url=stub.url, max_retries=3, backoff_s=0.01)
        assert converse(_image(), PROMPTS, cfg) == ["A1", "A2", "A3", "A4"]
    assert len(stub.requests) == 6


def test_http_gives_up_with_status():
    with StubServer(failures=[503] * 10) as stub:
        cfg = BackendConfig(kind="http", base_url=stub.url, max_retries=2, backoff_s=0.0)
        with pytest.raises(BackendError) as info:
            converse(_image(), PROMPTS, cfg)
    assert info.value.status == 503
    assert len(stub.requests) == 3


def test_http_client_error_not_retried():
    with StubServer(failures=[400]) as stub:
        cfg = BackendConfig(kind="http", base_url=stub.url, max_retries=3, backoff_s=0.0)
        with pytest.raises(BackendError) as info:
            converse(_image(), PROMPTS, cfg)
    assert info.value.status == 400 and len(stub.requests) == 1


def test_http_auth_from_env(monkeypatch):
    monkeypatch.setenv("GREAT_TEST_TOKEN", "s3cret")
    with StubServer() as stub:
        cfg = BackendConfig(kind="http", base_url=stub.url, auth_token_env="GREAT_TEST_TOKEN")
        converse(_image(), PROMPTS, cfg)
    assert stub.requests[0]["headers"]["Authorization"] == "Bearer s3cret"


def test_http_auth_env_missing(monkeypatch):
    monkeypatch.delenv("GREAT_TEST_TOKEN", raising=False)
    cfg = BackendConfig(kind="http", base_url="http://127.0.0.1:9", auth_token_env="GREAT_TEST_TOKEN")
    with pytest.raises(BackendError, match="GREAT_TEST_TOKEN"):
        converse(_image(), PROMPTS, cfg)


def test_http_empty_answer_is_protocol_error():
    with StubServer(answer=lambda body: "") as stub:
        cfg = BackendConfig(kind="http", base_url=stub.url)
        with pytest.raises(ProtocolError):
            converse(_image(), PROMPTS, cfg)


def test_backend_config_validation():
    with pytest.raises(ConfigError):
        BackendConfig(kind="http")
    with pytest.raises(ConfigError):
        BackendConfig(kind="fixture")
    with pytest.raises(ConfigError):
        BackendConfig(kind="fixture", fixture_path="x", max_retries=-1)
    with pytest.raises(ConfigError):
        BackendConfig(kind="grpc")


def test_chat_turn_invariants():
    ChatTurn("user", "hi", image_attached=True)
    with pytest.raises(ValueError):
        ChatTurn("user", "")
    with pytest.raises(ValueError):
        ChatTurn("assistant", "hi", image_attached=True)


# -- cache ----------------------------------------------------------------------


def _transcript(image_id="img_1", answers=("a", "b", "c", "d")):
    return ReasoningTranscript(image_id, "mug", [(f"p{i}", a) for i, a in enumerate(answers)])


def test_cache_put_get(tmp_path):
    t = _transcript()
    cache_put(t, tmp_path)
    assert cache_get("img_1", tmp_path) == t
    doc = json.loads((tmp_path / "img_1.json").read_text())
    assert set(doc) == {"image_id", "object_category", "turns"}
    assert doc["turns"][0] == {"prompt": "p0", "answer": "a"}


def test_cache_get_empty(tmp_path):
    assert cache_get("img_1", tmp_path) is None


@settings(max_examples=50, deadline=None)
@given(st.lists(st.text(min_size=1), min_size=4, max_size=4))
def test_cache_unicode_round_trip(tmp_path_factory, answers):
    d = tmp_path_factory.mktemp("c")
    t = _transcript(answers=answers)
    cache_put(t, d)
    assert cache_get("img_1", d) == t


def test_cache_corrupt_is_quarantined(tmp_path, caplog):
    (tmp_path / "img_1.json").write_text('{"image_id": "img_1", "turns": [')
    with caplog.at_level("WARNING"):
        assert cache_get("img_1", tmp_path) is None
    assert "corrupt" in caplog.text
    assert not (tmp_path / "img_1.json").exists()
    assert (tmp_path / "img_1.json.corrupt").exists()


def test_cache_wrong_shape_is_quarantined(tmp_path):
    (tmp_path / "img_1.json").write_text(json.dumps({"image_id": "img_1", "object_category": "mug", "turns": []}))
    assert cache_get("img_1", tmp_path) is None


def test_cache_concurrent_writers(tmp_path):
    writers = [_transcript(answers=[f"w{k}-{i}" * 200 for i in range(4)]) for k in range(8)]
    stop = threading.Event()
    torn = []

    def reader():
        while not stop.is_set():
            p = tmp_path / "img_1.json"
            if p.exists():
                try:
                    t = cache_get("img_1", tmp_path)
                except FileNotFoundError:
                    continue
                if t is None and not p.exists() and (tmp_path / "img_1.json.corrupt").exists():
                    torn.append(True)

    def writer(t):
        for _ in range(25):
            cache_put(t, tmp_path)

    r = threading.Thread(target=reader)
    r.start()
    threads = [threading.Thread(target=writer, args=(t,)) for t in writers]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    stop.set()
    r.join()
    assert not torn
    final = cache_get("img_1", tmp_path)
    assert final in writers
    assert not [p for p in os.listdir(tmp_path) if p.endswith(".tmp")]
