"""Multi-turn conversation with a multimodal LLM, plus the transcript cache.

Two backends share one entry point, :func:`converse`:

* ``http`` posts chat-completions style requests. Every later prompt is sent
  with the full prior history so the chain stays stateful.
* ``fixture`` looks answers up by image id in a JSON file. It is a pure
  function of (image id, prompt index) and stands in for a model in tests.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests
from PIL import Image

from .errors import BackendError, ConfigError, FixtureMissError, ProtocolError

log = logging.getLogger(__name__)

NUM_TURNS = 4
RETRY_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


@dataclass
class ChatTurn:
    role: str
    text: str
    image_attached: bool = False

    def __post_init__(self):
        if self.role not in ("user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")
        if not self.text:
            raise ValueError("chat turn text must be nonempty")
        if self.image_attached and self.role != "user":
            raise ValueError("only user turns may attach the image")


@dataclass
class BackendConfig:
    kind: str = "fixture"
    base_url: str = ""
    auth_token_env: str = ""
    model_name: str = ""
    fixture_path: str = ""
    max_retries: int = 3
    timeout_s: float = 60.0
    backoff_s: float = 0.5
    concurrency: int = 4

    def __post_init__(self):
        if self.kind not in ("http", "fixture"):
            raise ConfigError(f"backend kind must be 'http' or 'fixture', got {self.kind!r}")
        if self.kind == "http" and not self.base_url:
            raise ConfigError("http backend needs base_url")
        if self.kind == "fixture" and not self.fixture_path:
            raise ConfigError("fixture backend needs fixture_path")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class ReasoningTranscript:
    image_id: str
    object_category: str
    turns: list = field(default_factory=list)  # [(prompt, answer)] x 4

    def to_json(self):
        return {
            "image_id": self.image_id,
            "object_category": self.object_category,
            "turns": [{"prompt": p, "answer": a} for p, a in self.turns],
        }

    @classmethod
    def from_json(cls, d):
        turns = [(t["prompt"], t["answer"]) for t in d["turns"]]
        if len(turns) != NUM_TURNS or not all(isinstance(x, str) for t in turns for x in t):
            raise ValueError("transcript needs exactly 4 (prompt, answer) string pairs")
        return cls(str(d["image_id"]), str(d["object_category"]), turns)


# -- conversation -------------------------------------------------------------------


def converse(image, prompts, config):
    """Run the prompts as one conversation about ``image``; return one answer per prompt."""
    prompts = list(prompts)
    if len(prompts) != NUM_TURNS:
        raise ValueError(f"expected {NUM_TURNS} prompts, got {len(prompts)}")
    if config.kind == "fixture":
        answers = _fixture_answers(image.id, config.fixture_path)
    else:
        answers = _HttpConversation(config, image).run(prompts)
    for i, a in enumerate(answers):
        if not isinstance(a, str) or not a.strip():
            raise ProtocolError(f"empty answer for turn {i + 1} of image {image.id!r}")
    return answers


_fixture_lock = threading.Lock()
_fixture_cache = {}


def load_fixtures(path):
    path = Path(path)
    stamp = path.stat().st_mtime_ns
    with _fixture_lock:
        hit = _fixture_cache.get(path)
        if hit is None or hit[0] != stamp:
            hit = (stamp, json.loads(path.read_text(encoding="utf-8")))
            _fixture_cache[path] = hit
    return hit[1]


def _fixture_answers(image_id, path):
    try:
        table = load_fixtures(path)
    except FileNotFoundError as exc:
        raise BackendError(f"fixture file not found: {path}") from exc
    answers = table.get(image_id)
    if answers is None:
        raise FixtureMissError(image_id)
    if len(answers) != NUM_TURNS:
        raise ProtocolError(f"fixture for {image_id!r} has {len(answers)} answers, expected {NUM_TURNS}")
    return list(answers)


def encode_png_base64(pixels):
    arr = np.clip(np.asarray(pixels) * 255.0 + 0.5, 0, 255).astype(np.uint8).transpose(1, 2, 0)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class _HttpConversation:
    def __init__(self, config, image):
        self.config = config
        self.image = image
        self.url = config.base_url.rstrip("/")
        if not self.url.endswith("/chat/completions"):
            self.url += "/chat/completions"
        self.headers = {"Content-Type": "application/json"}
        if config.auth_token_env:
            token = os.environ.get(config.auth_token_env)
            if not token:
                raise BackendError(f"environment variable {config.auth_token_env} is not set")
            self.headers["Authorization"] = f"Bearer {token}"

    def run(self, prompts):
        history = []
        answers = []
        image_b64 = encode_png_base64(self.image.pixels)
        for i, prompt in enumerate(prompts):
            content = [{"type": "text", "text": prompt}]
            if i == 0:
                content.append({"type": "image", "mime_type": "image/png", "data": image_b64})
            history.append({"role": "user", "content": content})
            answer = self._post({"model": self.config.model_name, "messages": history})
            history.append({"role": "assistant", "content": [{"type": "text", "text": answer}]})
            answers.append(answer)
        return answers

    def _post(self, payload):
        delay = self.config.backoff_s
        status = None
        for attempt in range(self.config.max_retries + 1):
            try:
                resp = requests.post(self.url, json=payload, headers=self.headers, timeout=self.config.timeout_s)
            except requests.RequestException as exc:
                status = None
                log.warning("request to %s failed (%s), attempt %d", self.url, exc, attempt + 1)
            else:
                status = resp.status_code
                if 200 <= status < 300:
                    return _answer_text(resp)
                if status not in RETRY_STATUS:
                    raise BackendError(f"backend returned HTTP {status}: {resp.text[:200]}", status=status)
                log.warning("backend returned HTTP %d, attempt %d", status, attempt + 1)
            if attempt < self.config.max_retries:
                time.sleep(delay)
                delay *= 2
        raise BackendError(
            f"backend failed after {self.config.max_retries + 1} attempts (last status {status})", status=status
        )


def _answer_text(resp):
    try:
        msg = resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"unexpected response shape: {resp.text[:200]}") from exc
    if isinstance(msg, list):
        msg = "".join(part.get("text", "") for part in msg if isinstance(part, dict))
    if not isinstance(msg, str) or not msg.strip():
        raise ProtocolError("backend returned an empty answer")
    return msg


# -- transcript cache -------------------------------------------------------------------


def _cache_path(image_id, cache_dir):
    if not image_id or "/" in image_id or "\\" in image_id or image_id.startswith("."):
        raise ValueError(f"image id {image_id!r} cannot be used as a cache key")
    return Path(cache_dir) / f"{image_id}.json"


def cache_get(image_id, cache_dir):
    path = _cache_path(image_id, cache_dir)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        return None
    try:
        transcript = ReasoningTranscript.from_json(json.loads(text))
        if transcript.image_id != image_id:
            raise ValueError(f"cache file holds image id {transcript.image_id!r}")
        return transcript
    except (ValueError, KeyError, TypeError) as exc:
        quarantine = path.with_name(path.name + ".corrupt")
        log.warning("corrupt cache file %s (%s); moved to %s", path, exc, quarantine.name)
        try:
            os.replace(path, quarantine)
        except OSError:
            pass
        return None


def cache_put(transcript, cache_dir):
    path = _cache_path(transcript.image_id, cache_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = json.dumps(transcript.to_json(), ensure_ascii=False, indent=1)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{transcript.image_id}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
