"""Text-generation and token-scoring transports.

One wire format (chat completions for generation, echoed completions for
per-token log-probabilities), three transports: a real HTTP client with
retries and a sliding-window rate limiter, a scripted/replay backend fed
by cassette files, and deterministic offline mocks for scoring.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

log = logging.getLogger(__name__)

CAP_GENERATE = "generate"
CAP_SCORE_TOKENS = "score_tokens"

API_KEY_ENV_PREFIX = "ASKBD_API_KEY_"
CACHE_DIR_ENV = "ASKBD_CACHE_DIR"


class BackendError(RuntimeError):
    pass


class RateLimited(BackendError):
    pass


class MalformedResponse(BackendError):
    pass


class Unauthorized(BackendError):
    pass


class CapabilityMissing(BackendError):
    pass


class UnscriptedRequest(MalformedResponse):
    """A request with no matching scripted exchange, in strict mode."""


class StrictScriptedViolation(BackendError):
    """A network transport was requested while strict-scripted is active."""


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    backoff: float = 1.0


@dataclass(frozen=True)
class BackendProfile:
    name: str
    endpoint: str
    model: str
    capabilities: frozenset[str] = frozenset({CAP_GENERATE})
    rate_limit_per_min: int = 60
    retry: RetryPolicy = RetryPolicy()
    cassette: str | None = None
    record: bool = False

    def api_key_env(self) -> str:
        slug = re.sub(r"[^A-Za-z0-9]", "_", self.name).upper()
        return API_KEY_ENV_PREFIX + slug


@dataclass(frozen=True)
class TokenScore:
    token: str
    logprob: float  # natural log, <= 0


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.0
    seed: int | None = None
    max_tokens: int = 1024


Messages = Sequence[Mapping[str, str]]


def request_fingerprint(kind: str, model: str, payload: Mapping) -> str:
    """Stable hash of a normalized request; sampling seed is excluded so
    replay matches regardless of the seed recorded for a run."""
    body = json.dumps(
        {"kind": kind, "model": model, "payload": payload},
        sort_keys=True,
        ensure_ascii=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def generate_fingerprint(model: str, messages: Messages, params: GenerationParams) -> str:
    return request_fingerprint(
        "generate",
        model,
        {
            "messages": [dict(m) for m in messages],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        },
    )


def score_fingerprint(model: str, prefix: str, continuation: str) -> str:
    return request_fingerprint(
        "score", model, {"prefix": prefix, "continuation": continuation}
    )


class RateLimiter:
    """Sliding 60-second window; the single synchronization point."""

    def __init__(
        self,
        limit_per_min: int,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.limit = limit_per_min
        self.clock = clock
        self.sleep = sleep
        self._issued: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            while True:
                now = self.clock()
                while self._issued and now - self._issued[0] >= 60.0:
                    self._issued.popleft()
                if len(self._issued) < self.limit:
                    self._issued.append(now)
                    return
                # floor guards against float round-off stalling the clock
                self.sleep(max(60.0 - (now - self._issued[0]), 1e-3))


# --- Transports ---


def _urllib_transport(url: str, payload: dict, headers: Mapping[str, str], timeout: float = 60.0):
    data = json.dumps(payload).encode("utf-8")
    request = urllib.request.Request(
        url, data=data, headers={"Content-Type": "application/json", **headers}, method="POST"
    )
    try:
        with urllib.request.urlopen(request, timeout=timeout) as response:
            return response.status, json.loads(response.read().decode("utf-8"))
    except urllib.error.HTTPError as err:
        try:
            body = json.loads(err.read().decode("utf-8"))
        except Exception:
            body = {}
        return err.code, body


class HttpBackend:
    """Chat-completions client with retry and rate limiting."""

    def __init__(
        self,
        profile: BackendProfile,
        api_key: str | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        transport=None,
    ):
        self.profile = profile
        self.api_key = api_key if api_key is not None else os.environ.get(profile.api_key_env())
        self.sleep = sleep
        self.transport = transport or _urllib_transport
        self.limiter = RateLimiter(profile.rate_limit_per_min, clock=clock, sleep=sleep)

    def _headers(self) -> dict[str, str]:
        if self.api_key:
            return {"Authorization": f"Bearer {self.api_key}"}
        return {}

    def _post(self, path: str, payload: dict) -> dict:
        url = self.profile.endpoint.rstrip("/") + path
        policy = self.profile.retry
        last_status = None
        for attempt in range(1, policy.max_attempts + 1):
            self.limiter.acquire()
            try:
                status, body = self.transport(url, payload, self._headers())
            except (urllib.error.URLError, OSError) as err:
                log.info("attempt %d to %s failed: %s", attempt, url, err)
                last_status = None
                self.sleep(policy.backoff * 2 ** (attempt - 1))
                continue
            if status == 200:
                log.debug("attempt %d to %s succeeded", attempt, url)
                return body
            if status in (401, 403):
                raise Unauthorized(f"{url} returned {status}")
            if status == 429 or status >= 500:
                log.info("attempt %d to %s got transient status %d", attempt, url, status)
                last_status = status
                self.sleep(policy.backoff * 2 ** (attempt - 1))
                continue
            raise MalformedResponse(f"{url} returned unexpected status {status}")
        if last_status == 429:
            raise RateLimited(f"{url} still rate limited after {policy.max_attempts} attempts")
        raise BackendError(f"{url} failed after {policy.max_attempts} attempts")

    def generate(self, messages: Messages, params: GenerationParams) -> str:
        payload = {
            "model": self.profile.model,
            "messages": [dict(m) for m in messages],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        if params.seed is not None:
            payload["seed"] = params.seed
        body = self._post("/chat/completions", payload)
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as err:
            raise MalformedResponse(f"no message content in response: {err}") from err
        if not isinstance(text, str):
            raise MalformedResponse("message content is not text")
        return text

    def score_tokens(self, prefix: str, continuation: str) -> list[TokenScore]:
        if not continuation:
            return []
        payload = {
            "model": self.profile.model,
            "prompt": prefix + continuation,
            "echo": True,
            "logprobs": 1,
            "max_tokens": 0,
        }
        body = self._post("/completions", payload)
        try:
            info = body["choices"][0]["logprobs"]
            tokens = info["tokens"]
            logprobs = info["token_logprobs"]
            offsets = info["text_offset"]
        except (KeyError, IndexError, TypeError) as err:
            raise MalformedResponse(f"no logprobs in response: {err}") from err
        scores = []
        for token, logprob, offset in zip(tokens, logprobs, offsets):
            if offset < len(prefix):
                continue
            if logprob is None:
                raise MalformedResponse(f"missing logprob for continuation token {token!r}")
            # fp artifacts occasionally report tiny positive values
            scores.append(TokenScore(token, min(float(logprob), 0.0)))
        return scores


class ScriptedBackend:
    """Replays canned exchanges keyed by request fingerprint."""

    def __init__(self, entries: Mapping[str, Mapping], model: str, strict: bool = True):
        self.entries = dict(entries)
        self.model = model
        self.strict = strict

    def generate(self, messages: Messages, params: GenerationParams) -> str:
        key = generate_fingerprint(self.model, messages, params)
        entry = self.entries.get(key)
        if entry is None or "response" not in entry:
            if self.strict:
                raise UnscriptedRequest(f"no scripted response for request {key[:12]}")
            return f"[unscripted:{key[:12]}]"
        return entry["response"]

    def score_tokens(self, prefix: str, continuation: str) -> list[TokenScore]:
        if not continuation:
            return []
        key = score_fingerprint(self.model, prefix, continuation)
        entry = self.entries.get(key)
        if entry is None or "token_scores" not in entry:
            if self.strict:
                raise UnscriptedRequest(f"no scripted scores for request {key[:12]}")
            return []
        return [TokenScore(token, logprob) for token, logprob in entry["token_scores"]]


class RecordingBackend:
    """Wraps a live backend and appends every exchange to a cassette."""

    def __init__(self, inner, model: str, cassette_path):
        self.inner = inner
        self.model = model
        self.cassette_path = Path(cassette_path)

    def _append(self, entry: dict) -> None:
        self.cassette_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.cassette_path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps(entry, sort_keys=True, ensure_ascii=False) + "\n")

    def generate(self, messages: Messages, params: GenerationParams) -> str:
        response = self.inner.generate(messages, params)
        key = generate_fingerprint(self.model, messages, params)
        self._append({"request_hash": key, "response": response})
        return response

    def score_tokens(self, prefix: str, continuation: str) -> list[TokenScore]:
        scores = self.inner.score_tokens(prefix, continuation)
        if continuation:
            key = score_fingerprint(self.model, prefix, continuation)
            self._append(
                {"request_hash": key, "token_scores": [[s.token, s.logprob] for s in scores]}
            )
        return scores


class MockScoreBackend:
    """Deterministic offline scorer; tokens are whitespace words.

    mock:score?logprob=-1.0      constant per-token score
    mock:score?mode=hash&scale=2 per-token scores derived from a stable hash
    """

    def __init__(self, endpoint: str):
        query = urllib.parse.urlparse(endpoint).query
        params = dict(urllib.parse.parse_qsl(query))
        self.mode = params.get("mode", "constant")
        self.logprob = float(params.get("logprob", "-1.0"))
        self.scale = float(params.get("scale", "2.0"))

    def generate(self, messages: Messages, params: GenerationParams) -> str:
        raise CapabilityMissing("mock scorer cannot generate")

    def score_tokens(self, prefix: str, continuation: str) -> list[TokenScore]:
        tokens = continuation.split()
        if self.mode == "hash":
            scores = []
            for position, token in enumerate(tokens):
                digest = hashlib.sha256(f"{prefix}|{position}|{token}".encode()).digest()
                unit = int.from_bytes(digest[:8], "big") / 2**64
                scores.append(TokenScore(token, -(0.1 + unit * self.scale)))
            return scores
        return [TokenScore(token, self.logprob) for token in tokens]


# --- Cassettes and profile files ---


def resolve_cassette_path(path) -> Path:
    """Relative cassette paths resolve against ASKBD_CACHE_DIR when set."""
    path = Path(path)
    cache_dir = os.environ.get(CACHE_DIR_ENV)
    if cache_dir and not path.is_absolute():
        return Path(cache_dir) / path
    return path


def load_cassette(path) -> dict[str, dict]:
    entries: dict[str, dict] = {}
    with open(resolve_cassette_path(path), encoding="utf-8") as handle:
        for raw in handle:
            raw = raw.strip()
            if not raw:
                continue
            entry = json.loads(raw)
            entries[entry["request_hash"]] = entry
    return entries


def load_profiles(path) -> dict[str, BackendProfile]:
    with open(path, encoding="utf-8") as handle:
        data = json.load(handle)
    profiles: dict[str, BackendProfile] = {}
    for raw in data.get("profiles", []):
        try:
            retry = RetryPolicy(**raw.get("retry", {}))
            profile = BackendProfile(
                name=raw["name"],
                endpoint=raw["endpoint"],
                model=raw["model"],
                capabilities=frozenset(raw.get("capabilities", [CAP_GENERATE])),
                rate_limit_per_min=raw.get("rate_limit_per_min", 60),
                retry=retry,
                cassette=raw.get("cassette"),
                record=raw.get("record", False),
            )
        except (KeyError, TypeError) as err:
            raise ValueError(f"bad profile entry {raw!r}: {err}") from err
        profiles[profile.name] = profile
    return profiles


def open_backend(
    profile: BackendProfile,
    strict_scripted: bool = False,
    clock: Callable[[], float] = time.monotonic,
    sleep: Callable[[float], None] = time.sleep,
    transport=None,
    api_key: str | None = None,
):
    """Resolve a profile to a transport.

    scripted:<path> endpoints and replay cassettes never touch the
    network; under strict_scripted an http(s) endpoint is refused before
    any socket is opened.
    """
    endpoint = profile.endpoint
    if endpoint.startswith("scripted:"):
        path = endpoint.split(":", 1)[1]
        return ScriptedBackend(load_cassette(path), profile.model, strict=True)
    if endpoint.startswith("mock:"):
        return MockScoreBackend(endpoint)
    if profile.cassette and not profile.record:
        return ScriptedBackend(load_cassette(profile.cassette), profile.model, strict=True)
    if strict_scripted:
        raise StrictScriptedViolation(
            f"profile {profile.name!r} needs network endpoint {endpoint!r}"
        )
    backend = HttpBackend(profile, api_key=api_key, clock=clock, sleep=sleep, transport=transport)
    if profile.record and profile.cassette:
        return RecordingBackend(backend, profile.model, resolve_cassette_path(profile.cassette))
    return backend


_backend_cache: dict[tuple[BackendProfile, bool], object] = {}
_cache_lock = threading.Lock()


def _resolve(profile: BackendProfile, backend, strict_scripted: bool = False):
    if backend is not None:
        return backend
    with _cache_lock:
        key = (profile, strict_scripted)
        if key not in _backend_cache:
            _backend_cache[key] = open_backend(profile, strict_scripted=strict_scripted)
        return _backend_cache[key]


def generate(
    profile: BackendProfile,
    messages: Messages,
    params: GenerationParams = GenerationParams(),
    backend=None,
) -> str:
    if CAP_GENERATE not in profile.capabilities:
        raise CapabilityMissing(f"profile {profile.name!r} cannot generate")
    return _resolve(profile, backend).generate(messages, params)


def score_tokens(
    profile: BackendProfile,
    prefix: str,
    continuation: str,
    backend=None,
) -> list[TokenScore]:
    if CAP_SCORE_TOKENS not in profile.capabilities:
        raise CapabilityMissing(f"profile {profile.name!r} cannot score tokens")
    if not continuation:
        return []
    return _resolve(profile, backend).score_tokens(prefix, continuation)
