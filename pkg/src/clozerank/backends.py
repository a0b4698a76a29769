"""Chat-completion clients: HTTP, scripted mock, and a persistent response cache.

Three backend roles are configured independently (masking, completion,
comparison).  Every stage talks to a :class:`Backend` through
:meth:`Backend.chat`, which takes a :class:`ChatRequest` and returns the reply
text of the first choice.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import logging
import os
import random
import tempfile
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import httpx

from .errors import BackendConfigError, BackendError, CacheMissError, ScriptMissError

log = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})


class Role(str, enum.Enum):
    MASKER = "MASKER"
    COMPLETER = "COMPLETER"
    COMPARATOR = "COMPARATOR"

    @property
    def section(self) -> str:
        return self.value.lower()


@dataclass(frozen=True)
class ImagePart:
    media_type: str
    data: bytes

    @property
    def b64(self) -> str:
        return base64.b64encode(self.data).decode("ascii")

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.data).hexdigest()


@dataclass(frozen=True)
class Message:
    role: str
    text: str
    image: ImagePart | None = None


@dataclass(frozen=True)
class RequestTag:
    """Pipeline bookkeeping attached to a request; never sent on the wire.

    For masking requests ``item_id`` carries the mask kind (``VERB``/``COLOR``).
    """

    query_id: str | None = None
    item_id: str | None = None


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    target: Role
    tag: RequestTag = RequestTag()

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        object.__setattr__(self, "target", Role(self.target))
        if sum(m.image is not None for m in self.messages) > 1:
            raise ValueError("a chat request carries at most one image")

    def canonical(self) -> list[dict]:
        out = []
        for m in self.messages:
            rec: dict[str, Any] = {"role": m.role, "text": m.text}
            if m.image is not None:
                rec["image"] = {"media_type": m.image.media_type, "sha256": m.image.digest}
            out.append(rec)
        return out

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class BackendConfig:
    name: str
    endpoint_url: str = ""
    model_id: str = ""
    api_key_env: str | None = None
    max_retries: int = 2
    timeout: float = 120.0
    parallelism: int = 4
    determinism_settings: dict = field(default_factory=lambda: {"temperature": 0.0})
    backoff: float = 1.0

    def __post_init__(self):
        if self.max_retries < 0:
            raise BackendConfigError(f"{self.name}: max_retries must be >= 0")
        if not self.timeout > 0:
            raise BackendConfigError(f"{self.name}: timeout must be > 0")
        if self.parallelism < 1:
            raise BackendConfigError(f"{self.name}: parallelism must be >= 1")

    def identity(self) -> dict:
        return {"name": self.name, "model_id": self.model_id, "determinism_settings": self.determinism_settings}


class Backend:
    config: BackendConfig

    def chat(self, request: ChatRequest) -> str:
        raise NotImplementedError

    def stats(self) -> dict:
        return {}


def wire_messages(messages: tuple[Message, ...]) -> list[dict]:
    """Chat-completions message array; images go inline as data URLs."""
    out = []
    for m in messages:
        if m.image is None:
            out.append({"role": m.role, "content": m.text})
            continue
        out.append(
            {
                "role": m.role,
                "content": [
                    {"type": "text", "text": m.text},
                    {"type": "image_url", "image_url": {"url": f"data:{m.image.media_type};base64,{m.image.b64}"}},
                ],
            }
        )
    return out


class HTTPBackend(Backend):
    """Client for an OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(self, config: BackendConfig, client: httpx.Client | None = None):
        if not config.endpoint_url:
            raise BackendConfigError(f"{config.name}: endpoint_url is required")
        if not config.model_id:
            raise BackendConfigError(f"{config.name}: model_id is required")
        self.config = config
        self._api_key = None
        if config.api_key_env:
            self._api_key = os.environ.get(config.api_key_env)
            if not self._api_key:
                raise BackendConfigError(
                    f"{config.name}: credential variable {config.api_key_env} is not set"
                )
        self._client = client or httpx.Client(timeout=config.timeout)
        self._slots = threading.BoundedSemaphore(config.parallelism)
        self._lock = threading.Lock()
        self._counts: Counter = Counter()
        self.in_flight = 0
        self.max_in_flight = 0

    @property
    def url(self) -> str:
        base = self.config.endpoint_url.rstrip("/")
        return base if base.endswith("/chat/completions") else base + "/chat/completions"

    def _count(self, key: str, n: int = 1):
        with self._lock:
            self._counts[key] += n

    def stats(self) -> dict:
        with self._lock:
            return dict(self._counts)

    def _body(self, request: ChatRequest) -> dict:
        body = dict(self.config.determinism_settings)
        body["model"] = self.config.model_id
        body["messages"] = wire_messages(request.messages)
        return body

    def chat(self, request: ChatRequest) -> str:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        body = self._body(request)
        self._count("requests")
        last: BackendError | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                delay = self.config.backoff * 2 ** (attempt - 1)
                time.sleep(delay * (1 + 0.1 * random.random()))
            self._count("attempts")
            try:
                with self._slots:
                    with self._lock:
                        self.in_flight += 1
                        self.max_in_flight = max(self.max_in_flight, self.in_flight)
                    try:
                        resp = self._client.post(self.url, json=body, headers=headers, timeout=self.config.timeout)
                    finally:
                        with self._lock:
                            self.in_flight -= 1
            except httpx.TransportError as exc:
                last = BackendError(f"{self.config.name}: transport error: {exc!r}", retryable=True)
                log.warning("%s attempt %d failed: %r", self.config.name, attempt + 1, exc)
                continue
            if resp.status_code >= 400:
                retryable = resp.status_code in RETRYABLE_STATUS
                last = BackendError(
                    f"{self.config.name}: HTTP {resp.status_code}: {resp.text[:200]}",
                    status=resp.status_code,
                    retryable=retryable,
                )
                if not retryable:
                    last.attempts = attempt + 1
                    self._count("failures")
                    raise last
                log.warning("%s attempt %d got HTTP %d", self.config.name, attempt + 1, resp.status_code)
                continue
            try:
                content = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                self._count("failures")
                raise BackendError(f"{self.config.name}: malformed response body: {exc!r}", status=resp.status_code)
            if isinstance(content, list):
                content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
            return content or ""
        assert last is not None
        last.attempts = self.config.max_retries + 1
        self._count("failures")
        raise last


# -- scripted mock ---------------------------------------------------------


@dataclass(frozen=True)
class ScriptRecord:
    stage: Role | None
    response: str | None
    query_id: str | None = None
    item_id: str | None = None
    digest: str | None = None
    error: str | None = None


class Script:
    """Lookup table behind :class:`ScriptedBackend`.

    Records are resolved, in order, by exact message digest, by the pipeline
    tag ``(stage, query_id, item_id)`` (then ``(stage, query_id, *)``), and
    finally by stage default (``(stage, item_id)`` then ``stage``).
    """

    def __init__(self, records: list[ScriptRecord] = ()):
        self.by_digest: dict[str, ScriptRecord] = {}
        self.by_tag: dict[tuple, ScriptRecord] = {}
        self.defaults: dict[tuple, ScriptRecord] = {}
        for rec in records:
            self.add(rec)

    def add(self, rec: ScriptRecord):
        if rec.digest:
            table, key = self.by_digest, rec.digest
        elif rec.query_id is not None:
            table, key = self.by_tag, (rec.stage, rec.query_id, rec.item_id)
        else:
            table, key = self.defaults, (rec.stage, rec.item_id)
        if key in table:
            raise ValueError(f"duplicate script record for {key}")
        table[key] = rec

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Script":
        records = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    raw = json.loads(line)
                    stage = Role(raw["stage"]) if raw.get("stage") else None
                    if stage is None and not raw.get("digest"):
                        raise ValueError("record needs a stage or a digest")
                    if "response" not in raw and "error" not in raw:
                        raise ValueError("record needs a response or an error")
                    records.append(
                        ScriptRecord(
                            stage=stage,
                            response=raw.get("response"),
                            query_id=raw.get("query_id"),
                            item_id=raw.get("item_id"),
                            digest=raw.get("digest"),
                            error=raw.get("error"),
                        )
                    )
                except (ValueError, KeyError) as exc:
                    raise BackendConfigError(f"{path}:{lineno}: bad script record: {exc}") from exc
        try:
            return cls(records)
        except ValueError as exc:
            raise BackendConfigError(f"{path}: {exc}") from exc

    def dump(self, path: str | os.PathLike):
        recs = list(self.by_digest.values()) + list(self.by_tag.values()) + list(self.defaults.values())
        with open(path, "w", encoding="utf-8") as fh:
            for r in recs:
                row = {k: v for k, v in asdict(r).items() if v is not None}
                if r.stage is not None:
                    row["stage"] = r.stage.value
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    def resolve(self, request: ChatRequest) -> tuple[ScriptRecord | None, list[str]]:
        stage, tag = request.target, request.tag
        attempted = [f"digest={request.digest()[:16]}"]
        rec = self.by_digest.get(request.digest())
        if rec:
            return rec, attempted
        if tag.query_id is not None:
            for key in ((stage, tag.query_id, tag.item_id), (stage, tag.query_id, None)):
                attempted.append(f"({key[0].value}, {key[1]}, {key[2]})")
                if key in self.by_tag:
                    return self.by_tag[key], attempted
        for key in ((stage, tag.item_id), (stage, None)):
            attempted.append(f"default({stage.value}{', ' + key[1] if key[1] else ''})")
            if key in self.defaults:
                return self.defaults[key], attempted
        return None, attempted


class ScriptedBackend(Backend):
    """Deterministic stand-in for all three roles; never touches the network."""

    def __init__(self, script: Script, name: str = "scripted"):
        self.script = script
        self.config = BackendConfig(name=name, model_id="scripted", determinism_settings={})
        self._lock = threading.Lock()
        self.lookups = 0
        self.misses = 0

    def chat(self, request: ChatRequest) -> str:
        rec, attempted = self.script.resolve(request)
        with self._lock:
            self.lookups += 1
            if rec is None:
                self.misses += 1
        if rec is None:
            raise ScriptMissError(attempted)
        if rec.error is not None:
            raise BackendError(f"scripted failure: {rec.error}", retryable=False, attempts=1)
        return rec.response or ""

    def stats(self) -> dict:
        return {"lookups": self.lookups, "misses": self.misses}


def scripted_backend(script: Script | dict | str | os.PathLike) -> ScriptedBackend:
    """Build a mock from a :class:`Script`, a script file, or a plain mapping.

    A mapping is keyed by ``(stage, query_id, item_id)`` tuples; ``query_id``
    of ``None`` makes a stage default.
    """
    if isinstance(script, Script):
        return ScriptedBackend(script)
    if isinstance(script, dict):
        recs = [
            ScriptRecord(stage=Role(k[0]), response=v, query_id=k[1], item_id=k[2] if len(k) > 2 else None)
            for k, v in script.items()
        ]
        return ScriptedBackend(Script(recs))
    return ScriptedBackend(Script.load(script))


# -- cache -----------------------------------------------------------------


def cache_key(request: ChatRequest, identity: dict) -> str:
    blob = json.dumps(
        {"backend": identity, "messages": request.canonical()},
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ResponseCache:
    """One file per key: a JSON header line followed by the raw response."""

    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.writes = 0

    def path(self, key: str) -> Path:
        return self.directory / key

    def get(self, key: str) -> str | None:
        p = self.path(key)
        try:
            raw = p.read_text(encoding="utf-8")
        except FileNotFoundError:
            with self._lock:
                self.misses += 1
            return None
        header, sep, body = raw.partition("\n")
        try:
            meta = json.loads(header)
            ok = sep == "\n" and meta.get("key") == key
        except ValueError:
            ok = False
        with self._lock:
            if ok:
                self.hits += 1
            else:
                self.misses += 1
        if not ok:
            log.warning("corrupt cache entry %s; treating as a miss", p)
            return None
        return body

    def put(self, key: str, text: str, meta: dict | None = None):
        header = dict(meta or {})
        header["key"] = key
        header["created_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        fd, tmp = tempfile.mkstemp(dir=self.directory, prefix=".tmp-")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(json.dumps(header, sort_keys=True) + "\n" + text)
            os.replace(tmp, self.path(key))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        with self._lock:
            self.writes += 1

    def stats(self) -> dict:
        return {"hits": self.hits, "misses": self.misses, "writes": self.writes}


def cached_chat(request: ChatRequest, backend: Backend | None, cache: ResponseCache, identity: dict | None = None) -> str:
    """Serve from ``cache`` or ask ``backend`` and persist the answer.

    With ``backend=None`` the cache is read-only and a miss raises
    :class:`CacheMissError`.
    """
    if identity is None:
        if backend is None:
            raise BackendConfigError("an offline cache lookup needs an explicit backend identity")
        identity = backend.config.identity()
    key = cache_key(request, identity)
    hit = cache.get(key)
    if hit is not None:
        return hit
    if backend is None:
        raise CacheMissError(f"no cached response for {request.target.value} request {key[:16]}")
    text = backend.chat(request)
    cache.put(key, text, {"backend": identity.get("name"), "model_id": identity.get("model_id")})
    return text


class CachedBackend(Backend):
    def __init__(self, inner: Backend | None, cache: ResponseCache, config: BackendConfig | None = None):
        if inner is None and config is None:
            raise BackendConfigError("an offline cached backend needs a config for its identity")
        self.inner = inner
        self.cache = cache
        self.config = config or inner.config

    def chat(self, request: ChatRequest) -> str:
        return cached_chat(request, self.inner, self.cache, self.config.identity())

    def stats(self) -> dict:
        out = {"cache_" + k: v for k, v in self.cache.stats().items()}
        if self.inner is not None:
            out.update(self.inner.stats())
        return out


# -- role bundle and config files ------------------------------------------


@dataclass
class Backends:
    masker: Backend
    completer: Backend
    comparator: Backend

    def for_role(self, role: Role) -> Backend:
        return {Role.MASKER: self.masker, Role.COMPLETER: self.completer, Role.COMPARATOR: self.comparator}[role]

    def describe(self) -> dict:
        return {r.section: {"name": self.for_role(r).config.name, "model_id": self.for_role(r).config.model_id} for r in Role}

    def stats(self) -> dict:
        # a client shared by several roles is reported once, under all of them
        roles: dict[int, list[str]] = {}
        for r in Role:
            roles.setdefault(id(self.for_role(r)), []).append(r.section)
        return {"+".join(names): self.for_role(Role(names[0].upper())).stats() for names in roles.values()}


def load_backend_configs(path: str | os.PathLike) -> dict[Role, BackendConfig]:
    """Read a TOML or JSON file with ``masker``/``completer``/``comparator`` sections."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(path.read_text(encoding="utf-8"))
        else:
            try:
                import tomllib
            except ModuleNotFoundError:  # python < 3.11
                import tomli as tomllib
            data = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise BackendConfigError(f"backend config {path} not found") from exc
    except ValueError as exc:
        raise BackendConfigError(f"cannot parse backend config {path}: {exc}") from exc

    known = set(BackendConfig.__dataclass_fields__)
    out = {}
    for role in Role:
        section = data.get(role.section)
        if not isinstance(section, dict):
            raise BackendConfigError(f"{path}: missing [{role.section}] section")
        if any(k in section for k in ("api_key", "key", "token")):
            raise BackendConfigError(f"{path}: [{role.section}] has an inline credential; use api_key_env")
        unknown = set(section) - known
        if unknown:
            raise BackendConfigError(f"{path}: [{role.section}] unknown fields {sorted(unknown)}")
        section = dict(section)
        section.setdefault("name", role.section)
        out[role] = BackendConfig(**section)
    return out


def build_backends(
    config_path: str | os.PathLike | None = None,
    mock_path: str | os.PathLike | None = None,
    cache_dir: str | os.PathLike | None = None,
    offline: bool = False,
) -> Backends:
    """Assemble the three role clients from CLI-style inputs.

    ``mock_path`` wins over ``config_path``.  ``offline`` (or a cache
    directory with nothing else) gives read-only caches whose identity comes
    from ``config_path`` when given, else from the scripted mock.
    """
    cache = ResponseCache(cache_dir) if cache_dir else None
    if offline:
        if cache is None:
            raise BackendConfigError("offline mode needs a cache directory")
        if config_path:
            configs = load_backend_configs(config_path)
        else:
            ident = ScriptedBackend(Script()).config
            configs = {r: ident for r in Role}
        inner = {r: None for r in Role}
    elif mock_path:
        mock = ScriptedBackend(Script.load(mock_path))
        inner = {r: mock for r in Role}
        configs = {r: mock.config for r in Role}
    elif config_path:
        configs = load_backend_configs(config_path)
        inner = {r: HTTPBackend(c) for r, c in configs.items()}
    elif cache is not None:
        ident = ScriptedBackend(Script()).config
        inner = {r: None for r in Role}
        configs = {r: ident for r in Role}
    else:
        raise BackendConfigError("no backends: give a backend config, a mock script, or a cache directory")

    if cache is None:
        return Backends(inner[Role.MASKER], inner[Role.COMPLETER], inner[Role.COMPARATOR])
    wrapped: dict[int, CachedBackend] = {}
    roles = {}
    for r in Role:
        b = inner[r]
        if b is not None and id(b) in wrapped:
            roles[r] = wrapped[id(b)]
            continue
        roles[r] = CachedBackend(b, cache, configs[r])
        if b is not None:
            wrapped[id(b)] = roles[r]
    return Backends(roles[Role.MASKER], roles[Role.COMPLETER], roles[Role.COMPARATOR])
