"""Loss oracles: a deterministic surrogate and a subprocess line protocol.

Wire protocol, newline-delimited UTF-8 JSON over the child's stdin/stdout:

    server -> {"proto":1}
    client -> {"proto":1}
    client -> {"id":7,"arch":"<genome>","tasks":[3,14,15]}
    server -> {"id":7,"losses":[0.12,0.3,0.08]}

A request the server cannot answer gets ``{"id":<id or null>,"error":"..."}``
and the server keeps going.
"""

from __future__ import annotations

import hashlib
import json
import math
import queue
import random
import re
import shlex
import subprocess
import sys
import threading
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from typing import IO, Iterable, Mapping, Sequence

from .cost_model import count_params
from .search_space import (
    SHIPPED_BACKBONES,
    Architecture,
    Backbone,
    GenomeDecodeError,
    decode,
    largest,
    load_backbone,
    network_key,
    smallest,
)

PROTO_VERSION = 1
HANDSHAKE = {"proto": PROTO_VERSION}


class OracleProtocolError(RuntimeError):
    """Malformed, late or non-finite oracle response.  ``query`` is the offending request."""

    def __init__(self, message: str, query: Mapping | None = None):
        self.query = dict(query) if query is not None else None
        if query is not None:
            message = f"{message}; query={_dumps(query)}"
        super().__init__(message)


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


@dataclass(frozen=True)
class TaskSet:
    name: str = "validation"
    n_tasks: int = 600
    slice_size: int = 16
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be >= 1")
        if not 1 <= self.slice_size <= self.n_tasks:
            raise ValueError(f"slice_size must be in [1, n_tasks={self.n_tasks}], got {self.slice_size}")

    def draw_slice(self, rng: random.Random, size: int | None = None) -> list[int]:
        """Distinct task ids, in draw order."""
        size = self.slice_size if size is None else size
        if not 1 <= size <= self.n_tasks:
            raise ValueError(f"slice of {size} tasks from a set of {self.n_tasks}")
        return rng.sample(range(self.n_tasks), size)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TaskSet":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown task set keys {sorted(unknown)}")
        return cls(**data)


# --------------------------------------------------------------------------
# surrogate


@dataclass(frozen=True)
class SurrogateParams:
    """``lam`` weights the hash noise; task difficulty is uniform in
    [difficulty_lo, difficulty_hi].  ``salt`` reseeds both hashes."""

    lam: float = 0.05
    difficulty_lo: float = 0.0
    difficulty_hi: float = 1.0
    salt: str = ""

    def __post_init__(self):
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError("lam must be finite and >= 0")
        if not 0.0 <= self.difficulty_lo <= self.difficulty_hi <= 1.0:
            raise ValueError("need 0 <= difficulty_lo <= difficulty_hi <= 1")

    @classmethod
    def from_dict(cls, data: Mapping) -> "SurrogateParams":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown surrogate keys {sorted(unknown)}")
        return cls(**data)


def _unit(text: str) -> float:
    word = int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "big")
    return (word >> 11) / float(1 << 53)


def hash_unit(*parts) -> float:
    """A uniform value in [0, 1) from 53 bits of blake2b; identical on every platform."""
    return _unit("|".join(str(p) for p in parts))


@lru_cache(maxsize=64)
def _param_range(backbone: Backbone) -> tuple[int, int]:
    return count_params(smallest(backbone)), count_params(largest(backbone))


@lru_cache(maxsize=1 << 16)
def capacity(arch: Architecture) -> float:
    """log-params of ``arch`` mapped linearly onto [0, 1] across its space."""
    lo, hi = _param_range(arch.backbone)
    if hi <= lo:
        return 0.0
    c = (math.log(count_params(arch)) - math.log(lo)) / (math.log(hi) - math.log(lo))
    return min(max(c, 0.0), 1.0)


@lru_cache(maxsize=1 << 16)
def task_difficulty(task_id: int, params: SurrogateParams = SurrogateParams()) -> float:
    u = hash_unit("difficulty", params.salt, int(task_id))
    return params.difficulty_lo + (params.difficulty_hi - params.difficulty_lo) * u


def surrogate_loss(arch: Architecture, task_id: int, params: SurrogateParams = SurrogateParams()) -> float:
    c = capacity(arch)
    d = task_difficulty(task_id, params)
    noise = hash_unit("noise", params.salt, network_key(arch), int(task_id))
    return (c - d) ** 2 + params.lam * noise


class SurrogateOracle:
    """In-process oracle; pure, so safe to call from several threads."""

    def __init__(self, params: SurrogateParams = SurrogateParams()):
        self.params = params

    def losses(self, arch: Architecture, tasks: Sequence[int]) -> list[float]:
        c = capacity(arch)
        p = self.params
        prefix = f"noise|{p.salt}|{network_key(arch)}|"
        out = []
        for t in tasks:
            d = task_difficulty(t, p)
            out.append((c - d) ** 2 + p.lam * _unit(prefix + str(int(t))))
        return out

    def evaluate_many(self, archs: Sequence[Architecture], tasks: Sequence[int]) -> list[list[float]]:
        return [self.losses(a, tasks) for a in archs]

    def close(self):
        pass

    def describe(self) -> dict:
        return {"kind": "surrogate", **asdict(self.params)}


# --------------------------------------------------------------------------
# subprocess client


def check_losses(losses, n_tasks: int, query: Mapping) -> list[float]:
    if not isinstance(losses, list) or len(losses) != n_tasks:
        raise OracleProtocolError(f"expected {n_tasks} losses, got {losses!r}", query)
    out = []
    for v in losses:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise OracleProtocolError(f"loss {v!r} is not a number", query)
        v = float(v)
        if not math.isfinite(v):
            raise OracleProtocolError(f"non-finite loss {v!r}", query)
        if v < 0:
            raise OracleProtocolError(f"negative loss {v!r}", query)
        out.append(v)
    return out


def _parse_line(line: str, query: Mapping | None):
    try:
        return json.loads(line, parse_constant=lambda c: float(c))
    except json.JSONDecodeError:
        raise OracleProtocolError(f"malformed response line {line[:200]!r}", query) from None


class ExternalOracle:
    """Client for an oracle subprocess.

    One dispatcher: requests are serialized under a lock and answered in
    submission order.  A reader thread drains the child's stdout so pipelined
    batches cannot deadlock on a full pipe.
    """

    def __init__(self, argv: Sequence[str], timeout: float = 30.0, audit: IO[str] | None = None):
        self.argv = list(argv)
        self.timeout = timeout
        self.audit = audit
        self._lock = threading.Lock()
        self._next_id = 0
        self._lines: queue.Queue = queue.Queue()
        self.proc = subprocess.Popen(
            self.argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )
        self._reader = threading.Thread(target=self._drain, daemon=True)
        self._reader.start()
        hello = self._read(None)
        if hello != HANDSHAKE:
            self.close()
            raise OracleProtocolError(f"bad handshake {hello!r}, expected {HANDSHAKE}")
        self._send(HANDSHAKE)

    @classmethod
    def from_spec(cls, spec: str, **kw) -> "ExternalOracle":
        """``cmd:<argv>`` with shell-style quoting."""
        if not spec.startswith("cmd:"):
            raise ValueError(f"oracle spec {spec!r} must start with 'cmd:'")
        argv = shlex.split(spec[4:])
        if not argv:
            raise ValueError("empty oracle command")
        return cls(argv, **kw)

    def _drain(self):
        for line in self.proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _log(self, direction: str, text: str):
        if self.audit is not None:
            self.audit.write(f"{direction} {text}\n")

    def _send(self, obj):
        text = _dumps(obj)
        self._log(">", text)
        try:
            self.proc.stdin.write(text + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise OracleProtocolError(f"oracle process closed its input ({exc})", obj if "id" in obj else None) from None

    def _read(self, query):
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise OracleProtocolError(f"no response within {self.timeout}s", query) from None
        if line is None:
            raise OracleProtocolError(f"oracle process exited (code {self.proc.poll()})", query)
        self._log("<", line.rstrip("\n"))
        return _parse_line(line, query)

    def _receive(self, query) -> list[float]:
        resp = self._read(query)
        if not isinstance(resp, dict) or resp.get("id") != query["id"]:
            raise OracleProtocolError(f"response {resp!r} does not answer id {query['id']}", query)
        if "error" in resp:
            raise OracleProtocolError(f"oracle error: {resp['error']}", query)
        if set(resp) != {"id", "losses"}:
            raise OracleProtocolError(f"unexpected response keys {sorted(resp)}", query)
        return check_losses(resp["losses"], len(query["tasks"]), query)

    def _query(self, arch, tasks) -> dict:
        genome = arch if isinstance(arch, str) else arch.encode()
        q = {"id": self._next_id, "arch": genome, "tasks": [int(t) for t in tasks]}
        self._next_id += 1
        return q

    def losses(self, arch: Architecture | str, tasks: Sequence[int]) -> list[float]:
        return self.evaluate_many([arch], tasks)[0]

    def evaluate_many(self, archs: Iterable, tasks: Sequence[int]) -> list[list[float]]:
        return self.evaluate_requests((a, tasks) for a in archs)

    def evaluate_requests(self, requests: Iterable[tuple]) -> list[list[float]]:
        """``(arch, tasks)`` pairs, pipelined: all requests are written, then
        the responses are read back in order."""
        with self._lock:
            queries = [self._query(a, t) for a, t in requests]
            for q in queries:
                self._send(q)
            return [self._receive(q) for q in queries]

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def describe(self) -> dict:
        return {"kind": "cmd", "argv": self.argv, "timeout": self.timeout}


def make_oracle(spec: str, params: SurrogateParams = SurrogateParams(), **kw):
    if spec == "surrogate":
        return SurrogateOracle(params)
    if spec.startswith("cmd:"):
        return ExternalOracle.from_spec(spec, **kw)
    raise ValueError(f"unknown oracle spec {spec!r}; use 'surrogate' or 'cmd:<argv>'")


# --------------------------------------------------------------------------
# server

_ID_RE = re.compile(r'"id"\s*:\s*(-?\d+)')


def _error(req_id, message: str) -> str:
    return _dumps({"id": req_id, "error": message})


def handle_line(line: str, registry: Mapping[str, Backbone], oracle: SurrogateOracle) -> str | None:
    """The response line for one request line, or None for a handshake."""
    try:
        req = json.loads(line)
    except json.JSONDecodeError as exc:
        m = _ID_RE.search(line)
        return _error(int(m.group(1)) if m else None, f"malformed JSON: {exc.msg}")
    if not isinstance(req, dict):
        return _error(None, "request must be a JSON object")
    if "proto" in req and "id" not in req:
        if req["proto"] != PROTO_VERSION:
            return _error(None, f"unsupported protocol version {req['proto']!r}")
        return None
    req_id = req.get("id")
    if isinstance(req_id, bool) or not isinstance(req_id, int):
        return _error(None, f"request id must be an integer, got {req_id!r}")
    unknown = set(req) - {"id", "arch", "tasks"}
    if unknown:
        return _error(req_id, f"unknown request keys {sorted(unknown)}")
    tasks = req.get("tasks")
    if not isinstance(tasks, list) or not all(isinstance(t, int) and not isinstance(t, bool) and t >= 0 for t in tasks):
        return _error(req_id, "tasks must be a list of non-negative integers")
    if not isinstance(req.get("arch"), str):
        return _error(req_id, "arch must be a genome string")
    try:
        arch = decode(req["arch"], registry)
    except GenomeDecodeError as exc:
        return _error(req_id, str(exc))
    return _dumps({"id": req_id, "losses": oracle.losses(arch, tasks)})


def shipped_registry(extra: Iterable[Backbone] = ()) -> dict[str, Backbone]:
    registry = {name: load_backbone(name) for name in SHIPPED_BACKBONES}
    for b in extra:
        registry[b.name] = b
    return registry


def serve(stdin: IO[str] = None, stdout: IO[str] = None, params: SurrogateParams = SurrogateParams(),
          registry: Mapping[str, Backbone] | None = None) -> int:
    """Answer requests until stdin closes.  Each reply is written and flushed as one line."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    registry = registry if registry is not None else shipped_registry()
    oracle = SurrogateOracle(params)
    stdout.write(_dumps(HANDSHAKE) + "\n")
    stdout.flush()
    for line in stdin:
        if not line.strip():
            continue
        reply = handle_line(line, registry, oracle)
        if reply is not None:
            stdout.write(reply + "\n")
            stdout.flush()
    return 0
