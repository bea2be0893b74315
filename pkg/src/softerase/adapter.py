"""Client for external prediction adapters speaking line-delimited JSON over stdio.

Handshake::

    -> {"type": "hello", "version": 1}
    <- {"type": "ready", "provides": ["probs", "attention"?, "grads"?]}

Each request is answered before the next is sent::

    -> {"type": "predict", "id": "3", "embeddings": [[...], ...]}
    <- {"type": "result", "id": "3", "probs": [...], "attention": [...]?, "grads": [[...]]?}
"""

from __future__ import annotations

import json
import math
import subprocess
import threading
from collections import deque
from dataclasses import dataclass
from queue import Empty, Queue

import numpy as np

from .errors import ParameterError, SoftEraseError
from .numerics import as_matrix

PROTOCOL_VERSION = 1
PROB_SUM_TOL = 1e-6


class AdapterError(SoftEraseError):
    pass


class AdapterTimeout(AdapterError):
    pass


class AdapterExited(AdapterError):
    pass


class AdapterProtocolError(AdapterError):
    """Unparseable line or unexpected message type / id."""


class AdapterValidationError(AdapterError):
    """Well-formed message whose content breaks the contract (e.g. probs not summing to 1)."""


@dataclass(frozen=True)
class AdapterEndpoint:
    command: tuple[str, ...]
    version: int = PROTOCOL_VERSION
    timeout_ms: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "command", tuple(self.command))
        if not self.command:
            raise ParameterError("adapter command is empty")
        if self.timeout_ms <= 0:
            raise ParameterError("adapter timeout must be positive")


@dataclass(frozen=True, eq=False)
class AdapterResult:
    probs: np.ndarray
    attention: np.ndarray | None = None
    grads: np.ndarray | None = None


class AdapterSession:
    """One running adapter process. Use as a context manager."""

    def __init__(self, endpoint: AdapterEndpoint):
        self.endpoint = endpoint
        self.provides: tuple[str, ...] = ()
        self._proc: subprocess.Popen | None = None
        self._lines: Queue = Queue()
        self._stderr: deque[str] = deque(maxlen=20)
        self._next_id = 0

    def __enter__(self) -> "AdapterSession":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def start(self) -> None:
        try:
            self._proc = subprocess.Popen(
                list(self.endpoint.command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise AdapterExited(f"cannot launch adapter {self.endpoint.command}: {exc}") from exc
        threading.Thread(target=self._pump_stdout, daemon=True).start()
        threading.Thread(target=self._pump_stderr, daemon=True).start()
        self._send({"type": "hello", "version": self.endpoint.version})
        msg = self._receive("handshake")
        if msg.get("type") != "ready":
            raise AdapterProtocolError(f"expected ready message, got {msg.get('type')!r}")
        provides = msg.get("provides")
        if not isinstance(provides, list) or "probs" not in provides:
            raise AdapterProtocolError("ready message must list 'probs' in provides")
        self.provides = tuple(provides)

    def close(self) -> None:
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            if proc.stdin:
                proc.stdin.close()
            proc.wait(timeout=2)
        except (OSError, subprocess.TimeoutExpired):
            proc.kill()
            proc.wait()

    def _pump_stdout(self) -> None:
        proc = self._proc
        for line in proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _pump_stderr(self) -> None:
        for line in self._proc.stderr:
            self._stderr.append(line.rstrip())

    def _exit_detail(self) -> str:
        code = self._proc.wait(timeout=2) if self._proc else None
        tail = " | ".join(self._stderr) or "<no stderr>"
        return f"exit code {code}; stderr: {tail}"

    def _send(self, msg: dict) -> None:
        if self._proc is None:
            raise AdapterExited("adapter session is not running")
        try:
            self._proc.stdin.write(json.dumps(msg) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise AdapterExited(f"adapter closed its input ({self._exit_detail()})") from exc

    def _receive(self, context: str) -> dict:
        try:
            line = self._lines.get(timeout=self.endpoint.timeout_ms / 1000.0)
        except Empty:
            raise AdapterTimeout(
                f"no reply within {self.endpoint.timeout_ms} ms during {context}"
            ) from None
        if line is None:
            raise AdapterExited(f"adapter exited during {context} ({self._exit_detail()})")
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            raise AdapterProtocolError(f"malformed line during {context}: {line.strip()[:200]!r}") from exc
        if not isinstance(msg, dict):
            raise AdapterProtocolError(f"expected a JSON object during {context}")
        return msg

    def predict(self, x) -> AdapterResult:
        x = as_matrix(x, name="embeddings")
        rid = str(self._next_id)
        self._next_id += 1
        self._send({"type": "predict", "id": rid, "embeddings": x.tolist()})
        msg = self._receive(f"request {rid}")
        if msg.get("type") != "result":
            raise AdapterProtocolError(f"expected result message, got {msg.get('type')!r}")
        if msg.get("id") != rid:
            raise AdapterProtocolError(f"reply id {msg.get('id')!r} does not match request {rid!r}")
        return _parse_result(msg, x.shape)


def _numeric(value, name: str) -> np.ndarray:
    try:
        arr = np.array(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise AdapterValidationError(f"{name} is not numeric") from exc
    if not np.all(np.isfinite(arr)):
        raise AdapterValidationError(f"{name} contains non-finite values")
    return arr


def _parse_result(msg: dict, shape: tuple[int, int]) -> AdapterResult:
    if "probs" not in msg:
        raise AdapterValidationError("result carries no probs")
    probs = _numeric(msg["probs"], "probs")
    if probs.ndim != 1 or probs.size == 0:
        raise AdapterValidationError("probs must be a non-empty list")
    if probs.min() < 0.0 or probs.max() > 1.0:
        raise AdapterValidationError("probs must lie in [0, 1]")
    if not math.isclose(float(probs.sum()), 1.0, abs_tol=PROB_SUM_TOL):
        raise AdapterValidationError(f"probs sum to {probs.sum():.6g}, expected 1")
    attention = grads = None
    if msg.get("attention") is not None:
        attention = _numeric(msg["attention"], "attention")
        if attention.shape != (shape[0],):
            raise AdapterValidationError("attention must have one score per token")
    if msg.get("grads") is not None:
        grads = _numeric(msg["grads"], "grads")
        if grads.shape != shape:
            raise AdapterValidationError(f"grads shape {grads.shape} != embeddings shape {shape}")
    return AdapterResult(probs, attention, grads)


def adapter_predict(session: AdapterSession, x) -> AdapterResult:
    return session.predict(x)
