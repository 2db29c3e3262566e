"""Line-delimited JSON protocol for out-of-process GEMM backends.

Each message is one JSON object per line, ``{"id", "type", "payload"}``.
The child speaks first with ``hello``; the harness then sends ``gemm``
requests one at a time and the child answers each with a ``result`` that
echoes the request id. Operands and products travel as GEMMMAT1 files,
never inline.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from gemmbench.errors import BackendError, FormatError, ProtocolError
from gemmbench.matrix import Matrix, read_matrix_file

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
HANDSHAKE_TIMEOUT_S = 5.0
SHUTDOWN_GRACE_S = 2.0
_EOF = object()


@dataclass(frozen=True)
class BackendInfo:
    protocol_version: int
    name: str
    device: str
    includes_transfer_time: bool
    reports_energy: bool

    @classmethod
    def from_payload(cls, payload: dict) -> "BackendInfo":
        try:
            info = cls(
                protocol_version=int(payload["protocol_version"]),
                name=str(payload["name"]),
                device=str(payload.get("device", "")),
                includes_transfer_time=bool(payload.get("includes_transfer_time", False)),
                reports_energy=bool(payload.get("reports_energy", False)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed hello payload {payload!r}: {exc}") from exc
        if not info.name:
            raise ProtocolError("backend hello has an empty name")
        return info


@dataclass
class BackendResult:
    status: str
    per_rep_time_ms: list[float] = field(default_factory=list)
    result_path: Optional[Path] = None
    energy_j: Optional[float] = None
    message: str = ""
    result: Optional[Matrix] = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def encode(msg_id: int, msg_type: str, payload: Optional[dict] = None) -> str:
    return json.dumps({"id": msg_id, "type": msg_type, "payload": payload or {}}, sort_keys=True) + "\n"


def decode(line: str) -> dict:
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"backend sent non-JSON line {line.strip()[:200]!r}") from exc
    if not isinstance(msg, dict) or not {"id", "type", "payload"} <= msg.keys():
        raise ProtocolError(f"backend message lacks id/type/payload: {line.strip()[:200]!r}")
    if not isinstance(msg["payload"], dict):
        raise ProtocolError(f"backend payload is not an object: {line.strip()[:200]!r}")
    return msg


class BackendHandle:
    """A running backend child and its message channel.

    Not safe for concurrent requests; :func:`shutdown` may be called from
    another thread to abort an in-flight request.
    """

    def __init__(self, argv: Sequence[str], proc: subprocess.Popen):
        self.argv = list(argv)
        self.proc = proc
        self.info: Optional[BackendInfo] = None
        self._lines: "queue.Queue[object]" = queue.Queue()
        self._stderr: list[str] = []
        self._next_id = 1
        self._closed = False
        self._lock = threading.Lock()
        threading.Thread(target=self._pump_stdout, daemon=True).start()
        threading.Thread(target=self._pump_stderr, daemon=True).start()

    def _pump_stdout(self) -> None:
        for line in self.proc.stdout:
            self._lines.put(line)
        self._lines.put(_EOF)

    def _pump_stderr(self) -> None:
        for line in self.proc.stderr:
            self._stderr.append(line)

    @property
    def name(self) -> str:
        return self.info.name if self.info else Path(self.argv[0]).name

    @property
    def alive(self) -> bool:
        return not self._closed and self.proc.poll() is None

    def diagnostics(self) -> str:
        return "".join(self._stderr[-50:])

    def send(self, msg_type: str, payload: Optional[dict] = None, msg_id: Optional[int] = None) -> int:
        if msg_id is None:
            msg_id = self._next_id
            self._next_id += 1
        try:
            self.proc.stdin.write(encode(msg_id, msg_type, payload))
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError) as exc:
            raise BackendError(f"backend {self.name} is not accepting input: {exc}",
                               self.diagnostics()) from exc
        return msg_id

    def receive(self, timeout: Optional[float]) -> dict:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            wait = 0.1 if deadline is None else max(0.0, min(0.1, deadline - time.monotonic()))
            try:
                item = self._lines.get(timeout=wait)
            except queue.Empty:
                if deadline is not None and time.monotonic() >= deadline:
                    raise BackendError(f"backend {self.name} did not reply within {timeout:.1f} s",
                                       self.diagnostics()) from None
                continue
            if item is _EOF:
                self._lines.put(_EOF)
                code = self.proc.poll()
                raise BackendError(f"backend {self.name} exited (code {code}) while a reply was pending",
                                   self.diagnostics())
            if not str(item).strip():
                continue
            return decode(str(item))


def spawn_backend(argv: Sequence[str], handshake_timeout: float = HANDSHAKE_TIMEOUT_S,
                  env: Optional[dict] = None) -> BackendHandle:
    if not argv:
        raise BackendError("empty backend command")
    try:
        proc = subprocess.Popen(
            list(argv), stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
            text=True, bufsize=1, env=env,
        )
    except OSError as exc:
        raise BackendError(f"cannot start backend {argv[0]!r}: {exc}") from exc
    handle = BackendHandle(argv, proc)
    try:
        msg = handle.receive(handshake_timeout)
        if msg["type"] != "hello":
            raise ProtocolError(f"expected hello, got {msg['type']!r}")
        info = BackendInfo.from_payload(msg["payload"])
        if info.protocol_version != PROTOCOL_VERSION:
            raise BackendError(
                f"backend {info.name} speaks protocol version {info.protocol_version}, "
                f"harness requires {PROTOCOL_VERSION}"
            )
    except BackendError:
        shutdown(handle)
        raise
    handle.info = info
    return handle


def request_gemm(handle: BackendHandle, a_path, b_path, n: int, reps: int, warmup: int,
                 result_path=None, timeout: Optional[float] = None) -> BackendResult:
    """Run one GEMM request and validate the reply.

    A reply with ``status == "error"`` is returned, not raised; transport
    failures and malformed replies raise.
    """
    if not handle.alive:
        raise BackendError(f"backend {handle.name} is not running", handle.diagnostics())
    if result_path is None:
        result_path = Path(a_path).with_name(f"result-{handle.name}-{n}-{os.getpid()}.gemmmat")
    payload = {
        "a_path": str(a_path), "b_path": str(b_path), "n": n,
        "reps": reps, "warmup": warmup, "result_path": str(result_path),
    }
    with handle._lock:
        msg_id = handle.send("gemm", payload)
        msg = handle.receive(timeout)
    if msg["type"] != "result":
        raise ProtocolError(f"expected result, got {msg['type']!r}")
    if msg["id"] != msg_id:
        raise ProtocolError(f"reply id {msg['id']} does not match request id {msg_id}")
    body = msg["payload"]
    status = body.get("status")
    if status == "error":
        return BackendResult("error", message=str(body.get("message", "backend reported an error")))
    if status != "ok":
        raise ProtocolError(f"unknown result status {status!r}")
    try:
        times = [float(t) for t in body["per_rep_time_ms"]]
        path = Path(body.get("result_path", result_path))
        energy = body.get("energy_j")
        energy = None if energy is None else float(energy)
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed result payload: {exc}") from exc
    if len(times) != reps:
        raise ProtocolError(f"backend returned {len(times)} timings for {reps} reps")
    try:
        product = read_matrix_file(path)
    except (OSError, FormatError) as exc:
        raise ProtocolError(f"backend result file {path} unusable: {exc}") from exc
    if product.shape != (n, n):
        raise ProtocolError(f"backend result is {product.rows}x{product.cols}, expected {n}x{n}")
    return BackendResult("ok", times, path, energy, result=product)


def shutdown(handle: BackendHandle, grace: float = SHUTDOWN_GRACE_S) -> None:
    """Ask the backend to exit, then kill it after ``grace`` seconds. Idempotent."""
    if handle._closed:
        return
    handle._closed = True
    proc = handle.proc
    if proc.poll() is None:
        try:
            proc.stdin.write(encode(0, "shutdown"))
            proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError):
            pass
        try:
            proc.wait(timeout=grace)
        except subprocess.TimeoutExpired:
            log.warning("backend %s ignored shutdown; killing", handle.name)
            proc.kill()
            proc.wait()
    try:
        proc.stdin.close()
    except (BrokenPipeError, OSError, ValueError):
        pass
