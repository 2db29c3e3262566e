"""Append-only JSON-lines result files."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from gemmbench.errors import SchemaError

SCHEMA_VERSION = 1
_REQUIRED = ("schema_version", "timestamp", "host", "kernel", "n", "status", "tunables")


@dataclass
class ResultRow:
    timestamp: str
    host: dict
    kernel: str
    n: int
    tunables: dict
    status: str = "ok"
    time_ms: Optional[dict] = None
    mse: Optional[float] = None
    energy: Optional[dict] = None
    backend: Optional[str] = None
    message: Optional[str] = None
    spec: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.status not in ("ok", "failed"):
            raise SchemaError(f"status must be ok or failed, got {self.status!r}")
        if self.status == "ok" and (self.time_ms is None or
                                    not {"mean", "std", "min", "max", "median"} <= self.time_ms.keys()):
            raise SchemaError(f"ok row for {self.kernel} n={self.n} lacks complete time_ms")
        if self.status == "failed" and not self.message:
            raise SchemaError(f"failed row for {self.kernel} n={self.n} lacks a message")

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def mean_ms(self) -> Optional[float]:
        return self.time_ms["mean"] if self.time_ms else None

    @property
    def watts(self) -> Optional[float]:
        return self.energy.get("mean_watts") if self.energy else None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ResultRow":
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaError(f"unsupported result schema_version {version!r} (expected {SCHEMA_VERSION})")
        missing = [k for k in _REQUIRED if k not in data]
        if missing:
            raise SchemaError(f"result row missing fields {missing}")
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in data.items() if k in known})

    @classmethod
    def from_measurement(cls, m) -> "ResultRow":
        return cls(
            timestamp=m.timestamp, host=dict(m.host), kernel=m.kernel, n=m.n,
            tunables=dict(m.tunables), status=m.status,
            time_ms=m.timing.summary() if m.timing else None,
            mse=m.mse, energy=m.energy.to_dict() if m.energy else None,
            backend=m.backend, message=m.message, spec=dict(m.spec), notes=list(m.notes),
        )


def check_writable(path) -> None:
    """Fail before any sweep work if ``path`` cannot be appended to."""
    path = Path(path)
    with open(path, "a", encoding="utf-8"):
        pass
    if not os.access(path, os.W_OK):
        raise PermissionError(f"{path} is not writable")


def append_results(path, rows: Iterable[ResultRow]) -> int:
    count = 0
    with open(path, "a", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row.to_dict(), sort_keys=True) + "\n")
            fh.flush()
            count += 1
    return count


def read_results(path) -> list[ResultRow]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: not a JSON record ({exc})") from exc
            try:
                rows.append(ResultRow.from_dict(data))
            except SchemaError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
    return rows
