"""Run manifests and atomic output writes."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import platform
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__


def write_atomic(path: Path, data: str | bytes) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None
    cwd: str
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    volatile_outputs: list[str] = field(default_factory=list)
    version: str = __version__
    started_utc: str = ""
    wall_time_s: float = 0.0
    host: dict = field(default_factory=lambda: {
        "python": platform.python_version(), "platform": platform.platform()})

    def record_inputs(self, *paths) -> None:
        for p in paths:
            self.inputs[str(Path(p).resolve())] = sha256_file(p)

    def record_outputs(self, *paths, volatile: bool = False) -> None:
        for p in paths:
            key = str(Path(p).resolve())
            if volatile:
                self.volatile_outputs.append(key)
            else:
                self.outputs[key] = sha256_file(p)

    def write(self, path) -> None:
        write_atomic(Path(path), json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        with open(path) as fh:
            return cls(**json.load(fh))


def now_utc() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
