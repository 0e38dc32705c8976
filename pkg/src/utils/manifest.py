"""
Run manifests.

Every command records what it read, what it wrote, the seed and the
configuration it ran with. Output: ``run_manifest.json`` (machine-readable),
``run_manifest.txt`` (human-readable) and ``run_manifest.json.hash``
(SHA-256 of the JSON), all in the command's output directory.
"""

from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
import hashlib
import json
import logging
from pathlib import Path
import platform
import time
from typing import Any, Dict, List, Optional, Union

import numpy as np
import torch

from .. import __version__
from ..core.errors import FormatError
from .config import config_to_dict

logger = logging.getLogger(__name__)

MANIFEST_JSON = "run_manifest.json"
MANIFEST_TXT = "run_manifest.txt"
MANIFEST_HASH = "run_manifest.json.hash"

PathLike = Union[str, Path]


def file_sha256(path: PathLike) -> str:
    """Content hash of a file, read in 1 MiB blocks."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def config_hash(config: Any) -> str:
    """SHA-256 of the sorted-key JSON of a config dataclass or mapping."""
    if config is None:
        return ""
    plain = config_to_dict(config)
    return hashlib.sha256(json.dumps(plain, sort_keys=True, default=str).encode("utf-8")).hexdigest()


def _versions() -> Dict[str, str]:
    return {
        "flexict": __version__,
        "python": platform.python_version(),
        "platform": platform.platform(),
        "numpy": np.__version__,
        "torch": torch.__version__,
    }


@dataclass
class RunManifest:
    command: str
    config_hash: str
    input_hashes: Dict[str, str]
    seed: Optional[int]
    versions: Dict[str, str]
    wall_time_s: float
    outputs: Dict[str, str]
    timestamp: str = ""
    status: str = "SUCCESS"
    error: Optional[str] = None
    summary: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str)

    def to_text(self) -> str:
        lines = ["=" * 72, "FLEXICT RUN MANIFEST", "=" * 72, "",
                 f"Command:   {self.command}",
                 f"Status:    {self.status}",
                 f"Timestamp: {self.timestamp}",
                 f"Seed:      {self.seed}",
                 f"Wall time: {self.wall_time_s:.3f}s",
                 f"Config:    {self.config_hash or '-'}", ""]
        if self.error:
            lines += [f"Error: {self.error}", ""]
        lines.append("Versions:")
        lines += [f"  {k}: {v}" for k, v in sorted(self.versions.items())]
        lines += ["", "Inputs:"]
        lines += [f"  {k}  {v}" for k, v in sorted(self.input_hashes.items())] or ["  (none)"]
        lines += ["", "Outputs:"]
        lines += [f"  {k}  {v}" for k, v in sorted(self.outputs.items())] or ["  (none)"]
        if self.summary:
            lines += ["", "Summary:"]
            lines += [f"  {k}: {v}" for k, v in sorted(self.summary.items())]
        lines += ["", "=" * 72]
        return "\n".join(lines) + "\n"

    def save(self, directory: PathLike) -> Dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {"json": directory / MANIFEST_JSON, "txt": directory / MANIFEST_TXT,
                 "hash": directory / MANIFEST_HASH}
        content = self.to_json()
        paths["json"].write_text(content, encoding="utf-8")
        paths["txt"].write_text(self.to_text(), encoding="utf-8")
        paths["hash"].write_text(hashlib.sha256(content.encode("utf-8")).hexdigest() + "\n",
                                 encoding="utf-8")
        return paths

    @classmethod
    def load(cls, directory: PathLike) -> 'RunManifest':
        path = Path(directory) / MANIFEST_JSON
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            return cls(**data)
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise FormatError(f"Cannot read run manifest {path}: {e}") from e


def verify_manifest_hash(directory: PathLike) -> bool:
    """True if ``run_manifest.json`` still matches its recorded SHA-256."""
    directory = Path(directory)
    json_path, hash_path = directory / MANIFEST_JSON, directory / MANIFEST_HASH
    if not json_path.exists() or not hash_path.exists():
        return False
    expected = hash_path.read_text(encoding="utf-8").strip()
    actual = hashlib.sha256(json_path.read_bytes()).hexdigest()
    if actual != expected:
        logger.warning("Run manifest %s does not match its hash", json_path)
    return actual == expected


class RunRecorder:
    """Collects inputs and outputs while a command runs, then writes the manifest.

    Usage::

        recorder = RunRecorder("phantom", seed=3, config=spec)
        recorder.add_input(spec_path)
        ...
        recorder.add_output(out_path)
        recorder.finish(out_dir)
    """

    def __init__(self, command: str, seed: Optional[int] = None, config: Any = None):
        self.command = command
        self.seed = seed
        self.config = config
        self.inputs: Dict[str, str] = {}
        self.outputs: Dict[str, str] = {}
        self.summary: Dict[str, Any] = {}
        self._start = time.perf_counter()
        self._timestamp = datetime.now(timezone.utc).isoformat()

    def add_input(self, path: PathLike) -> None:
        path = Path(path)
        if path.is_dir():
            for child in sorted(p for p in path.rglob("*") if p.is_file()):
                self.inputs[str(child)] = file_sha256(child)
        else:
            self.inputs[str(path)] = file_sha256(path)

    def add_inputs(self, paths: List[PathLike]) -> None:
        for p in paths:
            self.add_input(p)

    def add_output(self, path: PathLike) -> None:
        self.outputs[str(path)] = file_sha256(path)

    def add_summary(self, **values: Any) -> None:
        self.summary.update(values)

    def build(self, status: str = "SUCCESS", error: Optional[str] = None) -> RunManifest:
        return RunManifest(
            command=self.command,
            config_hash=config_hash(self.config),
            input_hashes=dict(self.inputs),
            seed=self.seed,
            versions=_versions(),
            wall_time_s=round(time.perf_counter() - self._start, 6),
            outputs=dict(self.outputs),
            timestamp=self._timestamp,
            status=status,
            error=error,
            summary=dict(self.summary),
        )

    def finish(self, directory: PathLike, status: str = "SUCCESS",
               error: Optional[str] = None) -> RunManifest:
        manifest = self.build(status, error)
        paths = manifest.save(directory)
        logger.info("Run manifest written to %s", paths["json"])
        return manifest
