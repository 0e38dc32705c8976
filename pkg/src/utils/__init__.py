"""Configuration loading and run manifests."""

from .config import dump_config, load_config
from .manifest import RunManifest, RunRecorder, verify_manifest_hash

__all__ = ["load_config", "dump_config", "RunManifest", "RunRecorder", "verify_manifest_hash"]
