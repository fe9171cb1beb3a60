"""Deterministic run manifests with checksummed outputs.

The manifest carries everything needed to verify a stage's outputs:
config hash, package version, and per-file sha256.  Wall-clock timings go
to a separate timings.json so manifests stay byte-identical across
repeated runs with the same seed.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import __version__
from .fileio import write_json


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return sha256_bytes(canon.encode())


def write_manifest(outdir: Path, stage: str, config: dict, output_files,
                   timings: dict | None = None) -> Path:
    """Write manifest_<stage>.json listing every output with its checksum."""
    outdir = Path(outdir)
    outputs = []
    for f in sorted(Path(f) for f in output_files):
        outputs.append({
            "path": str(f.relative_to(outdir)) if f.is_relative_to(outdir) else str(f),
            "sha256": sha256_file(f),
            "bytes": f.stat().st_size,
        })
    manifest = {
        "stage": stage,
        "config_hash": config_hash(config),
        "package_version": __version__,
        "outputs": outputs,
    }
    path = outdir / f"manifest_{stage}.json"
    write_json(path, manifest)
    if timings is not None:
        write_json(outdir / f"timings_{stage}.json", timings)
    return path
