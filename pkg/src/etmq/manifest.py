"""Artifact manifest: checksums plus per-stage scope hashes.

Every pipeline command records what it wrote, the sha256 of the bytes, and
the scope hash of the config slice that produced it.  Consumers then refuse
to read an artifact whose recorded scope no longer matches the current
config (stale) or whose bytes changed on disk (corrupt), which is what keeps
a half-edited config from silently mixing incompatible artifacts.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone

MANIFEST_NAME = "manifest.json"


class ManifestError(ValueError):
    """Missing, stale, or corrupt artifact bookkeeping."""


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(str(path), "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    tool: str
    config_hash: str
    created: str = ""
    entries: dict[str, dict] = field(default_factory=dict)

    def record(self, root, filename: str, stage: str, scope: str) -> None:
        path = os.path.join(str(root), filename)
        self.entries[filename] = {
            "sha256": file_sha256(path),
            "stage": stage,
            "scope": scope,
            "updated": _now(),
        }

    def require(self, root, filename: str, stage: str, scope: str) -> str:
        """Return the artifact's full path after freshness checks."""
        entry = self.entries.get(filename)
        if entry is None:
            raise ManifestError(
                f"artifact {filename!r} has no manifest entry; run the "
                f"{stage!r} stage first"
            )
        if entry["stage"] != stage:
            raise ManifestError(
                f"artifact {filename!r} was written by stage {entry['stage']!r}, "
                f"expected {stage!r}"
            )
        if entry["scope"] != scope:
            raise ManifestError(
                f"artifact {filename!r} is stale: it was produced under a "
                "different configuration; re-run its stage"
            )
        path = os.path.join(str(root), filename)
        if not os.path.exists(path):
            raise ManifestError(f"artifact {filename!r} is listed but missing on disk")
        actual = file_sha256(path)
        if actual != entry["sha256"]:
            raise ManifestError(
                f"artifact {filename!r} changed on disk since it was recorded"
            )
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def manifest_path(root) -> str:
    return os.path.join(str(root), MANIFEST_NAME)


def load_or_create_manifest(root, tool: str, config_hash: str) -> RunManifest:
    """Open the directory's manifest, keeping entries across config edits.

    Entries carry their own scope hashes, so freshness is judged per stage:
    editing a simulation knob leaves the trained table usable while marking
    downstream outputs stale.  The stored config hash only records the last
    configuration that touched the directory.
    """
    path = manifest_path(root)
    entries: dict[str, dict] = {}
    created = ""
    if os.path.exists(path):
        with open(path) as fh:
            raw = json.load(fh)
        entries = raw.get("entries", {})
        created = raw.get("created", "")
    return RunManifest(tool=tool, config_hash=config_hash,
                       created=created or _now(), entries=entries)


def save_manifest(manifest: RunManifest, root) -> None:
    os.makedirs(str(root), exist_ok=True)
    payload = {
        "tool": manifest.tool,
        "config_hash": manifest.config_hash,
        "created": manifest.created or _now(),
        "entries": manifest.entries,
    }
    with open(manifest_path(root), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
