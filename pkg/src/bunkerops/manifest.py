"""Run manifests: the reproducibility record every artifact points back to.

A manifest captures everything that determines a run's outputs (command,
config hash, seeds, budgets, thresholds, tool version). Its hash is taken
over exactly those fields, excluding the creation timestamp and the output
directory, so re-running with the same parameters embeds the same hash and
produces byte-identical reports.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional

from . import __version__


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_path: Optional[str] = None
    config_sha256: Optional[str] = None
    containers: Optional[int] = None
    seeds: list[int] = field(default_factory=list)
    rollouts: Optional[int] = None
    total_steps: Optional[int] = None
    phase_budgets: Optional[list[int]] = None
    theta: Optional[float] = None
    delta: Optional[float] = None
    extra: dict = field(default_factory=dict)
    out_dir: Optional[str] = None
    version: str = __version__
    created_at: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds")
    )

    def hashed_content(self) -> dict:
        return {
            "command": self.command,
            "config_path": self.config_path,
            "config_sha256": self.config_sha256,
            "containers": self.containers,
            "seeds": self.seeds,
            "rollouts": self.rollouts,
            "total_steps": self.total_steps,
            "phase_budgets": self.phase_budgets,
            "theta": self.theta,
            "delta": self.delta,
            "extra": self.extra,
            "version": self.version,
        }

    def hash(self) -> str:
        canonical = json.dumps(self.hashed_content(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def save(self, path) -> None:
        data = dict(self.hashed_content())
        data["manifest_hash"] = self.hash()
        data["out_dir"] = self.out_dir
        data["created_at"] = self.created_at
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")
