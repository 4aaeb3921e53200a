"""Append-only run manifest with content-hash no-op detection.

manifest.jsonl holds one JSON object per executed stage: stage name, config
hash, input artifact hashes, output paths, and metric values. Wall times go
to timings.csv next to it; keeping them out of the manifest proper makes two
runs with the same seed produce bitwise-identical manifests.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

MANIFEST_NAME = "manifest.jsonl"
TIMINGS_NAME = "timings.csv"


@dataclass
class ManifestEntry:
    stage: str
    config_hash: str
    inputs: dict[str, str]
    outputs: list[str]
    metrics: dict[str, float] = field(default_factory=dict)
    wall_time_s: float = 0.0

    @property
    def fingerprint(self) -> str:
        return stage_fingerprint(self.stage, self.config_hash, self.inputs)

    def to_json(self) -> str:
        doc = {
            "stage": self.stage,
            "config_hash": self.config_hash,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": list(self.outputs),
            "metrics": dict(sorted(self.metrics.items())),
            "fingerprint": self.fingerprint,
        }
        return json.dumps(doc, sort_keys=True)


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def stage_fingerprint(stage: str, config_hash: str, inputs: dict[str, str]) -> str:
    doc = {"stage": stage, "config": config_hash, "inputs": dict(sorted(inputs.items()))}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def append_entry(root: str | Path, entry: ManifestEntry) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / MANIFEST_NAME, "a") as f:
        f.write(entry.to_json() + "\n")
    timings = root / TIMINGS_NAME
    new = not timings.exists()
    with open(timings, "a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(["stage", "wall_time_s"])
        writer.writerow([entry.stage, f"{entry.wall_time_s:.3f}"])


def load_entries(root: str | Path) -> list[dict]:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def latest_entry(entries: list[dict], stage: str) -> dict | None:
    for entry in reversed(entries):
        if entry["stage"] == stage:
            return entry
    return None


def is_noop(root: str | Path, stage: str, fingerprint: str) -> bool:
    """True when the last run of `stage` had the same fingerprint and all its
    outputs still exist on disk."""
    entry = latest_entry(load_entries(root), stage)
    if entry is None or entry["fingerprint"] != fingerprint:
        return False
    return all((Path(root) / out).exists() for out in entry["outputs"])
