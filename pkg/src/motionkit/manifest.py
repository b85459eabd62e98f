"""Dataset manifest: clip entries with source tags, file paths and filter state.

Unknown JSON keys are carried through ``extra`` dictionaries so that a
manifest written by a newer tool survives a round trip through this one.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError

SOURCES = ("real", "synthetic")

_ENTRY_KEYS = ("clip_id", "source", "flow_paths", "backward_flow_paths", "frame_paths",
               "trajectory_path", "encoded_paths", "kept", "error")


@dataclass
class ManifestEntry:
    clip_id: str
    source: str
    flow_paths: list = field(default_factory=list)
    frame_paths: list = field(default_factory=list)
    backward_flow_paths: list = field(default_factory=list)
    trajectory_path: str | None = None
    encoded_paths: list = field(default_factory=list)
    kept: bool = True
    error: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in SOURCES:
            raise DataError(f"clip {self.clip_id}: source must be one of {SOURCES}, got {self.source!r}")

    def to_dict(self) -> dict:
        d = dict(self.extra)
        d.update({k: getattr(self, k) for k in _ENTRY_KEYS})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        try:
            known = {k: d[k] for k in _ENTRY_KEYS if k in d}
            extra = {k: v for k, v in d.items() if k not in _ENTRY_KEYS}
            return cls(**known, extra=extra)
        except TypeError as exc:
            raise DataError(f"malformed manifest entry: {exc}") from exc


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    scale_factor_px: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = dict(self.extra)
        d["scale_factor_px"] = self.scale_factor_px
        d["entries"] = [e.to_dict() for e in self.entries]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        if "entries" not in d:
            raise DataError("manifest has no 'entries'")
        extra = {k: v for k, v in d.items() if k not in ("entries", "scale_factor_px")}
        return cls([ManifestEntry.from_dict(e) for e in d["entries"]], d.get("scale_factor_px"), extra)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except FileNotFoundError as exc:
            raise DataError(f"missing manifest: {path}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed manifest {path}: {exc}") from exc

    def by_source(self, source: str, kept_only: bool = True) -> list:
        return [e for e in self.entries if e.source == source and (e.kept or not kept_only)]
