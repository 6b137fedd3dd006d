"""On-disk artifacts: attribution files and the append-only run manifest."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .maps import AttributionMap

log = logging.getLogger(__name__)

ATTRIBUTION_FORMAT = "attrsim-attributions"
ATTRIBUTION_VERSION = 1
TARGET_ORIGINS = ("gold", "teacher-generated")

# Field order of every attribution record; kept stable across writes.
RECORD_FIELDS = (
    "format",
    "version",
    "pair_id",
    "method",
    "target_origin",
    "source_tokens",
    "target_tokens",
    "shape",
    "matrix",
    "normalized",
    "provenance",
)


class FormatError(ValueError):
    pass


@dataclass
class AttributionRecord:
    pair_id: str
    target_origin: str
    map: AttributionMap

    def to_json(self) -> str:
        m = self.map
        rec = {
            "format": ATTRIBUTION_FORMAT,
            "version": ATTRIBUTION_VERSION,
            "pair_id": self.pair_id,
            "method": m.method,
            "target_origin": self.target_origin,
            "source_tokens": list(m.source_tokens),
            "target_tokens": list(m.target_tokens),
            "shape": list(m.matrix.shape),
            "matrix": [float(v) for v in m.matrix.ravel(order="C")],
            "normalized": bool(m.normalized),
            "provenance": m.provenance,
        }
        return json.dumps({k: rec[k] for k in RECORD_FIELDS}, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "AttributionRecord":
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"malformed attribution record: {e}") from e
        if rec.get("format") != ATTRIBUTION_FORMAT:
            raise FormatError(f"not an attribution record (format={rec.get('format')!r})")
        if rec.get("version") != ATTRIBUTION_VERSION:
            raise FormatError(f"unsupported attribution format version {rec.get('version')!r}")
        missing = [k for k in RECORD_FIELDS if k not in rec]
        if missing:
            raise FormatError(f"record lacks fields {missing}")
        if rec["target_origin"] not in TARGET_ORIGINS:
            raise FormatError(f"unknown target origin {rec['target_origin']!r}")
        j, k = rec["shape"]
        if (j, k) != (len(rec["source_tokens"]), len(rec["target_tokens"])) or len(rec["matrix"]) != j * k:
            raise FormatError(f"record {rec['pair_id']}: shape {rec['shape']} inconsistent with its arrays")
        matrix = np.asarray(rec["matrix"], dtype=np.float64).reshape(j, k)
        amap = AttributionMap(rec["source_tokens"], rec["target_tokens"], rec["method"], matrix,
                              rec["normalized"], rec["provenance"])
        return cls(rec["pair_id"], rec["target_origin"], amap)


def write_attribution_file(path, records: Iterable[AttributionRecord]) -> int:
    """Write records as JSON lines (atomically via a temp file); return the count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    n = 0
    with tmp.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
            n += 1
    tmp.replace(path)
    return n


def iter_attribution_file(path) -> Iterator[AttributionRecord]:
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield AttributionRecord.from_json(line)
            except FormatError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from e


def read_attribution_file(path) -> dict[str, AttributionRecord]:
    """Records keyed by pair id; duplicate ids are an error."""
    out: dict[str, AttributionRecord] = {}
    for rec in iter_attribution_file(path):
        if rec.pair_id in out:
            raise FormatError(f"{path}: duplicate pair id {rec.pair_id!r}")
        out[rec.pair_id] = rec
    return out


# -- run manifest ---------------------------------------------------------------------------


def fingerprint(obj) -> str:
    """Short stable hash of a JSON-serialisable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def file_digest(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class ManifestEntry:
    stage: str
    fingerprint: str
    timestamp: str
    artifacts: dict[str, str] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    tags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"stage": self.stage, "fingerprint": self.fingerprint, "timestamp": self.timestamp,
                "tags": self.tags, "artifacts": self.artifacts, "metrics": self.metrics}


class RunManifest:
    """Append-only JSONL log of completed stages for one run directory.

    Artifact paths are stored relative to the run directory, and every path
    must exist when its entry is appended.
    """

    FILENAME = "manifest.jsonl"

    def __init__(self, run_dir):
        self.run_dir = Path(run_dir)
        self.path = self.run_dir / self.FILENAME

    def entries(self) -> list[ManifestEntry]:
        if not self.path.exists():
            return []
        out = []
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                d = json.loads(line)
                out.append(ManifestEntry(d["stage"], d["fingerprint"], d["timestamp"], d.get("artifacts", {}),
                                         d.get("metrics", {}), d.get("tags", {})))
        return out

    def append(self, stage: str, config_fingerprint: str, artifacts: dict[str, Path | str] | None = None,
               metrics: dict | None = None, tags: dict | None = None) -> ManifestEntry:
        rel = {}
        for name, p in (artifacts or {}).items():
            p = Path(p)
            full = p if p.is_absolute() else self.run_dir / p
            if not full.exists():
                raise FileNotFoundError(f"manifest artifact {name!r} does not exist: {full}")
            try:
                rel[name] = str(full.resolve().relative_to(self.run_dir.resolve()))
            except ValueError:
                rel[name] = str(full.resolve())
        entry = ManifestEntry(stage, config_fingerprint, _now(), rel, metrics or {}, tags or {})
        self.run_dir.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry.to_dict(), sort_keys=False, default=_json_default) + "\n")
        return entry

    def latest(self, stage: str, **tags) -> ManifestEntry | None:
        for entry in reversed(self.entries()):
            if entry.stage == stage and all(entry.tags.get(k) == v for k, v in tags.items()):
                return entry
        return None

    def resolve(self, relpath: str) -> Path:
        p = Path(relpath)
        return p if p.is_absolute() else self.run_dir / p


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    return path


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
