"""
Plain-ASCII point cloud files and the dataset manifest.

Cloud files start with a header ``xyz mm <count>`` followed by one
``x y z`` triple per line. Displacement files use the header ``uvw mm <count>``.
Values are written in the shortest decimal form that reads back to the
identical float64.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import DisplacementField, PointCloud
from .synth import LandmarkPairs, RegistrationCase

logger = logging.getLogger(__name__)

CLOUD_TAG = "xyz"
DISPLACEMENT_TAG = "uvw"
UNITS = "mm"
SPLITS = ("train", "val", "test")

_ENTRY_KEYS = {"id", "fixed", "moving", "moving_highres", "moving_landmarks", "fixed_landmarks", "gt", "split"}
_MANIFEST_KEYS = {"units", "cases"}


class CloudFormatError(ValueError):
    """A point or displacement file violates the ASCII format."""


def _read_vectors(path, tag: str) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()

    if not lines:
        raise CloudFormatError(f"{path}:1: missing header")
    header = lines[0].split()
    if len(header) != 3 or header[0] != tag or header[1] != UNITS:
        raise CloudFormatError(f"{path}:1: expected header '{tag} {UNITS} <count>', got {lines[0]!r}")
    try:
        count = int(header[2])
    except ValueError:
        raise CloudFormatError(f"{path}:1: invalid point count {header[2]!r}") from None
    if count < 0:
        raise CloudFormatError(f"{path}:1: negative point count {count}")

    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise CloudFormatError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
        try:
            row = [float(p) for p in parts]
        except ValueError:
            raise CloudFormatError(f"{path}:{lineno}: malformed number in {line!r}") from None
        if not all(np.isfinite(row)):
            raise CloudFormatError(f"{path}:{lineno}: non-finite value in {line!r}")
        rows.append(row)

    if len(rows) != count:
        raise CloudFormatError(f"{path}: header declares {count} points, found {len(rows)}")
    return np.asarray(rows, dtype=np.float64).reshape(count, 3)


def _write_vectors(path, tag: str, values: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{tag} {UNITS} {values.shape[0]}"]
    lines.extend(" ".join(repr(float(v)) for v in row) for row in values)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_cloud(path) -> PointCloud:
    """Parse a ``xyz mm <count>`` file."""
    values = _read_vectors(path, CLOUD_TAG)
    if values.shape[0] == 0:
        raise CloudFormatError(f"{path}: cloud contains no points")
    return PointCloud(values)


def save_cloud(path, cloud: PointCloud) -> Path:
    return _write_vectors(path, CLOUD_TAG, cloud.points)


def load_displacement(path) -> DisplacementField:
    """Parse a ``uvw mm <count>`` file."""
    return DisplacementField(_read_vectors(path, DISPLACEMENT_TAG))


def save_displacement(path, field_: DisplacementField) -> Path:
    return _write_vectors(path, DISPLACEMENT_TAG, field_.vectors)


@dataclass(frozen=True)
class ManifestEntry:
    """Files of one case, relative to the manifest root."""

    id: str
    fixed: str
    moving: str
    moving_highres: Optional[str] = None
    moving_landmarks: Optional[str] = None
    fixed_landmarks: Optional[str] = None
    gt: Optional[str] = None
    split: str = "test"

    def files(self) -> list:
        return [
            f
            for f in (
                self.fixed,
                self.moving,
                self.moving_highres,
                self.moving_landmarks,
                self.fixed_landmarks,
                self.gt,
            )
            if f is not None
        ]

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class DatasetManifest:
    """Case list of a dataset; every path is relative to ``root``."""

    root: Path
    entries: list = field(default_factory=list)
    units: str = UNITS

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def path(self, relative: str) -> Path:
        return self.root / relative


def load_manifest(path) -> DatasetManifest:
    """Read and validate ``manifest.json``: known keys, unique ids, existing files."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON: {e}") from e

    unknown = set(data) - _MANIFEST_KEYS
    if unknown:
        raise ValueError(f"{path}: unknown manifest key(s): {', '.join(sorted(unknown))}")
    units = data.get("units", UNITS)
    if units != UNITS:
        raise ValueError(f"{path}: units must be '{UNITS}', got {units!r}")

    manifest = DatasetManifest(root=path.parent, units=units)
    seen = set()
    for i, raw in enumerate(data.get("cases", [])):
        unknown = set(raw) - _ENTRY_KEYS
        if unknown:
            raise ValueError(
                f"{path}: unknown key(s) in cases[{i}]: {', '.join(sorted(unknown))}"
            )
        try:
            entry = ManifestEntry(**raw)
        except TypeError as e:
            raise ValueError(f"{path}: cases[{i}] is incomplete: {e}") from e
        if entry.id in seen:
            raise ValueError(f"{path}: duplicate case id '{entry.id}'")
        if entry.split not in SPLITS:
            raise ValueError(f"{path}: case '{entry.id}' has unknown split {entry.split!r}")
        for rel in entry.files():
            if not manifest.path(rel).exists():
                raise FileNotFoundError(f"{path}: case '{entry.id}' references missing file {rel}")
        seen.add(entry.id)
        manifest.entries.append(entry)
    return manifest


def save_manifest(manifest: DatasetManifest, path=None) -> Path:
    path = Path(path) if path is not None else manifest.root / "manifest.json"
    payload = {"units": manifest.units, "cases": [e.to_dict() for e in manifest.entries]}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def load_case(manifest: DatasetManifest, entry: ManifestEntry) -> RegistrationCase:
    """Parse every file of one manifest entry into a RegistrationCase."""

    def optional_cloud(rel):
        return load_cloud(manifest.path(rel)) if rel else None

    landmarks = None
    if entry.moving_landmarks and entry.fixed_landmarks:
        landmarks = LandmarkPairs(
            moving=load_cloud(manifest.path(entry.moving_landmarks)),
            fixed=load_cloud(manifest.path(entry.fixed_landmarks)),
        )
    return RegistrationCase(
        fixed=load_cloud(manifest.path(entry.fixed)),
        moving=load_cloud(manifest.path(entry.moving)),
        moving_highres=optional_cloud(entry.moving_highres),
        gt=load_displacement(manifest.path(entry.gt)) if entry.gt else None,
        landmarks=landmarks,
        case_id=entry.id,
        metadata={"split": entry.split},
    )


def save_case(root, case: RegistrationCase, split: str) -> ManifestEntry:
    """Write the files of ``case`` under ``root/<case_id>/`` and return its entry."""
    root = Path(root)
    base = Path(case.case_id)

    def write(name: str, cloud) -> Optional[str]:
        if cloud is None:
            return None
        save_cloud(root / base / name, cloud)
        return (base / name).as_posix()

    gt_rel = None
    if case.gt is not None:
        save_displacement(root / base / "gt.uvw", case.gt)
        gt_rel = (base / "gt.uvw").as_posix()
    landmarks = case.landmarks
    return ManifestEntry(
        id=case.case_id,
        fixed=write("fixed.xyz", case.fixed),
        moving=write("moving.xyz", case.moving),
        moving_highres=write("moving_highres.xyz", case.moving_highres),
        moving_landmarks=write("moving_landmarks.xyz", landmarks.moving if landmarks else None),
        fixed_landmarks=write("fixed_landmarks.xyz", landmarks.fixed if landmarks else None),
        gt=gt_rel,
        split=split,
    )
