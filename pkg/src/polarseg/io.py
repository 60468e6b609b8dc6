"""PNG, manifest and run-config file handling."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image


def read_png(path) -> np.ndarray:
    """Float32 array in [0, 1]; (H, W) for grey images, (H, W, 3) for colour."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr


def write_png(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    else:
        arr = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # fixed encoder settings keep output byte-identical across runs
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)


def read_mask(path) -> np.ndarray:
    arr = read_png(path)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return arr >= 0.5


MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ("name", "image", "disc_mask", "cup_mask", "u", "v", "cdr", "label")


def write_manifest(directory, rows: list) -> Path:
    path = Path(directory) / MANIFEST
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in MANIFEST_FIELDS})
    return path


def read_manifest(path) -> list:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for lineno, row in enumerate(rows, start=2):
        if not row.get("name"):
            raise ValueError(f"{path}:{lineno}: row without a name")
        row["_dir"] = str(path.parent)
        row["_line"] = lineno
    return rows


def resolve(row: dict, key: str) -> Optional[Path]:
    value = row.get(key)
    if not value:
        return None
    p = Path(value)
    return p if p.is_absolute() else Path(row["_dir"]) / p


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))  # shortest round-trip form; nan and inf print plainly
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Every tunable of a CLI run, as flat ``key = value`` pairs."""

    seed: int = 0
    # synthetic data
    n: int = 20
    size: int = 128
    cutoff: float = 0.6
    margin: float = 0.0
    # polar transform; radius 0 means size / 2, bins 0 means size
    polar: bool = True
    radius: float = 0.0
    bins: int = 0
    # network
    depth: int = 3
    base_channels: int = 8
    disc_weight: float = 0.5
    # training
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    steps: int = 0
    batch_size: int = 1
    fused_weight: float = 0.0
    # post-processing / evaluation
    threshold: float = 0.5
    raw_masks: bool = False

    def resolved_bins(self) -> int:
        return self.bins or self.size

    def resolved_radius(self) -> float:
        return self.radius or self.size / 2.0

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {str(value).lower() if isinstance(value, bool) else _fmt(value)}")
        return "\n".join(lines) + "\n"

    def write(self, directory) -> Path:
        path = Path(directory) / "run_config.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump())
        return path

    def updated(self, **overrides) -> "RunConfig":
        values = {}
        for key, raw in overrides.items():
            if raw is None:
                continue
            values[key] = _coerce(self, key, raw)
        return dataclasses.replace(self, **values)


def _coerce(cfg: RunConfig, key: str, raw):
    kinds = {f.name: f.type for f in fields(cfg)}
    if key not in kinds:
        raise KeyError(f"unknown config key {key!r}")
    kind = kinds[key]
    if not isinstance(raw, str):
        return raw
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        return float(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            values[key] = _coerce(cfg, key, value)
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{source}:{lineno}: {exc.args[0]}") from None
    return dataclasses.replace(cfg, **values)


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
