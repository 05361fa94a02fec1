"""
Artifact writers for batch runs.

Every file goes through one ``ArtifactWriter`` per output directory so the
manifest can list a SHA-256 for each artifact. CSVs come from pandas, JSON is
sorted and indented, carpets are binary PGM and figures are matplotlib SVGs
with a fixed hash salt and no date, so reruns are byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from loguru import logger  # noqa: E402

from core.models import RunManifest  # noqa: E402

plt.rcParams["svg.hashsalt"] = "carpetlab"

MANIFEST_NAME = "manifest.json"


def to_builtin(value: Any) -> Any:
    """JSON fallback for numpy scalars/arrays, complex numbers and pydantic models."""
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, complex):
        return [value.real, value.imag]
    if hasattr(value, "model_dump"):
        return value.model_dump(mode="json")
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def dumps(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, default=to_builtin)


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def atomic_write_text(path: Path, text: str) -> None:
    """Write through a temporary file in the same directory, then os.replace."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


class ArtifactWriter:
    """Writes artifacts under ``output_dir`` and remembers their checksums."""

    def __init__(self, output_dir: str, export_csv: bool = True, export_json: bool = True, export_svg: bool = False):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.export_csv = export_csv
        self.export_json = export_json
        self.export_svg = export_svg
        self.written: List[Path] = []

    def _path(self, name: str) -> Path:
        return self.output_dir / name

    def _record(self, path: Path) -> Path:
        if path not in self.written:
            self.written.append(path)
        logger.debug(f"📝 wrote {path}")
        return path

    # ------------------------------------------------------------------ tables

    def csv(self, name: str, frame: pd.DataFrame) -> Optional[Path]:
        if not self.export_csv:
            return None
        path = self._path(name)
        frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        return self._record(path)

    def json(self, name: str, payload: Any) -> Optional[Path]:
        if not self.export_json:
            return None
        path = self._path(name)
        atomic_write_text(path, dumps(payload) + "\n")
        return self._record(path)

    def pgm(self, name: str, mask: np.ndarray) -> Path:
        """Binary P5 image, 255 where ``mask`` holds, top row = largest Im(z)."""
        image = np.flipud(np.asarray(mask, dtype=bool)).astype(np.uint8) * 255
        path = self._path(name)
        with open(path, "wb") as f:
            f.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
            f.write(image.tobytes())
        return self._record(path)

    # ----------------------------------------------------------------- figures

    def _save(self, fig, name: str) -> Path:
        path = self._path(name)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        return self._record(path)

    def svg_scatter(self, name: str, points: np.ndarray, title: str = "") -> Optional[Path]:
        if not self.export_svg:
            return None
        points = np.asarray(points, dtype=complex)
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.plot(points.real, points.imag, ",", color="black")
        ax.set_aspect("equal")
        ax.set_title(title)
        return self._save(fig, name)

    def svg_heatmap(self, name: str, values: np.ndarray, extent, title: str = "") -> Optional[Path]:
        if not self.export_svg:
            return None
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.imshow(values, origin="lower", extent=extent, cmap="gray_r", interpolation="nearest")
        ax.set_title(title)
        return self._save(fig, name)

    # ---------------------------------------------------------------- manifest

    def checksums(self) -> Dict[str, str]:
        return {p.name: sha256_file(p) for p in sorted(self.written) if p.name != MANIFEST_NAME}

    def manifest(self, manifest: RunManifest) -> Path:
        path = self._path(MANIFEST_NAME)
        atomic_write_text(path, dumps(manifest.model_dump(mode="json")) + "\n")
        logger.info(f"📦 manifest written to {path}")
        return path
