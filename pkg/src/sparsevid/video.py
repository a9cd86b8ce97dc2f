"""Indexable frame access for pre-extracted and synthetic videos.

A frame directory looks like::

    clip_0001/
        000000.jpg
        000001.jpg
        ...
        meta.txt      # fps=2.0, source_id=..., duration=...
        labels.txt    # optional: "<index>\t<label>" per line

Frames are expected to be extracted beforehand, e.g.
``ffmpeg -i clip.mp4 -vf fps=1 -start_number 0 clip_0001/%06d.jpg``.
"""
from __future__ import annotations

import mimetypes
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol


class VideoError(Exception):
    pass


class IndexOutOfRange(VideoError, IndexError):
    pass


class MissingMetadata(VideoError):
    pass


class GapInIndices(VideoError):
    pass


@dataclass(frozen=True)
class Frame:
    index: int
    timestamp: float
    data: bytes
    mime: str = "image/jpeg"
    label: str | None = None


class VideoSource(Protocol):
    length: int
    fps: float

    def frame_at(self, i: int) -> Frame: ...


def read_key_values(path: Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def write_key_values(path: Path, values: dict[str, object]) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in values.items()), encoding="utf-8")


_FRAME_NAME = re.compile(r"^(\d{6})\.(jpg|jpeg|png)$", re.IGNORECASE)


class FrameDirSource:
    """Frames stored as zero-padded files next to a ``meta.txt`` sidecar."""

    def __init__(self, root: Path, files: list[Path], fps: float, meta: dict[str, str],
                 labels: dict[int, str]):
        self.root = root
        self._files = files
        self.fps = fps
        self.meta = meta
        self.labels = labels
        self.length = len(files)

    def frame_at(self, i: int) -> Frame:
        if not 0 <= i < self.length:
            raise IndexOutOfRange(f"frame {i} outside [0, {self.length})")
        path = self._files[i]
        mime = mimetypes.guess_type(path.name)[0] or "image/jpeg"
        return Frame(i, i / self.fps, path.read_bytes(), mime, self.labels.get(i))

    def __repr__(self) -> str:
        return f"FrameDirSource({str(self.root)!r}, length={self.length}, fps={self.fps})"


def open_frame_dir(path: str | Path) -> FrameDirSource:
    root = Path(path)
    if not root.is_dir():
        raise VideoError(f"{root} is not a directory")
    meta_path = root / "meta.txt"
    if not meta_path.exists():
        raise MissingMetadata(f"{root} has no meta.txt")
    meta = read_key_values(meta_path)
    if "fps" not in meta:
        raise MissingMetadata(f"{meta_path} does not define fps")
    fps = float(meta["fps"])
    if fps <= 0:
        raise MissingMetadata(f"{meta_path}: fps must be positive")

    by_index: dict[int, Path] = {}
    for entry in root.iterdir():
        m = _FRAME_NAME.match(entry.name)
        if m:
            by_index[int(m.group(1))] = entry
    if not by_index:
        raise GapInIndices(f"{root} contains no frames")
    missing = [i for i in range(max(by_index) + 1) if i not in by_index]
    if missing:
        raise GapInIndices(f"{root} is missing frame(s) {missing[:10]}")

    labels: dict[int, str] = {}
    labels_path = root / "labels.txt"
    if labels_path.exists():
        for line in labels_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                idx, _, label = line.partition("\t")
                labels[int(idx)] = label
    return FrameDirSource(root, [by_index[i] for i in range(len(by_index))], fps, meta, labels)
