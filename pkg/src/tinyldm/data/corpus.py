"""Image-text pair corpora in the ``<stem>.png`` + ``<stem>.txt`` layout."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class CorpusError(ValueError):
    pass


def normalize_caption(text: str | Sequence[str]) -> tuple[str, ...]:
    """Split on commas, trim, lowercase, drop empties. Idempotent on its own output."""
    if not isinstance(text, str):
        text = ",".join(text)
    return tuple(t.strip().lower() for t in text.split(",") if t.strip())


@dataclass(frozen=True)
class ImageTextPair:
    image: np.ndarray  # [H, W, 3] float32 in [0, 1]
    caption: tuple[str, ...]
    name: str

    def __post_init__(self):
        if not self.caption:
            raise CorpusError(f"{self.name}: empty caption")
        if self.image.ndim != 3 or self.image.shape[0] != self.image.shape[1] or self.image.shape[2] != 3:
            raise CorpusError(f"{self.name}: image must be square RGB, got {self.image.shape}")

    @property
    def caption_text(self) -> str:
        return ", ".join(self.caption)


class Corpus:
    def __init__(self, pairs: Sequence[ImageTextPair]):
        self.pairs = tuple(pairs)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self) -> Iterator[ImageTextPair]:
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    @property
    def resolution(self) -> int:
        return self.pairs[0].image.shape[0]

    def images(self, indices=None) -> np.ndarray:
        idx = range(len(self.pairs)) if indices is None else indices
        return np.stack([self.pairs[i].image for i in idx])

    def captions(self) -> list[tuple[str, ...]]:
        return [p.caption for p in self.pairs]

    def __add__(self, other: Corpus) -> Corpus:
        return Corpus(self.pairs + other.pairs)


def resize_nearest(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if h == size and w == size:
        return image
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return image[rows][:, cols]


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def load_corpus(directory, expected_resolution: int = 32) -> Corpus:
    """Load every image with a same-stem caption file, ordered by stem.

    Fails closed: a missing caption file, a non-square image, or an empty
    directory raises before any pair is returned.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise CorpusError(f"{directory} is not a directory")
    images = sorted((p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=lambda p: p.stem)
    if not images:
        raise CorpusError(f"{directory} contains no images")
    pairs = []
    for path in images:
        caption_path = path.with_suffix(".txt")
        if not caption_path.is_file():
            raise CorpusError(f"image {path.stem!r} has no caption file {caption_path.name}")
        image = read_image(path)
        if image.shape[0] != image.shape[1]:
            raise CorpusError(f"image {path.stem!r} is not square ({image.shape[1]}x{image.shape[0]})")
        caption = normalize_caption(caption_path.read_text(encoding="utf-8"))
        pairs.append(ImageTextPair(resize_nearest(image, expected_resolution), caption, path.stem))
    return Corpus(pairs)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def png_bytes(image: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="PNG")
    return buf.getvalue()


def save_corpus(corpus: Corpus, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for pair in corpus:
        atomic_write_bytes(directory / f"{pair.name}.png", png_bytes(pair.image))
        atomic_write_bytes(directory / f"{pair.name}.txt", (pair.caption_text + "\n").encode("utf-8"))
