"""PNG datasets on disk.

Layout::

    root/images/<id>.png   8-bit RGB
    root/masks/<id>.png    8-bit grayscale, pixel value = class id
    root/split.txt         optional, lines of "<split> <id>"
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np
from PIL import Image

from ..errors import DataError
from .synth import SegSample

SPLIT_FILE = "split.txt"


def save_sample(sample: SegSample, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rgb = np.rint(np.clip(sample.image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(rgb, "RGB").save(root / "images" / f"{sample.ident}.png")
    Image.fromarray(sample.mask.astype(np.uint8), "L").save(root / "masks" / f"{sample.ident}.png")


def save_dataset(samples: Iterable[SegSample], root, split: Optional[str] = None) -> List[str]:
    """Write samples as PNG pairs; with ``split`` set, append them to the split file."""
    root = Path(root)
    ids = []
    for s in samples:
        save_sample(s, root)
        ids.append(s.ident)
    if split is not None:
        with open(root / SPLIT_FILE, "a", encoding="utf-8") as fh:
            fh.writelines(f"{split} {i}\n" for i in ids)
    return ids


def read_split(root, split: Optional[str]) -> List[str]:
    root = Path(root)
    path = root / SPLIT_FILE
    if split is None or not path.exists():
        if split is not None:
            raise DataError(f"{root} has no {SPLIT_FILE}; cannot select split {split!r}")
        if not (root / "images").is_dir():
            raise DataError(f"{root} has no images/ directory")
        return sorted(p.stem for p in (root / "images").glob("*.png"))
    ids = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{path}:{n}: expected '<split> <id>'")
        if parts[0] == split:
            ids.append(parts[1])
    if not ids:
        raise DataError(f"split {split!r} is empty in {path}")
    return ids


def load_sample(root, ident: str) -> SegSample:
    root = Path(root)
    ip, mp = root / "images" / f"{ident}.png", root / "masks" / f"{ident}.png"
    if not ip.exists():
        raise DataError(f"missing image {ip}")
    if not mp.exists():
        raise DataError(f"image {ident} has no mask at {mp}")
    try:
        with Image.open(ip) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        with Image.open(mp) as im:
            mask = np.asarray(im.convert("L"), dtype=np.uint8).copy()
    except OSError as exc:
        raise DataError(f"cannot decode {ident}: {exc}") from exc
    if mask.shape != rgb.shape[:2]:
        raise DataError(f"{ident}: mask {mask.shape} and image {rgb.shape[:2]} differ")
    return SegSample(np.ascontiguousarray(rgb.transpose(2, 0, 1)), mask, ident)


def load_dataset(root, split: Optional[str] = None) -> List[SegSample]:
    return [load_sample(root, i) for i in read_split(root, split)]


def stack(samples: List[SegSample]):
    """Batch arrays ``(N, 3, H, W)`` float32 and ``(N, H, W)`` int64."""
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    return images, masks
