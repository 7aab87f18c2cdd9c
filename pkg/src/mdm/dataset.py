"""Synthetic two-class image+caption dataset and its on-disk form.

Two procedurally drawn 8x8 shapes stand in for real data: a filled square
and a thin plus sign, each with a fixed 16-byte caption so text supervision
is machine-checkable.  Images get a per-example intensity jitter; captions
are constant per class.

On disk a dataset is a directory with
    images.mdmt   one tensor "images", [count, H, W, C], values in [0, 1]
    captions.txt  UTF-8, line i pairs with image i
    classes.txt   one integer class id per line
Validation failures name the offending line or image index.
"""

from __future__ import annotations

from typing import Dict, List, Optional
from pathlib import Path

import numpy as np

from .container import read_tensors, write_tensors
from .numerics import ArgumentError, RngState

CLASS_CAPTIONS = ("a filled square ", "a thin plus sign")


class DatasetFormatError(RuntimeError):
    """The on-disk dataset violates an invariant."""


def class_template(class_id: int, image_hw: int = 8, channels: int = 1) -> np.ndarray:
    """Unit-intensity template image for a class, [H, W, C]."""
    if image_hw < 4 or image_hw % 2:
        raise ArgumentError(f"class_template: image_hw must be even and >= 4, got {image_hw}")
    img = np.zeros((image_hw, image_hw, channels), dtype=np.float64)
    half = image_hw // 2
    if class_id == 0:
        # filled square over the central half
        lo, hi = half // 2, half // 2 + half
        img[lo:hi, lo:hi, :] = 1.0
    elif class_id == 1:
        # plus sign: two-pixel bars through the center, one pixel of margin
        c0, c1 = half - 1, half + 1
        img[c0:c1, 1:image_hw - 1, :] = 1.0
        img[1:image_hw - 1, c0:c1, :] = 1.0
    else:
        raise ArgumentError(
            f"class_template: class_id {class_id} out of range [0, {len(CLASS_CAPTIONS)})")
    return img


def caption_tokens(caption: str, text_len: int) -> np.ndarray:
    """Byte-level token ids, padded with spaces or truncated to text_len."""
    raw = caption.encode("utf-8")[:text_len]
    raw = raw + b" " * (text_len - len(raw))
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def make_dataset(count: int, rng: RngState, *, num_classes: int = 2,
                 image_hw: int = 8, channels: int = 1,
                 jitter: float = 0.3) -> Dict:
    """Procedural dataset: class ids cycle, intensity ~ U[1 - jitter, 1]."""
    if not (1 <= num_classes <= len(CLASS_CAPTIONS)):
        raise ArgumentError(
            f"make_dataset: num_classes must lie in [1, {len(CLASS_CAPTIONS)}], "
            f"got {num_classes}")
    if count < 1:
        raise ArgumentError(f"make_dataset: count must be >= 1, got {count}")
    if not (0.0 <= jitter < 1.0):
        raise ArgumentError(f"make_dataset: jitter must lie in [0, 1), got {jitter}")
    class_ids = np.arange(count, dtype=np.int64) % num_classes
    templates = np.stack([class_template(c, image_hw, channels)
                          for c in range(num_classes)])
    intensity = 1.0 - jitter * rng.uniform((count,))
    images = templates[class_ids] * intensity[:, None, None, None]
    captions = [CLASS_CAPTIONS[c] for c in class_ids]
    return {"images": images, "class_ids": class_ids, "captions": captions}


def save_dataset(data: Dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensors(out / "images.mdmt", {"images": np.asarray(data["images"], dtype=np.float64)})
    with open(out / "captions.txt", "w", encoding="utf-8") as fh:
        for cap in data["captions"]:
            fh.write(cap + "\n")
    with open(out / "classes.txt", "w", encoding="utf-8") as fh:
        for c in data["class_ids"]:
            fh.write(f"{int(c)}\n")


def load_dataset(path) -> Dict:
    """Read and validate a dataset directory.

    Errors cite the first offending image index or caption/class line
    (1-based, matching what an editor shows).
    """
    root = Path(path)
    img_path = root / "images.mdmt"
    if not img_path.exists():
        raise DatasetFormatError(f"missing {img_path}")
    tensors = read_tensors(img_path)
    if "images" not in tensors:
        raise DatasetFormatError(f"{img_path} holds no 'images' tensor")
    images = tensors["images"]
    if images.ndim != 4:
        raise DatasetFormatError(
            f"images tensor must be [count, H, W, C], got shape {images.shape}")
    count = images.shape[0]
    bad = np.where((images < 0.0) | (images > 1.0))
    if bad[0].size:
        raise DatasetFormatError(
            f"image {int(bad[0][0])} has pixel value outside [0, 1]")

    cap_path = root / "captions.txt"
    if not cap_path.exists():
        raise DatasetFormatError(f"missing {cap_path}")
    with open(cap_path, encoding="utf-8") as fh:
        captions = fh.read().splitlines()
    if len(captions) != count:
        missing = min(len(captions) + 1, count)
        raise DatasetFormatError(
            f"captions.txt has {len(captions)} lines but images hold {count} "
            f"(first mismatch at line {missing})")

    cls_path = root / "classes.txt"
    class_ids: Optional[np.ndarray] = None
    if cls_path.exists():
        with open(cls_path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if len(lines) != count:
            missing = min(len(lines) + 1, count)
            raise DatasetFormatError(
                f"classes.txt has {len(lines)} lines but images hold {count} "
                f"(first mismatch at line {missing})")
        ids = []
        for i, line in enumerate(lines):
            try:
                ids.append(int(line))
            except ValueError:
                raise DatasetFormatError(
                    f"classes.txt line {i + 1} is not an integer: {line!r}") from None
        class_ids = np.asarray(ids, dtype=np.int64)
    return {"images": images, "captions": captions, "class_ids": class_ids}


def sample_batch(data: Dict, rng: RngState, batch_size: int,
                 text_len: int = 16) -> Dict[str, np.ndarray]:
    """Uniform-with-replacement batch; caption bytes padded to text_len."""
    count = data["images"].shape[0]
    if data["class_ids"] is None:
        raise ArgumentError("sample_batch: dataset has no class ids")
    idx = rng.integers(0, count, (batch_size,))
    return {
        "images": data["images"][idx],
        "token_ids": np.stack([caption_tokens(data["captions"][int(i)], text_len)
                               for i in idx]),
        "class_ids": data["class_ids"][idx],
    }


def nearest_template_class(images: np.ndarray, *, num_classes: int = 2) -> np.ndarray:
    """Fixed classifier for generated samples: per class, fit the template's
    intensity by least squares and pick the class with the smaller residual."""
    images = np.asarray(images, dtype=np.float64)
    flat = images.reshape(images.shape[0], -1)
    residuals = []
    for c in range(num_classes):
        tmpl = class_template(c, images.shape[1], images.shape[3]).reshape(-1)
        alpha = flat @ tmpl / (tmpl @ tmpl)
        residuals.append(np.sum((flat - alpha[:, None] * tmpl) ** 2, axis=1))
    return np.argmin(np.stack(residuals, axis=1), axis=1)
