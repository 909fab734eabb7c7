"""
Grayscale image I/O (PGM P5 8/16-bit and PNG) on top of Pillow.
"""

import logging
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from PIL import Image

from tools.errors import DomainError

logger = logging.getLogger("nse-image-io")

IMAGE_SUFFIXES = (".pgm", ".png")


def read_grayscale(path: Union[str, Path]) -> Tuple[np.ndarray, int]:
    """
    Read a grayscale image.

    Returns:
        (pixels as a 2-D int64 array, bit depth 8 or 16)
    """
    with Image.open(path) as img:
        mode = img.mode
        if mode in ("RGB", "RGBA", "P", "LA"):
            logger.warning(f"{path}: {mode} image converted to grayscale")
            img = img.convert("L")
            mode = "L"
        pixels = np.asarray(img).astype(np.int64)
    if pixels.ndim != 2:
        raise DomainError(f"{path}: expected a single-channel image, got shape {pixels.shape}")
    bit_depth = 8 if mode in ("L", "1") else 16
    return pixels, bit_depth


def write_grayscale(path: Union[str, Path], pixels: np.ndarray, bit_depth: int = 8) -> None:
    """Write a 2-D array as PGM or PNG, rounded and clipped to the bit depth."""
    data = np.asarray(pixels, dtype=np.float64)
    if data.ndim != 2:
        raise DomainError(f"expected a 2-D image, got shape {data.shape}")
    if bit_depth == 8:
        img = Image.fromarray(np.clip(np.rint(data), 0, 255).astype(np.uint8))
    elif bit_depth == 16:
        img = Image.fromarray(np.clip(np.rint(data), 0, 65535).astype(np.int32))
    else:
        raise DomainError(f"unsupported bit depth {bit_depth}")
    suffix = Path(path).suffix.lower()
    if suffix not in IMAGE_SUFFIXES:
        raise DomainError(f"unsupported image format {suffix!r}; use .pgm or .png")
    img.save(path, format="PPM" if suffix == ".pgm" else "PNG")
    logger.debug(f"wrote {path} ({data.shape[1]}x{data.shape[0]}, {bit_depth}-bit)")


def read_8bit(path: Union[str, Path]) -> np.ndarray:
    """Read a grayscale image scaled to the 8-bit DN range as float32."""
    pixels, bit_depth = read_grayscale(path)
    if bit_depth == 16 and pixels.max(initial=0) > 255:
        return (pixels / 257.0).astype(np.float32)
    return pixels.astype(np.float32)


def list_images(directory: Union[str, Path]) -> List[Path]:
    """Image files of a directory in sorted order."""
    root = Path(directory)
    if not root.is_dir():
        raise DomainError(f"not a directory: {directory}")
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
