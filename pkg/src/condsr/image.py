"""Image tensors, PNG I/O, patching and bicubic resampling.

Images are ``(C, H, W)`` float64 arrays tagged with a value-range
convention: ``"unit"`` for [0, 1] (I/O and metrics) or ``"signed"`` for
[-1, 1] (diffusion latents).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

UNIT = "unit"
SIGNED = "signed"
_BOUNDS = {UNIT: (0.0, 1.0), SIGNED: (-1.0, 1.0)}


class ImageLoadError(OSError):
    pass


@dataclass(frozen=True)
class ImageTensor:
    data: np.ndarray
    range_tag: str = UNIT

    def __post_init__(self):
        if self.range_tag not in _BOUNDS:
            raise ValueError(f"unknown range tag {self.range_tag!r}")
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[0] not in (1, 3):
            raise ValueError(f"expected (C, H, W) with C in (1, 3), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def clamped(self) -> "ImageTensor":
        lo, hi = _BOUNDS[self.range_tag]
        return ImageTensor(np.clip(self.data, lo, hi), self.range_tag)


@dataclass(frozen=True)
class PatchPair:
    hr: ImageTensor
    lr: ImageTensor
    scale: int

    def __post_init__(self):
        if self.scale < 2:
            raise ValueError("scale must be >= 2")
        if (self.hr.channels != self.lr.channels
                or self.hr.height != self.scale * self.lr.height
                or self.hr.width != self.scale * self.lr.width):
            raise ValueError(f"HR {self.hr.shape} is not {self.scale}x LR {self.lr.shape}")


def to_signed(img: ImageTensor) -> ImageTensor:
    if img.range_tag != UNIT:
        raise ValueError(f"to_signed expects a unit image, got {img.range_tag}")
    return ImageTensor(2.0 * img.data - 1.0, SIGNED)


def to_unit(img: ImageTensor) -> ImageTensor:
    if img.range_tag != SIGNED:
        raise ValueError(f"to_unit expects a signed image, got {img.range_tag}")
    return ImageTensor((img.data + 1.0) / 2.0, UNIT)


def load_image(path) -> ImageTensor:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PNG" or im.mode not in ("L", "RGB"):
                raise ImageLoadError(
                    f"{path}: unsupported image (format={im.format}, mode={im.mode}); "
                    "expected 8-bit grayscale or RGB PNG")
            arr = np.asarray(im, dtype=np.uint8)
    except ImageLoadError:
        raise
    except OSError as exc:
        raise ImageLoadError(f"{path}: cannot read image ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return ImageTensor(arr.astype(np.float64) / 255.0, UNIT)


def quantize(img: ImageTensor) -> np.ndarray:
    """Unit-range, clamped, round-half-up 8-bit values as ``(H, W[, C])``."""
    unit = to_unit(img) if img.range_tag == SIGNED else img
    v = np.clip(unit.data, 0.0, 1.0)
    q = np.floor(v * 255.0 + 0.5).astype(np.uint8)
    return q[0] if q.shape[0] == 1 else q.transpose(1, 2, 0)


def encode_png(img: ImageTensor) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(quantize(img)).save(buf, format="PNG")
    return buf.getvalue()


def save_image(img: ImageTensor, path) -> None:
    path = Path(path)
    data = encode_png(img)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def cubic_kernel(x, a: float = -0.5):
    """Keys cubic convolution kernel; a = -0.5 gives Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    # Half-pixel centers: output sample j sits at input coordinate
    # (j + 0.5) * n_in / n_out - 0.5. Out-of-range taps clamp to the edge.
    mat = np.zeros((n_out, n_in))
    centers = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(centers).astype(int)
    for offset in range(-1, 3):
        idx = base + offset
        w = cubic_kernel(centers - idx)
        np.add.at(mat, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), w)
    return mat


def bicubic_resize(img: ImageTensor, out_h: int, out_w: int) -> ImageTensor:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    rows = _resample_matrix(img.height, out_h)
    cols = _resample_matrix(img.width, out_w)
    out = np.einsum("ih,chw,jw->cij", rows, img.data, cols)
    lo, hi = _BOUNDS[img.range_tag]
    return ImageTensor(np.clip(out, lo, hi), img.range_tag)


def patch_origins(height: int, width: int, patch: int, stride: int) -> list[tuple[int, int]]:
    if patch < 1 or stride < 1:
        raise ValueError("patch and stride must be positive")
    if patch > min(height, width):
        raise ValueError(f"patch {patch} larger than image {height}x{width}")
    return [(r, c)
            for r in range(0, height - patch + 1, stride)
            for c in range(0, width - patch + 1, stride)]


def extract_patches(img: ImageTensor, patch: int, stride: int) -> list[ImageTensor]:
    return [ImageTensor(img.data[:, r:r + patch, c:c + patch], img.range_tag)
            for r, c in patch_origins(img.height, img.width, patch, stride)]


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    hr_path: Path
    lr_path: Path
    scale: int

    def load(self) -> PatchPair:
        return PatchPair(load_image(self.hr_path), load_image(self.lr_path), self.scale)


def write_manifest(entries, path) -> Path:
    """Write ``hr_path<TAB>lr_path<TAB>scale`` lines, paths relative to the manifest."""
    path = Path(path)
    root = path.parent.resolve()
    lines = []
    for e in entries:
        hr = os.path.relpath(Path(e.hr_path).resolve(), root)
        lr = os.path.relpath(Path(e.lr_path).resolve(), root)
        lines.append(f"{hr}\t{lr}\t{e.scale}\n")
    path.write_text("".join(lines), encoding="utf-8")
    return path


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    root = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
        hr, lr, scale = fields
        hr_path = root / hr
        entries.append(ManifestEntry(hr_path.stem, hr_path, root / lr, int(scale)))
    return entries
