"""Image I/O, bicubic degradation, patch sampling and dihedral augmentation."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ContractError


class ImageIOError(IOError):
    pass


@dataclass
class ImageBuffer:
    """8-bit sRGB image, row-major, stored as an (height, width, 3) uint8 array."""
    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.data.shape != (self.height, self.width, 3):
            raise ContractError(f"image data shape {self.data.shape} != ({self.height}, {self.width}, 3)")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageBuffer":
        arr = np.asarray(arr)
        return cls(arr.shape[1], arr.shape[0], arr)

    @classmethod
    def from_float(cls, chw: np.ndarray) -> "ImageBuffer":
        """(3, h, w) floats in [0, 1] -> bytes, rounding half away from zero."""
        return cls.from_array(quantize(np.transpose(chw, (1, 2, 0))))

    def to_float(self, dtype=np.float64) -> np.ndarray:
        """(3, h, w) in [0, 1]."""
        return np.transpose(self.data, (2, 0, 1)).astype(dtype) / 255.0

    def crop(self, y: int, x: int, h: int, w: int) -> "ImageBuffer":
        return ImageBuffer.from_array(self.data[y:y + h, x:x + w])


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x01: np.ndarray) -> np.ndarray:
    return np.clip(round_half_away(np.asarray(x01, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# -- I/O -----------------------------------------------------------------------------

def _read_ppm(raw: bytes, path) -> np.ndarray:
    # header: P6 <ws> width <ws> height <ws> maxval <single ws> payload; '#' comments allowed
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageIOError(f"{path}: malformed PPM header")
        fields.append(int(raw[start:pos]))
    width, height, maxval = fields
    if maxval != 255:
        raise ImageIOError(f"{path}: unsupported PPM maxval {maxval} (only 255)")
    pos += 1
    need = width * height * 3
    payload = raw[pos:pos + need]
    if len(payload) < need:
        raise ImageIOError(f"{path}: truncated PPM ({len(payload)} of {need} payload bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def load_image(path) -> ImageBuffer:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc.strerror or exc}") from None
    if raw[:2] == b"P6":
        return ImageBuffer.from_array(_read_ppm(raw, path))
    if raw[:8] != b"\x89PNG\r\n\x1a\n":
        raise ImageIOError(f"{path}: unsupported image format (need PNG or binary PPM)")
    try:
        with Image.open(io.BytesIO(raw)) as im:
            im.load()
            if im.mode != "RGB":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise ImageIOError(f"{path}: cannot decode PNG ({exc})") from None
    return ImageBuffer.from_array(arr)


def save_image(buf: ImageBuffer, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix in (".ppm", ".pnm"):
            header = f"P6\n{buf.width} {buf.height}\n255\n".encode("ascii")
            path.write_bytes(header + buf.data.tobytes())
        elif suffix == ".png":
            Image.fromarray(buf.data, mode="RGB").save(path, format="PNG")
        else:
            raise ImageIOError(f"{path}: unsupported output format {suffix!r} (use .png or .ppm)")
    except OSError as exc:
        if isinstance(exc, ImageIOError):
            raise
        raise ImageIOError(f"{path}: {exc.strerror or exc}") from None


# -- bicubic degradation -------------------------------------------------------------

def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def resize_weights(n_in: int, r: int) -> np.ndarray:
    """(n_in // r, n_in) matrix of antialiased Catmull-Rom downsampling weights, edge-clamped."""
    n_out = n_in // r
    W = np.zeros((n_out, n_in))
    support = 2 * r
    for i in range(n_out):
        center = (i + 0.5) * r - 0.5
        lo = math.floor(center - support)
        taps = np.arange(lo, lo + 2 * support + 2)
        w = cubic((center - taps) / r) / r
        w /= w.sum()
        for j, wj in zip(np.clip(taps, 0, n_in - 1), w):
            W[i, j] += wj
    return W


def bicubic_downsample(buf: ImageBuffer, r: int) -> ImageBuffer:
    if r < 1 or buf.width % r or buf.height % r:
        raise ContractError(f"bicubic_downsample: {buf.width}x{buf.height} not divisible by {r}")
    if r == 1:
        return ImageBuffer.from_array(buf.data.copy())
    wy = resize_weights(buf.height, r)
    wx = resize_weights(buf.width, r)
    x = buf.data.astype(np.float64) / 255.0
    tmp = np.einsum("oh,hwc->owc", wy, x)
    out = np.einsum("pw,owc->opc", wx, tmp)
    return ImageBuffer.from_array(quantize(out))


def crop_to_multiple(buf: ImageBuffer, r: int) -> ImageBuffer:
    return buf.crop(0, 0, buf.height - buf.height % r, buf.width - buf.width % r)


# -- patches / augmentation -------------------------------------------------------------

def sample_origin(lr_hw: tuple[int, int], patch: int, rng: np.random.Generator) -> tuple[int, int]:
    h, w = lr_hw
    if h < patch or w < patch:
        raise ContractError(f"image {h}x{w} smaller than patch {patch}")
    return int(rng.integers(0, h - patch + 1)), int(rng.integers(0, w - patch + 1))


def sample_patch(hr: ImageBuffer, lr: ImageBuffer, patch: int, r: int, rng: np.random.Generator):
    """Aligned random crop: (lr_patch, hr_patch) with the HR crop at r x the LR origin."""
    if hr.width != r * lr.width or hr.height != r * lr.height:
        raise ContractError(f"HR {hr.width}x{hr.height} is not {r}x LR {lr.width}x{lr.height}")
    y, x = sample_origin((lr.height, lr.width), patch, rng)
    return lr.crop(y, x, patch, patch), hr.crop(r * y, r * x, r * patch, r * patch)


def dihedral(arr: np.ndarray, element: int, axes=(0, 1)) -> np.ndarray:
    """Element 0..7 of the square's symmetry group: rotate by 90*(e % 4), then flip if e >= 4."""
    out = np.rot90(arr, element % 4, axes=axes)
    if element >= 4:
        out = np.flip(out, axis=axes[1])
    return np.ascontiguousarray(out)


def augment(pair, rng: np.random.Generator, axes=(0, 1)):
    """Apply one random dihedral transform to both members of a (lr, hr) pair.

    Members may be ImageBuffers or arrays whose spatial axes are ``axes``.
    """
    lr, hr = pair
    shapes = []
    for item in pair:
        arr = item.data if isinstance(item, ImageBuffer) else item
        shapes.append((arr.shape[axes[0]], arr.shape[axes[1]]))
    if any(h != w for h, w in shapes):
        raise ContractError(f"augment needs square patches, got {shapes}")
    e = int(rng.integers(0, 8))

    def apply(item):
        if isinstance(item, ImageBuffer):
            return ImageBuffer.from_array(dihedral(item.data, e))
        return dihedral(item, e, axes)

    return apply(lr), apply(hr)


# -- manifests --------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    entries: list[tuple[Path, Path | None]]
    scale: int
    split: str

    def __len__(self) -> int:
        return len(self.entries)

    def load_pairs(self) -> list[tuple[ImageBuffer, ImageBuffer]]:
        """(hr, lr) pairs; missing LR is generated by bicubic downsampling of the cropped HR."""
        pairs = []
        for hr_path, lr_path in self.entries:
            hr = crop_to_multiple(load_image(hr_path), self.scale)
            if lr_path is None:
                lr = bicubic_downsample(hr, self.scale)
            else:
                lr = load_image(lr_path)
                if (hr.width, hr.height) != (self.scale * lr.width, self.scale * lr.height):
                    raise ContractError(f"{lr_path}: LR size {lr.width}x{lr.height} is not 1/{self.scale} of HR")
            pairs.append((hr, lr))
        return pairs


def load_manifest(path, scale: int, split: str | None = None) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc.strerror or exc}") from None
    base = path.parent
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) > 2:
            raise ImageIOError(f"{path}:{lineno}: expected 'hr_path<TAB>lr_path?'")
        hr = base / parts[0].strip()
        lr = base / parts[1].strip() if len(parts) == 2 and parts[1].strip() else None
        for p in (hr, lr):
            if p is not None and not p.is_file():
                raise ImageIOError(f"{path}:{lineno}: missing file {p}")
        entries.append((hr, lr))
    if not entries:
        raise ImageIOError(f"{path}: manifest lists no images")
    return DatasetManifest(entries, scale, split or path.stem)
