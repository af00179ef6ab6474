"""Synthetic class-imbalanced segmentation tasks and class-aware patch sampling.

Each image is a smooth textured background with a few soft-edged
elliptical foreground blobs covering a small fraction of the pixels.
Validation and test splits can be drawn from a shifted distribution
(intensity bias, contrast scaling, blob orientation bias).

On disk a dataset is a directory holding ``manifest.json`` and two raw
little-endian blobs, each prefixed with an 8-byte magic.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, DatasetFormatError, DatasetValidationError

FORMAT_VERSION = 1
BLOB_MAGIC = b"JAUGBLOB"
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Shift:
    intensity_bias: float = 0.0
    contrast_scale: float = 1.0
    rotation_bias: float = 0.0  # degrees added to blob orientation

    @property
    def is_zero(self) -> bool:
        return self.intensity_bias == 0.0 and self.contrast_scale == 1.0 and self.rotation_bias == 0.0


@dataclass(frozen=True)
class TaskSpec:
    size: int = 96
    n_classes: int = 2
    prevalence: float = 0.02
    noise_sigma: float = 0.35
    texture_sigma: float = 2.0
    fg_contrast: float = 1.0
    edge_width: float = 1.0
    orientation: float = 0.0
    orientation_spread: float = 20.0
    shift: Shift = field(default_factory=lambda: Shift(0.35, 0.7, 45.0))
    n_train: int = 40
    n_val: int = 10
    n_test: int = 20

    def __post_init__(self):
        if not 0.0 < self.prevalence <= 0.5:
            raise ConfigError("prevalence must lie in (0, 0.5]")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if self.size < 16:
            raise ConfigError("image size must be at least 16")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "TaskSpec":
        data = dict(data)
        if "shift" in data and isinstance(data["shift"], dict):
            data["shift"] = Shift(**data["shift"])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown task fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, H, W) float32
    labels: np.ndarray  # (N, H, W) uint8
    n_classes: int
    split: str

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise DatasetValidationError(f"images must be (N, 1, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],) + self.images.shape[2:]:
            raise DatasetValidationError(f"labels {self.labels.shape} do not pair with images {self.images.shape}")
        bad = np.argwhere(self.labels >= self.n_classes)
        if bad.size:
            raise DatasetValidationError(
                f"label values >= {self.n_classes} at (image, row, col) {bad[:20].tolist()}"
                + (f" and {len(bad) - 20} more" if len(bad) > 20 else ""))
        self._fg_index: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.images)

    def equals(self, other: "Dataset") -> bool:
        return (self.split == other.split and self.n_classes == other.n_classes
                and np.array_equal(self.images, other.images) and np.array_equal(self.labels, other.labels))

    @property
    def fg_fraction(self) -> float:
        return float((self.labels > 0).mean())

    def fg_pixels(self) -> np.ndarray:
        """(k, 3) array of (image, row, col) of every foreground pixel."""
        if self._fg_index is None:
            self._fg_index = np.argwhere(self.labels > 0)
        return self._fg_index


# ------------------------------------------------------------------ generation

def _texture(rng: np.random.Generator, size: int, spec: TaskSpec) -> np.ndarray:
    smooth = ndimage.gaussian_filter(rng.normal(size=(size, size)), spec.texture_sigma, mode="wrap")
    smooth /= smooth.std() + 1e-12
    white = rng.normal(size=(size, size))
    return spec.noise_sigma * (0.8 * smooth + 0.6 * white)


def _render(rng: np.random.Generator, spec: TaskSpec, shift: Shift) -> tuple[np.ndarray, np.ndarray]:
    n = spec.size
    image = _texture(rng, n, spec)
    labels = np.zeros((n, n), dtype=np.uint8)
    area = spec.prevalence * n * n * rng.uniform(0.7, 1.3)
    n_blobs = int(rng.integers(1, 3))
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)
    for _ in range(n_blobs):
        aspect = rng.uniform(1.6, 2.6)
        b = np.sqrt(area / n_blobs / (np.pi * aspect))
        a = aspect * b
        theta = np.deg2rad(spec.orientation + shift.rotation_bias + rng.uniform(-1, 1) * spec.orientation_spread)
        margin = a + 2
        cy, cx = rng.uniform(margin, n - 1 - margin, size=2)
        du, dv = cols - cx, cy - rows
        along = np.cos(theta) * du + np.sin(theta) * dv
        across = -np.sin(theta) * du + np.cos(theta) * dv
        r = np.sqrt((along / a) ** 2 + (across / b) ** 2)
        cls = int(rng.integers(1, spec.n_classes))
        inside = r <= 1.0
        labels[inside] = cls
        soft = 1.0 / (1.0 + np.exp(-(1.0 - r) * b / spec.edge_width))
        image += spec.fg_contrast * cls * soft
    image = shift.contrast_scale * image + shift.intensity_bias
    return image.astype(np.float32), labels


def _split(rng: np.random.Generator, spec: TaskSpec, count: int, shift: Shift, name: str) -> Dataset:
    pairs = [_render(rng, spec, shift) for _ in range(count)]
    images = np.stack([p[0] for p in pairs])[:, None]
    labels = np.stack([p[1] for p in pairs])
    return Dataset(images, labels, spec.n_classes, name)


def gen_task(spec: TaskSpec, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Train, val and test splits; val/test carry ``spec.shift``.  Pure in (spec, seed)."""
    streams = np.random.SeedSequence(seed).spawn(3)
    none = Shift(0.0, 1.0, 0.0)
    train = _split(np.random.default_rng(streams[0]), spec, spec.n_train, none, "train")
    val = _split(np.random.default_rng(streams[1]), spec, spec.n_val, spec.shift, "val")
    test = _split(np.random.default_rng(streams[2]), spec, spec.n_test, spec.shift, "test")
    return train, val, test


# --------------------------------------------------------------- patch sampler

@dataclass
class PatchBatch:
    images: np.ndarray  # (n, P, P) float32
    labels: np.ndarray  # (n, P, P) uint8
    classes: np.ndarray  # (n,) 0 = BG, 1 = FG, from the central pixel
    centers: np.ndarray  # (n, 3) source (image, row, col)


def extract_patch(dataset: Dataset, index: int, row: int, col: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """``size`` x ``size`` window whose pixel (size//2, size//2) is (row, col); zero outside the image."""
    half = size // 2
    img = dataset.images[index, 0]
    lab = dataset.labels[index]
    h, w = img.shape
    out_i = np.zeros((size, size), dtype=img.dtype)
    out_l = np.zeros((size, size), dtype=lab.dtype)
    r0, c0 = row - half, col - half
    rs, re = max(r0, 0), min(r0 + size, h)
    cs, ce = max(c0, 0), min(c0 + size, w)
    out_i[rs - r0:re - r0, cs - c0:ce - c0] = img[rs:re, cs:ce]
    out_l[rs - r0:re - r0, cs - c0:ce - c0] = lab[rs:re, cs:ce]
    return out_i, out_l


def sample_patch_batch(dataset: Dataset, n: int, fg_fraction: float, rng: np.random.Generator,
                       patch_size: int = 48) -> PatchBatch:
    """``round(n * fg_fraction)`` FG-centred patches and the rest BG-centred, in shuffled order."""
    h, w = dataset.images.shape[2:]
    if patch_size > min(h, w):
        raise ConfigError(f"patch size {patch_size} exceeds image size {(h, w)}")
    if not 0.0 <= fg_fraction <= 1.0:
        raise ConfigError("fg_fraction must lie in [0, 1]")
    n_fg = int(round(n * fg_fraction))
    fg = dataset.fg_pixels()
    if n_fg and len(fg) == 0:
        raise DataError(f"{dataset.split} dataset has no foreground pixels to centre patches on")
    centers = [tuple(fg[rng.integers(len(fg))]) for _ in range(n_fg)]
    while len(centers) < n:
        k, r, c = int(rng.integers(len(dataset))), int(rng.integers(h)), int(rng.integers(w))
        if dataset.labels[k, r, c] == 0:
            centers.append((k, r, c))
    order = rng.permutation(n)
    centers = [centers[i] for i in order]
    imgs, labs = zip(*(extract_patch(dataset, int(k), int(r), int(c), patch_size) for k, r, c in centers)) if n else ((), ())
    half = patch_size // 2
    labels = np.stack(labs) if n else np.zeros((0, patch_size, patch_size), np.uint8)
    classes = (labels[:, half, half] > 0).astype(np.int64) if n else np.zeros(0, np.int64)
    return PatchBatch(np.stack(imgs) if n else np.zeros((0, patch_size, patch_size), np.float32),
                      labels, classes, np.array(centers, dtype=np.int64).reshape(-1, 3))


# ----------------------------------------------------------------- persistence

_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


def _write_blob(path: Path, array: np.ndarray, dtype: str) -> dict:
    payload = np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes()
    path.write_bytes(BLOB_MAGIC + payload)
    return {"file": path.name, "dtype": dtype, "shape": list(array.shape),
            "sha256": hashlib.sha256(payload).hexdigest()}


def save_dataset(dataset: Dataset, path: str | Path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": FORMAT_VERSION,
        "split": dataset.split,
        "n_classes": dataset.n_classes,
        "count": len(dataset),
        "blobs": {
            "images": _write_blob(root / "images.bin", dataset.images, "f32le"),
            "labels": _write_blob(root / "labels.bin", dataset.labels, "u8"),
        },
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def _read_blob(root: Path, meta: dict, expect_dtype: str, expect_shape: tuple) -> np.ndarray:
    name = meta.get("file", "?")
    if meta.get("dtype") != expect_dtype:
        raise DatasetFormatError(f"{name}: dtype mismatch, expected {expect_dtype}, manifest says {meta.get('dtype')!r}")
    if tuple(meta.get("shape", ())) != expect_shape:
        raise DatasetFormatError(f"{name}: shape mismatch, manifest shape {meta.get('shape')} vs expected {list(expect_shape)}")
    try:
        raw = (root / name).read_bytes()
    except OSError as exc:
        raise DatasetFormatError(f"{name}: cannot read blob: {exc}") from None
    for offset, (got, want) in enumerate(zip(raw[:len(BLOB_MAGIC)], BLOB_MAGIC)):
        if got != want:
            raise DatasetFormatError(f"{name}: bad magic byte at offset {offset} (0x{got:02x} != 0x{want:02x})")
    if len(raw) < len(BLOB_MAGIC):
        raise DatasetFormatError(f"{name}: truncated magic at offset {len(raw)}")
    payload = raw[len(BLOB_MAGIC):]
    dt = _DTYPES[expect_dtype]
    need = int(np.prod(expect_shape)) * dt.itemsize
    if len(payload) < need:
        raise DatasetFormatError(f"{name}: truncated payload, {len(payload)} of {need} bytes present")
    if len(payload) > need:
        raise DatasetFormatError(f"{name}: {len(payload) - need} unexpected trailing bytes")
    if hashlib.sha256(payload).hexdigest() != meta.get("sha256"):
        raise DatasetFormatError(f"{name}: sha256 checksum mismatch")
    return np.frombuffer(payload, dtype=dt).reshape(expect_shape).copy()


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        version = manifest["version"]
        count, n_classes, split = int(manifest["count"]), int(manifest["n_classes"]), manifest["split"]
        blobs = manifest["blobs"]
        img_meta, lab_meta = blobs["images"], blobs["labels"]
        _, _, h, w = img_meta["shape"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"{root}: malformed manifest header ({type(exc).__name__}: {exc})") from None
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{root}: unsupported format version {version!r}")
    images = _read_blob(root, img_meta, "f32le", (count, 1, h, w)).astype(np.float32)
    labels = _read_blob(root, lab_meta, "u8", (count, h, w))
    return Dataset(images, labels, n_classes, split)


def save_task(root: str | Path, spec: TaskSpec, seed: int, splits: tuple[Dataset, Dataset, Dataset]) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for ds in splits:
        save_dataset(ds, root / ds.split)
    (root / "task.json").write_text(json.dumps({"seed": seed, "spec": spec.to_json()}, indent=2))
    return root


def load_task(root: str | Path) -> tuple[Dataset, Dataset, Dataset]:
    root = Path(root)
    return tuple(load_dataset(root / s) for s in SPLITS)  # type: ignore[return-value]
