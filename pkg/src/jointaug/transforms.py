"""Augmentation registries and 2D kernels.

Training-time augmentation (TRA) is a cascade of slots applied in slot
order; every slot picks one magnitude bin (bin 0 is always "off") and a
magnitude is then drawn uniformly inside the chosen bin.  Test-time
augmentation (TEA) is a flat pool of deterministic ops, each with an
inverse that acts on per-class probability maps.

Images are 2D float arrays (H, W); label maps are 2D integer arrays.
Rotations are anticlockwise for positive angles (display convention,
row 0 at the top) and, together with scaling, act about the patch centre.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError

SPATIAL_KINDS = frozenset({"scale", "rotate", "mirror_h", "mirror_v", "mirror_hv"})
INTENSITY_KINDS = frozenset({"gamma", "inv_gamma", "shift", "iscale", "contrast"})
NOISE_KINDS = frozenset({"blur", "sharpen", "noise", "lowres"})
DESTRUCTIVE_KINDS = ("square", "pow4", "mul0.01", "negmul0.01", "add300")

SPATIAL_INVERSE = "spatial-inverse"
IDENTITY_ON_PREDICTION = "identity-on-prediction"


@dataclass(frozen=True)
class MagnitudeBin:
    kind: str
    lo: float = 0.0
    hi: float = 0.0
    symmetric: bool = False

    def __post_init__(self):
        if self.lo > self.hi:
            raise ConfigError(f"bin range [{self.lo}, {self.hi}) is inverted")

    @property
    def label(self) -> str:
        if self.kind == "off":
            return "off"
        sign = "±" if self.symmetric else ""
        if self.lo == self.hi:
            return f"{self.kind} {sign}{self.lo:g}"
        return f"{self.kind} {sign}[{self.lo:g},{self.hi:g})"


OFF = MagnitudeBin("off")


@dataclass(frozen=True)
class TraSlot:
    slot_id: int
    category: str
    name: str
    bins: tuple[MagnitudeBin, ...]
    # Probability of the off bin under the heuristic initialisation; None means uniform.
    heuristic_off: float | None = 0.7

    def __post_init__(self):
        if not self.bins or self.bins[0].kind != "off":
            raise ConfigError(f"slot {self.name!r}: bin 0 must be the off bin")
        for kind in {b.kind for b in self.bins[1:]}:
            ranged = sorted((b.lo, b.hi) for b in self.bins[1:] if b.kind == kind and b.hi > b.lo)
            for (_, hi_a), (lo_b, _) in zip(ranged, ranged[1:]):
                if lo_b < hi_a:
                    raise ConfigError(f"slot {self.name!r}: overlapping {kind} magnitude ranges")


@dataclass(frozen=True)
class TeaOp:
    op_id: int
    category: str
    name: str
    kind: str
    magnitude: float = 0.0
    sign: int = 1

    @property
    def inverse_kind(self) -> str:
        return SPATIAL_INVERSE if self.kind in SPATIAL_KINDS else IDENTITY_ON_PREDICTION


@dataclass(frozen=True)
class TraInstance:
    """One realised cascade: per slot the chosen bin, its kernel and drawn magnitude/sign."""

    bins: tuple[int, ...]
    kinds: tuple[str, ...]
    magnitudes: tuple[float, ...]
    signs: tuple[int, ...]
    noise_seed: int = 0

    @property
    def is_identity(self) -> bool:
        return all(k == "off" for k in self.kinds)


# ------------------------------------------------------------------ registries

def _ranged(kind: str, edges: Iterable[tuple[float, float]], symmetric: bool) -> list[MagnitudeBin]:
    return [MagnitudeBin(kind, lo, hi, symmetric) for lo, hi in edges]


def default_tra_registry() -> list[TraSlot]:
    """Ten-slot 2D cascade: one rotation axis, two mirror axes, one shared noise slot."""
    tenths = [(0.0, 0.1), (0.1, 0.2), (0.2, 0.3)]
    return [
        TraSlot(0, "spatial", "scaling", (OFF, *_ranged("scale", tenths + [(0.3, 0.4), (0.4, 0.5)], True))),
        TraSlot(1, "spatial", "rotation",
                (OFF, *_ranged("rotate", [(0, 10), (10, 20), (20, 30)], True), MagnitudeBin("rotate", 90, 90, True))),
        TraSlot(2, "spatial", "mirror_h", (OFF, MagnitudeBin("mirror_h")), heuristic_off=0.5),
        TraSlot(3, "spatial", "mirror_v", (OFF, MagnitudeBin("mirror_v")), heuristic_off=0.5),
        TraSlot(4, "intensity", "gamma", (OFF, *_ranged("gamma", [(0.0, 0.2), (0.2, 0.4), (0.4, 0.6)], True))),
        TraSlot(5, "intensity", "inverted_gamma",
                (OFF, *_ranged("inv_gamma", [(0.0, 0.2), (0.2, 0.4), (0.4, 0.6)], True)), heuristic_off=0.8),
        TraSlot(6, "intensity", "intensity_shift", (OFF, *_ranged("shift", tenths, True))),
        TraSlot(7, "intensity", "intensity_scale", (OFF, *_ranged("iscale", tenths, True))),
        TraSlot(8, "intensity", "contrast", (OFF, *_ranged("contrast", tenths, True))),
        TraSlot(9, "noise", "noise", (
            OFF,
            *_ranged("blur", [(0.4, 0.6), (0.6, 0.8), (0.8, 1.0)], False),
            *_ranged("sharpen", [(0.8, 1.0), (0.6, 0.8), (0.4, 0.6)], False),
            *_ranged("noise", [(0.0, 0.05), (0.05, 0.10), (0.10, 0.15)], False),
            *_ranged("lowres", [(0.8, 1.0), (0.6, 0.8), (0.4, 0.6)], False),
        ), heuristic_off=0.8),
    ]


DESTRUCTIVE_HOST_SLOT = "noise"


def inject_destructive_tra(slots: Sequence[TraSlot]) -> list[TraSlot]:
    """Append the five harmful ops as extra bins of the noise slot, which is then initialised uniform.

    Sharing a slot with benign ops keeps harmful draws near a quarter of all samples; a slot of
    its own would corrupt five in six samples and stall training before any policy signal forms.
    """
    out = list(slots)
    k = next((i for i, s in enumerate(out) if s.name == DESTRUCTIVE_HOST_SLOT), None)
    if k is None:
        raise ConfigError(f"no {DESTRUCTIVE_HOST_SLOT!r} slot to host destructive ops")
    host = out[k]
    out[k] = replace(host, bins=host.bins + tuple(MagnitudeBin(kind) for kind in DESTRUCTIVE_KINDS),
                     heuristic_off=None)
    return out


def default_tea_registry() -> list[TeaOp]:
    specs: list[tuple[str, str, str, float, int]] = [("identity", "identity", "identity", 0.0, 1)]
    m3 = (0.05, 0.15, 0.25)
    specs += [("spatial", f"scale_down_{m}", "scale", m, -1) for m in m3]
    specs += [("spatial", f"scale_up_{m}", "scale", m, 1) for m in m3]
    specs += [("spatial", f"rotate_acw_{a}", "rotate", float(a), 1) for a in (5, 15, 25, 90, 180)]
    specs += [("spatial", f"rotate_cw_{a}", "rotate", float(a), -1) for a in (5, 15, 25, 90)]
    specs += [("spatial", "mirror_h", "mirror_h", 0.0, 1), ("spatial", "mirror_v", "mirror_v", 0.0, 1),
              ("spatial", "mirror_hv", "mirror_hv", 0.0, 1)]
    g3 = (0.1, 0.3, 0.5)
    specs += [("intensity", f"gamma_expansion_{g}", "gamma", g, 1) for g in g3]
    specs += [("intensity", f"gamma_compression_{g}", "gamma", g, -1) for g in g3]
    specs += [("intensity", f"add_intensity_{m}", "shift", m, 1) for m in m3]
    specs += [("intensity", f"sub_intensity_{m}", "shift", m, -1) for m in m3]
    specs += [("intensity", f"intensity_scale_up_{m}", "iscale", m, 1) for m in m3]
    specs += [("intensity", f"intensity_scale_down_{m}", "iscale", m, -1) for m in m3]
    specs += [("intensity", f"contrast_up_{m}", "contrast", m, 1) for m in m3]
    specs += [("intensity", f"contrast_down_{m}", "contrast", m, -1) for m in m3]
    specs += [("noise", f"blur_{s}", "blur", s, 1) for s in (0.5, 0.7, 0.9)]
    specs += [("noise", f"sharpen_{s}", "sharpen", s, 1) for s in (0.9, 0.7, 0.5)]
    specs += [("noise", f"gaussian_noise_{s}", "noise", s, 1) for s in (0.025, 0.075, 0.125)]
    specs += [("noise", f"low_res_{s}", "lowres", s, 1) for s in (0.9, 0.7, 0.5)]
    return [TeaOp(i, cat, name, kind, mag, sign) for i, (cat, name, kind, mag, sign) in enumerate(specs)]


def destructive_tea_ops(start_id: int) -> list[TeaOp]:
    return [TeaOp(start_id + k, "destructive", f"destructive_{kind}", kind) for k, kind in enumerate(DESTRUCTIVE_KINDS)]


def tra_registry_to_json(slots: Sequence[TraSlot]) -> list[dict]:
    return [
        {
            "slot_id": s.slot_id,
            "category": s.category,
            "name": s.name,
            "heuristic_off": s.heuristic_off,
            "bins": [dict(asdict(b), label=b.label) for b in s.bins],
        }
        for s in slots
    ]


def tra_registry_from_json(data: list[dict]) -> list[TraSlot]:
    out = []
    for s in data:
        bins = tuple(MagnitudeBin(b["kind"], b["lo"], b["hi"], b["symmetric"]) for b in s["bins"])
        out.append(TraSlot(s["slot_id"], s["category"], s["name"], bins, s.get("heuristic_off")))
    return out


def tea_registry_to_json(ops: Sequence[TeaOp]) -> list[dict]:
    return [dict(asdict(op), inverse_kind=op.inverse_kind) for op in ops]


def tea_registry_from_json(data: list[dict]) -> list[TeaOp]:
    return [TeaOp(d["op_id"], d["category"], d["name"], d["kind"], d["magnitude"], d["sign"]) for d in data]


# --------------------------------------------------------------------- kernels

def _center_grid(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, float, float]:
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    return cols - cx, cy - rows, cy, cx


def _source_coords(shape: tuple[int, int], angle_deg: float, scale: float) -> np.ndarray:
    """Input (row, col) sampled by each output pixel for rotate-then-scale about the centre."""
    u, v, cy, cx = _center_grid(shape)
    a = np.deg2rad(angle_deg)
    ix = (np.cos(a) * u + np.sin(a) * v) / scale
    iy = (-np.sin(a) * u + np.cos(a) * v) / scale
    return np.stack([cy - iy, ix + cx])


def _quarter_turns(angle_deg: float) -> int | None:
    k = angle_deg / 90.0
    if abs(k - round(k)) < 1e-12:
        return int(round(k)) % 4
    return None


def warp(image: np.ndarray, angle_deg: float = 0.0, scale: float = 1.0, order: int = 1,
         mode: str = "constant") -> np.ndarray:
    """Rotate (anticlockwise degrees) and scale about the centre; exact for quarter turns."""
    if scale == 1.0:
        k = _quarter_turns(angle_deg)
        if k is not None:
            return np.rot90(image, k).copy() if k else image.copy()
    coords = _source_coords(image.shape, angle_deg, scale)
    out = ndimage.map_coordinates(image.astype(np.float64), coords, order=order, mode=mode, cval=0.0)
    return out.astype(image.dtype)


def _minmax(x: np.ndarray) -> tuple[np.ndarray, float, float] | None:
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return None
    return (x.astype(np.float64) - lo) / (hi - lo), lo, hi


def gamma_correct(x: np.ndarray, exponent: float, inverted: bool = False) -> np.ndarray:
    """Rescale to [0, 1], raise to ``exponent`` (on the inverted image if asked), scale back."""
    scaled = _minmax(x)
    if scaled is None or exponent == 1.0:
        return x.copy()
    u, lo, hi = scaled
    u = 1.0 - (1.0 - u) ** exponent if inverted else u ** exponent
    return (u * (hi - lo) + lo).astype(x.dtype)


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(x.astype(np.float64), sigma, truncate=3.0).astype(x.dtype)


def _area_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Box-filter downsampling matrix: each output cell averages the input cells it covers."""
    edges = np.linspace(0.0, n_in, n_out + 1)
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        a, b = edges[i], edges[i + 1]
        for k in range(int(np.floor(a)), int(np.ceil(b))):
            m[i, k] = min(b, k + 1) - max(a, k)
    return m / m.sum(axis=1, keepdims=True)


def low_resolution(x: np.ndarray, factor: float) -> np.ndarray:
    h, w = x.shape
    hs, ws = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    small = _area_matrix(hs, h) @ x.astype(np.float64) @ _area_matrix(ws, w).T
    rows = np.clip((np.arange(h) + 0.5) * hs / h - 0.5, 0, hs - 1)
    cols = np.clip((np.arange(w) + 0.5) * ws / w - 0.5, 0, ws - 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(small, [rr, cc], order=1, mode="nearest").astype(x.dtype)


def _intensity(kind: str, x: np.ndarray, m: float, sign: int, rng: np.random.Generator | None) -> np.ndarray:
    dt = x.dtype
    if kind == "gamma":
        return gamma_correct(x, (1.0 + m) ** sign)
    if kind == "inv_gamma":
        return gamma_correct(x, (1.0 + m) ** sign, inverted=True)
    if kind == "shift":
        return (x + sign * m).astype(dt)
    if kind == "iscale":
        return (x * (1.0 + m) ** sign).astype(dt)
    if kind == "contrast":
        mean = float(x.mean(dtype=np.float64))
        return ((x - mean) * (1.0 + m) ** sign + mean).astype(dt)
    if kind == "blur":
        return gaussian_blur(x, m)
    if kind == "sharpen":
        return (2.0 * x.astype(np.float64) - gaussian_blur(x, m)).astype(dt)
    if kind == "noise":
        if rng is None:
            raise ConfigError("noise kernel needs a random generator")
        return (x + rng.normal(0.0, m, size=x.shape)).astype(dt)
    if kind == "lowres":
        return low_resolution(x, m)
    if kind == "square":
        return (x.astype(np.float64) ** 2).astype(dt)
    if kind == "pow4":
        return (x.astype(np.float64) ** 4).astype(dt)
    if kind == "mul0.01":
        return (x * 0.01).astype(dt)
    if kind == "negmul0.01":
        return (-x * 0.01).astype(dt)
    if kind == "add300":
        return (x + 300.0).astype(dt)
    raise ConfigError(f"unknown kernel {kind!r}")


def _spatial_params(kind: str, m: float, sign: int) -> tuple[float, float]:
    if kind == "scale":
        return 0.0, (1.0 + m) ** sign
    if kind == "rotate":
        return sign * m, 1.0
    raise ConfigError(f"{kind!r} is not a warp kernel")


def _spatial(kind: str, x: np.ndarray, m: float, sign: int, order: int, mode: str = "constant") -> np.ndarray:
    if kind == "mirror_h":
        return x[..., :, ::-1].copy()
    if kind == "mirror_v":
        return x[..., ::-1, :].copy()
    if kind == "mirror_hv":
        return x[..., ::-1, ::-1].copy()
    angle, scale = _spatial_params(kind, m, sign)
    if angle == 0.0 and scale == 1.0:
        return x.copy()
    return warp(x, angle, scale, order=order, mode=mode)


# -------------------------------------------------------------------- TRA path

def sample_tra_instance(slots: Sequence[TraSlot], chosen_bins: Sequence[int], rng: np.random.Generator) -> TraInstance:
    """Draw magnitudes uniformly inside each chosen bin, and a fair sign for symmetric bins."""
    if len(chosen_bins) != len(slots):
        raise ConfigError(f"expected {len(slots)} bin choices, got {len(chosen_bins)}")
    kinds, mags, signs = [], [], []
    for slot, b in zip(slots, chosen_bins):
        if not 0 <= b < len(slot.bins):
            raise ConfigError(f"bin {b} out of range for slot {slot.name!r}")
        mb = slot.bins[b]
        mag = float(rng.uniform(mb.lo, mb.hi)) if mb.hi > mb.lo else mb.lo
        sign = int(rng.choice((-1, 1))) if mb.symmetric else 1
        kinds.append(mb.kind)
        mags.append(mag)
        signs.append(sign)
    seed = int(rng.integers(2 ** 31))
    return TraInstance(tuple(int(b) for b in chosen_bins), tuple(kinds), tuple(mags), tuple(signs), seed)


def identity_instance(slots: Sequence[TraSlot]) -> TraInstance:
    n = len(slots)
    return TraInstance((0,) * n, ("off",) * n, (0.0,) * n, (1,) * n)


def apply_tra(instance: TraInstance, image: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply the cascade in slot order; geometry also moves the labels (nearest neighbour)."""
    if image.shape != labels.shape:
        raise ConfigError(f"image {image.shape} and labels {labels.shape} differ in shape")
    rng = np.random.default_rng(instance.noise_seed)
    for kind, m, sign in zip(instance.kinds, instance.magnitudes, instance.signs):
        if kind == "off":
            continue
        if kind in SPATIAL_KINDS:
            image = _spatial(kind, image, m, sign, order=1)
            labels = _spatial(kind, labels, m, sign, order=0)
        else:
            image = _intensity(kind, image, m, sign, rng)
    return image, labels


# -------------------------------------------------------------------- TEA path

def _tea_rng(op: TeaOp) -> np.random.Generator:
    return np.random.default_rng([7919, op.op_id])


def apply_tea(op: TeaOp, image: np.ndarray) -> np.ndarray:
    """Deterministic test-time transform of a 2D image."""
    if op.kind == "identity":
        return image.copy()
    if op.kind in SPATIAL_KINDS:
        return _spatial(op.kind, image, op.magnitude, op.sign, order=1)
    return _intensity(op.kind, image, op.magnitude, op.sign, _tea_rng(op))


def apply_tea_pair(op: TeaOp, image: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """TEA on an (image, labels) pair; labels follow the geometry only."""
    out = apply_tea(op, image)
    if op.kind in SPATIAL_KINDS:
        labels = _spatial(op.kind, labels, op.magnitude, op.sign, order=0)
    return out, labels


def _is_exact(op: TeaOp) -> bool:
    if op.kind.startswith("mirror"):
        return True
    if op.kind == "rotate":
        return _quarter_turns(op.magnitude) is not None
    return False


def inverse_op(op: TeaOp) -> TeaOp:
    """The op whose geometry undoes ``op`` (reciprocal scale, negated rotation, same mirror)."""
    if op.kind in ("scale", "rotate"):
        return replace(op, sign=-op.sign)
    return op


def tea_geometry(op: TeaOp, maps: np.ndarray) -> np.ndarray:
    """Apply only the geometric part of ``op`` to a (c, H, W) stack of maps."""
    if op.inverse_kind != SPATIAL_INVERSE:
        return maps.copy()
    return np.stack([_spatial(op.kind, ch, op.magnitude, op.sign, order=1, mode="nearest") for ch in maps])


def invert_tea(op: TeaOp, prediction: np.ndarray) -> np.ndarray:
    """Map a (c, H, W) probability map predicted on ``apply_tea(op, x)`` back onto ``x``'s grid.

    Interpolating inverses extend edges (nearest) and renormalise every pixel to sum 1.
    """
    if op.inverse_kind != SPATIAL_INVERSE:
        return prediction
    back = tea_geometry(inverse_op(op), prediction)
    if _is_exact(op):
        return back
    back = np.clip(back, 0.0, None)
    total = back.sum(axis=0, keepdims=True)
    c = back.shape[0]
    return np.where(total > 0, back / np.where(total > 0, total, 1.0), 1.0 / c).astype(prediction.dtype)
