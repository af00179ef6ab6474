"""Augmentation policies and their gradient-based updates.

Policies are logit tables; reported probabilities are softmax within a
slot.  A categorical choice is drawn with the Gumbel-max construction, and
the per-sample weight ``w = s_chosen + stop_grad(1 - s_chosen)`` equals 1
in value while routing a gradient into the chosen score.  Validation-loss
sensitivities per sample are centred within their patch class and divided
by how often the chosen op appeared in the batch before they are pushed
through the softmax Jacobian into the logits.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .transforms import (
    TeaOp,
    TraSlot,
    tea_registry_from_json,
    tea_registry_to_json,
    tra_registry_from_json,
    tra_registry_to_json,
)

BG, FG = 0, 1
CLASS_NAMES = ("BG", "FG")
POLICY_VERSION = 1

U_CLAMP = 1e-12


@dataclass(frozen=True)
class SampleDraw:
    gumbels: np.ndarray
    scores: np.ndarray
    chosen: int


@dataclass(frozen=True)
class WeightRecord:
    value: float
    grad: np.ndarray  # d w / d s


def _softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax(logits: np.ndarray) -> np.ndarray:
    return _softmax(logits)


def gumbel_softmax_draw(logits: np.ndarray, rng: np.random.Generator | None = None,
                        gumbels: np.ndarray | None = None) -> SampleDraw:
    """Perturb ``logits`` with Gumbel noise and take the softmax; the argmax is the choice.

    ``gumbels`` may be given explicitly (tests); otherwise they come from ``rng``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise ConfigError("logits must be a non-empty vector")
    if not np.all(np.isfinite(logits)):
        raise ConfigError("logits must be finite")
    if gumbels is None:
        if rng is None:
            raise ConfigError("need either rng or explicit gumbels")
        u = np.clip(rng.random(logits.size), U_CLAMP, 1.0 - U_CLAMP)
        gumbels = -np.log(-np.log(u))
    gumbels = np.asarray(gumbels, dtype=np.float64)
    s = _softmax(logits + gumbels)
    return SampleDraw(gumbels, s, int(np.argmax(s)))


def draw_weight(draw: SampleDraw) -> WeightRecord:
    grad = np.zeros_like(draw.scores)
    grad[draw.chosen] = 1.0
    return WeightRecord(1.0, grad)


def softmax_jacobian_row(draw: SampleDraw) -> np.ndarray:
    """d s_chosen / d logits = s_chosen * (onehot(chosen) - s)."""
    s = draw.scores
    row = -s[draw.chosen] * s
    row[draw.chosen] += s[draw.chosen]
    return row


def normalize_grads_by_class(per_sample: Sequence[float], classes: Sequence[Hashable]) -> np.ndarray:
    """Subtract from each sample's gradient the mean over samples of the same class."""
    g = np.asarray(per_sample, dtype=np.float64)
    cls = list(classes)
    if len(cls) != len(g):
        raise ConfigError("per-sample gradients and classes differ in length")
    h = np.empty_like(g)
    for c in set(cls):
        idx = [i for i, k in enumerate(cls) if k == c]
        h[idx] = g[idx] - g[idx].mean()
    return h


def normalize_by_sampling_freq(h: Sequence[float], chosen: Sequence[Hashable]) -> np.ndarray:
    """Divide each entry by the number of samples in the batch that chose the same op."""
    h = np.asarray(h, dtype=np.float64)
    chosen = list(chosen)
    if len(chosen) != len(h):
        raise ConfigError("gradients and choices differ in length")
    counts = Counter(chosen)
    return h / np.array([counts[c] for c in chosen], dtype=np.float64)


def apply_policy_update(logits: Mapping[Hashable, np.ndarray],
                        contributions: Iterable[tuple[float, np.ndarray, Hashable]],
                        lr: float) -> dict:
    """Gradient descent on the logit tables: ``table[addr] -= lr * sum(h_hat * row)``."""
    if lr <= 0:
        raise ConfigError("policy learning rate must be positive")
    out = {k: np.array(v, dtype=np.float64) for k, v in logits.items()}
    grads: dict = {}
    for h_hat, row, addr in contributions:
        if addr not in out:
            raise ConfigError(f"policy address {addr!r} out of range")
        if len(row) != len(out[addr]):
            raise ConfigError(f"Jacobian row length {len(row)} does not match table {addr!r}")
        grads[addr] = grads.get(addr, 0.0) + h_hat * np.asarray(row, dtype=np.float64)
    for addr, g in grads.items():
        out[addr] -= lr * g
    return out


# ------------------------------------------------------------- policy tables

def heuristic_slot_logits(slot: TraSlot, scheme: str) -> np.ndarray:
    k = len(slot.bins)
    if scheme == "uniform" or slot.heuristic_off is None or k == 1:
        return np.zeros(k)
    if scheme != "heuristic":
        raise ConfigError(f"unknown initialisation scheme {scheme!r}")
    p = np.full(k, (1.0 - slot.heuristic_off) / (k - 1))
    p[0] = slot.heuristic_off
    return np.log(p)


class ClassPolicy:
    """Per-class (BG, FG), per-slot TRA logits.  ``tied`` shares one table between classes."""

    def __init__(self, slots: Sequence[TraSlot], logits: Mapping[tuple[int, int], np.ndarray], tied: bool = False):
        self.slots = list(slots)
        self.tied = bool(tied)
        classes = (BG,) if self.tied else (BG, FG)
        expected = {(c, s) for c in classes for s in range(len(self.slots))}
        if set(logits) != expected:
            raise ConfigError("logit tables do not match the slot registry")
        self.logits = {k: np.array(v, dtype=np.float64) for k, v in logits.items()}
        for (c, s), v in self.logits.items():
            if v.shape != (len(self.slots[s].bins),) or not np.all(np.isfinite(v)):
                raise ConfigError(f"bad logit table for class {c} slot {s}")

    @classmethod
    def init(cls, slots: Sequence[TraSlot], scheme: str = "heuristic", tied: bool = False) -> "ClassPolicy":
        classes = (BG,) if tied else (BG, FG)
        return cls(slots, {(c, s): heuristic_slot_logits(slot, scheme)
                           for c in classes for s, slot in enumerate(slots)}, tied)

    def address(self, cls: int, slot: int) -> tuple[int, int]:
        return (BG if self.tied else cls, slot)

    def table(self, cls: int, slot: int) -> np.ndarray:
        return self.logits[self.address(cls, slot)]

    def probs(self, cls: int, slot: int) -> np.ndarray:
        return _softmax(self.table(cls, slot))

    def with_logits(self, logits: Mapping[tuple[int, int], np.ndarray]) -> "ClassPolicy":
        return ClassPolicy(self.slots, logits, self.tied)

    def copy(self) -> "ClassPolicy":
        return self.with_logits(self.logits)

    def equals(self, other: "ClassPolicy") -> bool:
        return self.tied == other.tied and all(np.array_equal(v, other.logits[k]) for k, v in self.logits.items())

    def to_json(self, iteration: int = 0) -> dict:
        classes = {}
        for c in (BG, FG):
            rows = []
            for s, slot in enumerate(self.slots):
                logit = self.table(c, s)
                prob = _softmax(logit)
                rows.append({
                    "slot_id": slot.slot_id,
                    "name": slot.name,
                    "bins": [{"op": b.kind, "bin": b.label, "lo": b.lo, "hi": b.hi,
                              "logit": float(logit[j]), "prob": float(prob[j])}
                             for j, b in enumerate(slot.bins)],
                })
            classes[CLASS_NAMES[c]] = rows
        return {"version": POLICY_VERSION, "kind": "tra", "iteration": int(iteration), "tied": self.tied,
                "registry": tra_registry_to_json(self.slots), "classes": classes}

    @classmethod
    def from_json(cls, data: dict) -> "ClassPolicy":
        _check_header(data, "tra")
        slots = tra_registry_from_json(data["registry"])
        classes = (BG,) if data["tied"] else (BG, FG)
        logits = {(c, s): np.array([b["logit"] for b in data["classes"][CLASS_NAMES[c]][s]["bins"]])
                  for c in classes for s in range(len(slots))}
        return cls(slots, logits, data["tied"])


HEURISTIC_TEA_NAMES = frozenset({"identity", "mirror_h", "mirror_v", "mirror_hv", "rotate_acw_180"})
HEURISTIC_TEA_LOGIT = math.log(8.0)


class TeaPolicy:
    def __init__(self, ops: Sequence[TeaOp], logits: np.ndarray):
        self.ops = list(ops)
        self.logits = np.array(logits, dtype=np.float64)
        if self.logits.shape != (len(self.ops),) or not np.all(np.isfinite(self.logits)):
            raise ConfigError("TEA logits must be a finite vector matching the op pool")
        if [op.op_id for op in self.ops] != list(range(len(self.ops))):
            raise ConfigError("TEA op ids must be 0..K-1 in order")

    @classmethod
    def init(cls, ops: Sequence[TeaOp], scheme: str = "heuristic") -> "TeaPolicy":
        """Uniform, or mirrors/180-degree rotation/identity favoured as in common TTA defaults."""
        if scheme == "uniform":
            return cls(ops, np.zeros(len(ops)))
        if scheme != "heuristic":
            raise ConfigError(f"unknown initialisation scheme {scheme!r}")
        return cls(ops, np.array([HEURISTIC_TEA_LOGIT if op.name in HEURISTIC_TEA_NAMES else 0.0 for op in ops]))

    def probs(self) -> np.ndarray:
        return _softmax(self.logits)

    def with_logits(self, logits: np.ndarray) -> "TeaPolicy":
        return TeaPolicy(self.ops, logits)

    def copy(self) -> "TeaPolicy":
        return self.with_logits(self.logits)

    def to_json(self, iteration: int = 0) -> dict:
        p = self.probs()
        return {"version": POLICY_VERSION, "kind": "tea", "iteration": int(iteration),
                "registry": tea_registry_to_json(self.ops),
                "ops": [{"op_id": op.op_id, "name": op.name, "logit": float(self.logits[k]), "prob": float(p[k])}
                        for k, op in enumerate(self.ops)]}

    @classmethod
    def from_json(cls, data: dict) -> "TeaPolicy":
        _check_header(data, "tea")
        return cls(tea_registry_from_json(data["registry"]), np.array([o["logit"] for o in data["ops"]]))


def _check_header(data: dict, kind: str) -> None:
    if data.get("version") != POLICY_VERSION:
        raise ConfigError(f"policy version {data.get('version')!r} is not supported (expected {POLICY_VERSION})")
    if data.get("kind") != kind:
        raise ConfigError(f"expected a {kind} policy, got {data.get('kind')!r}")


def policy_from_json(data: dict) -> ClassPolicy | TeaPolicy:
    kind = data.get("kind")
    if kind == "tra":
        return ClassPolicy.from_json(data)
    if kind == "tea":
        return TeaPolicy.from_json(data)
    raise ConfigError(f"unknown policy kind {kind!r}")
