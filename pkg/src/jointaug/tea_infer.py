"""Top-z test-time augmentation ensembling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .policy import TeaPolicy
from .tensor_net import SegNet, softmax
from .transforms import TeaOp, apply_tea, invert_tea


@dataclass(frozen=True)
class AggregationPlan:
    ops: tuple[TeaOp, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if not self.ops or len(self.ops) != len(self.weights):
            raise ConfigError("plan needs one weight per op")
        ids = [op.op_id for op in self.ops]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"plan ops must be distinct, got ids {ids}")
        if abs(sum(self.weights) - 1.0) > 1e-6 or min(self.weights) < 0:
            raise ConfigError("plan weights must be non-negative and sum to 1")

    def to_json(self) -> dict:
        return {"ops": [{"op_id": op.op_id, "name": op.name, "weight": w} for op, w in zip(self.ops, self.weights)]}


def build_plan(tea: TeaPolicy, z: int) -> AggregationPlan:
    """The ``z`` most probable ops (ties to the lower id), weights renormalised over the selection."""
    k = len(tea.ops)
    if not 1 <= z <= k:
        raise ConfigError(f"z must lie in 1..{k}, got {z}")
    p = tea.probs()
    order = sorted(range(k), key=lambda j: (-p[j], j))[:z]
    sel = p[order]
    weights = sel / sel.sum()
    return AggregationPlan(tuple(tea.ops[j] for j in order), tuple(float(w) for w in weights))


def identity_plan(tea_ops: list[TeaOp]) -> AggregationPlan:
    return AggregationPlan((tea_ops[0],), (1.0,))


def predict_proba(net: SegNet, image: np.ndarray) -> np.ndarray:
    """Softmax map (c, H, W) for one 2D image."""
    return softmax(net.forward(image[None, None].astype(net.dtype)))[0]


def aggregate(net: SegNet, image: np.ndarray, plan: AggregationPlan) -> tuple[np.ndarray, np.ndarray]:
    """Weighted sum of reverted per-op predictions and its per-pixel argmax."""
    if image.ndim == 3:
        image = image[0]
    if len(plan.ops) == 1 and plan.ops[0].kind == "identity":
        prob = predict_proba(net, image)
        return prob, prob.argmax(axis=0)
    acc = None
    for op, w in zip(plan.ops, plan.weights):
        pred = invert_tea(op, predict_proba(net, apply_tea(op, image)))
        acc = w * pred if acc is None else acc + w * pred
    return acc, acc.argmax(axis=0)
