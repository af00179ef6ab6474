"""Joint learning of class-specific TRA and TEA alongside the segmenter.

One iteration:

1. sample ``train_batch`` training patches and ``val_batch`` validation patches;
2. draw a TRA cascade per training patch from its class's logit tables and,
   in joint mode, one TEA op per validation patch;
3. take a virtual SGD step ``theta* = theta - lr * grad L_train``;
4. on cadence iterations, estimate each training sample's influence on the
   validation loss at ``theta*`` by central differences along
   ``grad L_val(theta*)``, normalise, and update the TRA logits; then update
   the TEA logits from reverted predictions on one validation image;
5. commit ``theta <- theta*``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor_net as tn
from .data import Dataset, PatchBatch, sample_patch_batch
from .errors import ConfigError, NumericError
from .metrics import MetricsReport
from .policy import (
    BG,
    ClassPolicy,
    SampleDraw,
    TeaPolicy,
    apply_policy_update,
    draw_weight,
    gumbel_softmax_draw,
    normalize_by_sampling_freq,
    normalize_grads_by_class,
    softmax_jacobian_row,
)
from .tea_infer import AggregationPlan, aggregate, build_plan, identity_plan, predict_proba
from .transforms import (
    TeaOp,
    TraSlot,
    apply_tea,
    apply_tea_pair,
    apply_tra,
    default_tea_registry,
    default_tra_registry,
    destructive_tea_ops,
    identity_instance,
    inject_destructive_tra,
    invert_tea,
    sample_tra_instance,
)

log = logging.getLogger(__name__)

MODES = ("none", "heuristic", "learned", "class-specific", "joint")
LEARNED_MODES = ("learned", "class-specific", "joint")
FD_SCALE = 0.01
LR_SCHEDULES = ("poly", "constant")
POLY_EXPONENT = 0.9


@dataclass
class RunConfig:
    mode: str = "joint"
    seed: int = 0
    net_lr: float = 0.02
    lr_schedule: str = "poly"  # "poly": net_lr * (1 - t/T)^0.9, or "constant"
    tra_lr: float = 2.0
    tea_lr: float = 2.0
    momentum: float = 0.9
    clip_norm: float | None = 5.0
    train_batch: int = 10
    val_batch: int = 10
    tea_draws: int = 8
    top_z: int = 4
    cadence: int | None = 10  # None: never update policies
    epochs: int = 12
    iters_per_epoch: int = 50
    patch_size: int = 48
    fg_fraction: float = 0.5
    train_loss: str = "ce"
    val_loss: str = "dice"
    tea_loss: str = "dice"
    channels: tuple = tn.DEFAULT_CHANNELS
    tra_init: str = "heuristic"
    tea_init: str = "heuristic"
    inject_bad_tra: bool = False
    inject_bad_tea: bool = False

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.validate()

    def validate(self) -> None:
        errors = []
        if self.mode not in MODES:
            errors.append(f"mode: must be one of {MODES}, got {self.mode!r}")
        for name in ("net_lr", "tra_lr", "tea_lr"):
            if not getattr(self, name) > 0:
                errors.append(f"{name}: must be positive")
        for name in ("train_batch", "val_batch", "epochs", "iters_per_epoch", "top_z", "patch_size"):
            if not getattr(self, name) >= 1:
                errors.append(f"{name}: must be >= 1")
        if self.tea_draws < 2:
            errors.append("tea_draws: must be >= 2")
        if self.cadence is not None and self.cadence < 1:
            errors.append("cadence: must be >= 1 (or null for never)")
        if not 0.0 <= self.fg_fraction <= 1.0:
            errors.append("fg_fraction: must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            errors.append("momentum: must lie in [0, 1)")
        for name in ("train_loss", "val_loss", "tea_loss"):
            if getattr(self, name) not in tn.LOSS_TERMS:
                errors.append(f"{name}: must be one of {sorted(tn.LOSS_TERMS)}")
        for name in ("tra_init", "tea_init"):
            if getattr(self, name) not in ("heuristic", "uniform"):
                errors.append(f"{name}: must be 'heuristic' or 'uniform'")
        if self.lr_schedule not in LR_SCHEDULES:
            errors.append(f"lr_schedule: must be one of {LR_SCHEDULES}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            errors.append("clip_norm: must be positive or null")
        if errors:
            raise ConfigError("; ".join(errors))

    @property
    def iterations(self) -> int:
        return self.epochs * self.iters_per_epoch

    def lr_at(self, iteration: int) -> float:
        """Segmenter learning rate for ``iteration``; also the virtual-step length."""
        if self.lr_schedule == "constant":
            return self.net_lr
        return self.net_lr * (1.0 - iteration / self.iterations) ** POLY_EXPONENT

    def is_cadence(self, iteration: int) -> bool:
        return self.cadence is not None and iteration % self.cadence == 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_json(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def build_registries(cfg: RunConfig) -> tuple[list[TraSlot], list[TeaOp]]:
    slots = default_tra_registry()
    if cfg.inject_bad_tra:
        slots = inject_destructive_tra(slots)
    ops = default_tea_registry()
    if cfg.inject_bad_tea:
        ops += destructive_tea_ops(len(ops))
    if cfg.top_z > len(ops):
        raise ConfigError(f"top_z: must be <= {len(ops)}")
    return slots, ops


# ----------------------------------------------------------------- state

RNG_STREAMS = ("data", "gumbel", "magnitude", "tea")


@dataclass
class MetaState:
    net: tn.SegNet
    tra: ClassPolicy
    tea: TeaPolicy
    iteration: int = 0
    velocity: list | None = None
    rngs: dict = field(default_factory=dict)
    tea_cursor: int = 0

    @classmethod
    def fresh(cls, cfg: RunConfig, slots: Sequence[TraSlot], ops: Sequence[TeaOp]) -> "MetaState":
        seqs = np.random.SeedSequence(cfg.seed).spawn(len(RNG_STREAMS) + 1)
        net_seed = int(seqs[-1].generate_state(1)[0])
        return cls(
            net=tn.SegNet.build(cfg.channels, seed=net_seed),
            tra=ClassPolicy.init(slots, cfg.tra_init, tied=cfg.mode == "learned"),
            tea=TeaPolicy.init(ops, cfg.tea_init),
            rngs={name: np.random.default_rng(s) for name, s in zip(RNG_STREAMS, seqs)},
        )


@dataclass
class TrainBatch:
    images: np.ndarray  # (n, 1, P, P) transformed
    labels: np.ndarray  # (n, P, P)
    classes: np.ndarray  # (n,)
    draws: list  # per sample: list of SampleDraw per slot, or None when augmentation is off
    weights: np.ndarray  # (n,) value of the cascaded Gumbel weight, always 1


@dataclass
class ValBatch:
    images: np.ndarray
    labels: np.ndarray
    tea_ops: list  # op id per sample (joint mode) or None


def draw_tra(policy: ClassPolicy, cls: int, rng: np.random.Generator) -> list[SampleDraw]:
    return [gumbel_softmax_draw(policy.table(cls, s), rng) for s in range(len(policy.slots))]


def assemble_train_batch(state: MetaState, cfg: RunConfig, patches: PatchBatch) -> TrainBatch:
    slots = state.tra.slots
    images, labels, draws = [], [], []
    weights = np.ones(len(patches.classes))
    for i, cls in enumerate(patches.classes):
        if cfg.mode == "none":
            inst, d = identity_instance(slots), None
        else:
            d = draw_tra(state.tra, int(cls), state.rngs["gumbel"])
            inst = sample_tra_instance(slots, [x.chosen for x in d], state.rngs["magnitude"])
            weights[i] = math.prod(draw_weight(x).value for x in d)
        img, lab = apply_tra(inst, patches.images[i], patches.labels[i])
        images.append(img)
        labels.append(lab)
        draws.append(d)
    batch = np.stack(images)[:, None].astype(np.float32)
    tn.check_finite("augmented training batch", batch)
    return TrainBatch(batch, np.stack(labels), patches.classes.copy(), draws, weights)


def assemble_val_batch(state: MetaState, cfg: RunConfig, patches: PatchBatch) -> ValBatch:
    if cfg.mode != "joint":
        return ValBatch(patches.images[:, None].astype(np.float32), patches.labels, None)
    images, labels, chosen = [], [], []
    for img, lab in zip(patches.images, patches.labels):
        k = gumbel_softmax_draw(state.tea.logits, state.rngs["tea"]).chosen
        t_img, t_lab = apply_tea_pair(state.tea.ops[k], img, lab)
        images.append(t_img)
        labels.append(t_lab)
        chosen.append(k)
    return ValBatch(np.stack(images)[:, None].astype(np.float32), np.stack(labels), chosen)


# ------------------------------------------------------------ one-step pieces

@dataclass
class VirtualStep:
    theta_star: tn.SegNet
    velocity: list
    effective_lr: float  # lr times the gradient-clipping scale
    loss: float


def virtual_step(state: MetaState, batch: TrainBatch, cfg: RunConfig) -> VirtualStep:
    """``theta* = theta - lr * v`` with ``v = momentum * v_prev + clip(grad L_train)``; theta is kept."""
    logits, trace = state.net.forward_trace(batch.images)
    loss, dlogits = tn.weighted_loss(cfg.train_loss, logits, batch.labels, batch.weights)
    grads = state.net.backward(trace, dlogits)
    tn.check_finite("training gradient", *grads)
    grads, scale = tn.clip_grads(grads, cfg.clip_norm)
    lr = cfg.lr_at(state.iteration)
    theta_star, velocity = tn.sgd_step(state.net, grads, lr, state.velocity, cfg.momentum)
    return VirtualStep(theta_star, velocity, lr * scale, loss)


def finite_difference_hypergrad(val_grad_norm: float, probe: Callable[[float], np.ndarray],
                                lr: float, n: int) -> tuple[np.ndarray | None, float]:
    """Per-sample ``d L_val(theta*) / d w_i`` from two probes at ``theta +/- eps * grad L_val``.

    ``probe(step)`` returns the per-sample training losses at ``theta + step * grad L_val(theta*)``.
    Returns ``(None, 0.0)`` when the validation gradient vanishes.
    """
    if not val_grad_norm > 0.0:
        return None, 0.0
    eps = FD_SCALE / val_grad_norm
    plus = np.asarray(probe(eps), dtype=np.float64)
    minus = np.asarray(probe(-eps), dtype=np.float64)
    return -lr * (plus - minus) / (2.0 * eps * n), eps


@dataclass
class Hypergrad:
    per_sample: np.ndarray | None
    eps: float
    val_loss: float


def hypergrad_tra(state: MetaState, step: VirtualStep, batch: TrainBatch, val: ValBatch, cfg: RunConfig) -> Hypergrad:
    logits, trace = step.theta_star.forward_trace(val.images)
    val_loss, dlogits = tn.weighted_loss(cfg.val_loss, logits, val.labels)
    gv = step.theta_star.backward(trace, dlogits)
    tn.check_finite("validation gradient", *gv)
    norm = tn.grad_l2_norm(gv)

    def probe(s: float) -> np.ndarray:
        probed = tn.perturb(state.net, gv, s)
        return tn.per_sample_loss(cfg.train_loss, probed.forward(batch.images), batch.labels)

    per_sample, eps = finite_difference_hypergrad(norm, probe, step.effective_lr, len(batch.classes))
    return Hypergrad(per_sample, eps, val_loss)


def tra_policy_step(tra: ClassPolicy, hypergrads: np.ndarray, classes: Sequence[int],
                    draws: Sequence[Sequence[SampleDraw]], lr: float) -> ClassPolicy:
    """Centre per class, divide by per-slot choice counts, descend each slot's logits."""
    groups = [BG] * len(classes) if tra.tied else [int(c) for c in classes]
    h = normalize_grads_by_class(hypergrads, groups)
    contributions = []
    for s in range(len(tra.slots)):
        chosen = [d[s].chosen for d in draws]
        h_hat = normalize_by_sampling_freq(h, chosen)
        contributions += [(h_hat[i], softmax_jacobian_row(draws[i][s]), tra.address(int(classes[i]), s))
                          for i in range(len(draws))]
    return tra.with_logits(apply_policy_update(tra.logits, contributions, lr))


def prob_loss(name: str, prob: np.ndarray, labels: np.ndarray) -> float:
    """Loss of a (c, H, W) probability map; soft Dice or CE."""
    c = prob.shape[0]
    y = (labels[None] == np.arange(c)[:, None, None]).astype(np.float64)
    p = prob.astype(np.float64)
    if name == "ce":
        return float(-(y * np.log(np.clip(p, 1e-12, None))).sum(axis=0).mean())
    inter = (p * y).sum(axis=(1, 2))
    dsc = (2 * inter + tn.DICE_SMOOTH) / (p.sum(axis=(1, 2)) + y.sum(axis=(1, 2)) + tn.DICE_SMOOTH)
    dice = float(1.0 - dsc.mean())
    if name == "dice":
        return dice
    return dice + prob_loss("ce", prob, labels)


@dataclass
class TeaUpdate:
    policy: TeaPolicy
    chosen: list
    losses: list


def tea_step(net: tn.SegNet, tea: TeaPolicy, image: np.ndarray, labels: np.ndarray, draws: int,
             lr: float, rng: np.random.Generator, loss: str = "dice") -> TeaUpdate:
    """Sample ``draws`` TEA ops, score reverted predictions, push logits toward low-loss ops."""
    if draws < 2:
        raise ConfigError("tea_draws must be >= 2")
    ds = [gumbel_softmax_draw(tea.logits, rng) for _ in range(draws)]
    losses = []
    cache: dict[int, float] = {}
    for d in ds:
        if d.chosen not in cache:
            op = tea.ops[d.chosen]
            pred = invert_tea(op, predict_proba(net, apply_tea(op, image)))
            cache[d.chosen] = prob_loss(loss, pred, labels)
        losses.append(cache[d.chosen])
    if not np.all(np.isfinite(losses)):
        raise NumericError("non-finite TEA validation loss")
    return TeaUpdate(tea_policy_update(tea, ds, losses, lr), [d.chosen for d in ds], losses)


def tea_policy_update(tea: TeaPolicy, draws: Sequence[SampleDraw], losses: Sequence[float], lr: float) -> TeaPolicy:
    """Descend the TEA logits: per-draw gradient ``loss / Z`` divided by how often its op was drawn."""
    g = np.asarray(losses, dtype=np.float64) / len(draws)
    h = normalize_by_sampling_freq(g, [d.chosen for d in draws])
    logits = apply_policy_update({"tea": tea.logits},
                                 [(h[k], softmax_jacobian_row(d), "tea") for k, d in enumerate(draws)], lr)
    return tea.with_logits(logits["tea"])


# ----------------------------------------------------------------- iteration

def joint_iteration(state: MetaState, cfg: RunConfig, train_set: Dataset, val_set: Dataset) -> tuple[MetaState, dict]:
    rng_data = state.rngs["data"]
    train_patches = sample_patch_batch(train_set, cfg.train_batch, cfg.fg_fraction, rng_data, cfg.patch_size)
    val_patches = sample_patch_batch(val_set, cfg.val_batch, cfg.fg_fraction, rng_data, cfg.patch_size)
    batch = assemble_train_batch(state, cfg, train_patches)
    step = virtual_step(state, batch, cfg)
    record: dict = {"iteration": state.iteration, "train_loss": step.loss, "net_lr": cfg.lr_at(state.iteration)}
    tra, tea = state.tra, state.tea
    if cfg.mode in LEARNED_MODES and cfg.is_cadence(state.iteration):
        val = assemble_val_batch(state, cfg, val_patches)
        hg = hypergrad_tra(state, step, batch, val, cfg)
        record.update(cadence=True, val_loss=hg.val_loss, eps=hg.eps)
        if hg.per_sample is None:
            record["skipped"] = "zero validation gradient"
        else:
            tra = tra_policy_step(tra, hg.per_sample, batch.classes, batch.draws, cfg.tra_lr)
            record["hypergrad_absmax"] = float(np.abs(hg.per_sample).max())
        if cfg.mode == "joint":
            k = state.tea_cursor % len(val_set)
            upd = tea_step(state.net, tea, val_set.images[k, 0], val_set.labels[k], cfg.tea_draws,
                           cfg.tea_lr, state.rngs["tea"], cfg.tea_loss)
            tea = upd.policy
            record.update(tea_sample=int(k), tea_chosen=upd.chosen, tea_losses=upd.losses)
            state.tea_cursor += 1
    if not np.isfinite(step.loss):
        raise NumericError(f"non-finite training loss at iteration {state.iteration}")
    state.net, state.velocity = step.theta_star, step.velocity
    state.tra, state.tea = tra, tea
    state.iteration += 1
    return state, record


# -------------------------------------------------------------------- driver

def heuristic_tea_plan(ops: Sequence[TeaOp], z: int) -> AggregationPlan:
    return build_plan(TeaPolicy.init(ops, "heuristic"), z)


def evaluate(net: tn.SegNet, dataset: Dataset, plan: AggregationPlan) -> MetricsReport:
    report = MetricsReport()
    for img, lab in zip(dataset.images, dataset.labels):
        _, pred = aggregate(net, img[0], plan)
        report.add(pred, lab, dataset.n_classes)
    return report


def eval_plans(cfg: RunConfig, state: MetaState) -> dict[str, AggregationPlan]:
    """TEA settings each arm is scored under: always none and heuristic; learned for joint."""
    ops = state.tea.ops
    plans = {"none": identity_plan(ops), "heuristic": heuristic_tea_plan(ops, cfg.top_z)}
    if cfg.mode == "joint":
        plans["learned"] = build_plan(state.tea, cfg.top_z)
    return plans


@dataclass
class TrainResult:
    state: MetaState
    history: list
    tra_snapshots: list
    tea_snapshots: list


def train(cfg: RunConfig, train_set: Dataset, val_set: Dataset, state: MetaState | None = None,
          on_record: Callable[[dict], None] | None = None, stop_at: int | None = None) -> TrainResult:
    """Run ``cfg.iterations`` joint iterations (resuming from ``state`` if given, pausing at ``stop_at``)."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("training and validation sets must be non-empty")
    slots, ops = build_registries(cfg)
    if state is None:
        state = MetaState.fresh(cfg, slots, ops)
    history, tra_snaps, tea_snaps = [], [], []
    stop = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    while state.iteration < stop:
        state, rec = joint_iteration(state, cfg, train_set, val_set)
        if rec.get("cadence") or state.iteration == cfg.iterations:
            rec["policy_ref"] = len(tra_snaps)
            tra_snaps.append(state.tra.to_json(state.iteration))
            tea_snaps.append(state.tea.to_json(state.iteration))
        history.append(rec)
        if on_record is not None:
            on_record(rec)
        if state.iteration % cfg.iters_per_epoch == 0:
            log.info("iter %d train_loss %.4f", state.iteration, rec["train_loss"])
    return TrainResult(state, history, tra_snaps, tea_snaps)


def refine_tea(net: tn.SegNet, tea: TeaPolicy, val_set: Dataset, iterations: int, draws: int, lr: float,
               seed: int, loss: str = "dice") -> tuple[TeaPolicy, list]:
    """Learn a TEA policy against a frozen segmenter, cycling through validation images."""
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))[RNG_STREAMS.index("tea")])
    history = []
    for t in range(iterations):
        k = t % len(val_set)
        upd = tea_step(net, tea, val_set.images[k, 0], val_set.labels[k], draws, lr, rng, loss)
        tea = upd.policy
        history.append({"iteration": t, "tea_sample": k, "tea_chosen": upd.chosen, "tea_losses": upd.losses,
                        "probs": tea.probs().tolist()})
    return tea, history


# ------------------------------------------------------------------ resuming

def save_state(state: MetaState, root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    tn.save_checkpoint(state.net, root / "net.ckpt")
    if state.velocity is not None:
        tn.save_checkpoint(state.net.with_params(state.velocity), root / "velocity.ckpt")
    meta = {
        "iteration": state.iteration,
        "tea_cursor": state.tea_cursor,
        "rngs": {k: g.bit_generator.state for k, g in state.rngs.items()},
        "tra": state.tra.to_json(state.iteration),
        "tea": state.tea.to_json(state.iteration),
    }
    (root / "state.json").write_text(json.dumps(meta))


def load_state(root: str | Path) -> MetaState:
    root = Path(root)
    meta = json.loads((root / "state.json").read_text())
    net = tn.load_checkpoint(root / "net.ckpt")
    velocity = tn.load_checkpoint(root / "velocity.ckpt").params if (root / "velocity.ckpt").exists() else None
    rngs = {}
    for k, st in meta["rngs"].items():
        g = np.random.default_rng()
        g.bit_generator.state = st
        rngs[k] = g
    return MetaState(net, ClassPolicy.from_json(meta["tra"]), TeaPolicy.from_json(meta["tea"]), meta["iteration"],
                     velocity, rngs, meta["tea_cursor"])
