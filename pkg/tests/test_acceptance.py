"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The end-to-end criteria (1, 2, 8) train real models and take tens of minutes
on one core; they are marked ``slow`` so ``-m "not slow"`` skips them.
"""

import contextlib
import json
import time

import numpy as np
import pytest
import sympy as sp
from scipy import stats

from jointaug import cli, meta
from jointaug import metrics as M
from jointaug import policy as P
from jointaug import tensor_net as tn
from jointaug import transforms as T
from jointaug.data import TaskSpec, gen_task
from jointaug.transforms import DESTRUCTIVE_KINDS

from .conftest import ACCEPTANCE_LINES
from .helpers import central_diff, rel_err
from .test_metrics import brute_hd95

SEEDS = range(5)


@contextlib.contextmanager
def criterion(number, title, budget=None):
    """Record PASS/FAIL for a criterion; the body stores a summary in ``info['detail']``."""
    info = {"detail": ""}
    start = time.perf_counter()
    try:
        yield info
        elapsed = time.perf_counter() - start
        if budget is not None:
            assert elapsed < budget, f"took {elapsed:.1f}s, budget {budget}s"
    except AssertionError as exc:
        elapsed = time.perf_counter() - start
        ACCEPTANCE_LINES[number] = f"criterion {number:2d} FAIL  {title} ({elapsed:.1f}s): {exc} {info['detail']}"
        print(ACCEPTANCE_LINES[number])
        raise
    ACCEPTANCE_LINES[number] = f"criterion {number:2d} PASS  {title} ({elapsed:.1f}s) {info['detail']}"
    print(ACCEPTANCE_LINES[number])


# ---------------------------------------------------------- 1: bad TRA ops

@pytest.mark.slow
def test_c01_destructive_tra_ops_suppressed():
    with criterion(1, "destructive TRA ops suppressed by class-specific training") as info:
        good, lines, slowest = 0, [], 0.0
        for seed in SEEDS:
            train, val, _ = gen_task(TaskSpec(), seed)
            cfg = meta.RunConfig(mode="class-specific", seed=seed, inject_bad_tra=True)
            slots, ops = meta.build_registries(cfg)
            init = meta.MetaState.fresh(cfg, slots, ops).tra
            t0 = time.perf_counter()
            final = meta.train(cfg, train, val).state.tra
            slowest = max(slowest, time.perf_counter() - t0)
            s = next(i for i, slot in enumerate(slots) if slot.name == T.DESTRUCTIVE_HOST_SLOT)
            k = len(slots[s].bins)
            bad = [j for j, b in enumerate(slots[s].bins) if b.kind in DESTRUCTIVE_KINDS]
            ok, ratios = True, []
            for cls in (P.BG, P.FG):
                p0, p = init.probs(cls, s)[bad], final.probs(cls, s)[bad]
                ok &= bool(np.all(p < p0) and np.all(p < 1.0 / k))
                ratios.append(",".join(f"{q:.2f}" for q in p / p0))
            good += ok
            lines.append(f"seed {seed} BG {ratios[0]} FG {ratios[1]}")
        info["detail"] = (f"[{good}/5 seeds; slowest run {slowest:.0f}s; final/initial prob of "
                          f"{','.join(DESTRUCTIVE_KINDS)}: {'; '.join(lines)}]")
        assert good >= 4, f"only {good}/5 seeds suppressed every bad op"
        assert slowest < 600, f"slowest run {slowest:.0f}s exceeds 10 min"


# ---------------------------------------------------------- 2: bad TEA ops

@pytest.mark.slow
def test_c02_destructive_tea_ops_suppressed(tmp_path):
    with criterion(2, "refine-tea suppresses destructive TEA ops, identity kept") as info:
        good, slowest, lines = 0, 0.0, []
        for seed in SEEDS:
            task = tmp_path / f"task{seed}"
            assert cli.main(["gen-task", "--seed", str(seed), "--out", str(task)]) == 0
            train, val, _ = gen_task(TaskSpec(), seed)
            net = meta.train(meta.RunConfig(mode="heuristic", seed=seed), train, val).state.net
            tn.save_checkpoint(net, tmp_path / f"net{seed}.ckpt")
            out = tmp_path / f"refine{seed}"
            t0 = time.perf_counter()
            assert cli.main(["refine-tea", "--task", str(task), "--checkpoint", str(tmp_path / f"net{seed}.ckpt"),
                             "--inject-bad-tea", "--init", "uniform", "--seed", str(seed), "--out", str(out), "--no-plots"]) == 0
            slowest = max(slowest, time.perf_counter() - t0)
            ops = json.loads((out / "tea_policy.json").read_text())["ops"]
            init = P.TeaPolicy.init(T.default_tea_registry() + T.destructive_tea_ops(len(T.default_tea_registry())), "uniform")
            p0 = init.probs()
            p = np.array([op["prob"] for op in ops])
            bad = [k for k, op in enumerate(ops) if op["name"].startswith("destructive")]
            ident = next(k for k, op in enumerate(ops) if op["name"] == "identity")
            ok = bool(np.all(p[bad] < p0[bad]) and p[ident] >= p0[ident])
            good += ok
            lines.append(f"seed {seed}: bad final/initial " + ",".join(f"{q:.2f}" for q in p[bad] / p0[bad])
                         + f", identity {p0[ident]:.4f}->{p[ident]:.4f}")
        info["detail"] = f"[{good}/5 seeds; slowest refine {slowest:.0f}s; {'; '.join(lines)}]"
        assert len(bad) == len(DESTRUCTIVE_KINDS)
        assert good >= 4, f"only {good}/5 seeds"
        assert slowest < 180, f"slowest refine {slowest:.0f}s exceeds 3 min"


# ------------------------------------------------------ 3: symbolic oracle

def _symbolic_instance(rng):
    """Linear one-parameter segmenter, two ops with quadratic losses; exact dL_val/dw via sympy."""
    th, lr = sp.Symbol("theta"), sp.Symbol("lr")
    w = sp.symbols("w0 w1")
    x, y = rng.uniform(0.5, 2.0, 2), rng.uniform(-1.0, 1.0, 2)
    xv, yv = rng.uniform(0.5, 2.0), rng.uniform(-1.0, 1.0)
    theta0, alpha = rng.uniform(-1, 1), rng.uniform(0.01, 0.3)
    l_train = sum(w[i] * (th * float(x[i]) - float(y[i])) ** 2 for i in range(2)) / 2
    l_val = ((th - lr * sp.diff(l_train, th)) * float(xv) - float(yv)) ** 2
    at = {th: theta0, lr: alpha, w[0]: 1, w[1]: 1}
    exact = np.array([float(sp.diff(l_val, w[i]).subs(at)) for i in range(2)])
    theta_star = theta0 - alpha * sum(x[i] * (theta0 * x[i] - y[i]) for i in range(2))
    grad_val = 2 * xv * (theta_star * xv - yv)

    def probe(step):
        t = theta0 + step * grad_val
        return (t * x - y) ** 2

    return exact, probe, grad_val, alpha


def test_c03_hypergradient_matches_symbolic_oracle():
    with criterion(3, "finite-difference hypergradient vs symbolic oracle", budget=10) as info:
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(50):
            exact, probe, grad_val, alpha = _symbolic_instance(rng)
            est, _ = meta.finite_difference_hypergrad(abs(grad_val), probe, alpha, 2)
            worst = max(worst, rel_err(est, exact))
        info["detail"] = f"[50 instances, worst rel err {worst:.2e}]"
        assert worst < 5e-2


# ------------------------------------------------- 4: analytic gradients

def test_c04_analytic_gradients_match_finite_differences():
    with criterion(4, "analytic gradients vs central differences", budget=30) as info:
        worst = {"ce": 0.0, "dice": 0.0, "conv": 0.0, "jacobian": 0.0}
        for seed in range(20):
            rng = np.random.default_rng(seed)
            logits = rng.normal(size=(2, 2, 4, 4))
            labels = rng.integers(0, 2, (2, 4, 4))
            weights = rng.uniform(0.5, 1.5, 2)
            for name in ("ce", "dice"):
                _, grad = tn.weighted_loss(name, logits, labels, weights)
                num = central_diff(lambda z, n=name: tn.weighted_loss(n, z, labels, weights)[0], logits)
                worst[name] = max(worst[name], rel_err(grad, num))

            net = tn.SegNet.build((1, 3, 2), seed=seed, dtype=np.float64)
            net = net.with_params([p + rng.normal(scale=0.1, size=p.shape) for p in net.params])
            x, y = rng.normal(size=(2, 1, 5, 6)), rng.integers(0, 2, (2, 5, 6))
            grads = tn.backward(net, x, tn.weighted_loss("ce+dice", net.forward(x), y)[1])
            for k, p in enumerate(net.params):
                def f(q, k=k):
                    params = list(net.params)
                    params[k] = q
                    return tn.weighted_loss("ce+dice", net.with_params(params).forward(x), y)[0]
                worst["conv"] = max(worst["conv"], rel_err(grads[k], central_diff(f, p)))

            z, g = rng.normal(size=6), rng.gumbel(size=6)
            d = P.gumbel_softmax_draw(z, gumbels=g)
            num = central_diff(lambda v: P.softmax(v + g)[d.chosen], z)
            worst["jacobian"] = max(worst["jacobian"], rel_err(P.softmax_jacobian_row(d), num))
        info["detail"] = "[20 seeds; worst " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + "]"
        assert max(worst.values()) < 1e-3


# ------------------------------------------------ 5: normalisation laws

def test_c05_normalisation_laws():
    with criterion(5, "class-wise centring and sampling-frequency division", budget=5) as info:
        rng = np.random.default_rng(5)
        for _ in range(1000):
            n = int(rng.integers(1, 21))
            g = rng.normal(scale=10 ** rng.uniform(-3, 3), size=n)
            cls = rng.integers(0, 2, n)
            h = P.normalize_grads_by_class(g, cls)
            for c in (0, 1):
                assert abs(h[cls == c].sum()) < 1e-6 * np.abs(g).max()
                if np.any(cls == c):
                    np.testing.assert_allclose(h[cls == c], g[cls == c] - g[cls == c].mean(), rtol=0, atol=1e-12 *
                                               np.abs(g).max())
            chosen = rng.integers(0, 4, n)
            counts = np.bincount(chosen, minlength=4)[chosen]
            assert np.array_equal(P.normalize_by_sampling_freq(h, chosen), h / counts)
        info["detail"] = "[1000 randomized batches]"


# ------------------------------------------------------- 6: Gumbel-max

def test_c06_gumbel_max_law():
    with criterion(6, "Gumbel-max frequencies match softmax", budget=10) as info:
        logits = np.array([0.8, -0.3, 1.5, 0.0, -1.2, 0.4])
        rng = np.random.default_rng(6)
        counts = np.bincount([P.gumbel_softmax_draw(logits, rng).chosen for _ in range(100_000)], minlength=6)
        p = P.softmax(logits)
        dev = np.abs(counts / counts.sum() - p).max()
        pvalue = stats.chisquare(counts, p * counts.sum()).pvalue
        info["detail"] = f"[1e5 draws, max dev {dev:.4f}, chi2 p={pvalue:.3f}]"
        assert dev < 0.01 and pvalue > 0.001


# -------------------------------------------------------- 7: round trips

def _bump(size):
    r, c = np.mgrid[0:size, 0:size]
    mid, sigma = (size - 1) / 2, size / 8
    return np.exp(-((r - mid) ** 2 + (c - mid) ** 2) / (2 * sigma ** 2))


def _only(slots, name, kind, magnitude, sign=1):
    n = len(slots)
    idx = [s.name for s in slots].index(name)
    kinds, mags, signs, bins = ["off"] * n, [0.0] * n, [1] * n, [0] * n
    kinds[idx], mags[idx], signs[idx], bins[idx] = kind, magnitude, sign, 1
    return T.TraInstance(tuple(bins), tuple(kinds), tuple(mags), tuple(signs))


def test_c07_transform_round_trips():
    with criterion(7, "transform involutions and TEA inverse round trips", budget=30) as info:
        rng = np.random.default_rng(7)
        img = rng.normal(size=(21, 21)).astype(np.float32)
        lab = (rng.random((21, 21)) > 0.7).astype(np.uint8)
        slots = T.default_tra_registry()
        for name in ("mirror_h", "mirror_v"):
            m = _only(slots, name, name, 0.0)
            a, b = T.apply_tra(m, *T.apply_tra(m, img, lab))
            assert np.array_equal(a, img) and np.array_equal(b, lab), name
        quarter = _only(slots, "rotation", "rotate", 90.0)
        a, b = img, lab
        for _ in range(4):
            a, b = T.apply_tra(quarter, a, b)
        assert np.array_equal(a, img) and np.array_equal(b, lab)
        for inverted in (False, True):
            assert np.array_equal(T.gamma_correct(img, 1.0, inverted=inverted), img)
        off = T.sample_tra_instance(slots, [0] * len(slots), rng)
        a, b = T.apply_tra(off, img, lab)
        assert np.array_equal(a, img) and np.array_equal(b, lab)

        fg = 0.05 + 0.9 * _bump(48)
        smooth = np.stack([1 - fg, fg])
        onehot = np.stack([lab == 0, lab == 1]).astype(np.float64)
        worst = 0.0
        for op in T.default_tea_registry():
            if op.inverse_kind != T.SPATIAL_INVERSE:
                assert np.array_equal(T.invert_tea(op, smooth), smooth), op.name
                continue
            worst = max(worst, float(np.abs(T.invert_tea(op, T.tea_geometry(op, smooth)) - smooth).max()))
            if op.kind.startswith("mirror") or (op.kind == "rotate" and op.magnitude in (90, 180)):
                assert np.array_equal(T.invert_tea(op, T.tea_geometry(op, onehot)), onehot), op.name
        info["detail"] = f"[worst smooth-map inverse error {worst:.4f}]"
        assert worst < 0.05


# ---------------------------------------------------------- 8: ordering

ARMS = ("none", "heuristic", "learned", "class-specific", "joint")


@pytest.mark.slow
def test_c08_arm_ordering():
    with criterion(8, "arm ordering on the default task over 5 seeds", budget=3600) as info:
        plain = {arm: [] for arm in ARMS}
        class_specific_heuristic_tea, joint_learned_tea = [], []
        for seed in SEEDS:
            train, val, test = gen_task(TaskSpec(), seed)
            for arm in ARMS:
                cfg = meta.RunConfig(mode=arm, seed=seed)
                state = meta.train(cfg, train, val).state
                plans = meta.eval_plans(cfg, state)
                plain[arm].append(meta.evaluate(state.net, test, plans["none"]).mean()["dsc"])
                if arm == "class-specific":
                    class_specific_heuristic_tea.append(meta.evaluate(state.net, test, plans["heuristic"])
                                                        .mean()["dsc"])
                if arm == "joint":
                    joint_learned_tea.append(meta.evaluate(state.net, test, plans["learned"]).mean()["dsc"])
        mean = {arm: float(np.mean(v)) for arm, v in plain.items()}
        cs_tea, joint = float(np.mean(class_specific_heuristic_tea)), float(np.mean(joint_learned_tea))
        info["detail"] = ("[mean DSC " + ", ".join(f"{a} {mean[a]:.4f}" for a in ARMS[:4])
                          + f"; class-specific+heuristic TEA {cs_tea:.4f}; joint {joint:.4f}]")
        assert mean["none"] < mean["heuristic"], "none < heuristic"
        assert mean["heuristic"] <= mean["learned"], "heuristic <= learned"
        assert mean["learned"] <= mean["class-specific"], "learned <= class-specific"
        assert joint >= cs_tea - 0.005, "joint >= class-specific + heuristic TEA - 0.005"


# --------------------------------------------------------------- 9: HD95

def test_c09_hd95_and_overlap_formulas():
    with criterion(9, "HD95 brute-force oracle and confusion formulas", budget=10) as info:
        rng = np.random.default_rng(9)
        checked = 0
        while checked < 200:
            size = int(rng.integers(4, 16))
            a = rng.random((size, size)) < rng.uniform(0.05, 0.6)
            b = rng.random((size, size)) < rng.uniform(0.05, 0.6)
            if not a.any() or not b.any():
                continue
            assert M.hd95(a, b) == brute_hd95(a, b)
            checked += 1
        for _ in range(100):
            pred, truth = rng.integers(0, 2, (9, 9)), rng.integers(0, 2, (9, 9))
            tp = int(np.sum((pred == 1) & (truth == 1)))
            fp = int(np.sum((pred == 1) & (truth == 0)))
            fn = int(np.sum((pred == 0) & (truth == 1)))
            assert M.confusion(pred, truth, 1) == (tp, fp, fn)
            if tp + fp and tp + fn:
                assert M.dsc(tp, fp, fn) == 2 * tp / (2 * tp + fp + fn)
                assert M.sen(tp, fp, fn) == tp / (tp + fn) and M.prc(tp, fp, fn) == tp / (tp + fp)
        info["detail"] = "[200 masks exact, 100 confusion checks]"


# -------------------------------------------------------- 10: determinism

def test_c10_joint_training_is_deterministic(tmp_path):
    with criterion(10, "two identical joint runs are bit-identical") as info:
        task = tmp_path / "task"
        assert cli.main(["gen-task", "--seed", "10", "--out", str(task)]) == 0
        args = ["train", "--task", str(task), "--mode", "joint", "--seed", "10", "--epochs", "2", "--no-plots"]
        assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
        assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
        names = ("policy_trajectory.jsonl", "net.ckpt", "metrics.csv", "tra_policy.json", "tea_policy.json")
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        info["detail"] = "[" + ", ".join(names) + "]"
