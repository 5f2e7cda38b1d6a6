"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest -v tests/test_acceptance.py``. The digit experiments train
two 784-256-256-10 networks for 35 epochs (a few minutes on one core).
"""

import json
import sys
import time

import numpy as np
import pytest

from gradcert import network as N
from gradcert.attack import AttackConfig
from gradcert.cli import main, run_demo_halfmoons, run_train
from gradcert.data import half_moons_split, load_idx, load_tabular
from gradcert.errors import DataFormatError
from gradcert.experiments import accuracy, attack_dataset, certify_dataset
from gradcert.intervals import (
    IntervalMatrix,
    explanation_bounds,
    interval_matmul,
    interval_matmul_exact_corners,
)
from gradcert.network import CrossEntropy
from gradcert.train import grad_cert_regularizer, probe_delta

from conftest import VERDICTS, random_mlp
from malformed import CASES


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'} | {detail}"
    VERDICTS.append(line)
    sys.__stdout__.write(f"\n{line}\n")
    sys.__stdout__.flush()
    assert ok, detail


# ---------------------------------------------------------------------------
# 1-2: interval products


def interval_cases(count=1000, seed=2024):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        m, k, n = (int(d) for d in rng.integers(1, 5, 3))
        ac, bc = rng.uniform(-2, 2, (m, k)), rng.uniform(-2, 2, (k, n))
        ar, br = rng.uniform(0, 1, (m, k)), rng.uniform(0, 1, (k, n))
        yield rng, IntervalMatrix(ac - ar, ac + ar), IntervalMatrix(bc - br, bc + br)


def sample_operands(rng, iv, count):
    lo, hi = iv.lower.data, iv.upper.data
    u = rng.uniform(0, 1, (count,) + lo.shape)
    u[: count // 4] = np.round(u[: count // 4])  # a quarter of the samples sit on vertices
    return lo + (hi - lo) * u


@pytest.fixture(scope="module")
def product_samples():
    out, t0 = [], time.perf_counter()
    for rng, a, b in interval_cases():
        prods = sample_operands(rng, a, 10_000) @ sample_operands(rng, b, 10_000)
        out.append((a, b, interval_matmul(a, b), prods))
    return out, time.perf_counter() - t0


def test_criterion_01_closed_form_soundness(product_samples):
    cases, elapsed = product_samples
    violations = sum(int(np.sum(~box.contains(prods, 1e-9))) for _, _, box, prods in cases)
    ok = violations == 0 and elapsed < 60
    verdict(1, ok, f"{len(cases)} cases x 10000 samples, {violations} violations, {elapsed:.1f}s (limit 60s)")


def test_criterion_02_corner_containment(product_samples):
    cases, _ = product_samples
    outer = inner = 0
    for a, b, box, prods in cases:
        exact = interval_matmul_exact_corners(a, b)
        outer += int(np.sum(exact.lower.data < box.lower.data - 1e-9) + np.sum(exact.upper.data > box.upper.data + 1e-9))
        inner += int(np.sum(~exact.contains(prods, 1e-9)))
    verdict(2, outer + inner == 0, f"closed form inside corners: {outer} violations; samples outside corners: {inner}")


# ---------------------------------------------------------------------------
# 3-6: gradient boxes

REGIONS = [(e, g) for e in (0.0, 0.01, 0.1) for g in (0.0, 0.01, 0.1)]


def make_networks(count=50, seed=77):
    rng = np.random.default_rng(seed)
    nets = []
    for i in range(count):
        act = "relu" if i % 2 == 0 else "softplus"
        nets.append(random_mlp(rng, depth=1 + i % 3, width=int(rng.integers(2, 33)), activation=act))
    return rng, nets


def mc_gradients(net, x, eps, gamma, loss, rng, k):
    lo, hi = np.clip(x - eps, 0, 1), np.clip(x + eps, 0, 1)
    u = rng.uniform(0, 1, (k, x.size))
    u[: k // 4] = np.round(u[: k // 4])
    xs = lo + (hi - lo) * u
    if gamma == 0:
        return N.input_gradient(net, xs, loss)
    params = [p.data for p in net.parameters()]
    out = np.empty((k, x.size))
    for s in range(k):
        pp = [p + gamma * np.abs(p) * rng.uniform(-1, 1, p.shape) for p in params]
        out[s] = N.input_gradient(net.with_parameters(pp), xs[s : s + 1], loss)[0]
    return out


def test_criterion_03_gradient_box_soundness():
    t0 = time.perf_counter()
    rng, nets = make_networks()
    violations = checks = 0
    for net in nets:
        x = rng.uniform(0, 1, net.input_size)
        loss = CrossEntropy(int(rng.integers(net.class_count)))
        for eps, gamma in REGIONS:
            box = explanation_bounds(net, x, eps, gamma, loss, (0.0, 1.0))
            vs = mc_gradients(net, x, eps, gamma, loss, rng, 1000)
            violations += int(np.sum(~box.contains(vs, 1e-9)))
            checks += vs.size
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and elapsed < 600
    verdict(3, ok, f"50 networks x 9 regions x 1000 samples ({checks} coordinates), {violations} violations, {elapsed:.0f}s (limit 600s)")


def test_criterion_04_singleton_exactness():
    rng, nets = make_networks()
    worst_width = worst_center = 0.0
    for net in nets:
        x = rng.uniform(0, 1, (8, net.input_size))
        loss = CrossEntropy(rng.integers(net.class_count, size=8))
        box = explanation_bounds(net, x, 0.0, 0.0, loss)
        worst_width = max(worst_width, float(np.max(box.delta)))
        worst_center = max(worst_center, float(np.max(np.abs(box.center - N.input_gradient(net, x, loss)))))
    ok = worst_width <= 1e-9 and worst_center <= 1e-9
    verdict(4, ok, f"max width {worst_width:.1e}, max center error {worst_center:.1e} (limit 1e-9)")


def test_criterion_05_inclusion_monotonicity():
    rng = np.random.default_rng(5)
    violations = 0
    for i in range(100):
        net = random_mlp(rng, activation=("relu", "softplus", "tanh", "sigmoid")[i % 4])
        x = rng.uniform(0, 1, net.input_size)
        e1, g1 = rng.uniform(0, 0.05), rng.uniform(0, 0.05)
        e2, g2 = e1 + rng.uniform(0, 0.05), g1 + rng.uniform(0, 0.05)
        loss = CrossEntropy(int(rng.integers(net.class_count)))
        inner = explanation_bounds(net, x, e1, g1, loss, (0.0, 1.0))
        outer = explanation_bounds(net, x, e2, g2, loss, (0.0, 1.0))
        violations += int(np.sum(outer.v_lower > inner.v_lower + 1e-12) + np.sum(outer.v_upper < inner.v_upper - 1e-12))
    verdict(5, violations == 0, f"100 nested region pairs, {violations} violations")


def test_criterion_06_gradient_checks():
    rng = np.random.default_rng(6)
    worst_input = 0.0
    for _ in range(10):
        net = random_mlp(rng, depth=3, width=16, activation="softplus")
        x = rng.uniform(0, 1, net.input_size)
        loss = CrossEntropy(int(rng.integers(net.class_count)))
        g = N.input_gradient(net, x, loss)
        fd = np.empty_like(x)
        for i in range(x.size):
            up, dn = x.copy(), x.copy()
            up[i] += 1e-5
            dn[i] -= 1e-5
            fd[i] = (N.loss_value(loss, N.forward(net, up[None])[0]) - N.loss_value(loss, N.forward(net, dn[None])[0]))[0] / 2e-5
        worst_input = max(worst_input, float(np.max(np.abs(g - fd)) / np.max(np.abs(fd))))

    worst_param, checked, skipped, h = 0.0, 0, 0, 1e-6
    for _ in range(4):
        net = random_mlp(rng, n_in=3, depth=3, width=6, activation="softplus")
        x = rng.uniform(0.2, 0.8, (3, 3))
        loss = CrossEntropy(rng.integers(net.class_count, size=3))
        params = [p.data for p in net.parameters()]

        def width(ps):
            return grad_cert_regularizer(net.with_parameters(ps), x, 0.05, 0.02, loss, (0.0, 1.0)).item()

        from gradcert import tensor as T
        from gradcert.tensor import Tensor

        with T.DiffGraph() as graph:
            leaves = [graph.watch(Tensor(p)) for p in params]
            d = grad_cert_regularizer(net.with_parameters(leaves), x, 0.05, 0.02, loss, (0.0, 1.0))
        grads = [a.data for a in graph.gradient(d, leaves)]
        base = width(params)
        for i, p in enumerate(params):
            for j in np.ndindex(p.shape):
                up, dn = [q.copy() for q in params], [q.copy() for q in params]
                up[i][j] += h
                dn[i][j] -= h
                fu, fb = (width(up) - base) / h, (base - width(dn)) / h
                if abs(fu - fb) > 1e-4 * max(abs(fu), abs(fb), 1.0):
                    skipped += 1  # a min/max switch sits within h: not differentiable here
                    continue
                fd = 0.5 * (fu + fb)
                worst_param = max(worst_param, abs(grads[i][j] - fd) / max(abs(fd), 1e-2))
                checked += 1
    ok = worst_input < 1e-5 and worst_param < 1e-3
    verdict(
        6,
        ok,
        f"input gradient rel err {worst_input:.1e} (limit 1e-5); width gradient rel err {worst_param:.1e} "
        f"(limit 1e-3) over {checked} parameters, {skipped} near kinks skipped",
    )


# ---------------------------------------------------------------------------
# 7: two moons


@pytest.fixture(scope="module")
def moons(tmp_path_factory):
    out = tmp_path_factory.mktemp("moons")
    t0 = time.perf_counter()
    doc = run_demo_halfmoons({}, out, None)
    return out, doc, time.perf_counter() - t0


def test_criterion_07_halfmoons_linearisation(moons):
    _, doc, elapsed = moons
    sweep = doc["results"]["sweep"]
    disp = [r["dispersion"] for r in sweep]
    acc = {r["eps_t"]: r["test_accuracy"] for r in sweep}
    monotone = all(b <= a for a, b in zip(disp, disp[1:]))
    acc_ok = all(a >= 0.85 for e, a in acc.items() if e <= 0.1)
    ok = monotone and acc_ok and elapsed < 300
    verdict(
        7,
        ok,
        "dispersion " + ", ".join(f"{d:.3f}" for d in disp)
        + "; accuracy " + ", ".join(f"{e:g}:{a:.3f}" for e, a in acc.items())
        + f"; {elapsed:.0f}s (limit 300s)",
    )


# ---------------------------------------------------------------------------
# 8, 9, 11: digit models

DIGITS = {"kind": "synthetic-digits", "n_train": 10000, "n_test": 1000, "seed": 0}


def digit_config(regularizer):
    return {
        "dataset": DIGITS,
        "architecture": "fcn-2x256",
        "hidden_bias": 0.5,
        "train": {"regularizer": regularizer, "epochs": 35, "batch_size": 64, "explain": "true-logit", "probe_eps": 0.01},
    }


@pytest.fixture(scope="module")
def digit_models(tmp_path_factory):
    root = tmp_path_factory.mktemp("digits")
    t0 = time.perf_counter()
    out = {}
    for name, reg in (("gradcert", {"kind": "gradcert", "alpha": 0.5, "eps": 0.025, "gamma": 0.0}), ("standard", {"kind": "none"})):
        run_train(digit_config(reg), root, root / name, None)
        out[name] = N.load(root / name / "model.json")
    from gradcert.cli import load_datasets

    _, test = load_datasets(DIGITS)
    return out, test, time.perf_counter() - t0


def test_criterion_08_delta_gap(digit_models):
    nets, test, elapsed = digit_models
    dom = test.feature_bounds
    d = {k: probe_delta(v, test.inputs, 0.01, 0.0, dom, test.labels, explain="true-logit") for k, v in nets.items()}
    ratio = d["standard"] / d["gradcert"]
    ok = ratio >= 10 and elapsed < 7200
    verdict(8, ok, f"mean probe width standard {d['standard']:.4g} vs gradcert {d['gradcert']:.4g}, ratio {ratio:.3g} (need >= 10); training {elapsed:.0f}s")


def test_criterion_09_certified_vs_standard(digit_models):
    nets, test, _ = digit_models
    acc = {k: accuracy(v, test) for k, v in nets.items()}
    unt = {k: certify_dataset(v, test, 0.01, 0.0, "untargeted", 1.0, explain="true-logit").rate for k, v in nets.items()}
    pred = {k: certify_dataset(v, test, 0.01, 0.0, "prediction").rate for k, v in nets.items()}
    ok = (
        unt["gradcert"] > unt["standard"]
        and pred["gradcert"] > 0
        and pred["standard"] <= 0.01
        and acc["standard"] - acc["gradcert"] <= 0.10
    )
    verdict(
        9,
        ok,
        f"untargeted certified {unt['gradcert']:.3f} vs {unt['standard']:.3f}; prediction certified "
        f"{pred['gradcert']:.3f} vs {pred['standard']:.3f}; accuracy {acc['gradcert']:.3f} vs {acc['standard']:.3f}",
    )


def test_criterion_11_targeted_corner_masks(digit_models):
    nets, test, _ = digit_models
    rates = [certify_dataset(nets["gradcert"], test, e, 0.0, "targeted", 0.04, explain="true-logit", limit=300).rate for e in (0.005, 0.01, 0.025)]
    ok = rates[1] > 0 and rates[0] >= rates[1] >= rates[2]
    verdict(11, ok, "20 corner targets, tau 0.04, rate at eps 0.005/0.01/0.025: " + ", ".join(f"{r:.3f}" for r in rates))


# ---------------------------------------------------------------------------
# 10: certificate/attack sandwich


def test_criterion_10_certificate_attack_sandwich(digit_models, moons):
    nets, test, _ = digit_models
    moon_dir, moon_doc, _ = moons
    _, moon_test = half_moons_split(400, 400, 0.1, seed=0)
    runs = []

    def run(label, net, ds, cfg, eps, gamma, tau, targets, explain, limit):
        s = attack_dataset(net, ds, cfg, eps, gamma, tau, targets, explain, limit)
        cert = float(np.mean([r[5] for r in s.rows]))
        runs.append((label, cert, s.robustness, s.violations))

    for name in ("gradcert", "standard"):
        net = nets[name]
        run(f"{name} untargeted-input", net, test, AttackConfig("untargeted-input", steps=20), 0.01, 0.0, 1.0, None, "true-logit", 10)
        run(f"{name} targeted-input", net, test, AttackConfig("targeted-input", steps=10), 0.025, 0.0, 0.04, None, "true-logit", 2)
        run(f"{name} untargeted-model", net, test, AttackConfig("untargeted-model", steps=10, estimator="double"), 0.0, 0.01, 1.0, None, "true-logit", 3)
    for eps in (0.0, 0.2):
        net = N.load(moon_dir / f"model_eps{eps:g}.json")
        run(f"moons eps_t={eps:g} untargeted-input", net, moon_test, AttackConfig("untargeted-input", steps=30), 0.05, 0.0, 1.0, None, "true-logit", 60)
        run(f"moons eps_t={eps:g} targeted-model", net, moon_test, AttackConfig("targeted-model", steps=10), 0.0, 0.05, 0.5, np.array([[1.0, -1.0]]), "true-logit", 20)
    violations = sum(v for *_, v in runs)
    order_ok = all(c <= r + 1e-12 for _, c, r, _ in runs)
    detail = "; ".join(f"{label}: certified {c:.2f} <= robust {r:.2f}" for label, c, r, _ in runs)
    verdict(10, violations == 0 and order_ok, f"{violations} certified instances broken | {detail}")


# ---------------------------------------------------------------------------
# 12: determinism and loaders


def test_criterion_12_determinism_and_round_trips(tmp_path):
    rng = np.random.default_rng(12)
    exact = True
    for _ in range(5):
        net = random_mlp(rng)
        N.save(net, tmp_path / "m.json")
        back = N.load(tmp_path / "m.json")
        exact &= all(np.array_equal(a.data, b.data) for a, b in zip(net.parameters(), back.parameters()))

    cfg = json.dumps({"dataset": {"kind": "halfmoons", "n_train": 100, "n_test": 100}, "architecture": "halfmoons",
                      "train": {"regularizer": {"kind": "gradcert", "alpha": 1.0, "eps": 0.05}, "epochs": 3, "batch_size": 16}})
    same = True
    for run_dir in ("a", "b"):
        assert main(["--out", str(tmp_path / run_dir), "train", "--config", cfg]) == 0
        assert main(["--out", str(tmp_path / run_dir / "cert"), "certify", "--model", str(tmp_path / "a" / "model.json"),
                     "--data", json.dumps({"kind": "halfmoons"}), "--eps", "0.05"]) == 0
    for name in ("model.json", "train_report.json", "train_report.csv", "cert/certify_report.json", "cert/certify_rows.csv"):
        same &= (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    rejected = []
    for name, kind, build, where, fragment in CASES:
        case_dir = tmp_path / name
        case_dir.mkdir()
        paths = build(case_dir)
        try:
            load_idx(*paths) if kind == "idx" else load_tabular(*paths)
        except DataFormatError as err:
            if fragment in str(err) and all(getattr(err, a) == v for a, v in where.items()):
                rejected.append(name)
    ok = exact and same and len(rejected) == len(CASES) == 10
    verdict(12, ok, f"save/load exact: {exact}; identical reports: {same}; malformed files rejected with correct diagnostics: {len(rejected)}/10")
