"""Command-line interface.

Subcommands: ``train``, ``certify``, ``attack``, ``evaluate``,
``demo-halfmoons``. Exit status is 0 on success, 1 on a runtime failure and
2 on a configuration or usage error. Every output file is written to a
temporary sibling and renamed into place, and nothing is written before all
inputs have loaded.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig
from .data import (
    Dataset,
    digits_dataset,
    half_moons_split,
    label_poison,
    load_idx,
    load_tabular,
    synthetic_biased_tabular,
    synthetic_digits,
    train_test_split,
)
from .errors import ContractError, DataFormatError, GradCertError
from .experiments import (
    SCALING_NOTE,
    accuracy,
    attack_dataset,
    certify_dataset,
    gradient_dispersion,
    mean_bias_score,
)
from .network import Network, dumps, forward, load, preset
from .train import GradCert, TrainConfig, fit
from .util import atomic_write_json, atomic_write_text, csv_text, limit_threads

REPORT_FORMAT = "gradcert-report"
REPORT_VERSION = 1
MNIST_DIR_ENV = "GRADCERT_MNIST_DIR"
MODEL_FD_LIMIT = 5000  # model attacks above this parameter count use the double-backward estimator


class ConfigError(GradCertError, ValueError):
    pass


# ---------------------------------------------------------------------------
# config and data


def _read_json(path_or_text, what: str):
    text = str(path_or_text)
    if text.lstrip().startswith("{"):
        try:
            return json.loads(text), Path.cwd()
        except json.JSONDecodeError as exc:
            raise ConfigError(f"inline {what} is not valid JSON: {exc.msg}") from None
    path = Path(text)
    if not path.is_file():
        raise ConfigError(f"{what} file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8")), path.parent
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} file {path} is not valid JSON: {exc.msg} (offset {exc.pos})") from None


def _path(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def load_datasets(spec: dict, base: Path = Path(".")) -> tuple[Dataset, Dataset]:
    """Resolve a dataset spec to ``(train, test)``.

    Kinds: ``halfmoons``, ``idx``, ``mnist-dir``, ``synthetic-digits``,
    ``tabular`` and ``synthetic-tabular``.
    """
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("dataset spec must be an object with a 'kind'")
    kind = spec["kind"]
    seed = int(spec.get("seed", 0))
    if kind == "halfmoons":
        noise = float(spec.get("noise", 0.1))
        return half_moons_split(int(spec.get("n_train", 400)), int(spec.get("n_test", 400)), noise, seed)
    if kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if key not in spec:
                raise ConfigError(f"idx dataset spec needs '{key}'")
        return (
            load_idx(_path(base, spec["train_images"]), _path(base, spec["train_labels"]), name="train"),
            load_idx(_path(base, spec["test_images"]), _path(base, spec["test_labels"]), name="test"),
        )
    if kind == "mnist-dir":
        d = Path(spec.get("dir") or os.environ.get(MNIST_DIR_ENV, ""))
        if not str(d) or not d.is_dir():
            raise ConfigError(f"mnist-dir needs 'dir' or ${MNIST_DIR_ENV} pointing at the IDX files")
        train = load_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte", name="mnist-train")
        test = load_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte", name="mnist-test")
        n_tr, n_te = spec.get("n_train"), spec.get("n_test")
        return (train if n_tr is None else train.subset(np.arange(int(n_tr))), test if n_te is None else test.subset(np.arange(int(n_te))))
    if kind == "synthetic-digits":
        (xtr, ytr), (xte, yte) = synthetic_digits(int(spec.get("n_train", 10000)), int(spec.get("n_test", 1000)), seed)
        return digits_dataset(xtr, ytr, "digits-train"), digits_dataset(xte, yte, "digits-test")
    if kind == "tabular":
        for key in ("csv", "schema"):
            if key not in spec:
                raise ConfigError(f"tabular dataset spec needs '{key}'")
        ds = load_tabular(_path(base, spec["csv"]), _path(base, spec["schema"]))
        return train_test_split(ds, float(spec.get("split", 0.8)), seed)
    if kind == "synthetic-tabular":
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            synthetic_biased_tabular(int(spec.get("n", 2000)), seed, tmp)
            ds = load_tabular(Path(tmp) / "credit.csv", Path(tmp) / "credit.schema.json")
        return train_test_split(ds, float(spec.get("split", 0.8)), seed)
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _gradcert(alpha: float, eps: float, gamma: float = 0.0) -> dict:
    return {"kind": "gradcert", "alpha": alpha, "eps": eps, "gamma": gamma}


# Named model + training recipes; a config picks one with "preset" and may override any key.
TRAIN_PRESETS = {
    "mnist-fcn-standard": {
        "architecture": "fcn-2x256", "hidden_bias": 0.5,
        "train": {"epochs": 35, "batch_size": 64, "explain": "true-logit"},
    },
    "mnist-fcn-gradcert": {
        "architecture": "fcn-2x256", "hidden_bias": 0.5,
        "train": {"regularizer": _gradcert(0.5, 0.025), "epochs": 35, "batch_size": 64, "explain": "true-logit"},
    },
    "mnist-fcn128-gradcert": {
        "architecture": "fcn-2x128", "hidden_bias": 0.5,
        "train": {"regularizer": _gradcert(0.5, 0.025), "epochs": 35, "batch_size": 64, "explain": "true-logit"},
    },
    "tabular-standard": {
        "architecture": "fcn-2x256", "hidden_bias": 0.5,
        "train": {"epochs": 100, "batch_size": 32, "explain": "true-logit"},
    },
    "tabular-gradcert": {
        "architecture": "fcn-2x256", "hidden_bias": 0.5,
        "train": {"regularizer": _gradcert(1.0, 0.01), "epochs": 100, "batch_size": 32, "explain": "true-logit"},
    },
    "tabular-l2": {
        "architecture": "fcn-2x256", "hidden_bias": 0.5,
        "train": {"regularizer": {"kind": "l2noise", "alpha": 1.0, "eps": 0.01}, "epochs": 100, "batch_size": 32},
    },
}


def apply_preset(cfg: dict) -> dict:
    """Merge the named preset under ``cfg``; explicit keys win, ``train`` merges key by key."""
    name = cfg.get("preset")
    if name is None:
        return cfg
    if name not in TRAIN_PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose one of {sorted(TRAIN_PRESETS)}")
    base = TRAIN_PRESETS[name]
    merged = {**base, **cfg}
    merged["train"] = {**base.get("train", {}), **cfg.get("train", {})}
    return merged


def build_model(cfg: dict, train: Dataset, seed: int) -> Network:
    return preset(
        cfg.get("architecture", "fcn-2x256"),
        train.input_shape,
        train.class_count,
        seed=seed,
        activation=cfg.get("activation", "relu"),
        hidden_bias=float(cfg.get("hidden_bias", 0.0)),
    )


def _header(command: str, seed: int, config: dict) -> dict:
    return {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "scaling": SCALING_NOTE,
        "config": config,
    }


def report_schema() -> dict:
    from importlib import resources

    return json.loads(resources.files("gradcert").joinpath("schemas/report.schema.json").read_text(encoding="utf-8"))


def _write_csv(path: Path, columns, rows) -> None:
    atomic_write_text(path, csv_text(list(columns), rows))


# ---------------------------------------------------------------------------
# commands


def run_train(cfg: dict, base: Path, out: Path, seed: int | None) -> dict:
    cfg = apply_preset(cfg)
    seed = int(cfg.get("seed", 0)) if seed is None else seed
    train, test = load_datasets(cfg.get("dataset", {}), base)
    tcfg = replace(TrainConfig.from_dict(cfg.get("train", {})), seed=seed)
    net = build_model(cfg, train, seed)
    net, rep = fit(net, train, tcfg, test=test, probe=test.inputs[:100])
    doc = _header("train", seed, {**cfg, "train": tcfg.to_dict()})
    doc["results"] = {"report": rep.to_dict(), "final_test_accuracy": rep.test_accuracy[-1] if rep.epoch else None}
    atomic_write_text(out / "model.json", dumps(net))
    _write_csv(out / "train_report.csv", rep.COLUMNS, rep.rows())
    atomic_write_json(out / "train_report.json", doc)
    return doc


def _args_config(args) -> dict:
    """Flags that affect results; output location and thread count do not."""
    return {k: v for k, v in vars(args).items() if k not in ("out", "threads")}


def _cert_args(args) -> dict:
    return {
        "explain": args.explain,
        "matmul": args.matmul,
        "limit": args.limit,
    }


def run_certify(args, out: Path) -> dict:
    net = load(args.model)
    spec, base = _read_json(args.data, "dataset spec")
    train, test = load_datasets(spec, base)
    ds = test if args.part == "test" else train
    targets = {"kind": "corners", "k": args.mask_size, "insets": args.mask_insets} if args.mode == "targeted" else None
    res = certify_dataset(
        net, ds, args.eps, args.gamma, args.mode, args.tau, targets, sensitive=args.sensitive, k=args.k,
        norm_ratio_tau=args.norm_ratio_tau, **_cert_args(args)
    )
    doc = _header("certify", args.seed, _args_config(args))
    doc["results"] = {"mode": res.mode, "certified_rate": res.rate, "count": len(res.rows), **res.extra}
    _write_csv(out / "certify_rows.csv", res.columns, res.rows)
    atomic_write_json(out / "certify_report.json", doc)
    return doc


def _attack_config(args, net: Network) -> AttackConfig:
    estimator = args.estimator
    if estimator == "auto":
        estimator = "double" if args.mode.endswith("model") and net.parameter_count() > MODEL_FD_LIMIT else "fd"
    return AttackConfig(args.mode, args.steps, None, args.restarts, estimator, args.h_fd, args.seed)


def run_attack(args, out: Path) -> dict:
    net = load(args.model)
    spec, base = _read_json(args.data, "dataset spec")
    train, test = load_datasets(spec, base)
    ds = test if args.part == "test" else train
    cfg = _attack_config(args, net)
    targets = {"kind": "corners", "k": args.mask_size, "insets": args.mask_insets} if cfg.targeted else None
    summ = attack_dataset(net, ds, cfg, args.eps, args.gamma, args.tau, targets, args.explain, args.limit, args.matmul)
    doc = _header("attack", args.seed, {**_args_config(args), "estimator": cfg.estimator})
    doc["results"] = {
        "mode": cfg.mode,
        "attack_robustness": summ.robustness,
        "count": len(summ.rows),
        "certificate_violations": summ.violations,
    }
    _write_csv(out / "attack_rows.csv", summ.columns, summ.rows)
    atomic_write_json(out / "attack_report.json", doc)
    if summ.violations:
        raise RuntimeError(f"{summ.violations} certified instances were broken by the attack")
    return doc


def run_evaluate(cfg: dict, base: Path, out: Path, seed: int | None) -> dict:
    seed = int(cfg.get("seed", 0)) if seed is None else seed
    grid = cfg.get("grid") or {}
    sweep = cfg.get("bias_sweep")
    if "model" not in cfg and not sweep:
        raise ConfigError("evaluate config needs a 'model' path (optional only for a bare bias sweep)")
    if grid and "model" not in cfg:
        raise ConfigError("an evaluation grid needs a 'model' path")
    net = load(_path(base, cfg["model"])) if "model" in cfg else None
    train, test = load_datasets(cfg.get("dataset", {}), base)
    explain = cfg.get("explain", "cross-entropy")
    limit = grid.get("limit")
    results: dict = {}
    panels: dict = {}
    if net is not None:
        results["accuracy"] = accuracy(net, test)
        panels["accuracy"] = (("split", "accuracy"), [["test", results["accuracy"]]])
    if grid:
        eps_list = [float(e) for e in grid.get("eps", [0.0])]
        gamma_list = [float(g) for g in grid.get("gamma", [0.0])]
        modes = grid.get("modes", ["untargeted", "targeted", "prediction"])
        tau_u, tau_t = float(grid.get("tau_untargeted", 1.0)), float(grid.get("tau_targeted", 0.04))
        nr_tau = float(grid.get("norm_ratio_tau", 2.0))
        targets = grid.get("targets", {"kind": "corners", "k": 5, "insets": 5})
        matmul = grid.get("matmul", "center-radius")
        cert_rows = []
        for mode in modes:
            for eps in eps_list:
                for gamma in gamma_list:
                    tau = tau_t if mode == "targeted" else tau_u
                    r = certify_dataset(
                        net, test, eps, gamma, mode, tau, targets if mode == "targeted" else None, explain, matmul, limit,
                        norm_ratio_tau=nr_tau, sensitive=grid.get("sensitive"), k=int(grid.get("k", 5)),
                    )
                    cert_rows.append([mode, eps, gamma, tau, r.rate, r.extra.get("norm_ratio_rate", "")])
        results["certified"] = [dict(zip(("mode", "eps", "gamma", "tau", "rate", "norm_ratio_rate"), r)) for r in cert_rows]
        panels["certified"] = (("mode", "eps", "gamma", "tau", "rate", "norm_ratio_rate"), cert_rows)
        acfg = grid.get("attack")
        if acfg:
            att_rows = []
            alimit = acfg.get("limit", limit)
            for mode in acfg.get("modes", ["untargeted-input"]):
                for eps in eps_list if mode.endswith("input") else [0.0]:
                    for gamma in gamma_list if mode.endswith("model") else [0.0]:
                        est = acfg.get("estimator", "auto")
                        if est == "auto":
                            est = "double" if mode.endswith("model") and net.parameter_count() > MODEL_FD_LIMIT else "fd"
                        ac = AttackConfig(mode, int(acfg.get("steps", 100)), None, int(acfg.get("restarts", 1)), est, float(acfg.get("h_fd", 1e-4)), seed)
                        tau = tau_t if ac.targeted else tau_u
                        s = attack_dataset(net, test, ac, eps, gamma, tau, targets if ac.targeted else None, explain, alimit, matmul)
                        cert_rate = float(np.mean([r[5] for r in s.rows])) if s.rows else float("nan")
                        att_rows.append([mode, eps, gamma, tau, s.robustness, cert_rate, s.violations])
            results["attack"] = [
                dict(zip(("mode", "eps", "gamma", "tau", "attack_robustness", "certified_rate", "violations"), r)) for r in att_rows
            ]
            panels["attack"] = (("mode", "eps", "gamma", "tau", "attack_robustness", "certified_rate", "violations"), att_rows)
    if sweep:
        results["bias_sweep"] = _bias_sweep(sweep, train, test, seed, explain)
        panels["bias_sweep"] = (("p", "accuracy", "mean_bias_score"), [[r["p"], r["accuracy"], r["mean_bias_score"]] for r in results["bias_sweep"]])
    doc = _header("evaluate", seed, cfg)
    doc["results"] = results
    for name, (cols, rows) in panels.items():
        _write_csv(out / f"{name}.csv", cols, rows)
    atomic_write_json(out / "evaluate_report.json", doc)
    violations = sum(r.get("violations", 0) for r in results.get("attack", []))
    if violations:
        raise RuntimeError(f"{violations} certified instances were broken by the attack")
    return doc


def _bias_sweep(sweep: dict, train: Dataset, test: Dataset, seed: int, explain: str) -> list:
    if not train.sensitive_indices:
        raise ConfigError("bias sweep needs a dataset with a sensitive attribute")
    sweep = apply_preset(sweep)
    j = int(sweep.get("feature", train.sensitive_indices[0]))
    tcfg = replace(TrainConfig.from_dict(sweep.get("train", {})), seed=seed)
    rows = []
    for p in sweep.get("p", [0.0, 0.1, 0.2]):
        poisoned = label_poison(train, float(p), seed)
        net = build_model(sweep, poisoned, seed)
        net, _ = fit(net, poisoned, tcfg, test=test)
        rows.append({"p": float(p), "accuracy": accuracy(net, test), "mean_bias_score": mean_bias_score(net, test, j, explain)})
    return rows


HALFMOONS_DEFAULTS = {
    "dataset": {"kind": "halfmoons", "n_train": 400, "n_test": 400, "noise": 0.1, "seed": 0},
    "architecture": "halfmoons",
    "activation": "softplus",
    "alpha": 1.0,
    "eps_values": [0.0, 0.05, 0.1, 0.2],
    "epochs": 100,
    "batch_size": 32,
    "explain": "true-logit",
    "grid": 32,
    "probe_eps": 0.05,
}


def run_demo_halfmoons(cfg: dict, out: Path, seed: int | None) -> dict:
    cfg = {**HALFMOONS_DEFAULTS, **cfg}
    seed = int(cfg.get("seed", 0)) if seed is None else seed
    train, test = load_datasets(cfg["dataset"])
    rows, models = [], {}
    g = np.linspace(0.0, 1.0, int(cfg["grid"]))
    grid = np.array([[a, b] for a in g for b in g])
    surface = [[float(a), float(b)] for a, b in grid]
    for eps in cfg["eps_values"]:
        tcfg = TrainConfig(
            GradCert(float(cfg["alpha"]), float(eps), 0.0),
            epochs=int(cfg["epochs"]),
            batch_size=int(cfg["batch_size"]),
            seed=seed,
            explain=cfg["explain"],
            probe_eps=float(cfg["probe_eps"]),
            probe_gamma=0.0,
        )
        net = build_model(cfg, train, seed)
        net, rep = fit(net, train, tcfg, test=test, probe=test.inputs)
        disp = gradient_dispersion(net, int(cfg["grid"]))
        margin = _margin(net, grid)
        for k, m in enumerate(margin):
            surface[k].append(float(m))
        rows.append([float(eps), rep.test_accuracy[-1], disp, rep.probe_delta[-1]])
        models[f"model_eps{eps:g}.json"] = dumps(net)
    doc = _header("demo-halfmoons", seed, cfg)
    doc["results"] = {
        "sweep": [dict(zip(("eps_t", "test_accuracy", "dispersion", "probe_delta"), r)) for r in rows],
    }
    for name, text in models.items():
        atomic_write_text(out / name, text)
    _write_csv(out / "sweep.csv", ("eps_t", "test_accuracy", "dispersion", "probe_delta"), rows)
    _write_csv(out / "decision_surface.csv", ["x0", "x1"] + [f"margin_eps{e:g}" for e in cfg["eps_values"]], surface)
    atomic_write_json(out / "demo_report.json", doc)
    return doc


def _margin(net: Network, grid: np.ndarray) -> np.ndarray:
    logits, _ = forward(net, grid)
    return logits[:, 1] - logits[:, 0]


# ---------------------------------------------------------------------------
# argument parsing


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="model file written by 'train'")
    p.add_argument("--data", required=True, help="dataset spec: JSON file or inline JSON object")
    p.add_argument("--part", choices=("test", "train"), default="test")
    p.add_argument("--eps", type=float, default=0.0, help="input box half-width")
    p.add_argument("--gamma", type=float, default=0.0, help="relative parameter box half-width")
    p.add_argument("--tau", type=float, default=1.0, help="mse threshold on the relative scale")
    p.add_argument("--explain", choices=("cross-entropy", "true-logit"), default="cross-entropy")
    p.add_argument("--matmul", choices=("center-radius", "corners"), default="center-radius")
    p.add_argument("--limit", type=int, default=None, help="only the first N inputs")
    p.add_argument("--mask-size", type=int, default=5)
    p.add_argument("--mask-insets", type=int, default=5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradcert", description="Certified bounds on input-gradient explanations.")
    parser.add_argument("--version", action="version", version=f"gradcert {__version__}")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed")
    parser.add_argument("--out", default="gradcert-out", help="output directory")
    parser.add_argument("--threads", type=int, default=None, help="cap numeric library threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)

    p = sub.add_parser("certify", help="certify explanations over a dataset")
    _add_eval_flags(p)
    p.add_argument("--mode", choices=("untargeted", "targeted", "prediction", "topk"), default="untargeted")
    p.add_argument("--norm-ratio-tau", type=float, default=2.0)
    p.add_argument("--sensitive", type=int, default=None, help="feature index for top-k mode")
    p.add_argument("--k", type=int, default=5)

    p = sub.add_parser("attack", help="attack explanations over a dataset")
    _add_eval_flags(p)
    p.add_argument(
        "--mode", choices=("untargeted-input", "targeted-input", "untargeted-model", "targeted-model"), default="untargeted-input"
    )
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--estimator", choices=("auto", "fd", "double"), default="auto")
    p.add_argument("--h-fd", type=float, default=1e-4)

    p = sub.add_parser("evaluate", help="accuracy, certificates, attacks and bias sweep from a config")
    p.add_argument("--config", required=True)

    p = sub.add_parser("demo-halfmoons", help="two-moons sweep over the training box width")
    p.add_argument("--config", default=None, help="optional overrides")
    p.add_argument("--epochs", type=int, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    limit_threads(args.threads)
    out = Path(args.out)
    try:
        if args.command == "certify":
            args.seed = 0 if args.seed is None else args.seed
            doc = run_certify(args, out)
        elif args.command == "attack":
            args.seed = 0 if args.seed is None else args.seed
            doc = run_attack(args, out)
        elif args.command == "demo-halfmoons":
            cfg = _read_json(args.config, "config")[0] if args.config else {}
            if args.epochs is not None:
                cfg["epochs"] = args.epochs
            doc = run_demo_halfmoons(cfg, out, args.seed)
        else:
            cfg, base = _read_json(args.config, "config")
            doc = (run_train if args.command == "train" else run_evaluate)(cfg, base, out, args.seed)
    except (ConfigError, ContractError, DataFormatError, FileNotFoundError) as exc:
        print(f"gradcert: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"gradcert: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    summary = doc.get("results", {})
    print(json.dumps({k: v for k, v in summary.items() if not isinstance(v, (list, dict))} or {"status": "ok"}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
