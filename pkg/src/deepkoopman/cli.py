"""Command-line front end: generate, train, eval, spectra, baseline, bound, preset.

Every subcommand reads an optional JSON config (``--config``); keys match the
long flag names with dashes replaced by underscores.  Precedence is
flags > config > built-in defaults.  Exit codes: 0 success, 1 usage or
validation error, 2 numerical failure, 3 I/O or file-format error.  On failure
one JSON error line is written to stderr and files written by the run are
removed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import analysis, baselines, training
from . import generator as gen
from .dynamics import (
    DatasetFormatError,
    Embedding,
    SYSTEMS,
    generate_dataset,
    load_dataset,
    metadata_path,
    save_dataset,
)
from .krylov import ExpmvConfig, spectral_norm_estimate
from .lattice import build_lattice
from .model import ModelFormatError, ObservableSpec, init_model, layer_action, load_model, save_model

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class Outputs:
    """Files and directories written by one invocation, removed again on failure."""

    def __init__(self):
        self.files: list[Path] = []
        self.dirs: list[Path] = []

    def mkdir(self, path) -> Path:
        path = Path(path)
        missing = []
        p = path
        while not p.exists():
            missing.append(p)
            p = p.parent
        path.mkdir(parents=True, exist_ok=True)
        self.dirs.extend(reversed(missing))
        return path

    def file(self, path) -> Path:
        path = Path(path)
        if path.parent != Path(""):
            self.mkdir(path.parent)
        self.files.append(path)
        return path

    def write_text(self, path, text: str) -> Path:
        path = self.file(path)
        path.write_text(text)
        return path

    def cleanup(self):
        for f in self.files:
            f.unlink(missing_ok=True)
        for d in reversed(self.dirs):
            shutil.rmtree(d, ignore_errors=True)


# ---------------------------------------------------------------------------
# config handling

DEFAULTS = {
    "generate": {
        "system": "vdp", "mu": 3.0, "vdp_sign": "standard", "kappa": 1.0, "alpha": 0.1, "a": 1.0, "b": 1.0,
        "velocity": [1.0, 0.0],
        "series": 1000, "steps": 100, "dt": 0.01, "noise_std": 0.01, "init_box": [[-1.0, 1.0]],
        "seed": 0, "margin": 0.9, "embedding": "fit", "embedding_from": None, "out": "data.csv",
    },
    "train": {
        "data": None, "test_data": None, "test_fraction": 0.0, "out_dir": "run",
        "layers": 1, "observable": "sawtooth", "lattice_bounds": 3, "selector_bound": None, "include_zero": False,
        "support_bounds": [2, 2, 1], "support_include_zero": False, "ranks": 1, "real_constrained": True,
        "init_std": 0.05, "batching": "pair_endpoints", "window_len": 20, "end_step": None,
        "epochs": 100, "batch_size": None, "learning_rate": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
        "quadrature_nodes": 12, "lambda_norm": 0.0, "lambda_cont": 0.0, "norm_iters": 5,
        "seed": 0, "learn_offset": False,
        "expmv_tolerance": 1e-9, "max_subspace": 40, "max_restarts": 20,
    },
    "eval": {"model": None, "data": None, "batching": "pair_endpoints", "window_len": 20, "end_step": None,
             "out": "eval.csv"},
    "spectra": {"model": None, "out": "spectra.csv"},
    "baseline": {
        "data": None, "window_len": 20, "windows": 5, "lattice_bounds": 3, "include_zero": True,
        "methods": ["edmd", "kdmd"], "ridge": 1e-8, "gamma": 0.1, "rank": None, "model": None,
        "out": "baseline.csv",
    },
    "bound": {
        "model": None, "data": None, "batching": "pair_endpoints", "window_len": 20, "end_step": None,
        "tau": 0.5, "delta": 0.05, "loss_bound": None, "norm_iters": 30, "out": None,
    },
    "preset": {"name": None, "desk_scale": False, "out_dir": "preset", "seed": 0, "seeds": None},
}

PATH_KEYS = {"data", "test_data", "out_dir", "out", "model", "embedding_from"}


def parse_bounds(value):
    """int, "3", "3,3,1", "-3:3,-1:1", [3, 1] or [[-3, 3], [-1, 1]] -> list of (lo, hi)."""
    if isinstance(value, bool):
        raise ValueError(f"invalid bounds {value!r}")
    if isinstance(value, int):
        return [(-value, value)]
    if isinstance(value, str):
        items = [s.strip() for s in value.split(",") if s.strip()]
        out = []
        for s in items:
            if ":" in s:
                lo, hi = s.split(":")
                out.append((int(lo), int(hi)))
            else:
                out.append((-int(s), int(s)))
        if not out:
            raise ValueError("empty bounds")
        return out
    out = []
    for item in value:
        if isinstance(item, int) and not isinstance(item, bool):
            out.append((-item, item))
        elif len(item) == 2:
            out.append((int(item[0]), int(item[1])))
        else:
            raise ValueError(f"invalid bound {item!r}")
    return out


def _expand(bounds, dims: int, name: str, tail=None):
    b = parse_bounds(bounds)
    if len(b) == 1:
        b = b * dims
    elif tail is not None and len(b) == dims - 1:
        b = b + [tail]
    if len(b) != dims:
        raise ValueError(f"{name} must give 1 or {dims} intervals, got {len(b)}")
    return b


def _box(value):
    if isinstance(value, str):
        value = [[float(x) for x in part.split(":")] for part in value.split(",")]
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1 and arr.size == 2:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"init_box must be lo:hi intervals, got {value!r}")
    return arr.tolist()


def resolve(command: str, flags: dict, config_path: str | None) -> tuple[dict, str | None]:
    cfg = dict(DEFAULTS[command])
    raw = None
    if config_path is not None:
        raw = Path(config_path).read_text()
        doc = json.loads(raw)
        if not isinstance(doc, dict):
            raise ValueError("config document must be a JSON object")
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise ValueError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(doc)
    cfg.update({k: v for k, v in flags.items() if v is not None})
    return cfg, raw


def _train_config(cfg: dict) -> training.TrainConfig:
    return training.TrainConfig(
        epochs=int(cfg["epochs"]), batch_size=cfg["batch_size"], learning_rate=float(cfg["learning_rate"]),
        beta1=float(cfg["beta1"]), beta2=float(cfg["beta2"]), eps=float(cfg["eps"]),
        quadrature_nodes=int(cfg["quadrature_nodes"]), lambda_norm=float(cfg["lambda_norm"]),
        lambda_cont=float(cfg["lambda_cont"]), norm_iters=int(cfg["norm_iters"]), seed=int(cfg["seed"]),
        learn_offset=bool(cfg["learn_offset"]),
    )


def _samples(states, cfg, model):
    b = training.build_samples(states, cfg["batching"], model.n_layers, cfg["window_len"], cfg.get("end_step"))
    return training.Batch(b.from_layer, b.inputs, model.map_targets(b.targets))


def _json_line(doc) -> str:
    return json.dumps(doc, sort_keys=True)


# ---------------------------------------------------------------------------
# commands


def make_system(cfg: dict):
    name = cfg["system"]
    if name not in SYSTEMS:
        raise ValueError(f"unknown system {name!r}; choose from {', '.join(sorted(SYSTEMS))}")
    factory = SYSTEMS[name]
    kind = factory.__name__
    if kind == "van_der_pol":
        return factory(float(cfg["mu"]), cfg["vdp_sign"])
    if kind == "stream_flow":
        return factory(float(cfg["kappa"]))
    if kind == "translation":
        vel = cfg["velocity"]
        if isinstance(vel, str):
            vel = [float(v) for v in vel.split(",")]
        return factory(vel)
    return factory(float(cfg["alpha"]), float(cfg["a"]), float(cfg["b"]))


def cmd_generate(cfg: dict, out: Outputs) -> dict:
    system = make_system(cfg)
    if cfg["embedding_from"]:
        emb = load_dataset(cfg["embedding_from"]).embedding
    elif cfg["embedding"] == "identity":
        emb = Embedding.identity(system.dim)
    elif cfg["embedding"] == "fit":
        emb = None
    else:
        raise ValueError(f"embedding must be 'fit' or 'identity', got {cfg['embedding']!r}")
    ds = generate_dataset(system, int(cfg["series"]), int(cfg["steps"]), float(cfg["dt"]),
                          float(cfg["noise_std"]), _box(cfg["init_box"]), int(cfg["seed"]),
                          embedding=emb, margin=float(cfg["margin"]))
    path = out.file(cfg["out"])
    out.file(metadata_path(path))
    save_dataset(ds, path)
    return {"rows": ds.n_series * (ds.n_steps + 1), "out": str(path)}


def _split(ds, cfg):
    states = ds.states
    if cfg["test_data"]:
        return states, load_dataset(cfg["test_data"]).states
    frac = float(cfg["test_fraction"])
    if not 0 <= frac < 1:
        raise ValueError("test_fraction must lie in [0, 1)")
    n_test = int(round(frac * states.shape[0]))
    if n_test == 0:
        return states, None
    return states[:-n_test], states[-n_test:]


OBSERVABLES = {"sawtooth": "selector_sincos", "sine": "selector_sine"}


def build_model(cfg: dict, data_dim: int):
    dims = data_dim + 1
    sel = cfg["selector_bound"]
    lattice = build_lattice(dims, _expand(cfg["lattice_bounds"], dims, "lattice_bounds",
                                          None if sel is None else (-int(sel), int(sel))),
                            bool(cfg["include_zero"]))
    support = gen.box_offsets(_expand(cfg["support_bounds"], dims, "support_bounds"),
                              include_zero=bool(cfg["support_include_zero"]))
    ecfg = ExpmvConfig(float(cfg["expmv_tolerance"]), int(cfg["max_subspace"]), int(cfg["max_restarts"]))
    if cfg["observable"] not in OBSERVABLES:
        raise ValueError(f"observable must be one of {', '.join(OBSERVABLES)}, got {cfg['observable']!r}")
    return init_model(lattice, int(cfg["layers"]), support, seed=int(cfg["seed"]), std=float(cfg["init_std"]),
                      observable=ObservableSpec(OBSERVABLES[cfg["observable"]]),
                      real_constrained=bool(cfg["real_constrained"]), ranks=int(cfg["ranks"]), expmv_cfg=ecfg)


def cmd_train(cfg: dict, out: Outputs, raw_config: str | None = None) -> dict:
    ds = load_dataset(cfg["data"])
    tcfg = _train_config(cfg)
    train_states, test_states = _split(ds, cfg)
    model = build_model(cfg, ds.dim)
    train = _samples(train_states, cfg, model)
    test = None if test_states is None else _samples(test_states, cfg, model)
    run = out.mkdir(cfg["out_dir"])
    if raw_config is not None:
        out.write_text(run / "config.json", raw_config)
    out.write_text(run / "resolved_config.json", json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    log_path = out.file(run / "train_log.jsonl")
    model, log = training.adam_train(train, model, tcfg, test, log_path=log_path)
    save_model(model, out.file(run / "model.json"))
    summary = {"epochs": len(log), "model": str(run / "model.json")}
    if log:
        summary["train_loss"] = log[-1]["train_loss"]
        if "test_loss" in log[-1]:
            summary["test_loss"] = log[-1]["test_loss"]
    return summary


def evaluation_csv(stats: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["from_layer", "count", "mse"])
    for j in sorted(stats):
        count, value = stats[j]
        w.writerow([j, count, repr(value)])
    return buf.getvalue()


def cmd_eval(cfg: dict, out: Outputs) -> dict:
    model = load_model(cfg["model"])
    ds = load_dataset(cfg["data"])
    batch = _samples(ds.states, cfg, model)
    stats = training.per_layer_mse(model, batch)
    out.write_text(cfg["out"], evaluation_csv(stats))
    total = sum(c * m for c, m in stats.values()) / sum(c for c, _ in stats.values())
    return {"mse": total, "out": cfg["out"]}


def cmd_spectra(cfg: dict, out: Outputs) -> dict:
    model = load_model(cfg["model"])
    reports = analysis.model_spectra(model)
    out.write_text(cfg["out"], analysis.spectrum_csv(reports))
    return {"layers": len(reports), "annulus_fraction": [r.fraction_in_annulus() for r in reports],
            "out": cfg["out"]}


def cmd_baseline(cfg: dict, out: Outputs) -> dict:
    ds = load_dataset(cfg["data"])
    lattice = build_lattice(ds.dim, _expand(cfg["lattice_bounds"], ds.dim, "lattice_bounds"),
                            bool(cfg["include_zero"]))
    methods = cfg["methods"]
    if isinstance(methods, str):
        methods = [m.strip() for m in methods.split(",") if m.strip()]
    unknown = set(methods) - {"edmd", "kdmd"}
    if unknown:
        raise ValueError(f"unknown baseline methods: {', '.join(sorted(unknown))}")
    rank = None if cfg["rank"] is None else int(cfg["rank"])
    rows = []
    for j in range(1, int(cfg["windows"]) + 1):
        pairs = baselines.window_pairs(ds.states, j, int(cfg["window_len"]))
        if "edmd" in methods:
            rows.append(("edmd", j, baselines.edmd(pairs, lattice, float(cfg["ridge"])).eigenvalues))
        if "kdmd" in methods:
            res = baselines.kdmd(pairs, float(cfg["gamma"]), rank, max_rank=lattice.size)
            rows.append(("kdmd", j, res.eigenvalues))
    text = baselines.baseline_csv(rows)
    if cfg["model"]:
        model = load_model(cfg["model"])
        layer_text = analysis.spectrum_csv(analysis.model_spectra(model), method="koopman_layer")
        text += layer_text.split("\n", 1)[1]
    out.write_text(cfg["out"], text)
    return {"windows": int(cfg["windows"]), "methods": methods, "out": cfg["out"]}


def cmd_bound(cfg: dict, out: Outputs) -> dict:
    model = load_model(cfg["model"])
    ds = load_dataset(cfg["data"])
    batch = _samples(ds.states, cfg, model).with_features(model)
    states = training.forward_states(model, down_to=int(batch.from_layer.min()))
    resid = training._predictions(model, batch, states) - batch.targets
    per_sample = np.sum(resid * resid, axis=1)
    n = model.lattice.size
    norm_product = 1.0
    for p in model.layers:
        norm_product *= spectral_norm_estimate(layer_action(p, model.expmv_cfg),
                                               layer_action(p, model.expmv_cfg, adjoint=True),
                                               n, int(cfg["norm_iters"]))
    c = float(per_sample.max()) if cfg["loss_bound"] is None else float(cfg["loss_bound"])
    inputs = analysis.BoundInputs(float(per_sample.mean()), len(batch), float(cfg["tau"]), model.lattice,
                                  norm_product, float(np.linalg.norm(model.v_coeffs)), c, float(cfg["delta"]))
    value = analysis.generalization_bound(inputs)
    doc = {"bound": value, "empirical_risk": inputs.empirical_risk, "n_samples": inputs.n_samples,
           "norm_product": norm_product, "v_norm": inputs.v_norm, "loss_bound": c,
           "tau": inputs.tau, "delta": inputs.delta}
    if cfg["out"]:
        out.write_text(cfg["out"], json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc


# ---------------------------------------------------------------------------
# presets


PRESETS = {
    "vdp": {
        "full": {"series": 1000, "test_series": 1000, "noise_std": 0.01, "lattice_bounds": 5,
                 "layers": [1, 2], "epochs": 1000, "learning_rate": 1e-3, "lambda_norm": 0.0},
        "desk": {"series": 200, "test_series": 200, "noise_std": 0.01, "lattice_bounds": 3,
                 "layers": [1, 2], "epochs": 150, "learning_rate": 1e-2, "lambda_norm": 0.0},
    },
    "vdp-reg": {
        "full": {"series": 30, "test_series": 1000, "noise_std": 0.03, "test_noise_std": 0.0, "lattice_bounds": 5,
                 "layers": [3], "epochs": 1000, "learning_rate": 1e-3, "lambda_norm": [0.0, 1e-5]},
        "desk": {"series": 30, "test_series": 200, "noise_std": 0.03, "test_noise_std": 0.0, "lattice_bounds": 3,
                 "layers": [3], "epochs": 1000, "learning_rate": 1e-3, "lambda_norm": [0.0, 1e-5]},
    },
    "stream-flow": {
        "full": {"series": 1000, "lattice_bounds": [5, 5, 2], "window_len": 20, "layers": 5, "init_std": 0.01,
                 "epochs": 3000, "learning_rate": 1e-3, "lambda_cont": 0.01, "batch_size": None},
        "desk": {"series": 40, "lattice_bounds": [3, 3, 2], "window_len": 20, "layers": 5, "init_std": 0.01,
                 "epochs": 1000, "learning_rate": 1e-3, "lambda_cont": 0.01, "batch_size": None},
    },
}


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _vdp_preset(p: dict, cfg: dict, out: Outputs, root: Path) -> dict:
    seeds = _as_list(cfg["seeds"] if cfg["seeds"] is not None else [cfg["seed"]])
    results = []
    for seed in seeds:
        seed = int(seed)
        base = dict(DEFAULTS["generate"], system="vdp", steps=100, noise_std=p["noise_std"])
        train_csv = root / f"seed{seed}" / "train.csv"
        test_csv = root / f"seed{seed}" / "test.csv"
        cmd_generate(dict(base, series=p["series"], seed=2 * seed, out=str(train_csv)), out)
        cmd_generate(dict(base, series=p["test_series"], seed=2 * seed + 1, out=str(test_csv),
                          noise_std=p.get("test_noise_std", p["noise_std"]), embedding_from=str(train_csv)), out)
        for J in _as_list(p["layers"]):
            for lam in _as_list(p.get("lambda_norm", 0.0)):
                run = root / f"seed{seed}" / f"J{J}_lnorm{lam:g}"
                tcfg = dict(DEFAULTS["train"], data=str(train_csv), test_data=str(test_csv), out_dir=str(run),
                            layers=J, lattice_bounds=p["lattice_bounds"], epochs=p["epochs"],
                            learning_rate=p["learning_rate"], lambda_norm=lam, seed=seed)
                summary = cmd_train(tcfg, out)
                results.append({"seed": seed, "layers": J, "lambda_norm": lam,
                                "test_loss": summary.get("test_loss")})
    return {"runs": results}


def _stream_preset(p: dict, cfg: dict, out: Outputs, root: Path) -> dict:
    seed = int(cfg["seed"])
    J, w = p["layers"], p["window_len"]
    data = root / "stream.csv"
    cmd_generate(dict(DEFAULTS["generate"], system="stream", series=p["series"], steps=(J + 1) * w - 1,
                      noise_std=0.0, embedding="identity", seed=seed, out=str(data)), out)
    run = root / "run"
    tcfg = dict(DEFAULTS["train"], data=str(data), out_dir=str(run), layers=J, batching="windowed",
                window_len=w, lattice_bounds=p["lattice_bounds"], include_zero=True,
                support_bounds=[2, 2, 1], support_include_zero=True, init_std=p["init_std"], epochs=p["epochs"],
                learning_rate=p["learning_rate"], lambda_cont=p["lambda_cont"], batch_size=p["batch_size"],
                seed=seed)
    summary = cmd_train(tcfg, out)
    spectra = cmd_spectra({"model": str(run / "model.json"), "out": str(root / "spectra.csv")}, out)
    lat = parse_bounds(p["lattice_bounds"])[:2]
    cmd_baseline(dict(DEFAULTS["baseline"], data=str(data), window_len=w, windows=J,
                      lattice_bounds=[list(b) for b in lat], model=str(run / "model.json"),
                      out=str(root / "baseline.csv")), out)
    return {"train": summary, "annulus_fraction": spectra["annulus_fraction"]}


def cmd_preset(cfg: dict, out: Outputs) -> dict:
    name = cfg["name"]
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    p = PRESETS[name]["desk" if cfg["desk_scale"] else "full"]
    root = out.mkdir(cfg["out_dir"])
    result = (_stream_preset if name == "stream-flow" else _vdp_preset)(p, cfg, out, root)
    result["preset"] = name
    result["desk_scale"] = bool(cfg["desk_scale"])
    out.write_text(root / "summary.json", json.dumps(result, indent=1, sort_keys=True) + "\n")
    return result


# ---------------------------------------------------------------------------
# argument parsing


def _add(p, name, **kw):
    p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deepkoopman", description="Deep Koopman-layered models on Fourier lattices.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="simulate a reference system into a torus-embedded dataset")
    _add(g, "system", choices=sorted(SYSTEMS))
    for key in ("mu", "kappa", "alpha", "a", "b", "dt", "noise_std", "margin"):
        _add(g, key, type=float)
    _add(g, "vdp_sign", choices=["standard", "reversed"])
    _add(g, "velocity", help="translation velocity, comma separated")
    for key in ("series", "steps", "seed"):
        _add(g, key, type=int)
    _add(g, "init_box", help="lo:hi per dimension, comma separated")
    _add(g, "embedding", choices=["fit", "identity"])
    _add(g, "embedding_from", help="reuse the embedding of an existing dataset")
    _add(g, "out")

    t = sub.add_parser("train", help="train a model with Adam")
    for key in ("data", "test_data", "out_dir", "lattice_bounds", "support_bounds"):
        _add(t, key)
    _add(t, "batching", choices=["pair_endpoints", "windowed"])
    _add(t, "observable", choices=sorted(OBSERVABLES))
    for key in ("layers", "selector_bound", "ranks", "window_len", "end_step", "epochs", "batch_size",
                "quadrature_nodes", "norm_iters", "seed", "max_subspace", "max_restarts"):
        _add(t, key, type=int)
    for key in ("test_fraction", "init_std", "learning_rate", "beta1", "beta2", "eps", "lambda_norm",
                "lambda_cont", "expmv_tolerance"):
        _add(t, key, type=float)
    for key in ("include_zero", "support_include_zero", "real_constrained", "learn_offset"):
        _add(t, key, type=_bool)

    e = sub.add_parser("eval", help="per-layer test loss of a trained model")
    for key in ("model", "data", "out"):
        _add(e, key)
    _add(e, "batching", choices=["pair_endpoints", "windowed"])
    _add(e, "window_len", type=int)
    _add(e, "end_step", type=int)

    s = sub.add_parser("spectra", help="eigenvalues of every layer")
    _add(s, "model")
    _add(s, "out")

    b = sub.add_parser("baseline", help="windowed EDMD / KDMD spectra")
    for key in ("data", "lattice_bounds", "methods", "model", "out"):
        _add(b, key)
    for key in ("window_len", "windows", "rank"):
        _add(b, key, type=int)
    _add(b, "ridge", type=float)
    _add(b, "gamma", type=float)
    _add(b, "include_zero", type=_bool)

    bd = sub.add_parser("bound", help="generalization bound for a trained model")
    for key in ("model", "data", "out"):
        _add(bd, key)
    _add(bd, "batching", choices=["pair_endpoints", "windowed"])
    for key in ("window_len", "end_step", "norm_iters"):
        _add(bd, key, type=int)
    for key in ("tau", "delta", "loss_bound"):
        _add(bd, key, type=float)

    pr = sub.add_parser("preset", help="run a bundled experiment")
    pr.add_argument("name", nargs="?", default=None, choices=sorted(PRESETS))
    pr.add_argument("--desk-scale", dest="desk_scale", action="store_true", default=None)
    _add(pr, "out_dir")
    _add(pr, "seed", type=int)
    _add(pr, "seeds", type=lambda s: [int(x) for x in s.split(",")])

    for p in (g, t, e, s, b, bd, pr):
        p.add_argument("--config", dest="config", default=None)
    return parser


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


REQUIRED = {"train": ("data",), "eval": ("model", "data"), "spectra": ("model",), "baseline": ("data",),
            "bound": ("model", "data"), "preset": ("name",)}

COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "spectra": cmd_spectra,
            "baseline": cmd_baseline, "bound": cmd_bound, "preset": cmd_preset}


def _classify(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (OSError, ModelFormatError, DatasetFormatError, json.JSONDecodeError)):
        return EXIT_IO
    if isinstance(exc, ArithmeticError):
        return EXIT_NUMERIC
    if isinstance(exc, (ValueError, KeyError, TypeError)):
        return EXIT_USAGE
    raise exc


def run_command(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    out = Outputs()
    try:
        args = vars(build_parser().parse_args(argv))
        command = args.pop("command")
        if command is None:
            raise UsageError("a subcommand is required")
        config_path = args.pop("config")
        cfg, raw = resolve(command, args, config_path)
        for key in REQUIRED.get(command, ()):
            if not cfg.get(key):
                raise UsageError(f"{command} needs --{key.replace('_', '-')}" if key != "name"
                                 else f"{command} needs a name")
        if command == "train":
            result = cmd_train(cfg, out, raw)
        else:
            result = COMMANDS[command](cfg, out)
    except Exception as exc:  # noqa: BLE001 - mapped onto exit codes
        code = _classify(exc)
        out.cleanup()
        stderr.write(_json_line({"error": type(exc).__name__, "exit_code": code, "message": str(exc)}) + "\n")
        return code
    stdout.write(_json_line(result) + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    return run_command(argv)


if __name__ == "__main__":
    sys.exit(main())
