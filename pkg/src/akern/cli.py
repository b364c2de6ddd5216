"""Experiment runner: ``akern <subcommand> --config run.toml --out DIR [--seed N]``.

Config file (TOML)
------------------
Sections and their keys with defaults are listed in ``SCHEMA``; unknown
sections or keys are rejected.  Omitted keys take the defaults, and the fully
resolved config is written to ``manifest.json``.

Seeds
-----
All randomness comes from ``[run] seed``.  A stream for (subcommand, module,
index) is seeded by ``SeedSequence(seed, spawn_key=(crc32(subcommand),
crc32(module), index))``; see :func:`derive_seed`.  ``index`` numbers the cells
of a ``compare`` or ``fixedpoint`` sweep (0 otherwise).

Outputs
-------
``manifest.json`` (status, resolved config, derived seeds, versions, output
digests, timings), ``results.csv`` (method, P, gamma0, test_loss, train_loss,
runtime_s), ``predictions.csv``, ``kernels/*.csv``, ``densities/*.csv`` and
``trajectory.csv`` where they apply.  Files are built in a staging directory and
moved into place only after the run finishes; a failed run leaves only a
manifest with status "error".

Exit codes: 0 success, 1 config error, 2 data error, 3 solver divergence,
4 non-convergence (results written and flagged in the manifest).
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import platform
import shutil
import sys
import tempfile
import time
import zlib
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .anbk import (AnbkSolverConfig, SolverDivergence, predict_anbk, preactivation_density,
                   solve_anbk, test_kernel_extension, write_density_csv, write_residual_trace)
from .antk import (DmftConfig, DmftDivergence, final_kernel, fixed_point_relu_single,
                   predict_antk, solve_dmft_cnn_two_layer, solve_dmft_two_layer,
                   write_trajectory_csv)
from .core import (Activation, Dataset, Hyperparams, SingularKernelError, as_array,
                   cross_gram, data_gram, kernel_ridge_predict, test_loss, write_json,
                   write_kernel_csv)
from .data import (DataFormatError, load_cifar10_binary, load_mnist_idx, synth_whitened,
                   synth_whitened_split, train_test_split_two_class)
from .lazy import conv_ntk, gp_predict, nngp_kernel, ntk_kernel
from .linearnet import linear_test_propagation, solve_deep_linear, solve_whitened_overlaps
from .oracle import (GDConfig, LangevinConfig, TrainingDivergence, empirical_kernels, forward,
                     init_conv, init_mlp, save_checkpoint, train_gd_weight_decay,
                     train_langevin)
from .sampling import SamplerConfig

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_NOT_CONVERGED = 0, 1, 2, 3, 4

SUBCOMMANDS = ("anbk", "antk", "linear", "lazy", "oracle", "compare", "fixedpoint")
METHODS = ("nngp", "ntk", "anbk", "antk")

_ANY_NUMBER = "number"   # marker: optional numeric key without a default

SCHEMA = {
    "run": {"seed": 0, "record_timings": True},
    "data": {"source": "synthetic", "P": 20, "P_test": 20, "D": 64, "overlap": 0.8,
             "label_norm": "pm1", "images": "", "labels": "", "paths": [], "class_a": 0,
             "class_b": 1, "mode": "mlp", "side": _ANY_NUMBER, "patch": 8, "center": True},
    "model": {"gamma0": 0.5, "depth": 1, "activation": "relu", "beta": 50.0,
              "lambdas": [1.0], "kappa": _ANY_NUMBER},
    "anbk": {"inner_steps": 200, "max_outer_steps": 2000, "step_phi": 0.5,
             "step_phi_hat": 0.5, "residual_tol": 1e-3, "precondition": True,
             "resample": False, "max_relative_change": 0.25, "batch_size": 20000,
             "jitter": 1e-10, "density_layer": 1, "density_patterns": [0],
             "density_range": [-4.0, 4.0], "density_points": 201},
    "antk": {"T": 20000, "eta": 1e-3, "S": 20000, "record_every": 1000, "init": "gaussian",
             "stop_tol": _ANY_NUMBER},
    "lazy": {"mc_batch": 20000},
    "linear": {"method": "spike"},
    "oracle": {"N": 1024, "dynamics": "langevin", "eta": _ANY_NUMBER, "T": 20000,
               "thermalize_after": 5000, "sample_every": 1000, "record_every": 100,
               "bins": 50},
    "compare": {"methods": list(METHODS), "gamma0s": [0.3], "Ps": [8, 16, 32]},
    "fixedpoint": {"gamma0s": [0.5, 2.0, 4.0], "lambdas": [1.0], "D": 8},
}


class ConfigError(ValueError):
    pass


class _Failure(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- config

def _check_type(section, key, default, value):
    where = f"[{section}] {key}"
    if default is _ANY_NUMBER or isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if isinstance(value, (int, float)) and not isinstance(value, bool) and default \
                and isinstance(default[0], (int, float)):
            value = [value]
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return list(value)
    raise AssertionError(where)


def resolve_config(raw: dict) -> dict:
    """Fill defaults and type-check a parsed config; unknown keys are errors.
    Optional numeric keys without a default resolve to None."""
    unknown = set(raw) - set(SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    out = {}
    for section, defaults in SCHEMA.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"[{section}] must be a table")
        bad = set(given) - set(defaults)
        if bad:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(bad))}")
        sec = {}
        for key, default in defaults.items():
            if key in given:
                sec[key] = _check_type(section, key, default, given[key])
            else:
                sec[key] = None if default is _ANY_NUMBER else copy.deepcopy(default)
        out[section] = sec
    _validate(out)
    return out


def _validate(cfg):
    d, m = cfg["data"], cfg["model"]
    if d["source"] not in ("synthetic", "mnist", "cifar10"):
        raise ConfigError(f"[data] source must be synthetic, mnist or cifar10, got {d['source']!r}")
    if d["P"] < 1 or d["P_test"] < 0:
        raise ConfigError("[data] needs P >= 1 and P_test >= 0")
    try:
        Activation.parse(m["activation"])
    except ValueError as exc:
        raise ConfigError(f"[model] activation: {exc}") from None
    for method in cfg["compare"]["methods"]:
        if method not in METHODS:
            raise ConfigError(f"[compare] unknown method {method!r}")
    if cfg["oracle"]["dynamics"] not in ("langevin", "gd"):
        raise ConfigError("[oracle] dynamics must be langevin or gd")
    if cfg["linear"]["method"] not in ("spike", "iterate"):
        raise ConfigError("[linear] method must be spike or iterate")
    if len(cfg["anbk"]["density_range"]) != 2:
        raise ConfigError("[anbk] density_range needs two numbers")


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from None
    return resolve_config(raw)


def hyperparams(model: dict, **override) -> Hyperparams:
    kw = dict(gamma0=model["gamma0"], depth=model["depth"], activation=model["activation"],
              beta=model["beta"], lambdas=tuple(model["lambdas"]), kappa=model["kappa"])
    kw.update(override)
    try:
        return Hyperparams(**kw)
    except ValueError as exc:
        raise ConfigError(f"[model] {exc}") from None


def _config_object(cls, section, **kw):
    try:
        return cls(**kw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


# ---------------------------------------------------------------- seeds

def derive_seed(root: int, subcommand: str, module: str, index: int = 0) -> int:
    """32-bit seed of the (subcommand, module, index) stream under ``root``."""
    key = (zlib.crc32(subcommand.encode()), zlib.crc32(module.encode()), int(index))
    ss = np.random.SeedSequence(int(root), spawn_key=key)
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------- run context

class RunContext:
    """Collects seeds, timings and result rows while writing into a staging dir."""

    def __init__(self, subcommand, cfg, staging: Path):
        self.subcommand = subcommand
        self.cfg = cfg
        self.dir = staging
        self.seeds = {}
        self.timings = {}
        self.rows = []
        self.notes = {}
        self.converged = True

    @property
    def record_timings(self):
        return self.cfg["run"]["record_timings"]

    def seed(self, module, index=0):
        s = derive_seed(self.cfg["run"]["seed"], self.subcommand, module, index)
        self.seeds[f"{module}[{index}]"] = s
        return s

    def path(self, *parts) -> Path:
        p = self.dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def timed(self, label, fn, *args, **kw):
        t0 = time.perf_counter()
        out = fn(*args, **kw)
        dt = time.perf_counter() - t0
        self.timings[label] = self.timings.get(label, 0.0) + dt
        return out, dt

    def add_row(self, method, P, gamma0, test, train, runtime):
        self.rows.append((method, int(P), float(gamma0), float(test), float(train),
                          float(runtime) if self.record_timings else float("nan")))


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _write_rows(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_results_csv(path, rows):
    _write_rows(path, ("method", "P", "gamma0", "test_loss", "train_loss", "runtime_s"), rows)


def write_predictions_csv(path, train: Dataset, test: Dataset | None, columns: dict):
    """split, index, target and one column per predictor (train rows first)."""
    names = list(columns)
    rows = []
    for split, ds in (("train", train), ("test", test)):
        if ds is None:
            continue
        for i, t in enumerate(ds.targets):
            rows.append([split, i, t] + [columns[n][split][i] for n in names])
    _write_rows(path, ["split", "index", "target"] + names, rows)


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _versions():
    import scipy
    return {"akern": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def _digests(directory: Path):
    out = {}
    for p in sorted(directory.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            out[p.relative_to(directory).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def _manifest(ctx: RunContext, status, message=None, directory=None):
    m = {"subcommand": ctx.subcommand, "status": status, "exit_code": _STATUS_CODES[status],
         "config": ctx.cfg, "seeds": ctx.seeds, "versions": _versions()}
    if ctx.notes:
        m["notes"] = ctx.notes
    if message:
        m["message"] = message
    if directory is not None:
        m["outputs"] = _digests(directory)
    if ctx.record_timings:
        m["timings_s"] = ctx.timings
    return _json_safe(m)


_STATUS_CODES = {"ok": EXIT_OK, "not_converged": EXIT_NOT_CONVERGED, "config_error": EXIT_CONFIG,
                 "data_error": EXIT_DATA, "diverged": EXIT_DIVERGED}


# ---------------------------------------------------------------- data

def load_data(cfg, ctx: RunContext, P=None, index=0):
    """(train, test) per the [data] section; ``P`` overrides the train size."""
    d = cfg["data"]
    P = d["P"] if P is None else P
    P_test = d["P_test"]
    seed = ctx.seed("data", index)
    try:
        if d["source"] == "synthetic":
            if P_test == 0:
                return synth_whitened(P, d["D"], seed, d["label_norm"]), None
            return synth_whitened_split(P, P_test, d["D"], seed, d["label_norm"], d["overlap"])
        if d["source"] == "mnist":
            full = load_mnist_idx(d["images"], d["labels"], center=d["center"])
        else:
            if not d["paths"]:
                raise DataFormatError("[data] paths lists no CIFAR-10 batch files")
            side = None if d["side"] is None else int(d["side"])
            full = load_cifar10_binary(d["paths"], d["mode"], side, d["patch"], d["center"])
        train, test = train_test_split_two_class(full, d["class_a"], d["class_b"], P,
                                                 max(P_test, 1), seed)
        return train, (test if P_test > 0 else None)
    except (OSError, DataFormatError) as exc:
        raise _Failure(EXIT_DATA, f"data error: {exc}") from None
    except ValueError as exc:
        raise _Failure(EXIT_DATA, f"data error: {exc}") from None


def _full_gram(train, test):
    X = train.inputs if test is None else np.vstack([train.inputs, test.inputs])
    return X @ X.T / X.shape[1]


def _patch_gram(train, test):
    pl = train.patch_layout
    X = train.inputs if test is None else np.vstack([train.inputs, test.inputs])
    patches = X.reshape(len(X) * pl.patch_count, pl.patch_dim)
    return patches @ patches.T / pl.patch_dim


def _targets(test):
    return None if test is None else test.targets


def _split(pred):
    return {"train": pred.train_predictions, "test": pred.test_predictions}


# ---------------------------------------------------------------- methods

def run_lazy_methods(cfg, ctx, train, test, hp, methods=("nngp", "ntk"), kernel_dir="kernels"):
    """NNGP (ridge lambda_L/beta) and NTK (ridge lambda_L kappa) predictors."""
    P = train.P
    out = {}
    if "nngp" in methods:
        def nngp():
            G = _full_gram(train, test)
            phis = nngp_kernel(G, hp.depth, hp.activation, lambdas=hp.lambdas,
                               batch=cfg["lazy"]["mc_batch"], seed=ctx.seed("lazy"))
            K = as_array(phis[-1])
            pred = kernel_ridge_predict(K[:P, :P], K[P:, :P], train.targets,
                                        hp.lam_out * hp.inv_beta, _targets(test))
            gp = gp_predict(K[:P, :P] / hp.lam_out, K[P:, :P] / hp.lam_out,
                            np.diag(K)[P:] / hp.lam_out, train.targets, hp.beta)
            return K, pred, gp
        (K, pred, gp), dt = ctx.timed("nngp", nngp)
        write_kernel_csv(ctx.path(kernel_dir, "nngp.csv"), K)
        out["nngp"] = _split(pred)
        if test is not None:
            out["nngp_variance"] = {"train": np.full(P, np.nan), "test": gp.variance}
        ctx.add_row("nngp", P, 0.0, pred.test_loss, pred.train_loss, dt)
    if "ntk" in methods:
        def ntk():
            if train.patch_layout is not None:
                if hp.depth != 1 or hp.activation is not Activation.RELU:
                    raise ConfigError("the convolutional NTK needs depth 1 and relu")
                K = as_array(conv_ntk(_patch_gram(train, test), train.patch_layout.patch_count))
            else:
                K = as_array(ntk_kernel(_full_gram(train, test), hp.depth, hp.activation,
                                        batch=cfg["lazy"]["mc_batch"], seed=ctx.seed("lazy")))
            return K, predict_antk(K, train.targets, hp, _targets(test))
        (K, pred), dt = ctx.timed("ntk", ntk)
        write_kernel_csv(ctx.path(kernel_dir, "ntk.csv"), K)
        out["ntk"] = _split(pred)
        ctx.add_row("ntk", P, 0.0, pred.test_loss, pred.train_loss, dt)
    return out


def _sampler(cfg, ctx, index=0):
    a = cfg["anbk"]
    return _config_object(SamplerConfig, "anbk", batch_size=a["batch_size"],
                          seed=ctx.seed("anbk", index), jitter=a["jitter"])


def run_anbk_method(cfg, ctx, train, test, hp, index=0, kernel_dir="kernels",
                    density_dir="densities", densities=True, trace_path="trajectory.csv"):
    a = cfg["anbk"]
    sampler = _sampler(cfg, ctx, index)
    solver = _config_object(AnbkSolverConfig, "anbk", inner_steps=a["inner_steps"],
                            max_outer_steps=a["max_outer_steps"], step_phi=a["step_phi"],
                            step_phi_hat=a["step_phi_hat"], residual_tol=a["residual_tol"],
                            sampler=sampler, precondition=a["precondition"],
                            resample=a["resample"],
                            max_relative_change=a["max_relative_change"])

    def solve():
        stack = solve_anbk(train, hp, solver)
        if test is None:
            k = np.zeros((0, train.P))
        else:
            k, _ = test_kernel_extension(stack, train, test.inputs, hp, sampler)
        return stack, predict_anbk(stack, k, train.targets, hp, _targets(test))

    (stack, pred), dt = ctx.timed("anbk", solve)
    stack.write(ctx.path(kernel_dir, "x").parent, prefix="anbk_")
    write_residual_trace(ctx.path(trace_path), stack)
    if densities:
        layer = a["density_layer"]
        if not 1 <= layer <= hp.depth:
            raise ConfigError(f"[anbk] density_layer must lie in 1..{hp.depth}")
        lo, hi = a["density_range"]
        grid = np.linspace(lo, hi, a["density_points"])
        for p in a["density_patterns"]:
            if not 0 <= p < train.P:
                raise ConfigError(f"[anbk] density pattern {p} out of range")
            dens = preactivation_density(stack, layer, p, grid, hp, sampler)
            write_density_csv(ctx.path(density_dir, f"anbk_layer{layer}_pattern{p}.csv"),
                              grid, dens)
    conv = bool(stack.info.get("converged", True))
    ctx.converged &= conv
    ctx.notes.setdefault("anbk", []).append(
        {"P": train.P, "gamma0": hp.gamma0, "converged": conv,
         "outer_iterations": stack.info.get("outer_iterations"),
         "max_residual": stack.info.get("max_residual")})
    ctx.add_row("anbk", train.P, hp.gamma0, pred.test_loss, pred.train_loss, dt)
    return {"anbk": _split(pred)}


def _dmft_config(cfg, ctx, index=0, **override):
    t = cfg["antk"]
    kw = dict(T=t["T"], eta=t["eta"], S=t["S"], seed=ctx.seed("antk", index),
              record_every=t["record_every"], init=t["init"], stop_tol=t["stop_tol"])
    kw.update(override)
    return _config_object(DmftConfig, "antk", **kw)


def run_antk_method(cfg, ctx, train, test, hp, index=0, kernel_dir="kernels",
                    trace_path="trajectory.csv"):
    config = _dmft_config(cfg, ctx, index)
    test_inputs = None if test is None else test.inputs
    solver = solve_dmft_cnn_two_layer if train.patch_layout is not None else solve_dmft_two_layer

    def solve():
        res = solver(train, test_inputs, hp, config)
        K = final_kernel(res)
        return res, K, predict_antk(K, train.targets, hp, _targets(test))

    (res, K, pred), dt = ctx.timed("antk", solve)
    write_kernel_csv(ctx.path(kernel_dir, "antk.csv"), K)
    write_kernel_csv(ctx.path(kernel_dir, "antk_phi1.csv"), res.trajectory.phi1[-1])
    write_kernel_csv(ctx.path(kernel_dir, "antk_g1.csv"), res.trajectory.g1[-1])
    write_trajectory_csv(ctx.path(trace_path), res.trajectory)
    if config.stop_tol is not None and res.trajectory.converged_step is None:
        ctx.converged = False
    ctx.notes.setdefault("antk", []).append(
        {"P": train.P, "gamma0": hp.gamma0, "converged_step": res.trajectory.converged_step})
    ctx.add_row("antk", train.P, hp.gamma0, pred.test_loss, pred.train_loss, dt)
    n_test = 0 if test is None else test.P
    dyn = {"train": res.train_predictions, "test": res.test_predictions[:n_test]}
    return {"antk": _split(pred), "antk_dynamics": dyn}


# ---------------------------------------------------------------- subcommands

def cmd_anbk(cfg, ctx):
    train, test = load_data(cfg, ctx)
    hp = hyperparams(cfg["model"])
    cols = run_anbk_method(cfg, ctx, train, test, hp)
    write_predictions_csv(ctx.path("predictions.csv"), train, test, cols)


def cmd_antk(cfg, ctx):
    train, test = load_data(cfg, ctx)
    hp = hyperparams(cfg["model"])
    cols = run_antk_method(cfg, ctx, train, test, hp)
    write_predictions_csv(ctx.path("predictions.csv"), train, test, cols)


def cmd_lazy(cfg, ctx):
    train, test = load_data(cfg, ctx)
    hp = hyperparams(cfg["model"])
    cols = run_lazy_methods(cfg, ctx, train, test, hp)
    write_predictions_csv(ctx.path("predictions.csv"), train, test, cols)


def cmd_linear(cfg, ctx):
    """Deep-linear exact solution on the configured data plus the whitened
    overlap profile c_l, l = 1..L, for the configured (gamma0, beta, L)."""
    m = cfg["model"]
    if Activation.parse(m["activation"]) is not Activation.LINEAR:
        ctx.notes["activation"] = "linear (forced by the linear subcommand)"
    hp = hyperparams(m, activation=Activation.LINEAR)
    profile, _ = ctx.timed("overlaps", solve_whitened_overlaps, hp.gamma0, hp.beta, hp.depth)
    profile.to_csv(ctx.path("overlaps.csv"))
    train, test = load_data(cfg, ctx)

    def solve():
        stack = solve_deep_linear(as_array(data_gram(train)), train.targets, hp,
                                  method=cfg["linear"]["method"])
        if test is None:
            k = np.zeros((0, train.P))
        else:
            X = test.inputs
            k, _ = linear_test_propagation(stack, cross_gram(X, train.inputs),
                                           np.einsum("ij,ij->i", X, X) / X.shape[1], hp)
        return stack, predict_anbk(stack, k, train.targets, hp, _targets(test))

    (stack, pred), dt = ctx.timed("linear", solve)
    stack.write(ctx.path("kernels", "x").parent, prefix="linear_")
    if not stack.info.get("converged", True):
        ctx.converged = False
    ctx.notes["linear"] = {k: v for k, v in stack.info.items() if k != "log_m"}
    ctx.add_row("linear", train.P, hp.gamma0, pred.test_loss, pred.train_loss, dt)
    write_predictions_csv(ctx.path("predictions.csv"), train, test, {"linear": _split(pred)})


def cmd_oracle(cfg, ctx):
    o = cfg["oracle"]
    train, test = load_data(cfg, ctx)
    hp = hyperparams(cfg["model"])
    seed = ctx.seed("oracle_init")
    if train.patch_layout is not None:
        if hp.depth != 1:
            raise ConfigError("the convolutional network has one hidden layer")
        pl = train.patch_layout
        params = init_conv(pl.patch_count, pl.patch_dim, o["N"], hp.activation, seed)
    else:
        params = init_mlp(train.D, o["N"], hp.depth, hp.activation, seed)
    test_inputs = None if test is None else test.inputs
    dyn = o["dynamics"]
    if dyn == "langevin":
        if np.isinf(hp.beta):
            raise ConfigError("Langevin dynamics need a finite [model] beta")
        eta = 5e-4 if o["eta"] is None else o["eta"]
        config = _config_object(LangevinConfig, "oracle", eta=eta, T=o["T"],
                                thermalize_after=o["thermalize_after"],
                                sample_every=o["sample_every"], seed=ctx.seed("oracle"))
        res, dt = ctx.timed("oracle", train_langevin, params, train, hp, config, test_inputs)
        kernels = res.kernels
        pre = np.concatenate([h.ravel() for h in res.preactivations]) if res.preactivations \
            else np.zeros(0)
    else:
        eta = 1e-3 if o["eta"] is None else o["eta"]
        config = GDConfig(eta=eta, T=o["T"], record_every=o["record_every"])
        res, dt = ctx.timed("oracle", train_gd_weight_decay, params, train, hp, config,
                            test_inputs)
        kernels = [as_array(K) for K in empirical_kernels(res.params, train.inputs, hp.gamma0).phi]
        pre = forward(res.params, train.inputs, hp.gamma0).preacts[0].ravel()
    for l, K in enumerate(kernels):
        write_kernel_csv(ctx.path("kernels", f"oracle_phi{l}.csv"), K)
    if pre.size:
        dens, edges = np.histogram(pre, bins=o["bins"], density=True)
        _write_rows(ctx.path("densities", "oracle_layer1.csv"), ("left", "right", "density"),
                    zip(edges[:-1], edges[1:], dens))
    _write_rows(ctx.path("trajectory.csv"), ("step", "loss"), res.losses)
    save_checkpoint(ctx.path("params.bin"), res.params)
    test_pred = np.zeros(0) if res.test_predictions is None else res.test_predictions
    tl = test_loss(test_pred, test.targets) if test is not None else float("nan")
    ctx.add_row(dyn, train.P, hp.gamma0, tl, test_loss(res.train_predictions, train.targets), dt)
    write_predictions_csv(ctx.path("predictions.csv"), train, test,
                          {dyn: {"train": res.train_predictions, "test": test_pred}})


def cmd_compare(cfg, ctx):
    """Test losses over methods x gamma0 x P.  Lazy baselines are run once per P
    (reported at gamma0 = 0); every cell writes into its own subdirectory."""
    c = cfg["compare"]
    base_hp = hyperparams(cfg["model"])
    table = {}
    index = 0
    for P in c["Ps"]:
        train, test = load_data(cfg, ctx, P=P, index=index)
        lazy = [m for m in c["methods"] if m in ("nngp", "ntk")]
        if lazy:
            cell = f"cells/lazy_P{P}"
            n0 = len(ctx.rows)
            run_lazy_methods(cfg, ctx, train, test, base_hp, lazy, kernel_dir=cell)
            for row in ctx.rows[n0:]:
                table[(P, row[0])] = row[3]
        for g in c["gamma0s"]:
            hp = base_hp.replace(gamma0=float(g))
            for method in ("anbk", "antk"):
                if method not in c["methods"]:
                    continue
                cell = f"cells/{method}_P{P}_g{g:g}"
                n0 = len(ctx.rows)
                if method == "anbk":
                    run_anbk_method(cfg, ctx, train, test, hp, index=index, kernel_dir=cell,
                                    densities=False, trace_path=f"{cell}/trajectory.csv")
                else:
                    run_antk_method(cfg, ctx, train, test, hp, index=index, kernel_dir=cell,
                                    trace_path=f"{cell}/trajectory.csv")
                table[(P, f"{method}_g{g:g}")] = ctx.rows[n0][3]
        index += 1
    columns = sorted({k[1] for k in table}, key=lambda s: (s not in ("nngp", "ntk"), s))
    rows = [[P] + [table.get((P, col), float("nan")) for col in columns] for P in c["Ps"]]
    _write_rows(ctx.path("table.csv"), ["P"] + columns, rows)


def cmd_fixedpoint(cfg, ctx):
    """Single whitened point (y = 1): DMFT error signal and <h^2> against the
    closed-form fixed point, over the (gamma0, lambda) grid."""
    f = cfg["fixedpoint"]
    ds = synth_whitened(1, f["D"], ctx.seed("data"))
    rows = []
    index = 0
    for g in f["gamma0s"]:
        for lam in f["lambdas"]:
            hp = hyperparams(cfg["model"], gamma0=float(g), depth=1,
                             activation=Activation.RELU, lambdas=(float(lam),))
            config = _dmft_config(cfg, ctx, index)
            res, dt = ctx.timed("dmft", solve_dmft_two_layer, ds, None, hp, config)
            h = res.fields.h[0]
            d_th, h2_th = fixed_point_relu_single(float(g), float(lam))
            rows.append((g, lam, res.delta[0], d_th, float(np.mean(h ** 2)), h2_th,
                         float(np.mean(h < -0.01)), res.trajectory.converged_step or -1))
            if config.stop_tol is not None and res.trajectory.converged_step is None:
                ctx.converged = False
            ctx.add_row("dmft_fixedpoint", 1, g, float("nan"), 0.5 * res.delta[0] ** 2, dt)
            index += 1
    _write_rows(ctx.path("fixedpoint.csv"),
                ("gamma0", "lambda", "delta", "delta_theory", "h2", "h2_theory",
                 "negative_fraction", "converged_step"), rows)


COMMANDS = {"anbk": cmd_anbk, "antk": cmd_antk, "linear": cmd_linear, "lazy": cmd_lazy,
            "oracle": cmd_oracle, "compare": cmd_compare, "fixedpoint": cmd_fixedpoint}


# ---------------------------------------------------------------- driver

def _install(staging: Path, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    for item in sorted(staging.iterdir()):
        dest = out / item.name
        if dest.is_dir():
            shutil.rmtree(dest)
        elif dest.exists():
            dest.unlink()
        shutil.move(str(item), str(dest))


def run(subcommand: str, config_path, out_dir, seed: int | None = None) -> int:
    """Run one subcommand; returns the exit code."""
    out = Path(out_dir)
    if subcommand not in COMMANDS:
        print(f"akern: unknown subcommand {subcommand!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg["run"]["seed"] = int(seed)
    except ConfigError as exc:
        print(f"akern: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".akern-", dir=out.parent))
    ctx = RunContext(subcommand, cfg, staging)
    status, message = "ok", None
    try:
        with np.errstate(over="ignore", under="ignore"):
            COMMANDS[subcommand](cfg, ctx)
        if not ctx.converged:
            status = "not_converged"
    except _Failure as exc:
        status = "data_error" if exc.code == EXIT_DATA else "config_error"
        message = str(exc)
    except ConfigError as exc:
        status, message = "config_error", f"config error: {exc}"
    except (SolverDivergence, DmftDivergence, TrainingDivergence, SingularKernelError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        status, message = "diverged", f"solver diverged: {type(exc).__name__}: {exc}"
    except ValueError as exc:
        status, message = "config_error", f"invalid settings: {exc}"
    code = _STATUS_CODES[status]
    if status in ("ok", "not_converged"):
        write_results_csv(ctx.path("results.csv"), ctx.rows)
        write_json(staging / "manifest.json", _manifest(ctx, status, directory=staging))
        _install(staging, out)
        if status == "not_converged":
            print("akern: solver did not converge; results written and flagged", file=sys.stderr)
    else:
        shutil.rmtree(staging, ignore_errors=True)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "manifest.json", _manifest(ctx, status, message))
        print(f"akern: {message}", file=sys.stderr)
    shutil.rmtree(staging, ignore_errors=True)
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="akern", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"akern {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    helps = {"anbk": "solve the Bayesian saddle, predict, write densities",
             "antk": "run the field dynamics and the final-kernel predictor",
             "linear": "exact deep-linear solution and overlap profile",
             "lazy": "NNGP and NTK baselines",
             "oracle": "train a finite-width network (Langevin or GD with weight decay)",
             "compare": "test-loss table over methods x gamma0 x P",
             "fixedpoint": "single-point ReLU fixed-point sweep over gamma0 and lambda"}
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="TOML config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.subcommand, args.config, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
