"""Config-driven command line front end.

One process runs one command against one INI-style config: train a
denoiser, sample from a checkpoint, audit the solver gradients against
finite differences, drive an inverse design, or reproduce the scalar
mixture walkthrough end to end. Every run writes a self-describing
directory: resolved config snapshot, version string, a plain-text log,
and the command's CSV / PGM / checkpoint artifacts. CSV floats are
formatted with 17 significant digits so identical configs and seeds
produce byte-identical files.
"""

import argparse
import configparser
import hashlib
import json
import os
import sys
import time
import traceback

import numpy as np

from . import __version__
from . import autodiff as ad
from . import data as datasets
from . import diffusion as df
from . import nn
from .adjoint import (homogenized_stiffness, hyperelastic_energies,
                      plastic_stress_curve)
from .design import (EnergyCurveDesign, PointTargetDesign, StiffnessDesign,
                     StressCurveDesign, TargetCurve, bfgs_minimize,
                     binary_fraction, energy_target_curve,
                     multistage_optimize, project_np, stiffness_loss)
from .fem import Homogenizer, HyperelasticProblem, PlasticityProblem

COMMANDS = ("train", "sample", "gradcheck", "design", "gmm-demo")


# ------------------------------------------------------------ CSV and PGM

def format_cell(v):
    """One CSV cell; floats at 17 significant digits for reproducibility."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def write_csv(path, header, rows):
    """Write a CSV with a header row and fixed float formatting."""
    with open(path, "w", newline="") as fh:
        fh.write(",".join(str(h) for h in header) + "\n")
        for row in rows:
            fh.write(",".join(format_cell(v) for v in row) + "\n")


def quantize_field(field) -> np.ndarray:
    """Linear [0,1] -> [0,255] mapping with rounding; clips outliers."""
    a = np.asarray(field, dtype=float)
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, field):
    """Write a 2D field in [0,1] as an 8-bit binary PGM (P5), row-major."""
    a = np.asarray(field, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"PGM export needs a 2D field, got shape {a.shape}")
    q = quantize_field(a)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (a.shape[1], a.shape[0]))
        fh.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM back as a uint8 array of shape (h, w)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    toks, i = [], 0
    while len(toks) < 4 and i < len(raw):
        c = raw[i:i + 1]
        if c.isspace():
            i += 1
        elif c == b"#":
            j = raw.find(b"\n", i)
            i = len(raw) if j < 0 else j + 1
        else:
            j = i
            while j < len(raw) and not raw[j:j + 1].isspace():
                j += 1
            toks.append(raw[i:j])
            i = j
    if len(toks) < 4 or toks[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(toks[1]), int(toks[2]), int(toks[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pix = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=i + 1)
    return pix.reshape(h, w).copy()


# ------------------------------------------------------------ config layer

class ConfigError(ValueError):
    """Validation failure carrying every offending key at once."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _floats(text):
    return tuple(float(p) for p in text.split(",") if p.strip() != "")


def _ints(text):
    return tuple(int(p) for p in text.split(",") if p.strip() != "")


def _bool(text):
    states = configparser.ConfigParser.BOOLEAN_STATES
    key = text.strip().lower()
    if key not in states:
        raise ValueError(f"not a boolean: {text!r}")
    return states[key]


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _bool,
    "str": str.strip,
    "floats": _floats,
    "ints": _ints,
}

# (kind, default) or (kind, default, choices). Sentinels: -1 for "derive",
# 0 time_dim for "architecture default", empty tuple/string for "unset".
_SCHEMA = {
    "run": {
        "command": ("str", "", ("",) + COMMANDS),
        "out": ("str", ""),
        "seed": ("int", 0),
        "threads": ("int", 1),
    },
    "seeds": {
        "data": ("int", -1),
        "train": ("int", -1),
        "sample": ("int", -1),
        "design": ("int", -1),
    },
    "data": {
        "kind": ("str", "gmm", ("gmm", "toy", "idx")),
        "n": ("int", 20000),
        "hw": ("int", 16),
        "path": ("str", ""),
        "noise_std": ("float", 0.01),
        "blur_std": ("float", 1.2),
        "weights": ("floats", (0.5, 0.5)),
        "means": ("floats", (-2.5, 2.5)),
        "stds": ("floats", (0.5, 0.5)),
    },
    "model": {
        "arch": ("str", "mlp", ("mlp", "unet")),
        "in_dim": ("int", 1),
        "hidden": ("int", 64),
        "time_dim": ("int", 0),
        "image_hw": ("int", 16),
        "base": ("int", 8),
        "mults": ("ints", (1, 2, 4)),
        "blocks": ("int", 1),
        "attn_levels": ("ints", (1,)),
        "heads": ("int", 1),
        "groups": ("int", 8),
        "emb_hidden": ("int", 64),
    },
    "schedule": {
        "T": ("int", 1000),
        "beta_start": ("float", 1e-4),
        "beta_end": ("float", 0.02),
    },
    "train": {
        "epochs": ("int", 100),
        "batch": ("int", 128),
        "lr": ("float", 1e-4),
        "optimizer": ("str", "adam", ("adam", "adamw")),
        "weight_decay": ("float", 1e-4),
        "lr_schedule": ("str", "constant", ("constant", "warmup-cosine")),
        "warmup_frac": ("float", 0.05),
    },
    "sampler": {
        "checkpoint": ("str", ""),
        "ddim_steps": ("int", 50),
        "eta": ("float", 0.0),
        "count": ("int", 16),
    },
    "physics": {
        "problem": ("str", "homogenization",
                    ("homogenization", "hyperelastic", "plasticity")),
        "nx": ("int", 16),
        "ny": ("int", 16),
        "nu": ("float", 0.3),
        "kinematics": ("str", "default",
                       ("default", "plane_stress", "plane_strain")),
        "e_soft": ("float", -1.0),    # negative: per-physics default
        "e_stiff": ("float", -1.0),
        "sig0_soft": ("float", 30.0),
        "sig0_stiff": ("float", 300.0),
        "loads": ("floats", ()),
    },
    "target": {
        "c_matrix": ("floats", (50.0, 12.0, 0.0,
                                12.0, 60.0, -3.0,
                                0.0, -3.0, 15.0)),
        "alpha": ("float", 0.0),
        "young": ("float", 4.8e4),
        "eps_y": ("float", 2.7e-3),
        "sig_inf": ("float", 220.0),
        "amps": ("floats", (4.0, 1.0, 85.4)),
        "rates": ("floats", (1000.0, 88.0, 88.0)),
        "normalize": ("bool", False),
    },
    "stages": {
        "gammas": ("floats", ()),
        "iters": ("int", 100),
        "loss_tol": ("float", -1.0),
        "grad_tol": ("float", -1.0),
        "memory": ("int", 0),
        "tau": ("float", 1e-3),
    },
    "gradcheck": {
        "hom_n": ("int", 8),
        "hyper_n": ("int", 4),
        "plastic_n": ("int", 4),
        "coords": ("int", 5),
        "step": ("float", 1e-6),
        "plastic_step": ("float", 1e-7),
        "tol": ("float", 1e-4),
    },
    "gmm": {
        "target": ("float", -2.5),
        "max_iter": ("int", 20),
        "loss_tol": ("float", 1e-3),
    },
}


def default_config() -> dict:
    return {sec: {k: spec[1] for k, spec in keys.items()}
            for sec, keys in _SCHEMA.items()}


def load_config(path) -> dict:
    """Parse and validate an INI config against the full schema.

    Unknown sections, unknown keys, and unparseable values are all
    collected before raising, so one round trip surfaces every problem.
    """
    cp = configparser.ConfigParser(interpolation=None,
                                   inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh, source=str(path))
    except OSError as e:
        raise ConfigError([f"cannot read config: {e}"])
    except configparser.Error as e:
        raise ConfigError([f"malformed config: {e}"])

    problems = []
    cfg = default_config()
    for sec in cp.sections():
        if sec not in _SCHEMA:
            problems.append(f"unknown section [{sec}]")
            continue
        for key, raw in cp.items(sec):
            spec = _SCHEMA[sec].get(key)
            if spec is None:
                problems.append(f"unknown key {sec}.{key}")
                continue
            kind = spec[0]
            try:
                val = _PARSERS[kind](raw)
            except ValueError:
                problems.append(f"{sec}.{key}: cannot parse {raw!r} as {kind}")
                continue
            if len(spec) > 2 and val not in spec[2]:
                named = ", ".join(str(c) for c in spec[2] if c != "")
                problems.append(f"{sec}.{key}: must be one of {named}")
                continue
            cfg[sec][key] = val
    if problems:
        raise ConfigError(problems)
    return cfg


def _snapshot_cell(v):
    if isinstance(v, tuple):
        return ",".join(format_cell(x) for x in v)
    return format_cell(v)


def write_snapshot(path, cfg):
    """Dump the fully resolved config so the run directory is standalone."""
    with open(path, "w") as fh:
        for sec in _SCHEMA:
            fh.write(f"[{sec}]\n")
            for key in _SCHEMA[sec]:
                fh.write(f"{key} = {_snapshot_cell(cfg[sec][key])}\n")
            fh.write("\n")


def version_string() -> str:
    """Package version plus a content hash of the installed sources."""
    root = os.path.dirname(os.path.abspath(__file__))
    h = hashlib.sha256()
    for dirpath, _dirs, filenames in sorted(os.walk(root)):
        for name in sorted(filenames):
            if name.endswith(".py"):
                with open(os.path.join(dirpath, name), "rb") as fh:
                    h.update(name.encode())
                    h.update(fh.read())
    return f"diffdesign {__version__}+g{h.hexdigest()[:12]}"


def _seed(cfg, purpose) -> int:
    offsets = {"data": 1, "train": 2, "sample": 3, "design": 4}
    s = cfg["seeds"][purpose]
    return cfg["run"]["seed"] + offsets[purpose] if s < 0 else s


_THREAD_LIMITER = None


def apply_threads(n) -> int:
    """Cap BLAS/OpenMP pools; best effort once numpy is already loaded."""
    global _THREAD_LIMITER
    n = max(1, int(n))
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits
        _THREAD_LIMITER = threadpool_limits(limits=n)
    except ImportError:
        pass
    return n


class RunLog:
    """Line log mirrored to stdout and <run dir>/log.txt."""

    def __init__(self, path):
        self.fh = open(path, "w")

    def line(self, msg):
        print(msg)
        self.fh.write(msg + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


# ----------------------------------------------------------- model builders

def build_arch(cfg):
    m = cfg["model"]
    if m["arch"] == "mlp":
        return nn.MlpArch(in_dim=m["in_dim"], hidden=m["hidden"],
                          time_dim=m["time_dim"] or 64)
    return nn.UnetArch(image_hw=m["image_hw"], in_channels=1, base=m["base"],
                       mults=tuple(m["mults"]), blocks=m["blocks"],
                       attn_levels=tuple(m["attn_levels"]), heads=m["heads"],
                       groups=m["groups"], time_dim=m["time_dim"] or 32,
                       emb_hidden=m["emb_hidden"])


def _latent_shape(arch, count):
    if arch.kind == "mlp":
        return (count, arch.in_dim)
    return (count, arch.in_channels, arch.image_hw, arch.image_hw)


def build_dataset(cfg):
    """Training array shaped for the configured architecture."""
    d = cfg["data"]
    m = cfg["model"]
    rng = np.random.default_rng(_seed(cfg, "data"))
    problems = []
    if d["kind"] == "gmm":
        if m["arch"] != "mlp" or m["in_dim"] != 1:
            problems.append("data.kind gmm needs model.arch = mlp with "
                            "model.in_dim = 1")
        else:
            spec = datasets.GmmSpec(d["weights"], d["means"], d["stds"])
            return datasets.gmm_sample(spec, d["n"], rng).reshape(-1, 1)
    else:
        if d["kind"] == "toy":
            images = datasets.synth_toy_dataset(d["n"], d["hw"], rng)
        else:
            if not d["path"]:
                raise ConfigError(["data.path: required for data.kind = idx"])
            images = datasets.load_idx_images(d["path"])
            if images.shape[1] != d["hw"]:
                images = datasets.bilinear_resize(images, (d["hw"], d["hw"]))
        images = datasets.grayscale_preprocess(
            images, noise_std=d["noise_std"], blur_std=d["blur_std"], rng=rng)
        hw = images.shape[-1]
        if m["arch"] == "mlp":
            if m["in_dim"] != hw * hw:
                problems.append(f"model.in_dim must equal data.hw^2 = "
                                f"{hw * hw} for image data")
            else:
                return images.reshape(len(images), -1)
        else:
            if m["image_hw"] != hw:
                problems.append(f"model.image_hw must equal data.hw = {hw}")
            else:
                return images[:, None, :, :]
    raise ConfigError(problems)


def build_schedule(cfg):
    s = cfg["schedule"]
    return df.linear_schedule(s["T"], s["beta_start"], s["beta_end"])


def _load_checkpoint(cfg):
    path = cfg["sampler"]["checkpoint"]
    if not path:
        raise ConfigError(["sampler.checkpoint: required for this command"])
    if not os.path.exists(path):
        raise ConfigError([f"sampler.checkpoint: no such file: {path}"])
    return nn.load_checkpoint(path)


def _train_model(cfg, arch, dataset, schedule, outdir, log):
    t = cfg["train"]
    tc = df.TrainConfig(epochs=t["epochs"], batch=t["batch"], lr=t["lr"],
                        optimizer=t["optimizer"],
                        weight_decay=t["weight_decay"],
                        lr_schedule=t["lr_schedule"],
                        warmup_frac=t["warmup_frac"],
                        seed=_seed(cfg, "train"))
    params = nn.init_params(arch, np.random.default_rng(tc.seed))
    rows = []

    def on_epoch(epoch, loss):
        rows.append((epoch, loss))
        if epoch % max(1, t["epochs"] // 10) == 0 or epoch == t["epochs"] - 1:
            log.line(f"epoch {epoch:4d}  loss {loss:.6f}")

    result = df.train_denoiser(
        lambda pv, xv, tt: nn.apply_denoiser(arch, pv, xv, tt),
        params, schedule, dataset, tc, callback=on_epoch)
    write_csv(os.path.join(outdir, "training_loss.csv"),
              ("epoch", "loss"), rows)
    ckpt = os.path.join(outdir, "model.ckpt")
    nn.save_checkpoint(ckpt, arch, result.params)
    log.line(f"checkpoint written: {ckpt}")
    return result


# --------------------------------------------------------------- commands

def _cmd_train(cfg, outdir, log):
    dataset = build_dataset(cfg)
    log.line(f"dataset: {len(dataset)} samples, shape {dataset.shape[1:]}")
    arch = build_arch(cfg)
    schedule = build_schedule(cfg)
    result = _train_model(cfg, arch, dataset, schedule, outdir, log)
    log.line(f"final training loss: {result.epoch_losses[-1]:.6f}")
    return 0


def _cmd_sample(cfg, outdir, log):
    arch, params = _load_checkpoint(cfg)
    schedule = build_schedule(cfg)
    sm = cfg["sampler"]
    plan = df.ddim_plan(schedule.T, sm["ddim_steps"])
    rng = np.random.default_rng(_seed(cfg, "sample"))
    x_T = rng.standard_normal(_latent_shape(arch, sm["count"]))
    eps_fn = nn.make_eps_fn(arch, params)
    x0, traj = df.ddim_sample(eps_fn, schedule, x_T, plan, eta=sm["eta"],
                              rng=rng, record_traj=True)

    dim = x0[0].size
    cols = [f"x{i}" for i in range(dim)]
    write_csv(os.path.join(outdir, "samples.csv"), ["index"] + cols,
              [(i, *x0[i].ravel()) for i in range(len(x0))])
    write_csv(os.path.join(outdir, "trajectory.csv"), ["step"] + cols,
              [(k, *state[0].ravel()) for k, state in enumerate(traj)])
    if arch.kind == "unet":
        for i in range(len(x0)):
            img = np.clip((x0[i, 0] + 1.0) / 2.0, 0.0, 1.0)
            write_pgm(os.path.join(outdir, f"sample_{i:03d}.pgm"), img)
    log.line(f"wrote {len(x0)} samples over {len(plan)} denoising steps")
    return 0


def _gradcheck_rows(cfg, rng):
    g = cfg["gradcheck"]
    nu = cfg["physics"]["nu"]
    rows = []

    n = g["hom_n"]
    hom = Homogenizer(n, n, nu)
    C_t = np.asarray(cfg["target"]["c_matrix"], dtype=float).reshape(3, 3)
    x0 = rng.normal(size=n * n) * 0.3

    def f_hom(v):
        return stiffness_loss(homogenized_stiffness(hom, ad.exp(v) * 30.0),
                              C_t)

    err = ad.grad_check(f_hom, x0, step=g["step"], coords=g["coords"],
                        rng=rng)
    rows.append(("homogenization", n, err, g["step"]))

    n = g["hyper_n"]
    prob = HyperelasticProblem(n, n, nu)
    loads = np.linspace(0.1, 0.5, 5)
    target = energy_target_curve(loads, 0.5)
    x0 = rng.normal(size=n * n) * 0.3

    def f_hyp(v):
        W = hyperelastic_energies(prob, ad.exp(v) * 10.0, loads)
        d = W - ad.constant(target)
        return ad.vmean(d * d)

    err = ad.grad_check(f_hyp, x0, step=g["step"], coords=g["coords"],
                        rng=rng)
    rows.append(("hyperelastic", n, err, g["step"]))

    n = g["plastic_n"]
    prob = PlasticityProblem(n, n, nu)
    loads = np.linspace(5e-4, 1e-2, 12)
    xE = rng.normal(size=n * n) * 0.2
    xs = rng.normal(size=n * n) * 0.2
    E0, s00 = np.exp(xE) * 1e4, np.exp(xs) * 100.0
    hist = prob.solve(E0, s00, loads)
    smooth = prob.kink_free_elements(hist, s00)
    if smooth.size == 0:
        # yield-surface crossings everywhere; audit the least-kinked ones
        smooth = np.arange(n * n)
    coords = rng.choice(smooth, size=min(g["coords"], smooth.size),
                        replace=False)
    target = hist.sbar * 1.05

    def f_pE(v):
        sb = plastic_stress_curve(prob, ad.exp(v) * 1e4,
                                  ad.constant(s00), loads)
        d = sb - ad.constant(target)
        return ad.vmean(d * d)

    def f_ps(v):
        sb = plastic_stress_curve(prob, ad.constant(E0),
                                  ad.exp(v) * 100.0, loads)
        d = sb - ad.constant(target)
        return ad.vmean(d * d)

    err = ad.grad_check(f_pE, xE, step=g["plastic_step"], coords=coords)
    rows.append(("plasticity-modulus", n, err, g["plastic_step"]))
    err = ad.grad_check(f_ps, xs, step=g["plastic_step"], coords=coords)
    rows.append(("plasticity-yield", n, err, g["plastic_step"]))
    return rows


def _cmd_gradcheck(cfg, outdir, log):
    g = cfg["gradcheck"]
    rng = np.random.default_rng(_seed(cfg, "design"))
    rows = _gradcheck_rows(cfg, rng)
    table = []
    failures = []
    log.line(f"{'check':<22}{'size':>6}{'max rel err':>16}{'tol':>10}  status")
    for name, size, err, step in rows:
        ok = err < g["tol"]
        status = "pass" if ok else "FAIL"
        if not ok:
            failures.append(f"{name}: {err:.3e} >= {g['tol']:.1e}")
        table.append((name, size, g["coords"], step, err, g["tol"], status))
        log.line(f"{name:<22}{size:>4}x{size:<2}{err:>15.3e}"
                 f"{g['tol']:>10.1e}  {status}")
    write_csv(os.path.join(outdir, "gradcheck.csv"),
              ("check", "size", "coords", "step", "max_rel_err", "tol",
               "status"), table)
    if failures:
        raise RuntimeError("gradient audit failed: " + "; ".join(failures))
    return 0


_DEFAULT_GAMMAS = {
    "homogenization": (5.0, 10.0, 20.0, 80.0),
    "hyperelastic": (2.0, 5.0, 10.0, 20.0, 100.0),
    "plasticity": (5.0, 10.0, 20.0, 80.0),
}


def _resolved_props(cfg):
    """Phase endpoint properties; negatives fall back per physics."""
    ph = cfg["physics"]
    plastic = ph["problem"] == "plasticity"
    e_soft = ph["e_soft"] if ph["e_soft"] > 0 else (1e3 if plastic else 1.0)
    e_stiff = (ph["e_stiff"] if ph["e_stiff"] > 0
               else (1e5 if plastic else 100.0))
    return e_soft, e_stiff, ph["sig0_soft"], ph["sig0_stiff"]


def _design_problem(cfg, generator):
    """Wire the configured physics, loads, and target into a design."""
    ph = cfg["physics"]
    tg = cfg["target"]
    kind = ph["problem"]
    nx, ny, nu = ph["nx"], ph["ny"], ph["nu"]
    loads = np.asarray(ph["loads"], dtype=float)
    kin = ph["kinematics"]
    e_soft, e_stiff, s_soft, s_stiff = _resolved_props(cfg)

    if kind == "homogenization":
        model = "plane_stress" if kin == "default" else kin
        hom = Homogenizer(nx, ny, nu, model=model)
        C_t = np.asarray(tg["c_matrix"], dtype=float).reshape(3, 3)
        return StiffnessDesign(generator, hom, C_t, e_soft, e_stiff)
    if kind == "hyperelastic":
        if kin != "default":
            raise ConfigError(["physics.kinematics: the finite-strain "
                               "problem always uses the plane-strain "
                               "embedding; leave it at 'default'"])
        if loads.size == 0:
            loads = np.linspace(0.1, 0.5, 5)
        prob = HyperelasticProblem(nx, ny, nu)
        target = energy_target_curve(loads, tg["alpha"])
        return EnergyCurveDesign(generator, prob, loads, target,
                                 e_soft, e_stiff)
    model = "plane_stress" if kin == "default" else kin
    if loads.size == 0:
        loads = np.linspace(5e-4, 1e-2, 20)
    prob = PlasticityProblem(nx, ny, nu, model=model)
    curve = TargetCurve(tg["young"], tg["eps_y"], tg["sig_inf"],
                        tuple(tg["amps"]), tuple(tg["rates"]),
                        normalize=tg["normalize"])
    return StressCurveDesign(generator, prob, loads, curve,
                             e_soft, e_stiff, s_soft, s_stiff)


def _write_design_bundle(outdir, cfg, design, w, stages, wall, log):
    ph = cfg["physics"]
    st = cfg["stages"]
    gamma_last = stages[-1].gamma
    kind = ph["problem"]
    e_soft, e_stiff, s_soft, s_stiff = _resolved_props(cfg)

    if kind == "homogenization":
        mesh = design.hom.mesh
    else:
        mesh = design.problem.mesh
    img = design.generator(ad.constant(w)).data.reshape(-1)
    phase = project_np(img, gamma_last)
    B = binary_fraction(phase, st["tau"])
    write_pgm(os.path.join(outdir, "final_phase.pgm"),
              phase.reshape(ph["ny"], ph["nx"]))

    ph_e = phase[mesh.pixel_of_elem]
    E = e_soft + (e_stiff - e_soft) * ph_e
    if kind == "plasticity":
        s0 = s_soft + (s_stiff - s_soft) * ph_e
        write_csv(os.path.join(outdir, "final_fields.csv"),
                  ("element", "E", "sig0"),
                  [(e, E[e], s0[e]) for e in range(E.size)])
    else:
        write_csv(os.path.join(outdir, "final_fields.csv"),
                  ("element", "E"),
                  [(e, E[e]) for e in range(E.size)])

    final = stages[-1].result
    lines = ["command: design",
             f"physics: {kind}",
             f"final loss: {format_cell(final.loss)}",
             f"binary fraction (tau={st['tau']:g}): {format_cell(B)}",
             f"wall time [s]: {wall:.3f}"]
    for i, tr in enumerate(stages):
        r = tr.result
        lines.append(f"stage {i + 1}: gamma={tr.gamma:g} iters={r.iters} "
                     f"loss={format_cell(r.loss)} "
                     f"grad={format_cell(r.grad_norm)} status={r.status} "
                     f"latent_ms={tr.latent_ms:.6g} "
                     f"latent_kurtosis={tr.latent_kurtosis:.6g}")
    with open(os.path.join(outdir, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for line in lines:
        log.line(line)
    return B


def _cmd_design(cfg, outdir, log):
    arch, params = _load_checkpoint(cfg)
    schedule = build_schedule(cfg)
    sm = cfg["sampler"]
    ph = cfg["physics"]
    if sm["eta"] != 0.0:
        raise ConfigError(["sampler.eta: design needs the deterministic "
                           "sampler (eta = 0)"])
    lat = _latent_shape(arch, 1)
    if int(np.prod(lat)) != ph["nx"] * ph["ny"]:
        raise ConfigError([f"model output size {int(np.prod(lat))} does not "
                           f"tile the {ph['nx']}x{ph['ny']} mesh"])
    plan = df.ddim_plan(schedule.T, sm["ddim_steps"])
    eps_tape = nn.make_eps_tape_fn(arch, params)

    def generator(wv):
        return df.ddim_generate(eps_tape, schedule, wv, plan)

    design = _design_problem(cfg, generator)
    st = cfg["stages"]
    gammas = st["gammas"] or _DEFAULT_GAMMAS[ph["problem"]]
    loss_tol = st["loss_tol"] if st["loss_tol"] > 0 else None
    grad_tol = st["grad_tol"] if st["grad_tol"] > 0 else None
    memory = st["memory"] or None

    w0 = np.random.default_rng(_seed(cfg, "design")).standard_normal(lat)
    stage_logs = []
    current = []

    def objective_of(gamma):
        rows = []
        stage_logs.append(rows)
        current.clear()
        current.append(rows)
        log.line(f"stage gamma={gamma:g}")
        return design.objective(gamma)

    def on_step(k, x, f, grad):
        current[0].append((k, f, float(np.max(np.abs(grad)))))

    t0 = time.perf_counter()
    w, stages = multistage_optimize(objective_of, w0, gammas=gammas,
                                    iters_per_stage=st["iters"],
                                    loss_tol=loss_tol, grad_tol=grad_tol,
                                    memory=memory, callback=on_step)
    wall = time.perf_counter() - t0

    for i, (tr, rows) in enumerate(zip(stages, stage_logs)):
        first = [(0, tr.result.losses[0], float("nan"))]
        write_csv(os.path.join(outdir, f"stage_{i + 1:02d}.csv"),
                  ("iteration", "loss", "grad_norm"), first + rows)
    _write_design_bundle(outdir, cfg, design, w.reshape(lat), stages, wall,
                         log)
    return 0


def _cmd_gmm_demo(cfg, outdir, log):
    if cfg["data"]["kind"] != "gmm":
        raise ConfigError(["data.kind: gmm-demo requires 'gmm'"])
    if cfg["model"]["arch"] != "mlp" or cfg["model"]["in_dim"] != 1:
        raise ConfigError(["model: gmm-demo runs the scalar mlp denoiser "
                           "(arch = mlp, in_dim = 1)"])
    if cfg["sampler"]["eta"] != 0.0:
        raise ConfigError(["sampler.eta: gmm-demo needs the deterministic "
                           "sampler (eta = 0)"])

    dataset = build_dataset(cfg)
    log.line(f"dataset: {len(dataset)} mixture samples")
    arch = build_arch(cfg)
    schedule = build_schedule(cfg)
    result = _train_model(cfg, arch, dataset, schedule, outdir, log)

    gm = cfg["gmm"]
    plan = df.ddim_plan(schedule.T, cfg["sampler"]["ddim_steps"])
    eps_tape = nn.make_eps_tape_fn(arch, result.params)

    def generator(wv):
        return df.ddim_generate(eps_tape, schedule, wv, plan)

    design = PointTargetDesign(generator, gm["target"])
    # start from a latent that maps AWAY from the target (near the opposite
    # mode), so the run demonstrates steering rather than a lucky draw
    eps_fn = nn.make_eps_fn(arch, result.params)
    cand = np.random.default_rng(_seed(cfg, "design")).standard_normal((64, 1))
    x0c = df.ddim_sample(eps_fn, schedule, cand, plan)[:, 0]
    w0 = cand[np.argmin(np.abs(x0c + gm["target"]))].reshape(1, 1)
    start = float(df.ddim_sample(eps_fn, schedule, w0, plan)[0, 0])
    log.line(f"start latent maps to {start:+.4f}, target {gm['target']:+.4f}")
    rows = []

    def on_step(k, x, f, grad):
        rows.append((k, f, float(np.max(np.abs(grad)))))

    t0 = time.perf_counter()
    res = bfgs_minimize(design.objective(), w0, max_iter=gm["max_iter"],
                        loss_tol=gm["loss_tol"], callback=on_step)
    wall = time.perf_counter() - t0
    write_csv(os.path.join(outdir, "design_loss.csv"),
              ("iteration", "loss", "grad_norm"),
              [(0, res.losses[0], float("nan"))] + rows)

    x0, traj = df.ddim_sample(eps_fn, schedule, res.x.reshape(1, 1), plan,
                              record_traj=True)
    write_csv(os.path.join(outdir, "trajectory.csv"), ("step", "x0"),
              [(k, float(state[0, 0])) for k, state in enumerate(traj)])

    lines = ["command: gmm-demo",
             f"target: {format_cell(gm['target'])}",
             f"start value: {format_cell(start)}",
             f"final loss: {format_cell(res.loss)}",
             f"reached value: {format_cell(float(x0[0, 0]))}",
             f"iterations: {res.iters}",
             f"status: {res.status}",
             f"wall time [s]: {wall:.3f}"]
    with open(os.path.join(outdir, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for line in lines:
        log.line(line)
    return 0


_HANDLERS = {
    "train": _cmd_train,
    "sample": _cmd_sample,
    "gradcheck": _cmd_gradcheck,
    "design": _cmd_design,
    "gmm-demo": _cmd_gmm_demo,
}


# ------------------------------------------------------------------ driver

def _emit_error(outdir, kind, message, problems):
    payload = {"status": "error", "kind": kind, "message": message,
               "problems": problems}
    text = json.dumps(payload, indent=2)
    print(text, file=sys.stderr)
    if outdir and os.path.isdir(outdir):
        with open(os.path.join(outdir, "error.json"), "w") as fh:
            fh.write(text + "\n")


def run(config_path, command=None, out=None, seed=None, threads=None) -> int:
    """Execute one command against one config; returns the exit code.

    Overrides mirror the command line flags. Exit codes: 0 success,
    1 execution failure, 2 config problem. Failures leave a JSON error
    summary on stderr (and error.json in the run directory if it exists).
    """
    outdir = ""
    try:
        cfg = load_config(config_path)
    except ConfigError as e:
        _emit_error("", "config", "invalid config", e.problems)
        return 2

    if command is not None:
        cfg["run"]["command"] = command
    if out is not None:
        cfg["run"]["out"] = out
    if seed is not None:
        cfg["run"]["seed"] = int(seed)
    if threads is not None:
        cfg["run"]["threads"] = int(threads)

    command = cfg["run"]["command"]
    if command not in _HANDLERS:
        _emit_error("", "config",
                    "invalid config", ["run.command: required (one of "
                                       + ", ".join(COMMANDS) + ")"])
        return 2

    apply_threads(cfg["run"]["threads"])
    outdir = cfg["run"]["out"] or os.path.join("runs", command)
    os.makedirs(outdir, exist_ok=True)
    write_snapshot(os.path.join(outdir, "config.ini"), cfg)
    with open(os.path.join(outdir, "version.txt"), "w") as fh:
        fh.write(version_string() + "\n")

    log = RunLog(os.path.join(outdir, "log.txt"))
    try:
        log.line(f"{version_string()}  command={command}")
        return _HANDLERS[command](cfg, outdir, log)
    except ConfigError as e:
        log.line("config error: " + "; ".join(e.problems))
        _emit_error(outdir, "config", "invalid config", e.problems)
        return 2
    except Exception as e:
        log.line(traceback.format_exc())
        _emit_error(outdir, "runtime", f"{type(e).__name__}: {e}", [])
        return 1
    finally:
        log.close()


def main(argv=None) -> int:
    p = argparse.ArgumentParser(
        prog="diffdesign",
        description="Train diffusion models, couple them to mechanics "
                    "solvers, and optimize the sampler's noise input.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="INI config file")
    p.add_argument("--out", help="run directory (overrides run.out)")
    p.add_argument("--seed", type=int, help="base seed (overrides run.seed)")
    p.add_argument("--threads", type=int,
                   help="BLAS thread cap (overrides run.threads)")
    args = p.parse_args(argv)
    return run(args.config, command=args.command, out=args.out,
               seed=args.seed, threads=args.threads)


if __name__ == "__main__":
    sys.exit(main())
