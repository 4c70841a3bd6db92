"""Experiment plumbing shared by the CLI, the demos and the acceptance suite.

A *problem* bundles an NSSM with its loss and window builder, so the
training, adaptation and evaluation helpers below work the same way for
input-output (Case I) and state-space (Case II) models.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import ekf, meta, metrics, nssm, systems
from .constraints import ConicConstraint
from .layers import WeightSet

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "metassm.dataset/1"

DATA_DEFAULTS = {
    "boucwen": {"n_sources": 40, "n_targets": 1, "T": 2000, "amplitude": 120.0, "frequency": 1.0,
                "target_amplitude": 120.0, "f_min": 0.5, "f_max": 5.0, "n_lines": 8, "noise": True},
    "vdp": {"n_sources": 200, "n_targets": 1, "horizon_mode": "fixed", "T_fixed": 20.0, "T_low": 10.0,
            "T_high": 40.0, "target_T": 3400, "target_theta": systems.VDP_TARGET_THETA},
    "localization": {"n_sources": 80, "n_targets": 20, "T": 400, "measurement_noise": 1e-4},
    "synthetic-cone": {"n_sources": 20, "n_targets": 5, "T": 200, "angle": 0.8, "rotation": 0.3,
                       "measurement_noise": 1e-4},
}

MODEL_DEFAULTS = {
    "boucwen": {"kind": "case1", "H": 20, "H_p": 5, "n_psi": 8, "encoder_hidden": [32, 32],
                "transition_hidden": [32], "decoder_hidden": [32], "activation": "swish", "residual": True,
                "window_stride": 4},
    "vdp": {"kind": "case1", "H": 10, "H_p": 5, "n_psi": 8, "encoder_hidden": [32, 32],
            "transition_hidden": [32], "decoder_hidden": [32], "activation": "swish", "residual": True,
            "window_stride": 2},
    "localization": {"kind": "case2", "n_psi": 16, "encoder_hidden": [32, 32], "transition_hidden": [32],
                     "decoder_x_hidden": [32], "decoder_y_hidden": [32], "activation": "swish",
                     "residual": True, "output": "curlfree", "output_path": "measurement", "coords": [0, 1],
                     "n_steps": 5, "window_stride": 1},
    "synthetic-cone": {"kind": "case2", "n_psi": 8, "encoder_hidden": [16], "transition_hidden": [16],
                       "decoder_x_hidden": [16], "decoder_y_hidden": [16], "activation": "swish",
                       "residual": False, "output": "dense", "output_path": "latent", "n_steps": 3,
                       "window_stride": 1},
}

META_DEFAULTS = {"algorithm": "maml", "beta_in": 0.01, "beta_out": 0.003, "M": 10, "B": 4, "epochs": 40,
                 "val_fraction": 0.2, "optimizer": "adam", "clip_norm": 10.0, "context_size": 0.2,
                 "target_size": 0.4}

BASELINE_DEFAULTS = {"epochs": 60, "lr": 0.003, "target_only_factor": 10}

EKF_DEFAULTS = {"Qw": 1e-6, "Qeta": 1e-4, "P0": 1e-2, "project": False}


def section(cfg: dict, name: str) -> dict:
    """Config section merged over the benchmark defaults."""
    defaults = {"data": DATA_DEFAULTS, "model": MODEL_DEFAULTS}.get(name)
    base = dict(defaults[cfg["benchmark"]]) if defaults else {}
    if name == "meta":
        base = dict(META_DEFAULTS)
    elif name == "baselines":
        base = dict(BASELINE_DEFAULTS)
    elif name == "ekf":
        base = dict(EKF_DEFAULTS)
    base.update(cfg.get(name) or {})
    return base


# ----------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    benchmark: str
    sources: list
    targets: list
    seed: int = 0
    info: dict = field(default_factory=dict)


def cone_family(N: int, seed: int, angle: float, rotation: float, T: int, measurement_noise: float = 1e-4,
                prefix: str = "cone"):
    """Linear systems sharing one invariant cone, with random ``A``, ``B`` and ``C``."""
    _, R = _cone_rays(angle, rotation)
    out = []
    for i in range(N):
        s = systems.ConeLinearSystem.random(seed * 1000 + i, angle=angle)
        s = systems.ConeLinearSystem(s.A, s.B, R, s.C)
        out.append(s.simulate(T, seed * 1000 + i, measurement_noise, name=f"{prefix}_{i:03d}"))
    return out


def _cone_rays(angle, rotation):
    R = np.column_stack([[math.cos(rotation), math.sin(rotation)],
                         [math.cos(rotation + angle), math.sin(rotation + angle)]])
    return -np.linalg.inv(R), R


def cone_constraint(cfg: dict) -> ConicConstraint:
    d = section(cfg, "data")
    G, R = _cone_rays(d["angle"], d["rotation"])
    return ConicConstraint(G, R)


def _boucwen_source(args):
    p, d, seed, i = args
    exc = systems.sine_excitation(d["amplitude"], d["frequency"])
    return systems.simulate_boucwen(p, exc, int(d["T"]), noise_seed=(seed * 1000 + i) if d["noise"] else None,
                                    name=f"boucwen_{i:03d}")


def _map(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def generate(cfg: dict) -> Dataset:
    """Simulate the source family and target systems of a config."""
    bench, seed = cfg["benchmark"], cfg["seed"]
    d = section(cfg, "data")
    jobs = int(cfg.get("jobs", 1))
    if bench == "boucwen":
        params = [systems.BoucWenParams.from_dict(p)
                  for p in systems.sample_family(systems.BOUCWEN_RANGES, int(d["n_sources"]), seed)]
        sources = _map(_boucwen_source, [(p, d, seed, i) for i, p in enumerate(params)], jobs)
        targets = []
        for j in range(int(d["n_targets"])):
            exc = systems.multisine_excitation(d["target_amplitude"], d["f_min"], d["f_max"], int(d["n_lines"]),
                                               seed=seed * 1000 + 500 + j)
            targets.append(systems.simulate_boucwen(systems.BOUCWEN_TARGET, exc, int(d["T"]),
                                                    noise_seed=(seed * 1000 + 900 + j) if d["noise"] else None,
                                                    name=f"boucwen_target_{j:02d}"))
    elif bench == "vdp":
        sources = systems.vdp_family(int(d["n_sources"]), seed, d["horizon_mode"], d["T_fixed"], d["T_low"],
                                     d["T_high"])
        rng = np.random.default_rng(seed + 7)
        targets = []
        for j in range(int(d["n_targets"])):
            x0 = systems.VDP_TARGET_X0 if j == 0 else rng.uniform(-1.0, 1.0, 2)
            targets.append(systems.simulate_vdp(float(d["target_theta"]), x0, int(d["target_T"]),
                                                name=f"vdp_target_{j:02d}"))
    elif bench == "localization":
        n_s, n_t = int(d["n_sources"]), int(d["n_targets"])
        fam = systems.vehicle_family(n_s + n_t, seed, T=int(d["T"]), measurement_noise=d["measurement_noise"])
        sources, targets = fam[:n_s], fam[n_s:]
        for j, t in enumerate(targets):
            t.name = f"vehicle_target_{j:02d}"
    elif bench == "synthetic-cone":
        sources = cone_family(int(d["n_sources"]), seed, d["angle"], d["rotation"], int(d["T"]),
                              d["measurement_noise"])
        targets = cone_family(int(d["n_targets"]), seed + 1, d["angle"], d["rotation"], int(d["T"]),
                              d["measurement_noise"], prefix="cone_target")
    else:
        raise ValueError(f"unknown benchmark {bench!r}")
    return Dataset(bench, list(sources), list(targets), seed, {"data": d})


def write_dataset(ds: Dataset, out_dir) -> Path:
    """One CSV + JSON pair per trajectory and a ``manifest.json`` listing them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = {"sources": [], "targets": []}
    for kind, trajs in (("sources", ds.sources), ("targets", ds.targets)):
        for i, tr in enumerate(trajs):
            name = tr.name or f"{kind[:-1]}_{i:03d}"
            tr.save(out / kind / name)
            entries[kind].append({"file": f"{kind}/{name}.csv", "seeds": tr.seeds, "n": len(tr)})
    manifest = {"format": MANIFEST_FORMAT, "benchmark": ds.benchmark, "seed": ds.seed,
                "settings": systems._jsonable(ds.info.get("data", {})), **entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest {path} not found; run datagen first")
    m = json.loads(path.read_text())
    if m.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a dataset manifest")
    root = path.parent
    load = lambda items: [systems.Trajectory.load(root / e["file"]) for e in items]
    return Dataset(m["benchmark"], load(m["sources"]), load(m["targets"]), m.get("seed", 0),
                   {"data": m.get("settings", {})})


# ----------------------------------------------------------------------------
# problems


@dataclass
class Problem:
    """A model plus the pieces the training loops need."""

    model: object
    stride: int = 1

    @property
    def case(self):
        return 1 if isinstance(self.model, nssm.NssmCase1) else 2

    @property
    def H(self):
        return self.model.H if self.case == 1 else 1

    @property
    def H_p(self):
        return self.model.H_p if self.case == 1 else self.model.n_steps

    def loss(self, ws, batch):
        if self.case == 1:
            return nssm.loss_uy(self.model, ws, batch)
        return nssm.loss_uxy(self.model, ws, batch)

    def windows(self, traj, start=0, stop=None, stride=None):
        stride = self.stride if stride is None else stride
        if self.case == 1:
            return nssm.windows_case1(self.model, traj, stride=stride, start=start, stop=stop)
        return nssm.windows_case2(self.model, traj, stride=stride, start=start, stop=stop)

    def sources(self, trajs):
        return [meta.SourceSystem(t, self.windows, t.name or f"s{i}") for i, t in enumerate(trajs)]


def build_model(cfg: dict, trajs):
    """NSSM of the configured architecture with a normalizer fitted on ``trajs``."""
    m = section(cfg, "model")
    tup = lambda k: tuple(int(v) for v in m[k])
    tr0 = trajs[0]
    if m["kind"] == "case1":
        model = nssm.NssmCase1(tr0.n_u, tr0.n_y, int(m["H"]), int(m["H_p"]), int(m["n_psi"]),
                               tup("encoder_hidden"), tup("transition_hidden"), tup("decoder_hidden"),
                               m["activation"], bool(m["residual"]))
    else:
        conic = None
        if cfg["benchmark"] == "synthetic-cone":
            conic = cone_constraint(cfg)
        if "G" in m and "R" in m:
            conic = ConicConstraint(m["G"], m["R"])
        model = nssm.NssmCase2(tr0.n_x, tr0.n_u, tr0.n_y, int(m["n_psi"]), tup("encoder_hidden"),
                               tup("transition_hidden"), tup("decoder_x_hidden"), tup("decoder_y_hidden"),
                               m["activation"], bool(m["residual"]), m.get("output", "dense"),
                               m.get("output_path", "latent"), tuple(m.get("coords", (0, 1))), conic,
                               int(m.get("n_steps", 5)))
    return model.fit_normalizer(trajs)


def make_problem(cfg: dict, trajs) -> Problem:
    return Problem(build_model(cfg, trajs), int(section(cfg, "model").get("window_stride", 1)))


def meta_config(cfg: dict, **overrides) -> meta.MetaConfig:
    m = section(cfg, "meta")
    m.update(overrides)
    m.setdefault("seed", cfg.get("seed", 0))
    if m.get("seed") is None:
        m["seed"] = cfg.get("seed", 0)
    keep = set(meta.MetaConfig.__dataclass_fields__)
    return meta.MetaConfig(**{k: v for k, v in m.items() if k in keep})


# ----------------------------------------------------------------------------
# training, adaptation and evaluation


def train_meta(problem: Problem, ws0: WeightSet, sources, mcfg: meta.MetaConfig, out_dir=None,
               validation=None) -> meta.TrainResult:
    """Meta-train and, with ``out_dir``, write ``checkpoint``/``train_log.csv``."""
    log_path = ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        log_path = out_dir / "train_log.csv"
        ckpt = out_dir / "checkpoint"
    save = None
    if ckpt is not None:
        save = lambda epoch, ws: nssm.save_model(ckpt, problem.model, ws)
    return meta.meta_train(ws0, problem.sources(sources), mcfg, problem.loss, problem.H, problem.H_p,
                           log_path=log_path, validation=None if validation is None else problem.sources(validation),
                           on_checkpoint=save)


def train_universal(problem: Problem, ws0: WeightSet, trajs, epochs: int, lr: float, extra=()):
    """Supervised training on whole trajectories (one batch per trajectory)."""
    batches = [problem.windows(t) for t in trajs] + list(extra)
    return meta.fit_supervised(ws0, batches, problem.loss, epochs, lr)


def context_length(traj, fraction) -> int:
    return int(round(float(fraction) * len(traj)))


def adapt(problem: Problem, ws: WeightSet, traj, fraction: float, mcfg: meta.MetaConfig) -> WeightSet:
    """Meta-inference on the first ``fraction`` of ``traj``; no-op for zero data or steps."""
    c = context_length(traj, fraction)
    if c == 0 or mcfg.online_steps == 0:
        return ws
    return meta.meta_infer(ws, problem.windows(traj, 0, c, stride=1), mcfg, problem.loss)


def predict(problem: Problem, ws: WeightSet, traj, start: int):
    """Predictions of the output from sample ``start`` on; returns ``(idx, y_pred)``.

    Case I predicts consecutive horizon blocks from measured history. Case II
    uses the one-step output map on measured states: ``h(x_t, u_t)`` on the
    measurement path, ``y_{t+1}`` from ``(x_t, u_t)`` on the latent path.
    """
    model = problem.model
    if problem.case == 1:
        return nssm.predict_blocks_case1(model, ws, traj, start)
    if model.output_path == "measurement":
        idx = np.arange(start, len(traj))
        return idx, np.asarray(ad.value_of(nssm.measurement_map(model, ws, traj.x[idx], traj.u[idx])))
    idx = np.arange(max(start, 1), len(traj))
    _, y = nssm.step_case2(model, ws, traj.x[idx - 1], traj.u[idx - 1])
    return idx, np.asarray(ad.value_of(y))


def adapt_eval(problem: Problem, ws: WeightSet, traj, fraction: float, mcfg: meta.MetaConfig,
               model_id="", dataset_id="", seeds=None) -> tuple[metrics.EvalReport, WeightSet]:
    """Adapt on the prefix fraction and score predictions of the remainder."""
    adapted = adapt(problem, ws, traj, fraction, mcfg)
    start = context_length(traj, fraction)
    idx, y_pred = predict(problem, adapted, traj, start)
    y_true = traj.y[idx]
    rep = metrics.EvalReport.from_predictions(y_true, y_pred, model_id=model_id, dataset_id=dataset_id,
                                              seeds=seeds or {}, adapt_fraction=float(fraction),
                                              online_steps=mcfg.online_steps, first_index=int(idx[0]),
                                              sse=float(np.sum((y_true - y_pred) ** 2)))
    return rep, adapted


def ekf_run(problem: Problem, ws: WeightSet, traj, start: int, settings: dict) -> ekf.FilterResult:
    """Filter ``traj`` from sample ``start`` with the model as predictor.

    The prior at ``start`` is the true state with covariance ``P0 I``.
    """
    model = problem.model
    if problem.case != 2:
        raise ValueError("the EKF needs a Case II (state-space) model")
    n_x, n_y = model.n_x, model.n_y
    noise = ekf.NoiseModel.diagonal(settings["Qw"], settings["Qeta"], n_x, n_y)
    x0 = ekf.GaussianBelief(traj.x[start], np.eye(n_x) * settings["P0"])
    fm = ekf.NssmFilterModel(model, ws)
    project = bool(settings.get("project")) and model.conic is not None
    return ekf.run_filter(fm, noise, x0, traj.u[start:], traj.y[start:], project=project,
                          x_true=traj.x[start:], dt=traj.dt)


# ----------------------------------------------------------------------------
# desk-scale studies


def desk_config(benchmark: str, seed: int, **sections) -> dict:
    from . import config as config_mod
    cfg = {"benchmark": benchmark, "seed": int(seed)}
    cfg.update(sections)
    return config_mod.from_dict(cfg)


VDP_DESK = {
    "n_sources": 20,
    "meta": {"M": 10, "epochs": 40, "beta_in": 0.01, "beta_out": 0.003, "B": 4, "context_size": 0.2,
             "target_size": 0.4, "inference_steps": 10},
    "universal_epochs": 60,
    "lr": 0.003,
    "context": 400,
    "target_T": 3400,
}


def vdp_ordering(seed: int, settings: dict | None = None) -> dict:
    """Test SSE of MAML-SSM and its three baselines on the van der Pol target.

    * ``maml``: meta-trained on the sources, adapted on the first
      ``context`` target samples.
    * ``xfer``: supervised on the training sources, then the same online
      adaptation as MAML.
    * ``all_noadapt``: supervised on all sources plus the target context,
      used without adaptation.
    * ``ssm``: supervised on the target context only, with
      ``10 x universal_epochs`` epochs.

    SSE is summed over all predicted samples after the context.
    """
    s = {**VDP_DESK, **(settings or {})}
    s["meta"] = {**VDP_DESK["meta"], **((settings or {}).get("meta") or {})}
    cfg = desk_config("vdp", seed, data={"n_sources": s["n_sources"], "target_T": s["target_T"]},
                      meta=s["meta"])
    t0 = time.perf_counter()
    ds = generate(replace_seed(cfg, 100 + seed))
    problem = make_problem(cfg, ds.sources)
    target = ds.targets[0]
    ws0 = problem.model.init(seed)
    mcfg = meta_config(cfg, seed=seed)
    frac = s["context"] / len(target)
    ctx = problem.windows(target, 0, s["context"], stride=1)
    tr_idx, _ = meta.split_systems(len(ds.sources), mcfg.val_fraction, seed)

    def sse(ws):
        idx, yp = predict(problem, ws, target, s["context"])
        return float(np.sum((yp - target.y[idx]) ** 2))

    res = meta_result = train_meta(problem, ws0, ds.sources, mcfg)
    out = {"seed": seed, "maml": sse(adapt(problem, res.weights, target, frac, mcfg))}
    uni = train_universal(problem, ws0, [ds.sources[i] for i in tr_idx], s["universal_epochs"], s["lr"])
    out["xfer"] = sse(adapt(problem, uni, target, frac, mcfg))
    out["all_noadapt"] = sse(train_universal(problem, ws0, ds.sources, s["universal_epochs"], s["lr"], [ctx]))
    out["ssm"] = sse(meta.fit_supervised(ws0, [ctx], problem.loss, 10 * s["universal_epochs"], s["lr"]))
    out["maml_unadapted"] = sse(res.weights)
    out["val_loss"] = [meta_result.initial_val_loss, meta_result.best_val_loss]
    out["seconds"] = time.perf_counter() - t0
    out["_weights"] = res.weights
    out["_universal"] = uni
    return out


def replace_seed(cfg: dict, seed: int) -> dict:
    c = dict(cfg)
    c["seed"] = int(seed)
    return c


# ANIL rows: layers named with 1-based encoder indices as in the usual
# nomenclature; the decoder always adapts.
ANIL_ROWS = {
    "ANIL_FixEnc1_AdaptEnc23S": "encoder.1,encoder.2,transition.*,decoder.*",
    "ANIL_FixEnc12_AdaptEnc3S": "encoder.2,transition.*,decoder.*",
    "ANIL_FixEnc123_AdaptS": "transition.*,decoder.*",
}

ANIL_DESK = {
    "n_sources": 20,
    "target_T": 1000,
    "fractions": (0.1, 0.2, 0.3, 0.5),
    "meta": {"M": 10, "epochs": 25, "beta_in": 0.01, "beta_out": 0.003, "B": 4, "context_size": 0.2,
             "target_size": 0.4, "inference_steps": 10},
    "rows": ("MAML", "FOMAML", *ANIL_ROWS),
}


def anil_ablation(seed: int, settings: dict | None = None, trained: dict | None = None) -> dict:
    """RMSE per (row, adaptation fraction) on a 10 s van der Pol target.

    ``trained`` may supply already meta-trained weights per row name (the
    models must match this seed's data and architecture).
    """
    s = {**ANIL_DESK, **(settings or {})}
    s["meta"] = {**ANIL_DESK["meta"], **((settings or {}).get("meta") or {})}
    cfg = desk_config("vdp", seed, data={"n_sources": s["n_sources"], "target_T": s["target_T"]},
                      meta=s["meta"])
    ds = generate(replace_seed(cfg, 100 + seed))
    problem = make_problem(cfg, ds.sources)
    target = ds.targets[0]
    ws0 = problem.model.init(seed)
    out = {}
    for row in s["rows"]:
        if row == "MAML":
            mcfg = meta_config(cfg, seed=seed)
        elif row == "FOMAML":
            mcfg = meta_config(cfg, seed=seed, algorithm="fomaml")
        else:
            mcfg = meta_config(cfg, seed=seed, algorithm="anil", inner_mask=ANIL_ROWS[row])
        ws = (trained or {}).get(row)
        if ws is None:
            ws = train_meta(problem, ws0, ds.sources, mcfg).weights
        out[row] = {f: adapt_eval(problem, ws, target, f, mcfg)[0].rmse for f in s["fractions"]}
    return out


# 8 training sources in batches of 4 give 2 outer steps per epoch, so 300
# epochs match the 600 gradient steps of the universal baseline
BOUCWEN_DESK = {
    "n_sources": 10,
    "T": 1500,
    "model": {"H": 10, "H_p": 5, "encoder_hidden": [16, 16], "transition_hidden": [16], "decoder_hidden": [16],
              "window_stride": 4},
    "meta": {"M": 5, "epochs": 300, "beta_in": 0.003, "beta_out": 0.003, "B": 4, "context_size": 0.2,
             "target_size": 0.4, "inference_steps": 10},
    "universal_epochs": 60,
    "lr": 0.003,
    "fraction": 0.2,
}


def boucwen_ordering(seed: int, settings: dict | None = None) -> dict:
    """Test RMSE of the meta-adapted, universal and target-only Bouc-Wen models.

    The target-only model (Sup/Tr20) is trained on the same 20% prefix used
    for adaptation; everything is scored on the remaining 80%.
    """
    s = {**BOUCWEN_DESK, **(settings or {})}
    cfg = desk_config("boucwen", seed, data={"n_sources": s["n_sources"], "T": s["T"]}, model=s["model"],
                      meta=s["meta"])
    ds = generate(cfg)
    problem = make_problem(cfg, ds.sources)
    target = ds.targets[0]
    ws0 = problem.model.init(seed)
    mcfg = meta_config(cfg, seed=seed)
    f = s["fraction"]
    res = train_meta(problem, ws0, ds.sources, mcfg)
    out = {"seed": seed, "meta": adapt_eval(problem, res.weights, target, f, mcfg)[0].rmse}
    uni = train_universal(problem, ws0, ds.sources, s["universal_epochs"], s["lr"])
    no_adapt = replace(mcfg, inference_steps=0)
    out["universal"] = adapt_eval(problem, uni, target, f, no_adapt)[0].rmse
    ctx = problem.windows(target, 0, context_length(target, f), stride=1)
    sup = meta.fit_supervised(ws0, [ctx], problem.loss, 10 * s["universal_epochs"], s["lr"])
    out["sup_tr20"] = adapt_eval(problem, sup, target, f, no_adapt)[0].rmse
    return out


# the inner loop adapts the last two encoder layers, the transition and both
# decoders; the first encoder layer stays fixed after meta-training
LOCALIZATION_MASK = "encoder.1,encoder.2,transition.*,decoder_x.*,decoder_y.*"

LOCALIZATION_DESK = {
    "n_sources": 40,
    "n_targets": 5,
    "T": 400,
    "model": {"n_psi": 16, "encoder_hidden": [32, 32], "transition_hidden": [32], "decoder_x_hidden": [32],
              "decoder_y_hidden": [32]},
    "meta": {"algorithm": "anil", "inner_mask": LOCALIZATION_MASK, "first_order": True, "M": 5, "epochs": 60,
             "beta_in": 0.01, "beta_out": 0.003, "B": 4, "context_size": 0.2, "target_size": 0.2,
             "inference_steps": 20},
    "ekf": {"Qw": 1e-6, "Qeta": 1e-4, "P0": 1e-2},
    "fraction": 0.2,
}


def localization_study(seed: int, settings: dict | None = None) -> dict:
    """Cumulative EKF error with and without meta-inference on each target vehicle.

    Both filters use the same meta-trained NSSM; the adapted one has seen the
    first ``fraction`` of the target run. Filtering covers the remainder.
    """
    s = {**LOCALIZATION_DESK, **(settings or {})}
    cfg = desk_config("localization", seed,
                      data={"n_sources": s["n_sources"], "n_targets": s["n_targets"], "T": s["T"]},
                      model=s["model"], meta=s["meta"], ekf=s["ekf"])
    ds = generate(cfg)
    problem = make_problem(cfg, ds.sources)
    ws0 = problem.model.init(seed)
    mcfg = meta_config(cfg, seed=seed)
    res = train_meta(problem, ws0, ds.sources, mcfg)
    settings_ekf = section(cfg, "ekf")
    rows = []
    for tr in ds.targets:
        start = context_length(tr, s["fraction"])
        adapted = adapt(problem, res.weights, tr, s["fraction"], mcfg)
        e_meta = ekf_run(problem, adapted, tr, start, settings_ekf).cumulative_error()
        e_nometa = ekf_run(problem, res.weights, tr, start, settings_ekf).cumulative_error()
        rows.append({"system": tr.name, "meta": e_meta, "no_meta": e_nometa})
    return {"seed": seed, "rows": rows, "val_loss": [res.initial_val_loss, res.best_val_loss]}
