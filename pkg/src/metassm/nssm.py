"""Neural state-space models.

Case I maps a window of past inputs and outputs to a latent state, advances
it with a learned transition and decodes outputs. Case II encodes a measured
state and input, advances the latent state and decodes both the next state
and the output, optionally through a conic or curl-free constraint.

Models are immutable architecture descriptions. Weights live in a separate
:class:`~metassm.layers.WeightSet` so meta-learning can differentiate losses
with respect to them. All functions accept physical units and normalize
internally; losses are computed in normalized units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .constraints import CONIC_FC, ConicConstraint, CurlFreeOutput, conic_apply, curlfree_eval, tape_of
from .layers import LayerSpec, WeightSet, init_weights, mlp_forward, mlp_specs

MODEL_FORMAT = "metassm.model/1"


class ArchitectureMismatch(ValueError):
    pass


# ----------------------------------------------------------------------------
# normalization


@dataclass
class Normalizer:
    """Per-group affine maps ``v_n = (v - shift) / scale``."""

    groups: dict = field(default_factory=dict)

    def shift(self, name):
        return self.groups[name][0]

    def scale(self, name):
        return self.groups[name][1]

    def norm(self, name, v):
        if name not in self.groups:
            return v
        s, c = self.groups[name]
        return (v - s) / c

    def denorm(self, name, v):
        if name not in self.groups:
            return v
        s, c = self.groups[name]
        return v * c + s

    @classmethod
    def fit(cls, data: dict, shared: dict | None = None, centre: dict | None = None, floor: float = 1e-8):
        """z-score statistics per channel.

        Parameters
        ----------
        data : dict name -> (T, n) array
        shared : dict name -> list of index groups whose channels share one scale
        centre : dict name -> bool, whether to subtract the mean (default True)
        """
        shared, centre = shared or {}, centre or {}
        groups = {}
        for name, arr in data.items():
            arr = np.asarray(arr, dtype=float).reshape(-1, np.shape(arr)[-1])
            if arr.shape[1] == 0:
                continue
            mu = arr.mean(axis=0) if centre.get(name, True) else np.zeros(arr.shape[1])
            if centre.get(name, True):
                sd = arr.std(axis=0)
            else:
                sd = np.sqrt(np.mean(arr ** 2, axis=0))
            for idx in shared.get(name, []):
                idx = list(idx)
                sd[idx] = np.sqrt(np.mean(((arr[:, idx] - mu[idx]) ** 2)))
            groups[name] = (mu, np.maximum(sd, floor))
        return cls(groups)

    def to_dict(self):
        return {k: {"shift": s.tolist(), "scale": c.tolist()} for k, (s, c) in self.groups.items()}

    @classmethod
    def from_dict(cls, d):
        return cls({k: (np.asarray(v["shift"], dtype=float), np.asarray(v["scale"], dtype=float))
                    for k, v in d.items()})


def _dense_chain(ws: WeightSet, name: str, specs: Sequence[LayerSpec], x):
    return mlp_forward(ws.subnet(name), specs, x)


# ----------------------------------------------------------------------------
# Case I


@dataclass(frozen=True)
class NssmCase1:
    """Input-output NSSM.

    The encoder sees ``H`` past samples of ``u`` and ``y`` flattened as
    ``[u_{t-H}, ..., u_{t-1}, y_{t-H}, ..., y_{t-1}]``; the transition is
    autonomous in latent space.
    """

    n_u: int
    n_y: int
    H: int
    H_p: int
    n_psi: int = 8
    encoder_hidden: tuple = (32, 32)
    transition_hidden: tuple = (32,)
    decoder_hidden: tuple = (32,)
    activation: str = "swish"
    residual: bool = False
    normalizer: Normalizer = field(default_factory=Normalizer, compare=False)

    def __post_init__(self):
        if self.H < 1 or self.H_p < 1:
            raise ValueError("window H and horizon H_p must be >= 1")
        if self.n_y < 1 or self.n_u < 0:
            raise ValueError("need n_y >= 1 and n_u >= 0")

    @property
    def enc_in(self):
        return self.H * (self.n_u + self.n_y)

    def specs(self) -> dict:
        return {
            "encoder": mlp_specs(self.enc_in, self.encoder_hidden, self.n_psi, self.activation),
            "transition": mlp_specs(self.n_psi, self.transition_hidden, self.n_psi, self.activation),
            "decoder": mlp_specs(self.n_psi, self.decoder_hidden, self.n_y, self.activation),
        }

    def init(self, seed: int) -> WeightSet:
        return init_weights(self.specs(), seed)

    def with_normalizer(self, normalizer: Normalizer) -> "NssmCase1":
        return replace(self, normalizer=normalizer)

    def fit_normalizer(self, trajs) -> "NssmCase1":
        data = {"y": np.vstack([t.y for t in trajs])}
        if self.n_u:
            data["u"] = np.vstack([t.u for t in trajs])
        return self.with_normalizer(Normalizer.fit(data))

    def arch(self) -> dict:
        return {"kind": "case1", "n_u": self.n_u, "n_y": self.n_y, "H": self.H, "H_p": self.H_p,
                "n_psi": self.n_psi, "encoder_hidden": list(self.encoder_hidden),
                "transition_hidden": list(self.transition_hidden), "decoder_hidden": list(self.decoder_hidden),
                "activation": self.activation, "residual": self.residual}


def _case1_input(model: NssmCase1, U_hist, Y_hist):
    U = np.asarray(U_hist, dtype=float)
    Y = np.asarray(Y_hist, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if U.ndim == 1:
        U = U.reshape(len(Y), -1) if U.size else np.zeros((len(Y), 0))
    batched = Y.ndim == 3
    if Y.shape[-2] != model.H or U.shape[-2] != model.H:
        raise ValueError(f"history windows must have exactly H={model.H} rows, got "
                         f"{U.shape[-2]} (u) and {Y.shape[-2]} (y)")
    if Y.shape[-1] != model.n_y or U.shape[-1] != model.n_u:
        raise ad.ShapeError(f"history has {U.shape[-1]} inputs / {Y.shape[-1]} outputs, "
                            f"model expects {model.n_u} / {model.n_y}")
    Un = model.normalizer.norm("u", U) if model.n_u else U
    Yn = model.normalizer.norm("y", Y)
    lead = Y.shape[:-2]
    return np.concatenate([Un.reshape(lead + (-1,)), Yn.reshape(lead + (-1,))], axis=-1), batched


def encode_flat(model: NssmCase1, ws: WeightSet, enc_in):
    return _dense_chain(ws, "encoder", model.specs()["encoder"], enc_in)


def latent_step(model, ws: WeightSet, psi):
    nxt = _dense_chain(ws, "transition", model.specs()["transition"], psi)
    return psi + nxt if model.residual else nxt


def decode_y(model: NssmCase1, ws: WeightSet, psi):
    """Normalized output decoded from a latent state."""
    return _dense_chain(ws, "decoder", model.specs()["decoder"], psi)


def encode_case1(model: NssmCase1, ws: WeightSet, U_hist, Y_hist):
    """Latent state from ``H`` rows of input and output history (physical units)."""
    enc_in, _ = _case1_input(model, U_hist, Y_hist)
    return encode_flat(model, ws, enc_in)


def rollout_flat(model: NssmCase1, ws: WeightSet, enc_in, H_p: int):
    """Normalized predictions ``(..., H_p, n_y)`` from precomputed encoder input."""
    if H_p < 1:
        raise ValueError("H_p must be >= 1")
    psi = encode_flat(model, ws, enc_in)
    outs = []
    for _ in range(H_p):
        psi = latent_step(model, ws, psi)
        outs.append(decode_y(model, ws, psi))
    return ad.stack(outs, axis=-2)


def rollout_predict_case1(model: NssmCase1, ws: WeightSet, U_hist, Y_hist, H_p: int | None = None):
    """Predict the next ``H_p`` outputs in physical units.

    Returns shape ``(H_p, n_y)`` for a single history or ``(N, H_p, n_y)``
    for a batch of histories.
    """
    H_p = model.H_p if H_p is None else H_p
    enc_in, _ = _case1_input(model, U_hist, Y_hist)
    return model.normalizer.denorm("y", rollout_flat(model, ws, enc_in, H_p))


def windows_case1(model: NssmCase1, trajs, stride: int = 1, start: int = 0, stop: int | None = None) -> dict:
    """Training windows in normalized units.

    Returns ``{"enc_in": (N, H (n_u + n_y)), "Yf": (N, H_p, n_y)}``; the
    window at time ``t`` uses samples ``t-H .. t-1`` as history and
    ``t .. t+H_p-1`` as targets.
    """
    if not isinstance(trajs, (list, tuple)):
        trajs = [trajs]
    enc, yf = [], []
    for tr in trajs:
        Un = model.normalizer.norm("u", tr.u) if model.n_u else tr.u
        Yn = model.normalizer.norm("y", tr.y)
        end = len(tr) if stop is None else min(stop, len(tr))
        for t in range(max(start, 0) + model.H, end - model.H_p + 1, stride):
            enc.append(np.concatenate([Un[t - model.H:t].ravel(), Yn[t - model.H:t].ravel()]))
            yf.append(Yn[t:t + model.H_p])
    if not enc:
        raise ValueError(f"no complete window of H={model.H}, H_p={model.H_p} fits the data")
    return {"enc_in": np.asarray(enc), "Yf": np.asarray(yf)}


def loss_uy(model: NssmCase1, ws: WeightSet, batch: dict):
    """Mean squared multi-step prediction error over batch, horizon and channels."""
    Yf = batch["Yf"]
    if len(Yf) == 0:
        raise ValueError("empty batch")
    pred = rollout_flat(model, ws, batch["enc_in"], Yf.shape[1])
    return ad.mean(ad.square(pred - Yf))


def predict_blocks_case1(model: NssmCase1, ws: WeightSet, traj, start: int):
    """Predict samples ``start ..`` in consecutive ``H_p`` blocks from measured history.

    Returns ``(idx, y_pred)`` with the sample indices covered and the
    predictions in physical units.
    """
    start = max(start, model.H)
    w = windows_case1(model, traj, stride=model.H_p, start=start - model.H)
    pred = ad.value_of(rollout_flat(model, ws, w["enc_in"], model.H_p))
    n = len(pred)
    idx = start + np.arange(n * model.H_p)
    return idx, model.normalizer.denorm("y", pred.reshape(-1, model.n_y))


# ----------------------------------------------------------------------------
# Case II


@dataclass(frozen=True)
class NssmCase2:
    """State-input-output NSSM.

    ``output`` selects the output decoder: ``"dense"`` (an MLP from the
    latent state) or ``"curlfree"`` (gradient of a scalar potential with
    respect to the coordinate entries of ``x``). ``output_path`` picks where
    the output decoder reads from: ``"latent"`` predicts ``y_{t+1}`` from
    ``A(E(x_t, u_t))``; ``"measurement"`` models ``y_t = h(x_t, u_t)`` from
    ``E(x_t, u_t)``.
    """

    n_x: int
    n_u: int
    n_y: int
    n_psi: int = 8
    encoder_hidden: tuple = (32, 32)
    transition_hidden: tuple = (32,)
    decoder_x_hidden: tuple = (32,)
    decoder_y_hidden: tuple = (32,)
    activation: str = "swish"
    residual: bool = False
    output: str = "dense"
    output_path: str = "latent"
    coords: tuple = (0, 1)
    conic: ConicConstraint | None = field(default=None, compare=False)
    n_steps: int = 5
    normalizer: Normalizer = field(default_factory=Normalizer, compare=False)

    def __post_init__(self):
        if self.output not in ("dense", "curlfree"):
            raise ValueError(f"unknown output type {self.output!r}")
        if self.output_path not in ("latent", "measurement"):
            raise ValueError(f"unknown output path {self.output_path!r}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.output == "curlfree":
            CurlFreeOutput(tuple(self.coords)).check(self.n_x)
            if len(self.coords) != self.n_y:
                raise ValueError(f"curl-free output has {len(self.coords)} components, n_y={self.n_y}")
            if self.activation in ("relu", "elu"):
                raise ValueError("curl-free outputs need a twice differentiable activation (swish or tanh)")
        if self.conic is not None and self.conic.n_x != self.n_x:
            raise ValueError(f"conic constraint is {self.conic.n_x}-dimensional, state is {self.n_x}")

    def specs(self) -> dict:
        n_out_y = 1 if self.output == "curlfree" else self.n_y
        s = {
            "encoder": mlp_specs(self.n_x + self.n_u, self.encoder_hidden, self.n_psi, self.activation),
            "transition": mlp_specs(self.n_psi, self.transition_hidden, self.n_psi, self.activation),
            "decoder_x": mlp_specs(self.n_psi, self.decoder_x_hidden, self.n_x, self.activation),
            "decoder_y": mlp_specs(self.n_psi, self.decoder_y_hidden, n_out_y, self.activation),
        }
        if self.conic is not None:
            s["conic"] = [self.conic.fc_spec(self.n_x)]
        return s

    def init(self, seed: int) -> WeightSet:
        ws = init_weights(self.specs(), seed)
        if self.conic is not None:
            # the conic layer is addressed as conic.fc rather than conic.0
            ws = WeightSet((CONIC_FC if p == "conic.0" else p, wb) for p, wb in ws.items())
        return ws

    @property
    def curlfree(self):
        return CurlFreeOutput(tuple(self.coords)) if self.output == "curlfree" else None

    def with_normalizer(self, normalizer: Normalizer) -> "NssmCase2":
        return replace(self, normalizer=normalizer)

    def fit_normalizer(self, trajs) -> "NssmCase2":
        """Fit z-score statistics while keeping the constraints meaningful.

        With a conic constraint the state is only rescaled (no shift), so the
        cone apex stays at the origin. With a curl-free output the
        coordinate channels share one scale and the output channels share
        another, so the normalized field is still a gradient.
        """
        data = {"x": np.vstack([t.x for t in trajs]), "y": np.vstack([t.y for t in trajs])}
        if self.n_u:
            data["u"] = np.vstack([t.u for t in trajs])
        shared, centre = {}, {}
        if self.conic is not None:
            centre["x"] = False
        if self.output == "curlfree":
            shared["x"] = [list(self.coords)]
            shared["y"] = [list(range(self.n_y))]
        return self.with_normalizer(Normalizer.fit(data, shared, centre))

    def conic_normalized(self):
        if self.conic is None:
            return None
        if "x" not in self.normalizer.groups:
            return self.conic
        return self.conic.scaled(self.normalizer.scale("x"))

    def arch(self) -> dict:
        return {"kind": "case2", "n_x": self.n_x, "n_u": self.n_u, "n_y": self.n_y, "n_psi": self.n_psi,
                "encoder_hidden": list(self.encoder_hidden), "transition_hidden": list(self.transition_hidden),
                "decoder_x_hidden": list(self.decoder_x_hidden), "decoder_y_hidden": list(self.decoder_y_hidden),
                "activation": self.activation, "residual": self.residual, "output": self.output,
                "output_path": self.output_path, "coords": list(self.coords), "n_steps": self.n_steps}


def encode_case2(model: NssmCase2, ws: WeightSet, x_n, u_n):
    xu = ad.concat([x_n, u_n], axis=-1) if model.n_u else x_n
    return _dense_chain(ws, "encoder", model.specs()["encoder"], xu)


def decode_state(model: NssmCase2, ws: WeightSet, psi):
    """``P_x(D_x(psi))`` in normalized state coordinates."""
    dx = _dense_chain(ws, "decoder_x", model.specs()["decoder_x"], psi)
    c = model.conic_normalized()
    if c is None:
        return dx
    if CONIC_FC not in ws:
        raise ValueError(f"model has a conic constraint but the weights lack {CONIC_FC!r}")
    return conic_apply(c, dx, ws[CONIC_FC])


def _potential(model: NssmCase2, ws: WeightSet, u_n, through_transition: bool):
    specs = model.specs()

    def phi(x_n):
        psi = encode_case2(model, ws, x_n, u_n)
        if through_transition:
            psi = latent_step(model, ws, psi)
        return mlp_forward(ws.subnet("decoder_y"), specs["decoder_y"], psi)

    return phi


def _output_from(model: NssmCase2, ws: WeightSet, x_n, u_n, psi, through_transition: bool):
    """Normalized output; ``psi`` is the latent state feeding the dense decoder."""
    if model.output == "dense":
        return _dense_chain(ws, "decoder_y", model.specs()["decoder_y"], psi)
    tape = tape_of(ws, x_n, u_n)
    return curlfree_eval(model.curlfree, _potential(model, ws, u_n, through_transition), x_n, tape)


def step_normalized(model: NssmCase2, ws: WeightSet, x_n, u_n):
    """One step in normalized units; returns ``(x_next, y_next)``.

    With the measurement output path ``y_next`` is ``h(x_next, u_t)``.
    """
    psi = encode_case2(model, ws, x_n, u_n)
    psi1 = latent_step(model, ws, psi)
    x1 = decode_state(model, ws, psi1)
    if model.output_path == "latent":
        y1 = _output_from(model, ws, x_n, u_n, psi1, True)
    else:
        y1 = measurement_normalized(model, ws, x1, u_n)
    return x1, y1


def measurement_normalized(model: NssmCase2, ws: WeightSet, x_n, u_n):
    """``h(x, u) = P_y D_y E(x, u)`` in normalized units."""
    if model.output == "dense":
        return _dense_chain(ws, "decoder_y", model.specs()["decoder_y"], encode_case2(model, ws, x_n, u_n))
    return _output_from(model, ws, x_n, u_n, None, False)


def _norm_xu(model, x, u):
    x = np.asarray(x, dtype=float) if not isinstance(x, ad.Tensor) else x
    if model.n_u:
        u = np.asarray(u, dtype=float) if not isinstance(u, ad.Tensor) else u
        u_n = model.normalizer.norm("u", u)
    else:
        u_n = np.zeros(np.shape(ad.value_of(x))[:-1] + (0,))
    if np.shape(ad.value_of(x))[-1] != model.n_x:
        raise ad.ShapeError(f"state has {np.shape(ad.value_of(x))[-1]} entries, model expects {model.n_x}")
    return model.normalizer.norm("x", x), u_n


def step_case2(model: NssmCase2, ws: WeightSet, x_t, u_t):
    """``(x_hat_{t+1}, y_hat_{t+1})`` in physical units."""
    x_n, u_n = _norm_xu(model, x_t, u_t)
    x1, y1 = step_normalized(model, ws, x_n, u_n)
    return model.normalizer.denorm("x", x1), model.normalizer.denorm("y", y1)


def transition_map(model: NssmCase2, ws: WeightSet, x, u):
    """State map ``f(x, u) = P_x D_x A E(x, u)`` in physical units."""
    x_n, u_n = _norm_xu(model, x, u)
    psi = latent_step(model, ws, encode_case2(model, ws, x_n, u_n))
    return model.normalizer.denorm("x", decode_state(model, ws, psi))


def measurement_map(model: NssmCase2, ws: WeightSet, x, u):
    """Output map ``h(x, u)`` in physical units."""
    x_n, u_n = _norm_xu(model, x, u)
    return model.normalizer.denorm("y", measurement_normalized(model, ws, x_n, u_n))


def reconstruct_state(model: NssmCase2, ws: WeightSet, x, u):
    """Autoencoder reconstruction ``P_x D_x E(x, u)`` in physical units."""
    x_n, u_n = _norm_xu(model, x, u)
    return model.normalizer.denorm("x", decode_state(model, ws, encode_case2(model, ws, x_n, u_n)))


def windows_case2(model: NssmCase2, trajs, n_steps: int | None = None, stride: int = 1,
                  start: int = 0, stop: int | None = None) -> dict:
    """Sequences of ``n_steps + 1`` states (normalized).

    Returns ``{"X": (N, S+1, n_x), "U": (N, S+1, n_u), "Y": (N, S+1, n_y)}``.
    """
    S = model.n_steps if n_steps is None else n_steps
    if not isinstance(trajs, (list, tuple)):
        trajs = [trajs]
    X, U, Y = [], [], []
    for tr in trajs:
        if tr.x is None:
            raise ValueError("Case II windows need state measurements")
        xn = model.normalizer.norm("x", tr.x)
        un = model.normalizer.norm("u", tr.u) if model.n_u else tr.u
        yn = model.normalizer.norm("y", tr.y)
        end = len(tr) if stop is None else min(stop, len(tr))
        for k in range(max(start, 0), end - S, stride):
            X.append(xn[k:k + S + 1])
            U.append(un[k:k + S + 1])
            Y.append(yn[k:k + S + 1])
    if not X:
        raise ValueError(f"no complete {S}-step sequence fits the data")
    return {"X": np.asarray(X), "U": np.asarray(U), "Y": np.asarray(Y)}


def loss_uxy_parts(model: NssmCase2, ws: WeightSet, batch: dict):
    """Return ``(total, recon, pred_x, pred_y)`` as tape scalars.

    ``recon`` compares every state of the sequence against its autoencoder
    reconstruction. ``pred_x`` rolls the model forward ``S`` steps from the
    first state, re-encoding each predicted state with the measured input.
    ``pred_y`` uses the rollout outputs on the latent path and
    ``h(x_k, u_k)`` on measured states on the measurement path.
    """
    X, U, Y = batch["X"], batch["U"], batch["Y"]
    if len(X) == 0:
        raise ValueError("empty batch")
    N, S1, n_x = X.shape
    S = S1 - 1
    flat_x = X.reshape(-1, n_x)
    flat_u = U.reshape(N * S1, -1)
    rec = decode_state(model, ws, encode_case2(model, ws, flat_x, flat_u))
    recon = ad.mean(ad.square(rec - flat_x))

    x = X[:, 0]
    xs, ys = [], []
    for k in range(S):
        psi = latent_step(model, ws, encode_case2(model, ws, x, U[:, k]))
        x_next = decode_state(model, ws, psi)
        if model.output_path == "latent":
            ys.append(_output_from(model, ws, x, U[:, k], psi, True))
        xs.append(x_next)
        x = x_next
    pred_x = ad.mean(ad.square(ad.stack(xs, axis=1) - X[:, 1:]))
    if model.output_path == "latent":
        pred_y = ad.mean(ad.square(ad.stack(ys, axis=1) - Y[:, 1:]))
    else:
        h = measurement_normalized(model, ws, flat_x, flat_u)
        pred_y = ad.mean(ad.square(h - Y.reshape(N * S1, -1)))
    return recon + pred_x + pred_y, recon, pred_x, pred_y


def loss_uxy(model: NssmCase2, ws: WeightSet, batch: dict):
    return loss_uxy_parts(model, ws, batch)[0]


def rollout_case2(model: NssmCase2, ws: WeightSet, x0, U):
    """Free-run the state map from ``x0`` under inputs ``U`` (physical units).

    Returns ``(X, Y)`` where ``X[k]`` is the predicted state at step ``k``
    (``X[0] = x0``) and ``Y[k]`` the output at ``X[k]`` via ``h``.
    """
    U = np.asarray(U, dtype=float).reshape(len(U), -1)
    xs = [np.asarray(x0, dtype=float)]
    for k in range(len(U) - 1):
        xs.append(ad.value_of(transition_map(model, ws, xs[-1], U[k])))
    X = np.asarray(xs)
    Y = ad.value_of(measurement_map(model, ws, X, U))
    return X, Y


# ----------------------------------------------------------------------------
# manifests


def _model_from_arch(arch: dict, normalizer: Normalizer, conic: ConicConstraint | None):
    kind = arch["kind"]
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in arch.items() if k != "kind"}
    if kind == "case1":
        return NssmCase1(normalizer=normalizer, **kw)
    if kind == "case2":
        return NssmCase2(normalizer=normalizer, conic=conic, **kw)
    raise ValueError(f"unknown model kind {kind!r}")


def model_manifest(model) -> dict:
    d = {"format": MODEL_FORMAT, "arch": model.arch(), "normalizer": model.normalizer.to_dict(),
         "layers": {name: [s.to_dict() for s in specs] for name, specs in model.specs().items()}}
    if getattr(model, "conic", None) is not None:
        d["conic"] = model.conic.to_dict()
    return d


def check_compatible(model, ws: WeightSet):
    """Raise :class:`ArchitectureMismatch` listing every layer whose shape differs."""
    fresh = model.init(0)
    diffs = []
    for p in sorted(set(fresh.paths) | set(ws.paths)):
        if p not in ws:
            diffs.append(f"{p}: missing from weights")
            continue
        if p not in fresh:
            diffs.append(f"{p}: not part of the configured architecture")
            continue
        want = np.shape(fresh[p][0])
        got = np.shape(ad.value_of(ws[p][0]))
        if want != got:
            diffs.append(f"{p}: weights are {got[1]}->{got[0]}, config expects {want[1]}->{want[0]}")
    if diffs:
        raise ArchitectureMismatch("checkpoint does not match the configured architecture:\n  " + "\n  ".join(diffs))


def save_model(path: str | Path, model, ws: WeightSet):
    """Write ``<path>.model.json`` plus the weight manifest and blob."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ws.detach().save(path)
    mpath = path.with_name(path.name + ".model.json")
    mpath.write_text(json.dumps(model_manifest(model), indent=2, sort_keys=True) + "\n")
    return mpath


def load_model(path: str | Path):
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    m = json.loads(path.with_name(path.name + ".model.json").read_text())
    if m.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: not a model manifest")
    conic = ConicConstraint.from_dict(m["conic"]) if "conic" in m else None
    model = _model_from_arch(m["arch"], Normalizer.from_dict(m["normalizer"]), conic)
    ws = WeightSet.load(path)
    check_compatible(model, ws)
    return model, ws
