"""Ground-truth simulators for the benchmark families.

Bouc-Wen hysteretic oscillator, unforced van der Pol oscillators, a planar
vehicle moving through the field of a uniformly magnetized sphere, and a
cone-invariant linear system for exercising the conic output layer.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

TRAJECTORY_FORMAT = "metassm.trajectory/1"


class SimulationError(RuntimeError):
    pass


@dataclass
class Trajectory:
    """Sampled ``(x, u, y)`` record of one system.

    ``x`` may be ``None`` for input-output data. Arrays are ``(T, n)``.
    """

    dt: float
    t: np.ndarray
    u: np.ndarray
    y: np.ndarray
    x: np.ndarray | None = None
    params: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        self.t = np.asarray(self.t, dtype=float)
        self.u = np.asarray(self.u, dtype=float).reshape(len(self.t), -1)
        self.y = np.asarray(self.y, dtype=float).reshape(len(self.t), -1)
        if self.x is not None:
            self.x = np.asarray(self.x, dtype=float).reshape(len(self.t), -1)
        lengths = {len(self.t), len(self.u), len(self.y)} | ({len(self.x)} if self.x is not None else set())
        if len(lengths) != 1:
            raise ValueError(f"trajectory arrays have unequal lengths {sorted(lengths)}")

    def __len__(self):
        return len(self.t)

    @property
    def n_x(self):
        return 0 if self.x is None else self.x.shape[1]

    @property
    def n_u(self):
        return self.u.shape[1]

    @property
    def n_y(self):
        return self.y.shape[1]

    def slice(self, start: int, stop: int | None = None) -> "Trajectory":
        sl = slice(start, stop)
        return Trajectory(self.dt, self.t[sl], self.u[sl], self.y[sl],
                          None if self.x is None else self.x[sl], dict(self.params), dict(self.seeds), self.name)

    def columns(self) -> list[str]:
        cols = ["t"]
        cols += [f"x{i}" for i in range(self.n_x)]
        cols += [f"u{i}" for i in range(self.n_u)]
        cols += [f"y{i}" for i in range(self.n_y)]
        return cols

    def save(self, path: str | Path) -> tuple[Path, Path]:
        """Write ``<path>.csv`` and the JSON manifest ``<path>.json``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        csv_path, manifest_path = path.with_suffix(".csv"), path.with_suffix(".json")
        parts = [self.t[:, None]] + ([self.x] if self.x is not None else []) + [self.u, self.y]
        table = np.hstack(parts)
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns())
            for row in table:
                writer.writerow([repr(float(v)) for v in row])
        manifest = {
            "format": TRAJECTORY_FORMAT, "name": self.name, "dt": self.dt, "length": len(self),
            "n_x": self.n_x, "n_u": self.n_u, "n_y": self.n_y, "columns": self.columns(),
            "csv": csv_path.name, "params": _jsonable(self.params), "seeds": _jsonable(self.seeds),
        }
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return csv_path, manifest_path

    @classmethod
    def load(cls, path: str | Path) -> "Trajectory":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        if manifest.get("format") != TRAJECTORY_FORMAT:
            raise ValueError(f"{path}: not a trajectory manifest")
        table = np.loadtxt(path.with_name(manifest["csv"]), delimiter=",", skiprows=1, ndmin=2)
        n_x, n_u, n_y = manifest["n_x"], manifest["n_u"], manifest["n_y"]
        t = table[:, 0]
        x = table[:, 1:1 + n_x] if n_x else None
        u = table[:, 1 + n_x:1 + n_x + n_u]
        y = table[:, 1 + n_x + n_u:1 + n_x + n_u + n_y]
        return cls(manifest["dt"], t, u, y, x, manifest.get("params", {}), manifest.get("seeds", {}),
                   manifest.get("name", ""))


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ----------------------------------------------------------------------------
# parameter families


def sample_family(ranges: Mapping[str, tuple[float, float]], N: int, seed: int) -> list[dict]:
    """Draw ``N`` parameter sets uniformly and independently per coordinate."""
    if N < 1:
        raise ValueError("sample_family needs N >= 1")
    if not ranges:
        raise ValueError("sample_family needs at least one parameter range")
    for name, (lo, hi) in ranges.items():
        if not hi >= lo:
            raise ValueError(f"empty range for {name}: [{lo}, {hi}]")
    rng = np.random.default_rng(seed)
    names = list(ranges)
    lows = np.array([ranges[n][0] for n in names], dtype=float)
    highs = np.array([ranges[n][1] for n in names], dtype=float)
    draws = rng.uniform(lows, highs, size=(N, len(names)))
    return [dict(zip(names, map(float, row))) for row in draws]


def sample_horizons(N: int, seed: int, mode: str = "fixed", fixed: float = 20.0,
                    low: float = 10.0, high: float = 40.0) -> np.ndarray:
    """Simulation end times: a constant ``fixed`` or ``U([low, high])`` draws."""
    if mode == "fixed":
        return np.full(N, float(fixed))
    if mode == "uniform":
        return np.random.default_rng(seed).uniform(low, high, size=N)
    raise ValueError(f"unknown horizon mode {mode!r}")


# ----------------------------------------------------------------------------
# Bouc-Wen


@dataclass(frozen=True)
class BoucWenParams:
    m_L: float
    c_L: float
    k_L: float
    alpha: float
    beta: float
    gamma: float
    delta: float
    nu: float = 1.0

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


BOUCWEN_RANGES = {
    "m_L": (1.0, 3.0),
    "c_L": (5.0, 15.0),
    "k_L": (2.5e4, 7.5e4),
    "alpha": (2.5e4, 7.5e4),
    "beta": (500.0, 4500.0),
    "gamma": (0.5, 0.9),
    "delta": (-1.5, -0.5),
}
BOUCWEN_TARGET = BoucWenParams(2.0, 10.0, 5.0e4, 5.0e4, 1000.0, 0.8, -1.1)
BOUCWEN_DT = 1.0 / 750.0
BOUCWEN_NOISE_STD = 8e-6  # 8e-3 mm expressed in metres


def check_boucwen_range(p: BoucWenParams, ranges=BOUCWEN_RANGES):
    for name, (lo, hi) in ranges.items():
        v = getattr(p, name)
        if not lo <= v <= hi:
            raise ValueError(f"Bouc-Wen parameter {name}={v} outside [{lo}, {hi}]")


def sine_excitation(amplitude=120.0, frequency=1.0) -> Callable[[float], float]:
    return lambda t: amplitude * math.sin(2.0 * math.pi * frequency * t)


def multisine_excitation(amplitude=120.0, f_min=0.5, f_max=5.0, n_lines=8, seed=0) -> Callable[[float], float]:
    """Random-phase multisine with ``n_lines`` equally spaced lines in [f_min, f_max].

    The peak amplitude of the sum is roughly ``amplitude``.
    """
    rng = np.random.default_rng(seed)
    freqs = np.linspace(f_min, f_max, n_lines)
    phases = rng.uniform(0, 2 * np.pi, n_lines)
    a = amplitude / math.sqrt(n_lines) / 1.5
    return lambda t: float(a * np.sum(np.sin(2 * np.pi * freqs * t + phases)))


def _boucwen_rhs(x1, x2, x3, u, p):
    m, c, k, a, b, g, d, nu = p
    if nu == 1.0:
        hyst = g * abs(x2) * x3 + d * x2 * abs(x3)
    else:
        ax3 = abs(x3)
        hyst = g * abs(x2) * ax3 ** (nu - 1.0) * x3 + d * x2 * ax3 ** nu
    return x2, (u - k * x1 - c * x2 - x3) / m, a * x2 - b * hyst


def _rk4(s, t, h, exc, p):
    x1, x2, x3 = s
    a = _boucwen_rhs(x1, x2, x3, exc(t), p)
    um = exc(t + 0.5 * h)
    b = _boucwen_rhs(x1 + 0.5 * h * a[0], x2 + 0.5 * h * a[1], x3 + 0.5 * h * a[2], um, p)
    c = _boucwen_rhs(x1 + 0.5 * h * b[0], x2 + 0.5 * h * b[1], x3 + 0.5 * h * b[2], um, p)
    d = _boucwen_rhs(x1 + h * c[0], x2 + h * c[1], x3 + h * c[2], exc(t + h), p)
    return (x1 + h / 6.0 * (a[0] + 2 * b[0] + 2 * c[0] + d[0]),
            x2 + h / 6.0 * (a[1] + 2 * b[1] + 2 * c[1] + d[1]),
            x3 + h / 6.0 * (a[2] + 2 * b[2] + 2 * c[2] + d[2]))


def _rk4_split(s, t, h, exc, p):
    """RK4 step that lands on sign changes of x2 or x3 before continuing.

    The hysteresis law has kinks at x2 = 0 and x3 = 0; stepping across them
    drops RK4 to low order, so the step is cut at the crossing.
    """
    remaining = h
    for _ in range(4):
        s1 = _rk4(s, t, remaining, exc, p)
        comp = next((i for i in (1, 2) if s[i] * s1[i] < 0.0), None)
        if comp is None:
            return s1
        lo, hi, glo, ghi = 0.0, remaining, s[comp], s1[comp]
        tau = remaining
        for _ in range(60):
            tau = hi - ghi * (hi - lo) / (ghi - glo)
            g = _rk4(s, t, tau, exc, p)[comp]
            if g * ghi < 0.0:
                lo, glo = hi, ghi
            else:
                glo *= 0.5  # Illinois modification
            hi, ghi = tau, g
            if g == 0.0 or abs(hi - lo) < 1e-14 * h:
                break
        s = _rk4(s, t, tau, exc, p)
        t += tau
        remaining -= tau
        if remaining <= 1e-15 * h:
            return s
    return _rk4(s, t, remaining, exc, p)


def simulate_boucwen(p: BoucWenParams, excitation, T: int, noise_seed: int | None = None,
                     dt: float = BOUCWEN_DT, substeps: int = 8, noise_std: float = BOUCWEN_NOISE_STD,
                     x0=(0.0, 0.0, 0.0), check_range: bool = False, name: str = "") -> Trajectory:
    """Integrate the Bouc-Wen oscillator and sample it every ``dt`` seconds.

    Parameters
    ----------
    p : BoucWenParams
    excitation : callable or array
        Force ``u(t)`` as a function of time, or ``T`` samples held constant
        over each interval.
    T : int
        Number of samples.
    noise_seed : int or None
        Seed of the Gaussian output noise; ``None`` disables noise.
    substeps : int
        RK4 steps per sample interval.

    Returns
    -------
    Trajectory with ``x`` the three states, ``u`` the force and ``y`` the
    (noisy) displacement.
    """
    if check_range:
        check_boucwen_range(p)
    if callable(excitation):
        exc = excitation
        u = np.array([exc(k * dt) for k in range(T)])
    else:
        u = np.asarray(excitation, dtype=float).reshape(-1)
        if len(u) < T:
            raise ValueError(f"excitation has {len(u)} samples, need {T}")
        u = u[:T]
        exc = None
    pt = (p.m_L, p.c_L, p.k_L, p.alpha, p.beta, p.gamma, p.delta, p.nu)
    h = dt / substeps
    states = np.empty((T, 3))
    s = tuple(float(v) for v in x0)
    states[0] = s
    for k in range(T - 1):
        f = exc if exc is not None else (lambda _t, _uk=u[k]: _uk)
        t = k * dt
        for j in range(substeps):
            s = _rk4_split(s, t + j * h, h, f, pt)
        if not all(math.isfinite(v) for v in s) or abs(s[0]) > 1e3:
            raise SimulationError(f"Bouc-Wen state blew up at step {k + 1}: {s}")
        states[k + 1] = s
    y = states[:, 0].copy()
    if noise_seed is not None and noise_std > 0:
        y = y + np.random.default_rng(noise_seed).normal(0.0, noise_std, size=T)
    return Trajectory(dt, np.arange(T) * dt, u[:, None], y[:, None], states, p.as_dict(),
                      {"noise": noise_seed}, name)


def hysteresis_loop_area(u: np.ndarray, y: np.ndarray) -> float:
    """Absolute shoelace area enclosed by the closed curve ``(y, u)``."""
    return 0.5 * abs(float(np.dot(y, np.roll(u, -1)) - np.dot(u, np.roll(y, -1))))


# ----------------------------------------------------------------------------
# van der Pol


VDP_RANGE = {"theta": (0.5, 2.0)}
VDP_TARGET_THETA = 1.572
VDP_TARGET_X0 = (1.0, -0.5)
VDP_DT = 0.01


def simulate_vdp(theta: float, x0, T: int, dt: float = VDP_DT, name: str = "") -> Trajectory:
    """Forward-Euler van der Pol oscillator; the output is the full state."""
    x = np.empty((T, 2))
    x[0] = x0
    for k in range(T - 1):
        x1, x2 = x[k]
        x[k + 1, 0] = x1 + dt * x2
        x[k + 1, 1] = x2 + dt * (theta * x2 * (1.0 - x1 * x1) - x1)
        if not np.all(np.isfinite(x[k + 1])) or np.abs(x[k + 1]).max() > 1e6:
            raise SimulationError(f"van der Pol state blew up at step {k + 1}")
    return Trajectory(dt, np.arange(T) * dt, np.zeros((T, 0)), x.copy(), x,
                      {"theta": float(theta), "x0": list(map(float, x0))}, {}, name)


def vdp_family(N: int, seed: int, horizon_mode: str = "fixed", T_fixed: float = 20.0,
               T_low: float = 10.0, T_high: float = 40.0, dt: float = VDP_DT) -> list[Trajectory]:
    """Source systems with random damping, initial state in [-1, 1]^2 and horizon."""
    params = sample_family(VDP_RANGE, N, seed)
    rng = np.random.default_rng(seed + 1)
    x0s = rng.uniform(-1.0, 1.0, size=(N, 2))
    ends = sample_horizons(N, seed + 2, horizon_mode, T_fixed, T_low, T_high)
    out = []
    for i, (pp, x0, T_end) in enumerate(zip(params, x0s, ends)):
        out.append(simulate_vdp(pp["theta"], x0, int(round(T_end / dt)), dt, name=f"vdp_{i:03d}"))
    return out


# ----------------------------------------------------------------------------
# magnetic dipole and vehicle


def dipole_field(p, m, r0: float, convention: str = "physical") -> np.ndarray:
    """Planar field of a uniformly magnetized sphere of radius ``r0``.

    Inside the sphere the field is ``-M/3``. Outside it is the dipole field
    with moment ``m0 * M``, ``m0 = 4/3 pi r0^3``. ``convention="physical"``
    uses ``3 (M.p) p / r^5 - M / r^3`` (curl-free); ``"as_printed"`` uses
    ``M / r^3 + 3 (M.p) p / r^5``.

    ``p`` is ``(2,)`` or ``(N, 2)``.
    """
    p = np.asarray(p, dtype=float)
    M = np.asarray(m, dtype=float)
    single = p.ndim == 1
    P = p.reshape(-1, 2)
    r = np.linalg.norm(P, axis=1)
    m0 = 4.0 / 3.0 * math.pi * r0 ** 3
    out = np.empty_like(P)
    inside = r < r0
    out[inside] = -M / 3.0
    Po, ro = P[~inside], r[~inside][:, None]
    mp = (Po @ M)[:, None]
    if convention == "physical":
        out[~inside] = m0 / (4 * math.pi) * (3.0 * mp * Po / ro ** 5 - M / ro ** 3)
    elif convention == "as_printed":
        out[~inside] = m0 / (4 * math.pi) * (M / ro ** 3 + 3.0 * mp * Po / ro ** 5)
    else:
        raise ValueError(f"unknown convention {convention!r}")
    return out[0] if single else out


@dataclass(frozen=True)
class VehicleParams:
    l_f: float
    l_r: float
    delta_max: float  # degrees
    m_X: float
    m_Y: float
    r0: float
    R_w: float = 0.05

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


VEHICLE_RANGES = {
    "l_f": (0.02, 0.25),
    "l_r": (0.02, 0.25),
    "delta_max": (10.0, 20.0),
    "m_X": (-1.5, 1.5),
    "m_Y": (-1.5, 1.5),
    "r0": (1.5, 4.5),
}
VEHICLE_DT = 0.1


def figure_eight(radius: float = 3.0, n_per_lobe: int = 200) -> np.ndarray:
    """Waypoints of two circles touching at the origin, right lobe clockwise first.

    The vehicle leaves the origin heading +Y, so heading stays bounded.
    """
    s = np.linspace(0.0, 2 * np.pi, n_per_lobe, endpoint=False)
    right = np.column_stack([radius - radius * np.cos(s), radius * np.sin(s)])
    left = np.column_stack([-radius + radius * np.cos(s), radius * np.sin(s)])
    return np.vstack([right, left, right[:1]])


def kinematic_rhs(x, delta, v, l_f, l_r):
    """Continuous-time kinematic single-track model, ``x = [p_X, p_Y, psi]``."""
    L = l_f + l_r
    beta = math.atan(l_r * math.tan(delta) / L)
    psi = x[2]
    return np.array([v * math.cos(psi + beta) / math.cos(beta),
                     v * math.sin(psi + beta) / math.cos(beta),
                     v * math.tan(delta) / L])


def _pure_pursuit(pos, psi, path, start_idx, lookahead, L, delta_max):
    n = len(path)
    idx = start_idx
    # advance progress to the closest point in a forward search window
    window = path[idx:min(idx + 40, n)]
    if len(window):
        idx = idx + int(np.argmin(np.linalg.norm(window - pos, axis=1)))
    target_idx = idx
    while target_idx < n - 1 and np.linalg.norm(path[target_idx] - pos) < lookahead:
        target_idx += 1
    target = path[target_idx]
    alpha = math.atan2(target[1] - pos[1], target[0] - pos[0]) - psi
    alpha = math.atan2(math.sin(alpha), math.cos(alpha))
    ld = max(np.linalg.norm(target - pos), 1e-6)
    delta = math.atan2(2.0 * L * math.sin(alpha), ld)
    return float(np.clip(delta, -delta_max, delta_max)), idx


def simulate_vehicle(vp: VehicleParams, waypoints=None, T: int = 400, dt: float = VEHICLE_DT,
                     speed: float = 1.0, speed_ripple: float = 0.2, lookahead: float = 0.5,
                     process_noise: Sequence[float] | float | None = None,
                     measurement_noise: Sequence[float] | float | None = 1e-4,
                     seed: int | None = None, x0=None, name: str = "") -> Trajectory:
    """Vehicle tracking ``waypoints`` with pure pursuit, measuring the dipole field.

    The state is ``[p_X, p_Y, psi]``, the input ``[delta, omega_f, omega_r]``
    and the output the planar field at the vehicle position plus Gaussian
    noise with (diagonal) covariance ``measurement_noise``. States advance by
    forward Euler, so the displacement along the heading equals
    ``(omega_f + omega_r) R_w / 2 * dt`` exactly.
    """
    path = figure_eight() if waypoints is None else np.asarray(waypoints, dtype=float)
    if len(path) == 0:
        raise ValueError("waypoint list is empty")
    rng = np.random.default_rng(seed)
    L = vp.l_f + vp.l_r
    dmax = math.radians(vp.delta_max)
    if x0 is None:
        d = path[min(1, len(path) - 1)] - path[0]
        x0 = (path[0, 0], path[0, 1], math.atan2(d[1], d[0]) if np.any(d) else 0.0)
    x = np.empty((T, 3))
    u = np.empty((T, 3))
    x[0] = x0
    progress = 0
    q_w = _noise_std(process_noise, 3)
    for k in range(T):
        delta, progress = _pure_pursuit(x[k, :2], x[k, 2], path, progress, lookahead, L, dmax)
        v = speed * (1.0 + speed_ripple * math.sin(2 * math.pi * k * dt / 10.0))
        omega = v / vp.R_w
        u[k] = (delta, omega, omega)
        if k + 1 < T:
            v_x = (u[k, 1] + u[k, 2]) * vp.R_w / 2.0
            x[k + 1] = x[k] + dt * kinematic_rhs(x[k], delta, v_x, vp.l_f, vp.l_r)
            if q_w is not None:
                x[k + 1] += rng.normal(0.0, 1.0, 3) * q_w
    y = dipole_field(x[:, :2], (vp.m_X, vp.m_Y), vp.r0)
    q_eta = _noise_std(measurement_noise, 2)
    if q_eta is not None:
        y = y + rng.normal(0.0, 1.0, y.shape) * q_eta
    return Trajectory(dt, np.arange(T) * dt, u, y, x, vp.as_dict(), {"noise": seed}, name)


def _noise_std(cov, n):
    if cov is None:
        return None
    cov = np.broadcast_to(np.asarray(cov, dtype=float), (n,))
    if not np.any(cov > 0):
        return None
    return np.sqrt(cov)


def vehicle_family(N: int, seed: int, T: int = 400, **kwargs) -> list[Trajectory]:
    params = sample_family(VEHICLE_RANGES, N, seed)
    return [simulate_vehicle(VehicleParams(**pp), T=T, seed=seed * 1000 + i, name=f"vehicle_{i:03d}", **kwargs)
            for i, pp in enumerate(params)]


# ----------------------------------------------------------------------------
# cone-invariant linear system


@dataclass
class ConeLinearSystem:
    """``z+ = A z + B u`` with nonnegative ``A``, ``B``, ``u``; ``x = T z``, ``y = C x``.

    The state stays in ``cone(T) = {x : G x <= 0}`` with ``G = -inv(T)``.
    """

    A: np.ndarray
    B: np.ndarray
    T: np.ndarray
    C: np.ndarray

    @property
    def G(self):
        return -np.linalg.inv(self.T)

    @property
    def R(self):
        return self.T.copy()

    @classmethod
    def random(cls, seed: int, angle: float | None = None, decay: float = 0.9) -> "ConeLinearSystem":
        rng = np.random.default_rng(seed)
        A = rng.uniform(0.0, 1.0, (2, 2))
        A *= decay / max(abs(np.linalg.eigvals(A)))
        B = rng.uniform(0.1, 1.0, (2, 1))
        a = rng.uniform(0.3, 1.2) if angle is None else angle
        rot = rng.uniform(0, 2 * np.pi)
        T = np.column_stack([[math.cos(rot), math.sin(rot)], [math.cos(rot + a), math.sin(rot + a)]])
        C = rng.normal(size=(1, 2))
        return cls(A, B, T, C)

    def simulate(self, T: int, seed: int, measurement_noise: float = 1e-4, name: str = "") -> Trajectory:
        rng = np.random.default_rng(seed)
        u = rng.uniform(0.0, 1.0, (T, self.B.shape[1]))
        z = np.zeros((T, 2))
        z[0] = rng.uniform(0.0, 1.0, 2)
        for k in range(T - 1):
            z[k + 1] = self.A @ z[k] + self.B @ u[k]
        x = z @ self.T.T
        y = x @ self.C.T + rng.normal(0.0, math.sqrt(measurement_noise), (T, self.C.shape[0]))
        params = {"A": self.A, "B": self.B, "T": self.T, "C": self.C}
        return Trajectory(1.0, np.arange(T, dtype=float), u, y, x, _jsonable(params), {"noise": seed}, name)
