"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the terminal summary (see
``conftest.py``). Tolerances are the stated ones; the desk-scale ordering
studies run at the settings in :mod:`metassm.experiments`.
"""
import time

import numpy as np
import pytest

from metassm import autodiff as ad
from metassm import constraints as cons
from metassm import ekf, experiments, meta, nssm, systems
from metassm.ekf import GaussianBelief, NoiseModel
from metassm.layers import WeightSet, init_weights, mlp_forward, mlp_specs

RESULTS = []


def report(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    return ok


# ---- 1. autodiff against central differences


def _random_mlp(rng):
    n_in = int(rng.integers(1, 5))
    hidden = tuple(int(h) for h in rng.integers(1, 17, size=int(rng.integers(0, 3))))
    act = str(rng.choice(["swish", "tanh"]))
    specs = mlp_specs(n_in, hidden, int(rng.integers(1, 4)), act)
    ws = init_weights(specs, int(rng.integers(1 << 30)))
    ws = ws.from_flat(rng.normal(size=ws.flat().shape) * 0.7)
    return specs, ws, n_in


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def test_criterion_01_autodiff_fd():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_g = worst_h = 0.0
    h = 1e-5
    for _ in range(50):
        specs, ws, n_in = _random_mlp(rng)
        x0 = rng.normal(size=n_in)
        c = rng.normal(size=specs[-1].out_dim)

        def f_of(xv, wv=ws):
            return ad.sum(ad.mul(ad.tanh(mlp_forward(wv.subnet("layer"), specs, xv)), c))

        def f_val(xv, wv=ws):
            return float(ad.value_of(f_of(xv, wv)))

        def grad_x(xv):
            tape = ad.Tape()
            v = tape.variable(xv)
            return tape.grad(f_of(v), v)

        # weights
        tape = ad.Tape()
        wv = ws.variables(tape)
        gw = np.concatenate([np.ravel(g) for g in tape.grad(f_of(x0, wv), wv.tensors())])
        flat = ws.flat()
        fd = np.array([(f_val(x0, ws.from_flat(flat + h * e)) - f_val(x0, ws.from_flat(flat - h * e))) / (2 * h)
                       for e in np.eye(len(flat))])
        worst_g = max(worst_g, _rel(gw, fd))
        # inputs
        gx = grad_x(x0)
        fdx = np.array([(f_val(x0 + h * e) - f_val(x0 - h * e)) / (2 * h) for e in np.eye(n_in)])
        worst_g = max(worst_g, _rel(gx, fdx))
        # second derivative: nested reverse mode against FD of the gradient
        H = ad.grad_nested(f_of, x0)
        fdH = np.array([(grad_x(x0 + h * e) - grad_x(x0 - h * e)) / (2 * h) for e in np.eye(n_in)]).T
        worst_h = max(worst_h, _rel(H, fdH))
    dt = time.perf_counter() - t0
    ok = worst_g < 1e-6 and worst_h < 1e-4 and dt < 60
    assert report(1, ok, f"grad rel err {worst_g:.2e} (<1e-6), 2nd-deriv rel err {worst_h:.2e} (<1e-4), "
                         f"{dt:.1f} s (<60 s)")


# ---- 2. swish and its derivatives


def test_criterion_02_swish_closed_forms():
    z = np.linspace(-10, 10, 2001)
    s = 1 / (1 + np.exp(-z))
    f0 = z * s
    f1 = s + z * s * (1 - s)
    f2 = s * (1 - s) * (2 + z * (1 - 2 * s))
    tape = ad.Tape()
    zv = tape.variable(z)
    out = ad.swish(zv)
    d1 = tape.grad(ad.sum(out), zv)
    d2 = ad.elementwise_second_derivative(ad.swish, z)
    err = max(np.max(np.abs(ad.value_of(out) - f0)), np.max(np.abs(d1 - f1)), np.max(np.abs(d2 - f2)))
    spread = float(d2.max() - d2.min())
    assert report(2, err < 1e-10 and spread > 0.1, f"max err {err:.2e} (<1e-10), range of swish'' {spread:.3f} (>0.1)")


# ---- 3. curl-free outputs


def test_criterion_03_curlfree_nssm():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = 0.0
    g = np.linspace(-2, 2, 20)
    P = np.array([(a, b) for a in g for b in g])
    for k in range(20):
        width = int(rng.integers(4, 33))
        act = str(rng.choice(["swish", "tanh"]))
        m = nssm.NssmCase2(3, 3, 2, n_psi=int(rng.integers(4, 17)), encoder_hidden=(width,) * int(rng.integers(1, 3)),
                           decoder_y_hidden=(width,), activation=act, output="curlfree", output_path="measurement")
        ws = m.init(k)
        heading, u = rng.uniform(-np.pi, np.pi), rng.normal(size=3)

        def field(Q):
            X = np.column_stack([Q, np.full(len(Q), heading)])
            return ad.value_of(nssm.measurement_map(m, ws, X, np.tile(u, (len(Q), 1))))

        curl = cons.discrete_curl(field, P, h=1e-4)
        scale = np.max(np.linalg.norm(field(P), axis=1))
        worst = max(worst, float(np.max(np.abs(curl)) / scale))
    dt = time.perf_counter() - t0
    assert report(3, worst < 1e-6 and dt < 120, f"max relative curl {worst:.2e} (<1e-6) over 20x400 points, "
                                                 f"{dt:.1f} s (<120 s)")


# ---- 4. conic feasibility


def test_criterion_04_conic_feasibility():
    rng = np.random.default_rng(4)
    pairs = [(-np.eye(2), np.eye(2)), cons.rotated_cone(0.6, 1.0), cons.rotated_cone(2.5, -2.0)]
    worst = -np.inf
    for G, R in pairs:
        c = cons.ConicConstraint(G, R)
        fc = (rng.normal(size=(2, 5)), rng.normal(size=2))
        out = cons.conic_apply(c, rng.normal(size=(10_000, 5)) * 10, fc)
        worst = max(worst, float((out @ G.T).max()))
    assert report(4, worst <= 1e-9, f"max G x component {worst:.2e} (<=1e-9) over 3 cones x 1e4 inputs")


# ---- 5. EKF on a linear NSSM against the textbook KF


def test_criterion_05_ekf_equals_kf():
    rng = np.random.default_rng(5)
    n_x, n_y, n_u, T = 3, 2, 1, 100
    A = rng.normal(size=(n_x, n_x))
    A *= 0.95 / max(abs(np.linalg.eigvals(A)))
    C, B = rng.normal(size=(n_y, n_x)), rng.normal(size=(n_x, n_u))
    m = nssm.NssmCase2(n_x, n_u, n_y, n_psi=n_x + n_u, encoder_hidden=(), transition_hidden=(),
                       decoder_x_hidden=(), decoder_y_hidden=(), activation="identity", output_path="measurement")
    # psi = [x; u]; psi+ = [A x + B u; 0]; x = [I 0] psi; y = [C 0] psi
    ws = m.init(0).replace({
        "encoder.0": (np.eye(n_x + n_u), np.zeros(n_x + n_u)),
        "transition.0": (np.block([[A, B], [np.zeros((n_u, n_x + n_u))]]), np.zeros(n_x + n_u)),
        "decoder_x.0": (np.eye(n_x, n_x + n_u), np.zeros(n_x)),
        "decoder_y.0": (np.hstack([C, np.zeros((n_y, n_u))]), np.zeros(n_y)),
    })
    Qw, Qeta = 1e-2 * np.eye(n_x), 5e-2 * np.eye(n_y)
    U = rng.normal(size=(T, n_u))
    X = np.zeros((T, n_x))
    for t in range(1, T):
        X[t] = A @ X[t - 1] + B @ U[t - 1] + rng.multivariate_normal(np.zeros(n_x), Qw)
    Y = X @ C.T + rng.normal(size=(T, n_y)) * np.sqrt(5e-2)
    x0, P0 = np.zeros(n_x), np.eye(n_x)
    res = ekf.run_filter(ekf.NssmFilterModel(m, ws), NoiseModel(Qw, Qeta), GaussianBelief(x0, P0), U, Y)
    ref_m, ref_P = ekf.kalman_filter_reference(A, C, Qw, Qeta, x0, P0, Y, B, U)
    em, eP = float(np.max(np.abs(res.means - ref_m))), float(np.max(np.abs(res.covs - ref_P)))
    assert report(5, em < 1e-9 and eP < 1e-9, f"max mean diff {em:.2e}, max cov diff {eP:.2e} (<1e-9), {T} steps")


# ---- 6. MAML on a one-parameter quadratic family


def _quad_loss(ws, batch):
    W, _ = ws["layer.0"]
    return ad.sum(ad.mul(batch["a"], ad.square(ad.sub(W, batch["c"]))))


def test_criterion_06_maml_analytic_and_full_mask():
    a_c, c_c, a_t, c_t, beta, w0 = 1.7, 0.4, 0.6, -1.3, 0.05, 0.9
    ws = WeightSet({"layer.0": (np.array([[w0]]), np.zeros(1))})
    task = meta.TaskSplit((0, 1), (1, 2), "q", {"a": np.array(a_c), "c": np.array(c_c)},
                          {"a": np.array(a_t), "c": np.array(c_t)})
    cfg = meta.MetaConfig("maml", beta_in=beta, M=1, clip_norm=None)
    g, _ = meta.task_gradient(ws, task, cfg, _quad_loss)
    # d/dw L_t(w - beta L_c'(w)) = L_t'(w1) (1 - beta L_c''(w))
    w1 = w0 - beta * 2 * a_c * (w0 - c_c)
    want = 2 * a_t * (w1 - c_t) * (1 - beta * 2 * a_c)
    e_analytic = abs(g[0] - want)

    trs = systems.vdp_family(4, 6, T_fixed=4.0)
    m = nssm.NssmCase1(0, 2, 4, 3, n_psi=4, encoder_hidden=(6,), transition_hidden=(6,),
                       decoder_hidden=(6,)).fit_normalizer(trs)
    loss = lambda w, b: nssm.loss_uy(m, w, b)
    win = lambda tr, s, e: nssm.windows_case1(m, tr, stride=3, start=s, stop=e)
    tasks = [meta.partition(tr, "train", m.H, m.H_p, 0.3, i, 0.3, f"s{i}").with_batches(win, tr)
             for i, tr in enumerate(trs)]
    w = m.init(1)
    maml = meta.MetaConfig("maml", beta_in=0.05, M=2, clip_norm=None)
    anil = meta.MetaConfig("anil", beta_in=0.05, M=2, clip_norm=None, inner_mask="*")
    g1, _ = meta.meta_gradient(w, tasks, maml, loss)
    g2, _ = meta.meta_gradient(w, tasks, anil, loss, mask=w.paths)
    e_mask = float(np.max(np.abs(g1 - g2)))
    ok = e_analytic < 1e-8 and e_mask <= 1e-12
    assert report(6, ok, f"analytic outer gradient err {e_analytic:.2e} (<1e-8), full-mask vs MAML {e_mask:.2e} "
                         f"(<=1e-12)")


# ---- 7. van der Pol ordering, 10 seeds


@pytest.fixture(scope="module")
def vdp_runs():
    return [experiments.vdp_ordering(seed) for seed in range(10)]


def test_criterion_07_vdp_ordering(vdp_runs):
    med = {k: float(np.median([r[k] for r in vdp_runs])) for k in ("maml", "xfer", "all_noadapt", "ssm")}
    secs = sum(r["seconds"] for r in vdp_runs)
    ok = med["maml"] < med["xfer"] and med["maml"] < med["all_noadapt"] and med["maml"] < med["ssm"]
    detail = ", ".join(f"{k} {v:.4g}" for k, v in med.items())
    assert report(7, ok, f"median test SSE: {detail}; need maml below the other three; {secs / 60:.1f} min")


# ---- 8. ANIL ablation, 5 seeds


def test_criterion_08_anil_ablation():
    runs = [experiments.anil_ablation(seed) for seed in range(5)]
    rows = list(runs[0])
    med = {r: {f: float(np.median([run[r][f] for run in runs])) for f in runs[0][r]} for r in rows}
    small_worse = all(med[r][0.1] > max(med[r][f] for f in med[r] if f >= 0.3) for r in rows)
    anil_rows = [r for r in rows if r.startswith("ANIL")]
    maml_best = all(med["MAML"][f] <= med[r][f] for r in anil_rows for f in med[r])
    table = "; ".join(f"{r} " + "/".join(f"{v:.3g}" for v in med[r].values()) for r in rows)
    assert report(8, small_worse and maml_best,
                  f"10% worse than >=30% for every row: {small_worse}; MAML <= every ANIL: {maml_best}; "
                  f"median RMSE at 10/20/30/50%: {table}")


# ---- 9. Bouc-Wen ordering, 5 seeds


def test_criterion_09_boucwen_ordering():
    runs = [experiments.boucwen_ordering(seed) for seed in range(5)]
    med = {k: float(np.median([r[k] for r in runs])) for k in ("meta", "universal", "sup_tr20")}
    ok = med["meta"] < med["universal"] and med["meta"] <= med["sup_tr20"]
    assert report(9, ok, "median test RMSE: " + ", ".join(f"{k} {v:.3e}" for k, v in med.items()))


# ---- 10. localization with the meta-adapted EKF


def test_criterion_10_localization():
    out = experiments.localization_study(0)
    wins = sum(r["meta"] < r["no_meta"] for r in out["rows"])
    p = np.array([[0.0, 0.0], [0.3, -0.1], [-0.5, 0.6]])
    M = np.array([0.8, -1.3])
    interior = np.array_equal(systems.dipole_field(p, M, 1.0), np.tile(-M / 3.0, (3, 1)))
    errs = ", ".join(f"{r['meta']:.1f}/{r['no_meta']:.1f}" for r in out["rows"])
    assert report(10, wins >= 4 and interior, f"meta beats no-meta on {wins}/5 targets (need >=4), cumulative "
                                              f"error meta/no-meta {errs}; interior field -M/3 exact: {interior}")
