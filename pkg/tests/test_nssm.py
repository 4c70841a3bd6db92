import numpy as np
import pytest

from metassm import autodiff as ad
from metassm import constraints as cons
from metassm import nssm, systems
from metassm.layers import WeightSet
from metassm.nssm import ArchitectureMismatch, NssmCase1, NssmCase2, Normalizer
from conftest import flat_fd_check


def np_swish(v):
    return v / (1.0 + np.exp(-v))


def np_mlp(layers, x, act=np_swish):
    """Plain numpy oracle: hidden layers use ``act``, the last is linear."""
    h = x
    for i, (W, b) in enumerate(layers):
        h = h @ W.T + b
        if i < len(layers) - 1:
            h = act(h)
    return h


def small_case1(**kw):
    args = dict(n_u=1, n_y=2, H=3, H_p=4, n_psi=5, encoder_hidden=(6,), transition_hidden=(6,),
                decoder_hidden=(6,))
    args.update(kw)
    return NssmCase1(**args)


def small_case2(**kw):
    args = dict(n_x=3, n_u=2, n_y=2, n_psi=5, encoder_hidden=(6,), transition_hidden=(6,),
                decoder_x_hidden=(6,), decoder_y_hidden=(6,), n_steps=3)
    args.update(kw)
    return NssmCase2(**args)


def randomize(ws, rng, scale=0.5):
    return ws.from_flat(rng.normal(size=ws.flat().shape) * scale)


# ---- Case I


def test_case1_shapes(rng):
    m = small_case1()
    ws = m.init(0)
    assert m.enc_in == 9
    psi = ad.value_of(nssm.encode_case1(m, ws, rng.normal(size=(3, 1)), rng.normal(size=(3, 2))))
    assert psi.shape == (5,)
    out = nssm.rollout_predict_case1(m, ws, rng.normal(size=(7, 3, 1)), rng.normal(size=(7, 3, 2)))
    assert ad.value_of(out).shape == (7, 4, 2)


def test_case1_zero_weights_give_bias_image():
    m = small_case1()
    ws = m.init(0)
    zero = ws.from_flat(np.zeros_like(ws.flat()))
    assert np.array_equal(ad.value_of(nssm.encode_case1(m, zero, np.ones((3, 1)), np.ones((3, 2)))), np.zeros(5))


def test_case1_window_one_is_plain_mlp(rng):
    m = small_case1(H=1)
    ws = randomize(m.init(0), rng)
    u, y = rng.normal(size=(1, 1)), rng.normal(size=(1, 2))
    want = np_mlp(ws.subnet("encoder"), np.concatenate([u[0], y[0]]))
    assert np.allclose(ad.value_of(nssm.encode_case1(m, ws, u, y)), want, rtol=1e-13, atol=1e-14)


def test_case1_encoder_matches_oracle(rng):
    m = small_case1()
    ws = randomize(m.init(1), rng)
    U, Y = rng.normal(size=(3, 1)), rng.normal(size=(3, 2))
    # history is stacked as all inputs first, then all outputs
    want = np_mlp(ws.subnet("encoder"), np.concatenate([U.ravel(), Y.ravel()]))
    assert np.allclose(ad.value_of(nssm.encode_case1(m, ws, U, Y)), want, rtol=1e-13, atol=1e-14)


def test_case1_wrong_window():
    m = small_case1()
    with pytest.raises(ValueError, match="H=3"):
        nssm.encode_case1(m, m.init(0), np.zeros((2, 1)), np.zeros((2, 2)))


@pytest.mark.parametrize("residual", [False, True])
def test_case1_rollout_manual_unrolling(rng, residual):
    m = small_case1(residual=residual)
    ws = randomize(m.init(2), rng)
    U, Y = rng.normal(size=(3, 1)), rng.normal(size=(3, 2))
    psi = np_mlp(ws.subnet("encoder"), np.concatenate([U.ravel(), Y.ravel()]))
    want = []
    for _ in range(3):
        nxt = np_mlp(ws.subnet("transition"), psi)
        psi = psi + nxt if residual else nxt
        want.append(np_mlp(ws.subnet("decoder"), psi))
    got = ad.value_of(nssm.rollout_predict_case1(m, ws, U, Y, H_p=3))
    assert np.allclose(got, np.array(want), rtol=1e-12, atol=1e-13)
    one = ad.value_of(nssm.rollout_predict_case1(m, ws, U, Y, H_p=1))
    assert np.allclose(one[0], want[0], rtol=1e-12, atol=1e-13)


def test_case1_identity_transition_constant_decoder():
    m = small_case1(transition_hidden=(), decoder_hidden=(), activation="tanh")
    ws = m.init(0)
    ws = ws.replace({"transition.0": (np.eye(5), np.zeros(5)), "decoder.0": (np.zeros((2, 5)), np.array([0.3, -1.0]))})
    out = ad.value_of(nssm.rollout_predict_case1(m, ws, np.ones((3, 1)), np.ones((3, 2)), H_p=6))
    assert np.all(out == out[0]) and np.array_equal(out[0], [0.3, -1.0])


def test_loss_uy_definitions(rng):
    m = small_case1(decoder_hidden=())
    ws = m.init(0)
    ws = ws.replace({"decoder.0": (np.zeros((2, 5)), np.zeros(2))})
    batch = {"enc_in": rng.normal(size=(4, 9)), "Yf": np.ones((4, 4, 2))}
    assert float(ad.value_of(nssm.loss_uy(m, ws, batch))) == 1.0
    batch["Yf"] = np.zeros((4, 4, 2))
    assert float(ad.value_of(nssm.loss_uy(m, ws, batch))) == 0.0
    with pytest.raises(ValueError, match="empty"):
        nssm.loss_uy(m, ws, {"enc_in": np.zeros((0, 9)), "Yf": np.zeros((0, 4, 2))})


def test_loss_uy_matches_summation_oracle(rng):
    m = small_case1()
    ws = randomize(m.init(3), rng)
    batch = {"enc_in": rng.normal(size=(5, 9)), "Yf": rng.normal(size=(5, 4, 2))}
    total = 0.0
    for n in range(5):
        psi = np_mlp(ws.subnet("encoder"), batch["enc_in"][n])
        for k in range(4):
            psi = np_mlp(ws.subnet("transition"), psi)
            total += np.sum((np_mlp(ws.subnet("decoder"), psi) - batch["Yf"][n, k]) ** 2)
    assert abs(float(ad.value_of(nssm.loss_uy(m, ws, batch))) - total / 40) < 1e-12


def _flat_grad(loss_fn, ws):
    tape = ad.Tape()
    wv = ws.variables(tape)
    return np.concatenate([np.ravel(g) for g in tape.grad(loss_fn(wv), wv.tensors())])


@pytest.mark.parametrize("activation", ["swish", "tanh"])
def test_loss_uy_gradient_fd(rng, activation):
    m = small_case1(activation=activation, encoder_hidden=(8,), transition_hidden=(8,), decoder_hidden=(8,))
    ws = randomize(m.init(4), rng)
    batch = {"enc_in": rng.normal(size=(6, 9)), "Yf": rng.normal(size=(6, 4, 2))}
    loss = lambda w: nssm.loss_uy(m, w, batch)
    g = _flat_grad(loss, ws)
    err = flat_fd_check(lambda f: float(ad.value_of(loss(ws.from_flat(f)))), ws.flat(), g, range(len(g)))
    assert err < 1e-5


def test_windows_case1_layout():
    m = small_case1(H=2, H_p=3, n_u=1, n_y=1)
    T = 10
    tr = systems.Trajectory(1.0, np.arange(T), np.arange(T) * 10.0, np.arange(T) * 1.0)
    w = nssm.windows_case1(m, tr)
    assert w["enc_in"].shape == (T - 2 - 3 + 1, 4) and w["Yf"].shape == (6, 3, 1)
    assert np.array_equal(w["enc_in"][0], [0.0, 10.0, 0.0, 1.0])
    assert np.array_equal(w["Yf"][0, :, 0], [2.0, 3.0, 4.0])
    with pytest.raises(ValueError, match="no complete window"):
        nssm.windows_case1(m, tr.slice(0, 4))


def test_predict_blocks_cover_consecutive_samples(rng):
    m = small_case1(H=2, H_p=3, n_u=1, n_y=1)
    ws = m.init(0)
    tr = systems.Trajectory(1.0, np.arange(20), rng.normal(size=20), rng.normal(size=20))
    idx, yp = nssm.predict_blocks_case1(m, ws, tr, 5)
    assert idx[0] == 5 and np.array_equal(np.diff(idx), np.ones(len(idx) - 1))
    assert len(yp) == len(idx) == 15
    direct = ad.value_of(nssm.rollout_predict_case1(m, ws, tr.u[3:5], tr.y[3:5], 3))
    assert np.allclose(yp[:3], direct)


# ---- Case II


def test_case2_zero_decoders_give_biases(rng):
    m = small_case2()
    ws = m.init(0)
    bx, by = np.array([0.1, -0.2, 0.3]), np.array([1.0, 2.0])
    ws = ws.replace({"decoder_x.1": (np.zeros((3, 6)), bx), "decoder_y.1": (np.zeros((2, 6)), by)})
    x1, y1 = nssm.step_case2(m, ws, rng.normal(size=3), rng.normal(size=2))
    assert np.array_equal(ad.value_of(x1), bx) and np.array_equal(ad.value_of(y1), by)


def test_case2_staged_oracle(rng):
    m = small_case2()
    ws = randomize(m.init(5), rng)
    x, u = rng.normal(size=3), rng.normal(size=2)
    psi = np_mlp(ws.subnet("transition"), np_mlp(ws.subnet("encoder"), np.concatenate([x, u])))
    x1, y1 = nssm.step_case2(m, ws, x, u)
    assert np.allclose(ad.value_of(x1), np_mlp(ws.subnet("decoder_x"), psi), rtol=1e-13, atol=1e-14)
    assert np.allclose(ad.value_of(y1), np_mlp(ws.subnet("decoder_y"), psi), rtol=1e-13, atol=1e-14)


def test_case2_conic_outputs_stay_in_cone(rng):
    G, R = cons.rotated_cone(0.7, 2.0)
    m = small_case2(n_x=2, n_u=1, conic=cons.ConicConstraint(G, R))
    ws = randomize(m.init(6), rng, 1.0)
    assert cons.CONIC_FC in ws
    x1, _ = nssm.step_case2(m, ws, rng.normal(size=(500, 2)) * 3, rng.normal(size=(500, 1)))
    assert (ad.value_of(x1) @ G.T).max() <= 1e-9


def test_case2_conic_missing_layer(rng):
    m = small_case2(n_x=2, n_u=1, conic=cons.ConicConstraint(-np.eye(2), np.eye(2)))
    ws = m.init(0)
    stripped = WeightSet((p, wb) for p, wb in ws.items() if p != cons.CONIC_FC)
    with pytest.raises(ValueError, match="conic.fc"):
        nssm.step_case2(m, stripped, np.ones(2), np.ones(1))


def test_case2_config_errors():
    with pytest.raises(ValueError):
        small_case2(output="magic")
    with pytest.raises(ValueError):
        small_case2(output="curlfree", activation="relu")
    with pytest.raises(ValueError):
        small_case2(output="curlfree", coords=(0, 1, 2))
    with pytest.raises(ValueError):
        small_case2(conic=cons.ConicConstraint(-np.eye(2), np.eye(2)))


def test_loss_uxy_perfect_model_is_zero():
    m = small_case2(n_x=1, n_u=1, n_y=1, n_psi=1, encoder_hidden=(), transition_hidden=(),
                    decoder_x_hidden=(), decoder_y_hidden=(), n_steps=2)
    ws = m.init(0)
    # x_{t+1} = x_t, y = x, with the input ignored
    one = (np.array([[1.0, 0.0]]), np.zeros(1))
    ws = ws.replace({"encoder.0": one, "transition.0": (np.eye(1), np.zeros(1)),
                     "decoder_x.0": (np.eye(1), np.zeros(1)), "decoder_y.0": (np.eye(1), np.zeros(1))})
    X = np.full((4, 3, 1), 0.7)
    batch = {"X": X, "U": np.ones((4, 3, 1)), "Y": X.copy()}
    parts = [float(ad.value_of(p)) for p in nssm.loss_uxy_parts(m, ws, batch)]
    assert parts == [0.0, 0.0, 0.0, 0.0]


@pytest.mark.parametrize("output_path", ["latent", "measurement"])
def test_loss_uxy_matches_three_term_oracle(rng, output_path):
    m = small_case2(output_path=output_path)
    ws = randomize(m.init(7), rng)
    N, S = 4, 3
    batch = {"X": rng.normal(size=(N, S + 1, 3)), "U": rng.normal(size=(N, S + 1, 2)),
             "Y": rng.normal(size=(N, S + 1, 2))}
    enc = lambda x, u: np_mlp(ws.subnet("encoder"), np.concatenate([x, u]))
    dx = lambda p: np_mlp(ws.subnet("decoder_x"), p)
    dy = lambda p: np_mlp(ws.subnet("decoder_y"), p)
    tr = lambda p: np_mlp(ws.subnet("transition"), p)
    recon = px = py = 0.0
    for n in range(N):
        X, U, Y = batch["X"][n], batch["U"][n], batch["Y"][n]
        for k in range(S + 1):
            recon += np.sum((dx(enc(X[k], U[k])) - X[k]) ** 2)
            if output_path == "measurement":
                py += np.sum((dy(enc(X[k], U[k])) - Y[k]) ** 2)
        x = X[0]
        for k in range(S):
            psi = tr(enc(x, U[k]))
            if output_path == "latent":
                py += np.sum((dy(psi) - Y[k + 1]) ** 2)
            x = dx(psi)
            px += np.sum((x - X[k + 1]) ** 2)
    n_py = N * S * 2 if output_path == "latent" else N * (S + 1) * 2
    want = (recon / (N * (S + 1) * 3), px / (N * S * 3), py / n_py)
    total, *parts = [float(ad.value_of(p)) for p in nssm.loss_uxy_parts(m, ws, batch)]
    assert np.allclose(parts, want, rtol=1e-12, atol=0)
    assert min(parts) >= 0 and abs(total - sum(parts)) <= 1e-12


@pytest.mark.parametrize("kw", [{}, {"output": "curlfree", "output_path": "measurement"},
                                {"n_x": 2, "n_u": 1, "conic": cons.ConicConstraint(*cons.rotated_cone(1.0))}])
def test_loss_uxy_gradient_fd(rng, kw):
    m = small_case2(**{"encoder_hidden": (8,), **kw})
    ws = randomize(m.init(8), rng)
    N = 3
    batch = {"X": rng.normal(size=(N, 4, m.n_x)), "U": rng.normal(size=(N, 4, m.n_u)),
             "Y": rng.normal(size=(N, 4, m.n_y))}
    loss = lambda w: nssm.loss_uxy(m, w, batch)
    g = _flat_grad(loss, ws)
    err = flat_fd_check(lambda f: float(ad.value_of(loss(ws.from_flat(f)))), ws.flat(), g, range(len(g)))
    assert err < 1e-5


def test_case2_curlfree_step_outputs(rng):
    m = small_case2(output="curlfree", output_path="measurement", n_u=1)
    ws = randomize(m.init(9), rng)
    heading, u = 0.3, np.array([0.2])

    def field(P):
        X = np.column_stack([P, np.full(len(P), heading)])
        return ad.value_of(nssm.measurement_map(m, ws, X, np.tile(u, (len(P), 1))))

    g = np.linspace(-1.5, 1.5, 12)
    P = np.array([(a, b) for a in g for b in g])
    curl = cons.discrete_curl(field, P, h=1e-4)
    assert np.max(np.abs(curl) / (np.linalg.norm(field(P), axis=1) + 1e-9)) < 1e-6


def test_rollout_deterministic(rng):
    m = small_case2()
    ws = randomize(m.init(10), rng)
    U = rng.normal(size=(8, 2))
    a = nssm.rollout_case2(m, ws, np.ones(3), U)
    b = nssm.rollout_case2(m, ws, np.ones(3), U)
    assert all(np.array_equal(p, q) for p, q in zip(a, b))
    assert a[0].shape == (8, 3) and a[1].shape == (8, 2)


def test_windows_case2_layout():
    m = small_case2(n_x=1, n_u=1, n_y=1, n_steps=2)
    T = 6
    tr = systems.Trajectory(1.0, np.arange(T), np.zeros(T), np.arange(T) * 2.0, np.arange(T) * 1.0)
    w = nssm.windows_case2(m, tr)
    assert w["X"].shape == (T - 2, 3, 1)
    assert np.array_equal(w["X"][1, :, 0], [1.0, 2.0, 3.0])
    assert np.array_equal(w["Y"][1, :, 0], [2.0, 4.0, 6.0])
    no_state = systems.Trajectory(1.0, np.arange(T), np.zeros(T), np.zeros(T))
    with pytest.raises(ValueError, match="state"):
        nssm.windows_case2(m, no_state)


# ---- normalization and manifests


def test_normalizer_fit_and_invert(rng):
    data = rng.normal(3.0, 2.0, size=(500, 2))
    n = Normalizer.fit({"y": data})
    z = n.norm("y", data)
    assert np.allclose(z.mean(axis=0), 0, atol=1e-12) and np.allclose(z.std(axis=0), 1)
    assert np.allclose(n.denorm("y", z), data)
    assert n.norm("u", data) is data


def test_normalizer_shared_scale_and_no_centre(rng):
    data = rng.normal(size=(300, 3)) * [1.0, 5.0, 2.0]
    n = Normalizer.fit({"x": data}, shared={"x": [[0, 1]]}, centre={"x": False})
    assert np.all(n.shift("x") == 0)
    assert n.scale("x")[0] == n.scale("x")[1]


def test_curlfree_normalizer_shares_scales():
    trs = systems.vehicle_family(2, 0, T=60)
    m = NssmCase2(3, 3, 2, output="curlfree", output_path="measurement").fit_normalizer(trs)
    sx, sy = m.normalizer.scale("x"), m.normalizer.scale("y")
    assert sx[0] == sx[1] and sy[0] == sy[1]


@pytest.mark.parametrize("make", [small_case1, small_case2,
                                  lambda: small_case2(n_x=2, n_u=1, conic=cons.ConicConstraint(-np.eye(2), np.eye(2)))])
def test_save_load_model(tmp_path, rng, make):
    m = make().with_normalizer(Normalizer({"y": (np.array([1.0, 2.0]), np.array([3.0, 4.0]))}))
    ws = randomize(m.init(0), rng)
    nssm.save_model(tmp_path / "ck", m, ws)
    m2, ws2 = nssm.load_model(tmp_path / "ck")
    assert m2 == m
    assert np.array_equal(ws2.flat(), ws.flat())
    assert np.array_equal(m2.normalizer.scale("y"), [3.0, 4.0])


def test_architecture_mismatch_lists_layers(tmp_path):
    m = small_case1()
    nssm.save_model(tmp_path / "ck", m, m.init(0))
    other = small_case1(encoder_hidden=(7,))
    with pytest.raises(ArchitectureMismatch, match="encoder.0"):
        nssm.check_compatible(other, m.init(0))
    with pytest.raises(ArchitectureMismatch, match="missing"):
        nssm.check_compatible(small_case1(decoder_hidden=(6, 6)), m.init(0))
