import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st

from lbebm import numerics as nx
from lbebm.errors import DataError, DimensionError, NumericalError, TapeUsageError


def store(**arrays):
    p = nx.ParamStore()
    for k, v in arrays.items():
        p.add(k.replace("_", "."), v)
    return p


# ---------------------------------------------------------------------------
# ParamStore
# ---------------------------------------------------------------------------


def test_paramstore_rejects_duplicate_names():
    p = store(a_W=np.zeros(2))
    with pytest.raises(KeyError):
        p.add("a.W", np.zeros(2))


def test_paramstore_grads_match_value_shapes():
    p = nx.ParamStore()
    p.init_mlp("net", [3, 4, 2], np.random.default_rng(0))
    assert p.names() == ["net.0.W", "net.0.b", "net.1.W", "net.1.b"]
    for name, value in p.items():
        assert p.grad(name).shape == value.shape


def test_set_value_checks_shape():
    p = store(a_W=np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        p.set_value("a.W", np.zeros(3))


def test_glorot_bounds():
    p = nx.ParamStore()
    p.init_dense("l", 30, 20, np.random.default_rng(1))
    lim = np.sqrt(6 / 50)
    assert np.abs(p.value("l.W")).max() <= lim
    assert np.all(p.value("l.b") == 0)


# ---------------------------------------------------------------------------
# mlp_forward
# ---------------------------------------------------------------------------


def test_mlp_zero_weights_give_zero_output():
    p = store(l0_W=np.zeros((3, 4)), l0_b=np.zeros(4), l1_W=np.zeros((4, 2)), l1_b=np.zeros(2))
    tape = nx.Tape()
    out = nx.mlp_forward(np.random.default_rng(0).normal(size=(5, 3)), ["l0", "l1"], p, tape)
    assert np.array_equal(out.value, np.zeros((5, 2)))


def test_mlp_single_identity_layer():
    p = store(l_W=np.eye(2), l_b=np.zeros(2))
    out = nx.mlp_forward(np.array([[1.0, 2.0]]), ["l"], p, nx.Tape())
    assert np.array_equal(out.value, [[1.0, 2.0]])


def test_mlp_two_layers_by_hand():
    W0 = np.array([[1.0, -2.0], [0.5, 3.0]])
    b0 = np.array([0.25, 1.0])
    W1 = np.array([[2.0, 1.0], [-1.0, 0.5]])
    b1 = np.array([0.0, -0.5])
    p = store(a_W=W0, a_b=b0, c_W=W1, c_b=b1)
    out = nx.mlp_forward(np.array([[1.0, 0.0]]), ["a", "c"], p, nx.Tape()).value
    # hidden pre-activation: (1*1 + 0*0.5 + 0.25, 1*-2 + 0*3 + 1) = (1.25, -1); relu -> (1.25, 0)
    # output: (1.25*2 + 0*-1 + 0, 1.25*1 + 0*0.5 - 0.5) = (2.5, 0.75); no output nonlinearity
    assert np.allclose(out, [[2.5, 0.75]], rtol=0, atol=1e-15)


def test_mlp_shape_error_names_layer():
    p = store(first_W=np.zeros((3, 4)), first_b=np.zeros(4), second_W=np.zeros((5, 2)), second_b=np.zeros(2))
    with pytest.raises(DimensionError, match="second"):
        nx.mlp_forward(np.zeros((1, 3)), ["first", "second"], p, nx.Tape())


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_empty_tape_backward_is_noop():
    p = store(a=np.ones(3))
    tape = nx.Tape()
    loss = tape.constant(1.0)
    nx.backward(loss, tape, p)
    assert np.array_equal(p.grad("a"), np.zeros(3))


def test_sum_of_parameter_vector_gives_ones():
    p = store(v=np.array([0.3, -1.0, 2.0]))
    tape = nx.Tape()
    nx.backward(nx.sum_all(tape.param(p, "v")), tape, p)
    assert np.array_equal(p.grad("v"), np.ones(3))


def test_half_squared_norm_gradient_formula():
    rng = np.random.default_rng(3)
    W = rng.normal(size=(3, 4))
    x = rng.normal(size=(4, 1))
    p = store(W=W)
    tape = nx.Tape()
    y = nx.matmul(tape.param(p, "W"), x)
    nx.backward(nx.mul(nx.sum_all(nx.square(y)), 0.5), tape, p)
    assert np.allclose(p.grad("W"), W @ x @ x.T, rtol=1e-13, atol=1e-14)


def test_loss_from_other_tape_is_usage_error():
    p = store(v=np.ones(2))
    t1, t2 = nx.Tape(), nx.Tape()
    loss = nx.sum_all(t1.param(p, "v"))
    with pytest.raises(TapeUsageError):
        nx.backward(loss, t2, p)


def test_non_scalar_loss_is_usage_error():
    p = store(v=np.ones(2))
    tape = nx.Tape()
    with pytest.raises(TapeUsageError):
        tape.backward(tape.param(p, "v"), p)


def test_backward_accumulates_unless_cleared():
    p = store(v=np.array([1.0, 2.0]))
    for _ in range(2):
        tape = nx.Tape()
        tape.backward(nx.sum_all(nx.square(tape.param(p, "v"))), p)
    assert np.array_equal(p.grad("v"), 2 * 2 * p.value("v"))


def _random_net(seed):
    rng = np.random.default_rng(seed)
    p = nx.ParamStore()
    names = p.init_mlp("n", [3, 5, 4, 2], rng)
    for name in p.names():
        if name.endswith(".b"):
            p.set_value(name, rng.normal(0, 0.3, p.value(name).shape))
    x = rng.normal(size=(6, 3))
    t = rng.normal(size=(6, 2))

    def build(params, tape):
        out = nx.mlp_forward(x, names, params, tape)
        return nx.mul(nx.sum_all(nx.square(nx.sub(out, t))), 0.5)

    return p, build


@pytest.mark.parametrize("seed", range(5))
def test_small_net_matches_finite_differences(seed):
    p, build = _random_net(seed)
    report = nx.grad_check(build, p, tolerance=1e-6)
    assert report.passed, report.lines()


def test_repeated_backward_is_deterministic():
    p, build = _random_net(0)
    g1 = nx.analytic_grads(build, p, p.names())
    g2 = nx.analytic_grads(build, p, p.names())
    for n in p.names():
        assert np.array_equal(g1[n], g2[n])


def test_gradcheck_flags_injected_fault():
    p, build = _random_net(1)
    g = nx.analytic_grads(build, p, ["n.0.W"])["n.0.W"]
    g[0, 0] += 0.5
    report = nx.grad_check(build, p, 1e-6, grad_override={"n.0.W": g})
    assert report.failures == ["n.0.W"]
    assert report.worst_index["n.0.W"] == (0, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
@example(1, 4, 242)  # a nearly cancelling bias gradient: differencing noise ~2e-6 relative
def test_broadcast_add_mul_gradients(rows, cols, seed):
    rng = np.random.default_rng(seed)
    p = store(a=rng.normal(size=(rows, cols)), b=rng.normal(size=(cols,)))
    w = rng.normal(size=(rows, cols))

    def build(params, tape):
        a, b = tape.param(params, "a"), tape.param(params, "b")
        return nx.sum_all(nx.mul(nx.mul(nx.add(a, b), nx.exp(nx.mul(b, 0.3))), w))

    assert nx.grad_check(build, p, 1e-5).passed


def test_masked_softmax_rows_and_gradient():
    rng = np.random.default_rng(2)
    mask = np.array([[1, 1, 0], [0, 1, 0], [1, 1, 1]], dtype=bool)
    p = store(l=rng.normal(size=(3, 3)))
    w = rng.normal(size=(3, 3))
    out = nx.masked_softmax(nx.Tape().input(p.value("l")), mask).value
    assert np.allclose(out.sum(1), 1.0)
    assert np.all(out[~mask] == 0)

    def build(params, tape):
        return nx.sum_all(nx.mul(nx.masked_softmax(tape.param(params, "l"), mask), w))

    assert nx.grad_check(build, p, 1e-6).passed


def test_matmul_dimension_error():
    tape = nx.Tape()
    with pytest.raises(DimensionError):
        nx.matmul(tape.input(np.zeros((2, 3))), tape.input(np.zeros((2, 3))))


# ---------------------------------------------------------------------------
# KL helpers
# ---------------------------------------------------------------------------


def test_kl_std_normal_zero_at_prior_and_closed_form():
    tape = nx.Tape()
    mu = tape.input(np.array([[0.0, 0.0], [1.0, -2.0]]))
    lv = tape.input(np.array([[0.0, 0.0], [np.log(4.0), 0.0]]))
    kl = nx.gaussian_kl_std_normal(mu, lv).value
    assert kl[0] == 0.0
    expected = 0.5 * ((4 + 1 - 1 - np.log(4)) + (1 + 4 - 1 - 0))
    assert np.isclose(kl[1], expected, rtol=1e-14)


def test_kl_general_matches_monte_carlo():
    rng = np.random.default_rng(0)
    mq, lq, mp, lp = np.array([0.5]), np.array([-0.4]), np.array([-0.2]), np.array([0.3])
    tape = nx.Tape()
    kl = nx.gaussian_kl(*(tape.input(v[None]) for v in (mq, lq, mp, lp))).value[0]
    x = mq + np.exp(lq / 2) * rng.standard_normal(400_000)

    def logn(x, m, lv):
        return -0.5 * (np.log(2 * np.pi) + lv + (x - m) ** 2 / np.exp(lv))

    mc = np.mean(logn(x, mq, lq) - logn(x, mp, lp))
    assert abs(kl - mc) < 5e-3


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = store(a=np.array([1.0, -2.0]))
    nx.adam_step(p, nx.AdamState())
    assert np.array_equal(p.value("a"), [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = store(a=np.array([0.7]))
    p.grad("a")[...] = 1.0
    nx.adam_step(p, nx.AdamState(lr=3e-4))
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert np.isclose(0.7 - p.value("a")[0], 3e-4 / (1 + 1e-8), rtol=1e-12)


def test_adam_two_steps_hand_unrolled():
    lr, b1, b2, eps = 3e-4, 0.9, 0.999, 1e-8
    g = 0.37
    p = store(a=np.array([1.0]))
    state = nx.AdamState(lr=lr)
    x = 1.0
    m = v = 0.0
    for t in (1, 2):
        p.grad("a")[...] = g
        nx.adam_step(p, state)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    assert state.step == 2
    assert np.isclose(state.v["a"][0], (1 - b2) * g * g * (1 + b2), rtol=1e-14)
    assert np.isclose(p.value("a")[0], x, rtol=1e-14)
    assert np.array_equal(p.grad("a"), [g])  # caller clears


def test_adam_rejects_non_finite_gradient():
    p = store(good=np.zeros(2), bad=np.zeros(2))
    p.grad("bad")[1] = np.nan
    before = p.value("good").copy()
    with pytest.raises(NumericalError, match="bad"):
        nx.adam_step(p, nx.AdamState())
    assert np.array_equal(p.value("good"), before)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    p = nx.ParamStore()
    p.init_mlp("x", [3, 4, 1], np.random.default_rng(0))
    path = tmp_path / "c.ckpt"
    nx.save_checkpoint(p, path)
    q = nx.load_checkpoint(path)
    assert q.names() == p.names()
    for n in p.names():
        assert np.array_equal(q.value(n), p.value(n).astype(np.float32).astype(np.float64))


def test_checkpoint_framing_bytes():
    blob = nx.encode_arrays([("ab", np.array([[1.0, 2.0]]))])
    expected = (b"LBEBM1" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + b"ab"
                + (2).to_bytes(4, "little") + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                + np.array([1.0, 2.0], dtype="<f4").tobytes())
    assert blob == expected


def test_checkpoint_rejects_corruption():
    blob = nx.encode_arrays([("a", np.ones(3))])
    with pytest.raises(DataError):
        nx.decode_arrays(b"XXXXXX" + blob[6:])
    with pytest.raises(DataError):
        nx.decode_arrays(blob[:-2])
    with pytest.raises(DataError):
        nx.decode_arrays(blob + b"\0")
