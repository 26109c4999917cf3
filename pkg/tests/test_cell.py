import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cse.cell import (NodeInputs, assemble_s, cell_forward, init_params, layer_norm, node_backward,
                      node_forward, param_shapes, zero_params)
from cse.errors import InvalidArgument


def random_inputs(rng, d, d_x, scale=1.0):
    return NodeInputs(rng.normal(size=d_x) * scale, rng.normal(size=(4, d)) * scale,
                      rng.normal(size=(5, d)) * scale, rng.dirichlet(np.ones(5), size=4))


def random_params(rng, d=8, d_x=6):
    p = init_params(d, d_x, rng, dtype=np.float64)
    for name, v in p.tensors().items():
        if not name.startswith("W_"):
            v[...] = rng.normal(0, 0.5, size=v.shape)
    p.ln_gain += 1.0
    return p


def test_assemble_width_and_layout():
    d, d_x = 8, 6
    zero = NodeInputs(np.zeros(d_x), np.zeros((4, d)), np.zeros((5, d)), np.zeros((4, 5)))
    s = assemble_s(zero)
    assert s.shape == (66,) and not s.any()
    h = np.zeros((5, d))
    h[0] = 1.0
    s = assemble_s(NodeInputs(np.zeros(d_x), np.zeros((4, d)), h, np.zeros((4, 5))))
    nz = np.flatnonzero(s)
    start = d_x + 20
    assert nz.tolist() == list(range(start, start + d))


def test_assemble_rejects_mismatched_widths():
    with pytest.raises(InvalidArgument):
        assemble_s(NodeInputs(np.zeros(6), np.zeros((4, 8)), np.zeros((5, 7)), np.zeros((4, 5))))


def test_layer_norm_values():
    out = layer_norm(np.array([1.0, 2.0, 3.0, 4.0]), np.ones(4), np.zeros(4), 1e-5)
    np.testing.assert_allclose(out, [-1.34163, -0.44721, 0.44721, 1.34163], atol=1e-5)
    const = layer_norm(np.full(6, 3.7), np.ones(6), np.zeros(6), 1e-5)
    np.testing.assert_allclose(const, 0.0, atol=1e-6)


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=16), st.floats(-2, 2))
def test_layer_norm_mean_is_bias(v, beta):
    v = np.array(v)
    out = layer_norm(v, np.ones(v.size), np.full(v.size, beta), 1e-5)
    assert np.all(np.isfinite(out))
    assert out.mean() == pytest.approx(beta, abs=1e-6)


def test_zero_params_give_uniform_y_and_bias_messages(rng):
    p = zero_params(8, 6)
    out, _ = node_forward(p, random_inputs(rng, 8, 6))
    np.testing.assert_array_equal(out.y, np.full(5, 0.2))
    np.testing.assert_array_equal(out.h_out, 0.0)


def test_forward_is_deterministic(rng):
    p = random_params(rng)
    inp = random_inputs(rng, 8, 6)
    a, _ = node_forward(p, inp)
    b, _ = node_forward(p, inp)
    for f in ("c", "h_out", "y", "logits"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_y_is_probability_vector(seed, scale):
    rng = np.random.default_rng(seed)
    p = random_params(rng)
    out, _ = node_forward(p, random_inputs(rng, 8, 6, scale))
    assert np.all(np.isfinite(out.c)) and np.all(np.isfinite(out.h_out))
    assert np.all(out.y >= 0)
    assert abs(out.y.sum() - 1.0) < 1e-12


@given(st.integers(0, 2**32 - 1))
def test_layer_norm_bounds_local_state(seed):
    rng = np.random.default_rng(seed)
    p = random_params(rng)
    out, _ = node_forward(p, random_inputs(rng, 8, 6, 50.0))
    bound = np.abs(p.ln_gain).max() * np.sqrt(p.d) + np.abs(p.ln_bias).max()
    assert np.abs(out.c).max() <= bound


def _outputs_dot(p, inp, cot):
    out, _ = node_forward(p, inp)
    dc, dh, dy = cot
    return float(out.c @ dc + (out.h_out * dh).sum() + out.y @ dy)


def _perturbed(p, inp, v_p, v_in, t):
    q = p.copy()
    for name, v in q.tensors().items():
        v += t * v_p[name]
    x = NodeInputs(inp.x + t * v_in.x, inp.c_in + t * v_in.c_in,
                   inp.h_in + t * v_in.h_in, inp.y_in + t * v_in.y_in)
    return q, x


@pytest.mark.parametrize("trial", range(100))
def test_full_jacobian_matches_finite_differences(trial):
    """Random directional derivatives (all inputs and parameters) vs central differences."""
    rng = np.random.default_rng(42 + trial)
    p = random_params(rng)
    inp = random_inputs(rng, 8, 6)
    cot = (rng.normal(size=8), rng.normal(size=(4, 8)), rng.normal(size=5))
    v_p = {k: rng.normal(size=v.shape) for k, v in p.tensors().items()}
    v_p["h_seed"][:] = 0.0  # h_seed only enters through routing
    v_in = NodeInputs(rng.normal(size=6), rng.normal(size=(4, 8)), rng.normal(size=(5, 8)),
                      rng.normal(size=(4, 5)))
    _, tape = node_forward(p, inp)
    gin, gp = node_backward(p, tape, cot[0], cot[1], cot[2])
    analytic = sum(float((gp.tensors()[k] * v_p[k]).sum()) for k in v_p)
    analytic += float(gin.x @ v_in.x + (gin.c_in * v_in.c_in).sum() + (gin.h_in * v_in.h_in).sum()
                      + (gin.y_in * v_in.y_in).sum())
    eps = 1e-4
    fp = _outputs_dot(*_perturbed(p, inp, v_p, v_in, eps), cot)
    fm = _outputs_dot(*_perturbed(p, inp, v_p, v_in, -eps), cot)
    numeric = (fp - fm) / (2 * eps)
    assert abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8) < 1e-4


def test_every_input_coordinate_matches_finite_differences():
    rng = np.random.default_rng(42)
    p = random_params(rng)
    inp = random_inputs(rng, 8, 6)
    cot = (rng.normal(size=8), rng.normal(size=(4, 8)), rng.normal(size=5))
    _, tape = node_forward(p, inp)
    gin, _ = node_backward(p, tape, *cot)
    eps = 1e-4
    for field in ("x", "c_in", "h_in", "y_in"):
        base = getattr(inp, field)
        g = getattr(gin, field)
        for i in range(base.size):
            vals = []
            for t in (eps, -eps):
                arr = base.copy().reshape(-1)
                arr[i] += t
                kw = {f: getattr(inp, f) for f in ("x", "c_in", "h_in", "y_in")}
                kw[field] = arr.reshape(base.shape)
                vals.append(_outputs_dot(p, NodeInputs(**kw), cot))
            num = (vals[0] - vals[1]) / (2 * eps)
            a = g.reshape(-1)[i]
            assert abs(a - num) / max(abs(a), abs(num), 1e-8) < 1e-4, (field, i)


def test_single_node_W_y_gradient():
    rng = np.random.default_rng(7)
    p = random_params(rng)
    inp = random_inputs(rng, 8, 6)
    label = 3
    _, tape = node_forward(p, inp)
    _, g = node_backward(p, tape, label=label)

    def loss(q):
        out, _ = node_forward(q, inp)
        return -np.log(out.y[label])

    eps = 1e-4
    for i in range(p.W_y.size):
        q1, q2 = p.copy(), p.copy()
        q1.W_y.reshape(-1)[i] += eps
        q2.W_y.reshape(-1)[i] -= eps
        num = (loss(q1) - loss(q2)) / (2 * eps)
        a = g.W_y.reshape(-1)[i]
        assert abs(a - num) / max(abs(a), abs(num), 1e-8) < 1e-6


def test_zero_cotangent_gives_zero_gradients(rng):
    p = random_params(rng)
    _, tape = node_forward(p, random_inputs(rng, 8, 6))
    gin, gp = node_backward(p, tape)
    for v in (gin.x, gin.c_in, gin.h_in, gin.y_in, *gp.tensors().values()):
        assert not np.any(v)


def test_gradient_flows_into_zero_slots(rng):
    """Gradients reach input slots that routing left at zero; masking is the caller's job."""
    p = random_params(rng)
    inp = random_inputs(rng, 8, 6)
    inp.c_in[2:] = 0.0
    inp.h_in[3:] = 0.0
    _, tape = node_forward(p, inp)
    gin, _ = node_backward(p, tape, dc=np.ones(8))
    assert np.any(gin.h_in[3:]) and np.any(gin.c_in[2:])


def test_batched_rows_equal_single_nodes(rng):
    p = random_params(rng)
    ins = [random_inputs(rng, 8, 6) for _ in range(7)]
    (c, h, y, _), _ = cell_forward(p, np.stack([i.x for i in ins]), np.stack([i.c_in for i in ins]),
                                   np.stack([i.h_in for i in ins]), np.stack([i.y_in for i in ins]))
    for k, i in enumerate(ins):
        out, _ = node_forward(p, i)
        assert np.array_equal(out.c, c[k]) and np.array_equal(out.y, y[k])
        assert np.array_equal(out.h_out, h[k])


def test_backward_rejects_foreign_tape(rng):
    p = random_params(rng)
    _, tape = node_forward(p, random_inputs(rng, 8, 6))
    q = random_params(rng, d=4)
    with pytest.raises(InvalidArgument):
        node_backward(q, tape, dc=np.zeros(4))


def test_init_shapes_and_statistics():
    p = init_params(32, 8, np.random.default_rng(0))
    for name, shape in param_shapes(32, 8).items():
        assert getattr(p, name).shape == shape
        assert getattr(p, name).dtype == np.float32
    assert np.all(p.ln_gain == 1) and not p.ln_bias.any() and not p.b_c.any()
    lim = np.sqrt(6 / (p.m + 32))
    assert np.abs(p.W_c).max() <= lim
    p.validate()
