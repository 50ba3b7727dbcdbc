import numpy as np
import pytest

from spatialsynth.tensorcore import (
    Adam, Conv2d, Conv3d, CrossAttention, Graph, GraphError, GroupNorm, Linear, Modulation,
    NonFiniteGradient, ShapeError, TemporalConv, Tensor, concat, conv, load_checkpoint,
    save_checkpoint, upsample2x,
)
from spatialsynth.tensorcore.gradcheck import check_gradients


def _f64(module):
    return module.astype(np.float64)


def test_identity_1x1_conv_returns_image(rng):
    img = rng.standard_normal((2, 6, 7, 3))
    g = Graph(dtype=np.float64)
    x = g.input("x", img.shape)
    w = Tensor(np.eye(3).reshape(1, 1, 3, 3), dtype=np.float64)
    conv(x, g.param(w))
    np.testing.assert_array_equal(g.forward({"x": img}), img)


def test_add_zero_is_identity(rng):
    a = rng.standard_normal((3, 4))
    g = Graph(dtype=np.float64)
    x = g.input("x", a.shape)
    _ = x + g.const(np.zeros((3, 4)))
    np.testing.assert_array_equal(g.forward({"x": a}), a)


def test_all_ones_3x3_window_sum():
    g = Graph(dtype=np.float64)
    x = g.input("x", (1, 5, 5, 1))
    conv(x, g.param(Tensor(np.ones((3, 3, 1, 1)), dtype=np.float64)), 1, 1)
    out = g.forward({"x": np.ones((1, 5, 5, 1))})
    assert out[0, 2, 2, 0] == 9.0
    assert out[0, 0, 0, 0] == 4.0


def test_strided_conv_matches_direct_loop(rng):
    x = rng.standard_normal((2, 7, 6, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    g = Graph(dtype=np.float64)
    xi = g.input("x", x.shape)
    conv(xi, g.param(Tensor(w, dtype=np.float64)), stride=2, pad=1)
    out = g.forward({"x": x})
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros(out.shape)
    for i in range(out.shape[1]):
        for j in range(out.shape[2]):
            patch = xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
            ref[:, i, j, :] = np.einsum("nhwc,hwco->no", patch, w)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_sum_gradient_is_ones(rng):
    a = rng.standard_normal((4, 5))
    g = Graph(dtype=np.float64)
    x = g.input("x", a.shape, requires_grad=True)
    x.sum()
    g.forward({"x": a})
    np.testing.assert_array_equal(g.backward()["x"], np.ones_like(a))


def test_square_gradient():
    g = Graph(dtype=np.float64)
    x = g.input("x", (1,), requires_grad=True)
    x.square().sum()
    g.forward({"x": np.array([3.0])})
    np.testing.assert_array_equal(g.backward()["x"], [6.0])


def test_backward_before_forward_errors():
    g = Graph()
    x = g.input("x", (2,), requires_grad=True)
    x.sum()
    with pytest.raises(GraphError):
        g.backward()


def test_non_scalar_loss_errors():
    g = Graph()
    x = g.input("x", (2,), requires_grad=True)
    y = x * 2.0
    g.forward({"x": np.ones(2)})
    with pytest.raises(GraphError):
        g.backward(y)


def test_input_shape_mismatch_names_node():
    g = Graph(name="net")
    x = g.input("frames", (1, 4, 4, 3))
    x.sum()
    with pytest.raises(ShapeError, match="frames"):
        g.forward({"frames": np.zeros((1, 4, 4, 2))})


def test_build_time_shape_error_names_node():
    g = Graph(name="net")
    x = g.input("x", (1, 4, 4, 3))
    w = g.param(Tensor(np.zeros((3, 3, 2, 5)), name="w"))
    with pytest.raises(ShapeError, match="conv"):
        conv(x, w)


def test_tensor_rejects_empty_extent():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


# ------------------------------------------------------------- gradient checks

def _layer_cases():
    r = np.random.default_rng(7)

    def conv2d():
        m = _f64(Conv2d(3, 4, r, kernel=3, stride=2))
        g = Graph(dtype=np.float64)
        x = g.input("x", (2, 8, 8, 3), requires_grad=True)
        m(x).square().mean()
        return g

    def conv3d_fusion():
        m = _f64(Conv3d(3, 4, r))
        g = Graph(dtype=np.float64)
        x = g.input("x", (1, 3, 8, 8, 3), requires_grad=True)
        m(x).square().mean()
        return g

    def norm():
        m = _f64(GroupNorm(4, groups=2))
        g = Graph(dtype=np.float64)
        x = g.input("x", (2, 8, 8, 4), requires_grad=True)
        (m(x) * g.const(r.standard_normal((2, 8, 8, 4)))).sum()
        return g

    def attention():
        m = _f64(CrossAttention(4, 3, r, inner=5))
        g = Graph(dtype=np.float64)
        x = g.input("x", (2, 64, 4), requires_grad=True)
        ctx = g.input("ctx", (2, 6, 3), requires_grad=True)
        m(x, ctx).square().mean()
        return g

    def temporal():
        m = _f64(TemporalConv(4, r))
        g = Graph(dtype=np.float64)
        x = g.input("x", (1, 4, 8, 8, 4), requires_grad=True)
        m(x).square().mean()
        return g

    def linear_modulation():
        lin = _f64(Linear(3, 4, r))
        mod = _f64(Modulation(3, 4, r))
        g = Graph(dtype=np.float64)
        x = g.input("x", (2, 8, 8, 3), requires_grad=True)
        c = g.input("c", (2, 3), requires_grad=True)
        h = lin(x)
        mod(h.silu(), c).square().mean()
        return g

    def upsample_concat_exp():
        m = _f64(Conv2d(6, 2, r, kernel=1))
        g = Graph(dtype=np.float64)
        x = g.input("x", (1, 4, 4, 3), requires_grad=True)
        y = g.input("y", (1, 8, 8, 3), requires_grad=True)
        z = concat([upsample2x(x), y], axis=-1)
        (m(z) * 0.3).exp().slice(-1, 1, 2).mean()
        return g

    return {
        "conv2d": conv2d,
        "conv3d_fusion": conv3d_fusion,
        "group_norm": norm,
        "attention": attention,
        "temporal_mix": temporal,
        "linear_modulation": linear_modulation,
        "upsample_concat_exp": upsample_concat_exp,
    }


@pytest.mark.parametrize("case", list(_layer_cases()))
def test_layer_gradients_match_finite_differences(case):
    graph = _layer_cases()[case]()
    r = np.random.default_rng(3)
    inputs = {k: r.standard_normal(n.shape) for k, n in graph.inputs.items()}
    errors = check_gradients(graph, inputs)
    assert errors and max(errors.values()) < 1e-5, errors


def test_backward_scales_linearly(rng):
    m = _f64(Conv2d(2, 3, rng))
    x = rng.standard_normal((1, 6, 6, 2))
    g = Graph(dtype=np.float64)
    xi = g.input("x", x.shape)
    m(xi).square().mean()
    g.forward({"x": x})
    base = {k: v.copy() for k, v in g.backward().items()}
    scaled = g.backward(scale=2.5)
    for k in base:
        np.testing.assert_allclose(scaled[k], 2.5 * base[k], rtol=1e-12, atol=1e-12)


def test_forward_backward_deterministic(rng):
    def run():
        r = np.random.default_rng(5)
        m = Conv2d(3, 4, r)
        x = r.standard_normal((2, 8, 8, 3))
        g = Graph()
        m(g.input("x", x.shape)).square().mean()
        out = g.forward({"x": x})
        return out, g.backward()

    a, ga = run()
    b, gb = run()
    assert a.tobytes() == b.tobytes()
    assert all(ga[k].tobytes() == gb[k].tobytes() for k in ga)


def test_inference_mode_matches_training_mode(rng):
    m = Conv2d(3, 4, rng)
    x = rng.standard_normal((2, 8, 8, 3))
    g = Graph()
    h = m(g.input("x", x.shape))
    (h.silu() * 2.0).mean()
    a = g.forward({"x": x})
    b = g.forward({"x": x}, keep=False)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(GraphError):
        g.backward()


# ------------------------------------------------------------------ optimizer

def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=1e-2)
    before = p.data.copy()
    for _ in range(3):
        opt.step({"p": np.zeros(2, dtype=np.float32)})
    np.testing.assert_array_equal(p.data, before)
    assert opt.step_count == 3


def test_adam_constant_positive_gradient_decreases_monotonically():
    p = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
    opt = Adam({"p": p}, lr=1e-2)
    vals = []
    for _ in range(50):
        opt.step({"p": np.array([0.7])})
        vals.append(p.data[0])
    assert np.all(np.diff(vals) < 0)


def test_adam_first_step_magnitude_is_lr():
    p = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
    Adam({"p": p}, lr=1e-3).step({"p": np.array([1.0])})
    assert abs(abs(p.data[0]) - 1e-3) < 1e-9


def test_adam_rejects_non_finite_gradient():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam({"weights.w": p})
    with pytest.raises(NonFiniteGradient, match="weights.w"):
        opt.step({"weights.w": np.array([0.0, np.nan], dtype=np.float32)})


# ----------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(tmp_path, rng):
    state = {"a.weight": rng.standard_normal((3, 3, 2, 4)).astype(np.float32), "b": np.ones(5, np.float32)}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, state)
    raw = path.read_bytes()
    assert raw.startswith(b"SSCKPT 1\n2\na.weight 4 3 3 2 4\nb 1 5\n")
    loaded = load_checkpoint(path)
    assert list(loaded) == list(state)
    for k in state:
        assert loaded[k].tobytes() == state[k].tobytes()
