import numpy as np
import pytest

from psnas.autodiff import Tensor, functional as F, parameter
from psnas.bilevel import (AdamState, DivergenceError, NonFiniteGradient, SearchConfig,
                           adam_step, eval_loss, first_order_arch_grad, first_order_arch_step,
                           search_loop, second_order_arch_grad, second_order_arch_step)
from psnas.checkpoint import CheckpointError, decode, encode, load, save
from psnas.search_space import (OPS, ArchParams, Cell, MixedEdge, cell_forward, discretize,
                                mixed_edge_forward)


class Quadratic:
    """L_train = (w - a)^2, L_val = w^2 with scalar w and a."""

    def __init__(self, w=1.3, a=0.4):
        self.w = parameter(np.array([w]))
        self.a = parameter(np.array([a]))

    def weight_params(self):
        return [self.w]

    def arch_params(self):
        return [self.a]

    def buffers(self):
        return []

    def loss(self, batch):
        if batch == "train":
            d = self.w - self.a
            return (d * d).sum()
        return (self.w * self.w).sum()


class TenParam:
    """Seven weights, three alphas, nonlinear coupling with an analytic mixed Hessian."""

    def __init__(self, seed):
        r = np.random.default_rng(seed)
        self.M = r.standard_normal((7, 3))
        self.t = r.standard_normal((7, 1))
        self.c = r.standard_normal((3, 1))
        self.w = parameter(r.standard_normal((7, 1)))
        self.a = parameter(r.standard_normal((3, 1)) * 0.5)

    def weight_params(self):
        return [self.w]

    def arch_params(self):
        return [self.a]

    def buffers(self):
        return []

    def loss(self, batch):
        z = F.tanh(F.matmul(Tensor(self.M), self.a))
        if batch == "train":
            return (z * self.w * self.w).sum()
        d = self.w - Tensor(self.t)
        return (d * d * (1.0 + z * z)).sum() + (self.a * Tensor(self.c)).sum()

    def oracle(self, xi):
        w, a, M, t, c = self.w.data, self.a.data, self.M, self.t, self.c
        z = np.tanh(M @ a)
        dz = (1 - z ** 2) * M  # dz_i/da_j
        w1 = w - xi * 2 * z * w  # virtual weights
        d = w1 - t
        grad_w1 = 2 * d * (1 + z ** 2)
        grad_a = dz.T @ (d ** 2 * 2 * z) + c
        mixed = (dz * 2 * w).T  # d^2 L_train / da dw, [3, 7]
        return grad_a - xi * mixed @ grad_w1


# ------------------------------------------------------------------- Adam

def reference_adam(p, grads, lr, b1, b2, wd, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        g = g + wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_matches_reference():
    r = np.random.default_rng(0)
    p0 = r.standard_normal(6)
    grads = [r.standard_normal(6) for _ in range(20)]
    p = parameter(p0.copy())
    state = AdamState(3e-4, (0.5, 0.999), 1e-3)
    for g in grads:
        adam_step([p], [g], state)
    np.testing.assert_allclose(p.data, reference_adam(p0, grads, 3e-4, 0.5, 0.999, 1e-3), rtol=1e-12)
    assert state.step == 20


def test_adam_zero_grad_no_decay_is_identity():
    p = parameter(np.array([1.0, -2.0]))
    state = AdamState(1e-3)
    for _ in range(5):
        adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_constant_gradient_step_approaches_lr():
    p = parameter(np.array([0.0]))
    state = AdamState(5e-4)
    prev = 0.0
    for _ in range(200):
        adam_step([p], [np.array([3.0])], state)
        step, prev = prev - p.data[0], p.data[0]
    assert abs(step - 5e-4) < 1e-9


def test_adam_weight_decay_shrinks_monotonically():
    p = parameter(np.array([1.0]))
    state = AdamState(1e-3, weight_decay=1e-2)
    values = []
    for _ in range(100):
        adam_step([p], [np.zeros(1)], state)
        values.append(p.data[0])
    assert all(0 < b < a for a, b in zip([1.0] + values, values))


def test_adam_rejects_non_finite_without_side_effects():
    p = parameter(np.array([1.0, 2.0]))
    state = AdamState(1e-3)
    with pytest.raises(NonFiniteGradient):
        adam_step([p], [np.array([np.nan, 0.0])], state)
    assert state.step == 0 and not state.m
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([parameter(np.zeros(2))], [np.zeros(3)], AdamState(1e-3))


def test_adam_preserves_float32():
    p = parameter(np.ones(3, np.float32))
    adam_step([p], [np.ones(3, np.float32)], AdamState(1e-3, weight_decay=1e-3))
    assert p.data.dtype == np.float32


# ------------------------------------------------------------- arch steps

@pytest.mark.parametrize("xi", [0.05, 0.1, 0.3])
def test_quadratic_implicit_gradient_closed_form(xi):
    prob = Quadratic()
    w, a = 1.3, 0.4
    w1 = w - xi * 2 * (w - a)
    info = second_order_arch_grad(prob, "train", "val", xi)
    expected = 4 * xi * w1
    assert abs(info.grads[0][0] - expected) <= 1e-3 * abs(expected)


@pytest.mark.parametrize("seed", range(5))
def test_ten_parameter_hessian_vector_vs_dense_oracle(seed):
    prob = TenParam(seed)
    xi = 0.1
    got = second_order_arch_grad(prob, "train", "val", xi).grads[0]
    want = prob.oracle(xi)
    fd_part_got = got - first_order_arch_grad_at_virtual(prob, xi)
    fd_part_want = want - first_order_arch_grad_at_virtual(prob, xi)
    err = np.abs(fd_part_got - fd_part_want).max() / np.abs(fd_part_want).max()
    assert err < 1e-2
    np.testing.assert_allclose(got, want, rtol=1e-2, atol=1e-2 * np.abs(want).max())


def first_order_arch_grad_at_virtual(prob, xi):
    # direct alpha gradient of L_val at the virtual weights, analytic
    w, a, M, t, c = prob.w.data, prob.a.data, prob.M, prob.t, prob.c
    z = np.tanh(M @ a)
    w1 = w - xi * 2 * z * w
    return ((1 - z ** 2) * M).T @ ((w1 - t) ** 2 * 2 * z) + c


@pytest.mark.parametrize("seed", range(5))
def test_xi_zero_equals_first_order_exactly(seed):
    p1, p2 = TenParam(seed), TenParam(seed)
    s1, s2 = AdamState(3e-4, (0.5, 0.999), 1e-3), AdamState(3e-4, (0.5, 0.999), 1e-3)
    for _ in range(3):
        first_order_arch_step(p1, "val", s1)
        second_order_arch_step(p2, "train", "val", 0.0, s2)
    np.testing.assert_array_equal(p1.a.data, p2.a.data)


@pytest.mark.parametrize("seed", range(3))
def test_weights_bit_identical_after_arch_step(seed):
    prob = TenParam(seed)
    before = prob.w.data.copy()
    state = AdamState(3e-4, (0.5, 0.999), 1e-3)
    for _ in range(3):
        second_order_arch_step(prob, "train", "val", 0.1, state)
        first_order_arch_step(prob, "val", state)
    assert prob.w.data.tobytes() == before.tobytes()


def test_zero_virtual_gradient_falls_back(caplog):
    prob = Quadratic(w=0.0, a=0.0)
    info = second_order_arch_grad(prob, "train", "val", 0.1)
    assert info.fell_back
    assert "first-order" in caplog.text
    np.testing.assert_array_equal(info.grads[0], first_order_arch_grad(prob, "val")[1][0])


def test_arch_step_determinism():
    a, b = TenParam(0), TenParam(0)
    sa, sb = AdamState(3e-4), AdamState(3e-4)
    first_order_arch_step(a, "val", sa)
    first_order_arch_step(b, "val", sb)
    np.testing.assert_array_equal(a.a.data, b.a.data)


class EdgeProblem:
    """A single mixed edge regressing onto its input."""

    def __init__(self, seed=0, masked_second=False):
        r = np.random.default_rng(seed)
        self.edge = MixedEdge(3, 1, rng=r, dtype=np.float64)
        self.alpha = parameter(r.standard_normal(5) * 1e-3)
        self.other = parameter(np.array([0.5]))  # never reaches the loss
        self.x = Tensor(r.standard_normal((2, 3, 6, 6)))

    def weight_params(self):
        return self.edge.parameters()

    def arch_params(self):
        return [self.alpha, self.other]

    def buffers(self):
        return [b for _, b in self.edge.named_buffers()]

    def loss(self, batch):
        d = mixed_edge_forward(self.x, self.alpha, self.edge) - self.x
        return (d * d).mean()


def test_matching_op_alpha_increases():
    prob = EdgeProblem()
    skip = OPS.index("skip_connection")
    state = AdamState(3e-4, (0.5, 0.999), 1e-3)
    start = prob.alpha.data[skip]
    trace = []
    for _ in range(50):
        first_order_arch_step(prob, None, state)
        trace.append(prob.alpha.data[skip])
    assert trace[-1] > start
    assert all(b > a for a, b in zip([start] + trace, trace))


def test_alpha_outside_loss_moves_by_weight_decay_only():
    prob = EdgeProblem()
    state = AdamState(3e-4, (0.5, 0.999), 1e-3)
    shadow = parameter(prob.other.data.copy())
    shadow_state = AdamState(3e-4, (0.5, 0.999), 1e-3)
    for _ in range(5):
        first_order_arch_step(prob, None, state)
        adam_step([shadow], [np.zeros(1)], shadow_state)
    np.testing.assert_array_equal(prob.other.data, shadow.data)
    assert prob.other.data[0] < 0.5


# -------------------------------------------------------------------- loop

class TinyCellProblem:
    def __init__(self, seed=0):
        r = np.random.default_rng(seed)
        self.cell = Cell("normal", 3, 3, 2, False, rng=r, dtype=np.float64)
        self.alpha = ArchParams.initial(r, dtype=np.float64)
        self.data = [Tensor(r.standard_normal((2, 3, 4, 4))) for _ in range(4)]

    def weight_params(self):
        return self.cell.parameters()

    def arch_params(self):
        return list(self.alpha.tensors())

    def buffers(self):
        return [b for _, b in self.cell.named_buffers()]

    def loss(self, batch):
        x = self.data[batch]
        out = cell_forward(x, x, self.cell, self.alpha)
        d = out[:, :3] - x
        return (d * d).mean()


def run_tiny(order="first", epochs=2, seed=0):
    prob = TinyCellProblem(seed)
    cfg = SearchConfig(epochs=epochs, order=order, weight_lr=1e-2, arch_lr=3e-2)
    hist = search_loop(prob, lambda e: [0, 1], lambda e: [2, 3], cfg)
    return prob, hist


def test_zero_epochs_returns_initial_genotype():
    prob = TinyCellProblem()
    initial = discretize(prob.alpha.copy())
    hist = search_loop(prob, lambda e: [0, 1], lambda e: [2], SearchConfig(epochs=0))
    assert hist == []
    assert discretize(prob.alpha) == initial


@pytest.mark.parametrize("order", ["first", "second"])
def test_search_loop_deterministic(order):
    a, ha = run_tiny(order)
    b, hb = run_tiny(order)
    assert ha == hb
    assert discretize(a.alpha) == discretize(b.alpha)
    assert len(ha) == 4 and ha[-1].epoch == 1


def test_search_reduces_validation_loss():
    prob = TinyCellProblem()
    before = eval_loss(prob, [2, 3])
    search_loop(prob, lambda e: [0, 1, 2, 3], lambda e: [2, 3],
                SearchConfig(epochs=5, weight_lr=1e-2, arch_lr=3e-2))
    assert eval_loss(prob, [2, 3]) < before


def test_eval_loss_leaves_buffers():
    prob = TinyCellProblem()
    before = [b.copy() for b in prob.buffers()]
    eval_loss(prob, [0])
    for a, b in zip(before, prob.buffers()):
        np.testing.assert_array_equal(a, b)


def test_divergence_aborts_with_last_good():
    prob = Quadratic()
    prob.loss = lambda batch: (prob.w * (np.inf if batch == "val" else 1.0)).sum()
    with pytest.raises(DivergenceError) as info:
        search_loop(prob, lambda e: ["train"], lambda e: ["val"], SearchConfig(epochs=1))
    assert info.value.last_good["arch"][0][0] == 0.4


def test_large_loss_trips_guard():
    prob = Quadratic(w=200.0)
    with pytest.raises(DivergenceError, match="divergence"):
        search_loop(prob, lambda e: ["train"], lambda e: ["val"], SearchConfig(epochs=1))


def test_first_order_config_means_xi_zero():
    assert SearchConfig(order="first", xi=0.5).effective_xi == 0.0
    assert SearchConfig(order="second").effective_xi == 3e-4
    with pytest.raises(ValueError):
        SearchConfig(order="third")


# -------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(tmp_path):
    arrays = {"w.0": np.arange(6, dtype=np.float32).reshape(2, 3), "scalar": np.float32(2.5),
              "mask": np.array([True, False])}
    save(tmp_path / "c.ckpt", arrays, {"step": 7, "seed": 3})
    back, meta = load(tmp_path / "c.ckpt")
    assert meta == {"step": 7, "seed": 3}
    np.testing.assert_array_equal(back["w.0"], arrays["w.0"])
    assert back["scalar"].shape == ()
    np.testing.assert_array_equal(back["mask"], [1.0, 0.0])


def test_checkpoint_corruption_detected():
    blob = bytearray(encode({"a": np.ones(4, np.float32)}, {"step": 1}))
    blob[-6] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        decode(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"garbage" * 4)


def test_checkpoint_rejects_lossy_float64(tmp_path):
    with pytest.raises(CheckpointError):
        encode({"a": np.array([0.1])})
    encode({"a": np.array([0.5])})


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="does not exist"):
        load(tmp_path / "nope.ckpt")
