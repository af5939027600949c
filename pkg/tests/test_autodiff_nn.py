import json

import numpy as np
import pytest

from ifslab.autodiff_nn import (
    AdamState,
    Mlp,
    MlpSpec,
    ParamTape,
    adam_step,
    layout_diff,
    read_checkpoint,
    spectral_normalize,
)
from ifslab.errors import ConfigError, NumericError, SchemaError


def build_net(dims, activation="tanh", residual=False, seed=0):
    tape = ParamTape()
    net = Mlp(MlpSpec(dims, activation, residual=residual), tape, "net",
              np.random.default_rng(seed))
    tape.freeze()
    return net, tape


def naive_forward(net, tape, X, activation, residual):
    """Independent straight-line re-evaluation of the network."""
    h = X
    L = net.n_layers
    for l in range(L):
        W = tape.view(f"net.W{l}")
        b = tape.view(f"net.b{l}")
        z = h @ W.T + b
        if l < L - 1:
            if activation == "tanh":
                h = np.tanh(z)
            elif activation == "relu":
                h = np.maximum(z, 0.0)
            elif activation == "softplus":
                h = np.logaddexp(0.0, z)
            else:
                raise AssertionError(activation)
        else:
            h = z
    return h + X if residual else h


class TestForward:
    def test_relu_residual_identity_params(self):
        net, tape = build_net((2, 2, 2), "relu", residual=True)
        tape.view("net.W0")[...] = np.eye(2)
        tape.view("net.b0")[...] = 0.0
        tape.view("net.W1")[...] = np.eye(2)
        tape.view("net.b1")[...] = 0.0
        out = net.forward(np.array([[1.0, -1.0]]))
        np.testing.assert_allclose(out, [[2.0, -1.0]])

    def test_zero_parameter_residual_is_identity(self):
        net, tape = build_net((3, 4, 3), "relu", residual=True)
        tape.values[:] = 0.0
        X = np.random.default_rng(0).standard_normal((5, 3))
        np.testing.assert_array_equal(net.forward(X), X)

    @pytest.mark.parametrize("activation", ["tanh", "relu", "softplus"])
    @pytest.mark.parametrize("residual", [False, True])
    def test_matches_naive_reimplementation(self, activation, residual):
        net, tape = build_net((3, 6, 5, 3), activation, residual=residual, seed=4)
        X = np.random.default_rng(1).standard_normal((7, 3))
        np.testing.assert_allclose(
            net.forward(X), naive_forward(net, tape, X, activation, residual),
            atol=1e-12)

    def test_input_width_checked(self):
        net, _ = build_net((3, 4, 2))
        with pytest.raises(ConfigError):
            net.forward(np.zeros((2, 5)))

    def test_residual_needs_matching_widths(self):
        with pytest.raises(ConfigError):
            MlpSpec((2, 4, 3), residual=True)


class TestBackward:
    def test_identity_net_passes_cotangents(self):
        net, tape = build_net((3, 4, 3), "relu", residual=True)
        tape.values[:] = 0.0
        X = np.random.default_rng(2).standard_normal((4, 3))
        net.forward(X)
        up = np.random.default_rng(3).standard_normal((4, 3))
        np.testing.assert_array_equal(net.backward(up), up)

    def test_linearity_in_upstream(self):
        net, tape = build_net((2, 5, 2), "tanh", seed=7)
        X = np.random.default_rng(4).standard_normal((6, 2))
        up = np.random.default_rng(5).standard_normal((6, 2))
        net.forward(X)
        tape.zero_grads()
        d1 = net.backward(up)
        g1 = tape.grads.copy()
        net.forward(X)
        tape.zero_grads()
        d2 = net.backward(2.0 * up)
        np.testing.assert_allclose(d2, 2.0 * d1, atol=1e-12)
        np.testing.assert_allclose(tape.grads, 2.0 * g1, atol=1e-12)

    def test_stale_intermediates_rejected(self):
        net, _ = build_net((2, 3, 2))
        net.forward(np.zeros((1, 2)))
        net.backward(np.ones((1, 2)))
        with pytest.raises(NumericError):
            net.backward(np.ones((1, 2)))

    @pytest.mark.parametrize("activation,residual", [
        ("tanh", False), ("softplus", True), ("gelu", False), ("relu", True)])
    def test_finite_difference_check(self, activation, residual):
        net, tape = build_net((2, 6, 2), activation, residual=residual, seed=11)
        rng = np.random.default_rng(12)
        X = rng.standard_normal((5, 2)) + 0.1  # keep relu pre-activations off kinks

        def loss():
            Y = net.forward(X)
            return 0.5 * float((Y ** 2).sum()), Y

        tape.zero_grads()
        _, Y = loss()
        net.backward(Y)
        grads = tape.grads.copy()
        h = 1e-5
        num = np.zeros_like(grads)
        for i in range(tape.n_params):
            tape.values[i] += h
            up, _ = loss()
            tape.values[i] -= 2 * h
            dn, _ = loss()
            tape.values[i] += h
            num[i] = (up - dn) / (2 * h)
        rel = np.abs(grads - num) / np.maximum(np.abs(num), 1e-6)
        assert rel.max() <= 1e-6


class TestSpectralNormalize:
    def test_diagonal_matrix(self):
        W = np.array([[3.0, 0.0], [0.0, 1.0]])
        sigma = spectral_normalize(W, 0.9, 50, {"u": np.array([1.0, 0.4])})
        assert sigma == pytest.approx(3.0, abs=1e-9)
        np.testing.assert_allclose(W, [[0.9, 0.0], [0.0, 0.3]], atol=1e-9)

    def test_below_cap_untouched(self):
        W = 0.5 * np.eye(3)
        before = W.copy()
        spectral_normalize(W, 0.9, 20, {"u": np.ones(3)})
        np.testing.assert_array_equal(W, before)

    def test_zero_matrix(self):
        W = np.zeros((4, 4))
        assert spectral_normalize(W, 0.9, 5, {"u": np.ones(4)}) == 0.0
        assert np.all(W == 0.0)

    def test_matches_svd_oracle(self):
        rng = np.random.default_rng(21)
        W = rng.standard_normal((32, 32))
        sigma_true = float(np.linalg.svd(W, compute_uv=False)[0])
        sigma = spectral_normalize(W.copy(), None, 50, {"u": rng.standard_normal(32)})
        assert sigma == pytest.approx(sigma_true, rel=1e-6)

    def test_cap_certificate_after_enforcement(self):
        net, tape = build_net((4, 8, 4), "relu", seed=3)
        tape.values[:] *= 10.0  # inflate so the caps bind
        net.normalize(0.7, iters=5)
        net.enforce_caps(0.7)
        rng = np.random.default_rng(9)
        for name in net.w_names:
            W = tape.view(name)
            X = rng.standard_normal((1000, W.shape[1]))
            ratio = np.linalg.norm(X @ W.T, axis=1) / np.linalg.norm(X, axis=1)
            assert ratio.max() <= 0.7 + 1e-12

    def test_lipschitz_cert_is_layer_product(self):
        net, tape = build_net((2, 3, 2), "tanh", seed=5)
        cert = net.lipschitz_cert()
        prod = (np.linalg.norm(tape.view("net.W0"), 2)
                * np.linalg.norm(tape.view("net.W1"), 2))
        assert cert == pytest.approx(prod, rel=1e-12)


class TestAdam:
    def test_first_step_magnitude(self):
        tape = ParamTape()
        tape.alloc_const("p", (4,), 0.0)
        tape.freeze()
        tape.grads[:] = 1.0
        st = AdamState.init(4, lr=0.1)
        adam_step(st, tape)
        expected = -0.1 * (1.0 / (1.0 + 1e-8))
        np.testing.assert_allclose(tape.values, expected, atol=1e-12)
        assert st.t == 1

    def test_zero_gradient_fresh_state(self):
        tape = ParamTape()
        tape.alloc_const("p", (3,), 1.5)
        tape.freeze()
        st = AdamState.init(3, lr=0.1)
        adam_step(st, tape)
        np.testing.assert_array_equal(tape.values, np.full(3, 1.5))
        assert st.t == 1

    def test_nan_gradient_aborts_with_slice_name(self):
        tape = ParamTape()
        tape.alloc_const("good", (2,), 0.0)
        tape.alloc_const("bad", (2,), 0.0)
        tape.freeze()
        tape.grads[2] = np.nan
        with pytest.raises(NumericError, match="bad"):
            adam_step(AdamState.init(4), tape)

    def test_convex_quadratic_convergence(self):
        # probe tuned for smooth descent: moderate momentum, eps damping
        rng = np.random.default_rng(6)
        target = rng.standard_normal(10)
        tape = ParamTape()
        tape.alloc("p", (10,), target + 0.5)
        tape.freeze()
        st = AdamState.init(10, lr=0.1, beta1=0.5, eps=1.0)
        losses = []
        for _ in range(200):
            tape.zero_grads()
            tape.grads[:] = tape.values - target
            losses.append(0.5 * float(((tape.values - target) ** 2).sum()))
            adam_step(st, tape)
        final_grad = np.abs(tape.values - target).max()
        assert final_grad < 1e-4
        assert all(l2 <= l1 + 1e-15 for l1, l2 in zip(losses[10:], losses[11:]))


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, tmp_path):
        net, tape = build_net((3, 5, 2), seed=8)
        path = tmp_path / "params.ifsnn"
        tape.save(path)
        values, schema = read_checkpoint(path)
        assert np.array_equal(values, tape.values)
        assert schema == tape.layout_schema()

    def test_corrupt_magic(self, tmp_path):
        net, tape = build_net((2, 3, 2))
        path = tmp_path / "p.ifsnn"
        tape.save(path)
        raw = path.read_bytes()
        path.write_bytes(b"XXXXXX" + raw[6:])
        with pytest.raises(SchemaError):
            read_checkpoint(path)

    def test_layout_diff_lists_mismatches(self, tmp_path):
        _, tape_a = build_net((2, 3, 2))
        _, tape_b = build_net((2, 4, 2))
        diffs = layout_diff(tape_a.layout_schema(), tape_b.layout_schema())
        assert diffs and any("net.W0" in d for d in diffs)

    def test_load_values_refuses_mismatch(self, tmp_path):
        _, tape_a = build_net((2, 3, 2))
        _, tape_b = build_net((2, 4, 2))
        path = tmp_path / "a.ifsnn"
        tape_a.save(path)
        with pytest.raises(SchemaError, match="net.W0"):
            tape_b.load_values(path)

    def test_layout_json_on_disk(self, tmp_path):
        _, tape = build_net((2, 3, 2))
        path = tmp_path / "p.ifsnn"
        tape.save(path)
        schema = json.loads((tmp_path / "p.ifsnn.layout.json").read_text())
        assert [e["name"] for e in schema] == ["net.W0", "net.b0", "net.W1", "net.b1"]


def test_init_deterministic_given_seed():
    _, t1 = build_net((3, 7, 3), seed=42)
    _, t2 = build_net((3, 7, 3), seed=42)
    assert np.array_equal(t1.values, t2.values)


def test_duplicate_names_rejected():
    tape = ParamTape()
    tape.alloc_const("x", (2,), 0.0)
    with pytest.raises(ConfigError):
        tape.alloc_const("x", (3,), 0.0)
