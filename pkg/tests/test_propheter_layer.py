import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from prophet_lt import (
    KernelMask,
    PropheterParams,
    ValidationError,
    apply_gn,
    apply_gn_masked,
    init_params,
    project_params,
    sample_residual,
)
from prophet_lt.propheter_layer import PropheterLayer

from gradcheck_util import central_differences, max_relative_error

f64 = torch.float64


def params(a, b):
    return PropheterParams(torch.tensor(a, dtype=f64), torch.tensor(b, dtype=f64))


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


class TestInitParams:
    def test_feasible_range(self):
        p = init_params(10, seed=3)
        assert p.a.shape == (10,) and p.b.shape == (10,)
        assert ((p.a >= 0) & (p.a <= 1)).all() and ((p.b >= 0) & (p.b <= 1)).all()
        assert p.is_feasible()

    def test_seeded(self):
        assert torch.equal(init_params(10, 5).a, init_params(10, 5).a)
        assert torch.equal(init_params(10, 5).b, init_params(10, 5).b)
        p, q = init_params(10, 5), init_params(10, 6)
        assert not (torch.equal(p.a, q.a) and torch.equal(p.b, q.b))

    def test_per_dimension(self):
        assert init_params(3, 0, dim=7).a.shape == (3, 7)


class TestSampleResidual:
    def test_zero_params_give_zero(self):
        r = sample_residual(params([0.0, 0.0], [0.0, 0.0]), torch.tensor([0, 1, 1]), 4, gen())
        assert torch.equal(r, torch.zeros(3, 4, dtype=f64))

    def test_pure_shift(self):
        r = sample_residual(params([0.0], [0.7]), torch.zeros(5, dtype=torch.long), 3, gen())
        assert torch.all(r == 0.7)

    def test_moments(self):
        r = sample_residual(params([2.0], [0.5]), torch.zeros(1000, dtype=torch.long), 100, gen(1))
        assert abs(r.mean().item() - 0.5) < 0.02
        assert abs(r.std().item() - 2.0) < 0.02

    def test_rows_use_their_class(self):
        p = params([0.0, 0.0, 0.0], [0.1, 0.2, 0.3])
        r = sample_residual(p, torch.tensor([2, 0, 1]), 2, gen())
        np.testing.assert_allclose(r[:, 0].numpy(), [0.3, 0.1, 0.2])

    def test_fixed_state_is_pure(self):
        p = params([1.0, 0.5], [0.2, 0.9])
        g = gen(7)
        state = g.get_state()
        r1 = sample_residual(p, torch.tensor([0, 1]), 3, g)
        g.set_state(state)
        r2 = sample_residual(p, torch.tensor([0, 1]), 3, g)
        assert torch.equal(r1, r2)

    def test_infeasible_rejected(self):
        with pytest.raises(ValidationError):
            sample_residual(params([-0.1], [0.5]), torch.tensor([0]), 2, gen())
        with pytest.raises(ValidationError):
            sample_residual(params([0.1], [1.5]), torch.tensor([0]), 2, gen())

    def test_per_dimension_params(self):
        p = PropheterParams(torch.zeros(2, 3, dtype=f64), torch.tensor([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]], dtype=f64))
        r = sample_residual(p, torch.tensor([1, 0]), 3, gen())
        np.testing.assert_allclose(r.numpy(), [[0.4, 0.5, 0.6], [0.1, 0.2, 0.3]])

    def test_gradient_matches_finite_differences(self):
        a = torch.tensor([0.8, 0.3, 1.2], dtype=f64, requires_grad=True)
        b = torch.tensor([0.4, 0.6, 0.2], dtype=f64, requires_grad=True)
        labels = torch.tensor([0, 2, 2, 1, 0])
        feats = torch.randn(5, 4, dtype=f64, generator=gen(2))
        w = torch.randn(4, dtype=f64, generator=gen(3))
        g = gen(9)
        state = g.get_state()

        def loss():
            g.set_state(state)
            r = sample_residual(PropheterParams(a, b), labels, 4, g)
            return (torch.tanh(apply_gn(feats, r)) @ w).pow(2).sum()

        L = loss()
        L.backward()
        numeric = central_differences(loss, [a.data, b.data])
        assert max_relative_error([a.grad, b.grad], numeric) < 1e-4


class TestApplyGn:
    def test_zero_residual_identity(self):
        f = torch.randn(3, 4, dtype=f64)
        assert torch.equal(apply_gn(f, torch.zeros_like(f)), f)

    def test_zero_features(self):
        r = torch.randn(3, 4, dtype=f64)
        assert torch.equal(apply_gn(torch.zeros_like(r), r), r)

    def test_additive(self):
        f, r1, r2 = (torch.randn(3, 4, dtype=f64, generator=gen(i)) for i in range(3))
        torch.testing.assert_close(apply_gn(apply_gn(f, r1), r2), apply_gn(f, r1 + r2), rtol=0, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            apply_gn(torch.zeros(3, 4), torch.zeros(3, 5))
        with pytest.raises(ValidationError):
            apply_gn(torch.zeros(3, 4), torch.zeros(2, 4))

    def test_channel_broadcast(self):
        f = torch.zeros(2, 3, 4, 4, dtype=f64)
        r = torch.arange(6, dtype=f64).reshape(2, 3, 1, 1)
        out = apply_gn(f, r)
        assert torch.equal(out[1, 2], torch.full((4, 4), 5.0, dtype=f64))


class TestMaskedGn:
    def test_full_mask_equals_apply_gn(self):
        f, r = torch.randn(4, 5, dtype=f64), torch.randn(4, 5, dtype=f64)
        labels = torch.tensor([0, 1, 1, 0])
        out = apply_gn_masked(f, r, labels, KernelMask.full(2, 5))
        assert torch.equal(out, apply_gn(f, r))

    def test_empty_mask_identity(self):
        f, r = torch.randn(4, 5, dtype=f64), torch.randn(4, 5, dtype=f64)
        out = apply_gn_masked(f, r, torch.tensor([0, 1, 1, 0]), KernelMask(((), ()), 5))
        assert torch.equal(out, f)

    def test_single_channel(self):
        f = torch.randn(2, 3, 2, 2, dtype=f64)
        r = torch.full((2, 3, 1, 1), 0.25, dtype=f64)
        out = apply_gn_masked(f, r, torch.tensor([0, 0]), KernelMask(((0,),), 3))
        torch.testing.assert_close(out[:, 0], f[:, 0] + 0.25, rtol=0, atol=0)
        assert torch.equal(out[:, 1:], f[:, 1:])

    def test_class_specific_channels(self):
        f = torch.zeros(2, 3, dtype=f64)
        r = torch.ones(2, 3, dtype=f64)
        out = apply_gn_masked(f, r, torch.tensor([0, 1]), KernelMask(((0,), (2,)), 3))
        assert out.tolist() == [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]

    def test_class_count_mismatch(self):
        with pytest.raises(ValidationError):
            apply_gn_masked(torch.zeros(2, 3), torch.zeros(2, 3), torch.tensor([0, 2]), KernelMask(((0,), (1,)), 3))

    def test_invalid_masks(self):
        with pytest.raises(ValidationError):
            KernelMask(((0, 0),), 3)
        with pytest.raises(ValidationError):
            KernelMask(((3,),), 3)
        with pytest.raises(ValidationError):
            KernelMask(((0,), (0, 1)), 3)


class TestProjection:
    def test_clamps(self):
        p = project_params(params([-0.3], [1.7]))
        assert p.a.tolist() == [0.0] and p.b.tolist() == [1.0]

    def test_feasible_unchanged(self):
        p = params([0.0, 2.5], [0.0, 1.0])
        q = project_params(p)
        assert torch.equal(q.a, p.a) and torch.equal(q.b, p.b)

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.lists(st.floats(-10, 10), min_size=1, max_size=8))
    @settings(max_examples=100, deadline=None)
    def test_idempotent_and_feasible(self, a, b):
        n = min(len(a), len(b))
        p = project_params(params(a[:n], b[:n]))
        q = project_params(p)
        assert p.is_feasible()
        assert torch.equal(p.a, q.a) and torch.equal(p.b, q.b)

    def test_layer_project_in_place(self):
        layer = PropheterLayer(3, seed=0)
        with torch.no_grad():
            layer.a.sub_(5.0)
            layer.b.add_(5.0)
        layer.project_()
        assert layer.params.is_feasible()
