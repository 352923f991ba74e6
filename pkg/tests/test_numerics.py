import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mixpipe.numerics import (
    PAPER_PRETRAIN, AdamW, AdamWHyper, NonFiniteError, OptimState, ScheduleConfig, ShapeError, Tensor,
    adamw_step, concat, cross_entropy, embedding, gelu, grad_check, layer_norm, lr_at_step, mean, no_grad,
    softmax, warmup_from_epoch_fraction, zero_grads,
)


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


small = arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)),
               elements=st.floats(-2, 2, allow_nan=False, width=64))
# Central differences of a sum carry roundoff ~ ulp(sum) / (2 eps); coordinates far below the
# others' scale would sit under that floor, so the 1e-8 check uses magnitudes in [0.25, 2].
moderate = arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)),
                  elements=st.floats(0.25, 2, width=64).flatmap(lambda v: st.sampled_from([v, -v])))


# -- forward ops -------------------------------------------------------
def test_softmax_symmetric_pair():
    assert np.array_equal(softmax(t64([0.0, 0.0])).data, [0.5, 0.5])


def test_layer_norm_constant_row_is_exact_zero_before_affine():
    x = t64([[3.0, 3.0, 3.0, 3.0]])
    out = layer_norm(x, t64(np.ones(4)), t64(np.zeros(4)))
    assert np.array_equal(out.data, np.zeros((1, 4)))
    shifted = layer_norm(x, t64(np.full(4, 2.0)), t64(np.full(4, 0.5)))
    assert np.array_equal(shifted.data, np.full((1, 4), 0.5))


def test_cross_entropy_hand_value():
    logits = t64([[math.log(2.0), math.log(1.0)]])
    # softmax = [2/3, 1/3]
    assert cross_entropy(logits, np.array([0])).item() == pytest.approx(-math.log(2.0 / 3.0), abs=1e-15)
    assert cross_entropy(logits, np.array([1])).item() == pytest.approx(math.log(3.0), abs=1e-15)


def test_cross_entropy_mask_selects_positions():
    logits = t64(np.random.default_rng(0).normal(size=(2, 3, 5)))
    targets = np.array([[1, 2, 3], [0, 4, 1]])
    mask = np.array([[True, False, True], [False, False, True]])
    lp = logits.data - np.log(np.exp(logits.data).sum(-1, keepdims=True))
    expect = -np.mean([lp[0, 0, 1], lp[0, 2, 3], lp[1, 2, 1]])
    assert cross_entropy(logits, targets, mask).item() == pytest.approx(expect, rel=1e-14)
    with pytest.raises(ValueError):
        cross_entropy(logits, targets, np.zeros_like(mask))


def test_cross_entropy_confident_logits_stay_precise():
    logits = t64([[40.0, 0.0, 0.0]])
    assert cross_entropy(logits, np.array([0])).item() == pytest.approx(2 * math.exp(-40.0), rel=1e-12)


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        t64(np.ones((2, 3))) @ t64(np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        t64(np.ones((2, 3))) + t64(np.ones((4,)))


def test_non_finite_results_are_errors():
    with pytest.raises(NonFiniteError):
        t64([1e308]) * t64([1e308])


def test_mean_axis_and_embedding_lookup():
    x = t64([[1.0, 2.0], [3.0, 6.0]])
    assert np.array_equal(mean(x, axis=0).data, [2.0, 4.0])
    table = t64(np.arange(12.0).reshape(4, 3))
    out = embedding(table, np.array([[3, 0, 3]]))
    assert np.array_equal(out.data[0], table.data[[3, 0, 3]])
    out.sum().backward()
    assert np.array_equal(table.grad[:, 0], [1.0, 0.0, 0.0, 2.0])


# -- backward ----------------------------------------------------------
def test_square_gradient():
    x = t64(3.0)
    (x * x).backward()
    assert x.grad == 6.0


def test_unused_parameter_has_zero_grad():
    x, unused = t64([1.0, 2.0]), t64([5.0])
    zero_grads([x, unused])
    (x * x).sum().backward()
    assert np.array_equal(unused.grad, [0.0])


def test_gradients_accumulate_across_uses_and_backward_twice_fails():
    x = t64([2.0])
    y = (x * x + x * 3.0).sum()
    y.backward()
    assert x.grad[0] == 7.0
    with pytest.raises(RuntimeError):
        y.backward()


def test_grads_only_cleared_by_zero_grads():
    x = t64([1.0])
    (x * 2.0).sum().backward()
    (x * 2.0).sum().backward()
    assert x.grad[0] == 4.0
    zero_grads([x])
    assert x.grad[0] == 0.0


def test_no_grad_records_nothing():
    x = t64([1.0])
    with no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


# -- grad_check --------------------------------------------------------
@settings(max_examples=25, deadline=None)
@given(moderate)
def test_grad_check_square_sum(a):
    assert grad_check(lambda x: (x * x).sum(), t64(a)) < 1e-8


@settings(max_examples=25, deadline=None)
@given(small)
def test_sum_gradient_is_exactly_ones(a):
    x = t64(a)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones_like(a))


OPS = {
    "matmul": lambda x, w: (x @ w).sum(),
    "mul_add": lambda x, w: ((x * x + x) @ w).mean(),
    "softmax": lambda x, w: (softmax(x @ w) * t64(np.arange(4.0), False)).sum(),
    "layer_norm": lambda x, w: (layer_norm(x, t64(np.linspace(0.5, 1.5, 3), False),
                                           t64(np.zeros(3), False)) @ w).sum(),
    "gelu": lambda x, w: gelu(x @ w).sum(),
    "concat": lambda x, w: (concat([x, x * 2.0], axis=0) @ w).sum(),
    "cross_entropy": lambda x, w: cross_entropy(x @ w, np.array([1, 3])),
    "transpose_reshape": lambda x, w: (x.transpose(1, 0).reshape(6) * t64(np.arange(6.0), False)).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_every_op_passes_grad_check(name, seed):
    rng = np.random.default_rng(seed)
    x = t64(rng.normal(size=(2, 3)))
    w = t64(rng.normal(size=(3, 4)), grad=False)
    assert grad_check(lambda v: OPS[name](v, w), x) < 1e-6


def test_grad_check_validates_inputs():
    with pytest.raises(TypeError):
        grad_check(lambda x: x.sum(), Tensor(np.ones(2, dtype=np.float32)))
    with pytest.raises(ValueError):
        grad_check(lambda x: x.sum(), t64([1.0]), eps=0.1)
    with pytest.raises(NonFiniteError):
        grad_check(lambda x: (x * 1e308) * 1e308, t64([1.0]))


# -- AdamW -------------------------------------------------------------
def test_adamw_first_step_magnitude():
    p = [np.zeros(1)]
    st_ = OptimState.for_params(p)
    adamw_step(p, [np.ones(1)], st_, AdamWHyper(lr=1e-3, weight_decay=0.1))
    # mhat = vhat = 1 -> update = lr * 1 / (1 + eps); decay on zero is zero
    assert p[0][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
    assert st_.step_count == 1


def test_adamw_zero_lr_keeps_params_but_moves_moments():
    p = [np.array([0.5, -1.0])]
    st_ = OptimState.for_params(p)
    adamw_step(p, [np.array([1.0, 2.0])], st_, AdamWHyper(lr=0.0))
    assert np.array_equal(p[0], [0.5, -1.0])
    assert np.allclose(st_.first_moment[0], [0.1, 0.2])
    assert np.allclose(st_.second_moment[0], [0.05, 0.2])


def test_adamw_decay_is_decoupled():
    p = [np.array([2.0])]
    st_ = OptimState.for_params(p)
    adamw_step(p, [np.array([0.0])], st_, AdamWHyper(lr=0.1, weight_decay=0.1))
    assert p[0][0] == pytest.approx(2.0 - 0.1 * 0.1 * 2.0, rel=1e-15)
    assert st_.first_moment[0][0] == 0.0


def test_adamw_rejects_bad_grads_before_mutating():
    p = [np.array([1.0]), np.array([2.0])]
    st_ = OptimState.for_params(p)
    with pytest.raises(NonFiniteError):
        adamw_step(p, [np.array([1.0]), np.array([np.nan])], st_, AdamWHyper())
    assert p[0][0] == 1.0 and st_.step_count == 0 and st_.first_moment[0][0] == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.permutations(range(4)))
def test_adamw_permutation_commutes(seed, perm):
    rng = np.random.default_rng(seed)
    params = [rng.normal(size=3) for _ in range(4)]
    grads = [rng.normal(size=3) for _ in range(4)]
    a = [p.copy() for p in params]
    adamw_step(a, grads, OptimState.for_params(a), AdamWHyper())
    b = [params[i].copy() for i in perm]
    adamw_step(b, [grads[i] for i in perm], OptimState.for_params(b), AdamWHyper())
    for j, i in enumerate(perm):
        assert np.array_equal(b[j], a[i])


def test_adamw_identical_params_get_identical_updates():
    p = [np.array([0.3]), np.array([0.3])]
    adamw_step(p, [np.array([0.7]), np.array([0.7])], OptimState.for_params(p), AdamWHyper())
    assert p[0][0] == p[1][0]


def test_adamw_class_steps_tensors():
    w = t64([1.0, 2.0])
    opt = AdamW([w], AdamWHyper(weight_decay=0.0))
    zero_grads([w])
    (w * w).sum().backward()
    opt.step(0.01)
    assert np.allclose(w.data, [0.99, 1.99])


# -- schedule ----------------------------------------------------------
@pytest.mark.parametrize("step,expect", [(0, 0.0), (2000, 5e-5), (91_000, 2.75e-5), (180_000, 5e-6)])
def test_paper_schedule_points(step, expect):
    got = lr_at_step(step, PAPER_PRETRAIN)
    assert got == expect if expect == 0 else abs(got - expect) / expect < 1e-12


def test_schedule_half_decay_oracle():
    # cosine at progress 1/2 is exactly the midpoint of peak and final
    cfg = ScheduleConfig(1.0, 0.2, 10, 110)
    assert lr_at_step(60, cfg) == pytest.approx(0.6, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-6, 1.0), st.floats(0.0, 1.0), st.integers(1, 50), st.integers(1, 200))
def test_schedule_continuity_and_monotone_decay(peak, frac, warm, extra):
    cfg = ScheduleConfig(peak, peak * frac, warm, warm + extra)
    assert lr_at_step(warm, cfg) == peak
    lrs = [lr_at_step(s, cfg) for s in range(warm, warm + extra + 1)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] == pytest.approx(peak * frac, rel=1e-12, abs=1e-18)


def test_schedule_validation():
    with pytest.raises(ValueError):
        lr_at_step(-1, PAPER_PRETRAIN)
    with pytest.raises(ValueError):
        lr_at_step(180_001, PAPER_PRETRAIN)
    with pytest.raises(ValueError):
        ScheduleConfig(1.0, 2.0, 0, 10)
    with pytest.raises(ValueError):
        ScheduleConfig(1.0, 0.0, 10, 10)
    with pytest.raises(ValueError):
        ScheduleConfig(1.0, 0.0, 5, 10, shape="cosine")
    cfg = ScheduleConfig(1.0, 0.0, 0, 10, shape="cosine")
    assert lr_at_step(0, cfg) == 1.0


def test_epoch_fraction_warmup():
    assert warmup_from_epoch_fraction(0.03, 1000) == 30
    assert warmup_from_epoch_fraction(0.03, 1001) == 31
    assert warmup_from_epoch_fraction(0.03, 10) == 1


def test_forward_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(3)
        x = t64(rng.normal(size=(4, 5)))
        w = t64(rng.normal(size=(5, 3)))
        loss = cross_entropy(gelu(layer_norm(x, t64(np.ones(5)), t64(np.zeros(5))) @ w), np.array([0, 1, 2, 0]))
        loss.backward()
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()
    assert run() == run()
