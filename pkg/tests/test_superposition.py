import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stack_attention import tensor_core as tc
from stack_attention.errors import DimensionError
from stack_attention.stacks import sup_init, sup_reading, sup_update, superposition_readings

D = torch.float64
PUSH = torch.tensor([1.0, 0.0, 0.0], dtype=D)
NOOP = torch.tensor([0.0, 1.0, 0.0], dtype=D)
POP = torch.tensor([0.0, 0.0, 1.0], dtype=D)


def vec(*xs):
    return torch.tensor(xs, dtype=D)


def test_initial_state_reads_zero():
    s = sup_init(3)
    assert s.t == 0 and s.elements.shape == (1, 3)
    assert torch.equal(sup_reading(s), torch.zeros(3, dtype=D))


def test_pure_push_reads_pushed_vector():
    v = vec(0.2, 0.7)
    s = sup_update(sup_init(2), PUSH, v)
    assert torch.equal(sup_reading(s), v)
    assert s.elements.shape[0] == 1


def test_push_then_pop_reads_zero():
    s = sup_update(sup_init(2), PUSH, vec(0.2, 0.7))
    s = sup_update(s, POP, vec(0.9, 0.9))
    assert torch.equal(sup_reading(s), torch.zeros(2, dtype=D))
    assert s.elements.shape[0] == 2


def test_half_push_half_noop():
    v1, v2 = vec(1.0, 0.0), vec(0.0, 1.0)
    s = sup_update(sup_init(2), PUSH, v1)
    s = sup_update(s, vec(0.5, 0.5, 0.0), v2)
    assert torch.allclose(sup_reading(s), 0.5 * v2 + 0.5 * v1)


@pytest.mark.parametrize("k", [1, 2, 5])
def test_k_pushes_then_k_pops(k):
    s = sup_init(2)
    for j in range(k):
        s = sup_update(s, PUSH, vec(0.1 * (j + 1), 0.5))
    for _ in range(k):
        s = sup_update(s, POP, vec(0.9, 0.9))
    assert torch.equal(sup_reading(s), torch.zeros(2, dtype=D))


def test_push_push_pop_exposes_first():
    v1, v2 = vec(0.3, 0.4), vec(0.6, 0.1)
    s = sup_update(sup_init(2), PUSH, v1)
    s = sup_update(s, PUSH, v2)
    s = sup_update(s, POP, vec(0.0, 0.0))
    assert torch.equal(sup_reading(s), v1)


def test_dimension_errors():
    s = sup_init(2)
    with pytest.raises(DimensionError):
        sup_update(s, torch.ones(2, dtype=D) / 2, vec(0.1, 0.2))
    with pytest.raises(DimensionError):
        sup_update(s, PUSH, vec(0.1, 0.2, 0.3))


def test_batched_matches_unbatched():
    g = torch.Generator().manual_seed(0)
    actions = torch.softmax(torch.randn(3, 6, 3, generator=g, dtype=D), -1)
    pushed = torch.rand(3, 6, 4, generator=g, dtype=D)
    batched = superposition_readings(actions, pushed)
    for b in range(3):
        assert torch.allclose(batched[b], superposition_readings(actions[b], pushed[b]), atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 4), st.integers(0, 10**6))
def test_rows_stay_in_convex_hull(n, m, seed):
    g = torch.Generator().manual_seed(seed)
    actions = torch.softmax(3 * torch.randn(n, 3, generator=g, dtype=D), -1)
    pushed = torch.rand(n, m, generator=g, dtype=D)
    s = sup_init(m)
    for t in range(n):
        s = sup_update(s, actions[t], pushed[t])
        # each row is a sub-convex combination of pushed vectors and 0
        assert (s.elements >= -1e-12).all()
        assert (s.elements <= pushed[: t + 1].max(dim=0).values + 1e-12).all()


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 10), st.integers(0, 10**6))
def test_noop_free_sum_conservation(n, seed):
    # without no-op, the row sum gains the pushed vector on push and loses the old top on pop
    g = torch.Generator().manual_seed(seed)
    choices = torch.randint(0, 2, (n,), generator=g)
    pushed = torch.rand(n, 3, generator=g, dtype=D)
    s = sup_init(3)
    for t in range(n):
        before = s.elements[: max(t, 1)].sum(0) if t > 0 else torch.zeros(3, dtype=D)
        top = sup_reading(s)
        a = PUSH if choices[t] == 0 else POP
        s = sup_update(s, a, pushed[t])
        expected = before + pushed[t] if choices[t] == 0 else before - top
        assert torch.allclose(s.elements.sum(0), expected, atol=1e-12)


def test_gradients_pass_grad_check():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(2, 5, 3, generator=g, dtype=D)
    pushed = torch.rand(2, 5, 3, generator=g, dtype=D)
    f = lambda a, v: superposition_readings(torch.softmax(a, -1), v)
    assert tc.grad_check(f, [logits, pushed], tol=1e-6).passed
    f32 = lambda a, v: superposition_readings(torch.softmax(a, -1), v)
    report = tc.grad_check(f32, [logits.float(), pushed.float()], tol=1e-4, numeric_f=f)
    assert report.passed, report
