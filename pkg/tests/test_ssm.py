import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sedmamba import tensor as T
from sedmamba.errors import DimensionError, NumericError
from sedmamba.ssm import (DiscreteLtiParams, LtiParams, SelectiveParams, auto_chunk, causal_convolve, discretize,
                          dt_rank_for, init_s4d_real, inverse_softplus, linear_scan, lti_recurrence, phi1,
                          selective_scan_fast, selective_scan_reference, ssm_kernel)
from sedmamba.tensor import Tensor

from conftest import check_grads


def random_lti(rng, N=None) -> LtiParams:
    N = N or int(rng.integers(1, 9))
    return LtiParams(A=-rng.uniform(0.05, 3.0, N), B=rng.normal(size=N), C=rng.normal(size=N),
                     delta=float(rng.uniform(0.01, 1.0)))


def random_selective(rng, L, d, N, requires_grad=False):
    arrays = {
        "A_log": np.log(rng.uniform(0.5, 4.0, (d, N))),
        "delta": rng.uniform(0.01, 0.5, (L, d)),
        "B": rng.normal(size=(L, N)),
        "C": rng.normal(size=(L, N)),
        "D": rng.normal(size=d),
    }
    u = rng.normal(size=(L, d))
    if requires_grad:
        return arrays, u
    return SelectiveParams(**{k: Tensor(v) for k, v in arrays.items()}), u


def brute_force_scan(A_log, delta, B, C, D, u):
    """Materialise every state h[t, c, n] with plain loops."""
    L, d = u.shape
    N = A_log.shape[1]
    A = -np.exp(A_log)
    h = np.zeros((L + 1, d, N))
    y = np.zeros((L, d))
    for t in range(L):
        for c in range(d):
            for n in range(N):
                h[t + 1, c, n] = np.exp(delta[t, c] * A[c, n]) * h[t, c, n] + delta[t, c] * B[t, n] * u[t, c]
            y[t, c] = sum(C[t, n] * h[t + 1, c, n] for n in range(N)) + D[c] * u[t, c]
    return y


# ---------------------------------------------------------------------------
# LTI
# ---------------------------------------------------------------------------

def test_discretize_closed_form():
    d = discretize(LtiParams(A=-1.0, B=1.0, C=1.0, delta=np.log(2.0)))
    assert d.A_bar[0] == pytest.approx(0.5, abs=1e-15)
    assert d.B_bar[0] == pytest.approx(0.5, abs=1e-15)


def test_discretize_zero_a_limit():
    d = discretize(LtiParams(A=0.0, B=2.0, C=1.0, delta=0.5))
    assert d.A_bar[0] == 1.0
    assert d.B_bar[0] == 1.0


def test_discretize_small_delta():
    d = discretize(LtiParams(A=-1.0, B=1.0, C=1.0, delta=1e-8))
    assert abs(d.A_bar[0] - (1 - 1e-8)) < 1e-12
    assert abs(d.B_bar[0] - 1e-8) < 1e-12


def test_discretize_rejects_nonpositive_delta():
    with pytest.raises(NumericError):
        discretize(LtiParams(A=-1.0, B=1.0, C=1.0, delta=0.0))


def test_phi1_matches_series_near_zero():
    z = np.array([-1e-9, 0.0, 1e-9, -1e-4])
    series = 1 + z / 2 + z**2 / 6 + z**3 / 24
    np.testing.assert_allclose(phi1(z), series, rtol=1e-14)


def test_abar_in_unit_interval(rng):
    for _ in range(50):
        d = discretize(random_lti(rng))
        assert np.all((d.A_bar > 0) & (d.A_bar < 1))


def test_recurrence_examples():
    d = DiscreteLtiParams(np.array([0.5]), np.array([0.5]))
    np.testing.assert_allclose(lti_recurrence(d, [1.0], [1, 1, 1]), [0.5, 0.75, 0.875], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(lti_recurrence(d, [1.0], np.zeros(5)), np.zeros(5))
    d0 = DiscreteLtiParams(np.array([0.5]), np.array([0.0]))
    np.testing.assert_array_equal(lti_recurrence(d0, [1.0], np.arange(4.0)), np.zeros(4))


def test_kernel_examples():
    d = DiscreteLtiParams(np.array([0.5]), np.array([0.5]))
    np.testing.assert_allclose(ssm_kernel(d, [1.0], 3), [0.5, 0.25, 0.125], rtol=0, atol=1e-15)
    d0 = DiscreteLtiParams(np.array([0.0]), np.array([0.7]))
    np.testing.assert_array_equal(ssm_kernel(d0, [2.0], 4), [1.4, 0, 0, 0])


def test_kernel_definition(rng):
    p = random_lti(rng, N=4)
    d = discretize(p)
    K = ssm_kernel(d, p.C, 10)
    for i in range(10):
        assert K[i] == pytest.approx(p.C @ (d.A_bar ** i * d.B_bar), rel=1e-12)


@pytest.mark.parametrize("L", [1, 8, 64])
def test_recurrence_equals_convolution(L):
    rng = np.random.default_rng(L)
    for _ in range(200):
        p = random_lti(rng)
        d = discretize(p)
        x = rng.normal(size=L)
        y_rec = lti_recurrence(d, p.C, x)
        y_conv = causal_convolve(x, ssm_kernel(d, p.C, L))
        assert np.max(np.abs(y_rec - y_conv)) < 1e-10


# ---------------------------------------------------------------------------
# selective scan: values
# ---------------------------------------------------------------------------

def test_zero_b_gives_skip_only(rng):
    sp, u = random_selective(rng, 12, 3, 4)
    sp.B = Tensor(np.zeros((12, 4)))
    for scan in (selective_scan_reference, selective_scan_fast):
        np.testing.assert_allclose(scan(sp, u).data, sp.D.data * u, rtol=0, atol=1e-15)


def test_time_invariant_reduction(rng):
    for _ in range(20):
        L = int(rng.integers(1, 40))
        a, b, c, dt = -rng.uniform(0.1, 3), rng.normal(), rng.normal(), rng.uniform(0.01, 1)
        sp = SelectiveParams(A_log=np.log([[-a]]), delta=np.full((L, 1), dt), B=np.full((L, 1), b),
                             C=np.full((L, 1), c), D=np.zeros(1))
        x = rng.normal(size=L)
        lti = DiscreteLtiParams(np.array([np.exp(dt * a)]), np.array([dt * b]))
        expected = lti_recurrence(lti, [c], x)
        for scan in (selective_scan_reference, selective_scan_fast):
            assert np.max(np.abs(scan(sp, x[:, None]).data[:, 0] - expected)) < 1e-10


def test_reference_matches_brute_force(rng):
    arrays, u = random_selective(rng, 16, 2, 4, requires_grad=True)
    sp = SelectiveParams(**arrays)
    expected = brute_force_scan(**arrays, u=u)
    np.testing.assert_allclose(selective_scan_reference(sp, u).data, expected, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("chunk", [None, 1, 2, 5, 16, 64, 300])
def test_fast_matches_reference(chunk, rng):
    sp, u = random_selective(rng, 61, 5, 16)
    ref = selective_scan_reference(sp, u).data
    fast = selective_scan_fast(sp, u, chunk_size=chunk).data
    assert np.max(np.abs(fast - ref) / (np.abs(ref) + 1e-12)) < 1e-8


@pytest.mark.parametrize("chunk", [1, 37, 64])
def test_degenerate_chunking_is_bit_identical(chunk, rng):
    sp, u = random_selective(rng, 37, 4, 8)
    assert np.array_equal(selective_scan_fast(sp, u, chunk_size=chunk).data, selective_scan_reference(sp, u).data)


def test_causality(rng):
    sp, u = random_selective(rng, 40, 3, 4)
    base = selective_scan_fast(sp, u).data
    for t in rng.integers(1, 40, size=5):
        u2 = u.copy()
        u2[t] += 3.0
        moved = selective_scan_fast(sp, u2).data
        np.testing.assert_array_equal(base[:t], moved[:t])
        assert not np.allclose(base[t], moved[t])


def test_long_sequence_stays_bounded():
    rng = np.random.default_rng(0)
    L, d, N = 100_000, 2, 4
    sp = SelectiveParams(A_log=np.log(rng.uniform(0.5, 2, (d, N))), delta=rng.uniform(0.01, 1, (L, d)),
                         B=rng.uniform(-1, 1, (L, N)), C=rng.uniform(-1, 1, (L, N)), D=np.ones(d))
    u = rng.uniform(-1, 1, (L, d))
    with T.no_grad():
        y = selective_scan_fast(sp, u).data
    # |h| <= max|delta B u| / (1 - max exp(delta A)) bounds the state
    assert np.all(np.isfinite(y))
    assert np.abs(y).max() < 1e3


def test_shape_and_positivity_checks(rng):
    sp, u = random_selective(rng, 8, 2, 4)
    with pytest.raises(DimensionError):
        selective_scan_fast(sp, u[:, :1])
    sp.delta = Tensor(-np.ones((8, 2)))
    with pytest.raises(NumericError):
        selective_scan_reference(sp, u)
    sp.delta = Tensor(np.ones((8, 2)))
    with pytest.raises(DimensionError):
        selective_scan_fast(sp, u, chunk_size=0)


# ---------------------------------------------------------------------------
# selective scan: gradients
# ---------------------------------------------------------------------------

def _scan_loss(scan, w, **kw):
    def build(t):
        sp = SelectiveParams(t["A_log"], t["delta"], t["B"], t["C"], t["D"])
        return T.tsum(T.mul(scan(sp, t["u"], **kw), w))
    return build


def test_reference_gradients_finite_difference():
    rng = np.random.default_rng(3)
    for _ in range(10):
        L, d, N = int(rng.integers(1, 9)), int(rng.integers(1, 3)), int(rng.integers(1, 5))
        arrays, u = random_selective(rng, L, d, N, requires_grad=True)
        arrays["u"] = u
        w = rng.normal(size=(L, d))
        errs = check_grads(_scan_loss(selective_scan_reference, w), arrays)
        assert max(errs.values()) < 1e-4, errs


@pytest.mark.parametrize("chunk", [None, 1, 3])
def test_fast_gradients_finite_difference(chunk):
    rng = np.random.default_rng(4)
    for _ in range(10):
        L, d, N = int(rng.integers(1, 12)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
        arrays, u = random_selective(rng, L, d, N, requires_grad=True)
        arrays["u"] = u
        w = rng.normal(size=(L, d))
        errs = check_grads(lambda t: _scan_loss(selective_scan_fast, w, chunk_size=chunk)(t), arrays)
        assert max(errs.values()) < 1e-5, errs


def test_fast_gradients_match_reference_autodiff(rng):
    arrays, u = random_selective(rng, 50, 4, 16, requires_grad=True)
    arrays["u"] = u
    w = rng.normal(size=(50, 4))
    grads = []
    for scan in (selective_scan_reference, selective_scan_fast):
        leaves = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        _scan_loss(scan, w)(leaves).backward()
        grads.append({k: t.grad for k, t in leaves.items()})
    for k in arrays:
        np.testing.assert_allclose(grads[1][k], grads[0][k], rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------------------
# the two-pass linear scan
# ---------------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(L=st.integers(1, 80), chunk=st.integers(1, 90), seed=st.integers(0, 2**16))
def test_linear_scan_matches_loop(L, chunk, seed):
    rng = np.random.default_rng(seed)
    a, b, h0 = rng.uniform(0, 1, (L, 3)), rng.normal(size=(L, 3)), rng.normal(size=3)
    h, expected = h0, np.empty((L, 3))
    for t in range(L):
        h = a[t] * h + b[t]
        expected[t] = h
    np.testing.assert_allclose(linear_scan(a, b, h0, chunk), expected, rtol=1e-12, atol=1e-12)


def test_auto_chunk_near_sqrt():
    assert auto_chunk(1) == 1
    assert auto_chunk(100) == 10
    assert auto_chunk(101) == 11


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def test_init_values():
    p = init_s4d_real(6, 4, rng=np.random.default_rng(0))
    np.testing.assert_allclose(-np.exp(p["A_log"]), np.tile([-1.0, -2.0, -3.0, -4.0], (6, 1)), rtol=1e-15)
    dt = np.logaddexp(0, p["dt_proj.bias"])
    assert np.all((dt >= 1e-3 - 1e-12) & (dt <= 1e-1 + 1e-12))
    np.testing.assert_array_equal(p["D"], np.ones(6))
    assert p["x_proj.weight"].shape == (dt_rank_for(6) + 8, 6)


def test_initial_abar_in_unit_interval():
    p = init_s4d_real(32, 16, rng=np.random.default_rng(1))
    dt = np.logaddexp(0, p["dt_proj.bias"])
    a_bar = np.exp(dt[:, None] * -np.exp(p["A_log"]))
    assert np.all((a_bar > 0) & (a_bar < 1))


def test_dt_rank_and_inverse_softplus():
    assert dt_rank_for(128) == 8
    assert dt_rank_for(64) == 4
    assert dt_rank_for(65) == 5
    y = np.array([1e-4, 0.01, 1.0, 20.0])
    np.testing.assert_allclose(np.logaddexp(0, inverse_softplus(y)), y, rtol=1e-12)
