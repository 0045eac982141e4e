"""State-space sequence kernels.

Two families live here:

* time-invariant (LTI) diagonal SSMs: zero-order-hold discretization,
  the step-by-step recurrence and the equivalent convolution kernel;
* the selective (input-dependent) scan used inside each BMSS block, in a
  plain sequential reference form built from autodiff primitives and a
  chunked fast form with a hand-written backward pass.

All state matrices are diagonal, so ``A`` is stored as its diagonal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, NumericError
from .tensor import Tensor, as_tensor, make_result


@dataclass
class LtiParams:
    A: np.ndarray  # (N,) diagonal, negative for a stable system
    B: np.ndarray  # (N,)
    C: np.ndarray  # (N,)
    delta: float

    def __post_init__(self):
        self.A = np.atleast_1d(np.asarray(self.A, dtype=np.float64))
        self.B = np.atleast_1d(np.asarray(self.B, dtype=np.float64))
        self.C = np.atleast_1d(np.asarray(self.C, dtype=np.float64))
        if not self.A.shape == self.B.shape == self.C.shape:
            raise DimensionError(f"A, B, C shapes differ: {self.A.shape}, {self.B.shape}, {self.C.shape}")

    @property
    def is_stable(self) -> bool:
        return bool(np.all(self.A < 0)) and self.delta > 0


@dataclass
class DiscreteLtiParams:
    A_bar: np.ndarray  # (N,)
    B_bar: np.ndarray  # (N,)


def phi1(z):
    """(e^z - 1) / z, with the removable singularity at 0 filled by 1."""
    z = np.asarray(z, dtype=np.float64)
    safe = np.where(z == 0.0, 1.0, z)
    return np.where(z == 0.0, 1.0, np.expm1(safe) / safe)


def discretize(p: LtiParams) -> DiscreteLtiParams:
    """Zero-order hold: ``A_bar = exp(dA)``, ``B_bar = d * B * phi1(dA)``.

    ``phi1`` replaces the matrix inverse ``(dA)^-1 (exp(dA) - I)`` which is
    ill-conditioned when ``dA`` is small.
    """
    if not p.delta > 0:
        raise NumericError(f"discretize: timescale must be positive, got {p.delta}")
    z = p.delta * p.A
    return DiscreteLtiParams(A_bar=np.exp(z), B_bar=p.delta * p.B * phi1(z))


def lti_recurrence(d: DiscreteLtiParams, C, x) -> np.ndarray:
    """h_t = A_bar h_{t-1} + B_bar x_t, y_t = <C, h_t>, starting from h = 0."""
    x = np.asarray(x, dtype=np.float64)
    C = np.atleast_1d(np.asarray(C, dtype=np.float64))
    h = np.zeros_like(d.A_bar)
    y = np.empty(len(x))
    for t, xt in enumerate(x):
        h = d.A_bar * h + d.B_bar * xt
        y[t] = C @ h
    return y


def ssm_kernel(d: DiscreteLtiParams, C, L: int) -> np.ndarray:
    """Kernel taps K[i] = C . A_bar^i . B_bar for i in [0, L)."""
    if L < 1:
        raise DimensionError(f"kernel length must be >= 1, got {L}")
    C = np.atleast_1d(np.asarray(C, dtype=np.float64))
    powers = d.A_bar[None, :] ** np.arange(L)[:, None]
    return powers @ (C * d.B_bar)


def causal_convolve(x, kernel) -> np.ndarray:
    """y_t = sum_{i<=t} K[i] x_{t-i}."""
    x = np.asarray(x, dtype=np.float64)
    return np.convolve(x, kernel)[: len(x)]


# ---------------------------------------------------------------------------
# selective scan
# ---------------------------------------------------------------------------

@dataclass
class SelectiveParams:
    """Inputs of one selective scan.

    ``A_log`` is ``[d_inner, N]`` with ``A = -exp(A_log)``; ``delta`` is the
    per-step timescale ``[L, d_inner]`` (already positive); ``B`` and ``C``
    are ``[L, N]``; ``D`` is the per-channel skip gain ``[d_inner]``.
    """

    A_log: Tensor
    delta: Tensor
    B: Tensor
    C: Tensor
    D: Tensor

    def __post_init__(self):
        for name in ("A_log", "delta", "B", "C", "D"):
            setattr(self, name, as_tensor(getattr(self, name)))

    def check(self, u: Tensor):
        if u.ndim != 2:
            raise DimensionError(f"scan input must be [L, d_inner], got {u.shape}")
        L, d = u.shape
        N = self.A_log.shape[1] if self.A_log.ndim == 2 else -1
        expected = {"A_log": (d, N), "delta": (L, d), "B": (L, N), "C": (L, N), "D": (d,)}
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(f"selective scan: {name} has shape {got}, expected {shape}")
        if np.any(self.delta.data <= 0):
            raise NumericError(f"selective scan: timescale must be positive everywhere, min is {self.delta.data.min():g}"
                               " (a softplus underflow means the activations feeding it diverged)")


def dt_rank_for(width: int) -> int:
    return math.ceil(width / 16)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def init_s4d_real(d_inner: int, N: int, dt_rank: int | None = None, rng: np.random.Generator | None = None,
                  dt_min: float = 1e-3, dt_max: float = 1e-1, dt_floor: float = 1e-4) -> dict[str, np.ndarray]:
    """Initial values for the selective-scan parameters of one block.

    ``A[c, n] = -(n + 1)``; the timescale bias is the inverse softplus of a
    log-uniform draw in ``[dt_min, dt_max]``; the skip gain is one.
    """
    rng = np.random.default_rng() if rng is None else rng
    dt_rank = dt_rank_for(d_inner) if dt_rank is None else dt_rank
    A_log = np.log(np.tile(np.arange(1, N + 1, dtype=np.float64), (d_inner, 1)))
    dt = np.exp(rng.uniform(size=d_inner) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
    dt = np.maximum(dt, dt_floor)
    bound_x = 1.0 / math.sqrt(d_inner)
    bound_dt = dt_rank ** -0.5
    return {
        "A_log": A_log,
        "D": np.ones(d_inner),
        "x_proj.weight": rng.uniform(-bound_x, bound_x, size=(dt_rank + 2 * N, d_inner)),
        "dt_proj.weight": rng.uniform(-bound_dt, bound_dt, size=(d_inner, dt_rank)),
        "dt_proj.bias": inverse_softplus(dt),
    }


def selective_scan_reference(sp: SelectiveParams, u) -> Tensor:
    """Sequential selective scan composed from autodiff primitives.

    For each step ``t`` and channel ``c``::

        h_t = exp(delta_t[c] * A[c]) * h_{t-1} + delta_t[c] * u_t[c] * B_t
        y_t[c] = <C_t, h_t> + D[c] * u_t[c]

    Slow, but every operation is an ordinary recorded op so gradients come
    from the generic backward machinery.
    """
    u = as_tensor(u)
    sp.check(u)
    L, d = u.shape
    N = sp.A_log.shape[1]
    A = T.neg(T.exp(sp.A_log))
    h = Tensor(np.zeros((d, N), dtype=u.data.dtype))
    rows = []
    for t in range(L):
        dt = T.reshape(T.take_row(sp.delta, t), (d, 1))
        ut = T.reshape(T.take_row(u, t), (d, 1))
        bt = T.reshape(T.take_row(sp.B, t), (1, N))
        ct = T.reshape(T.take_row(sp.C, t), (1, N))
        dA = T.exp(T.mul(dt, A))
        dBu = T.mul(T.mul(dt, ut), bt)
        h = T.add(T.mul(dA, h), dBu)
        y = T.add(T.tsum(T.mul(h, ct), axis=1), T.mul(sp.D, T.take_row(u, t)))
        rows.append(y)
    return T.stack_rows(rows)


def linear_scan(a: np.ndarray, b: np.ndarray, h0: np.ndarray, chunk: int) -> np.ndarray:
    """All states of h_t = a_t * h_{t-1} + b_t (elementwise) given h_{-1} = h0.

    Two-pass chunked scan. Pass one runs the recurrence inside every chunk
    at once (vectorised across chunks, zero carry-in) while accumulating the
    chunk's decay product; pass two walks the chunks in order to propagate
    the carried state, which is then applied to all chunk states in one
    vectorised update. Python-level iterations: ``chunk + L / chunk``.
    """
    L = a.shape[0]
    n_chunks = -(-L // chunk)
    pad = n_chunks * chunk - L
    if pad:
        a = np.concatenate([a, np.ones((pad,) + a.shape[1:], dtype=a.dtype)])
        b = np.concatenate([b, np.zeros((pad,) + b.shape[1:], dtype=b.dtype)])
    a = a.reshape((n_chunks, chunk) + a.shape[1:])
    b = b.reshape((n_chunks, chunk) + b.shape[1:])
    h = np.empty_like(b)
    decay = np.empty_like(a)
    h[:, 0] = b[:, 0]
    decay[:, 0] = a[:, 0]
    for j in range(1, chunk):
        h[:, j] = a[:, j] * h[:, j - 1] + b[:, j]
        decay[:, j] = a[:, j] * decay[:, j - 1]
    carry_in = np.empty((n_chunks,) + h.shape[2:], dtype=h.dtype)
    carry = h0
    for i in range(n_chunks):
        carry_in[i] = carry
        carry = decay[i, -1] * carry + h[i, -1]
    h += decay * carry_in[:, None]
    return h.reshape((n_chunks * chunk,) + h.shape[2:])[:L]


def auto_chunk(L: int) -> int:
    return max(1, math.isqrt(max(L - 1, 0)) + 1)


SEGMENT = 2048  # steps processed per pass when no states need to be kept


def _scan_forward(u, delta, A, B, C, D, chunk, keep):
    L, d = u.shape
    N = A.shape[1]
    h = np.zeros((d, N), dtype=u.dtype)
    y = np.empty((L, d), dtype=u.dtype)
    step = L if keep else SEGMENT
    saved = {}
    for s in range(0, L, step):
        e = min(s + step, L)
        dl = delta[s:e, :, None]
        a = np.exp(dl * A)
        b = dl * u[s:e, :, None] * B[s:e, None, :]
        hs = linear_scan(a, b, h, chunk or auto_chunk(e - s))
        if not np.all(np.isfinite(hs)):
            raise NumericError(f"selective scan: non-finite state in steps [{s}, {e})")
        y[s:e] = (hs * C[s:e, None, :]).sum(axis=-1) + D * u[s:e]
        h = hs[-1]
        if keep:
            saved = {"a": a, "states": hs}
    return y, saved


def _scan_backward(gy, u, delta, A, B, C, D, saved, chunk):
    a, states = saved["a"], saved["states"]
    L, d = u.shape
    # gh_t = C_t gy_t + a_{t+1} gh_{t+1}: the same recurrence, run backwards
    nxt = np.zeros_like(a)
    nxt[:-1] = a[1:]
    r = gy[:, :, None] * C[:, None, :]
    gh = linear_scan(nxt[::-1], r[::-1], np.zeros_like(a[0]), chunk or auto_chunk(L))[::-1]
    prev = np.zeros_like(states)
    prev[1:] = states[:-1]
    gexp = gh * prev * a  # w.r.t. the exponent delta * A
    ghB = np.einsum("tcn,tn->tc", gh, B)
    gdelta = np.einsum("tcn,cn->tc", gexp, A) + u * ghB
    gA = np.einsum("tcn,tc->cn", gexp, delta)
    gu = D * gy + delta * ghB
    gB = np.einsum("tcn,tc->tn", gh, delta * u)
    gC = np.einsum("tc,tcn->tn", gy, states)
    gD = (gy * u).sum(axis=0)
    return gu, gdelta, gA, gB, gC, gD


def selective_scan_fast(sp: SelectiveParams, u, chunk_size: int | None = None) -> Tensor:
    """Chunked selective scan with an analytic backward pass.

    Discretisation is vectorised over the whole sequence and the recurrence
    runs through :func:`linear_scan`, so cost is linear in ``L``.
    ``chunk_size`` defaults to about ``sqrt(L)``. With ``chunk_size=1`` or a
    single chunk covering the sequence the arithmetic is exactly that of
    :func:`selective_scan_reference`.
    """
    u = as_tensor(u)
    sp.check(u)
    if chunk_size is not None and chunk_size < 1:
        raise DimensionError(f"chunk_size must be >= 1, got {chunk_size}")
    parents = (u, sp.delta, sp.A_log, sp.B, sp.C, sp.D)
    need_grad = T.is_grad_enabled() and any(p.requires_grad for p in parents)
    A = -np.exp(sp.A_log.data)
    args = (u.data, sp.delta.data, A, sp.B.data, sp.C.data, sp.D.data)
    y, saved = _scan_forward(*args, chunk=chunk_size, keep=need_grad)

    def backward(gy):
        gu, gdelta, gA, gB, gC, gD = _scan_backward(gy, *args, saved=saved, chunk=chunk_size)
        return gu, gdelta, gA * A, gB, gC, gD

    return make_result("selective_scan", y, parents, backward)
