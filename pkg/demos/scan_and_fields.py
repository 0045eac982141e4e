"""Walk through the state space core and the FCTF receptive fields.

    python demos/scan_and_fields.py
"""

import time

import numpy as np

from sedmamba.model import FctfConfig, receptive_field_formula, stacked_receptive_fields
from sedmamba.ssm import (LtiParams, SelectiveParams, causal_convolve, discretize, init_s4d_real, lti_recurrence,
                          selective_scan_fast, selective_scan_reference, ssm_kernel)

rng = np.random.default_rng(0)

# A time-invariant SSM can be run as a recurrence or as one long convolution.
p = LtiParams(A=-rng.uniform(0.1, 2.0, 8), B=rng.normal(size=8), C=rng.normal(size=8), delta=0.1)
d = discretize(p)
x = rng.normal(size=64)
rec = lti_recurrence(d, p.C, x)
conv = causal_convolve(x, ssm_kernel(d, p.C, 64))
print(f"LTI recurrence vs convolution, L=64: max |diff| = {np.abs(rec - conv).max():.1e}")

# The selective scan lets the timescale and B, C vary per frame.
L, d_inner, N = 2000, 128, 16
A_log = init_s4d_real(d_inner, N, rng=rng)["A_log"]
sp = SelectiveParams(
    A_log=A_log,
    delta=rng.uniform(1e-3, 0.1, (L, d_inner)),
    B=rng.normal(size=(L, N)),
    C=rng.normal(size=(L, N)),
    D=np.ones(d_inner),
)
u = rng.normal(size=(L, d_inner))
t = time.perf_counter()
ref = selective_scan_reference(sp, u).data
t_ref = time.perf_counter() - t
t = time.perf_counter()
fast = selective_scan_fast(sp, u).data
t_fast = time.perf_counter() - t
print(f"selective scan L={L}, d_inner={d_inner}, N={N}: reference {t_ref:.2f}s, chunked {t_fast:.2f}s, "
      f"max rel diff {np.max(np.abs(fast - ref) / (np.abs(ref) + 1e-12)):.1e}")

# Receptive field of the dilated stack, measured against the closed form.
fields = stacked_receptive_fields(3, (2, 4, 8))
for depth, span in enumerate(fields, start=1):
    print(f"FCTF depth {depth}: stacked field {span:>2} frames, closed form {receptive_field_formula(depth)}")
print("each 3-tap layer with dilation r adds 2r frames; the closed form counts two more")
print(f"fused width for G=64, E=8: {FctfConfig(64, 8).fused_width}")
