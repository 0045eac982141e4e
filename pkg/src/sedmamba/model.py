"""SEDMamba: stacked BMSS blocks followed by a per-frame classifier.

Each BMSS block compresses the channel width with a 1-tap convolution,
fuses multi-scale temporal context with a stack of dilated convolutions
(FCTF), runs a gated selective scan, and restores the width to half the
block input. After the last block a 1-tap, 1-channel convolution and a
sigmoid give a per-frame error probability.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .ssm import SelectiveParams, dt_rank_for, init_s4d_real, selective_scan_fast, selective_scan_reference
from .tensor import Tensor

SCAN_IMPLS = ("fast", "reference")


@dataclass(frozen=True)
class FctfConfig:
    channels: int  # input and output width (the compressed width G)
    inner: int  # width E of every dilated layer
    dilations: tuple[int, ...] = (2, 4, 8)
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be positive, got {self.dilations}")
        if any(b <= a for a, b in zip(self.dilations, self.dilations[1:])):
            raise ConfigError(f"dilations must be strictly increasing, got {self.dilations}")
        if self.kernel_size % 2 == 0:
            raise ConfigError("FCTF kernel size must be odd (symmetric padding)")
        if self.channels < 1 or self.inner < 1:
            raise ConfigError("FCTF widths must be positive")

    @property
    def depth(self) -> int:
        return len(self.dilations)

    @property
    def fused_width(self) -> int:
        return self.channels + self.depth * self.inner


@dataclass(frozen=True)
class BmssConfig:
    d_in: int
    compression: int
    fctf: FctfConfig | None
    state_size: int = 16
    expand: int = 2
    conv_kernel: int = 4
    dt_rank: int = 4

    def __post_init__(self):
        if self.d_in < 2:
            raise ConfigError(f"block input width must be >= 2, got {self.d_in}")
        if self.compression < 1:
            raise ConfigError(f"compression factor must be positive, got {self.compression}")
        if self.state_size < 1 or self.expand < 1 or self.conv_kernel < 1 or self.dt_rank < 1:
            raise ConfigError("state size, expand, conv kernel and dt rank must be positive")

    @property
    def d_inner(self) -> int:
        return self.expand * self.compression

    @property
    def d_out(self) -> int:
        return self.d_in // 2


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``fctf_channels`` and ``dt_rank`` default to ``compression // 8`` and
    ``ceil(compression / 16)``. An empty ``dilations`` tuple removes FCTF.
    """

    d_model: int = 1536
    num_blocks: int = 3
    compression: int = 64
    state_size: int = 16
    expand: int = 2
    fctf_channels: int | None = None
    dilations: tuple[int, ...] = (2, 4, 8)
    fctf_kernel: int = 3
    conv_kernel: int = 4
    dt_rank: int | None = None
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    scan: str = "fast"
    chunk_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.num_blocks < 1:
            raise ConfigError("need at least one BMSS block")
        if self.d_model < 2 ** self.num_blocks:
            raise ConfigError(f"d_model={self.d_model} is too narrow for {self.num_blocks} halvings")
        if self.scan not in SCAN_IMPLS:
            raise ConfigError(f"scan must be one of {SCAN_IMPLS}, got {self.scan!r}")
        if not 0 < self.dt_min <= self.dt_max:
            raise ConfigError("need 0 < dt_min <= dt_max")
        self.blocks()  # validates every block

    @property
    def inner_channels(self) -> int:
        return self.fctf_channels if self.fctf_channels is not None else max(1, self.compression // 8)

    @property
    def rank(self) -> int:
        return self.dt_rank if self.dt_rank is not None else dt_rank_for(self.compression)

    def blocks(self) -> list[BmssConfig]:
        fctf = None
        if self.dilations:
            fctf = FctfConfig(self.compression, self.inner_channels, self.dilations, self.fctf_kernel)
        return [
            BmssConfig(self.d_model // 2 ** i, self.compression, fctf, self.state_size,
                       self.expand, self.conv_kernel, self.rank)
            for i in range(self.num_blocks)
        ]

    @property
    def head_width(self) -> int:
        return self.d_model // 2 ** self.num_blocks

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


def receptive_field_formula(layer: int) -> int:
    """Receptive field after dilated layer ``layer`` (1..3): 2^(l+2) - 1."""
    if not 1 <= layer <= 3:
        raise ConfigError(f"layer index must be in [1, 3], got {layer}")
    return 2 ** (layer + 2) - 1


def stacked_receptive_fields(kernel_size: int, dilations) -> list[int]:
    """Exact span (in frames) after each layer of a stacked dilated convolution."""
    spans, span = [], 1
    for d in dilations:
        span += (kernel_size - 1) * d
        spans.append(span)
    return spans


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _conv_params(rng, c_out, c_in, k, groups=1):
    fan_in = (c_in // groups) * k
    return _uniform(rng, fan_in, (c_out, c_in // groups, k)), _uniform(rng, fan_in, (c_out,))


def init_block_params(cfg: BmssConfig, rng: np.random.Generator, dt_min=1e-3, dt_max=1e-1) -> dict[str, np.ndarray]:
    G, di, N, r = cfg.compression, cfg.d_inner, cfg.state_size, cfg.dt_rank
    p: dict[str, np.ndarray] = {}
    p["compress.weight"], p["compress.bias"] = _conv_params(rng, G, cfg.d_in, 1)
    if cfg.fctf is not None:
        c_in = G
        for j in range(cfg.fctf.depth):
            p[f"fctf.conv{j}.weight"], p[f"fctf.conv{j}.bias"] = _conv_params(
                rng, cfg.fctf.inner, c_in, cfg.fctf.kernel_size)
            c_in = cfg.fctf.inner
        p["fctf.fuse.weight"], p["fctf.fuse.bias"] = _conv_params(rng, G, cfg.fctf.fused_width, 1)
    p["in_proj.weight"] = _uniform(rng, G, (2 * di, G))
    p["conv.weight"], p["conv.bias"] = _conv_params(rng, di, di, cfg.conv_kernel, groups=di)
    ssm = init_s4d_real(di, N, r, rng, dt_min, dt_max)
    p["x_proj.weight"] = ssm["x_proj.weight"]
    p["dt_proj.weight"] = ssm["dt_proj.weight"]
    p["dt_proj.bias"] = ssm["dt_proj.bias"]
    p["A_log"] = ssm["A_log"]
    p["D"] = ssm["D"]
    p["out_proj.weight"] = _uniform(rng, di, (G, di))
    p["restore.weight"], p["restore.bias"] = _conv_params(rng, cfg.d_out, G, 1)
    return p


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for i, bc in enumerate(cfg.blocks()):
        for name, value in init_block_params(bc, rng, cfg.dt_min, cfg.dt_max).items():
            params[f"blocks.{i}.{name}"] = Tensor(value, requires_grad=True)
    w, b = _conv_params(rng, 1, cfg.head_width, 1)
    params["classifier.weight"] = Tensor(w, requires_grad=True)
    params["classifier.bias"] = Tensor(b, requires_grad=True)
    return params


class _Scoped:
    """Read-only view of a parameter dict under a name prefix."""

    def __init__(self, params, prefix):
        self.params, self.prefix = params, prefix

    def __getitem__(self, key):
        return self.params[self.prefix + key]

    def get(self, key):
        return self.params.get(self.prefix + key)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def fctf_forward(f_c: Tensor, cfg: FctfConfig, params) -> Tensor:
    """Fine-to-coarse temporal fusion of a ``[L, G]`` feature."""
    if f_c.ndim != 2 or f_c.shape[1] != cfg.channels:
        raise DimensionError(f"FCTF expects [L, {cfg.channels}], got {f_c.shape}")
    feats = [f_c]
    h = f_c
    for j, dil in enumerate(cfg.dilations):
        h = T.conv1d(h, params[f"conv{j}.weight"], params[f"conv{j}.bias"], dilation=dil, padding="same")
        feats.append(h)
    return T.conv1d(T.concat_channels(feats), params["fuse.weight"], params["fuse.bias"])


def bmss_forward(x: Tensor, cfg: BmssConfig, params, scan: str = "fast", chunk_size: int | None = None) -> Tensor:
    """One bottleneck multi-scale state-space block, ``[L, D] -> [L, D/2]``."""
    if x.ndim != 2 or x.shape[1] != cfg.d_in:
        raise DimensionError(f"BMSS block expects [L, {cfg.d_in}], got {x.shape}")
    di, N, r = cfg.d_inner, cfg.state_size, cfg.dt_rank

    f = T.conv1d(x, params["compress.weight"], params["compress.bias"])
    if cfg.fctf is not None:
        f = fctf_forward(f, cfg.fctf, _Scoped(params, "fctf."))

    xz = T.linear(f, params["in_proj.weight"])
    xs, z = T.slice_channels(xz, 0, di), T.slice_channels(xz, di, 2 * di)
    xs = T.conv1d(xs, params["conv.weight"], params["conv.bias"], padding="causal", groups=di)
    xs = T.silu(xs)

    x_dbl = T.linear(xs, params["x_proj.weight"])
    dt = T.slice_channels(x_dbl, 0, r)
    B = T.slice_channels(x_dbl, r, r + N)
    C = T.slice_channels(x_dbl, r + N, r + 2 * N)
    delta = T.softplus(T.linear(dt, params["dt_proj.weight"], params["dt_proj.bias"]))
    sp = SelectiveParams(A_log=params["A_log"], delta=delta, B=B, C=C, D=params["D"])
    if scan == "reference":
        y = selective_scan_reference(sp, xs)
    else:
        y = selective_scan_fast(sp, xs, chunk_size=chunk_size)

    y = T.mul(y, T.silu(z))
    y = T.linear(y, params["out_proj.weight"])
    return T.conv1d(y, params["restore.weight"], params["restore.bias"])


def model_forward(e_seq, cfg: ModelConfig, params, return_hidden: bool = False):
    """Per-frame error probabilities ``[L, 1]`` for an ``[L, D]`` embedding sequence."""
    x = e_seq if isinstance(e_seq, Tensor) else Tensor(np.asarray(e_seq, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != cfg.d_model:
        raise DimensionError(f"model expects [L, {cfg.d_model}] embeddings, got {x.shape}")
    hidden = []
    for i, bc in enumerate(cfg.blocks()):
        x = bmss_forward(x, bc, _Scoped(params, f"blocks.{i}."), cfg.scan, cfg.chunk_size)
        hidden.append(x)
    p = T.sigmoid(T.conv1d(x, params["classifier.weight"], params["classifier.bias"]))
    return (p, hidden) if return_hidden else p


@dataclass
class SEDMamba:
    config: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    params: dict[str, Tensor] = field(default=None, repr=False)

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.config, self.seed)

    def __call__(self, e_seq) -> Tensor:
        return model_forward(e_seq, self.config, self.params)

    def predict(self, e_seq) -> np.ndarray:
        """Probabilities as a flat array, without recording a graph."""
        with T.no_grad():
            return self(e_seq).data[:, 0].copy()

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise DimensionError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)
