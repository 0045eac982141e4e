"""Parameter and FLOP accounting for SEDMamba configurations.

Counts are analytic, computed from the configuration alone. Conventions:

* a multiply-add is 2 FLOPs, a bias add is 1 FLOP per output element;
* elementwise nonlinearities are charged per element: sigmoid 3
  (exp, add, divide), SiLU 4 (sigmoid then multiply), softplus 3
  (exp, add, log);
* the selective scan is charged per step, channel and state entry for
  discretization (multiply, exp), input injection (multiply), the state
  update (multiply-add) and the readout (multiply-add), plus the skip term.

FLOPs are linear in the sequence length, so every report names the length
it was evaluated at and also gives FLOPs per frame.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

from .errors import ConfigError
from .model import BmssConfig, ModelConfig

REFERENCE_LENGTH = 100
CONVENTION = "multiply-add = 2 FLOPs; bias add = 1 FLOP; sigmoid 3, SiLU 4, softplus 3 FLOPs per element"

SIGMOID_FLOPS = 3
SILU_FLOPS = 4
SOFTPLUS_FLOPS = 3

SWEEP_BLOCKS = (1, 2, 3, 4, 5)
SWEEP_COMPRESSION = (16, 32, 64, 128)
SWEEP_DILATIONS = (2, 4, 8, 16, 32)

_COUNT = {"type": "integer", "minimum": 0}
_NUMBER = {"type": "number", "minimum": 0}

# JSON Schema (draft 2020-12) for ComplexityReport.to_json
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["total_params", "total_flops", "reference_length", "layers", "config", "convention",
                 "params_k", "flops_m", "flops_per_frame"],
    "additionalProperties": False,
    "properties": {
        "total_params": _COUNT,
        "total_flops": _COUNT,
        "reference_length": {"type": "integer", "minimum": 1},
        "layers": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "params", "flops"],
                "additionalProperties": False,
                "properties": {"name": {"type": "string"}, "params": _COUNT, "flops": _COUNT},
            },
        },
        "config": {"type": "object"},
        "convention": {"type": "string"},
        "params_k": _NUMBER,
        "flops_m": _NUMBER,
        "flops_per_frame": _NUMBER,
    },
}

# JSON Schema (draft 2020-12) for SweepTable.to_json
SWEEP_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["rows", "reference_length", "violations", "convention", "monotonic"],
    "additionalProperties": False,
    "properties": {
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["axis", "value", "params", "flops", "params_k", "flops_m"],
                "additionalProperties": False,
                "properties": {
                    "axis": {"type": "string"},
                    "value": {"type": "integer"},
                    "params": _COUNT,
                    "flops": _COUNT,
                    "params_k": _NUMBER,
                    "flops_m": _NUMBER,
                },
            },
        },
        "reference_length": {"type": "integer", "minimum": 1},
        "violations": {"type": "array", "items": {"type": "string"}},
        "convention": {"type": "string"},
        "monotonic": {"type": "boolean"},
    },
}


@dataclass(frozen=True)
class LayerCost:
    name: str
    params: int
    flops: int


@dataclass
class ComplexityReport:
    total_params: int
    total_flops: int
    reference_length: int
    layers: list[LayerCost]
    config: dict = field(default_factory=dict)
    convention: str = CONVENTION

    @property
    def params_k(self) -> float:
        return self.total_params / 1e3

    @property
    def flops_m(self) -> float:
        return self.total_flops / 1e6

    @property
    def flops_per_frame(self) -> float:
        return self.total_flops / self.reference_length

    def to_dict(self) -> dict:
        d = asdict(self)
        d["params_k"] = self.params_k
        d["flops_m"] = self.flops_m
        d["flops_per_frame"] = self.flops_per_frame
        return d

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def table(self) -> str:
        rows = [(c.name, f"{c.params:,}", f"{c.flops:,}") for c in self.layers]
        rows.append(("total", f"{self.total_params:,}", f"{self.total_flops:,}"))
        header = ("layer", "params", f"FLOPs (L={self.reference_length})")
        widths = [max(len(r[i]) for r in rows + [header]) for i in range(3)]
        fmt = f"{{:<{widths[0]}}}  {{:>{widths[1]}}}  {{:>{widths[2]}}}"
        lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
        lines += [fmt.format(*r) for r in rows]
        lines.append("")
        lines.append(f"params: {self.params_k:.2f}K  FLOPs: {self.flops_m:.2f}M  "
                     f"per frame: {self.flops_per_frame:,.0f}")
        lines.append(CONVENTION)
        return "\n".join(lines)


def _conv(name, L, c_in, c_out, k=1, groups=1, bias=True) -> LayerCost:
    weights = c_out * (c_in // groups) * k
    params = weights + (c_out if bias else 0)
    flops = 2 * L * weights + (L * c_out if bias else 0)
    return LayerCost(name, params, flops)


def _block_costs(prefix: str, cfg: BmssConfig, L: int) -> list[LayerCost]:
    G, di, N, r = cfg.compression, cfg.d_inner, cfg.state_size, cfg.dt_rank
    out = [_conv(prefix + "compress", L, cfg.d_in, G)]
    if cfg.fctf is not None:
        c_in = G
        for j in range(cfg.fctf.depth):
            out.append(_conv(f"{prefix}fctf.conv{j}", L, c_in, cfg.fctf.inner, cfg.fctf.kernel_size))
            c_in = cfg.fctf.inner
        out.append(_conv(prefix + "fctf.fuse", L, cfg.fctf.fused_width, G))
    out.append(_conv(prefix + "in_proj", L, G, 2 * di, bias=False))
    dw = _conv(prefix + "conv", L, di, di, cfg.conv_kernel, groups=di)
    out.append(replace(dw, flops=dw.flops + SILU_FLOPS * L * di))
    out.append(_conv(prefix + "x_proj", L, di, r + 2 * N, bias=False))
    dt = _conv(prefix + "dt_proj", L, r, di)
    out.append(replace(dt, flops=dt.flops + SOFTPLUS_FLOPS * L * di))
    # per state entry: discretize 2, inject 1, update 2, readout 2
    # per channel: delta*u 1, skip multiply-add 2
    scan_flops = L * di * (7 * N + 3)
    out.append(LayerCost(prefix + "scan", di * N + di, scan_flops))
    out.append(LayerCost(prefix + "gate", 0, (SILU_FLOPS + 1) * L * di))
    out.append(_conv(prefix + "out_proj", L, di, G, bias=False))
    out.append(_conv(prefix + "restore", L, G, cfg.d_out))
    return out


def layer_costs(cfg: ModelConfig, L: int = REFERENCE_LENGTH) -> list[LayerCost]:
    if L < 1:
        raise ConfigError(f"sequence length must be >= 1, got {L}")
    costs: list[LayerCost] = []
    for i, bc in enumerate(cfg.blocks()):
        costs += _block_costs(f"blocks.{i}.", bc, L)
    head = _conv("classifier", L, cfg.head_width, 1)
    costs.append(replace(head, flops=head.flops + SIGMOID_FLOPS * L))
    return costs


def count_params(cfg: ModelConfig) -> tuple[dict[str, int], int]:
    """Per-layer trainable scalar counts (biases included) and their total."""
    per_layer = {c.name: c.params for c in layer_costs(cfg, 1)}
    return per_layer, sum(per_layer.values())


def estimate_flops(cfg: ModelConfig, L: int) -> tuple[dict[str, int], int]:
    """Per-layer FLOPs over ``L`` frames and their total."""
    per_layer = {c.name: c.flops for c in layer_costs(cfg, L)}
    return per_layer, sum(per_layer.values())


def complexity_report(cfg: ModelConfig, L: int = REFERENCE_LENGTH) -> ComplexityReport:
    costs = layer_costs(cfg, L)
    return ComplexityReport(
        total_params=sum(c.params for c in costs),
        total_flops=sum(c.flops for c in costs),
        reference_length=L,
        layers=costs,
        config=cfg.to_dict(),
    )


# ---------------------------------------------------------------------------
# ablation sweeps
# ---------------------------------------------------------------------------

def ablation_configs(base: ModelConfig | None = None) -> dict[str, list[tuple[int, ModelConfig]]]:
    """Configs along the three ablation axes, each varying one setting of ``base``."""
    base = base or ModelConfig()
    return {
        "blocks": [(n, replace(base, num_blocks=n)) for n in SWEEP_BLOCKS],
        "compression": [(g, replace(base, compression=g)) for g in SWEEP_COMPRESSION],
        "fctf_depth": [(k, replace(base, dilations=SWEEP_DILATIONS[:k]))
                       for k in range(len(SWEEP_DILATIONS) + 1)],
    }


@dataclass
class SweepRow:
    axis: str
    value: int
    params: int
    flops: int
    params_k: float
    flops_m: float


@dataclass
class SweepTable:
    rows: list[SweepRow]
    reference_length: int
    violations: list[str]
    convention: str = CONVENTION

    @property
    def monotonic(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        d = asdict(self)
        d["monotonic"] = self.monotonic
        return d

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def table(self) -> str:
        lines = [f"{'axis':<12}{'value':>6}{'params (K)':>14}{'FLOPs (M)':>14}   L={self.reference_length}"]
        for r in self.rows:
            lines.append(f"{r.axis:<12}{r.value:>6}{r.params_k:>14.2f}{r.flops_m:>14.2f}")
        lines.append("monotonic: " + ("yes" if self.monotonic else "NO"))
        lines += ["  " + v for v in self.violations]
        return "\n".join(lines)


def monotonic_violations(rows: list[SweepRow]) -> list[str]:
    """Places where params or FLOPs fail to strictly grow along an axis."""
    out = []
    by_axis: dict[str, list[SweepRow]] = {}
    for r in rows:
        by_axis.setdefault(r.axis, []).append(r)
    for axis, seq in by_axis.items():
        seq = sorted(seq, key=lambda r: r.value)
        for a, b in zip(seq, seq[1:]):
            for what in ("params", "flops"):
                if getattr(b, what) <= getattr(a, what):
                    out.append(f"{axis}: {what} {getattr(a, what)} at {a.value} "
                               f"-> {getattr(b, what)} at {b.value}")
    return out


def sweep_report(configs, L: int = REFERENCE_LENGTH) -> SweepTable:
    """Complexity table over ``(axis, value, ModelConfig)`` triples.

    With no triples given, the three standard ablation axes around the
    default configuration are used.
    """
    if configs is None:
        configs = [(axis, v, c) for axis, items in ablation_configs().items() for v, c in items]
    rows = []
    for axis, value, cfg in configs:
        rep = complexity_report(cfg, L)
        rows.append(SweepRow(axis, int(value), rep.total_params, rep.total_flops, rep.params_k, rep.flops_m))
    return SweepTable(rows, L, monotonic_violations(rows))
