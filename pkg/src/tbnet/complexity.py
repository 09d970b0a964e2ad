"""Parameter, FLOP and temporal receptive-field accounting.

Closed-form rows give the per-block formulas; the as-built
view enumerates the weights actually held by a model. FLOPs count one
multiply-accumulate as 2 FLOPs. The closed-form computation column equals
params * Q, i.e. multiply-accumulates.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as te
from .bilinear import BottleneckTB, temporal_rfs
from .layers import Layer, Module
from .tensor import ContractError, Tensor

METHODS = ("conv2d_3x3", "conv3d_3x3x3", "tb_block", "bottleneck_tb")
FLOP_CONVENTION = "FLOPs = 2 x multiply-accumulates; formula computation column = params x Q (MACs)"


@dataclass(frozen=True)
class FormulaRow:
    method: str
    coefficient: Fraction  # params = coefficient * C^2
    params: int
    flops: int
    rfs: int

    @property
    def label(self) -> str:
        c = self.coefficient
        text = str(c.numerator) if c.denominator == 1 else f"{float(c):g}"
        return f"{text}C^2"


def _coefficient(method: str, p: int) -> Fraction:
    if method == "conv2d_3x3":
        return Fraction(9)
    if method == "conv3d_3x3x3":
        return Fraction(27)
    if method == "tb_block":
        return Fraction(p)
    if method == "bottleneck_tb":
        return Fraction(6) + Fraction(p, 16)
    raise ContractError(f"unknown method {method!r}; expected one of {METHODS}")


def table1_formula(method: str, C: int, p: int = 20, Q: int = 1) -> FormulaRow:
    """Closed-form params, computation (params * Q) and temporal RFS for one block type."""
    coef = _coefficient(method, p)
    if C < 1 or Q < 1 or p < 1:
        raise ContractError(f"need C, Q, p >= 1, got C={C}, Q={Q}, p={p}")
    params = coef * C * C
    if params.denominator != 1:
        raise ContractError(f"{method} at C={C}, p={p} gives non-integer params {params}")
    rfs = {"conv2d_3x3": 1, "conv3d_3x3x3": 3, "tb_block": 2, "bottleneck_tb": 6}[method]
    return FormulaRow(method, coef, int(params), int(params) * Q, rfs)


def table1_rows(C: int, p: int = 20, Q: int = 1) -> list[FormulaRow]:
    return [table1_formula(m, C, p, Q) for m in METHODS]


@dataclass
class LayerRow:
    layer: str
    kind: str
    params: int
    flops: int
    rfs: int
    formula_params: int | None = None
    discrepancy: int | None = None


@dataclass
class ComplexityReport:
    rows: list[LayerRow]
    blocks: list[LayerRow] = field(default_factory=list)
    Q: int = 0
    input_shape: tuple | None = None

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def weight_params(self) -> int:
        """Parameters in conv/TB/linear weight tensors only (no norms, no biases)."""
        return sum(r.formula_params or 0 for r in self.rows if r.formula_params is not None)

    def to_dict(self) -> dict:
        return {
            "convention": FLOP_CONVENTION,
            "Q": self.Q,
            "input_shape": list(self.input_shape) if self.input_shape else None,
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "rows": [asdict(r) for r in self.rows],
            "blocks": [asdict(r) for r in self.blocks],
        }


def _size(t: Tensor) -> int:
    return int(np.prod(t.shape))


def _positions(shape) -> int:
    """Output positions per sample: T*H*W for clips, 1 for vectors."""
    return int(np.prod(shape[1:])) // shape[2] if len(shape) == 5 else 1


def _layer_row(name: str, layer: Layer) -> LayerRow:
    params = sum(_size(p) for p in layer.parameters())
    out = layer.out_shape
    kind = layer.kind
    weight = getattr(layer, "weight", None)
    formula, rfs, flops = None, 1, 0
    if kind in ("conv2d", "conv3d", "temporal_conv"):
        macs_per_pos = _size(weight) // weight.shape[0]
        formula = _size(weight)
        rfs = {"conv2d": 1, "conv3d": weight.shape[2] if weight.ndim == 5 else 1,
               "temporal_conv": weight.shape[1]}[kind]
        if out is not None:
            flops = 2 * macs_per_pos * weight.shape[0] * _positions(out)
    elif kind == "tb":
        c_out, p, c_in = layer.factors.shape
        formula = p * c_in * c_out
        rfs = 2
        if out is not None:
            # 1x1 conv to C_out*p maps, then one product and one add per factor map
            flops = (2 * c_in + 2) * c_out * p * _positions(out)
    elif kind in ("batch_norm", "sample_norm"):
        if out is not None:
            flops = 2 * _positions(out) * out[2]
    elif kind == "linear":
        formula = _size(weight)
        flops = 2 * _size(weight) + weight.shape[0]
    return LayerRow(name, kind, params, int(flops), rfs, formula, 0 if formula is not None else None)


def _trace_shapes(model: Module, input_shape) -> None:
    was_training = model.training
    model.eval()
    try:
        dtype = next(iter(model.parameters())).dtype
        with te.no_grad():
            model(Tensor(np.zeros(input_shape, dtype=dtype)))
    finally:
        model.train(was_training)


def count_params(model: Module, input_shape=None) -> ComplexityReport:
    """Exact per-layer parameter counts; FLOPs need ``input_shape`` (one sample is traced).

    Bottleneck TB blocks also get an aggregate row comparing the as-built
    weight count with the closed form at C = block input width.
    """
    if input_shape is not None:
        shape = tuple(input_shape)
        _trace_shapes(model, (1,) + shape[1:] if len(shape) == 5 else shape)
    items = [(name, m) for name, m in model.modules() if isinstance(m, Layer)]
    rows = [_layer_row(name or m.kind, m) for name, m in items]
    blocks = []
    for name, m in model.modules():
        if not isinstance(m, BottleneckTB):
            continue
        prefix = f"{name}." if name else ""
        inner = [r for r in rows if r.layer.startswith(prefix)] if name else rows
        built = sum(r.formula_params or 0 for r in inner)
        c = m.cfg.c_in
        formula = table1_formula("bottleneck_tb", c, m.cfg.p).params if (c * c * m.cfg.p) % 16 == 0 else None
        blocks.append(LayerRow(name or "bottleneck_tb", "bottleneck_tb", built, sum(r.flops for r in inner),
                               m.rfs(), formula, None if formula is None else built - formula))
    Q = 0
    if input_shape is not None and len(input_shape) == 5:
        Q = int(input_shape[1] * input_shape[3] * input_shape[4])
    return ComplexityReport(rows, blocks, Q, tuple(input_shape) if input_shape is not None else None)


def stack_rfs(kinds) -> int:
    return temporal_rfs(kinds)


def _fmt_int(v) -> str:
    return "-" if v is None else f"{v:,}"


def render_text(report: ComplexityReport, formula_rows: list[FormulaRow] | None = None) -> str:
    lines = [f"# {FLOP_CONVENTION}"]
    if report.input_shape:
        lines.append(f"# input {report.input_shape}, Q = T*H*W = {report.Q}")
    header = ("layer", "kind", "params", "flops", "rfs", "formula", "discrepancy")
    table = [header] + [(r.layer, r.kind, _fmt_int(r.params), _fmt_int(r.flops), str(r.rfs),
                         _fmt_int(r.formula_params), _fmt_int(r.discrepancy)) for r in report.rows]
    table.append(("TOTAL", "", _fmt_int(report.total_params), _fmt_int(report.total_flops), "", "", ""))
    lines += _align(table)
    if report.blocks:
        lines.append("")
        lines.append("# bottleneck TB blocks: as-built weights vs closed form (6 + p/16)C^2")
        table = [header] + [(r.layer, r.kind, _fmt_int(r.params), _fmt_int(r.flops), str(r.rfs),
                             _fmt_int(r.formula_params), _fmt_int(r.discrepancy)) for r in report.blocks]
        lines += _align(table)
    if formula_rows:
        lines.append("")
        lines += render_table1(formula_rows).splitlines()
    return "\n".join(lines)


def render_table1(rows: list[FormulaRow]) -> str:
    table = [("method", "formula", "params", "computation", "rfs")]
    table += [(r.method, r.label, str(r.params), str(r.flops), str(r.rfs)) for r in rows]
    return "\n".join(_align(table))


def _align(table) -> list[str]:
    widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
    return ["  ".join(cell.ljust(w) if i < 2 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths)))
            .rstrip() for row in table]


def audit_report(model: Module, input_shape=None, path=None, C: int | None = None,
                 p: int = 20) -> tuple[str, dict]:
    """Aligned text plus a JSON-serializable dict; writes the JSON to ``path`` when given."""
    report = count_params(model, input_shape)
    formula_rows = table1_rows(C, p, max(report.Q, 1)) if C else None
    data = report.to_dict()
    if formula_rows:
        data["table1"] = [{"method": r.method, "formula": r.label, "params": r.params,
                           "computation": r.flops, "rfs": r.rfs} for r in formula_rows]
    if path is not None:
        with open(path, "w") as f:
            json.dump(data, f, indent=2)
    return render_text(report, formula_rows), data
