"""Per-layer shape and parameter audit."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from mcnet.model.graph import ModelGraph

# Published learnable-parameter count of the reference MC-Net.
REFERENCE_PARAMS = 6_800_000


@dataclass
class AuditRow:
    name: str
    kind: str
    input_shapes: list
    output_shape: tuple
    n_params: int


@dataclass
class ShapeAuditReport:
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    shapes: dict = field(default_factory=dict)
    encoder_pooled: list = field(default_factory=list)
    encoder_branches: list = field(default_factory=list)
    integration_output: tuple | None = None
    integration_pool_sizes: list = field(default_factory=list)
    decoder_outputs: list = field(default_factory=list)
    cross_adds: list = field(default_factory=list)  # (fusion, shape_a, shape_b)

    @property
    def total_params(self) -> int:
        return sum(r.n_params for r in self.rows)

    @property
    def cross_adds_legal(self) -> bool:
        return all(a == b for _, a, b in self.cross_adds)

    def reference_ratio(self, reference=REFERENCE_PARAMS) -> float:
        return self.total_params / reference

    def width_scale_for(self, reference=REFERENCE_PARAMS) -> float:
        """Approximate uniform width multiplier that would hit ``reference``
        (conv parameter counts grow with the square of the widths)."""
        return math.sqrt(reference / self.total_params)

    def to_text(self) -> str:
        lines = []
        name_w = max([len(r.name) for r in self.rows] + [5])
        header = f"{'layer':<{name_w}}  {'kind':<8}  {'input':<24}  {'output':<20}  {'params':>10}"
        lines.append(header)
        lines.append("-" * len(header))
        for r in self.rows:
            ins = ", ".join(_fmt(s) for s in r.input_shapes)
            if len(ins) > 24:
                ins = ins[:21] + "..."
            lines.append(f"{r.name:<{name_w}}  {r.kind:<8}  {ins:<24}  "
                         f"{_fmt(r.output_shape):<20}  {r.n_params:>10,d}")
        lines.append("-" * len(header))
        lines.append(f"total parameters: {self.total_params:,d}")
        lines.append(f"reference (6.8 M): {REFERENCE_PARAMS:,d}; ratio {self.reference_ratio():.3f}; "
                     f"uniform width scale to match ~{self.width_scale_for():.3f}")
        lines.append("encoder pooled outputs: " + "; ".join(_fmt(s) for s in self.encoder_pooled))
        if self.integration_output is not None:
            lines.append(f"integration output: {_fmt(self.integration_output)} "
                         f"pool sizes {self.integration_pool_sizes}")
        else:
            lines.append("integration output: disabled")
        lines.append("decoder outputs: " + "; ".join(_fmt(s) for s in self.decoder_outputs))
        lines.append(f"cross-fusion adds: {len(self.cross_adds)} "
                     f"({'all shape-legal' if self.cross_adds_legal else 'ILLEGAL'})")
        return "\n".join(lines) + "\n"


def _fmt(shape) -> str:
    return "x".join(str(d) for d in shape)


def shape_audit(model: ModelGraph, input_shape=None) -> ShapeAuditReport:
    cfg = model.config
    if input_shape is None:
        input_shape = (1, cfg.in_channels, cfg.input_size, cfg.input_size)
    shapes = model.infer_shapes(tuple(input_shape))
    report = ShapeAuditReport(config=cfg.to_dict(), shapes=shapes)
    for node in model.nodes:
        report.rows.append(AuditRow(node.name, node.kind, [shapes[s] for s in node.inputs],
                                    shapes[node.name], node.n_params))
    report.encoder_pooled = [shapes[e.pooled] for e in model.encoder_outputs]
    report.encoder_branches = [{k: shapes[v] for k, v in e.branches.items()}
                               for e in model.encoder_outputs]
    if model.integration_output is not None:
        report.integration_output = shapes[model.integration_output]
        report.integration_pool_sizes = [n.attrs["pool_size"] for n in model.nodes
                                         if n.kind == "pool" and n.name.startswith("integ")]
    report.decoder_outputs = [shapes[d] for d in model.decoder_outputs]
    for node in model.nodes:
        if node.kind == "add":
            a, b = node.inputs
            report.cross_adds.append((node.attrs["fusion"], shapes[a], shapes[b]))
    return report
