"""MC-Net graph assembly and execution.

The network is held as a flat list of :class:`Node` objects wired by tensor
name.  The same list drives numeric execution (:meth:`ModelGraph.forward`)
and symbolic shape propagation (:meth:`ModelGraph.infer_shapes`), so the
audit always describes exactly the graph that runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from mcnet.engine import ops
from mcnet.engine.tensor import LayerParams, Tensor, no_grad
from mcnet.errors import ShapeError, WiringError
from mcnet.model.config import CROSS_MAPPINGS, KERNEL_SIZES, ModelConfig

INPUT = "input"


class CrossFusion(NamedTuple):
    encoder_stage: int
    encoder_kernel: int
    decoder_stage: int
    decoder_kernel: int

    def __str__(self):
        return (f"(encoder {self.encoder_stage} k{self.encoder_kernel} -> "
                f"decoder {self.decoder_stage} k{self.decoder_kernel})")


@dataclass
class Node:
    name: str
    kind: str
    inputs: tuple
    params: Optional[LayerParams] = None
    bn: Optional[ops.BatchNormState] = None
    attrs: dict = field(default_factory=dict)

    @property
    def output(self) -> str:
        return self.name

    @property
    def n_params(self) -> int:
        n = self.params.n_params if self.params is not None else 0
        if self.bn is not None and self.bn.affine is not None:
            n += self.bn.affine.n_params
        return n


class _Builder:
    """Appends nodes while tracking (channels, side) of every named tensor."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.dtype = cfg.np_dtype
        self.nodes: list[Node] = []
        self.meta: dict[str, tuple[int, int]] = {INPUT: (cfg.in_channels, cfg.input_size)}
        self.cross_table: list[CrossFusion] = []

    def _add(self, node: Node, channels: int, side: int) -> str:
        if node.name in self.meta:
            raise ValueError(f"duplicate node name {node.name}")
        self.nodes.append(node)
        self.meta[node.name] = (channels, side)
        return node.name

    def conv(self, name, src, out_ch, k) -> str:
        in_ch, side = self.meta[src]
        params = LayerParams.he_normal(out_ch, in_ch, k, k, self.rng, self.dtype)
        return self._add(Node(name, "conv", (src,), params=params, attrs={"kernel": k}),
                         out_ch, side)

    def relu(self, name, src) -> str:
        return self._add(Node(name, "relu", (src,)), *self.meta[src])

    def bn(self, name, src) -> str:
        ch, side = self.meta[src]
        affine = None
        if self.cfg.affine_bn:
            affine = LayerParams(Tensor(np.ones(ch, dtype=self.dtype)),
                                 Tensor(np.zeros(ch, dtype=self.dtype)))
        state = ops.BatchNormState(ch, self.dtype, self.cfg.bn_momentum, self.cfg.bn_eps, affine)
        return self._add(Node(name, "bn", (src,), bn=state), ch, side)

    def act_norm(self, prefix, src, order=None) -> str:
        order = order or self.cfg.bn_relu_order
        if order == "relu_then_bn":
            return self.bn(f"{prefix}.bn", self.relu(f"{prefix}.relu", src))
        return self.relu(f"{prefix}.relu", self.bn(f"{prefix}.bn", src))

    def conv_block(self, prefix, src, out_ch, k) -> str:
        """conv -> ReLU/BN in the configured order."""
        return self.act_norm(prefix, self.conv(f"{prefix}.conv", src, out_ch, k))

    def concat(self, name, srcs) -> str:
        sides = {self.meta[s][1] for s in srcs}
        if len(sides) != 1:
            raise ShapeError(f"{name}: cannot concatenate tensors at sides {sorted(sides)}")
        ch = sum(self.meta[s][0] for s in srcs)
        return self._add(Node(name, "concat", tuple(srcs)), ch, sides.pop())

    def pool(self, name, src, size) -> str:
        ch, side = self.meta[src]
        if side % size:
            raise ShapeError(f"{name}: side {side} not divisible by pool size {size}")
        return self._add(Node(name, "pool", (src,), attrs={"pool_size": size}), ch, side // size)

    def upsample(self, name, src, factor) -> str:
        ch, side = self.meta[src]
        return self._add(Node(name, "upsample", (src,), attrs={"factor": factor}), ch, side * factor)

    def add(self, name, a, b, fusion: CrossFusion) -> str:
        if self.meta[a] != self.meta[b]:
            raise WiringError(
                f"{name}: cross-fusion {fusion} pairs (C, side) {self.meta[a]} with {self.meta[b]}"
            )
        self.cross_table.append(fusion)
        return self._add(Node(name, "add", (a, b), attrs={"fusion": fusion}), *self.meta[a])

    def head(self, name, src, n_classes) -> str:
        ch, side = self.meta[src]
        kind = "sigmoid" if n_classes == 1 else "softmax"
        return self._add(Node(name, kind, (src,)), ch, side)


@dataclass
class EncoderOutputs:
    concat: str
    pooled: str
    branches: dict  # kernel size -> tensor name (post activation/normalisation)


def build_encoder_submodule(b: _Builder, stage: int, src: str) -> EncoderOutputs:
    cfg = b.cfg
    expected = cfg.input_size // 2 ** (stage - 1)
    if b.meta[src][1] != expected:
        raise ShapeError(f"encoder {stage}: input side {b.meta[src][1]} != {expected}")
    width = cfg.encoder_widths[stage - 1]
    if width % 3:
        raise ShapeError(f"encoder {stage}: width {width} not divisible by 3")
    branches = {k: b.conv_block(f"enc{stage}.k{k}", src, width // 3, k) for k in KERNEL_SIZES}
    cat = b.concat(f"enc{stage}.concat", [branches[k] for k in KERNEL_SIZES])
    pooled = b.pool(f"enc{stage}.pool", cat, 2)
    return EncoderOutputs(cat, pooled, branches)


def build_integration_module(b: _Builder, pooled_outs, original: str = INPUT) -> str:
    cfg = b.cfg
    bottleneck = cfg.bottleneck
    pool_sizes = cfg.integration_pool_sizes()
    sources = list(pooled_outs) + [original]
    names = [f"integ{i + 1}" for i in range(cfg.depth)] + ["integ_raw"]
    outs = []
    for src, size, width, name in zip(sources, pool_sizes, cfg.integration_widths, names):
        y = b.conv(f"{name}.conv", src, width, 1)
        if cfg.integration_activation == "relu":
            y = b.relu(f"{name}.relu", y)
        elif cfg.integration_activation == "relu_then_bn":
            y = b.act_norm(name, y, order="relu_then_bn")
        y = b.pool(f"{name}.pool", y, size)
        if b.meta[y][1] != bottleneck:
            raise ShapeError(
                f"{name}: lands at side {b.meta[y][1]}, bottleneck is {bottleneck}"
            )
        outs.append(y)
    return b.concat("integ.concat", outs)


def build_decoder_submodule(b: _Builder, stage: int, src: str, encoder_branches: dict,
                            encoder_stage: int) -> str:
    cfg = b.cfg
    width = cfg.decoder_widths[stage - 1]
    bw = width // 3
    up = b.upsample(f"dec{stage}.up", src, 2)
    branches = {k: b.conv_block(f"dec{stage}.k{k}", up, bw, k) for k in KERNEL_SIZES}
    if cfg.use_cross_deconv:
        mapping = CROSS_MAPPINGS[cfg.cross_mapping]
        fused = {}
        for ke in KERNEL_SIZES:
            kd = mapping[ke]
            fusion = CrossFusion(encoder_stage, ke, stage, kd)
            s = b.add(f"dec{stage}.add_e{ke}_d{kd}", encoder_branches[ke], branches[kd], fusion)
            fused[kd] = b.conv_block(f"dec{stage}.fuse{kd}", s, bw, 1)
        branches = fused
    cat = b.concat(f"dec{stage}.concat", [branches[k] for k in KERNEL_SIZES])
    y = b.conv_block(f"dec{stage}.mix", cat, width, 1)
    return b.conv_block(f"dec{stage}.refine", y, width, 3)


class ModelGraph:
    """An assembled MC-Net: ordered nodes, cross-fusion table, parameters."""

    def __init__(self, cfg: ModelConfig, nodes, cross_table, output, encoder_outputs,
                 integration_output, decoder_outputs):
        self.config = cfg
        self.nodes: list[Node] = nodes
        self.cross_table: list[CrossFusion] = cross_table
        self.output = output
        self.encoder_outputs: list[EncoderOutputs] = encoder_outputs
        self.integration_output: Optional[str] = integration_output
        self.decoder_outputs: list[str] = decoder_outputs
        self._by_name = {n.name: n for n in nodes}
        last_use = {}
        for i, n in enumerate(nodes):
            for src in n.inputs:
                last_use[src] = i
        self._last_use = last_use

    def node(self, name) -> Node:
        return self._by_name[name]

    def count(self, kind) -> int:
        return sum(1 for n in self.nodes if n.kind == kind)

    def named_parameters(self):
        """(name, LayerParams) for every learnable layer in execution order."""
        out = []
        for n in self.nodes:
            if n.params is not None:
                out.append((n.name, n.params))
            if n.bn is not None and n.bn.affine is not None:
                out.append((f"{n.name}.affine", n.bn.affine))
        return out

    def parameters(self) -> list[LayerParams]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(n.n_params for n in self.nodes)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # execution ------------------------------------------------------------

    def check_input(self, shape):
        cfg = self.config
        if len(shape) != 4 or tuple(shape[1:]) != (cfg.in_channels, cfg.input_size, cfg.input_size):
            raise ShapeError(
                f"model expects input (N, {cfg.in_channels}, {cfg.input_size}, "
                f"{cfg.input_size}), got {tuple(shape)}"
            )
        if shape[0] < 1:
            raise ShapeError("empty batch")

    def forward(self, batch, mode="train") -> Tensor:
        """Per-pixel class probabilities, shape ``(N, n_classes, S, S)``.

        ``mode="train"`` uses batch statistics, updates running statistics and
        records onto the active tape (if any).  ``mode="eval"`` uses running
        statistics and records nothing.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        data = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        self.check_input(data.shape)
        x = Tensor(data.astype(self.config.np_dtype, copy=False))
        if mode == "eval":
            with no_grad():
                return self._run(x, training=False)
        return self._run(x, training=True)

    def _run(self, x, training):
        env = {INPUT: x}
        for i, node in enumerate(self.nodes):
            args = [env[s] for s in node.inputs]
            env[node.name] = _execute(node, args, training)
            if not training:
                for s in node.inputs:
                    if self._last_use.get(s) == i:
                        del env[s]
        return env[self.output]

    def infer_shapes(self, batch_shape) -> dict:
        """Symbolic (N, C, H, W) of every tensor, validated node by node."""
        self.check_input(batch_shape)
        shapes = {INPUT: tuple(batch_shape)}
        for node in self.nodes:
            shapes[node.name] = _infer(node, [shapes[s] for s in node.inputs])
        return shapes

    # persistence helpers ----------------------------------------------------

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every array a checkpoint must hold, in a fixed order."""
        out = []
        for n in self.nodes:
            if n.params is not None:
                out.append((f"{n.name}.weight", n.params.weight.data))
                out.append((f"{n.name}.bias", n.params.bias.data))
            if n.bn is not None:
                out.append((f"{n.name}.running_mean", n.bn.running_mean))
                out.append((f"{n.name}.running_var", n.bn.running_var))
                if n.bn.affine is not None:
                    out.append((f"{n.name}.affine.weight", n.bn.affine.weight.data))
                    out.append((f"{n.name}.affine.bias", n.bn.affine.bias.data))
        return out


def _execute(node: Node, args, training) -> Tensor:
    k = node.kind
    if k == "conv":
        return ops.conv2d(args[0], node.params)
    if k == "relu":
        return ops.relu(args[0])
    if k == "bn":
        return ops.batch_norm(args[0], state=node.bn, training=training)
    if k == "concat":
        return ops.concat_channels(args)
    if k == "pool":
        return ops.max_pool2d(args[0], node.attrs["pool_size"])
    if k == "upsample":
        return ops.upsample_bilinear(args[0], node.attrs["factor"])
    if k == "add":
        a, b = args
        if a.shape != b.shape:
            raise WiringError(
                f"{node.name}: cross-fusion {node.attrs['fusion']} got shapes {a.shape} and {b.shape}"
            )
        return ops.add(a, b)
    if k == "sigmoid":
        return ops.sigmoid(args[0])
    if k == "softmax":
        return ops.softmax_channels(args[0])
    raise ValueError(f"unknown node kind {k}")


def _infer(node: Node, shapes) -> tuple:
    k = node.kind
    s = shapes[0]
    if k == "conv":
        w = node.params.weight.shape
        if s[1] != w[1]:
            raise ShapeError(f"{node.name}: input {s} vs weight {w}")
        return (s[0], w[0], s[2], s[3])
    if k in ("relu", "bn", "sigmoid", "softmax"):
        return s
    if k == "concat":
        if len({(t[0], t[2], t[3]) for t in shapes}) != 1:
            raise ShapeError(f"{node.name}: spatial mismatch {shapes}")
        return (s[0], sum(t[1] for t in shapes), s[2], s[3])
    if k == "pool":
        p = node.attrs["pool_size"]
        if s[2] % p or s[3] % p:
            raise ShapeError(f"{node.name}: {s} not divisible by {p}")
        return (s[0], s[1], s[2] // p, s[3] // p)
    if k == "upsample":
        f = node.attrs["factor"]
        return (s[0], s[1], s[2] * f, s[3] * f)
    if k == "add":
        if shapes[0] != shapes[1]:
            raise WiringError(f"{node.name}: cross-fusion {node.attrs['fusion']} got {shapes}")
        return s
    raise ValueError(f"unknown node kind {k}")


def assemble_model(cfg: ModelConfig) -> ModelGraph:
    """Build the full network for ``cfg`` with deterministic He initialisation."""
    cfg.validate()
    b = _Builder(cfg)
    enc_outs = []
    x = INPUT
    for stage in range(1, cfg.depth + 1):
        e = build_encoder_submodule(b, stage, x)
        enc_outs.append(e)
        x = e.pooled

    integ = None
    if cfg.use_integration_module:
        integ = build_integration_module(b, [e.pooled for e in enc_outs], INPUT)
        x = integ

    dec_outs = []
    for stage in range(1, cfg.depth + 1):
        enc_stage = cfg.depth + 1 - stage
        x = build_decoder_submodule(b, stage, x, enc_outs[enc_stage - 1].branches, enc_stage)
        dec_outs.append(x)

    logits = b.conv("classifier.conv", x, cfg.n_classes, 1)
    out = b.head("classifier.prob", logits, cfg.n_classes)
    return ModelGraph(cfg, b.nodes, b.cross_table, out, enc_outs, integ, dec_outs)


def parameter_count(model: ModelGraph) -> int:
    return model.parameter_count()
