"""Compile genomes into typed operation graphs with inferred shapes and costs.

Graph nodes are fine-grained (relu, conv, bn, pool, ...) so that the same
node list drives shape inference, cost accounting and execution. Parameter
descriptors only name storage slots; the trainer owns the arrays.

Conventions:
  * learnable convolutions are wrapped ReLU -> conv -> BN;
  * a separable op is two stacked ReLU -> (depthwise, pointwise) -> BN units,
    the first one carrying the stride;
  * in a Reduction cell every op reading a cell input has stride 2;
  * every branch emits ``out_filters`` channels (1x1 projections are added
    after identity/pooling when needed), so ``add`` always sees equal shapes;
  * block outputs no later block reads are depth-concatenated as the output.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable

from .genome import ArchitectureGenome, CellGenome, Combiner, Operation

NORMAL = "normal"
REDUCTION = "reduction"


class CompileError(ValueError):
    pass


@dataclass(frozen=True)
class TensorShape:
    height: int
    width: int
    channels: int

    def __post_init__(self) -> None:
        if min(self.height, self.width, self.channels) < 1:
            raise CompileError(f"all dimensions must be >= 1, got {self}")

    @property
    def spatial(self) -> tuple[int, int]:
        return self.height, self.width

    def strided(self, stride: int, channels: int | None = None) -> "TensorShape":
        return TensorShape(
            -(-self.height // stride), -(-self.width // stride), self.channels if channels is None else channels
        )

    def __str__(self) -> str:
        return f"{self.height}x{self.width}x{self.channels}"


@dataclass(frozen=True)
class ParamDesc:
    name: str
    shape: tuple[int, ...]
    role: str  # conv | depthwise | pointwise | bn_gamma | bn_beta | linear_w | linear_b

    @property
    def size(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n


@dataclass(frozen=True)
class Node:
    id: int
    kind: str
    inputs: tuple[int, ...]
    shape: TensorShape
    attrs: dict[str, Any] = field(default_factory=dict, compare=False)
    params: tuple[ParamDesc, ...] = ()
    block: int | None = None
    branch: str | None = None


@dataclass
class CellGraph:
    """A DAG of primitive nodes in topological order.

    Used for cells as well as the network stem and classifier head.
    ``joins`` maps each block's combine node to the droppath edges feeding it.
    """

    kind: str
    nodes: list[Node]
    inputs: tuple[int, ...]
    output: int
    droppath_edges: list[int] = field(default_factory=list)
    joins: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)
    out_filters: int = 0
    unused_blocks: tuple[int, ...] = ()

    @property
    def output_shape(self) -> TensorShape:
        return self.node(self.output).shape

    def node(self, node_id: int) -> Node:
        node = self.nodes[node_id]
        if node.id != node_id:
            node = next(n for n in self.nodes if n.id == node_id)
        return node

    def param_descs(self) -> list[ParamDesc]:
        return [p for n in self.nodes for p in n.params]


class _Builder:
    def __init__(self, kind: str) -> None:
        self.kind = kind
        self.nodes: list[Node] = []

    def add(self, kind, inputs, shape, params=(), block=None, branch=None, **attrs) -> int:
        node = Node(len(self.nodes), kind, tuple(inputs), shape, attrs, tuple(params), block, branch)
        self.nodes.append(node)
        return node.id

    def shape(self, node_id: int) -> TensorShape:
        return self.nodes[node_id].shape

    def conv_unit(self, x, name, cout, kernel=(1, 1), stride=1, dilation=1, block=None, branch=None) -> int:
        """ReLU -> conv -> BN."""
        s = self.shape(x)
        r = self.add("relu", [x], s, block=block, branch=branch)
        kh, kw = kernel
        c = self.add(
            "conv",
            [r],
            s.strided(stride, cout),
            [ParamDesc(f"{name}/conv", (kh, kw, s.channels, cout), "conv")],
            block,
            branch,
            kernel=kernel,
            stride=stride,
            dilation=dilation,
            groups=1,
        )
        return self.bn(c, name, block, branch)

    def bn(self, x, name, block=None, branch=None) -> int:
        s = self.shape(x)
        return self.add(
            "bn",
            [x],
            s,
            [ParamDesc(f"{name}/bn/gamma", (s.channels,), "bn_gamma"), ParamDesc(f"{name}/bn/beta", (s.channels,), "bn_beta")],
            block,
            branch,
        )

    def sep_unit(self, x, name, cout, k, stride, block, branch) -> int:
        s = self.shape(x)
        r = self.add("relu", [x], s, block=block, branch=branch)
        c = self.add(
            "sep_conv",
            [r],
            s.strided(stride, cout),
            [
                ParamDesc(f"{name}/depthwise", (k, k, 1, s.channels), "depthwise"),
                ParamDesc(f"{name}/pointwise", (1, 1, s.channels, cout), "pointwise"),
            ],
            block,
            branch,
            kernel=(k, k),
            stride=stride,
            dilation=1,
        )
        return self.bn(c, name, block, branch)

    def factored_unit(self, x, name, cout, n, stride, block, branch) -> int:
        s = self.shape(x)
        r = self.add("relu", [x], s, block=block, branch=branch)
        c = self.add(
            "factored_conv",
            [r],
            s.strided(stride, cout),
            [
                ParamDesc(f"{name}/row", (1, n, s.channels, cout), "conv"),
                ParamDesc(f"{name}/col", (n, 1, cout, cout), "conv"),
            ],
            block,
            branch,
            n=n,
            stride=stride,
        )
        return self.bn(c, name, block, branch)

    def operation(self, x, op: Operation, stride: int, cout: int, name: str, block: int, branch: str) -> int:
        """Instantiate one searched operation; returns the branch output node."""
        s = self.shape(x)
        if op is Operation.IDENTITY:
            if stride == 1 and s.channels == cout:
                return self.add("identity", [x], s, block=block, branch=branch)
            return self.conv_unit(x, f"{name}/proj", cout, (1, 1), stride, block=block, branch=branch)
        if op.is_separable:
            k = int(op.value[-1])
            y = self.sep_unit(x, f"{name}/sep1", cout, k, stride, block, branch)
            return self.sep_unit(y, f"{name}/sep2", cout, k, 1, block, branch)
        if op in (Operation.CONV_1X3_3X1, Operation.CONV_1X7_7X1):
            n = 3 if op is Operation.CONV_1X3_3X1 else 7
            return self.factored_unit(x, f"{name}/factored", cout, n, stride, block, branch)
        if op is Operation.DILATED_CONV_3X3:
            return self.conv_unit(x, f"{name}/dilated", cout, (3, 3), stride, 2, block, branch)
        if op is Operation.CONV_1X1:
            return self.conv_unit(x, f"{name}/conv", cout, (1, 1), stride, block=block, branch=branch)
        if op is Operation.CONV_3X3:
            return self.conv_unit(x, f"{name}/conv", cout, (3, 3), stride, block=block, branch=branch)
        # pooling keeps channels; project afterwards when they differ
        size = int(op.value.split("_")[-1][0])
        kind = "avg_pool" if op is Operation.AVG_POOL_3X3 else "max_pool"
        y = self.add(kind, [x], s.strided(stride), block=block, branch=branch, size=size, stride=stride)
        if s.channels != cout:
            y = self.conv_unit(y, f"{name}/proj", cout, (1, 1), 1, block=block, branch=branch)
        return y


def compile_cell(
    cell: CellGenome,
    kind: str,
    in_shape_prev: TensorShape,
    in_shape_prevprev: TensorShape,
    out_filters: int,
) -> CellGraph:
    """Build the node graph of one cell.

    ``in_shape_prev`` is h_i (index 1) and ``in_shape_prevprev`` is h_{i-1}
    (index 0). When h_{i-1} is spatially twice the size of h_i it is brought
    down with a stride-2 ReLU -> 1x1 conv -> BN before any block reads it.
    """
    if kind not in (NORMAL, REDUCTION):
        raise CompileError(f"unknown cell kind {kind!r}")
    if out_filters < 1:
        raise CompileError(f"out_filters must be >= 1, got {out_filters}")
    b = _Builder(kind)
    prevprev = b.add("input", [], in_shape_prevprev, name="h_prevprev")
    prev = b.add("input", [], in_shape_prev, name="h_prev")
    states = [prevprev, prev]
    consumed = cell.consumed_states()

    if 0 in consumed and in_shape_prevprev.spatial != in_shape_prev.spatial:
        first_reader = min(k for k, blk in enumerate(cell.blocks) if 0 in (blk.input_a, blk.input_b))
        if in_shape_prevprev.strided(2).spatial != in_shape_prev.spatial:
            raise CompileError(
                f"block {first_reader}: cannot reconcile h_prevprev {in_shape_prevprev} with h_prev {in_shape_prev}"
            )
        states[0] = b.conv_unit(prevprev, "reconcile_prevprev", out_filters, (1, 1), 2)

    droppath: list[int] = []
    joins: list[tuple[int, tuple[int, ...]]] = []
    outputs: list[int] = []
    for k, blk in enumerate(cell.blocks):
        branch_out = []
        for branch, src, op in (("a", blk.input_a, blk.op_a), ("b", blk.input_b, blk.op_b)):
            stride = 2 if kind == REDUCTION and src < 2 else 1
            y = b.operation(states[src], op, stride, out_filters, f"block{k}/{branch}", k, branch)
            branch_out.append(y)
            droppath.append(y)
        sa, sb = b.shape(branch_out[0]), b.shape(branch_out[1])
        if sa.spatial != sb.spatial:
            raise CompileError(f"block {k}: branch shapes {sa} and {sb} cannot be combined")
        if blk.combiner is Combiner.ADD:
            if sa != sb:
                raise CompileError(f"block {k}: add combiner received {sa} and {sb}")
            out = b.add("add", branch_out, sa, block=k)
        else:
            out = b.add("concat", branch_out, TensorShape(sa.height, sa.width, sa.channels + sb.channels), block=k)
        joins.append((out, tuple(branch_out)))
        outputs.append(out)
        states.append(out)

    unused = cell.unused_blocks()
    parts = [outputs[k] for k in unused]
    spatial = {b.shape(p).spatial for p in parts}
    if len(spatial) != 1:
        raise CompileError(f"block {unused[-1]}: unused outputs disagree in spatial size {sorted(spatial)}")
    h, w = spatial.pop()
    channels = sum(b.shape(p).channels for p in parts)
    final = b.add("concat", parts, TensorShape(h, w, channels), role="cell_output")
    return CellGraph(kind, b.nodes, (prevprev, prev), final, droppath, joins, out_filters, tuple(unused))


# --- macro architecture ---------------------------------------------------------


@dataclass(frozen=True)
class MacroSpec:
    """Stacking plan. ``penultimate_filters`` is the final-stage per-branch filter count."""

    template: str = "cifar"
    cell_repeats: int = 2
    penultimate_filters: int = 32
    num_classes: int = 10
    stem_filters: int | None = None

    def __post_init__(self) -> None:
        if self.template not in ("cifar", "imagenet"):
            raise CompileError(f"unknown template {self.template!r}")
        if self.cell_repeats < 1:
            raise CompileError(f"cell_repeats must be >= 1, got {self.cell_repeats}")
        if self.num_classes < 2:
            raise CompileError(f"num_classes must be >= 2, got {self.num_classes}")
        div = 4 if self.template == "cifar" else 16
        if self.penultimate_filters < div or self.penultimate_filters % div:
            raise CompileError(
                f"penultimate_filters={self.penultimate_filters} must be a positive multiple of {div} "
                f"for the {self.template} template"
            )

    @property
    def stage_filters(self) -> tuple[int, int, int]:
        f = self.penultimate_filters
        return f // 4, f // 2, f

    @property
    def resolved_stem_filters(self) -> int:
        return self.stem_filters if self.stem_filters is not None else 3 * self.stage_filters[0]


_MACRO_RE = re.compile(r"^\s*(\d+)\s*@\s*(\d+)\s*$")


def parse_macro(text: str, **kwargs) -> MacroSpec:
    """Parse the ``"N @ F"`` shorthand."""
    m = _MACRO_RE.match(text)
    if not m:
        raise CompileError(f"malformed macro string {text!r}; expected '<int> @ <int>'")
    return MacroSpec(cell_repeats=int(m.group(1)), penultimate_filters=int(m.group(2)), **kwargs)


@dataclass
class CellInstance:
    name: str
    kind: str
    graph: CellGraph
    prev: int  # index of the producing cell, -1 for the stem
    prevprev: int
    stage: int


@dataclass
class NetworkGraph:
    input_shape: TensorShape
    stem: CellGraph
    cells: list[CellInstance]
    head: CellGraph
    total_params: int = 0
    total_mult_adds: int = 0

    def graphs(self) -> Iterable[tuple[str, CellGraph]]:
        yield "stem", self.stem
        for inst in self.cells:
            yield inst.name, inst.graph
        yield "head", self.head

    def param_descs(self) -> list[tuple[str, ParamDesc]]:
        """(fully qualified slot name, descriptor) pairs."""
        return [(f"{name}/{p.name}", p) for name, g in self.graphs() for p in g.param_descs()]

    @property
    def penultimate_width(self) -> int:
        return self.cells[-1].graph.output_shape.channels

    def count(self, kind: str) -> int:
        return sum(1 for c in self.cells if c.kind == kind)


def _stem(image: TensorShape, macro: MacroSpec) -> CellGraph:
    b = _Builder("stem")
    x = b.add("input", [], image, name="image")
    stride = 2 if macro.template == "imagenet" else 1
    cout = macro.resolved_stem_filters
    c = b.add(
        "conv",
        [x],
        image.strided(stride, cout),
        [ParamDesc("conv", (3, 3, image.channels, cout), "conv")],
        kernel=(3, 3),
        stride=stride,
        dilation=1,
        groups=1,
    )
    out = b.bn(c, "stem")
    return CellGraph("stem", b.nodes, (x,), out)


def _head(features: TensorShape, num_classes: int) -> CellGraph:
    b = _Builder("head")
    x = b.add("input", [], features, name="features")
    r = b.add("relu", [x], features)
    pooled = TensorShape(1, 1, features.channels)
    g = b.add("global_avg_pool", [r], pooled)
    logits = b.add(
        "linear",
        [g],
        TensorShape(1, 1, num_classes),
        [
            ParamDesc("linear/w", (features.channels, num_classes), "linear_w"),
            ParamDesc("linear/b", (num_classes,), "linear_b"),
        ],
    )
    out = b.add("softmax", [logits], TensorShape(1, 1, num_classes))
    return CellGraph("head", b.nodes, (x,), out)


def cell_plan(macro: MacroSpec) -> list[tuple[str, int, int]]:
    """(kind, out_filters, stage) for every cell, bottom to top."""
    f0, f1, f2 = macro.stage_filters
    n = macro.cell_repeats
    plan: list[tuple[str, int, int]] = []
    if macro.template == "imagenet":
        plan += [(REDUCTION, max(f0 // 4, 1), -2), (REDUCTION, max(f0 // 2, 1), -1)]
    plan += [(NORMAL, f0, 0)] * n
    plan += [(REDUCTION, f1, 1)] + [(NORMAL, f1, 1)] * n
    plan += [(REDUCTION, f2, 2)] + [(NORMAL, f2, 2)] * n
    return plan


def assemble_network(
    arch: ArchitectureGenome, macro: MacroSpec, image_shape: TensorShape | tuple[int, int, int] = (32, 32, 3)
) -> NetworkGraph:
    """Stack cells per the macro template and infer every shape.

    Cell t reads h_i = output of cell t-1 and h_{i-1} = output of cell t-2,
    with the stem output standing in for both at the bottom.
    """
    if not isinstance(image_shape, TensorShape):
        image_shape = TensorShape(*image_shape)
    stem = _stem(image_shape, macro)
    shapes = {-1: stem.output_shape}
    refs = [-1, -1]
    cells: list[CellInstance] = []
    for t, (kind, filters, stage) in enumerate(cell_plan(macro)):
        prevprev, prev = refs[-2], refs[-1]
        cell = arch.normal if kind == NORMAL else arch.reduction
        graph = compile_cell(cell, kind, shapes[prev], shapes[prevprev], filters)
        cells.append(CellInstance(f"cell{t}", kind, graph, prev, prevprev, stage))
        shapes[t] = graph.output_shape
        refs.append(t)
    head = _head(shapes[len(cells) - 1], macro.num_classes)
    net = NetworkGraph(image_shape, stem, cells, head)
    costs = count_costs(net)
    net.total_params = costs["params"]
    net.total_mult_adds = costs["mult_adds"]
    return net


# --- cost accounting ------------------------------------------------------------------


def node_costs(node: Node, in_shapes: list[TensorShape]) -> tuple[int, int]:
    """(params, mult_adds) of a single node."""
    params = sum(p.size for p in node.params)
    out = node.shape
    hw = out.height * out.width
    if node.kind == "conv":
        kh, kw = node.attrs["kernel"]
        cin = in_shapes[0].channels
        return params, hw * out.channels * (kh * kw * cin // node.attrs["groups"])
    if node.kind == "sep_conv":
        kh, kw = node.attrs["kernel"]
        cin = in_shapes[0].channels
        return params, hw * cin * kh * kw + hw * out.channels * cin
    if node.kind == "factored_conv":
        n = node.attrs["n"]
        cin = in_shapes[0].channels
        return params, hw * out.channels * n * cin + hw * out.channels * n * out.channels
    if node.kind == "linear":
        return params, in_shapes[0].channels * out.channels
    return params, 0


def graph_costs(graph: CellGraph) -> tuple[int, int]:
    shapes = {n.id: n.shape for n in graph.nodes}
    params = madds = 0
    for node in graph.nodes:
        p, m = node_costs(node, [shapes[i] for i in node.inputs])
        params += p
        madds += m
    return params, madds


def count_costs(net: NetworkGraph) -> dict[str, int]:
    """Total weights (conv kernels, BN scale/shift, linear) and multiply-accumulates per image."""
    params = madds = 0
    for _, graph in net.graphs():
        p, m = graph_costs(graph)
        params += p
        madds += m
    return {"params": params, "mult_adds": madds}


# --- reporting ----------------------------------------------------------------------


def compile_report(net: NetworkGraph) -> dict[str, Any]:
    """Structured summary: per-node shapes and costs in topological order, stages and totals."""
    rows = []
    for gname, graph in net.graphs():
        shapes = {n.id: n.shape for n in graph.nodes}
        for node in graph.nodes:
            p, m = node_costs(node, [shapes[i] for i in node.inputs])
            rows.append(
                {
                    "graph": gname,
                    "id": node.id,
                    "kind": node.kind,
                    "block": node.block,
                    "branch": node.branch,
                    "inputs": list(node.inputs),
                    "shape": [node.shape.height, node.shape.width, node.shape.channels],
                    "params": p,
                    "mult_adds": m,
                }
            )
    stages: dict[int, dict[str, Any]] = {}
    for inst in net.cells:
        s = inst.graph.output_shape
        entry = stages.setdefault(inst.stage, {"stage": inst.stage, "height": s.height, "width": s.width, "cells": []})
        entry["cells"].append({"name": inst.name, "kind": inst.kind, "out_filters": inst.graph.out_filters, "output": str(s)})
    return {
        "input": str(net.input_shape),
        "stem_output": str(net.stem.output_shape),
        "stages": [stages[k] for k in sorted(stages)],
        "num_normal_cells": net.count(NORMAL),
        "num_reduction_cells": net.count(REDUCTION),
        "penultimate_width": net.penultimate_width,
        "total_params": net.total_params,
        "total_mult_adds": net.total_mult_adds,
        "nodes": rows,
    }


def format_report(report: dict[str, Any]) -> str:
    lines = [f"input {report['input']}  stem -> {report['stem_output']}"]
    for stage in report["stages"]:
        kinds = ", ".join(f"{c['name']}:{c['kind']}->{c['output']}" for c in stage["cells"])
        lines.append(f"stage {stage['stage']}: {stage['height']}x{stage['width']}  [{kinds}]")
    lines.append(
        f"cells: {report['num_normal_cells']} normal, {report['num_reduction_cells']} reduction; "
        f"penultimate width {report['penultimate_width']}"
    )
    lines.append(f"params {report['total_params']:,}  mult-adds {report['total_mult_adds']:,}")
    return "\n".join(lines)


def report_json(report: dict[str, Any]) -> str:
    return json.dumps(report, indent=1)
