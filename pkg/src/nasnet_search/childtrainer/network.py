"""Execute a compiled :class:`NetworkGraph` with the tensor engine."""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..cellgraph import CellGraph, NetworkGraph
from .droppath import EVAL, TRAIN, apply_scheduled_droppath


def init_param(role: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """He-style fan-in scaled Gaussian for weights, (1, 0) for BN scale/shift, zero biases."""
    if role == "bn_gamma":
        return np.ones(shape)
    if role in ("bn_beta", "linear_b"):
        return np.zeros(shape)
    if role in ("conv", "pointwise"):
        fan_in = shape[0] * shape[1] * shape[2]
    elif role == "depthwise":
        fan_in = shape[0] * shape[1]
    elif role == "linear_w":
        return rng.standard_normal(shape) * np.sqrt(1.0 / shape[0])
    else:
        raise ValueError(f"unknown parameter role {role!r}")
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class ChildNetwork:
    """Weights, BN running statistics and the forward pass of one child model."""

    def __init__(self, net: NetworkGraph, rng: np.random.Generator):
        self.net = net
        self.params: dict[str, T.Tensor] = {}
        self.roles: dict[str, str] = {}
        for name, desc in net.param_descs():
            data = init_param(desc.role, desc.shape, rng).astype(T.get_dtype())
            self.params[name] = T.parameter(data, name=name)
            self.roles[name] = desc.role
        self.bn_stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for name, desc in net.param_descs():
            if desc.role == "bn_gamma":
                c = desc.shape[0]
                key = name[: -len("/gamma")]
                self.bn_stats[key] = (np.zeros(c, dtype=T.get_dtype()), np.ones(c, dtype=T.get_dtype()))

    def decayed(self) -> list[str]:
        """Names of the weights that receive L2 decay (conv and linear kernels)."""
        return [n for n, r in self.roles.items() if r in ("conv", "depthwise", "pointwise", "linear_w")]

    def _run(self, prefix: str, graph: CellGraph, feeds: dict[int, T.Tensor], training: bool,
             drop_prob: float, rng: np.random.Generator | None) -> T.Tensor:
        values: dict[int, T.Tensor] = dict(feeds)
        joins = dict(graph.joins)
        p = self.params
        for node in graph.nodes:
            if node.kind == "input":
                continue
            xs = [values[i] for i in node.inputs]
            if node.id in joins and drop_prob > 0.0:
                (xs,) = apply_scheduled_droppath([xs], drop_prob, rng, TRAIN if training else EVAL)
            kind = node.kind
            names = [f"{prefix}/{d.name}" for d in node.params]
            if kind == "relu":
                y = T.relu(xs[0])
            elif kind == "conv":
                a = node.attrs
                y = T.conv2d(xs[0], p[names[0]], a["stride"], a["dilation"], a["groups"])
            elif kind == "sep_conv":
                y = T.depthwise_separable_conv(xs[0], p[names[0]], p[names[1]], node.attrs["stride"],
                                               node.attrs["dilation"])
            elif kind == "factored_conv":
                y = T.factored_conv_1xN_Nx1(xs[0], p[names[0]], p[names[1]], node.attrs["stride"])
            elif kind == "bn":
                mean, var = self.bn_stats[names[0][: -len("/gamma")]]
                y = T.batch_norm(xs[0], p[names[0]], p[names[1]], mean, var, training)
            elif kind == "avg_pool":
                y = T.avg_pool(xs[0], node.attrs["size"], node.attrs["stride"])
            elif kind == "max_pool":
                y = T.max_pool(xs[0], node.attrs["size"], node.attrs["stride"])
            elif kind == "identity":
                y = xs[0]
            elif kind == "add":
                y = T.add(*xs)
            elif kind == "concat":
                y = T.concat_channels(xs)
            elif kind == "global_avg_pool":
                y = T.global_avg_pool(xs[0])
            elif kind == "linear":
                y = T.linear(xs[0], p[names[0]], p[names[1]])
            elif kind == "softmax":
                # the loss works on logits; probabilities are taken by the caller
                y = xs[0]
            else:
                raise ValueError(f"{prefix}: cannot execute node kind {kind!r}")
            values[node.id] = y
        return values[graph.output]

    def forward(self, x, training: bool = False, drop_prob: float = 0.0,
                rng: np.random.Generator | None = None) -> T.Tensor:
        """Logits for a batch of NHWC images."""
        x = T.as_tensor(x)
        net = self.net
        outs = {-1: self._run("stem", net.stem, {net.stem.inputs[0]: x}, training, 0.0, None)}
        for t, inst in enumerate(net.cells):
            g = inst.graph
            feeds = {g.inputs[0]: outs[inst.prevprev], g.inputs[1]: outs[inst.prev]}
            outs[t] = self._run(inst.name, g, feeds, training, drop_prob, rng)
        return self._run("head", net.head, {net.head.inputs[0]: outs[len(net.cells) - 1]}, training, 0.0, None)

    def predict(self, x, drop_prob: float = 0.0, batch_size: int = 250) -> np.ndarray:
        """Class predictions in evaluation mode."""
        preds = []
        with T.no_record():
            for i in range(0, len(x), batch_size):
                logits = self.forward(x[i : i + batch_size], training=False, drop_prob=drop_prob)
                preds.append(logits.data.argmax(axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
