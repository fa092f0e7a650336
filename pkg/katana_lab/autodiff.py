"""
Dense-tensor computation graph with reverse-mode differentiation.

A ``Graph`` is declared once (placeholders, parameters, then operations)
and evaluated many times. ``forward`` fills a tape with every node's value
and the context its backward rule needs; ``backward`` walks the nodes in
exact reverse declaration order, which is a topological order because
nodes may only reference earlier nodes.

Layout is NHWC. The operator set is fixed: conv2d (stride 1, zero "same"
padding), dense, relu, 2x2 average pool, global average pool,
softmax-cross-entropy, elementwise add and mul.

    g = Graph(dtype=np.float64)
    x = g.placeholder("x", (None, 4, 4, 1))
    y = g.labels("y")
    w = g.parameter("w", kernel)
    h = g.conv2d(x, w, name="conv")
    ...
    loss = g.softmax_cross_entropy(logits, y)
    forward(g, images, targets)
    dx = grad_input(g, images, targets)
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import GradientError, ShapeError

ArrayLike = Union[np.ndarray, Sequence, float]


class Tensor:
    """Row-major real tensor. ``data`` is the flat buffer viewed with ``shape``."""

    __slots__ = ("value", "requires_grad", "grad")

    def __init__(self, value: ArrayLike, requires_grad: bool = False, dtype=None):
        self.value = np.asarray(value, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.value.dtype})"


@dataclass
class Node:
    op: str
    name: str
    inputs: Tuple[int, ...] = ()
    attrs: Dict[str, Any] = field(default_factory=dict)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# --------- operator rules ----------
# Each forward returns (value, ctx); each backward maps (ctx, upstream) to
# one gradient per input (None for inputs without a gradient).

def _conv2d_fwd(node, x, w, b):
    if x.ndim != 4:
        raise ShapeError(node.name, ("B", "H", "W", w.shape[2]), x.shape)
    k, k2, cin, cout = w.shape
    if k != k2 or k % 2 != 1:
        raise ShapeError(node.name, ("k", "k", cin, cout), w.shape)
    if x.shape[3] != cin:
        raise ShapeError(node.name, (x.shape[0], x.shape[1], x.shape[2], cin), x.shape)
    B, H, W, _ = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    # (B, H, W, Cin, k, k) -> (B, H, W, k, k, Cin)
    cols = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    cols = np.ascontiguousarray(cols).reshape(B * H * W, k * k * cin)
    out = cols @ w.reshape(k * k * cin, cout)
    if b is not None:
        out += b
    return out.reshape(B, H, W, cout), (cols, x.shape, w)


def _conv2d_bwd(ctx, g):
    cols, x_shape, w = ctx
    B, H, W, cin = x_shape
    k, _, _, cout = w.shape
    pad = k // 2
    g2 = g.reshape(B * H * W, cout)
    dw = (cols.T @ g2).reshape(w.shape)
    db = g2.sum(axis=0)
    dcols = (g2 @ w.reshape(k * k * cin, cout).T).reshape(B, H, W, k, k, cin)
    dxp = np.zeros((B, H + 2 * pad, W + 2 * pad, cin), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + H, j:j + W, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, pad:pad + H, pad:pad + W, :]
    return dx, dw, db


def _dense_fwd(node, x, w, b):
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(node.name, ("B", w.shape[0]), x.shape)
    out = x @ w
    if b is not None:
        out = out + b
    return out, (x, w)


def _dense_bwd(ctx, g):
    x, w = ctx
    return g @ w.T, x.T @ g, g.sum(axis=0)


def _relu_fwd(node, x):
    mask = x > 0
    return x * mask, mask


def _relu_bwd(mask, g):
    # subgradient at 0 is 0
    return (g * mask,)


def _avg_pool2_fwd(node, x):
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(node.name, ("B", "even H", "even W", "C"), x.shape)
    B, H, W, C = x.shape
    out = x.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))
    return out, x.shape


def _avg_pool2_bwd(x_shape, g):
    B, H, W, C = x_shape
    dx = np.broadcast_to(g[:, :, None, :, None, :] / 4.0, (B, H // 2, 2, W // 2, 2, C))
    return (dx.reshape(x_shape),)


def _gap_fwd(node, x):
    if x.ndim != 4:
        raise ShapeError(node.name, ("B", "H", "W", "C"), x.shape)
    return x.mean(axis=(1, 2)), x.shape


def _gap_bwd(x_shape, g):
    B, H, W, C = x_shape
    dx = np.broadcast_to(g[:, None, None, :] / (H * W), x_shape)
    return (np.array(dx),)


def _add_fwd(node, a, b):
    if a.shape != b.shape:
        raise ShapeError(node.name, a.shape, b.shape)
    return a + b, None


def _add_bwd(ctx, g):
    return g, g


def _mul_fwd(node, a, b):
    if a.shape != b.shape:
        raise ShapeError(node.name, a.shape, b.shape)
    return a * b, (a, b)


def _mul_bwd(ctx, g):
    a, b = ctx
    return g * b, g * a


def _xent_fwd(node, logits, labels):
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(node.name, (logits.shape[0],), labels.shape)
    C = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ShapeError(node.name, (f"labels in [0, {C})",), (int(labels.min()), int(labels.max())))
    z = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - log_z
    per_sample = -logp[np.arange(labels.size), labels]
    scale = 1.0 / max(labels.size, 1) if node.attrs["reduction"] == "mean" else 1.0
    loss = np.asarray(per_sample.sum() * scale, dtype=logits.dtype)
    return loss, (np.exp(logp), labels, scale)


def _xent_bwd(ctx, g):
    probs, labels, scale = ctx
    d = probs.copy()
    d[np.arange(labels.size), labels] -= 1.0
    return d * (g * scale), None


_RULES: Dict[str, Tuple[Callable, Callable]] = {
    "conv2d": (_conv2d_fwd, _conv2d_bwd),
    "dense": (_dense_fwd, _dense_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "avg_pool2": (_avg_pool2_fwd, _avg_pool2_bwd),
    "global_avg_pool": (_gap_fwd, _gap_bwd),
    "add": (_add_fwd, _add_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "softmax_cross_entropy": (_xent_fwd, _xent_bwd),
}


class Graph:
    """Static graph over the fixed operator set. Not thread-safe; use one per thread."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: List[Node] = []
        self._params: Dict[int, np.ndarray] = {}
        self._inputs: List[int] = []
        self._output: Optional[int] = None
        self._tape: Optional[List[Any]] = None
        self._ctx: Optional[List[Any]] = None
        self._grads: Optional[Dict[int, np.ndarray]] = None

    # --------- declaration ----------

    def _add(self, op: str, inputs: Tuple[Optional[int], ...], name: Optional[str], **attrs) -> int:
        for ref in inputs:
            if ref is not None and not 0 <= ref < len(self.nodes):
                raise ValueError(f"node reference {ref} does not exist")
        idx = len(self.nodes)
        self.nodes.append(Node(op=op, name=name or f"{op}_{idx}", inputs=inputs, attrs=attrs))
        self._output = idx
        return idx

    def placeholder(self, name: str, shape: Sequence[Optional[int]]) -> int:
        """Real-valued input. ``None`` in ``shape`` accepts any size on that axis."""
        idx = self._add("placeholder", (), name, shape=tuple(shape), kind="real")
        self._inputs.append(idx)
        return idx

    def labels(self, name: str = "labels") -> int:
        """Integer class-index vector input."""
        idx = self._add("placeholder", (), name, shape=(None,), kind="labels")
        self._inputs.append(idx)
        return idx

    def parameter(self, name: str, value: np.ndarray) -> int:
        idx = self._add("parameter", (), name)
        self._params[idx] = np.asarray(value)
        return idx

    def conv2d(self, x: int, w: int, b: Optional[int] = None, name: Optional[str] = None) -> int:
        return self._add("conv2d", (x, w, b), name)

    def dense(self, x: int, w: int, b: Optional[int] = None, name: Optional[str] = None) -> int:
        return self._add("dense", (x, w, b), name)

    def relu(self, x: int, name: Optional[str] = None) -> int:
        return self._add("relu", (x,), name)

    def avg_pool2(self, x: int, name: Optional[str] = None) -> int:
        return self._add("avg_pool2", (x,), name)

    def global_avg_pool(self, x: int, name: Optional[str] = None) -> int:
        return self._add("global_avg_pool", (x,), name)

    def add(self, a: int, b: int, name: Optional[str] = None) -> int:
        return self._add("add", (a, b), name)

    def mul(self, a: int, b: int, name: Optional[str] = None) -> int:
        return self._add("mul", (a, b), name)

    def softmax_cross_entropy(self, logits: int, labels: int, reduction: str = "mean",
                              name: Optional[str] = None) -> int:
        if reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
        return self._add("softmax_cross_entropy", (logits, labels), name, reduction=reduction)

    def set_output(self, node: int) -> None:
        self._output = node

    def index(self, name: str) -> int:
        for i, node in enumerate(self.nodes):
            if node.name == name:
                return i
        raise KeyError(name)

    @property
    def input_names(self) -> List[str]:
        return [self.nodes[i].name for i in self._inputs]

    @property
    def parameter_names(self) -> List[str]:
        return [self.nodes[i].name for i in self._params]

    # --------- evaluation ----------

    def _bind_input(self, node: Node, value: Any) -> np.ndarray:
        if node.attrs["kind"] == "labels":
            arr = np.asarray(value, dtype=np.int64).reshape(-1)
            return arr
        arr = np.asarray(value, dtype=self.dtype)
        shape = node.attrs["shape"]
        if arr.ndim != len(shape) or any(s is not None and s != a for s, a in zip(shape, arr.shape)):
            raise ShapeError(node.name, tuple("*" if s is None else s for s in shape), arr.shape)
        return arr

    def forward(self, *inputs: Any, **named: Any) -> Tensor:
        """Evaluate every node; returns the output node's value."""
        if len(inputs) > len(self._inputs):
            raise ShapeError("graph", (len(self._inputs),), (len(inputs),))
        bound: Dict[int, Any] = dict(zip(self._inputs, inputs))
        for key, value in named.items():
            bound[self.index(key)] = value
        if any(i not in bound for i in self._inputs):
            raise ShapeError("graph inputs", tuple(self.input_names),
                             tuple(self.nodes[i].name for i in sorted(bound)))

        tape: List[Any] = [None] * len(self.nodes)
        ctx: List[Any] = [None] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.op == "placeholder":
                tape[i] = self._bind_input(node, bound[i])
            elif node.op == "parameter":
                tape[i] = self._params[i].astype(self.dtype, copy=False)
            else:
                fwd, _ = _RULES[node.op]
                args = [None if ref is None else tape[ref] for ref in node.inputs]
                tape[i], ctx[i] = fwd(node, *args)
        self._tape, self._ctx, self._grads = tape, ctx, None
        return Tensor(tape[self._output])

    def value(self, name_or_index: Union[str, int]) -> np.ndarray:
        if self._tape is None:
            raise GradientError("no forward pass has been run on this graph")
        idx = self.index(name_or_index) if isinstance(name_or_index, str) else name_or_index
        return self._tape[idx]

    def relu_masks(self) -> List[np.ndarray]:
        """Active-unit masks of every relu node from the last forward pass."""
        if self._ctx is None:
            raise GradientError("no forward pass has been run on this graph")
        return [self._ctx[i] for i, n in enumerate(self.nodes) if n.op == "relu"]

    def backward(self, seed: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
        """Reverse pass from the output. Non-scalar outputs are seeded with ones (gradient of the sum)."""
        if self._tape is None:
            raise GradientError("backward called before forward", stage="autodiff")
        out = self._tape[self._output]
        grads: Dict[int, np.ndarray] = {
            self._output: np.ones_like(out) if seed is None else np.asarray(seed, dtype=out.dtype)
        }
        for i in range(self._output, -1, -1):
            node = self.nodes[i]
            g = grads.get(i)
            if g is None or node.op in ("placeholder", "parameter"):
                continue
            _, bwd = _RULES[node.op]
            for ref, dg in zip(node.inputs, bwd(self._ctx[i], g)):
                if ref is None or dg is None:
                    continue
                if dg.shape != self._tape[ref].shape:
                    raise ShapeError(f"{node.name}.grad", self._tape[ref].shape, dg.shape)
                grads[ref] = grads[ref] + dg if ref in grads else dg
        self._grads = grads
        return {
            self.nodes[i].name: g for i, g in grads.items()
            if self.nodes[i].op == "parameter"
            or (self.nodes[i].op == "placeholder" and self.nodes[i].attrs["kind"] == "real")
        }

    def grad(self, name: str) -> np.ndarray:
        if self._grads is None:
            raise GradientError("backward has not run on this graph")
        idx = self.index(name)
        if idx not in self._grads:
            return np.zeros_like(self._tape[idx])
        return self._grads[idx]

    @property
    def first_real_input(self) -> str:
        for i in self._inputs:
            if self.nodes[i].attrs["kind"] == "real":
                return self.nodes[i].name
        raise KeyError("graph has no real-valued input")

    @property
    def label_input(self) -> Optional[str]:
        for i in self._inputs:
            if self.nodes[i].attrs["kind"] == "labels":
                return self.nodes[i].name
        return None


def _call_args(graph: Graph, x: np.ndarray, label: Any) -> Dict[str, Any]:
    args = {graph.first_real_input: x}
    if graph.label_input is not None:
        args[graph.label_input] = label
    return args


def forward(graph: Graph, *inputs: Any) -> Tensor:
    return graph.forward(*inputs)


def grad_input(graph: Graph, input: ArrayLike, label: Any = None) -> np.ndarray:
    """∂J/∂input for the forward pass already run on ``input`` (and ``label``)."""
    if graph._tape is None:
        raise GradientError("backward called before forward", stage="autodiff")
    name = graph.first_real_input
    taped = graph.value(name)
    given = np.asarray(input, dtype=graph.dtype)
    if taped.shape != given.shape or not np.array_equal(taped, given):
        raise GradientError("forward has not run for this input", stage="autodiff")
    if graph.label_input is not None and label is not None:
        if not np.array_equal(graph.value(graph.label_input), np.asarray(label, dtype=np.int64).reshape(-1)):
            raise GradientError("forward has not run for this label", stage="autodiff")
    graph.backward()
    return graph.grad(name)


@dataclass
class FiniteDiffReport:
    max_relative_error: float
    checked: int
    excluded: Tuple[int, ...] = ()

    def __float__(self):
        return self.max_relative_error


def finite_diff_check(graph: Graph, input: ArrayLike, label: Any = None, h: float = 1e-3) -> FiniteDiffReport:
    """
    Compare analytic input gradients with central differences.

    Coordinates whose ±h evaluations land on different relu activation patterns
    straddle a kink and are reported in ``excluded`` instead of compared.
    The error of a compared coordinate is |analytic - numeric| / (|analytic| + 1e-8).
    """
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    x = np.array(input, dtype=graph.dtype)
    args = _call_args(graph, x, label)
    graph.forward(**args)
    analytic = grad_input(graph, x, label).copy()

    def evaluate(xp: np.ndarray) -> Tuple[float, List[np.ndarray]]:
        out = graph.forward(**_call_args(graph, xp, label)).value
        return float(np.sum(out, dtype=np.float64)), [m.copy() for m in graph.relu_masks()]

    flat = x.reshape(-1)
    worst = 0.0
    excluded = []
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus, masks_plus = evaluate(x)
        flat[i] = orig - h
        minus, masks_minus = evaluate(x)
        flat[i] = orig
        if any(not np.array_equal(a, b) for a, b in zip(masks_plus, masks_minus)):
            excluded.append(i)
            continue
        numeric = (plus - minus) / (2.0 * h)
        a = float(analytic.reshape(-1)[i])
        worst = max(worst, abs(a - numeric) / (abs(a) + 1e-8))

    graph.forward(**args)
    return FiniteDiffReport(max_relative_error=worst, checked=flat.size - len(excluded), excluded=tuple(excluded))
