"""Minimal reverse-mode differentiation engine.

Provides exactly the primitives the four coordinate-network architectures
and their two fitting losses need: affine layers, ReLU / scaled-sine /
variable-frequency-sine activations, row softmax, lookup-table gather, the
Huber and cross-entropy reductions, and a handful of structural ops
(column/row slicing and concatenation) used by multi-channel output heads.

The computation graph is rebuilt on every forward pass; ``backward`` walks
it once and returns one gradient array per named parameter.  There is no
broadcasting beyond the bias add in ``affine_forward`` — all shapes are
explicit.  An engine-wide precision switch selects float32 (training
default) or float64 (used for finite-difference verification).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ContractError, ShapeError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32


def set_default_dtype(name: str) -> None:
    """Switch the engine-wide float mode ('float32' or 'float64')."""
    global _default_dtype
    if name not in _DTYPES:
        raise ContractError(f"unsupported dtype {name!r}; use 'float32' or 'float64'")
    _default_dtype = _DTYPES[name]


def get_default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextmanager
def precision(name: str):
    """Temporarily run the engine in the given float mode."""
    previous = get_default_dtype().name
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """A node in the computation graph: a value plus how it was produced.

    Leaves are parameters (requires_grad=True) or constants; interior nodes
    carry a backward closure that scatters the upstream gradient into their
    parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None, requires_grad=None):
        self.data = np.asarray(data, dtype=get_default_dtype())
        self.grad = None
        self._parents = parents
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    """Wrap an array as a graph leaf that receives no gradient."""
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    """Wrap an array as a trainable leaf."""
    return Tensor(data, requires_grad=True)


class ParamSet:
    """Named parameter tensors with deterministic iteration order.

    Names are unique; insertion order is preserved and defines the layout
    of checkpoints and gradient sets.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = parameter(array)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def replace(self, name: str, array: np.ndarray) -> None:
        """Swap a parameter's storage (used by explicit expansion ops)."""
        self._params[name].data = np.asarray(array, dtype=get_default_dtype())

    def copy(self) -> "ParamSet":
        other = ParamSet()
        for name, t in self._params.items():
            other.add(name, t.data.copy())
        return other


GradSet = dict  # name -> ndarray, shape-congruent with the ParamSet


def _accumulate(parent: Tensor, contribution: np.ndarray) -> None:
    if parent.grad is None:
        parent.grad = contribution
    else:
        parent.grad += contribution


# ---------------------------------------------------------------------------
# primitives


def affine_forward(W: Tensor, b: Tensor, x: Tensor) -> Tensor:
    """y = x Wᵀ + b per row.  W is (out, in), b is (out,), x is (N, in)."""
    Wd, bd, xd = W.data, b.data, x.data
    if xd.ndim != 2 or Wd.ndim != 2 or bd.ndim != 1:
        raise ShapeError(
            f"affine_forward expects matrix inputs, got x{xd.shape} W{Wd.shape} b{bd.shape}"
        )
    if xd.shape[1] != Wd.shape[1] or bd.shape[0] != Wd.shape[0]:
        raise ShapeError(
            f"affine_forward dimension mismatch: x{xd.shape} W{Wd.shape} b{bd.shape}"
        )
    out = Tensor(xd @ Wd.T + bd, parents=(W, b, x))

    def backward(g):
        if W.requires_grad:
            _accumulate(W, g.T @ xd)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0))
        if x.requires_grad:
            _accumulate(x, g @ Wd)

    out._backward = backward
    return out


def relu(z: Tensor) -> Tensor:
    """max(z, 0); derivative is 0 at z == 0."""
    out = Tensor(np.maximum(z.data, 0), parents=(z,))

    def backward(g):
        if z.requires_grad:
            _accumulate(z, g * (z.data > 0))

    out._backward = backward
    return out


def sine_act(z: Tensor, omega0: float) -> Tensor:
    """sin(ω0 z) with derivative ω0 cos(ω0 z)."""
    scaled = omega0 * z.data
    out = Tensor(np.sin(scaled), parents=(z,))

    def backward(g):
        if z.requires_grad:
            _accumulate(z, g * (omega0 * np.cos(scaled)))

    out._backward = backward
    return out


def finer_act(z: Tensor, omega0: float) -> Tensor:
    """sin(ω0 (|z|+1) z); local frequency grows with |z|.

    The derivative ω0 (2|z|+1) cos(ω0 (|z|+1) z) is exact everywhere:
    (|z|+1)z is continuously differentiable, including at 0.
    """
    zd = z.data
    inner = omega0 * ((np.abs(zd) + 1.0) * zd)
    out = Tensor(np.sin(inner), parents=(z,))

    def backward(g):
        if z.requires_grad:
            _accumulate(z, g * (omega0 * (2.0 * np.abs(zd) + 1.0) * np.cos(inner)))

    out._backward = backward
    return out


def softmax(z: Tensor) -> Tensor:
    """Row softmax, stabilized by subtracting each row's max."""
    zd = z.data
    if zd.ndim != 2 or zd.shape[1] < 1:
        raise ShapeError(f"softmax expects a matrix with >=1 column, got {zd.shape}")
    shifted = zd - zd.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p, parents=(z,))

    def backward(g):
        if z.requires_grad:
            inner = (g * p).sum(axis=1, keepdims=True)
            _accumulate(z, p * (g - inner))

    out._backward = backward
    return out


def table_lookup(H: Tensor, rows) -> Tensor:
    """Gather rows of H; backward scatter-adds into exactly those rows."""
    rows = np.asarray(rows, dtype=np.int64)
    n = H.data.shape[0]
    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise IndexError(
            f"table_lookup index out of range: table has {n} rows, "
            f"indices span [{rows.min()}, {rows.max()}]"
        )
    out = Tensor(H.data[rows], parents=(H,))

    def backward(g):
        if H.requires_grad:
            dH = np.zeros_like(H.data)
            np.add.at(dH, rows, g)
            _accumulate(H, dH)

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# loss reductions


def huber_loss(pred: Tensor, target: Tensor, delta: float = 1.0) -> Tensor:
    """Mean elementwise Huber: 0.5 r² for |r| ≤ δ, else δ(|r| − 0.5 δ)."""
    if delta <= 0:
        raise ContractError(f"huber delta must be positive, got {delta}")
    pd, td = pred.data, target.data
    if pd.shape != td.shape:
        raise ShapeError(f"huber_loss shape mismatch: {pd.shape} vs {td.shape}")
    r = pd - td
    a = np.abs(r)
    clipped = np.minimum(a, delta)
    # 0.5 r^2 in the quadratic region, delta(|r| - delta/2) beyond: both equal
    # clipped * (|r| - clipped/2)
    vals = clipped * (a - 0.5 * clipped)
    out = Tensor(vals.mean(), parents=(pred, target))
    n = r.size

    def backward(g):
        d = np.clip(r, -delta, delta) * (g / n)
        if pred.requires_grad:
            _accumulate(pred, d)
        if target.requires_grad:
            _accumulate(target, -d)

    out._backward = backward
    return out


def cross_entropy_loss(probs: Tensor, targets: Tensor, eps_log: float = 1e-12) -> Tensor:
    """Mean over rows of −Σ_c target_c log(prob_c + ε).

    Targets may be one-hot rows (fitting) or soft distributions
    (distillation against a frozen model's class probabilities).  Combined
    with the softmax that produced ``probs`` the gradient with respect to
    the logits is (probs − targets) / rows.
    """
    pd, td = probs.data, targets.data
    if pd.shape != td.shape:
        raise ShapeError(f"cross_entropy_loss shape mismatch: {pd.shape} vs {td.shape}")
    logp = np.log(pd + eps_log)
    rows = pd.shape[0]
    out = Tensor(-(td * logp).sum() / rows, parents=(probs, targets))

    def backward(g):
        if probs.requires_grad:
            _accumulate(probs, -(td / (pd + eps_log)) * (g / rows))
        if targets.requires_grad:
            _accumulate(targets, -logp * (g / rows))

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.copy())
        if b.requires_grad:
            _accumulate(b, g.copy())

    out._backward = backward
    return out


def scale(t: Tensor, c: float) -> Tensor:
    out = Tensor(t.data * c, parents=(t,))

    def backward(g):
        if t.requires_grad:
            _accumulate(t, g * c)

    out._backward = backward
    return out


def total_sum(t: Tensor) -> Tensor:
    out = Tensor(t.data.sum(), parents=(t,))

    def backward(g):
        if t.requires_grad:
            _accumulate(t, np.full_like(t.data, g))

    out._backward = backward
    return out


def slice_cols(t: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(t.data[:, start:stop], parents=(t,))

    def backward(g):
        if t.requires_grad:
            full = np.zeros_like(t.data)
            full[:, start:stop] = g
            _accumulate(t, full)

    out._backward = backward
    return out


def slice_rows(t: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(t.data[start:stop], parents=(t,))

    def backward(g):
        if t.requires_grad:
            full = np.zeros_like(t.data)
            full[start:stop] = g
            _accumulate(t, full)

    out._backward = backward
    return out


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(
            f"concat_cols row mismatch: {a.data.shape} vs {b.data.shape}"
        )
    out = Tensor(np.hstack([a.data, b.data]), parents=(a, b))
    split = a.data.shape[1]

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g[:, :split].copy())
        if b.requires_grad:
            _accumulate(b, g[:, split:].copy())

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, params: ParamSet) -> GradSet:
    """Reverse-mode gradients of a scalar loss for every named parameter.

    Parameters unreachable from the loss get zero gradients.  Repeated
    calls with identical inputs produce bit-identical results.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")

    # Topological order via iterative depth-first search.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)

    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    grads: GradSet = {}
    for name, p in params.items():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    return grads
