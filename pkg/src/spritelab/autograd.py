"""A small reverse-mode differentiation engine over numpy arrays.

Every `Tensor` produced by an operation remembers its parents and a closure
that pushes the output gradient back to them. `Tensor.backward` topologically
sorts the recorded graph and visits each node once; gradients add up where a
value fans out. Nodes whose inputs need no gradient are not recorded, so
running a network on constant parameters costs no more than plain numpy.

Batch dimension first throughout.
"""

from __future__ import annotations

import json
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

CHECKPOINT_VERSION = 1


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out the axes numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    # make `ndarray <op> Tensor` defer to the reflected Tensor method
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.asarray(data) if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = op

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- graph construction -------------------------------------------------

    @staticmethod
    def make(data, parents: Sequence["Tensor"], backward: Callable[[np.ndarray], None], op: str) -> "Tensor":
        """Build an op output; `backward(g)` must route g into the parents."""
        needs = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
        if needs:
            out._backward = backward
        return out

    def backward(self, grad: Optional[np.ndarray] = None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a seed gradient needs a scalar, got shape {self.data.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ValueError("tensor does not depend on any parameter that requires a gradient")

        order, seen = [], set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior nodes do not keep their gradient
                if node._parents:
                    node.grad = None

    # -- elementwise ----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other, self.data.dtype)

        def backward(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))
        return Tensor.make(self.data + other.data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor.make(-self.data, (self,), lambda g: self._accumulate(-g), "neg")

    def __sub__(self, other):
        return self + (-as_tensor(other, self.data.dtype))

    def __rsub__(self, other):
        return as_tensor(other, self.data.dtype) + (-self)

    def __mul__(self, other):
        other = as_tensor(other, self.data.dtype)

        def backward(g):
            self._accumulate(_unbroadcast(g * other.data, self.shape))
            other._accumulate(_unbroadcast(g * self.data, other.shape))
        return Tensor.make(self.data * other.data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = as_tensor(other, self.data.dtype)
        if self.ndim != 2 or other.ndim != 2:
            raise ValueError("matmul is defined for 2-d operands only")

        def backward(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)
        return Tensor.make(self.data @ other.data, (self, other), backward, "matmul")

    def relu(self):
        mask = self.data > 0
        return Tensor.make(self.data * mask, (self,), lambda g: self._accumulate(g * mask), "relu")

    def abs(self):
        sign = np.sign(self.data)
        return Tensor.make(np.abs(self.data), (self,), lambda g: self._accumulate(g * sign), "abs")

    def square(self):
        return Tensor.make(self.data * self.data, (self,), lambda g: self._accumulate(2.0 * g * self.data),
                           "square")

    def softplus(self):
        sig = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return Tensor.make(np.logaddexp(0.0, self.data), (self,), lambda g: self._accumulate(g * sig),
                           "softplus")

    def clip(self, lo: float, hi: float):
        """Clamp; gradient passes only where the input is strictly inside."""
        mask = (self.data > lo) & (self.data < hi)
        return Tensor.make(np.clip(self.data, lo, hi), (self,), lambda g: self._accumulate(g * mask), "clip")

    # -- reductions and shape -------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, shape))
        return Tensor.make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return Tensor.make(self.data.reshape(*shape), (self,), lambda g: self._accumulate(g.reshape(old)),
                           "reshape")

    def take(self, indices, axis: int = 1):
        """Gather along an axis (indices may repeat). The backward scatter is a
        matmul with a one-hot matrix, much faster than np.add.at."""
        indices = np.asarray(indices)
        n = self.shape[axis]
        onehot = np.zeros((n, len(indices)), dtype=self.data.dtype)
        onehot[indices, np.arange(len(indices))] = 1.0

        def backward(g):
            g = np.moveaxis(g, axis, -1) @ onehot.T
            self._accumulate(np.moveaxis(g, -1, axis))
        return Tensor.make(np.take(self.data, indices, axis=axis), (self,), backward, "take")

    def __getitem__(self, index):
        parts = index if isinstance(index, tuple) else (index,)
        basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in parts)

        def backward(g):
            full = np.zeros_like(self.data)
            if basic:
                full[index] = g  # a view: no repeated elements
            else:
                np.add.at(full, index, g)
            self._accumulate(full)
        return Tensor.make(self.data[index], (self,), backward, "index")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            t._accumulate(part)
    return Tensor.make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# -- networks -----------------------------------------------------------------

def truncated_normal(rng: np.random.Generator, shape, stddev: float, bound: float = 2.0) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * stddev


class MLP:
    """Affine + ReLU stack; the final layer is affine only."""

    def __init__(self, sizes: Sequence[int], rng: Optional[np.random.Generator] = None, dtype=np.float64,
                 name: str = "mlp", zero_output: bool = False):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        self.sizes = tuple(int(s) for s in sizes)
        self.name = name
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = truncated_normal(rng, (fan_in, fan_out), 1.0 / np.sqrt(fan_in)).astype(dtype)
            if zero_output and len(self.weights) == len(self.sizes) - 2:
                w[...] = 0.0
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True))

    @property
    def dtype(self):
        return self.weights[0].data.dtype

    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x, frozen: bool = False) -> Tensor:
        """Forward pass. With `frozen`, parameters enter as constants: gradients
        still reach `x` but nothing is recorded for the weights."""
        x = as_tensor(x, self.dtype)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"{self.name}: expected input width {self.sizes[0]}, got {x.shape[-1]}")
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if frozen:
                w, b = Tensor(w.data), Tensor(b.data)
            x = x @ w + b
            if i < n - 1:
                x = x.relu()
        return x

    def forward_numpy(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w.data + b.data
            if i < n - 1:
                np.maximum(x, 0.0, out=x)
        return x

    def zero_grad(self):
        for p in self.params():
            p.grad = None

    def zero_(self):
        for p in self.params():
            p.data[...] = 0.0
        return self

    def grads(self) -> list[np.ndarray]:
        return [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params()]

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def copy(self) -> "MLP":
        other = MLP.__new__(MLP)
        other.sizes, other.name = self.sizes, self.name
        other.weights = [Tensor(w.data.copy(), requires_grad=True) for w in self.weights]
        other.biases = [Tensor(b.data.copy(), requires_grad=True) for b in self.biases]
        return other

    def state(self) -> dict:
        return {f"{self.name}/{i}": p.data for i, p in enumerate(self.params())}

    def load_state(self, arrays: dict):
        for i, p in enumerate(self.params()):
            arr = np.asarray(arrays[f"{self.name}/{i}"])
            if arr.shape != p.data.shape:
                raise ValueError(f"{self.name}/{i}: shape {arr.shape} does not match {p.data.shape}")
            p.data = arr.astype(p.data.dtype).copy()


# -- optimisation ---------------------------------------------------------------

def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> list[np.ndarray]:
    """One bias-corrected Adam update. `state` holds moments and step count and
    is updated in place; returns the new parameter arrays."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient in Adam step")
    if "m" not in state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        m = state["m"][i] = beta1 * state["m"][i] + (1.0 - beta1) * g
        v = state["v"][i] = beta2 * state["v"][i] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict = {}

    def step(self):
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        new = adam_step([p.data for p in self.params], grads, self.state, self.lr, self.beta1, self.beta2,
                        self.eps)
        for p, d in zip(self.params, new):
            p.data = d.astype(p.data.dtype, copy=False)
            p.grad = None


def gaussian_sample(mean: Tensor, scale: Tensor, rng: np.random.Generator) -> Tensor:
    """Reparameterised draw mean + scale * eta, eta ~ N(0, I)."""
    mean = as_tensor(mean)
    eta = rng.standard_normal(mean.shape).astype(mean.data.dtype)
    return mean + as_tensor(scale) * eta


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, nets: Sequence[MLP], extra: Optional[dict] = None):
    """npz archive: raw arrays plus a JSON header with version and layer shapes."""
    header = {
        "version": CHECKPOINT_VERSION,
        "nets": {n.name: {"sizes": list(n.sizes), "dtype": str(n.dtype)} for n in nets},
        "extra": extra or {},
    }
    arrays = {}
    for n in nets:
        arrays.update(n.state())
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (header, {net name: MLP})."""
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
        nets = {}
        for name, meta in header["nets"].items():
            net = MLP(meta["sizes"], dtype=np.dtype(meta["dtype"]), name=name)
            net.load_state({k: data[k] for k in data.files if k.startswith(name + "/")})
            nets[name] = net
    return header, nets
