"""A small reverse-mode automatic differentiation tape.

Values are plain ``numpy`` arrays and keep the dtype they were created with
(float32 for the model, float64 in gradient checks). Every operation is
evaluated eagerly and appended to the :class:`Tape` that owns its inputs;
:meth:`Tape.backward` then walks the recorded nodes once, newest first.

Operations with non-standard derivatives (the quantizers' straight-through
estimators) register themselves through :meth:`Tape.record` with their own
backward rule.
"""

from collections.abc import Callable, Sequence
from typing import Optional, Union

import numpy as np

from rotaquant.core import tensor
from rotaquant.logging import log_error

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Variable:
    """A value recorded on a tape.

    Parameters
    ----------
    tape : Tape
        The tape that owns this variable.
    value : numpy.ndarray
        The forward value.
    parents : sequence of Variable
        Inputs of the operation that produced this value.
    backward_fn : callable, optional
        Maps the gradient w.r.t. this value to one gradient (or None) per
        parent. None for leaves.
    name : str, optional
        Name of a parameter leaf.

    """

    __slots__ = ("tape", "value", "parents", "backward_fn", "name", "index")

    def __init__(
        self,
        tape: "Tape",
        value: np.ndarray,
        parents: Sequence["Variable"] = (),
        backward_fn: Optional[BackwardFn] = None,
        name: Optional[str] = None,
    ):
        self.tape = tape
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name
        self.index = -1

    @property
    def shape(self) -> tuple:
        """Shape of the forward value."""
        return self.value.shape

    def __repr__(self) -> str:
        label = self.name or f"node{self.index}"
        return f"Variable({label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Single-owner record of the operations of one forward pass."""

    def __init__(self):
        self.nodes: list[Variable] = []
        self.parameters: dict[str, Variable] = {}

    def _append(self, node: Variable) -> Variable:
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def parameter(self, name: str, value: np.ndarray) -> Variable:
        """Register a named leaf whose gradient will be returned."""
        if name in self.parameters:
            raise log_error(
                ValueError, f"Parameter '{name}' is already on the tape."
            )
        node = self._append(Variable(self, np.asarray(value), name=name))
        self.parameters[name] = node
        return node

    def constant(self, value: np.ndarray) -> Variable:
        """Register a leaf that receives no gradient."""
        return self._append(Variable(self, np.asarray(value)))

    def record(
        self,
        value: np.ndarray,
        parents: Sequence[Variable],
        backward_fn: BackwardFn,
    ) -> Variable:
        """Append the result of an operation with a custom backward rule.

        Parameters
        ----------
        value : numpy.ndarray
            The forward result.
        parents : sequence of Variable
            The operation's inputs, all owned by this tape.
        backward_fn : callable
            Maps the output gradient to one gradient (or None) per parent,
            each with the shape of the corresponding parent value.

        Returns
        -------
        Variable
            The recorded result.

        """
        for parent in parents:
            if parent.tape is not self:
                raise log_error(
                    ValueError, "Cannot combine variables from two tapes."
                )
        return self._append(Variable(self, value, parents, backward_fn))

    def backward(self, loss: Variable) -> dict[str, np.ndarray]:
        """Back-propagate from a scalar loss to every parameter leaf.

        Parameters
        ----------
        loss : Variable
            A variable holding a single value.

        Returns
        -------
        dict
            Gradient for every parameter registered on the tape, keyed by
            parameter name. Parameters that do not influence ``loss`` get
            an all-zero gradient.

        Raises
        ------
        ValueError
            If ``loss`` does not hold exactly one value.
        RuntimeError
            If a node refers to a parent recorded after itself (a cycle).

        """
        if loss.value.size != 1:
            raise log_error(
                ValueError,
                f"Expected a scalar loss, but got shape {loss.value.shape}.",
            )
        grads: dict[int, np.ndarray] = {
            loss.index: np.ones_like(loss.value)
        }
        # creation order is a topological order, so walk it backwards
        for node in reversed(self.nodes[: loss.index + 1]):
            grad = grads.pop(node.index, None)
            if grad is None:
                continue
            if node.backward_fn is None:
                grads[node.index] = grad
                continue
            parent_grads = node.backward_fn(grad)
            for parent, parent_grad in zip(node.parents, parent_grads):
                if parent.index >= node.index:
                    raise log_error(
                        RuntimeError,
                        f"Cycle in tape: node {node.index} depends on "
                        f"node {parent.index}.",
                    )
                if parent_grad is None:
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + parent_grad
                else:
                    grads[parent.index] = parent_grad
        return {
            name: np.asarray(
                grads.get(node.index, np.zeros_like(node.value)),
                dtype=node.value.dtype,
            ).reshape(node.value.shape)
            for name, node in self.parameters.items()
        }


Operand = Union[Variable, np.ndarray, float]


def _pair(a: Operand, b: Operand) -> tuple[Variable, Variable]:
    """Lift plain arrays to constants on the tape of the other operand."""
    if isinstance(a, Variable) and isinstance(b, Variable):
        return a, b
    if isinstance(a, Variable):
        return a, a.tape.constant(np.asarray(b, dtype=a.value.dtype))
    if isinstance(b, Variable):
        return b.tape.constant(np.asarray(a, dtype=b.value.dtype)), b
    raise log_error(TypeError, "At least one operand must be a Variable.")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape of a broadcast operand."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Operand, b: Operand) -> Variable:
    """Elementwise sum (``b`` may broadcast along leading/unit axes)."""
    a, b = _pair(a, b)
    return a.tape.record(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Operand, b: Operand) -> Variable:
    """Elementwise difference."""
    a, b = _pair(a, b)
    return a.tape.record(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Operand, b: Operand) -> Variable:
    """Elementwise product."""
    a, b = _pair(a, b)
    return a.tape.record(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.shape),
            _unbroadcast(g * a.value, b.shape),
        ),
    )


def scale(a: Variable, factor: float) -> Variable:
    """Multiply by a constant."""
    return a.tape.record(a.value * factor, (a,), lambda g: (g * factor,))


def square(a: Variable) -> Variable:
    """Elementwise square."""
    return a.tape.record(a.value**2, (a,), lambda g: (2.0 * g * a.value,))


def sum(a: Variable) -> Variable:  # noqa: A001
    """Sum of all elements, as a 0-d value."""
    return a.tape.record(
        np.asarray(a.value.sum(), dtype=a.value.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).copy(),),
    )


def mean(a: Variable) -> Variable:
    """Mean of all elements, as a 0-d value."""
    n = a.value.size
    return a.tape.record(
        np.asarray(a.value.mean(), dtype=a.value.dtype),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.shape).astype(a.value.dtype),),
    )


def reshape(a: Variable, shape: tuple) -> Variable:
    """Reshape without copying data order."""
    return a.tape.record(
        a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),)
    )


def transpose(a: Variable, axes: Sequence[int]) -> Variable:
    """Permute axes."""
    inverse = np.argsort(axes)
    return a.tape.record(
        np.ascontiguousarray(np.transpose(a.value, axes)),
        (a,),
        lambda g: (np.transpose(g, inverse),),
    )


def matmul(a: Variable, b: Variable) -> Variable:
    """Matrix product with identical leading (batch) shapes."""
    return a.tape.record(
        tensor.matmul(a.value, b.value),
        (a, b),
        lambda g: (
            np.matmul(g, np.swapaxes(b.value, -1, -2)),
            np.matmul(np.swapaxes(a.value, -1, -2), g),
        ),
    )


def linear(x: Variable, weight: Variable) -> Variable:
    """Apply a linear layer, ``x @ weight.T``.

    Parameters
    ----------
    x : Variable
        Input of shape (..., in_features).
    weight : Variable
        Weight of shape (out_features, in_features).

    Returns
    -------
    Variable
        Output of shape (..., out_features).

    """
    if x.shape[-1] != weight.shape[1]:
        raise log_error(
            ValueError,
            f"Cannot apply weight {weight.shape} to input {x.shape}.",
        )
    flat = x.value.reshape(-1, x.shape[-1])
    out = np.matmul(flat, weight.value.T)

    def backward(g):
        g_flat = g.reshape(-1, weight.shape[0])
        return (
            np.matmul(g_flat, weight.value).reshape(x.shape),
            np.matmul(g_flat.T, flat),
        )

    return x.tape.record(
        out.reshape(*x.shape[:-1], weight.shape[0]), (x, weight), backward
    )


def embedding(weight: Variable, ids: np.ndarray) -> Variable:
    """Look up rows of an embedding table."""
    ids = np.asarray(ids)

    def backward(g):
        grad = np.zeros_like(weight.value)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (grad,)

    return weight.tape.record(weight.value[ids], (weight,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: Variable) -> Variable:
    """SiLU activation, ``x * sigmoid(x)``."""
    sig = _sigmoid(x.value)
    return x.tape.record(
        x.value * sig,
        (x,),
        lambda g: (g * (sig + x.value * sig * (1.0 - sig)),),
    )


def softmax(x: Variable, axis: int = -1) -> Variable:
    """Numerically stable softmax along one axis."""
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return x.tape.record(
        y,
        (x,),
        lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),),
    )


def rms_norm(x: Variable, eps: float = 1e-6) -> Variable:
    """Normalize the last axis by its root-mean-square (no gain)."""
    d = x.shape[-1]
    rms = np.sqrt((x.value**2).mean(axis=-1, keepdims=True) + eps)

    def backward(g):
        dot = (g * x.value).sum(axis=-1, keepdims=True)
        return (g / rms - x.value * dot / (d * rms**3),)

    return x.tape.record(x.value / rms, (x,), backward)


def skew_symmetric(params: Variable, n: int) -> Variable:
    """Build ``A = U - U^T`` from the strictly-upper-triangular entries.

    Parameters
    ----------
    params : Variable
        Vector of length ``n * (n - 1) / 2`` (row-major upper triangle).
    n : int
        Size of the square output.

    Returns
    -------
    Variable
        A skew-symmetric (n, n) matrix.

    """
    rows, cols = np.triu_indices(n, k=1)
    if params.value.shape != (rows.size,):
        raise log_error(
            ValueError,
            f"Expected {rows.size} free parameters for size {n}, "
            f"but got shape {params.value.shape}.",
        )
    a = np.zeros((n, n), dtype=params.value.dtype)
    a[rows, cols] = params.value
    a[cols, rows] = -params.value
    return params.tape.record(
        a, (params,), lambda g: (g[rows, cols] - g[cols, rows],)
    )


def cayley(a: Variable, max_condition: float = 1e8) -> Variable:
    """Cayley transform ``R = (I - A)(I + A)^-1`` of a skew matrix.

    Raises
    ------
    numpy.linalg.LinAlgError
        If ``I + A`` has a condition number above ``max_condition``.

    """
    n = a.shape[0]
    dtype = a.value.dtype
    eye = np.eye(n, dtype=np.float64)
    a64 = a.value.astype(np.float64)
    plus = eye + a64
    if np.linalg.cond(plus) > max_condition:
        raise log_error(
            np.linalg.LinAlgError,
            "I + A is numerically singular; cannot form the Cayley "
            "transform.",
        )
    # (I - A) and (I + A)^-1 commute
    r = np.linalg.solve(plus, eye - a64)
    inv = np.linalg.solve(plus, eye)

    def backward(g):
        g64 = g.astype(np.float64)
        return ((-(eye + r).T @ g64 @ inv.T).astype(dtype),)

    return a.tape.record(r.astype(dtype), (a,), backward)


def block_diagonal(block: Variable, repeats: int) -> Variable:
    """Repeat a square block along the diagonal, ``kron(I, block)``."""
    n = block.shape[0]

    def backward(g):
        grad = np.zeros_like(block.value)
        for i in range(repeats):
            grad = grad + g[i * n : (i + 1) * n, i * n : (i + 1) * n]
        return (grad,)

    return block.tape.record(
        np.kron(np.eye(repeats, dtype=block.value.dtype), block.value),
        (block,),
        backward,
    )


def backward(loss: Variable) -> dict[str, np.ndarray]:
    """Back-propagate through the tape that owns ``loss``.

    See Also
    --------
    Tape.backward

    """
    return loss.tape.backward(loss)
