"""
Dense tensor type and reverse-mode tape

A Tensor wraps a row-major numpy buffer (float32 by default). Primitives are
Function subclasses; applying one while a Tape is active appends an OpRecord,
and `backward(root, tape)` walks the records in reverse to populate `.grad`
on every reachable leaf that requires grad.

No active tape means no recording, so evaluation code simply runs outside a
`with Tape():` block.
"""

import itertools
import logging
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Any, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from services.common.config import get_settings
from services.common.exceptions import ContractError, NonFiniteError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

_active_tape: ContextVar[Optional["Tape"]] = ContextVar("active_tape", default=None)
_compute_dtype: ContextVar[type] = ContextVar("compute_dtype", default=DEFAULT_DTYPE)
_check_finite: ContextVar[Optional[bool]] = ContextVar("check_finite", default=None)

_tensor_ids = itertools.count()

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]


# ============ Execution context ============

def get_compute_dtype() -> type:
    return _compute_dtype.get()


@contextmanager
def compute_dtype(dtype: type) -> Iterator[None]:
    """Run primitives at the given precision (inputs are upcast on entry)"""
    token = _compute_dtype.set(dtype)
    try:
        yield
    finally:
        _compute_dtype.reset(token)


def finite_checks_enabled() -> bool:
    flag = _check_finite.get()
    if flag is None:
        return get_settings().check_finite
    return flag


@contextmanager
def check_finite(enabled: bool = True) -> Iterator[None]:
    """Raise NonFiniteError as soon as any primitive produces NaN/Inf"""
    token = _check_finite.set(enabled)
    try:
        yield
    finally:
        _check_finite.reset(token)


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on the active tape"""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


# ============ Tensor ============

class Tensor:
    """Dense tensor with optional gradient tracking"""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Optional[type] = None,
    ):
        self.data: np.ndarray = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        # Function that produced this tensor on a tape, None for leaves
        self.op: Optional["Function"] = None
        self.id = next(_tensor_ids)

    @classmethod
    def _from_op(cls, data: np.ndarray, op: Optional["Function"], requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out.op = op
        out.id = next(_tensor_ids)
        return out

    # ---- constructors ----

    @classmethod
    def zeros(cls, shape: Sequence[int], requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=DEFAULT_DTYPE), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape: Sequence[int], requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(tuple(shape), dtype=DEFAULT_DTYPE), requires_grad=requires_grad)

    # ---- introspection ----

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same buffer, no gradient tracking"""
        return Tensor._from_op(self.data, None, False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + grad

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # ---- operator sugar (primitives live in services.engine.ops) ----

    def __add__(self, other):
        from services.engine import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from services.engine import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from services.engine import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from services.engine import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from services.engine import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from services.engine import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from services.engine import ops
        return ops.div(self, other)

    def __neg__(self):
        from services.engine import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from services.engine import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from services.engine import ops
        return ops.slice_(self, index)

    def reshape(self, *shape):
        from services.engine import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        from services.engine import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.permute(self, axes)

    def transpose(self, axis_a: int = -2, axis_b: int = -1):
        from services.engine import ops
        return ops.transpose(self, axis_a, axis_b)

    def sum(self, axis=None, keepdims: bool = False):
        from services.engine import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from services.engine import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value: Any) -> Tensor:
    """Wrap scalars/arrays as constant tensors; pass tensors through"""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=get_compute_dtype()), dtype=get_compute_dtype())


# ============ Functions and the tape ============

class Function:
    """
    Base class for differentiable primitives

    Subclasses implement `forward(*arrays, **kwargs) -> ndarray` and
    `backward(grad) -> tuple` (one entry per input, None where no gradient
    is needed). Anything backward needs is saved on `self` during forward.
    """

    name = "function"

    def __init__(self) -> None:
        self.needs_input_grad: Tuple[bool, ...] = ()

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        fn = cls()
        dtype = get_compute_dtype()
        arrays = [t.data if t.data.dtype == dtype else t.data.astype(dtype) for t in inputs]

        tape = _active_tape.get()
        fn.needs_input_grad = tuple(t.requires_grad for t in inputs)
        track = tape is not None and any(fn.needs_input_grad)

        out_data = fn.forward(*arrays, **kwargs)
        if out_data.dtype != dtype:
            out_data = out_data.astype(dtype)

        if finite_checks_enabled() and not np.all(np.isfinite(out_data)):
            bad = np.argwhere(~np.isfinite(out_data))[0]
            raise NonFiniteError(
                f"{fn.name} produced a non-finite value at index {tuple(int(i) for i in bad)}",
                op=fn.name,
                index=bad,
            )

        out = Tensor._from_op(out_data, fn if track else None, track)
        if track:
            tape.record(fn, inputs, out)
        return out


@dataclass
class OpRecord:
    """One primitive application on a tape"""

    index: int
    fn: Function
    inputs: Tuple[Tensor, ...]
    output: Tensor

    @property
    def op_name(self) -> str:
        return self.fn.name


class Tape:
    """
    Ordered record of primitive applications

    Records are appended in execution order, so every record's inputs were
    produced by earlier records (or are leaves). A tape may be entered more
    than once; recording continues where it left off.

    Example:
        with Tape() as tape:
            loss = ops.sum(ops.mul(x, x))
        backward(loss, tape)
    """

    def __init__(self) -> None:
        self.records: List[OpRecord] = []
        self._tokens: list = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc_info) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.records)

    def record(self, fn: Function, inputs: Sequence[Tensor], output: Tensor) -> None:
        self.records.append(OpRecord(len(self.records), fn, tuple(inputs), output))

    def produced(self, tensor: Tensor) -> bool:
        return any(rec.output is tensor for rec in self.records)

    def backward(self, root: Tensor) -> None:
        backward(root, self)


def backward(root: Tensor, tape: Tape) -> None:
    """
    Populate `.grad` on every requires_grad leaf reachable from `root`

    Gradients accumulate additively, both across fan-out inside the graph and
    into leaves that already hold a grad from an earlier call.

    Raises:
        ContractError: If root is not a scalar or was not produced on `tape`
    """
    if root.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    if root.op is None or not tape.produced(root):
        raise ContractError("backward() root was not produced on this tape")

    pending = {root.id: np.ones_like(root.data)}
    for rec in reversed(tape.records):
        grad = pending.pop(rec.output.id, None)
        if grad is None:
            continue
        input_grads = rec.fn.backward(grad)
        for tensor, g in zip(rec.inputs, input_grads):
            if g is None or not tensor.requires_grad:
                continue
            if g.shape != tensor.shape:
                raise ContractError(
                    f"{rec.op_name} returned grad of shape {g.shape} for input {tensor.shape}"
                )
            if tensor.op is None:
                tensor.accumulate_grad(g)
            elif tensor.id in pending:
                pending[tensor.id] = pending[tensor.id] + g
            else:
                pending[tensor.id] = g

    logger.debug(f"backward visited {len(tape.records)} records")
