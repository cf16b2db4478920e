"""
Module base class

Modules own Parameters (trainable tensors), buffers (plain arrays such as
batch-norm running statistics) and child modules, all kept in registration
order. `named_parameters()` therefore yields a stable depth-first
enumeration, which is what optimizers and checkpoints key on.
"""

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Any, Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from services.common.exceptions import ContractError, DimensionError
from services.engine.tensor import DEFAULT_DTYPE, Tensor

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]

_shape_recorder: ContextVar[Optional[List[Tuple[str, Shape]]]] = ContextVar(
    "shape_recorder", default=None
)


class Parameter(Tensor):
    """Trainable leaf tensor"""

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=True, name=name)


class Module:
    """
    Base class for layers, blocks and whole networks

    Subclasses assign Parameters, Modules and (via `register_buffer`) arrays
    as attributes in `__init__`, then implement `forward`. Leaf layers also
    implement `trace(tracer, *shapes)` for static cost analysis; composite
    modules implement it by delegating to their children.
    """

    def __init__(self) -> None:
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "qualified_name", "")

    # ---- registration ----

    def __setattr__(self, name: str, value: Any) -> None:
        if "_parameters" not in self.__dict__:
            raise ContractError(f"{type(self).__name__}.__init__ must call super().__init__()")
        if isinstance(value, Parameter):
            self._parameters[name] = value
            if value.name is None:
                value.name = name
        elif isinstance(value, Module):
            self._modules[name] = value
        elif name in self._buffers:
            value = np.asarray(value, dtype=DEFAULT_DTYPE)
            self._buffers[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        array = np.asarray(value, dtype=DEFAULT_DTYPE)
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def __getattr__(self, name: str) -> Any:
        # only reached when normal lookup fails
        buffers = self.__dict__.get("_buffers", {})
        if name in buffers:
            return buffers[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    # ---- enumeration ----

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, child in self._modules.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, buf in self._buffers.items():
            yield prefix + name, buf
        for name, child in self._modules.items():
            yield from child.named_buffers(prefix + name + ".")

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, child in self._modules.items():
            yield from child.named_modules(prefix + name + ".")

    def children(self) -> Iterator["Module"]:
        return iter(self._modules.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def assign_names(self, root: str = "") -> "Module":
        """Record each sub-module's dotted path (used by shape recording and tracing)"""
        for name, module in self.named_modules():
            full = ".".join(part for part in (root, name) if part)
            object.__setattr__(module, "qualified_name", full)
        return self

    # ---- modes ----

    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.grad = None

    @contextmanager
    def frozen(self) -> Iterator["Module"]:
        """Temporarily stop recording gradients for this module's parameters"""
        params = self.parameters()
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(params, flags):
                p.requires_grad = flag

    # ---- state ----

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Copies of all parameters then all buffers, in enumeration order"""
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if strict:
            missing = sorted(expected - set(state))
            unexpected = sorted(set(state) - expected)
            if missing or unexpected:
                raise ContractError(
                    "State does not match module",
                    missing=missing[:10],
                    unexpected=unexpected[:10],
                )
        for name, value in state.items():
            target = params[name].data if name in params else buffers.get(name)
            if target is None:
                continue
            if target.shape != np.shape(value):
                raise DimensionError(f"State entry {name} has wrong shape",
                                     expected=target.shape, actual=np.shape(value))
            target[...] = value

    # ---- calling ----

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        out = self.forward(*args, **kwargs)
        recorder = _shape_recorder.get()
        if recorder is not None and isinstance(out, Tensor) and not self._modules:
            recorder.append((self.qualified_name, tuple(out.shape[1:])))
        return out

    def trace(self, tracer: Any, *shapes: Shape) -> Any:
        """Default: children in registration order; a childless module is the identity"""
        if not self._modules:
            return shapes[0] if len(shapes) == 1 else shapes
        out: Any = shapes[0] if len(shapes) == 1 else shapes
        for name in self._modules:
            out = self.trace_child(name, tracer, out)
        return out

    def trace_child(self, name: str, tracer: Any, *shapes: Shape) -> Any:
        child = self._modules[name]
        return child.trace(tracer.scope(name), *shapes)

    def __repr__(self) -> str:
        children = ", ".join(self._modules)
        return f"{type(self).__name__}({children})"


class ModuleList(Module):
    """Ordered container; children are named "0", "1", ..."""

    def __init__(self, modules=()):
        super().__init__()
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._modules)), module)

    def __getitem__(self, index: int) -> Module:
        return list(self._modules.values())[index]

    def __len__(self) -> int:
        return len(self._modules)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._modules.values())


@contextmanager
def record_shapes() -> Iterator[List[Tuple[str, Shape]]]:
    """
    Collect (qualified name, per-sample output shape) for every leaf layer
    called inside the block. Call `assign_names()` on the model first.
    """
    shapes: List[Tuple[str, Shape]] = []
    token = _shape_recorder.set(shapes)
    try:
        yield shapes
    finally:
        _shape_recorder.reset(token)
