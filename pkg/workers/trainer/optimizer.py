"""
Adam optimizer

Bias-corrected Adam with fixed hyperparameters (lr 2e-4, beta1 0.5,
beta2 0.999, eps 1e-8 by default). The arithmetic of one update runs in
float64; moments and parameters are stored back as float32, so a checkpoint
of the float32 state resumes bit-exactly.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from services.cli.run_config import AdamConfig
from services.common.exceptions import ContractError, DimensionError
from services.engine.tensor import DEFAULT_DTYPE
from services.model.module import Parameter

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First/second moments keyed by parameter name, plus the step counter"""

    config: AdamConfig = field(default_factory=AdamConfig)
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    v: Dict[str, np.ndarray] = field(default_factory=OrderedDict)

    def ensure(self, name: str, shape: Tuple[int, ...]) -> None:
        if name not in self.m:
            self.m[name] = np.zeros(shape, dtype=DEFAULT_DTYPE)
            self.v[name] = np.zeros(shape, dtype=DEFAULT_DTYPE)
        elif self.m[name].shape != shape:
            raise DimensionError(f"Adam moments for {name} have the wrong shape",
                                 expected=shape, actual=self.m[name].shape)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
) -> None:
    """
    One bias-corrected Adam update of every array in `params`, in place

    Raises:
        ContractError: If a parameter has no gradient (the parameter is named)
        DimensionError: If a gradient's shape differs from its parameter's
    """
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            raise ContractError(f"Adam: parameter {name} has no gradient", parameter=name)
        if grad.shape != value.shape:
            raise DimensionError(f"Adam: gradient of {name} has the wrong shape",
                                 expected=value.shape, actual=grad.shape)

    cfg = state.config
    state.t += 1
    correction1 = 1.0 - cfg.beta1 ** state.t
    correction2 = 1.0 - cfg.beta2 ** state.t
    for name, value in params.items():
        state.ensure(name, value.shape)
        g = grads[name].astype(np.float64)
        m = cfg.beta1 * state.m[name].astype(np.float64) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name].astype(np.float64) + (1.0 - cfg.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        update = cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        value[...] = value.astype(np.float64) - update
        state.m[name][...] = m
        state.v[name][...] = v


class Adam:
    """
    Adam over a fixed, ordered set of named parameters

    Example:
        opt = Adam(generator.named_parameters(), AdamConfig())
        ...backward...
        opt.step()
    """

    def __init__(self, named_params: Sequence[Tuple[str, Parameter]], config: Optional[AdamConfig] = None):
        self.params: "OrderedDict[str, Parameter]" = OrderedDict(named_params)
        self.state = AdamState(config=config or AdamConfig())
        for name, param in self.params.items():
            self.state.ensure(name, param.shape)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None

    def step(self) -> None:
        adam_step(
            {name: p.data for name, p in self.params.items()},
            {name: p.grad for name, p in self.params.items()},
            self.state,
        )

    def state_records(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        """Moments as named float32 arrays: <prefix>.m.<param>, then <prefix>.v.<param>"""
        records: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name in self.params:
            records[f"{prefix}.m.{name}"] = self.state.m[name]
        for name in self.params:
            records[f"{prefix}.v.{name}"] = self.state.v[name]
        return records

    def load_state_records(self, prefix: str, records: Mapping[str, np.ndarray], t: int) -> None:
        for kind, store in (("m", self.state.m), ("v", self.state.v)):
            for name, param in self.params.items():
                key = f"{prefix}.{kind}.{name}"
                if key not in records:
                    raise ContractError(f"optimizer state is missing {key}", parameter=name)
                if records[key].shape != param.shape:
                    raise DimensionError(f"optimizer state {key} has the wrong shape",
                                         expected=param.shape, actual=records[key].shape)
                store[name] = np.array(records[key], dtype=DEFAULT_DTYPE)
        self.state.t = t
