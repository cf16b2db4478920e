"""
Finite-difference gradient checking

The analytic gradient is taken from the tape at working precision (float32).
The numeric reference uses central differences with the whole forward pass
upcast to float64, so the comparison measures the backward implementation
rather than float32 cancellation error.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from services.common.exceptions import ContractError, NonFiniteError
from services.engine.tensor import Tape, Tensor, backward, compute_dtype, no_grad

logger = logging.getLogger(__name__)

MAX_PROBE_ELEMENTS = 1000
EPS_RANGE = (1e-4, 1e-2)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(1, |n|), elementwise"""
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def numeric_gradient(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar f at x, evaluated in float64"""
    original = x.data
    base = original.astype(np.float64)
    grad = np.zeros_like(base)
    try:
        with no_grad(), compute_dtype(np.float64):
            for flat in range(base.size):
                index = np.unravel_index(flat, base.shape)
                probe = base.copy()
                probe[index] += eps
                x.data = probe
                f_plus = float(np.sum(f(x).data))
                probe[index] -= 2 * eps
                f_minus = float(np.sum(f(x).data))
                value = (f_plus - f_minus) / (2 * eps)
                if not np.isfinite(value):
                    raise NonFiniteError(
                        f"Non-finite finite difference at index {tuple(int(i) for i in index)}",
                        op="gradcheck",
                        index=index,
                    )
                grad[index] = value
    finally:
        x.data = original
    return grad


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """
    Compare the tape gradient of scalar `f` at `x` against central differences

    Args:
        f: Function of one tensor returning a scalar tensor
        x: Probe input (at most 1000 elements)
        eps: Finite-difference step in [1e-4, 1e-2]

    Returns:
        Max elementwise relative error |a - n| / max(1, |n|)

    Raises:
        ContractError: If eps is out of range, x is too large or f is not scalar
        NonFiniteError: If any finite difference is NaN/Inf (index reported)
    """
    if not EPS_RANGE[0] <= eps <= EPS_RANGE[1]:
        raise ContractError(f"gradcheck eps must lie in {EPS_RANGE}, got {eps}")
    if x.size > MAX_PROBE_ELEMENTS:
        raise ContractError(f"gradcheck probe has {x.size} elements (max {MAX_PROBE_ELEMENTS})")

    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad, x.grad = True, None
    try:
        with Tape() as tape:
            out = f(x)
        if out.size != 1:
            raise ContractError(f"gradcheck needs a scalar function, got shape {out.shape}")
        if out.op is None:
            analytic = np.zeros(x.shape, dtype=np.float64)
        else:
            backward(out, tape)
            analytic = (x.grad if x.grad is not None else np.zeros(x.shape)).astype(np.float64)
        numeric = numeric_gradient(f, x, eps)
    finally:
        x.requires_grad, x.grad = saved_flag, saved_grad

    error = float(relative_error(analytic, numeric).max()) if x.size else 0.0
    logger.debug(f"gradcheck on shape {x.shape}: max relative error {error:.3e}")
    return error


# ============ Probe suites ============

@dataclass
class Probe:
    """A named scalar function and the input it is checked at"""

    name: str
    fn: Callable[[Tensor], Tensor]
    make_input: Callable[[np.random.Generator], Tensor]
    tolerance: Optional[float] = None  # overrides the suite tolerance


@dataclass
class ProbeResult:
    name: str
    seed: int
    max_error: float
    passed: bool


def run_probes(
    probes: Sequence[Probe],
    seeds: Sequence[int],
    eps: float = 1e-3,
    tolerance: float = 1e-2,
) -> List[ProbeResult]:
    """Run every probe once per seed; inputs come from a per-seed generator"""
    results: List[ProbeResult] = []
    for probe in probes:
        for seed in seeds:
            gen = np.random.default_rng([int(seed), len(results)])
            error = gradcheck(probe.fn, probe.make_input(gen), eps)
            limit = probe.tolerance if probe.tolerance is not None else tolerance
            results.append(ProbeResult(probe.name, int(seed), error, error <= limit))
            logger.info(f"gradcheck {probe.name} seed={seed}: {error:.3e}")
    return results
