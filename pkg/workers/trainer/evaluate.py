"""
Held-out evaluation: pixel L1 and PSNR for both generator outputs
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Sequence

import numpy as np

from services.common.exceptions import DatasetError
from services.data.dataset import Sample, stack_batch
from services.engine.tensor import Tensor, no_grad
from services.model.generator import Generator

logger = logging.getLogger(__name__)

EVAL_COLUMNS = ["l1_direct", "l1_final", "psnr_direct", "psnr_final"]
PSNR_CAP = 100.0


@dataclass
class EvalResult:
    l1_direct: float
    l1_final: float
    psnr_direct: float
    psnr_final: float
    count: int

    def values(self) -> Dict[str, float]:
        out = asdict(self)
        out.pop("count")
        return out


def psnr(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-image PSNR in dB for b x 3 x H x W arrays in [-1, 1] (peak 1 after mapping to [0, 1])"""
    mse = np.mean(((pred - target) / 2.0) ** 2, axis=(1, 2, 3))
    with np.errstate(divide="ignore"):
        values = 10.0 * np.log10(1.0 / mse)
    return np.minimum(values, PSNR_CAP)


def evaluate(generator: Generator, samples: Sequence[Sample], batch_size: int = 4) -> EvalResult:
    """
    Mean L1 (in [-1, 1] units) and mean PSNR over `samples`

    The generator runs in eval mode (running batch-norm statistics) without a
    tape; its previous mode is restored.
    """
    if not samples:
        raise DatasetError("cannot evaluate on an empty split")
    was_training = generator.training
    generator.eval()
    l1 = {"direct": [], "final": []}
    scores = {"direct": [], "final": []}
    try:
        with no_grad():
            for start in range(0, len(samples), batch_size):
                aerial, semantic, ground = stack_batch(samples[start:start + batch_size])
                direct, fused = generator(Tensor(aerial), Tensor(semantic))
                for key, out in (("direct", direct.data), ("final", fused.data)):
                    diff = np.abs(out.astype(np.float64) - ground)
                    l1[key].extend(diff.mean(axis=(1, 2, 3)))
                    scores[key].extend(psnr(out.astype(np.float64), ground.astype(np.float64)))
    finally:
        generator.train(was_training)

    result = EvalResult(
        l1_direct=float(np.mean(l1["direct"])),
        l1_final=float(np.mean(l1["final"])),
        psnr_direct=float(np.mean(scores["direct"])),
        psnr_final=float(np.mean(scores["final"])),
        count=len(samples),
    )
    logger.info(
        f"eval on {result.count} samples: L1 direct={result.l1_direct:.4f} final={result.l1_final:.4f} "
        f"PSNR direct={result.psnr_direct:.2f} final={result.psnr_final:.2f}"
    )
    return result
