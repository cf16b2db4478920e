"""
Ablation runs: every variant under every seed, same data and protocol
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import pandas as pd

from services.cli.run_config import RunConfig
from services.data.dataset import Sample
from services.model.generator import VARIANTS, resolve_variant
from workers.trainer.evaluate import evaluate
from workers.trainer.trainer import Trainer

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = ["variant", "seed", "l1_direct", "l1_final", "psnr_direct", "psnr_final"]
# weakest to strongest; held-out L1 should not increase along this order
EXPECTED_ORDER = ("A", "E", "F")


@dataclass
class AblationResult:
    table: pd.DataFrame
    medians: pd.DataFrame

    def ordering_holds(self, metric: str = "l1_final") -> bool:
        """True when median `metric` is F <= E <= A over the variants present"""
        present = [v for v in EXPECTED_ORDER if v in self.medians.index]
        values = [self.medians.loc[v, metric] for v in present]
        return all(later <= earlier for earlier, later in zip(values, values[1:]))

    def format(self) -> str:
        lines = [
            self.table.to_string(index=False, float_format=lambda v: f"{v:.6f}"),
            "",
            "median over seeds:",
            self.medians.to_string(float_format=lambda v: f"{v:.6f}"),
            "",
            f"ordering F <= E <= A on held-out L1: {'yes' if self.ordering_holds() else 'no'}",
        ]
        return "\n".join(lines)


def run_ablation(
    config: RunConfig,
    train_samples: Sequence[Sample],
    test_samples: Sequence[Sample],
    variants: Iterable[str] = tuple(VARIANTS),
    seeds: Iterable[int] = (0, 1, 2),
    epochs: Optional[int] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> AblationResult:
    """
    Train each (variant, seed) pair from scratch and evaluate on `test_samples`

    Each run gets its own sub-directory `<out_dir>/<variant>_seed<seed>` when
    `out_dir` is given.

    Returns:
        AblationResult with one row per run and per-variant medians
    """
    rows = []
    letters = [resolve_variant(v) for v in variants]
    for variant in letters:
        for seed in seeds:
            run_config = config.model_copy(update={"variant": variant, "seed": int(seed)})
            run_dir = Path(out_dir) / f"{variant}_seed{seed}" if out_dir is not None else None
            logger.info(f"Ablation run variant={variant} seed={seed}")
            trainer = Trainer(run_config, train_samples, test_samples, out_dir=run_dir)
            result = trainer.fit(epochs=epochs)
            evaluation = result.final_eval
            if evaluation is None:
                evaluation = evaluate(trainer.generator, test_samples, run_config.batch_size)
            rows.append({"variant": variant, "seed": int(seed), **evaluation.values()})

    table = pd.DataFrame(rows, columns=ABLATION_COLUMNS)
    medians = table.groupby("variant")[ABLATION_COLUMNS[2:]].median()
    result = AblationResult(table=table, medians=medians)
    logger.info(f"Ablation finished: {len(rows)} runs, ordering holds={result.ordering_holds()}")
    return result
