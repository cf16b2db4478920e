"""
Adversarial training loop

One step = one discriminator update then one generator update:

1. generator forward on the step's tape
2. both discriminators score real pairs and detached fakes; d-Adam step
3. generator objective with the discriminators' parameters frozen, recorded
   on the generator's tape; g-Adam step

Everything random (weight init, data order) comes from named streams of the
run seed, so a (seed, config, dataset) triple reproduces the loss log byte
for byte, and a checkpoint taken mid-epoch resumes exactly.
"""

import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from services.cli.run_config import RunConfig
from services.common import metrics
from services.common.exceptions import ContractError, DatasetError, NonFiniteError
from services.common.logging_config import run_id_var
from services.data.dataset import Sample, iter_batches
from services.engine.rng import Rng
from services.engine.tensor import Tape, Tensor, backward
from services.gan.discriminator import PatchDiscriminator
from services.gan.extractors import get_extractor_registry
from services.gan.losses import COMPONENTS, discriminator_objective, generator_objective
from services.model.generator import Generator
from services.model.layers import init_weights
from services.model.module import Module
from workers.trainer.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from workers.trainer.evaluate import EVAL_COLUMNS, EvalResult, evaluate
from workers.trainer.optimizer import Adam

logger = logging.getLogger(__name__)

DATA_ORDER = "data-order"
LOSS_COLUMNS = ["epoch", "step", *COMPONENTS, "g_total", "d_total"]
LOSS_LOG = "loss.csv"
EVAL_LOG = "eval.csv"
LAST_CHECKPOINT = "last.pitr"

Batch = Tuple[np.ndarray, np.ndarray, np.ndarray]


def parameter_digest(*modules: Module) -> str:
    """Hash of every parameter value, in enumeration order"""
    h = hashlib.blake2b(digest_size=16)
    for module in modules:
        for name, param in module.named_parameters():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(param.data).tobytes())
    return h.hexdigest()


def format_row(values: Sequence) -> str:
    return ",".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in values) + "\n"


@dataclass
class TrainResult:
    epochs_completed: int
    global_step: int
    history: List[Dict[str, float]] = field(default_factory=list)
    evaluations: List[Tuple[int, EvalResult]] = field(default_factory=list)

    @property
    def final_eval(self) -> Optional[EvalResult]:
        return self.evaluations[-1][1] if self.evaluations else None


class Trainer:
    """
    Owns the generator, both discriminators, their optimizers and the data order

    Args:
        config: Resolved run config
        train_samples: Training split (normalised)
        test_samples: Held-out split for per-epoch evaluation (optional)
        out_dir: Where loss.csv, eval.csv, resolved.cfg and checkpoints go;
            None keeps everything in memory
        verify_isolation: Hash the parameters each half-step must not touch
    """

    def __init__(
        self,
        config: RunConfig,
        train_samples: Sequence[Sample],
        test_samples: Optional[Sequence[Sample]] = None,
        out_dir: Optional[Union[str, Path]] = None,
        verify_isolation: bool = True,
    ):
        if not train_samples:
            raise DatasetError("training split is empty")
        size = train_samples[0].aerial.shape[-1]
        if size != config.image_size:
            raise DatasetError(f"dataset images are {size}x{size} but image_size={config.image_size}")

        self.config = config
        self.train_samples = list(train_samples)
        self.test_samples = list(test_samples or [])
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.verify_isolation = verify_isolation

        self.rng = Rng(config.seed)
        init_rng = Rng(config.seed)
        self.generator = Generator(config.generator_config())
        init_weights(self.generator, init_rng)
        d_config = config.discriminator_config()
        self.d_direct = PatchDiscriminator(d_config).assign_names("d_direct")
        self.d_final = PatchDiscriminator(d_config).assign_names("d_final")
        init_weights(self.d_direct, init_rng)
        init_weights(self.d_final, init_rng)

        self.extractor = get_extractor_registry().create(config.perceptual_extractor, seed=config.perceptual_seed)
        self.weights = config.loss_weights()
        adam = config.adam_config()
        self.adam_g = Adam(list(self.generator.named_parameters()), adam)
        self.adam_d = Adam(
            list(self.d_direct.named_parameters("d_direct."))
            + list(self.d_final.named_parameters("d_final.")),
            adam,
        )

        self.epoch = 0
        self.batch = 0
        self.global_step = 0
        self._epoch_order_state: Optional[dict] = None
        self._order: Optional[np.ndarray] = None

    # ---- one step ----

    def _check_finite(self, step: int, values: Dict[str, Tensor]) -> None:
        for name, tensor in values.items():
            if not np.all(np.isfinite(tensor.data)):
                raise NonFiniteError(
                    f"non-finite {name} loss at step {step}", op="train_step", step=step, component=name
                )

    def _check_untouched(self, before: Optional[str], modules: Tuple[Module, ...], what: str) -> None:
        if before is not None and parameter_digest(*modules) != before:
            raise ContractError(f"{what} parameters changed during the other network's update")

    def train_step(self, batch: Batch) -> Dict[str, float]:
        """
        One discriminator update then one generator update

        Returns:
            l1, cgan_g, tv, per, g_total, d_total as floats

        Raises:
            NonFiniteError: If any loss is NaN/Inf (names the step and component)
        """
        aerial, semantic, real = (Tensor(a) for a in batch)
        step = self.global_step + 1
        discriminators = (self.d_direct, self.d_final)

        with Tape() as g_tape:
            fake_direct, fake_final = self.generator(aerial, semantic)

        g_digest = parameter_digest(self.generator) if self.verify_isolation else None
        self.adam_d.zero_grad()
        with Tape() as d_tape:
            d_total = discriminator_objective(
                aerial, real, fake_direct.detach(), fake_final.detach(), self.d_direct, self.d_final
            )
        self._check_finite(step, {"d_total": d_total})
        backward(d_total, d_tape)
        self.adam_d.step()
        self._check_untouched(g_digest, (self.generator,), "generator")

        d_digest = parameter_digest(*discriminators) if self.verify_isolation else None
        self.adam_g.zero_grad()
        with self.d_direct.frozen(), self.d_final.frozen():
            with g_tape:
                g_total, components = generator_objective(
                    aerial, real, fake_direct, fake_final,
                    self.d_direct, self.d_final, self.extractor, self.weights,
                )
            self._check_finite(step, {**components, "g_total": g_total})
            backward(g_total, g_tape)
        self.adam_g.step()
        self._check_untouched(d_digest, discriminators, "discriminator")

        values = {name: components[name].item() for name in COMPONENTS}
        values["g_total"] = g_total.item()
        values["d_total"] = d_total.item()
        return values

    # ---- epochs ----

    def _epoch_order(self) -> np.ndarray:
        stream = self.rng.stream(DATA_ORDER)
        self._epoch_order_state = self.rng.get_state(DATA_ORDER)
        return stream.permutation(len(self.train_samples))

    def fit(self, epochs: Optional[int] = None, max_steps: Optional[int] = None) -> TrainResult:
        """
        Train until `epochs` epochs are complete (default: config.epochs) or
        the global step reaches `max_steps`

        Continues from the current position, so a restored trainer picks up
        mid-epoch where its checkpoint was taken.
        """
        total_epochs = epochs or self.config.epochs
        run_id_var.set(f"{self.config.variant}-seed{self.config.seed}")
        self._start_logs()
        result = TrainResult(epochs_completed=self.epoch, global_step=self.global_step)
        per_epoch = (len(self.train_samples) + self.config.batch_size - 1) // self.config.batch_size
        logger.info(
            f"Training variant {self.config.variant}: {len(self.train_samples)} samples, "
            f"{per_epoch} steps/epoch, epochs {self.epoch + 1}..{total_epochs}"
        )

        while self.epoch < total_epochs:
            # stop before drawing the next order so a checkpoint here replays it
            if max_steps is not None and self.global_step >= max_steps:
                break
            order = self._epoch_order()
            for index, batch in iter_batches(self.train_samples, order, self.config.batch_size, self.batch):
                if max_steps is not None and self.global_step >= max_steps:
                    break
                started = time.perf_counter()
                values = self.train_step(batch)
                self.global_step += 1
                self.batch = index + 1
                self._record_step(values, time.perf_counter() - started)
                result.history.append({"epoch": self.epoch + 1, "step": self.global_step, **values})
            else:
                self.epoch += 1
                self.batch = 0
                self._end_epoch(result)
                continue
            break

        result.epochs_completed, result.global_step = self.epoch, self.global_step
        if self.out_dir is not None:
            self.save(self.out_dir / LAST_CHECKPOINT)
        return result

    def _record_step(self, values: Dict[str, float], seconds: float) -> None:
        epoch = self.epoch + 1
        row = [epoch, self.global_step] + [values[c] for c in LOSS_COLUMNS[2:]]
        if self.out_dir is not None:
            with open(self.out_dir / LOSS_LOG, "a", encoding="utf-8") as fh:
                fh.write(format_row(row))
        metrics.train_steps_total.labels(variant=self.config.variant).inc()
        metrics.train_step_seconds.observe(seconds)
        metrics.record_losses(values)
        logger.info(
            f"epoch {epoch} step {self.global_step} "
            + " ".join(f"{k}={values[k]:.6f}" for k in LOSS_COLUMNS[2:]),
            extra={"epoch": epoch, "step": self.global_step, **values},
        )

    def _end_epoch(self, result: TrainResult) -> None:
        cfg = self.config
        if self.test_samples and cfg.eval_every and self.epoch % cfg.eval_every == 0:
            evaluation = evaluate(self.generator, self.test_samples, cfg.batch_size)
            result.evaluations.append((self.epoch, evaluation))
            if self.out_dir is not None:
                with open(self.out_dir / EVAL_LOG, "a", encoding="utf-8") as fh:
                    fh.write(format_row([self.epoch] + [getattr(evaluation, c) for c in EVAL_COLUMNS]))
        if self.out_dir is not None:
            if self.epoch % cfg.checkpoint_every == 0:
                self.save(self.out_dir / f"ckpt_epoch_{self.epoch}.pitr")
            self.save(self.out_dir / LAST_CHECKPOINT)

    def _start_logs(self) -> None:
        """Create (or, after a resume, trim) the CSV logs and write resolved.cfg"""
        text = self.config.canonical_text()
        logger.info(f"Resolved config:\n{text}")
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "resolved.cfg").write_text(text, encoding="utf-8")
        _trim_log(self.out_dir / LOSS_LOG, LOSS_COLUMNS, keep=lambda row: int(row[1]) <= self.global_step)
        _trim_log(self.out_dir / EVAL_LOG, ["epoch", *EVAL_COLUMNS], keep=lambda row: int(row[0]) <= self.epoch)

    # ---- checkpoints ----

    def to_checkpoint(self) -> Checkpoint:
        tensors = {}
        for prefix, module in (("generator", self.generator), ("d_direct", self.d_direct),
                               ("d_final", self.d_final)):
            tensors.update({f"{prefix}.{k}": v for k, v in module.state_dict().items()})
        tensors.update(self.adam_g.state_records("adam_g"))
        tensors.update(self.adam_d.state_records("adam_d"))

        # mid-epoch, the data order is replayed from the epoch's start
        snapshot = Rng(self.rng.seed)
        if self.batch > 0 and self._epoch_order_state is not None:
            snapshot.set_state(DATA_ORDER, self._epoch_order_state)
        else:
            snapshot.set_state(DATA_ORDER, self.rng.get_state(DATA_ORDER))

        return Checkpoint(
            config_text=self.config.model_blob(),
            epoch=self.epoch,
            batch=self.batch,
            global_step=self.global_step,
            optimizer_steps={"g": self.adam_g.state.t, "d": self.adam_d.state.t},
            tensors=tensors,
            rng_json=snapshot.to_json(),
        )

    def save(self, path: Union[str, Path]) -> None:
        save_checkpoint(path, self.to_checkpoint())
        metrics.checkpoints_total.inc()

    def restore(self, ckpt: Checkpoint) -> None:
        """Load weights, optimizer moments, counters and the data-order stream"""
        self.generator.load_state_dict(ckpt.subset("generator"))
        self.d_direct.load_state_dict(ckpt.subset("d_direct"))
        self.d_final.load_state_dict(ckpt.subset("d_final"))
        self.adam_g.load_state_records("adam_g", ckpt.tensors, ckpt.optimizer_steps["g"])
        self.adam_d.load_state_records("adam_d", ckpt.tensors, ckpt.optimizer_steps["d"])
        self.rng = Rng.from_json(ckpt.rng_json)
        self.epoch, self.batch, self.global_step = ckpt.epoch, ckpt.batch, ckpt.global_step
        self._epoch_order_state = None
        logger.info(f"Restored checkpoint at epoch {self.epoch}, batch {self.batch}, step {self.global_step}")

    def resume(self, path: Union[str, Path]) -> None:
        self.restore(load_checkpoint(path, expected_config=self.config.model_blob()))


def _trim_log(path: Path, columns: Sequence[str], keep) -> None:
    """Write the header if missing; drop rows past the current position"""
    header = ",".join(columns) + "\n"
    if not path.exists():
        path.write_text(header, encoding="utf-8")
        return
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    rows = [line for line in lines[1:] if line.strip() and keep(line.strip().split(","))]
    path.write_text(header + "".join(rows), encoding="utf-8")
