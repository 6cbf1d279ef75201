"""Two-phase training loop, loss logging, checkpoints and held-out evaluation."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import GroundTruth, Scene, build_targets
from .errors import ContractError, TrainingDivergedError
from .losses import (
    LossConfig,
    angle_loss,
    detection_loss,
    matching_loss,
    segmentation_loss,
    teacher_forced_polygons,
)
from .metrics import EvalReport, evaluate
from .model import ModelConfig, PolygonNet, predict
from .optim import Adam, AdamConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "epoch", "phase", "detection", "matching", "angle", "segmentation", "total", "seconds"]
EPOCH_FIELDS = ["epoch", "steps", "detection", "matching", "angle", "segmentation", "total"]


@dataclass
class TrainConfig:
    detection_steps: int = 1000
    full_steps: int = 3000
    batch_size: int = 4
    lr: float = 1e-3
    lr_decay_at: float = 0.8  # fraction of the full phase after which lr drops 10x
    clip_norm: float | None = 100.0
    match_cap_px: float = 3.0
    greedy_targets: bool = False
    checkpoint_every: int = 500
    log_every: int = 50
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self) -> None:
        if isinstance(self.loss, dict):
            d = dict(self.loss)
            d["weights"] = tuple(d.get("weights", (1.0, 1.0, 1.0, 1.0)))
            self.loss = LossConfig(**d)
        if self.detection_steps < 0 or self.full_steps < 0 or self.batch_size < 1:
            raise ContractError("step counts must be >= 0 and batch_size >= 1")

    @property
    def total_steps(self) -> int:
        return self.detection_steps + self.full_steps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"]["weights"] = list(self.loss.weights)
        return d


@dataclass
class StepResult:
    phase: int
    terms: dict[str, float]
    total: float


class Trainer:
    """Owns model, optimizer, data order and step counter; all restorable from a checkpoint."""

    def __init__(self, model: PolygonNet, scenes: Sequence[Scene], config: TrainConfig):
        if not scenes:
            raise ContractError("no training scenes")
        self.model = model
        self.scenes = list(scenes)
        self.config = config
        self.optimizer = Adam(model.parameters(), AdamConfig(lr=config.lr, clip_norm=config.clip_norm))
        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        self._order = np.zeros(0, dtype=np.int64)
        self._cursor = 0
        self.epoch = 0

    # data order ---------------------------------------------------------------
    def _next_batch(self) -> list[Scene]:
        out = []
        while len(out) < self.config.batch_size:
            if self._cursor >= self._order.size:
                self._order = self.rng.permutation(len(self.scenes))
                self._cursor = 0
                self.epoch += 1
            out.append(self.scenes[self._order[self._cursor]])
            self._cursor += 1
        return out

    def _lr_at(self, step: int) -> float:
        cfg = self.config
        if step >= cfg.detection_steps + cfg.lr_decay_at * cfg.full_steps and cfg.full_steps:
            return cfg.lr * 0.1
        return cfg.lr

    # losses -------------------------------------------------------------------
    def compute_losses(self, batch: Sequence[Scene], phase: int) -> tuple[Tensor, dict[str, Tensor]]:
        cfg = self.config.loss
        images = np.stack([s.image for s in batch])
        heat_target = np.stack([s.corner_heatmap() for s in batch])
        if phase == 1:
            _, heatmap = self.model.backbone(images)
            det = detection_loss(heatmap, heat_target, cfg.omega, cfg.detection_reduction)
            return det * cfg.weights[0], {"detection": det}
        out = self.model(images)
        det = detection_loss(out.heatmap, heat_target, cfg.omega, cfg.detection_reduction)
        targets: list[GroundTruth] = [
            build_targets(
                s,
                out.vertices.positions[b],
                out.vertices.valid[b],
                cap_px=self.config.match_cap_px,
                greedy=self.config.greedy_targets,
            )
            for b, s in enumerate(batch)
        ]
        match = matching_loss(out.assignment, np.stack([t.perm.next_clockwise for t in targets]))
        angle, seg = Tensor(0.0), Tensor(0.0)
        for b, t in enumerate(targets):
            pred_rings = teacher_forced_polygons(out.refined.positions[b], t.rings)
            gt_rings = [t.positions[list(r)] for r in t.rings]
            angle = angle + angle_loss(pred_rings, gt_rings, cfg.sigma)
            seg = seg + segmentation_loss(pred_rings, t.mask, cfg.lam, cfg.mask_combine, cfg.raster_frame)
        terms = {"detection": det, "matching": match, "angle": angle, "segmentation": seg}
        total = Tensor(0.0)
        for w, key in zip(cfg.weights, ("detection", "matching", "angle", "segmentation")):
            if w:
                total = total + terms[key] * w
        return total, terms

    def train_step(self) -> StepResult:
        phase = 1 if self.step < self.config.detection_steps else 2
        batch = self._next_batch()
        self.optimizer.config.lr = self._lr_at(self.step)
        self.optimizer.zero_grad()
        total, terms = self.compute_losses(batch, phase)
        if not math.isfinite(total.item()):
            raise TrainingDivergedError(f"non-finite loss at step {self.step}: {self._dump(batch)}")
        total.backward()
        self.optimizer.step()
        self.step += 1
        return StepResult(phase, {k: v.item() for k, v in terms.items()}, total.item())

    def _dump(self, batch: Sequence[Scene]) -> str:
        path = Path(self.dump_dir) / f"nan_step{self.step:06d}.npz" if getattr(self, "dump_dir", None) else None
        if path is None:
            return "no dump directory set"
        np.savez(
            path,
            images=np.stack([s.image for s in batch]),
            image_ids=np.array([s.image_id for s in batch]),
        )
        return f"batch dumped to {path}"

    # checkpoints ----------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"param.{k}": p.data for k, p in self.model.parameters().items()}
        arrays.update(self.optimizer.state_arrays())
        arrays["trainer.order"] = self._order.astype(np.float64)
        return arrays

    def save(self, path: str | Path) -> None:
        meta = {
            "step": self.step,
            "epoch": self.epoch,
            "cursor": self._cursor,
            "adam_step": self.optimizer.state.step,
            "rng": self.rng.bit_generator.state,
            "model": self.model.config.to_flat(),
            "train": self.config.to_dict(),
        }
        save_checkpoint(path, self.state_arrays(), meta)

    def restore(self, path: str | Path) -> None:
        arrays, meta = load_checkpoint(path)
        self.model.load_arrays({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
        self.optimizer.load_state_arrays(arrays, meta["adam_step"])
        self._order = arrays["trainer.order"].astype(np.int64)
        self._cursor = meta["cursor"]
        self.epoch = meta["epoch"]
        self.step = meta["step"]
        self.rng.bit_generator.state = meta["rng"]

    # loop ------------------------------------------------------------------------
    def run(
        self,
        out_dir: str | Path | None = None,
        until: int | None = None,
        callback: Callable[[int, StepResult], None] | None = None,
    ) -> list[StepResult]:
        """Train up to step ``until`` (default: the configured total)."""
        until = self.config.total_steps if until is None else until
        out = Path(out_dir) if out_dir is not None else None
        writer = fh = None
        epoch_writer = efh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            self.dump_dir = out
            log_path = out / "loss_log.csv"
            epoch_path = out / "epoch_log.csv"
            new = not log_path.exists() or self.step == 0
            fh = open(log_path, "w" if new else "a", newline="", encoding="utf-8")
            efh = open(epoch_path, "w" if new or not epoch_path.exists() else "a", newline="", encoding="utf-8")
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            epoch_writer = csv.DictWriter(efh, fieldnames=EPOCH_FIELDS)
            if new:
                writer.writeheader()
                epoch_writer.writeheader()
        results = []
        epoch_rows: list[StepResult] = []
        epoch_seen = self.epoch
        start = time.perf_counter()

        def flush_epoch() -> None:
            if epoch_writer is None or not epoch_rows:
                return
            row = {"epoch": epoch_seen, "steps": len(epoch_rows)}
            for key in EPOCH_FIELDS[2:6]:
                vals = [r.terms[key] for r in epoch_rows if key in r.terms]
                row[key] = float(np.mean(vals)) if vals else ""
            row["total"] = float(np.mean([r.total for r in epoch_rows]))
            epoch_writer.writerow(row)
            epoch_rows.clear()

        try:
            while self.step < until:
                res = self.train_step()
                results.append(res)
                if self.epoch != epoch_seen:
                    flush_epoch()
                    epoch_seen = self.epoch
                epoch_rows.append(res)
                if writer is not None:
                    row = {"step": self.step, "epoch": self.epoch, "phase": res.phase, "total": res.total}
                    row.update({k: res.terms.get(k, "") for k in LOG_FIELDS[3:7]})
                    row["seconds"] = round(time.perf_counter() - start, 3)
                    writer.writerow(row)
                if self.config.log_every and self.step % self.config.log_every == 0:
                    log.info(
                        "step %d phase %d total %.4f %s",
                        self.step,
                        res.phase,
                        res.total,
                        " ".join(f"{k}={v:.4f}" for k, v in res.terms.items()),
                    )
                if out is not None and self.config.checkpoint_every and self.step % self.config.checkpoint_every == 0:
                    self.save(out / "checkpoint.bin")
                if callback is not None:
                    callback(self.step, res)
            flush_epoch()
        finally:
            for handle in (fh, efh):
                if handle is not None:
                    handle.close()
        if out is not None:
            self.save(out / "checkpoint.bin")
        return results


def load_model(path: str | Path) -> PolygonNet:
    """Model from a training checkpoint (or a bare parameter checkpoint)."""
    arrays, meta = load_checkpoint(path)
    if "model" not in meta:
        raise ContractError(f"{path}: checkpoint has no model configuration")
    model = PolygonNet(ModelConfig.from_flat(meta["model"]))
    model.load_arrays({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
    return model


def evaluate_model(
    model: PolygonNet,
    scenes: Sequence[Scene],
    batch_size: int = 16,
    use_offsets: bool = True,
    score_mode: str = "both",
) -> EvalReport:
    preds = []
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i : i + batch_size]
        preds.extend(
            predict(model, np.stack([s.image for s in chunk]), use_offsets=use_offsets, score_mode=score_mode)
        )
    shape = (scenes[0].height, scenes[0].width)
    return evaluate([(p.polygons, p.confidences) for p in preds], [s.gt_polygons for s in scenes], shape)


def save_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
