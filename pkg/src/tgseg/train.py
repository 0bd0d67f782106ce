"""Training loop, evaluation and frozen-weight bookkeeping."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import backward, checkpoint, no_grad
from .autodiff.nn import Adam
from .config import ExperimentConfig
from .data import SampleRecord, load_dataset
from .decoder import predict_mask, seg_loss
from .encoders import FrozenEncoders, TextConfig, VitConfig, load_encoders
from .metrics import MetricsReport, batch_metrics
from .model import Batch, SegModel, TextFeatures, encode_frozen

log = logging.getLogger(__name__)

EVAL_BATCH = 16


class FrozenMutationError(RuntimeError):
    """A frozen encoder tensor changed or received a gradient."""


class NonFiniteLossError(FloatingPointError):
    pass


class FeatureCache:
    """Per-sample frozen-encoder outputs, computed once.

    The frozen encoders are deterministic and never updated, so their outputs
    for a given sample never change.
    """

    def __init__(self, enc: FrozenEncoders, records: Sequence[SampleRecord], chunk: int = 32):
        self.records = list(records)
        self.images = np.stack([r.image for r in self.records]).astype(np.float32)
        self.masks = np.stack([r.mask for r in self.records])
        parts = []
        for s in range(0, len(self.records), chunk):
            recs = self.records[s:s + chunk]
            parts.append(encode_frozen(
                enc, self.images[s:s + chunk],
                np.stack([r.prompts.primary_ids for r in recs]),
                np.stack([r.prompts.auxiliary_ids for r in recs]),
                np.stack([r.prompts.concatenated_ids() for r in recs])))
        self.f_clip = np.concatenate([p[0] for p in parts])
        self.text = TextFeatures(*(np.concatenate([getattr(p[1], f) for p in parts])
                                   for f in TextFeatures.__dataclass_fields__))

    def __len__(self) -> int:
        return len(self.records)

    def batch(self, idx: np.ndarray) -> Batch:
        t = TextFeatures(*(getattr(self.text, f)[idx] for f in TextFeatures.__dataclass_fields__))
        return Batch(self.images[idx], self.f_clip[idx], t)


@dataclass
class RunResult:
    best_mdice: float
    best_step: int
    history: list[dict] = field(default_factory=list)
    wallclock: float = 0.0
    steps_run: int = 0
    out_dir: Path | None = None
    # (step, seconds since the run started) per validation point; kept out of the log
    val_times: list[tuple[int, float]] = field(default_factory=list)


def build_encoders(cfg: ExperimentConfig) -> FrozenEncoders:
    """Load the frozen encoder checkpoint, or a random frozen pair if none is set."""
    if cfg.encoders.checkpoint:
        return load_encoders(cfg.encoders.checkpoint)
    return FrozenEncoders(VitConfig(), TextConfig(), seed=cfg.encoders.seed).freeze()


def evaluate(model: SegModel, cache: FeatureCache, idx: np.ndarray | None = None) -> tuple[MetricsReport, float]:
    """Per-sample metrics and the mean loss over ``idx`` (default: all samples)."""
    idx = np.arange(len(cache)) if idx is None else np.asarray(idx)
    report = MetricsReport()
    losses = []
    with no_grad():
        for s in range(0, len(idx), EVAL_BATCH):
            sel = idx[s:s + EVAL_BATCH]
            logits = model(cache.batch(sel))
            losses.append(float(seg_loss(logits, cache.masks[sel]).item()) * len(sel))
            d, i = batch_metrics(predict_mask(logits)[:, 0], cache.masks[sel])
            report.dice.extend(d.tolist())
            report.iou.extend(i.tolist())
    return report, float(np.sum(losses) / max(len(idx), 1))


def predict(model: SegModel, cache: FeatureCache, idx: np.ndarray | None = None) -> np.ndarray:
    idx = np.arange(len(cache)) if idx is None else np.asarray(idx)
    out = []
    with no_grad():
        for s in range(0, len(idx), EVAL_BATCH):
            out.append(predict_mask(model(cache.batch(idx[s:s + EVAL_BATCH])))[:, 0])
    return np.concatenate(out)


def check_frozen(model: SegModel, snapshot: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        if name not in snapshot:
            continue
        if p.grad is not None or p.requires_grad:
            raise FrozenMutationError(f"frozen tensor {name} is trainable or holds a gradient")
        if p.data.dtype != snapshot[name].dtype or p.data.tobytes() != snapshot[name].tobytes():
            raise FrozenMutationError(f"frozen tensor {name} changed during training")


def _line(step: int, split: str, mdice: float, miou: float, loss: float) -> str:
    return json.dumps({"step": step, "split": split, "mDice": round(mdice, 6), "mIoU": round(miou, 6),
                       "loss": round(loss, 6)})


def load_split_caches(cfg: ExperimentConfig, enc: FrozenEncoders) -> tuple[FeatureCache, FeatureCache]:
    train_recs = list(load_dataset(cfg.data.path, "train"))
    val_recs = list(load_dataset(cfg.data.path, "val"))
    if cfg.train.val_limit:
        val_recs = val_recs[:cfg.train.val_limit]
    return FeatureCache(enc, train_recs), FeatureCache(enc, val_recs)


def train(cfg: ExperimentConfig, out_dir: str | Path, encoders: FrozenEncoders | None = None,
          caches: tuple[FeatureCache, FeatureCache] | None = None,
          until_mdice: float | None = None) -> RunResult:
    """Optimize the trainable modules; write ``metrics.jsonl`` and ``best.tgcl``.

    ``until_mdice`` ends the run at the first validation point reaching that
    value (used by the acceptance harness to bound wall time).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    enc = encoders if encoders is not None else build_encoders(cfg)
    train_cache, val_cache = caches if caches is not None else load_split_caches(cfg, enc)
    model = SegModel(cfg.model, enc, seed=cfg.train.seed)
    snapshot = {k: v.copy() for k, v in model.frozen_state().items()}
    tc = cfg.train
    opt = Adam(model.trainable_parameters(), lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)
    rng = np.random.default_rng(tc.seed)
    (out / "config.json").write_text(cfg.to_json())

    lines: list[str] = []
    history: list[dict] = []
    val_times: list[tuple[int, float]] = []
    best = (-1.0, -1)
    log_path = out / "metrics.jsonl"
    log_path.write_text("")

    def emit(line: str) -> None:
        lines.append(line)
        history.append(json.loads(line))
        with log_path.open("a") as fh:
            fh.write(line + "\n")

    def validate(step: int) -> float:
        nonlocal best
        rep, loss = evaluate(model, val_cache)
        emit(_line(step, "val", rep.mdice, rep.miou, loss))
        val_times.append((step, time.perf_counter() - t0))
        if rep.mdice > best[0]:
            best = (rep.mdice, step)
            checkpoint.save(out / "best.tgcl", model.state_dict())
        log.info("step %d val mDice %.4f mIoU %.4f loss %.4f", step, rep.mdice, rep.miou, loss)
        return rep.mdice

    first = validate(0)
    reached = until_mdice is not None and first >= until_mdice
    order = np.empty(0, dtype=np.int64)
    pos = 0
    run_loss, run_d, run_i = [], [], []
    step = 0
    while step < tc.steps and not reached:
        if pos + tc.batch > len(order):
            order = rng.permutation(len(train_cache))
            pos = 0
        sel = np.sort(order[pos:pos + tc.batch])
        pos += tc.batch
        opt.zero_grad()
        logits = model(train_cache.batch(sel))
        loss = seg_loss(logits, train_cache.masks[sel])
        value = float(loss.item())
        if not np.isfinite(value):
            seeds = [int(train_cache.records[i].seed) for i in sel]
            (out / "nonfinite_batch.json").write_text(json.dumps({"step": step + 1, "seeds": seeds}))
            raise NonFiniteLossError(f"non-finite loss at step {step + 1}; batch seeds {seeds}")
        backward(loss)
        opt.step()
        step += 1
        check_frozen(model, snapshot)
        run_loss.append(value)
        d, i = batch_metrics(predict_mask(logits)[:, 0], train_cache.masks[sel])
        run_d.extend(d.tolist())
        run_i.extend(i.tolist())
        if step % tc.eval_every == 0 or step == tc.steps:
            emit(_line(step, "train", float(np.mean(run_d)), float(np.mean(run_i)), float(np.mean(run_loss))))
            run_loss, run_d, run_i = [], [], []
            mdice = validate(step)
            reached = until_mdice is not None and mdice >= until_mdice

    check_frozen(model, snapshot)
    checkpoint.save(out / "last.tgcl", model.state_dict())
    enc_state = {k[len("frozen."):]: v for k, v in model.frozen_state().items()}
    checkpoint.save(out / "encoders.tgcl", enc_state)
    wall = time.perf_counter() - t0
    (out / "summary.json").write_text(json.dumps(
        {"best_mDice": best[0], "best_step": best[1], "steps_run": step}, indent=2))
    # wall time lives apart so every other output is byte-reproducible
    (out / "timing.json").write_text(json.dumps({"wallclock_s": round(wall, 2)}))
    return RunResult(best[0], best[1], history, wall, step, out, val_times)


def load_model(cfg: ExperimentConfig, ckpt: str | Path, encoders: FrozenEncoders | None = None) -> SegModel:
    enc = encoders if encoders is not None else build_encoders(cfg)
    model = SegModel(cfg.model, enc, seed=cfg.train.seed)
    state = checkpoint.load(ckpt)
    frozen = model.frozen_state()
    for k, v in frozen.items():
        if k in state and state[k].tobytes() != v.tobytes():
            raise FrozenMutationError(f"checkpoint frozen tensor {k} differs from the encoder weights")
    model.load_state_dict(state)
    return model
