"""Optimisation loop: Adam with per-epoch cosine decay, CSV logging,
checkpoints that carry the optimiser state so a resumed run continues
bit-identically."""

import csv
import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .config import Config
from .data.formats import load_checkpoint, save_checkpoint
from .data.scan import Scan
from .losses import LossReport, matching_cost, report, set_criterion
from .matching import MatchResult, hungarian_match
from .model import Sample, ToothInstanceNet, prepare_sample

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "step", "total", "cls", "mask", "obj", "ibl")


class NonFiniteLossError(RuntimeError):
    def __init__(self, components):
        self.components = components
        dump = ", ".join(f"{k}={v!r}" for k, v in components.items())
        super().__init__(f"non-finite training loss ({dump})")


def make_optimizer(model: ToothInstanceNet, config: Config) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.train.learning_rate, weight_decay=config.train.weight_decay)


def cosine_lr(epoch: int, config: Config) -> float:
    t = config.train
    if t.epochs <= 1:
        return t.learning_rate
    frac = epoch / (t.epochs - 1)
    return t.min_learning_rate + 0.5 * (t.learning_rate - t.min_learning_rate) * (1.0 + math.cos(math.pi * frac))


def batch_loss(model: ToothInstanceNet, batch: Sequence[Sample]):
    """Mean criterion over the batch; returns (loss tensor, averaged components)."""
    cfg = model.config.loss
    totals, comps = [], {k: 0.0 for k in ("cls", "mask", "obj", "ibl")}
    for sample in batch:
        out = model(sample)
        cost = matching_cost(out, sample.gts)
        if np.isfinite(cost).all():
            match = hungarian_match(cost)
        else:
            # keep going with a placeholder assignment so every component gets evaluated for the error report
            k = min(cost.shape)
            match = MatchResult([(i, i) for i in range(k)], list(range(k, cost.shape[0])))
        total, parts, _ = set_criterion(
            out, sample.gts, sample.labels, sample.boundary, cfg.weights, cfg.gamma, cfg.gingiva_floor,
            match=match, no_object_weight=cfg.no_object_weight,
        )
        totals.append(total)
        for k, v in parts.items():
            comps[k] += float(v.detach()) / len(batch)
    return torch.stack(totals).mean(), comps


def train_step(model: ToothInstanceNet, optimizer: torch.optim.Optimizer, batch: Sequence[Sample]) -> LossReport:
    if not batch:
        raise ValueError("empty batch")
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss, comps = batch_loss(model, batch)
    if not torch.isfinite(loss) or not all(math.isfinite(v) for v in comps.values()):
        raise NonFiniteLossError({"total": float(loss.detach()), **comps})
    loss.backward()
    optimizer.step()
    return report(comps, model.config.loss.weights)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _optimizer_arrays(optimizer: torch.optim.Adam):
    arrays = {}
    for i, p in enumerate(optimizer.param_groups[0]["params"]):
        state = optimizer.state.get(p)
        if not state:
            continue
        arrays[f"adam/{i}/step"] = np.atleast_1d(np.float32(float(state["step"])))
        arrays[f"adam/{i}/exp_avg"] = state["exp_avg"].detach().numpy()
        arrays[f"adam/{i}/exp_avg_sq"] = state["exp_avg_sq"].detach().numpy()
    return arrays


def _restore_optimizer(optimizer: torch.optim.Adam, arrays):
    params = optimizer.param_groups[0]["params"]
    for i, p in enumerate(params):
        key = f"adam/{i}/step"
        if key not in arrays:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(arrays[key][0])),
            "exp_avg": torch.from_numpy(np.array(arrays[f"adam/{i}/exp_avg"])),
            "exp_avg_sq": torch.from_numpy(np.array(arrays[f"adam/{i}/exp_avg_sq"])),
        }


def write_training_checkpoint(path, model, optimizer, epoch: int, step: int) -> Path:
    arrays = dict(model.state_arrays())
    arrays.update(_optimizer_arrays(optimizer))
    meta = {"config": model.config.to_dict(), "epoch": epoch, "step": step}
    try:
        return save_checkpoint(path, arrays, meta)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_model(path):
    """Rebuild a model from a checkpoint. Returns (model, arrays, metadata)."""
    try:
        arrays, meta = load_checkpoint(path)
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    model = ToothInstanceNet(Config.from_dict(meta["config"]))
    model.load_state_arrays(arrays)
    return model, arrays, meta


def run_training(
    config: Config,
    dataset: Sequence[Scan],
    out_dir,
    resume: Optional[str] = None,
    stop_after_epochs: Optional[int] = None,
    samples: Optional[List[Sample]] = None,
) -> Path:
    """Train on ``dataset`` and return the path of the final checkpoint.

    Writes ``train_log.csv`` and ``checkpoint_epoch<E>.batc`` files into
    ``out_dir``; ``final.batc`` once all epochs are done. ``stop_after_epochs``
    ends the run early (used to test resumption).
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    samples = samples if samples is not None else [prepare_sample(s, config) for s in dataset]

    if resume is not None:
        model, arrays, meta = load_model(resume)
        model.config = config
        optimizer = make_optimizer(model, config)
        _restore_optimizer(optimizer, arrays)
        start_epoch, step = meta["epoch"], meta["step"]
    else:
        torch.manual_seed(config.train.seed)
        model = ToothInstanceNet(config)
        optimizer = make_optimizer(model, config)
        start_epoch, step = 0, 0

    log_path = out_dir / "train_log.csv"
    mode = "a" if resume is not None and log_path.exists() else "w"
    t = config.train
    last = None
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(LOG_FIELDS)
        end_epoch = t.epochs if stop_after_epochs is None else min(t.epochs, start_epoch + stop_after_epochs)
        for epoch in range(start_epoch, end_epoch):
            for group in optimizer.param_groups:
                group["lr"] = cosine_lr(epoch, config)
            order = epoch_order(len(samples), t.seed, epoch)
            for b in range(0, len(order), t.batch_size):
                rep = train_step(model, optimizer, [samples[i] for i in order[b:b + t.batch_size]])
                step += 1
                if step % t.log_every == 0:
                    writer.writerow([epoch, step] + [f"{getattr(rep, k):.8g}" for k in LOG_FIELDS[2:]])
            fh.flush()
            log.info("epoch %d step %d loss %.4f", epoch, step, rep.total)
            if t.checkpoint_every and (epoch + 1) % t.checkpoint_every == 0:
                last = write_training_checkpoint(out_dir / f"checkpoint_epoch{epoch + 1}.batc", model, optimizer, epoch + 1, step)
            if epoch + 1 == t.epochs:
                last = write_training_checkpoint(out_dir / "final.batc", model, optimizer, epoch + 1, step)
        if last is None or stop_after_epochs is not None and end_epoch < t.epochs:
            last = write_training_checkpoint(out_dir / f"checkpoint_epoch{end_epoch}.batc", model, optimizer, end_epoch, step)
    return last
