"""Training, evaluation, ablation sweeps and prediction overlays."""

from __future__ import annotations

import copy
import json
import logging
import random
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
import torch

from .checkpoint import load_checkpoint, read_meta, save_checkpoint
from .config import BACKBONE_GRID, DESIGN_GRID, Ablation, Backbones, TrainConfig
from .dataset import (
    CLASSES, SyntheticDataset, augment, load_l3d, read_rgb, synthetic_manifest, LuminanceDepth,
    PrecomputedDepth,
)
from .errors import ConfigError, DataError, GeoPromptError, NumericError
from .metrics import MetricsReport, evaluate_split
from .model import LandmarkNet, compute_losses

log = logging.getLogger(__name__)

# overlay colors (RGB)
OVERLAY_COLORS = {"silhouette": (0, 0, 255), "ligament": (0, 255, 0), "ridge": (255, 0, 0)}


def fixed_execution_mode(seed: int, threads: int = 0) -> None:
    """Seed every RNG and pin deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    if threads:
        torch.set_num_threads(threads)


def build_splits(cfg: TrainConfig):
    """(train, val) frame sequences for the configured dataset."""
    if cfg.dataset == "synthetic":
        synth = replace(cfg.synth, resolution=cfg.resolution)
        manifest = synthetic_manifest(synth, val_frac=cfg.val_frac)
        ids = {s: [int(e.frame_id.rsplit("_", 1)[1]) for e in manifest.split(s)] for s in ("train", "val", "test")}
        return SyntheticDataset(synth, ids["train"]), SyntheticDataset(synth, ids["val"])
    root = Path(cfg.dataset)
    train = load_l3d(root, split="train", resolution=cfg.resolution)
    val = load_l3d(root, split="val", resolution=cfg.resolution)
    return train, val


def load_split(cfg: TrainConfig, split: str):
    if cfg.dataset == "synthetic":
        synth = replace(cfg.synth, resolution=cfg.resolution)
        manifest = synthetic_manifest(synth, val_frac=cfg.val_frac)
        return SyntheticDataset(synth, [int(e.frame_id.rsplit("_", 1)[1]) for e in manifest.split(split)])
    return load_l3d(cfg.dataset, split=split, resolution=cfg.resolution)


def collate(samples):
    rgb = torch.from_numpy(np.stack([s.rgb for s in samples]))
    depth = torch.from_numpy(np.stack([s.depth for s in samples]))
    masks = torch.from_numpy(np.stack([s.masks for s in samples]))
    present = torch.tensor([s.present for s in samples], dtype=torch.bool)
    return rgb, depth, masks, present


def augment_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def epoch_batches(frames, cfg: TrainConfig, epoch: int):
    """Deterministic shuffled batches for ``epoch`` (augmented when enabled)."""
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(frames))
    for start in range(0, len(order), cfg.batch_size):
        batch = []
        for i in order[start:start + cfg.batch_size]:
            s = frames[int(i)]
            if cfg.augment:
                s = augment(s, augment_seed(cfg.seed, epoch, int(i)))
            batch.append(s)
        yield collate(batch)


@torch.no_grad()
def predict_frames(model: LandmarkNet, frames, batch_size: int = 4):
    """[(frame_id, probs[3,H,W] float32)] in eval mode."""
    model.eval()
    out = []
    for start in range(0, len(frames), batch_size):
        chunk = [frames[i] for i in range(start, min(start + batch_size, len(frames)))]
        rgb, depth, _, _ = collate(chunk)
        probs = model(rgb, depth).probs.numpy()
        out.extend((s.frame_id, p) for s, p in zip(chunk, probs))
    return out


def evaluate_model(model: LandmarkNet, frames, threshold: float = 0.5, batch_size: int = 4) -> MetricsReport:
    frames = [frames[i] for i in range(len(frames))]
    return evaluate_split(predict_frames(model, frames, batch_size), frames, threshold)


@dataclass
class TrainResult:
    out_dir: Path
    last: Path
    best: Path | None
    history: list = field(default_factory=list)
    steps: int = 0


class Trainer:
    """Owns the model, optimizer and schedule for one run."""

    def __init__(self, cfg: TrainConfig, model: LandmarkNet | None = None):
        cfg.validate()
        self.cfg = cfg
        fixed_execution_mode(cfg.seed, cfg.threads)
        self.model = model or LandmarkNet(cfg)
        self.optimizer = torch.optim.Adam(self.model.trainable_parameters(), lr=cfg.lr,
                                          weight_decay=cfg.weight_decay)
        # T_max = epochs-1 so the final epoch runs at exactly lr_floor
        self.scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            self.optimizer, T_max=max(cfg.epochs - 1, 1), eta_min=cfg.lr_floor)
        self.step_count = 0
        self.epoch = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, rgb, depth, masks, present):
        self.model.train()
        self.step_count += 1
        out = self.model(rgb, depth)
        loss, report = compute_losses(self.model, out, masks, present, step=self.step_count)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        return report

    def end_epoch(self):
        self.epoch += 1
        if self.epoch < self.cfg.epochs:
            self.scheduler.step()


def train(cfg: TrainConfig, log_path: str | Path | None = None) -> TrainResult:
    """Full run: per-epoch cosine schedule, best-val and last checkpoints, JSON-lines step log."""
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    train_frames, val_frames = build_splits(cfg)
    if len(train_frames) == 0:
        raise ConfigError("training split is empty")
    trainer = Trainer(cfg)
    log_path = Path(log_path) if log_path else out_dir / "steps.jsonl"
    best_dsc, best_path, history = -1.0, None, []
    t0 = time.time()
    with open(log_path, "a", buffering=1) as logf:
        for epoch in range(cfg.epochs):
            lr = trainer.lr
            for batch in epoch_batches(train_frames, cfg, epoch):
                report = trainer.step(*batch)
                rec = {"step": trainer.step_count, "epoch": epoch, "lr": lr, **report.to_json()}
                logf.write(json.dumps(rec) + "\n")
                if cfg.max_steps and trainer.step_count >= cfg.max_steps:
                    break
            trainer.end_epoch()
            entry = {"epoch": epoch, "lr": lr, "step": trainer.step_count, "elapsed_s": round(time.time() - t0, 1)}
            last_epoch = epoch == cfg.epochs - 1 or (cfg.max_steps and trainer.step_count >= cfg.max_steps)
            if len(val_frames) and ((epoch + 1) % cfg.eval_every == 0 or last_epoch):
                report = evaluate_model(trainer.model, val_frames, cfg.threshold, cfg.batch_size)
                entry["val"] = report.mean
                if report.mean["dsc"] > best_dsc:
                    best_dsc = report.mean["dsc"]
                    history.append(entry)
                    best_path = save_checkpoint(trainer.model, out_dir / "best", epoch=epoch,
                                                best_val_dsc=best_dsc, history=history)
                    history.pop()
            history.append(entry)
            log.info("epoch %d %s", epoch, json.dumps(entry))
            if last_epoch:
                break
    last = save_checkpoint(trainer.model, out_dir / "last", epoch=trainer.epoch - 1,
                           best_val_dsc=best_dsc if best_dsc >= 0 else None, history=history)
    return TrainResult(out_dir, last, best_path, history, trainer.step_count)


def evaluate(ckpt: str | Path, split: str = "test", cfg: TrainConfig | None = None,
             out: str | Path | None = None) -> MetricsReport:
    """Metrics of a checkpoint on ``split``; writes ``metrics_<split>.json`` and ``.txt`` next to it."""
    model, meta = load_checkpoint(ckpt, expect=cfg)
    run_cfg = cfg or model.cfg
    frames = load_split(run_cfg, split)
    report = evaluate_model(model, frames, run_cfg.threshold, run_cfg.batch_size)
    out = Path(out) if out else Path(ckpt)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"metrics_{split}.json").write_text(report.to_json())
    (out / f"metrics_{split}.txt").write_text(report.table(f"{split} ({len(frames)} frames)") + "\n")
    return report


# --------------------------------------------------------------------------
# ablations
# --------------------------------------------------------------------------


@dataclass
class AblationRow:
    name: str
    ablation: Ablation
    backbones: Backbones
    report: MetricsReport | None = None
    error: str | None = None


def ablation_grid(which: str) -> list[tuple[str, Ablation, Backbones]]:
    if which == "design":
        return [(k, a, Backbones()) for k, a in DESIGN_GRID.items()]
    if which == "backbone":
        return [(k, Ablation(), b) for k, b in BACKBONE_GRID.items()]
    raise ConfigError(f"unknown ablation grid {which!r}")


def ablate(cfg: TrainConfig, grid, split: str = "val") -> list[AblationRow]:
    """Train and evaluate each (name, ablation, backbones) row under one seed; failures stay per-row."""
    rows = []
    for name, ab, bb in grid:
        row_cfg = copy.deepcopy(cfg)
        row_cfg.ablation = copy.copy(ab)
        row_cfg.backbones = copy.copy(bb)
        row_cfg.out_dir = str(Path(cfg.out_dir) / name.replace(" ", "_").replace("+", "_"))
        row = AblationRow(name, ab, bb)
        try:
            result = train(row_cfg)
            row.report = evaluate(result.best or result.last, split, row_cfg, out=row_cfg.out_dir)
        except GeoPromptError as exc:
            row.error = f"{type(exc).__name__}: {exc}"
            log.error("ablation row %s failed: %s", name, row.error)
        rows.append(row)
    return rows


def ablation_table(rows: list[AblationRow]) -> str:
    mark = lambda b: "✓" if b else ""  # noqa: E731
    head = f"{'Methods':<10}{'Backbones':<22}{'BFU':^5}{'DPE':^5}{'L_cl':^6}{'SGA':^5}{'DSC':>8}{'IoU':>8}{'Assd':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        bb = f"{r.backbones.rgb}/{r.backbones.depth}"
        a = r.ablation
        if r.report is not None:
            m = r.report.mean
            nums = f"{m['dsc']:>8.2f}{m['iou']:>8.2f}{m['assd']:>8.2f}"
        else:
            nums = f"  failed: {r.error}"
        lines.append(f"{r.name:<10}{bb:<22}{mark(a.bfu):^5}{mark(a.dpe):^5}{mark(a.cl):^6}{mark(a.sga):^5}{nums}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# prediction overlays
# --------------------------------------------------------------------------


def write_prob_map(path, probs: np.ndarray) -> None:
    """[3,H,W] probabilities as a 16-bit 3-channel PNG, channels in class order."""
    arr = np.round(np.clip(probs, 0, 1) * 65535).astype(np.uint16).transpose(1, 2, 0)
    cv2.imwrite(str(path), np.ascontiguousarray(arr[..., ::-1]))


def read_prob_map(path) -> np.ndarray:
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise DataError(f"unreadable probability map {path}")
    return (arr[..., ::-1].transpose(2, 0, 1).astype(np.float64) / 65535).astype(np.float32)


def overlay(rgb_u8: np.ndarray, probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Paint thresholded classes onto an HxWx3 uint8 RGB image."""
    out = rgb_u8.copy()
    for c, name in enumerate(CLASSES):
        out[probs[c] >= threshold] = OVERLAY_COLORS[name]
    return out


def predict(ckpt: str | Path, images: str | Path, out: str | Path) -> list[Path]:
    """Write ``<stem>_prob.png`` and ``<stem>_overlay.png`` per readable image."""
    model, _ = load_checkpoint(ckpt)
    model.eval()
    res = model.cfg.resolution
    images, out = Path(images), Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = sorted(p for p in images.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".tif"))
    depth_dir = images.parent / "depth"
    provider = PrecomputedDepth(depth_dir, LuminanceDepth()) if depth_dir.is_dir() else LuminanceDepth()
    written, failed = [], 0
    for p in paths:
        try:
            rgb = read_rgb(p)
        except DataError as exc:
            log.warning("skipping %s: %s", p, exc)
            failed += 1
            continue
        h, w = rgb.shape[1:]
        small = np.stack([cv2.resize(ch, (res, res), interpolation=cv2.INTER_AREA) for ch in rgb]).clip(0, 1)
        depth = provider(small, p.stem)
        with torch.no_grad():
            probs = model(torch.from_numpy(small)[None], torch.from_numpy(depth)[None]).probs[0].numpy()
        if (h, w) != (res, res):
            probs = np.stack([cv2.resize(ch, (w, h), interpolation=cv2.INTER_LINEAR) for ch in probs])
        prob_path, ov_path = out / f"{p.stem}_prob.png", out / f"{p.stem}_overlay.png"
        write_prob_map(prob_path, probs)
        img = cv2.imread(str(p), cv2.IMREAD_COLOR)[..., ::-1]
        cv2.imwrite(str(ov_path), np.ascontiguousarray(overlay(img, probs, model.cfg.threshold)[..., ::-1]))
        written += [prob_path, ov_path]
    if paths and failed == len(paths):
        raise DataError(f"none of the {len(paths)} images in {images} could be read")
    if not paths:
        raise DataError(f"no images found in {images}")
    return written


def read_checkpoint_config(ckpt) -> TrainConfig:
    return TrainConfig.from_dict(read_meta(ckpt)["config"])


__all__ = [
    "Trainer", "train", "evaluate", "ablate", "ablation_grid", "ablation_table", "predict",
    "evaluate_model", "predict_frames", "fixed_execution_mode", "NumericError",
]
