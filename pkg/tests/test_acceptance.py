"""Acceptance criteria 1-9. Each test records one PASS/FAIL line for the terminal summary.

Criteria 5 and 6 are multi-minute training runs (marked ``slow``; still run by default).
"""

import contextlib
import copy
import math
import time

import numpy as np
import pytest
import torch

from geoprompt.checkpoint import frozen_checksum, load_checkpoint, save_checkpoint
from geoprompt.config import BACKBONE_GRID, DESIGN_GRID, Ablation, Backbones, TrainConfig
from geoprompt.dataset import (
    FrameSample, ManifestEntry, SplitManifest, SynthConfig, SyntheticDataset, load_l3d, write_dataset,
)
from geoprompt.errors import SchemaError
from geoprompt.losses import bce_loss, dice_loss, segmentation_loss
from geoprompt.metrics import assd, dsc, iou
from geoprompt.prompts import ReferenceEmbeddings, contrastive_prompt_loss
from geoprompt.train import Trainer, collate, epoch_batches, evaluate_model, train

from conftest import ACCEPTANCE, central_diff, rel_error
from oracles import assd_oracle, dsc_oracle, iou_oracle


@contextlib.contextmanager
def criterion(n: int, title: str):
    info: dict = {}
    try:
        yield info
    except BaseException as exc:
        ACCEPTANCE.append((n, False, f"{title} [{type(exc).__name__}: {str(exc).splitlines()[0][:160]}]"))
        raise
    detail = ", ".join(f"{k}={v}" for k, v in info.items())
    ACCEPTANCE.append((n, True, f"{title} ({detail})" if detail else title))


def _toy(**kw) -> TrainConfig:
    cfg = TrainConfig.preset("toy")
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg.validate()


# -- 1 ----------------------------------------------------------------------

def test_c1_metric_oracles():
    with criterion(1, "metric oracle equivalence on 200 16x16 pairs") as info:
        rng = np.random.default_rng(2024)
        t0 = time.perf_counter()
        worst = 0.0
        for i in range(200):
            # mix of densities, including empty masks on either side
            dp, dg = rng.choice([0.0, 0.05, 0.2, 0.5, 0.9], size=2)
            p = rng.random((16, 16)) < dp
            g = rng.random((16, 16)) < dg
            assert dsc(p, g) == dsc_oracle(p, g), i
            assert iou(p, g) == iou_oracle(p, g), i
            err = abs(assd(p, g) - assd_oracle(p, g))
            worst = max(worst, err)
            assert err <= 1e-9, (i, err)
        elapsed = time.perf_counter() - t0
        info.update(max_assd_err=f"{worst:.1e}", seconds=f"{elapsed:.2f}")
        assert elapsed < 10


# -- 2 ----------------------------------------------------------------------

def test_c2_gradient_checks():
    with criterion(2, "finite-difference gradient checks, 20 instances per loss") as info:
        torch.manual_seed(7)
        t0 = time.perf_counter()
        worst = {}

        def check(name, f, x):
            x = x.detach().clone().requires_grad_(True)
            f(x).backward()
            err = rel_error(x.grad, central_diff(f, x.detach(), h=1e-6))
            worst[name] = max(worst.get(name, 0.0), err)
            assert err < 1e-4, (name, err)

        for i in range(20):
            shape = (3, 4, 5) if i % 2 else (2, 3, 4, 4)
            logits = torch.randn(shape, dtype=torch.float64) * 2
            target = (torch.rand(shape, dtype=torch.float64) > 0.6).double()
            check("dice", lambda z: dice_loss(torch.sigmoid(z), target), logits)
            check("bce", lambda z: bce_loss(z, target), logits)
            check("seg", lambda z: segmentation_loss(z, target)[0], logits)
            C = 8
            R = torch.randn(3, C, dtype=torch.float64)
            valid = torch.tensor([True, True, True]) if i % 4 else torch.tensor([True, False, True])
            ref = ReferenceEmbeddings(R, valid)
            P = torch.randn(3, C, dtype=torch.float64)
            check("contrastive", lambda q: contrastive_prompt_loss(q, ref, tau=0.07).loss, P)
        elapsed = time.perf_counter() - t0
        info.update({f"{k}_max_rel": f"{v:.1e}" for k, v in worst.items()})
        info["seconds"] = f"{elapsed:.1f}"
        assert elapsed < 60


# -- 3 ----------------------------------------------------------------------

def test_c3_closed_forms():
    with criterion(3, "closed-form loss values") as info:
        P = torch.ones(3, 16, dtype=torch.float64)
        R = torch.ones(3, 16, dtype=torch.float64) * 2.5
        cl = contrastive_prompt_loss(P, ReferenceEmbeddings(R, torch.ones(3, dtype=torch.bool)), tau=0.07).loss
        assert abs(cl.item() - math.log(3)) <= 1e-6
        target = (torch.rand(3, 8, 8) > 0.5).double()
        bce = bce_loss(torch.zeros(3, 8, 8, dtype=torch.float64), target)
        assert abs(bce.item() - math.log(2)) <= 1e-9
        d = dice_loss(target, target)
        assert abs(d.item()) <= 1e-9
        info.update(cl=f"{cl.item():.9f}", bce=f"{bce.item():.12f}", dice=f"{d.item():.1e}")


# -- 4 ----------------------------------------------------------------------

def test_c4_frozen_encoder_audit():
    with criterion(4, "frozen encoder unchanged after 50 toy steps") as info:
        cfg = _toy(epochs=25, synth=SynthConfig(seed=5, count=8))
        frames = SyntheticDataset(cfg.synth)
        t = Trainer(cfg)
        before = frozen_checksum(t.model)
        watched = {n: p.detach().clone() for n, p in t.model.named_parameters()
                   if n.startswith("prompts.") or ".neck." in n or n.startswith("encoder.rgb.proj.")}
        assert any(".neck." in n for n in watched) and "prompts.P" in watched
        epoch = 0
        while t.step_count < 50:
            for batch in epoch_batches(frames, cfg, epoch):
                t.step(*batch)
                if t.step_count == 50:
                    break
            t.end_epoch()
            epoch += 1
        assert frozen_checksum(t.model) == before
        params = dict(t.model.named_parameters())
        unchanged = [n for n, v in watched.items() if torch.equal(params[n].detach(), v)]
        assert not unchanged, unchanged
        info.update(steps=t.step_count, checksum=before[:12], watched=len(watched))


# -- 5 ----------------------------------------------------------------------

@pytest.mark.slow
def test_c5_overfit_four_frames():
    with criterion(5, "toy model overfits 4 frames to train DSC >= 95") as info:
        # constant lr (no epoch boundaries); see README
        cfg = _toy(lr=2e-3, lr_floor=2e-5, epochs=300, augment=False, synth=SynthConfig(seed=7, count=4))
        assert (cfg.resolution, cfg.common_width, cfg.depth_encoder.blocks) == (256, 256, 4)
        frames = list(SyntheticDataset(cfg.synth))
        batch = collate(frames)
        t = Trainer(cfg)
        t0 = time.perf_counter()
        best = 0.0
        for step in range(1, 301):
            t.step(*batch)
            if step % 25 == 0:
                best = evaluate_model(t.model, frames).mean["dsc"]
                if best >= 95:
                    break
        elapsed = time.perf_counter() - t0
        info.update(steps=step, train_dsc=f"{best:.2f}", seconds=f"{elapsed:.0f}")
        assert best >= 95
        assert elapsed < 600


# -- 6 ----------------------------------------------------------------------

@pytest.mark.slow
def test_c6_synthetic_end_to_end(tmp_path):
    with criterion(6, "200 train / 40 val synthetic frames, 10 epochs, val DSC >= 50") as info:
        cfg = _toy(epochs=10, synth=SynthConfig(seed=11, count=240), val_frac=1 / 6,
                   out_dir=str(tmp_path / "e2e"))
        from geoprompt.train import build_splits

        tr, va = build_splits(cfg)
        assert (len(tr), len(va)) == (200, 40)
        t0 = time.perf_counter()
        result = train(cfg)
        elapsed = time.perf_counter() - t0
        final = result.history[-1]["val"]["dsc"]
        best = max(h["val"]["dsc"] for h in result.history)
        info.update(final_val_dsc=f"{final:.2f}", best_val_dsc=f"{best:.2f}", minutes=f"{elapsed / 60:.1f}")
        assert final >= 50
        assert elapsed < 30 * 60


# -- 7 ----------------------------------------------------------------------

def test_c7_ablation_closure():
    variants = [(k, a, Backbones()) for k, a in DESIGN_GRID.items()] + \
               [(k, Ablation(), b) for k, b in BACKBONE_GRID.items()]
    with criterion(7, "all 7 design and 4 backbone variants train and evaluate") as info:
        frames = list(SyntheticDataset(SynthConfig(seed=9, count=2)))
        batch = collate(frames)
        for name, ab, bb in variants:
            cfg = _toy(ablation=copy.copy(ab), backbones=copy.copy(bb))
            t = Trainer(cfg)
            report = t.step(*batch)
            assert math.isfinite(report.total), name
            m = evaluate_model(t.model, frames).mean
            assert all(math.isfinite(v) for v in m.values()), (name, m)
        info["variants"] = len(variants)


# -- 8 ----------------------------------------------------------------------

def test_c8_reproducibility(tmp_path):
    with criterion(8, "same-seed runs and checkpoint reload are reproducible") as info:
        cfg = _toy(synth=SynthConfig(seed=4, count=4))
        batch = collate(list(SyntheticDataset(cfg.synth)))
        a, b = Trainer(cfg), Trainer(copy.deepcopy(cfg))
        la, lb = a.step(*batch).total, b.step(*batch).total
        rel = abs(la - lb) / abs(la)
        assert rel <= 1e-6
        save_checkpoint(a.model, tmp_path / "ck")
        loaded, _ = load_checkpoint(tmp_path / "ck", expect=cfg)
        a.model.eval()
        loaded.eval()
        with torch.no_grad():
            ref = a.model(batch[0], batch[1]).logits
            got = loaded(batch[0], batch[1]).logits
        assert torch.equal(ref, got)
        info.update(step1_loss=f"{la:.6f}", rel_diff=f"{rel:.1e}", logits="bitwise equal")


# -- 9 ----------------------------------------------------------------------

def _published_manifest() -> SplitManifest:
    """1152 frames over 39 patients, 921/122/109, patient-disjoint."""
    plan = [("train", 31, 921), ("val", 4, 122), ("test", 4, 109)]
    entries, pid = [], 0
    for split, patients, frames in plan:
        sizes = [frames // patients + (i < frames % patients) for i in range(patients)]
        for size in sizes:
            for k in range(size):
                entries.append(ManifestEntry(f"p{pid:02d}_{k:03d}", f"p{pid:02d}", split))
            pid += 1
    return SplitManifest(entries)


def test_c9_dataset_schema(tmp_path):
    with criterion(9, "published 921/122/109 manifest loads; shared patient rejected") as info:
        manifest = _published_manifest()
        assert len({e.patient_id for e in manifest.entries}) == 39
        rng = np.random.default_rng(0)

        def samples():
            for e in manifest.entries:
                masks = (rng.random((3, 8, 8)) > 0.7).astype(np.float32)
                yield FrameSample(e.frame_id, e.patient_id, rng.random((3, 8, 8), dtype=np.float32),
                                  rng.random((1, 8, 8), dtype=np.float32), masks, (True, True, True))

        write_dataset(tmp_path / "l3d", samples(), manifest)
        counts = {}
        for split in ("train", "val", "test"):
            frames = load_l3d(tmp_path / "l3d", split=split)
            loaded = [frames[i] for i in range(len(frames))]
            assert all(f.rgb.shape == (3, 8, 8) for f in loaded)
            counts[split] = len(loaded)
        assert counts == {"train": 921, "val": 122, "test": 109}
        records = manifest.to_records()
        moved = next(r for r in records if r["split"] == "val")
        records.append({**moved, "frame_id": "extra_0000", "split": "test"})
        with pytest.raises(SchemaError, match="appears in both"):
            SplitManifest.from_records(records)
        info.update(counts="/".join(str(counts[s]) for s in ("train", "val", "test")), patients=39)
