"""Frames for the landmark model: synthetic generator, L3D-layout ingestion,
joint geometric augmentation and depth providers."""

from __future__ import annotations

import json
import logging
import math
import os
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from .errors import IngestionError, ProviderError, SchemaError

log = logging.getLogger(__name__)

CLASSES = ("silhouette", "ligament", "ridge")
FLAG_OF = {"silhouette": "s", "ligament": "l", "ridge": "r"}
SPLITS = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class FrameSample:
    frame_id: str
    patient_id: str
    rgb: np.ndarray  # [3,H,W] float32 in [0,1]
    depth: np.ndarray  # [1,H,W] float32 in [0,1]
    masks: np.ndarray  # [3,H,W] float32 in {0,1}, (silhouette, ligament, ridge)
    present: tuple[bool, bool, bool]

    def __post_init__(self):
        h, w = self.rgb.shape[1:]
        if self.rgb.shape[0] != 3 or self.depth.shape != (1, h, w) or self.masks.shape != (3, h, w):
            raise SchemaError(
                f"{self.frame_id}: inconsistent shapes rgb={self.rgb.shape} "
                f"depth={self.depth.shape} masks={self.masks.shape}"
            )
        if len(self.present) != 3:
            raise SchemaError(f"{self.frame_id}: present must have 3 entries")

    @property
    def size(self) -> tuple[int, int]:
        return self.rgb.shape[1], self.rgb.shape[2]


def check_sample(sample: FrameSample) -> None:
    """Raise SchemaError if ``sample`` breaks the mask contract."""
    m = sample.masks
    if not np.all((m == 0) | (m == 1)):
        raise SchemaError(f"{sample.frame_id}: masks are not binary")
    for c, name in enumerate(CLASSES):
        if not sample.present[c] and m[c].any():
            raise SchemaError(f"{sample.frame_id}: {name} marked absent but mask is nonzero")


# --------------------------------------------------------------------------
# split manifest
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    frame_id: str
    patient_id: str
    split: str
    flags: frozenset = frozenset("lrs")


@dataclass
class SplitManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen: set[str] = set()
        owner: dict[str, str] = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise SchemaError(f"frame {e.frame_id}: unknown split {e.split!r}")
            if e.frame_id in seen:
                raise SchemaError(f"duplicate frame_id {e.frame_id!r}")
            seen.add(e.frame_id)
            if not e.flags <= set("lrs"):
                raise SchemaError(f"frame {e.frame_id}: bad annotation flags {sorted(e.flags)}")
            prev = owner.setdefault(e.patient_id, e.split)
            if prev != e.split:
                raise SchemaError(
                    f"patient {e.patient_id!r} appears in both {prev!r} and {e.split!r} splits"
                )

    @property
    def counts(self) -> dict[str, int]:
        out = {s: 0 for s in SPLITS}
        for e in self.entries:
            out[e.split] += 1
        return out

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in SPLITS:
            raise SchemaError(f"unknown split {name!r}")
        return [e for e in self.entries if e.split == name]

    def to_records(self) -> list[dict]:
        return [
            {"frame_id": e.frame_id, "patient_id": e.patient_id, "split": e.split,
             "flags": "".join(sorted(e.flags))}
            for e in self.entries
        ]

    @classmethod
    def from_records(cls, records: list[dict]) -> "SplitManifest":
        entries = []
        for r in records:
            try:
                flags = r.get("flags", "lrs")
                entries.append(ManifestEntry(str(r["frame_id"]), str(r["patient_id"]),
                                             str(r["split"]), frozenset("".join(flags))))
            except KeyError as exc:
                raise SchemaError(f"manifest record missing field {exc}: {r}") from None
        return cls(entries)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_records(), indent=1))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SplitManifest":
        try:
            records = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise IngestionError(f"manifest not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise SchemaError(f"manifest {path} is not valid JSON: {exc}") from None
        return cls.from_records(records)


# --------------------------------------------------------------------------
# synthetic generator
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    count: int = 100
    resolution: int = 256
    curve_thickness_px: int = 8
    deformation_amplitude: float = 0.08

    def __post_init__(self):
        if self.count < 1:
            raise SchemaError("SynthConfig.count must be >= 1")
        if self.resolution < 64:
            raise SchemaError("SynthConfig.resolution must be >= 64")
        if self.curve_thickness_px < 1:
            raise SchemaError("SynthConfig.curve_thickness_px must be >= 1")


def _smooth_noise(rng: np.random.Generator, res: int, cells: int) -> np.ndarray:
    coarse = rng.standard_normal((cells, cells)).astype(np.float32)
    return cv2.resize(coarse, (res, res), interpolation=cv2.INTER_CUBIC)


def _polyline(points: np.ndarray) -> np.ndarray:
    return np.round(points * 16).astype(np.int32).reshape(-1, 1, 2)


def _draw(shape, points, thickness) -> np.ndarray:
    canvas = np.zeros(shape, np.uint8)
    if len(points) >= 2:
        # fixed-point coordinates (shift=4) keep thin curves smooth
        cv2.polylines(canvas, [_polyline(points)], False, 1, thickness, cv2.LINE_8, shift=4)
    return canvas


def generate_synthetic(cfg: SynthConfig, index: int) -> FrameSample:
    """Render one synthetic frame; a pure function of ``(cfg, index)``."""
    if not 0 <= index < cfg.count:
        raise IndexError(f"index {index} out of range for count {cfg.count}")
    rng = np.random.default_rng([cfg.seed, index])
    res = cfg.resolution
    t = cfg.curve_thickness_px
    shape = (res, res)

    # deformed ellipse outline
    cx, cy = rng.uniform(0.38, 0.62) * res, rng.uniform(0.36, 0.52) * res
    ax, ay = rng.uniform(0.28, 0.38) * res, rng.uniform(0.2, 0.27) * res
    tilt = math.radians(rng.uniform(-15, 15))
    theta = np.linspace(0, 2 * math.pi, 721)[:-1]
    radial = np.ones_like(theta)
    for k in (2, 3, 4):
        a, b = rng.standard_normal(2) * cfg.deformation_amplitude / (k - 1)
        radial += a * np.cos(k * theta) + b * np.sin(k * theta)
    ex, ey = ax * radial * np.cos(theta), ay * radial * np.sin(theta)
    px = cx + ex * math.cos(tilt) - ey * math.sin(tilt)
    py = cy + ex * math.sin(tilt) + ey * math.cos(tilt)
    contour = np.stack([px, py], axis=1)

    body = np.zeros(shape, np.uint8)
    cv2.fillPoly(body, [_polyline(contour)], 1, cv2.LINE_8, shift=4)

    # lower arc (image y grows downward, so the bottom is around theta = pi/2)
    lo = math.pi / 2 - rng.uniform(0.6, 1.0)
    hi = math.pi / 2 + rng.uniform(0.6, 1.0)
    on_ridge = (theta >= lo) & (theta <= hi)
    ridge_pts = contour[on_ridge]
    # silhouette is the rest of the outline, opened at the ridge ends
    start = int(np.argmax(theta > hi))
    sil_pts = np.roll(contour, -start, axis=0)[: int((~on_ridge).sum())]

    # ligament: near-vertical seam from the upper outline into the body
    top = -math.pi / 2 + rng.uniform(-0.45, 0.45)
    i_top = int(np.argmin(np.abs(np.angle(np.exp(1j * (theta - top))))))
    x0, y0 = contour[i_top]
    length = rng.uniform(0.45, 0.75) * 2 * ay
    sway = rng.uniform(-0.12, 0.12) * length
    s = np.linspace(0, 1, 24)
    lig_pts = np.stack([x0 + sway * s**2, y0 + length * s], axis=1)

    ridge = _draw(shape, ridge_pts, t)
    lig = _draw(shape, lig_pts, t) & body
    sil = _draw(shape, sil_pts, t) & (1 - ridge) & (1 - lig)
    masks = np.stack([sil, lig, ridge]).astype(np.float32)

    # appearance
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float32) / res
    bg_tex = 0.06 * _smooth_noise(rng, res, 12)
    bg = np.stack([0.62 + bg_tex, 0.32 + 0.5 * bg_tex, 0.30 + 0.5 * bg_tex])
    inside = cv2.distanceTransform(body, cv2.DIST_L2, 5)
    dome = np.sqrt(inside / max(inside.max(), 1.0))
    liv_tex = 0.05 * _smooth_noise(rng, res, 20)
    shade = 0.75 + 0.25 * dome + liv_tex
    liver = np.stack([0.50 * shade, 0.16 * shade, 0.12 * shade])
    rgb = np.where(body[None] > 0, liver, bg)
    ridge_band = _draw(shape, ridge_pts, max(1, t // 2 + 1)) > 0
    rgb[:, ridge_band] *= 0.55
    lig_band = (_draw(shape, lig_pts, max(1, t // 2 + 1)) & body) > 0
    rgb[:, lig_band] = rgb[:, lig_band] * 0.4 + np.array([0.85, 0.78, 0.62])[:, None] * 0.6

    depth = 0.25 * (1 - yy) + 0.1 * xx + body * (0.35 + 0.4 * dome)
    depth = depth + 0.03 * _smooth_noise(rng, res, 32)

    if rng.random() < 0.3:
        w, h = rng.uniform(0.07, 0.14) * res, rng.uniform(0.3, 0.6) * res
        x1 = rng.uniform(0, res - w)
        y_from_top = rng.random() < 0.5
        y1 = 0.0 if y_from_top else res - h
        tool = np.zeros(shape, bool)
        tool[int(y1):int(y1 + h), int(x1):int(x1 + w)] = True
        grey = 0.62 + 0.08 * np.sin(xx * 40)
        rgb[:, tool] = np.stack([grey, grey, grey * 1.05])[:, tool]
        depth[tool] = depth.max() + 0.1
        masks[:, tool] = 0

    rgb += 0.015 * rng.standard_normal(rgb.shape)
    rgb = np.clip(rgb, 0, 1).astype(np.float32)
    depth = minmax(depth)[None].astype(np.float32)
    present = tuple(bool(m.any()) for m in masks)
    return FrameSample(
        frame_id=f"synth_{cfg.seed}_{index:05d}",
        patient_id=f"synth_p{index // 5:04d}",
        rgb=rgb, depth=depth, masks=masks, present=present,
    )


class SyntheticDataset(Sequence):
    """Lazily generated frames ``indices`` of a synthetic set."""

    def __init__(self, cfg: SynthConfig, indices: Sequence[int] | None = None):
        self.cfg = cfg
        self.indices = list(range(cfg.count)) if indices is None else list(indices)

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return SyntheticDataset(self.cfg, self.indices[i])
        return generate_synthetic(self.cfg, self.indices[i])


def synthetic_manifest(cfg: SynthConfig, val_frac: float = 0.2, test_frac: float = 0.0) -> SplitManifest:
    """Patient-disjoint split of a synthetic set (5 frames per pseudo-patient)."""
    n_pat = math.ceil(cfg.count / 5)
    n_test = round(n_pat * test_frac)
    n_val = round(n_pat * val_frac)
    entries = []
    for i in range(cfg.count):
        p = i // 5
        split = "test" if p >= n_pat - n_test else "val" if p >= n_pat - n_test - n_val else "train"
        entries.append(ManifestEntry(f"synth_{cfg.seed}_{i:05d}", f"synth_p{p:04d}", split))
    return SplitManifest(entries)


# --------------------------------------------------------------------------
# depth providers
# --------------------------------------------------------------------------


def minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi - lo < 1e-12:
        return np.zeros_like(a, dtype=np.float32)
    return ((a - lo) / (hi - lo)).astype(np.float32)


class DepthProvider:
    """Maps an rgb frame [3,H,W] to relative depth [1,H,W] in [0,1]."""

    def estimate(self, rgb: np.ndarray, frame_id: str | None = None) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, rgb: np.ndarray, frame_id: str | None = None) -> np.ndarray:
        depth = np.asarray(self.estimate(rgb, frame_id), dtype=np.float32)
        if depth.ndim == 2:
            depth = depth[None]
        if depth.shape != (1,) + rgb.shape[1:]:
            raise ProviderError(
                f"{type(self).__name__} returned depth {depth.shape} for rgb {rgb.shape}"
            )
        return depth


class LuminanceDepth(DepthProvider):
    """Blurred-luminance stand-in for a monocular depth network."""

    def __init__(self, sigma: float = 4.0):
        self.sigma = sigma

    def estimate(self, rgb, frame_id=None):
        grey = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
        grey = cv2.GaussianBlur(grey.astype(np.float32), (0, 0), self.sigma)
        return minmax(grey)


class PrecomputedDepth(DepthProvider):
    """Reads ``<directory>/<frame_id>.png`` (16-bit); falls back if missing."""

    def __init__(self, directory: str | os.PathLike, fallback: DepthProvider | None = None):
        self.directory = Path(directory)
        self.fallback = fallback

    def estimate(self, rgb, frame_id=None):
        path = self.directory / f"{frame_id}.png"
        if frame_id is not None and path.exists():
            depth = read_depth_png(path)
            if depth.shape != rgb.shape[1:]:
                depth = cv2.resize(depth, rgb.shape[1:][::-1], interpolation=cv2.INTER_LINEAR)
            return depth
        if self.fallback is None:
            raise ProviderError(f"no precomputed depth for {frame_id} in {self.directory}")
        return self.fallback.estimate(rgb, frame_id)


# --------------------------------------------------------------------------
# file IO in the L3D layout
# --------------------------------------------------------------------------


def write_depth_png(path, depth: np.ndarray) -> None:
    d = np.asarray(depth, np.float64).squeeze()
    cv2.imwrite(str(path), np.round(np.clip(d, 0, 1) * 65535).astype(np.uint16))


def read_depth_png(path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IngestionError(f"unreadable depth file {path}")
    if raw.ndim == 3:
        raw = raw[..., 0]
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    return (raw.astype(np.float64) / scale).astype(np.float32)


def read_rgb(path) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise IngestionError(f"unreadable image {path}")
    return (bgr[..., ::-1].transpose(2, 0, 1) / 255.0).astype(np.float32)


def write_rgb(path, rgb: np.ndarray) -> None:
    img = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    cv2.imwrite(str(path), np.ascontiguousarray(img[..., ::-1]))


def write_dataset(root: str | os.PathLike, samples, manifest: SplitManifest | None = None) -> SplitManifest:
    """Emit frames in the L3D directory layout and return the manifest written."""
    root = Path(root)
    for sub in ["images", "depth"] + [f"masks/{c}" for c in CLASSES]:
        (root / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        write_rgb(root / "images" / f"{s.frame_id}.png", s.rgb)
        write_depth_png(root / "depth" / f"{s.frame_id}.png", s.depth)
        flags = set()
        for c, name in enumerate(CLASSES):
            if s.present[c]:
                cv2.imwrite(str(root / "masks" / name / f"{s.frame_id}.png"),
                            (s.masks[c] > 0.5).astype(np.uint8) * 255)
                flags.add(FLAG_OF[name])
        entries.append(ManifestEntry(s.frame_id, s.patient_id, "train", frozenset(flags)))
    if manifest is None:
        manifest = SplitManifest(entries)
    else:
        by_id = {e.frame_id: e for e in entries}
        manifest = SplitManifest([replace(e, flags=by_id[e.frame_id].flags) if e.frame_id in by_id else e
                                  for e in manifest.entries])
    manifest.save(root / "manifest.json")
    return manifest


def _resize(a: np.ndarray, res: int, interp) -> np.ndarray:
    if a.shape[1:] == (res, res):
        return a
    out = [cv2.resize(ch, (res, res), interpolation=interp) for ch in a]
    return np.stack(out).astype(np.float32)


class L3DSplit(Sequence):
    """Frames of one split, read from disk on access in manifest order."""

    def __init__(self, root, entries, depth_provider: DepthProvider | None = None,
                 resolution: int | None = None):
        self.root = Path(root)
        self.entries = list(entries)
        self.resolution = resolution
        fallback = depth_provider or LuminanceDepth()
        if (self.root / "depth").is_dir():
            self.depth_provider = PrecomputedDepth(self.root / "depth", fallback)
        else:
            self.depth_provider = fallback

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return L3DSplit(self.root, self.entries[i], self.depth_provider, self.resolution)
        return self._load(self.entries[i])

    def _load(self, e: ManifestEntry) -> FrameSample:
        img_path = self.root / "images" / f"{e.frame_id}.png"
        if not img_path.exists():
            raise IngestionError(f"frame {e.frame_id}: missing image {img_path}")
        rgb = read_rgb(img_path)
        h, w = rgb.shape[1:]
        masks = np.zeros((3, h, w), np.float32)
        present = [False, False, False]
        for c, name in enumerate(CLASSES):
            path = self.root / "masks" / name / f"{e.frame_id}.png"
            if FLAG_OF[name] not in e.flags or not path.exists():
                continue
            m = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
            if m is None:
                raise IngestionError(f"frame {e.frame_id}: unreadable mask {path}")
            if m.shape != (h, w):
                raise SchemaError(
                    f"frame {e.frame_id}: {name} mask is {m.shape[::-1]} but image is {(w, h)}"
                )
            masks[c] = m >= 128
            present[c] = True
        depth = self.depth_provider(rgb, e.frame_id)
        if self.resolution is not None:
            rgb = np.clip(_resize(rgb, self.resolution, cv2.INTER_AREA), 0, 1)
            depth = np.clip(_resize(depth, self.resolution, cv2.INTER_AREA), 0, 1)
            masks = _resize(masks, self.resolution, cv2.INTER_NEAREST)
        return FrameSample(e.frame_id, e.patient_id, rgb, depth, masks, tuple(present))


def load_l3d(root_path, manifest: SplitManifest | None = None, split: str = "train",
             depth_provider: DepthProvider | None = None, resolution: int | None = None) -> L3DSplit:
    """Frames of ``split`` under ``root_path``; reads ``manifest.json`` when no manifest is given."""
    root = Path(root_path)
    if not (root / "images").is_dir():
        raise IngestionError(f"{root} has no images/ directory")
    if manifest is None:
        manifest = SplitManifest.load(root / "manifest.json")
    manifest.validate()
    return L3DSplit(root, manifest.split(split), depth_provider, resolution)


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    angle: float = 0.0  # degrees
    scale: float = 1.0  # crop side as a fraction of the frame
    offset: tuple[float, float] = (0.0, 0.0)  # crop origin in pixels (x, y)

    def matrix(self, h: int, w: int) -> np.ndarray:
        """2x3 affine mapping input pixel coordinates to output coordinates."""
        m = np.eye(3)
        if self.flip:
            m = np.array([[-1.0, 0, w - 1], [0, 1, 0], [0, 0, 1]]) @ m
        if self.angle:
            rot = np.vstack([cv2.getRotationMatrix2D(((w - 1) / 2, (h - 1) / 2), self.angle, 1.0), [0, 0, 1]])
            m = rot @ m
        if self.scale != 1.0 or self.offset != (0.0, 0.0):
            ox, oy = self.offset
            crop = np.array([[1 / self.scale, 0, -ox / self.scale],
                             [0, 1 / self.scale, -oy / self.scale], [0, 0, 1]])
            m = crop @ m
        return m[:2]


def draw_augment_params(seed: int, h: int, w: int, max_angle: float = 15.0,
                        scale_range: tuple[float, float] = (0.8, 1.0)) -> AugmentParams:
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-max_angle, max_angle))
    scale = float(rng.uniform(*scale_range))
    offset = (float(rng.uniform(0, w * (1 - scale))), float(rng.uniform(0, h * (1 - scale))))
    return AugmentParams(flip, angle, scale, offset)


def warp(a: np.ndarray, params: AugmentParams, nearest: bool = False) -> np.ndarray:
    """Apply ``params`` to a channel-first array."""
    h, w = a.shape[1:]
    if params == AugmentParams():
        return a.copy()
    m = params.matrix(h, w)
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    out = [cv2.warpAffine(ch, m, (w, h), flags=interp, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
           for ch in a]
    return np.stack(out).astype(a.dtype)


def hflip(sample: FrameSample) -> FrameSample:
    return replace(sample, rgb=sample.rgb[:, :, ::-1].copy(), depth=sample.depth[:, :, ::-1].copy(),
                   masks=sample.masks[:, :, ::-1].copy())


def apply_augment(sample: FrameSample, params: AugmentParams) -> FrameSample:
    masks = warp(sample.masks, params, nearest=True)
    present = tuple(bool(p and m.any()) for p, m in zip(sample.present, masks))
    return replace(
        sample,
        rgb=np.clip(warp(sample.rgb, params), 0, 1),
        depth=np.clip(warp(sample.depth, params), 0, 1),
        masks=masks,
        present=present,
    )


def augment(sample: FrameSample, seed: int) -> FrameSample:
    """Random flip, rotation and crop, applied identically to every array."""
    h, w = sample.size
    return apply_augment(sample, draw_augment_params(seed, h, w))
