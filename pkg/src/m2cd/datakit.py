"""Dataset handling: synthetic multimodal pair generation, a loader for the
on-disk pair layout, training augmentations, and flip-based test-time
augmentation.

Disk layout: ``ROOT/{train,val,test}/{pre,post,label}/NAME.png``, 8-bit,
labels 0/255. The synthetic generator renders colored shapes on a textured
background for the optical pre-event image and a speckled grayscale
reflectivity rendering for the SAR-like post-event image; the change label
is exactly the set of pixels whose shape occupancy differs between epochs.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .errors import ConfigurationError, DataError
from .speckle import SpeckleConfig, sample_speckle

SPLITS = ("train", "val", "test")


@dataclass
class ImagePair:
    """One training/eval unit: pre-event optical, post-event SAR-like, change mask."""

    pre_event: np.ndarray  # (3, H, W) float32 in [0, 1]
    post_event: np.ndarray  # (3, H, W) float32, >= 0
    label: np.ndarray  # (H, W) uint8 in {0, 1}
    id: str = ""

    def __post_init__(self):
        if self.pre_event.ndim != 3 or self.post_event.ndim != 3 or self.label.ndim != 2:
            raise DataError(f"bad array ranks for pair {self.id!r}")
        if (
            self.pre_event.shape[1:] != self.label.shape
            or self.post_event.shape[1:] != self.label.shape
        ):
            raise DataError(
                f"pair {self.id!r} not spatially aligned: pre {self.pre_event.shape}, "
                f"post {self.post_event.shape}, label {self.label.shape}"
            )
        lab = np.unique(self.label)
        if not np.all(np.isin(lab, (0, 1))):
            raise DataError(f"pair {self.id!r} label must be binary, found {lab[:8]}")

    @property
    def size(self) -> tuple[int, int]:
        return self.label.shape


@dataclass(frozen=True)
class SyntheticSceneConfig:
    size: tuple[int, int] = (128, 128)
    num_shapes: tuple[int, int] = (4, 9)
    change_fraction: tuple[float, float] = (0.2, 0.6)
    looks: float = 1.0
    seed: int = 0
    # SAR reflectivity range of the shapes; lowering it toward the background
    # (roughly 0.08-0.23) makes the post-event modality genuinely hard.
    shape_reflectivity: tuple[float, float] = (0.55, 0.95)

    def __post_init__(self):
        h, w = self.size
        if h < 16 or w < 16:
            raise ConfigurationError(f"scene size too small: {self.size}")
        lo, hi = self.change_fraction
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigurationError(f"change_fraction must be within [0, 1], got {self.change_fraction}")
        if self.num_shapes[0] < 1 or self.num_shapes[1] < self.num_shapes[0]:
            raise ConfigurationError(f"bad num_shapes range {self.num_shapes}")
        if self.seed < 0:
            raise ConfigurationError("seed must be nonnegative")
        rlo, rhi = self.shape_reflectivity
        if not (0.0 < rlo <= rhi):
            raise ConfigurationError(f"bad shape_reflectivity range {self.shape_reflectivity}")


def _low_freq_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, size=(max(h // 8, 2), max(w // 8, 2))).astype(np.float32)
    return cv2.resize(coarse, (w, h), interpolation=cv2.INTER_LINEAR)


def _ellipse_mask(h, w, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    cy = rng.uniform(0.15 * h, 0.85 * h)
    cx = rng.uniform(0.15 * w, 0.85 * w)
    a = rng.uniform(0.05, 0.18) * w
    b = rng.uniform(0.05, 0.18) * h
    theta = rng.uniform(0, np.pi)
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _polygon_mask(h, w, rng: np.random.Generator) -> np.ndarray:
    n = int(rng.integers(3, 7))
    cy = rng.uniform(0.15 * h, 0.85 * h)
    cx = rng.uniform(0.15 * w, 0.85 * w)
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    radii = rng.uniform(0.06, 0.18, size=n) * min(h, w)
    pys = cy + radii * np.sin(angles)
    pxs = cx + radii * np.cos(angles)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    # Vertices are angle-sorted around the center, so consecutive-edge
    # cross products with a consistent sign define the interior.
    mask = np.ones((h, w), dtype=bool)
    for i in range(n):
        x0, y0 = pxs[i], pys[i]
        x1, y1 = pxs[(i + 1) % n], pys[(i + 1) % n]
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        mask &= cross >= 0
    return mask


def _random_shape_mask(h, w, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < 0.5:
        return _ellipse_mask(h, w, rng)
    return _polygon_mask(h, w, rng)


def generate_scene(config: SyntheticSceneConfig, index: int = 0, return_info: bool = False):
    """Render one deterministic synthetic pair.

    Shapes are placed without overlap (rejection sampling); a drawn fraction
    of them is toggled to appear in exactly one epoch while the rest appear
    in both, so the label is exactly the union of the toggled supports. The
    post-event image is a speckled grayscale reflectivity rendering of the
    post-epoch scene, channel-replicated.

    With ``return_info`` the per-shape masks and toggle sets come back too,
    for diagnostics and independent re-rasterization checks.
    """
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, index)))
    h, w = config.size

    tex = _low_freq_texture(rng, h, w)
    base_rgb = rng.uniform(0.25, 0.55, size=3).astype(np.float32)
    optical = np.clip(base_rgb[:, None, None] + 0.06 * tex[None], 0.0, 1.0)

    sar_tex = _low_freq_texture(rng, h, w)
    refl = np.clip(rng.uniform(0.08, 0.18) + 0.05 * sar_tex, 0.02, None).astype(np.float32)

    k = int(rng.integers(config.num_shapes[0], config.num_shapes[1] + 1))
    occupied = np.zeros((h, w), dtype=bool)
    masks, colors, refls = [], [], []
    for _ in range(k):
        for _attempt in range(20):
            m = _random_shape_mask(h, w, rng)
            if m.any() and not (m & occupied).any():
                occupied |= m
                masks.append(m)
                color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
                while np.max(np.abs(color - base_rgb)) < 0.25:
                    color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
                colors.append(color)
                refls.append(np.float32(rng.uniform(*config.shape_reflectivity)))
                break
    k = len(masks)
    if k == 0:
        raise DataError("failed to place any shape; scene size likely degenerate")

    frac = rng.uniform(*config.change_fraction)
    n_changed = int(np.clip(round(frac * k), 0, k))
    changed = set(rng.choice(k, size=n_changed, replace=False).tolist()) if n_changed else set()
    pre_only = {i for i in changed if rng.random() < 0.5}
    post_only = changed - pre_only

    label = np.zeros((h, w), dtype=np.uint8)
    for i, m in enumerate(masks):
        if i in pre_only or i in post_only:
            label[m] = 1
        if i not in post_only:  # present in pre epoch
            optical[:, m] = colors[i][:, None]
        if i not in pre_only:  # present in post epoch
            refl[m] = refls[i]

    speckle_cfg = SpeckleConfig(looks=config.looks, seed=config.seed)
    s = sample_speckle((h, w), speckle_cfg, rng=rng)
    post = np.repeat((refl * s)[None], 3, axis=0)

    pair = ImagePair(
        pre_event=optical.astype(np.float32),
        post_event=post.astype(np.float32),
        label=label,
        id=f"scene-{config.seed}-{index:05d}",
    )
    if return_info:
        info = {
            "shape_masks": masks,
            "pre_only": pre_only,
            "post_only": post_only,
            "changed": changed,
        }
        return pair, info
    return pair


class SyntheticChangeDataset:
    """Sequence of deterministic synthetic pairs.

    With ``quantize`` on (default) pairs go through the same 8-bit clip and
    round trip they would get when written to and read back from PNG, and
    are cached as uint8.
    """

    def __init__(
        self,
        config: SyntheticSceneConfig,
        num_pairs: int,
        start_index: int = 0,
        quantize: bool = True,
        cache: bool = True,
    ):
        if num_pairs < 0:
            raise ConfigurationError("num_pairs must be >= 0")
        self.config = config
        self.num_pairs = num_pairs
        self.start_index = start_index
        self.quantize = quantize
        self._cache: dict[int, tuple] | None = {} if cache else None

    def __len__(self) -> int:
        return self.num_pairs

    def __getitem__(self, i: int) -> ImagePair:
        if not (0 <= i < self.num_pairs):
            raise IndexError(i)
        if self._cache is not None and i in self._cache:
            pre_u8, post_u8, label, pid = self._cache[i]
            return ImagePair(
                pre_event=pre_u8.astype(np.float32) / 255.0,
                post_event=post_u8.astype(np.float32) / 255.0,
                label=label.copy(),
                id=pid,
            )
        pair = generate_scene(self.config, index=self.start_index + i)
        if not self.quantize:
            return pair
        pre_u8 = np.round(np.clip(pair.pre_event, 0, 1) * 255).astype(np.uint8)
        post_u8 = np.round(np.clip(pair.post_event, 0, 1) * 255).astype(np.uint8)
        if self._cache is not None:
            self._cache[i] = (pre_u8, post_u8, pair.label, pair.id)
        return ImagePair(
            pre_event=pre_u8.astype(np.float32) / 255.0,
            post_event=post_u8.astype(np.float32) / 255.0,
            label=pair.label,
            id=pair.id,
        )


def _save_png(path: Path, arr: np.ndarray, mode: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode=mode).save(path)


def build_synthetic_dataset(root: str | Path, num_pairs: int, config: SyntheticSceneConfig) -> dict:
    """Write a train/val/test PNG tree (3:1:1 split) of synthetic pairs."""
    root = Path(root)
    n_val = num_pairs // 5
    n_test = num_pairs // 5
    n_train = num_pairs - n_val - n_test
    counts = {"train": n_train, "val": n_val, "test": n_test}
    index = 0
    for split in SPLITS:
        for _ in range(counts[split]):
            pair = generate_scene(config, index=index)
            name = f"{index:05d}.png"
            pre_u8 = np.round(np.clip(pair.pre_event, 0, 1) * 255).astype(np.uint8)
            post_u8 = np.round(np.clip(pair.post_event[0], 0, 1) * 255).astype(np.uint8)
            _save_png(root / split / "pre" / name, pre_u8.transpose(1, 2, 0), "RGB")
            _save_png(root / split / "post" / name, post_u8, "L")
            _save_png(root / split / "label" / name, pair.label * 255, "L")
            index += 1
    return counts


class PairFolderDataset:
    """Lazy loader over the documented PNG directory layout.

    Presence and spatial sizes of every triple are checked up front (image
    headers only); pixel decoding happens per access. Optical images are
    normalized to [0, 1], post-event images are read as single-channel
    intensity and replicated to three channels, labels binarize at >127.
    """

    def __init__(self, root: str | Path, split: str):
        if split not in SPLITS:
            raise ConfigurationError(f"split must be one of {SPLITS}, got {split!r}")
        self.root = Path(root)
        self.split = split
        base = self.root / split
        dirs = {name: base / name for name in ("pre", "post", "label")}
        names: dict[str, set[str]] = {}
        for key, d in dirs.items():
            names[key] = {p.name for p in d.glob("*.png")} if d.is_dir() else set()
        all_names = sorted(set().union(*names.values()))
        self.ids: list[str] = []
        self.rejected: list[str] = []
        for name in all_names:
            if all(name in names[key] for key in dirs):
                self.ids.append(name)
            else:
                missing = [key for key in dirs if name not in names[key]]
                self.rejected.append(name)
                warnings.warn(f"{name}: missing {missing} counterpart(s), rejected")
        if not self.ids:
            warnings.warn(f"no complete image triples under {base}")
        self._dirs = dirs
        for name in self.ids:
            sizes = {}
            for key, d in dirs.items():
                with Image.open(d / name) as im:
                    sizes[key] = im.size
            if len(set(sizes.values())) != 1:
                detail = ", ".join(f"{dirs[k] / name}={v}" for k, v in sizes.items())
                raise DataError(f"size mismatch within triple {name}: {detail}")

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> ImagePair:
        name = self.ids[i]
        try:
            pre = np.asarray(Image.open(self._dirs["pre"] / name).convert("RGB"))
            post = np.asarray(Image.open(self._dirs["post"] / name).convert("L"))
            label = np.asarray(Image.open(self._dirs["label"] / name).convert("L"))
        except OSError as exc:
            raise DataError(f"cannot read images for {name}: {exc}") from exc
        pre_f = pre.astype(np.float32).transpose(2, 0, 1) / 255.0
        post_f = np.repeat(post.astype(np.float32)[None] / 255.0, 3, axis=0)
        return ImagePair(
            pre_event=pre_f,
            post_event=post_f,
            label=(label > 127).astype(np.uint8),
            id=name,
        )


def load_dataset(root: str | Path, split: str) -> PairFolderDataset:
    return PairFolderDataset(root, split)


@dataclass(frozen=True)
class RotateConfig:
    enabled: bool = True
    max_degrees: float = 180.0
    prob: float = 0.5


@dataclass(frozen=True)
class FlipConfig:
    enabled: bool = True
    horizontal: bool = True
    vertical: bool = True
    prob: float = 0.5


@dataclass(frozen=True)
class PhotometricConfig:
    enabled: bool = True
    brightness_delta: float = 32.0 / 255.0
    contrast_range: tuple[float, float] = (0.5, 1.5)
    saturation_range: tuple[float, float] = (0.5, 1.5)
    hue_delta: float = 18.0
    prob: float = 0.5


@dataclass(frozen=True)
class AugmentationConfig:
    rotate: RotateConfig = field(default_factory=RotateConfig)
    flip: FlipConfig = field(default_factory=FlipConfig)
    photometric: PhotometricConfig = field(default_factory=PhotometricConfig)


@dataclass
class AugmentParams:
    """One concrete draw of the augmentation pipeline."""

    flip_h: bool = False
    flip_v: bool = False
    angle: float | None = None
    brightness: float | None = None
    contrast: float | None = None
    saturation: float | None = None
    hue: float | None = None


def draw_augment_params(config: AugmentationConfig, rng: np.random.Generator) -> AugmentParams:
    p = AugmentParams()
    if config.flip.enabled:
        if config.flip.horizontal and rng.random() < config.flip.prob:
            p.flip_h = True
        if config.flip.vertical and rng.random() < config.flip.prob:
            p.flip_v = True
    if config.rotate.enabled and rng.random() < config.rotate.prob:
        p.angle = float(rng.uniform(-config.rotate.max_degrees, config.rotate.max_degrees))
    ph = config.photometric
    if ph.enabled:
        if rng.random() < ph.prob:
            p.brightness = float(rng.uniform(-ph.brightness_delta, ph.brightness_delta))
        if rng.random() < ph.prob:
            p.contrast = float(rng.uniform(*ph.contrast_range))
        if rng.random() < ph.prob:
            p.saturation = float(rng.uniform(*ph.saturation_range))
        if rng.random() < ph.prob:
            p.hue = float(rng.uniform(-ph.hue_delta, ph.hue_delta))
    return p


def _rotate(arr: np.ndarray, angle: float, is_label: bool) -> np.ndarray:
    """Rotate (C, H, W) images or (H, W) labels; reflection border.

    Exact multiples of 90 degrees reduce to index permutations.
    """
    if angle % 90.0 == 0.0:
        k = int(angle // 90) % 4
        axes = (0, 1) if arr.ndim == 2 else (1, 2)
        return np.ascontiguousarray(np.rot90(arr, k=k, axes=axes))
    hwc = arr if arr.ndim == 2 else arr.transpose(1, 2, 0)
    h, w = hwc.shape[:2]
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle, 1.0)
    interp = cv2.INTER_NEAREST if is_label else cv2.INTER_LINEAR
    out = cv2.warpAffine(hwc, m, (w, h), flags=interp, borderMode=cv2.BORDER_REFLECT_101)
    return out if arr.ndim == 2 else out.transpose(2, 0, 1)


def apply_geometric(arr: np.ndarray, params: AugmentParams, is_label: bool = False) -> np.ndarray:
    out = arr
    w_axis = out.ndim - 1
    h_axis = out.ndim - 2
    if params.flip_h:
        out = np.flip(out, axis=w_axis)
    if params.flip_v:
        out = np.flip(out, axis=h_axis)
    out = np.ascontiguousarray(out)
    if params.angle is not None:
        out = _rotate(out, params.angle, is_label=is_label)
    return out


def apply_photometric(pre: np.ndarray, params: AugmentParams) -> np.ndarray:
    out = pre.copy()
    if params.brightness is not None:
        out = out + params.brightness
    if params.contrast is not None:
        out = out * params.contrast
    if params.saturation is not None or params.hue is not None:
        hsv = cv2.cvtColor(np.clip(out, 0, 1).transpose(1, 2, 0), cv2.COLOR_RGB2HSV)
        if params.saturation is not None:
            hsv[..., 1] = np.clip(hsv[..., 1] * params.saturation, 0.0, 1.0)
        if params.hue is not None:
            hsv[..., 0] = (hsv[..., 0] + params.hue) % 360.0
        out = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB).transpose(2, 0, 1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_augment(pair: ImagePair, params: AugmentParams) -> ImagePair:
    """Apply one drawn transform set: geometric ops hit pre, post, and label
    identically; photometric distortion touches the optical pre image only."""
    pre = apply_geometric(pair.pre_event, params)
    post = apply_geometric(pair.post_event, params)
    label = apply_geometric(pair.label, params, is_label=True)
    pre = apply_photometric(pre, params)
    return ImagePair(
        pre_event=np.ascontiguousarray(pre, dtype=np.float32),
        post_event=np.ascontiguousarray(np.clip(post, 0.0, None), dtype=np.float32),
        label=np.ascontiguousarray(label, dtype=np.uint8),
        id=pair.id,
    )


def augment(pair: ImagePair, config: AugmentationConfig, rng: np.random.Generator) -> ImagePair:
    return apply_augment(pair, draw_augment_params(config, rng))


_FLIP_COMBOS = ((False, False), (True, False), (False, True), (True, True))


def tta_predict(model, pre: Tensor, post: Tensor) -> Tensor:
    """Average change probabilities over the four flip views.

    Each view flips both inputs, predicts, and un-flips the prediction
    before averaging. Inputs are (B, C, H, W); output matches the model's
    (B, 1, H, W) probability map.
    """
    with torch.no_grad():
        acc = None
        for flip_h, flip_v in _FLIP_COMBOS:
            dims = []
            if flip_h:
                dims.append(-1)
            if flip_v:
                dims.append(-2)
            a = torch.flip(pre, dims) if dims else pre
            b = torch.flip(post, dims) if dims else post
            out = model(a, b)
            if dims:
                out = torch.flip(out, dims)
            acc = out if acc is None else acc + out
    return acc / len(_FLIP_COMBOS)


def pair_to_tensors(pair: ImagePair) -> tuple[Tensor, Tensor, Tensor]:
    pre = torch.from_numpy(np.ascontiguousarray(pair.pre_event))
    post = torch.from_numpy(np.ascontiguousarray(pair.post_event))
    label = torch.from_numpy(np.ascontiguousarray(pair.label)).to(torch.float32)
    return pre, post, label
