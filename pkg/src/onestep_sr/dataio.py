"""HR/LR pair synthesis and deterministic batch iteration.

Degradation is a single stage: Gaussian blur, downsample, additive Gaussian
noise, optional JPEG. Every random draw comes from a ``numpy`` generator
seeded from ``(seed, epoch, index)``, so the emitted sequence depends only on
the dataset, the parameters and the seed.
"""

from __future__ import annotations

import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

KERNELS = ("bicubic", "bilinear", "area")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class DegradeParams:
    # defaults follow the first degradation stage of Real-ESRGAN
    scale: int = 4
    blur_sigma_range: tuple[float, float] = (0.2, 3.0)
    noise_sigma_range: tuple[float, float] = (1 / 255, 30 / 255)
    # None disables JPEG
    jpeg_quality_range: tuple[int, int] | None = (30, 95)
    resample_kernels: tuple[str, ...] = ("bicubic", "bilinear", "area")

    def __post_init__(self):
        self.blur_sigma_range = tuple(self.blur_sigma_range)
        self.noise_sigma_range = tuple(self.noise_sigma_range)
        self.resample_kernels = tuple(self.resample_kernels)
        if self.jpeg_quality_range is not None:
            self.jpeg_quality_range = tuple(int(q) for q in self.jpeg_quality_range)
        if int(self.scale) != self.scale or self.scale < 1:
            raise ConfigError(f"scale must be an integer >= 1, got {self.scale}")
        for name in ("blur_sigma_range", "noise_sigma_range", "jpeg_quality_range"):
            r = getattr(self, name)
            if r is None:
                continue
            if len(r) != 2 or r[0] > r[1] or r[0] < 0:
                raise ConfigError(f"{name} must be a non-empty interval [lo, hi] with lo >= 0, got {r}")
        if self.jpeg_quality_range is not None and not 1 <= self.jpeg_quality_range[0] <= self.jpeg_quality_range[1] <= 100:
            raise ConfigError(f"jpeg_quality_range must lie in [1, 100], got {self.jpeg_quality_range}")
        if not self.resample_kernels or any(k not in KERNELS for k in self.resample_kernels):
            raise ConfigError(f"resample_kernels must be a non-empty subset of {KERNELS}")

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


class PairBatch(NamedTuple):
    hr: torch.Tensor
    lr: torch.Tensor
    lr_up: torch.Tensor


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(2, np.uint64)[0] >> 1)


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    if sigma <= 0:
        return x
    radius = max(1, int(math.ceil(3 * sigma)))
    ax = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (ax / sigma) ** 2)
    k = (k / k.sum()).to(x.dtype)
    C = x.shape[1]
    pad = min(radius, x.shape[-1] - 1, x.shape[-2] - 1)
    xp = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    if pad < radius:
        xp = F.pad(xp, (radius - pad,) * 4, mode="replicate")
    kh = k.view(1, 1, 1, -1).repeat(C, 1, 1, 1)
    kv = k.view(1, 1, -1, 1).repeat(C, 1, 1, 1)
    return F.conv2d(F.conv2d(xp, kh, groups=C), kv, groups=C)


def resize(x: torch.Tensor, size: tuple[int, int], kernel: str) -> torch.Tensor:
    if kernel == "area":
        return F.interpolate(x, size=size, mode="area")
    antialias = size[0] < x.shape[-2]
    return F.interpolate(x, size=size, mode=kernel, align_corners=False, antialias=antialias)


def jpeg(x: torch.Tensor, quality: int) -> torch.Tensor:
    """Round-trip a single (C, H, W) image through an in-memory JPEG encode."""
    arr = (x.clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255.0).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    out = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(out).permute(2, 0, 1).to(x.dtype)


def degrade(hr: torch.Tensor, p: DegradeParams, seed: int) -> torch.Tensor:
    """Synthesize an LR batch from ``hr`` (B, 3, H, W) in [0, 1].

    Parameters are sampled per image from ``p``'s ranges; the output is
    fully determined by ``seed``.
    """
    if hr.dim() != 4:
        raise ShapeError(f"expected (B, C, H, W), got {tuple(hr.shape)}")
    H, W = hr.shape[-2:]
    if H % p.scale or W % p.scale:
        raise ShapeError(f"size {(H, W)} not divisible by scale {p.scale}")
    out = []
    for i in range(hr.shape[0]):
        rng = np.random.default_rng(derive_seed(seed, i))
        x = hr[i : i + 1]
        sigma = rng.uniform(*p.blur_sigma_range)
        x = gaussian_blur(x, sigma)
        kernel = p.resample_kernels[rng.integers(len(p.resample_kernels))]
        if p.scale > 1:
            x = resize(x, (H // p.scale, W // p.scale), kernel)
        nsig = rng.uniform(*p.noise_sigma_range)
        if nsig > 0:
            noise = rng.standard_normal(x.shape).astype(np.float32)
            x = x + nsig * torch.from_numpy(noise).to(x.dtype)
        x = x.clamp(0, 1)
        if p.jpeg_quality_range is not None:
            q = rng.integers(p.jpeg_quality_range[0], p.jpeg_quality_range[1] + 1)
            x = jpeg(x[0], q)[None]
        out.append(x)
    return torch.cat(out).clamp(0, 1)


def upsample(lr: torch.Tensor, scale: int) -> torch.Tensor:
    """Bicubic upsample by an integer factor, clipped to [0, 1]."""
    if scale < 1:
        raise ConfigError(f"scale must be >= 1, got {scale}")
    if scale == 1:
        return lr.clone()
    H, W = lr.shape[-2:]
    up = F.interpolate(lr, size=(H * scale, W * scale), mode="bicubic", align_corners=False)
    return up.clamp(0, 1)


def load_image(path) -> torch.Tensor:
    """Read an image file as a (3, H, W) float tensor in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.copy()).permute(2, 0, 1)


def save_image(x: torch.Tensor, path) -> None:
    arr = (x.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"dataset directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(directory, patch_size: int) -> tuple[list[torch.Tensor], list[Path]]:
    """Decode every image at least ``patch_size`` on each side; skip the rest with a warning."""
    images, names = [], []
    for path in list_images(directory):
        try:
            img = load_image(path)
        except Exception as exc:  # undecodable files are skipped, not fatal
            log.warning("skipping unreadable image %s: %s", path, exc)
            continue
        if min(img.shape[-2:]) < patch_size:
            log.warning("skipping undersized image %s (%dx%d < %d)", path, img.shape[-1], img.shape[-2], patch_size)
            continue
        images.append(img)
        names.append(path)
    if not images:
        raise ConfigError(f"no usable images (>= {patch_size}px) in {directory}")
    return images, names


def make_pair(img: torch.Tensor, p: DegradeParams, patch_size: int, seed: int,
              center: bool = False, augment: bool = False) -> PairBatch:
    """Crop one patch from ``img`` and degrade it; a pure function of its arguments.

    ``augment`` applies a random flip and 90-degree rotation to the HR crop,
    drawn from a separate stream so crops and degradations stay unchanged.
    """
    if patch_size % p.scale:
        raise ConfigError(f"patch_size {patch_size} not divisible by scale {p.scale}")
    rng = np.random.default_rng(seed)
    H, W = img.shape[-2:]
    if center:
        top, left = (H - patch_size) // 2, (W - patch_size) // 2
    else:
        top = int(rng.integers(0, H - patch_size + 1))
        left = int(rng.integers(0, W - patch_size + 1))
    hr = img[None, :, top : top + patch_size, left : left + patch_size]
    if augment:
        arng = np.random.default_rng(derive_seed(seed, 0xA06))
        if arng.integers(2):
            hr = hr.flip(-1)
        hr = torch.rot90(hr, int(arng.integers(4)), dims=(-2, -1))
    hr = hr.contiguous()
    lr = degrade(hr, p, int(rng.integers(2**62)))
    return PairBatch(hr, lr, upsample(lr, p.scale))


def collate(pairs: list[PairBatch]) -> PairBatch:
    return PairBatch(*(torch.cat(xs) for xs in zip(*pairs)))


def iterate_pairs(directory, p: DegradeParams, batch: int, seed: int, patch_size: int = 64,
                  epochs: int | None = None, start_batch: int = 0, epoch_cycle: int | None = None,
                  images: list[torch.Tensor] | None = None, augment: bool = False) -> Iterator[PairBatch]:
    """Yield seeded batches of random-crop training pairs (drop-last).

    Each epoch visits a seeded permutation of the images. Item ``i`` of epoch
    ``e`` is built from seed ``(seed, e, i)`` only, so any batch can be
    regenerated without replaying earlier ones (``start_batch`` resumes).
    With ``epoch_cycle=k`` the crops/degradations repeat every ``k`` epochs
    and are memoized, so the degradation cost is paid once per item.
    """
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    if images is None:
        images, _ = load_dataset(directory, patch_size)
    n = len(images)
    per_epoch = n // batch
    if per_epoch == 0:
        raise ConfigError(f"dataset of {n} images is smaller than one batch of {batch}")
    memo: dict[tuple[int, int], PairBatch] = {}
    b = start_batch
    while epochs is None or b < epochs * per_epoch:
        epoch, pos = divmod(b, per_epoch)
        eseed = epoch % epoch_cycle if epoch_cycle else epoch
        perm = np.random.default_rng(derive_seed(seed, eseed, 0xE90C)).permutation(n)
        pairs = []
        for k in range(pos * batch, (pos + 1) * batch):
            idx = int(perm[k])
            key = (eseed, idx)
            pair = memo.get(key)
            if pair is None:
                pair = make_pair(images[idx], p, patch_size, derive_seed(seed, eseed, idx), augment=augment)
                if epoch_cycle:
                    memo[key] = pair
            pairs.append(pair)
        yield collate(pairs)
        b += 1


def fixed_pairs(directory, p: DegradeParams, seed: int, patch_size: int = 64,
                limit: int | None = None) -> PairBatch:
    """Deterministic center-crop pairs for evaluation."""
    images, _ = load_dataset(directory, patch_size)
    if limit is not None:
        images = images[:limit]
    return collate([make_pair(img, p, patch_size, derive_seed(seed, i), center=True)
                    for i, img in enumerate(images)])


def tensor_hash(*tensors: torch.Tensor) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
