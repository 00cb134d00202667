"""Network roles: latent codec, denoiser, patch discriminator, semantic embedder.

All are miniature stand-ins sized for CPU training. The denoiser predicts
``x0`` from ``(x_t, y, t)``; ``y`` enters by channel concatenation and ``t``
through a sinusoidal embedding.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    module.frozen = True
    return module


def param_checksum(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# Codec
# --------------------------------------------------------------------------


class Codec(nn.Module):
    spatial_factor: int = 1
    latent_channels: int = 3
    frozen: bool = False

    def _check_image(self, x):
        if x.dim() != 4:
            raise ShapeError(f"expected (B, C, H, W), got {tuple(x.shape)}")
        f = self.spatial_factor
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ShapeError(f"image size {tuple(x.shape[-2:])} not divisible by {f}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x)
        return self._encode(x)

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.latent_channels:
            raise ShapeError(f"latent must be (B, {self.latent_channels}, h, w), got {tuple(z.shape)}")
        return self._decode(z)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(z).clamp(0, 1)

    def forward(self, x):
        return self.decode(self.encode(x))


class IdentityCodec(Codec):
    """Pixel-space runs: latent == image."""

    def __init__(self, channels: int = 3):
        super().__init__()
        self.latent_channels = channels
        self.frozen = True

    def _encode(self, x):
        return x

    def _decode(self, z):
        return z


class ConvAutoencoder(Codec):
    """Tiny nonlinear autoencoder with a fixed factor of 4; needs gradient pretraining."""

    def __init__(self, latent_channels: int = 8, width: int = 32, spatial_factor: int = 4):
        super().__init__()
        if spatial_factor != 4:
            raise ConfigError(f"conv codec supports spatial_factor=4 only, got {spatial_factor}")
        self.spatial_factor = spatial_factor
        self.latent_channels = latent_channels
        w = width
        self.enc = nn.Sequential(
            nn.Conv2d(3, w, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, 1, 1), nn.SiLU(),
            nn.Conv2d(2 * w, latent_channels, 3, 1, 1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * w, 3, 1, 1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, 1, 1), nn.SiLU(),
            nn.ConvTranspose2d(2 * w, w, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(w, 12, 3, 1, 1), nn.PixelShuffle(2),
        )

    def _encode(self, x):
        return self.enc(x * 2 - 1)

    def _decode(self, z):
        return (self.dec(z) + 1) / 2


class LinearPatchCodec(Codec):
    """Linear autoencoder: a stride-f f x f conv encoder and its transpose as decoder.

    ``fit`` sets the weights to the reconstruction-optimal solution (principal
    components of f x f x 3 patches), which is what gradient training of this
    architecture converges to.
    """

    def __init__(self, latent_channels: int = 8, spatial_factor: int = 4):
        super().__init__()
        self.spatial_factor = spatial_factor
        self.latent_channels = latent_channels
        k = 3 * spatial_factor**2
        if latent_channels > k:
            raise ConfigError(f"latent_channels {latent_channels} exceeds patch dimension {k}")
        self.register_buffer("basis", torch.eye(k)[:latent_channels].clone())
        self.register_buffer("offset", torch.zeros(k))

    @torch.no_grad()
    def fit(self, images: list[torch.Tensor]) -> "LinearPatchCodec":
        f = self.spatial_factor
        rows = []
        for im in images:
            H, W = (im.shape[-2] // f) * f, (im.shape[-1] // f) * f
            patches = F.pixel_unshuffle(im[None, :, :H, :W] * 2 - 1, f)
            rows.append(patches.permute(0, 2, 3, 1).reshape(-1, patches.shape[1]))
        X = torch.cat(rows).double()
        mu = X.mean(0)
        _, _, Vh = torch.linalg.svd(X - mu, full_matrices=False)
        basis = Vh[: self.latent_channels]
        # sign convention: largest-magnitude entry of each component positive
        signs = torch.sign(basis.gather(1, basis.abs().argmax(1, keepdim=True)))
        self.basis.copy_((basis * signs).float())
        self.offset.copy_(mu.float())
        return self

    def _encode(self, x):
        p = F.pixel_unshuffle(x * 2 - 1, self.spatial_factor) - self.offset[None, :, None, None]
        return torch.einsum("bkhw,ck->bchw", p, self.basis)

    def _decode(self, z):
        p = torch.einsum("bchw,ck->bkhw", z, self.basis) + self.offset[None, :, None, None]
        return (F.pixel_shuffle(p, self.spatial_factor) + 1) / 2


# --------------------------------------------------------------------------
# Denoiser
# --------------------------------------------------------------------------


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class UNetDenoiser(nn.Module):
    """Two down/up stages; predicts x0 given (x_t, y, t)."""

    def __init__(self, latent_channels: int = 8, width: int = 32, T: int = 15,
                 input_scales=None):
        super().__init__()
        self.latent_channels = latent_channels
        self.T = T
        self.width = width
        # x_t is divided by input_scales[t] before the first conv; index 0 unused
        scales = torch.ones(T + 1) if input_scales is None else torch.as_tensor(input_scales, dtype=torch.float32)
        if scales.shape != (T + 1,):
            raise ShapeError(f"input_scales needs T+1={T + 1} entries, got {tuple(scales.shape)}")
        self.register_buffer("input_scales", scales)
        emb_dim = 4 * width
        self.t_mlp = nn.Sequential(nn.Linear(width, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        c1, c2, c3 = width, 2 * width, 2 * width
        self.inp = nn.Conv2d(2 * latent_channels, c1, 3, padding=1)
        self.down1 = ResBlock(c1, c1, emb_dim)
        self.ds1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.down2 = ResBlock(c2, c2, emb_dim)
        self.ds2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.mid = ResBlock(c3, c3, emb_dim)
        self.up2 = ResBlock(c3 + c2, c2, emb_dim)
        self.up1 = ResBlock(c2 + c1, c1, emb_dim)
        self.out_norm = nn.GroupNorm(8, c1)
        self.out = nn.Conv2d(c1, latent_channels, 3, padding=1)

    def forward(self, x_t: torch.Tensor, y: torch.Tensor, t) -> torch.Tensor:
        if x_t.shape != y.shape:
            raise ShapeError(f"x_t {tuple(x_t.shape)} and y {tuple(y.shape)} differ")
        if x_t.shape[-1] % 4 or x_t.shape[-2] % 4:
            raise ShapeError("latent spatial size must be divisible by 4")
        if not torch.is_tensor(t):
            t = torch.full((x_t.shape[0],), int(t), dtype=torch.long, device=x_t.device)
        if t.min() < 1 or t.max() > self.T:
            raise IndexError(f"t outside [1, {self.T}]")
        emb = self.t_mlp(timestep_embedding(t, self.width).to(x_t))
        scale = self.input_scales.to(x_t)[t].view(-1, 1, 1, 1)
        h0 = self.inp(torch.cat([x_t / scale, y], dim=1))
        h1 = self.down1(h0, emb)
        h2 = self.down2(self.ds1(h1), emb)
        h = self.mid(self.ds2(h2), emb)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up2(torch.cat([h, h2], dim=1), emb)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up1(torch.cat([h, h1], dim=1), emb)
        # residual on y: an untrained net already returns a sensible x0 guess
        return y + self.out(F.silu(self.out_norm(h)))


# --------------------------------------------------------------------------
# Discriminator
# --------------------------------------------------------------------------


class PatchDiscriminator(nn.Module):
    """Three stride-2 convolutions then a 3x3 score head; one score per patch."""

    def __init__(self, in_channels: int = 8, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 4 * width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * width, 1, 3, padding=1),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or min(z.shape[-2:]) < 8:
            raise ShapeError(f"discriminator needs (B, C, >=8, >=8), got {tuple(z.shape)}")
        return self.net(z)


# --------------------------------------------------------------------------
# Embedder
# --------------------------------------------------------------------------


class RandomConvEmbedder(nn.Module):
    """Frozen random-feature image embedder with unit-norm outputs.

    Weights come from a pinned seed, so two instances built with the same
    seed are identical. ``load_weights`` swaps in external pretrained weights
    with the same layout.
    """

    def __init__(self, dim: int = 128, input_size: int = 64, width: int = 32, seed: int = 0):
        super().__init__()
        self.input_size = input_size
        self.dim = dim
        g = torch.Generator().manual_seed(seed)
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=1, padding=1), nn.GELU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1), nn.GELU(),
        )
        self.proj = nn.Linear(8 * width, dim)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    fan_in = m.weight[0].numel()
                    m.weight.copy_(torch.randn(m.weight.shape, generator=g) * math.sqrt(2.0 / fan_in))
                    m.bias.copy_(torch.randn(m.bias.shape, generator=g) * 0.1)
        self.register_buffer("mean", torch.tensor([0.5, 0.5, 0.5]).view(1, 3, 1, 1))
        freeze(self)

    def load_weights(self, path):
        self.load_state_dict(torch.load(path, map_location="cpu"))
        freeze(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W), got {tuple(x.shape)}")
        if x.shape[-2:] != (self.input_size, self.input_size):
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear",
                              align_corners=False)
        h = self.net(x - self.mean)
        # mean and std pooling: second-order statistics carry texture
        feat = torch.cat([h.mean(dim=(2, 3)), (h.var(dim=(2, 3)) + 1e-8).sqrt()], dim=1)
        v = self.proj(feat)
        return v / v.norm(dim=1, keepdim=True).clamp_min(1e-12)


def encode(codec: Codec, x: torch.Tensor) -> torch.Tensor:
    return codec.encode(x)


def decode(codec: Codec, z: torch.Tensor) -> torch.Tensor:
    return codec.decode(z)


def denoise(d: nn.Module, x_t: torch.Tensor, y: torch.Tensor, t) -> torch.Tensor:
    return d(x_t, y, t)


def discriminate(dsc: PatchDiscriminator, z: torch.Tensor) -> torch.Tensor:
    return dsc(z)


def embed(e: nn.Module, x: torch.Tensor) -> torch.Tensor:
    return e(x)


# --------------------------------------------------------------------------
# Construction and checkpoints
# --------------------------------------------------------------------------


def build_codec(kind: str = "linear", latent_channels: int = 8, width: int = 32,
                spatial_factor: int = 4) -> Codec:
    if kind == "identity":
        return IdentityCodec()
    if kind == "linear":
        return LinearPatchCodec(latent_channels=latent_channels, spatial_factor=spatial_factor)
    if kind == "conv":
        return ConvAutoencoder(latent_channels=latent_channels, width=width,
                               spatial_factor=spatial_factor)
    raise ConfigError(f"unknown codec kind {kind!r}")


def manifest_for(modules: dict[str, nn.Module]) -> dict:
    tensors = {}
    for prefix, m in modules.items():
        for name, t in m.state_dict().items():
            tensors[f"{prefix}.{name}"] = {"shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", "")}
    return {"tensors": tensors, "checksums": {k: param_checksum(m) for k, m in modules.items()}}


def save_checkpoint(path, modules: dict[str, nn.Module], extra: dict | None = None,
                    optimizers: dict | None = None) -> Path:
    """Write ``weights.pt`` plus a JSON ``manifest.json`` into directory ``path``.

    The manifest (tensor names, shapes, dtypes, checksums and whatever
    ``extra`` holds: config, config hash, schedule etas, RNG state, iteration)
    is the compatibility contract; the blob is torch-native.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = {k: m.state_dict() for k, m in modules.items()}
    if optimizers:
        blob["_optim"] = {k: o.state_dict() for k, o in optimizers.items()}
    tmp = path / "weights.pt.tmp"
    torch.save(blob, tmp)
    tmp.replace(path / "weights.pt")
    manifest = manifest_for(modules)
    manifest.update(extra or {})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_manifest(path) -> dict:
    p = Path(path) / "manifest.json"
    if not p.exists():
        raise ConfigError(f"no checkpoint manifest at {p}")
    return json.loads(p.read_text())


def load_checkpoint(path, modules: dict[str, nn.Module], optimizers: dict | None = None) -> dict:
    """Load state into ``modules`` after checking names/shapes against the manifest."""
    path = Path(path)
    manifest = read_manifest(path)
    expected = manifest_for(modules)["tensors"]
    for name, meta in expected.items():
        got = manifest["tensors"].get(name)
        if got is None or got["shape"] != meta["shape"]:
            raise ConfigError(f"checkpoint {path} incompatible at tensor {name}: {got} vs {meta}")
    blob = torch.load(path / "weights.pt", map_location="cpu")
    for k, m in modules.items():
        m.load_state_dict(blob[k])
    if optimizers:
        for k, o in optimizers.items():
            if "_optim" in blob and k in blob["_optim"]:
                o.load_state_dict(blob["_optim"][k])
    return manifest
