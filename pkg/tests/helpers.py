"""Shared test utilities: finite-difference gradient checks and toy embedders."""

import torch


def fd_relative_error(f, x: torch.Tensor, h: float = 1e-6) -> float:
    """Max relative error between autograd and central differences of scalar f at x."""
    x = x.detach().clone().double().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    num = torch.zeros_like(x)
    flat = x.detach().view(-1)
    for i in range(flat.numel()):
        xp = flat.clone()
        xm = flat.clone()
        xp[i] += h
        xm[i] -= h
        num.view(-1)[i] = (f(xp.view_as(x)) - f(xm.view_as(x))) / (2 * h)
    return ((g - num).norm() / num.norm().clamp_min(1e-12)).item()


class LinearTanhEmbedder(torch.nn.Module):
    """Smooth fixed embedder for gradient checks on tiny images."""

    def __init__(self, in_features=48, dim=16, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.W = torch.randn(dim, in_features, generator=g, dtype=torch.float64) / in_features**0.5

    def forward(self, x):
        v = torch.tanh(x.flatten(1) @ self.W.T)
        return v / v.norm(dim=1, keepdim=True)


class FixedEmbedder(torch.nn.Module):
    """Returns preset vectors, one call after another."""

    def __init__(self, *vectors):
        super().__init__()
        self.vectors = list(vectors)

    def forward(self, x):
        return self.vectors.pop(0)


def write_random_images(root, n, size=32, seed=0):
    import numpy as np
    from PIL import Image

    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        # smooth random fields so blur and downsampling leave something to learn
        base = rng.random((size // 8, size // 8, 3))
        img = np.kron(base, np.ones((8, 8, 1))) * 0.7 + 0.3 * rng.random((size, size, 3))
        Image.fromarray((img * 255).astype(np.uint8)).save(root / f"{i:04d}.png")
    return root


def tiny_config(data_dir, *overrides):
    """Identity codec, 16px patches, narrow networks: seconds per run on CPU."""
    from onestep_sr.config import load_config

    base = [
        f"data.train_dir={data_dir}", f"data.val_dir={data_dir}", "data.patch_size=16", "data.epoch_cycle=1",
        "data.degrade.noise_sigma_range=[0.0, 0.02]", "data.degrade.jpeg_quality_range=null",
        "model.codec=identity", "model.spatial_factor=1", "model.latent_channels=3",
        "model.denoiser_width=16", "model.disc_width=8", "model.embed_dim=16", "model.embed_input_size=16",
        "schedule.T=4", "teacher.iterations=20", "teacher.batch_size=2", "teacher.lr=1e-3",
        "distill.iterations=6", "distill.batch_size=2", "train.log_every=5", "train.checkpoint_every=10",
    ]
    return load_config(None, base + list(overrides))
