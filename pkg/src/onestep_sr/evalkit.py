"""Reference metrics and step-wise spectral analysis of teacher predictions.

The high-frequency energy ratio is a desk-scale proxy for perceptual detail:
the share of non-DC Fourier energy lying outside a normalized radius ``rho``
(1.0 == Nyquist along an axis).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import stats

from .errors import ConfigError, ShapeError
from .losses import cosine

SCHEMA_VERSION = 1

METRICS_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "method", "steps", "rows", "aggregate"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "method": {"type": "string"},
        "steps": {"type": "integer", "minimum": 0},
        "label": {"type": ["string", "null"]},
        "rows": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["index", "psnr", "ssim", "semantic_consistency", "seconds"],
                "properties": {
                    "index": {"type": "integer"},
                    "psnr": {"type": ["number", "string"]},
                    "ssim": {"type": "number"},
                    "semantic_consistency": {"type": "number", "minimum": -1.000001, "maximum": 1.000001},
                    "seconds": {"type": "number", "minimum": 0},
                },
            },
        },
        "aggregate": {
            "type": "object",
            "required": ["psnr", "ssim", "semantic_consistency", "seconds"],
        },
    },
}


def _check(x, ref):
    if x.shape != ref.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(ref.shape)}")
    if x.dim() != 4:
        raise ShapeError(f"expected (B, C, H, W), got {tuple(x.shape)}")


def psnr(x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Per-image PSNR in dB for data range 1; ``inf`` for identical images."""
    _check(x, ref)
    mse = (x.double() - ref.double()).pow(2).flatten(1).mean(1)
    return 10 * torch.log10(1.0 / mse)


def _gaussian_window(size=11, sigma=1.5):
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(x: torch.Tensor, ref: torch.Tensor, k1=0.01, k2=0.03, win=11, sigma=1.5) -> torch.Tensor:
    """Single-scale SSIM per image: Gaussian window, valid filtering, channel mean."""
    _check(x, ref)
    if min(x.shape[-2:]) < win:
        raise ShapeError(f"images must be at least {win}px for SSIM")
    C = x.shape[1]
    w = _gaussian_window(win, sigma).expand(C, 1, win, win)
    a, b = x.double(), ref.double()
    blur = lambda t: F.conv2d(t, w, groups=C)
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    c1, c2 = k1**2, k2**2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return s.flatten(1).mean(1)


@torch.no_grad()
def semantic_consistency(x_sr, x_gt, e) -> torch.Tensor:
    _check(x_sr, x_gt)
    return cosine(e(x_sr), e(x_gt)).double()


# --------------------------------------------------------------------------
# Spectra
# --------------------------------------------------------------------------


def _radius(H, W, device=None):
    fy = torch.fft.fftfreq(H, dtype=torch.float64, device=device) / 0.5
    fx = torch.fft.fftfreq(W, dtype=torch.float64, device=device) / 0.5
    return torch.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)


def hf_energy_ratio(x: torch.Tensor, rho: float = 0.5) -> torch.Tensor:
    """Fraction of non-DC spectral energy at normalized radius > ``rho``, per image.

    Energy is summed over channels. An image without non-DC energy maps to 0.
    """
    if not 0 < rho < 1:
        raise ConfigError(f"rho must lie in (0, 1), got {rho}")
    if x.dim() != 4:
        raise ShapeError(f"expected (B, C, H, W), got {tuple(x.shape)}")
    H, W = x.shape[-2:]
    E = torch.fft.fft2(x.double()).abs().pow(2).sum(1)
    r = _radius(H, W, x.device)
    nondc = r > 0
    total = (E * nondc).flatten(1).sum(1)
    high = (E * (r > rho)).flatten(1).sum(1)
    scale = E[:, 0, 0] + 1.0
    degenerate = total <= 1e-20 * scale * H * W
    return torch.where(degenerate, torch.zeros_like(total), high / torch.where(degenerate, 1.0, total))


def lowpass(x: torch.Tensor, frac: float = 0.25) -> torch.Tensor:
    """Ideal circular low-pass at normalized radius ``frac``."""
    H, W = x.shape[-2:]
    mask = (_radius(H, W, x.device) <= frac).to(torch.complex128)
    return torch.fft.ifft2(torch.fft.fft2(x.double()) * mask).real.to(x.dtype)


def log_spectrum(x: torch.Tensor) -> torch.Tensor:
    """Centered log(1 + |FFT|), averaged over channels: (B, H, W)."""
    Fx = torch.fft.fftshift(torch.fft.fft2(x.double()), dim=(-2, -1))
    return torch.log1p(Fx.abs()).mean(1)


@dataclass
class SpectrumReport:
    ts: list[int]
    spectra: np.ndarray            # (S, B, H, W) log-magnitude of each prediction
    lowpass_spectra: np.ndarray    # (S, B, H, W) of the low-pass components
    step_diff: np.ndarray          # (S-1, B, H, W) consecutive-step spectrum differences
    lowpass_diff: np.ndarray       # (S, B, H, W) prediction minus low-pass spectrum, same step
    lowpass_images: np.ndarray     # (S, B, C, H, W)
    hf_ratio: np.ndarray           # (S, B)
    lowpass_hf_ratio: np.ndarray   # (S, B)
    rho: float
    lowpass_frac: float
    summary: dict = field(default_factory=dict)

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        arrays = {k: v for k, v in asdict(self).items() if isinstance(v, np.ndarray)}
        np.savez_compressed(out / "spectrum_report.npz", ts=np.array(self.ts), **arrays)
        (out / "spectrum_summary.json").write_text(json.dumps(
            {"ts": self.ts, "rho": self.rho, "lowpass_frac": self.lowpass_frac, **self.summary}, indent=2))
        return out


def _slope(progress, values):
    return float(np.polyfit(np.asarray(progress, float), np.asarray(values, float), 1)[0])


def trend_summary(ts, hf_ratio, lowpass_hf_ratio, T=None) -> dict:
    """Spearman of step progress vs mean HF ratio, and linear slopes of both trajectories."""
    T = T if T is not None else max(ts)
    progress = [T - t for t in ts]
    full = hf_ratio.mean(1)
    low = lowpass_hf_ratio.mean(1)
    if len(ts) > 1:
        # a flat trajectory has no rank correlation
        rho_s = stats.spearmanr(progress, full).statistic if np.ptp(full) > 0 else float("nan")
        slope_full, slope_low = _slope(progress, full), _slope(progress, low)
    else:
        rho_s, slope_full, slope_low = float("nan"), 0.0, 0.0
    return {
        "progress": progress,
        "mean_hf_ratio": full.tolist(),
        "mean_lowpass_hf_ratio": low.tolist(),
        "spearman_progress_vs_hf": float(rho_s),
        "slope_full": slope_full,
        "slope_lowpass": slope_low,
    }


@torch.no_grad()
def analyze_steps(trace, codec=None, rho: float = 0.5, lowpass_frac: float = 0.25,
                  space: str = "pixel") -> SpectrumReport:
    """Spectral analysis of every x0 prediction in a teacher ``StepTrace``."""
    if trace is None or len(trace) == 0:
        raise ConfigError("cannot analyze an empty trace")
    if space not in ("pixel", "latent"):
        raise ConfigError(f"space must be 'pixel' or 'latent', got {space!r}")
    spectra, lp_spectra, lp_images, hf, lp_hf = [], [], [], [], []
    for x0 in trace.x0_hat:
        img = codec.decode(x0) if space == "pixel" else x0
        low = lowpass(img, lowpass_frac)
        spectra.append(log_spectrum(img))
        lp_spectra.append(log_spectrum(low))
        lp_images.append(low)
        hf.append(hf_energy_ratio(img, rho))
        lp_hf.append(hf_energy_ratio(low, rho))
    spectra = torch.stack(spectra).numpy()
    lp_spectra = torch.stack(lp_spectra).numpy()
    hf = torch.stack(hf).numpy()
    lp_hf = torch.stack(lp_hf).numpy()
    T = max(trace.ts)
    return SpectrumReport(
        ts=list(trace.ts),
        spectra=spectra,
        lowpass_spectra=lp_spectra,
        step_diff=np.diff(spectra, axis=0),
        lowpass_diff=spectra - lp_spectra,
        lowpass_images=torch.stack(lp_images).float().numpy(),
        hf_ratio=hf,
        lowpass_hf_ratio=lp_hf,
        rho=rho,
        lowpass_frac=lowpass_frac,
        summary=trend_summary(trace.ts, hf, lp_hf, T),
    )


def plot_spectrum_report(rep: SpectrumReport, out_dir, image_index: int = 0) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    S = len(rep.ts)
    for name, arr, labels in (
        ("spectra", rep.spectra, rep.ts),
        ("lowpass_spectra", rep.lowpass_spectra, rep.ts),
        ("step_diff", rep.step_diff, rep.ts[1:]),
        ("lowpass_diff", rep.lowpass_diff, rep.ts),
    ):
        n = arr.shape[0]
        fig, axes = plt.subplots(1, n, figsize=(1.6 * n, 1.9), squeeze=False)
        for i in range(n):
            ax = axes[0, i]
            ax.imshow(arr[i, image_index], cmap="magma" if "diff" not in name else "coolwarm")
            ax.set_title(f"t={labels[i]}", fontsize=7)
            ax.axis("off")
        fig.tight_layout()
        p = out / f"{name}.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)
    fig, ax = plt.subplots(figsize=(4.5, 3))
    prog = rep.summary["progress"]
    ax.plot(prog, rep.summary["mean_hf_ratio"], "o-", label="prediction")
    ax.plot(prog, rep.summary["mean_lowpass_hf_ratio"], "s-", label="low-pass component")
    ax.set_xlabel("step progress (T - t)")
    ax.set_ylabel(f"HF energy ratio (rho={rep.rho})")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p = out / "hf_trajectory.png"
    fig.savefig(p, dpi=100)
    plt.close(fig)
    paths.append(p)
    return paths


# --------------------------------------------------------------------------
# Metrics reports
# --------------------------------------------------------------------------


def _json_num(v: float):
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")


@dataclass
class MetricsReport:
    method: str
    steps: int
    rows: list[dict]
    label: str | None = None

    @property
    def aggregate(self) -> dict[str, float]:
        keys = ("psnr", "ssim", "semantic_consistency", "seconds")
        return {k: float(np.mean([float(r[k]) for r in self.rows])) for k in keys}

    def to_dict(self) -> dict:
        rows = [{k: (_json_num(v) if isinstance(v, float) else v) for k, v in r.items()} for r in self.rows]
        agg = {k: _json_num(v) for k, v in self.aggregate.items()}
        return {"schema_version": SCHEMA_VERSION, "method": self.method, "steps": self.steps,
                "label": self.label, "rows": rows, "aggregate": agg}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported metrics schema version {d.get('schema_version')}")
        rows = [{k: (float(v) if isinstance(v, str) else v) for k, v in r.items()} for r in d["rows"]]
        return cls(method=d["method"], steps=d["steps"], rows=rows, label=d.get("label"))

    def write(self, out_dir, stem: str | None = None) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or f"metrics_{self.method}"
        jp = out / f"{stem}.json"
        jp.write_text(json.dumps(self.to_dict(), indent=2))
        cp = out / f"{stem}.csv"
        with cp.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["index", "psnr", "ssim", "semantic_consistency", "seconds"])
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in w.fieldnames})
        return jp, cp


def metrics_report(method: str, steps: int, sr: torch.Tensor, gt: torch.Tensor, embedder,
                   seconds_per_image: float | list[float], label: str | None = None) -> MetricsReport:
    p = psnr(sr, gt).tolist()
    s = ssim(sr, gt).tolist()
    c = semantic_consistency(sr, gt, embedder).tolist()
    if isinstance(seconds_per_image, (int, float)):
        seconds_per_image = [float(seconds_per_image)] * len(p)
    rows = [{"index": i, "psnr": p[i], "ssim": s[i], "semantic_consistency": c[i],
             "seconds": seconds_per_image[i]} for i in range(len(p))]
    return MetricsReport(method=method, steps=steps, rows=rows, label=label)
