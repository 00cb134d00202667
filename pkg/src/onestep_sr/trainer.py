"""Teacher pretraining and one-step student distillation.

Randomness is derived from ``(seed, batch_index)`` rather than carried in a
stateful generator, so a run resumed at iteration ``n`` replays exactly the
same batches, timesteps and noise as an uninterrupted run.
"""

from __future__ import annotations

import base64
import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import models
from .config import ExperimentConfig
from .dataio import PairBatch, derive_seed, iterate_pairs, load_dataset, tensor_hash
from .errors import ConfigError, NonFiniteError
from .losses import (LossReport, disc_loss, distill_loss, gen_adv_loss, hfp_loss, semantic_loss,
                     total_student_loss)
from .sampler import teacher_target
from .schedule import Schedule, build_schedule, coeffs, forward_diffuse, init_state

log = logging.getLogger(__name__)


def set_determinism(enabled: bool = True):
    torch.use_deterministic_algorithms(enabled)


def dtype_of(cfg: ExperimentConfig) -> torch.dtype:
    return torch.float64 if cfg.train.precision == "float64" else torch.float32


def schedule_of(cfg: ExperimentConfig) -> Schedule:
    sc = cfg.schedule
    return build_schedule(sc.T, sc.eta_min, sc.eta_max, sc.kappa, sc.form)


def seeded_randn(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed % 2**63)
    return torch.randn(shape, generator=g, dtype=torch.float64).to(dtype)


def rng_snapshot() -> dict:
    return {"torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode()}


def rng_restore(snap: dict | None):
    if snap and "torch" in snap:
        state = np.frombuffer(base64.b64decode(snap["torch"]), dtype=np.uint8).copy()
        torch.set_rng_state(torch.from_numpy(state))


class PairStream:
    """Seeded training batches; ``period`` is the batch count after which they repeat."""

    def __init__(self, directory, cfg: ExperimentConfig, batch: int, seed: int, images=None):
        if images is None:
            images, _ = load_dataset(directory, cfg.data.patch_size)
        self.images = images
        self.cfg = cfg
        self.batch = batch
        self.seed = seed
        self.per_epoch = len(images) // batch
        if self.per_epoch == 0:
            raise ConfigError(f"dataset of {len(images)} images is smaller than one batch of {batch}")
        cycle = cfg.data.epoch_cycle
        self.period = self.per_epoch * cycle if cycle else None

    def __call__(self, start: int = 0):
        return iterate_pairs(None, self.cfg.data.degrade, self.batch, self.seed,
                             self.cfg.data.patch_size, start_batch=start,
                             epoch_cycle=self.cfg.data.epoch_cycle, images=self.images,
                             augment=self.cfg.data.augment)

    def noise_seed(self, b: int, salt: int) -> int:
        return derive_seed(self.seed, b % self.period if self.period else b, salt)


class JsonlLog:
    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, row: dict):
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(row) + "\n")


# --------------------------------------------------------------------------
# Codec
# --------------------------------------------------------------------------


def build_models(cfg: ExperimentConfig):
    m = cfg.model
    codec = models.build_codec(m.codec, m.latent_channels, m.codec_width, m.spatial_factor)
    C = codec.latent_channels
    s = schedule_of(cfg)
    # x_t has variance ~ 1 + kappa^2 eta_t; normalize it so every t sees unit-scale input
    scales = [math.sqrt(s.kappa**2 * e + 1) for e in s.etas]
    make_denoiser = lambda: models.UNetDenoiser(C, m.denoiser_width, cfg.schedule.T, scales)
    make_disc = lambda: models.PatchDiscriminator(C, m.disc_width)
    return codec, make_denoiser, make_disc


def build_embedder(cfg: ExperimentConfig):
    m = cfg.model
    e = models.RandomConvEmbedder(m.embed_dim, m.embed_input_size, seed=m.embed_seed)
    if m.embed_weights:
        e.load_weights(m.embed_weights)
    return e


def pretrain_codec(cfg: ExperimentConfig, codec: models.Codec, images: list[torch.Tensor]) -> models.Codec:
    """Reconstruction-only pretraining on the HR corpus, then freeze."""
    if isinstance(codec, models.LinearPatchCodec):
        codec.fit(images)
    elif isinstance(codec, models.ConvAutoencoder):
        ct = cfg.codec_train
        torch.manual_seed(cfg.train.seed)
        stream = PairStream(None, cfg, ct.batch_size, derive_seed(cfg.train.seed, 0xC0DEC), images)
        opt = torch.optim.Adam(codec.parameters(), lr=ct.lr)
        codec.train()
        for i, batch in zip(range(ct.iterations), stream()):
            x = torch.cat([batch.hr, batch.lr_up])
            loss = F.l1_loss(codec.decode_raw(codec.encode(x)), x)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if i == (3 * ct.iterations) // 4:
                for g in opt.param_groups:
                    g["lr"] *= 0.2
    return models.freeze(codec)


# --------------------------------------------------------------------------
# Teacher
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list[dict] = field(default_factory=list)
    iteration: int = 0
    extra: dict = field(default_factory=dict)


def _lr_at(base: float, it: int, total: int, decay: str) -> float:
    if decay == "cosine":
        return base * 0.5 * (1 + math.cos(math.pi * min(it, total) / total))
    return base


def teacher_loss(teacher, codec, s: Schedule, batch: PairBatch, t: torch.Tensor, noise: torch.Tensor,
                 use_wt: bool = False, dtype=torch.float32):
    with torch.no_grad():
        z0 = codec.encode(batch.hr.to(dtype))
        zy = codec.encode(batch.lr_up.to(dtype))
    x_t = forward_diffuse(z0, zy, t, noise, s)
    pred = teacher(x_t, zy, t)
    per = (pred - z0).pow(2).flatten(1).mean(1)
    if use_wt:
        # w_1 is undefined (eta_0 stands in for zero); reuse w_2 for t = 1
        ws = [coeffs(s, max(int(ti), 2) if s.T > 1 else 1).w or 1.0 for ti in t]
        per = per * torch.tensor(ws, dtype=per.dtype)
    return per.mean()


def train_teacher(cfg: ExperimentConfig, codec, stream: PairStream, out_dir=None,
                  teacher=None, start: int = 0, optimizer_state=None) -> TrainResult:
    """Minimize the x0-prediction MSE over uniformly drawn t (w_t optional)."""
    s = schedule_of(cfg)
    tc = cfg.teacher
    dtype = dtype_of(cfg)
    _, make_denoiser, _ = build_models(cfg)
    if teacher is None:
        torch.manual_seed(derive_seed(cfg.train.seed, 0x7EAC))
        teacher = make_denoiser()
    teacher = teacher.to(dtype).train()
    opt = torch.optim.Adam(teacher.parameters(), lr=tc.lr)
    if optimizer_state:
        opt.load_state_dict(optimizer_state)
    out = Path(out_dir) if out_dir else None
    logger = JsonlLog(out / "train_log.jsonl" if out else None)
    history = []
    it = start
    batches = stream(start)
    t0 = time.time()
    while it < tc.iterations:
        batch = next(batches)
        g = torch.Generator().manual_seed(stream.noise_seed(it, 0x71))
        B = batch.hr.shape[0]
        t = torch.randint(1, s.T + 1, (B,), generator=g)
        C = codec.latent_channels
        f = codec.spatial_factor
        H, W = batch.hr.shape[-2] // f, batch.hr.shape[-1] // f
        noise = seeded_randn((B, C, H, W), stream.noise_seed(it, 0x72), dtype)
        for grp in opt.param_groups:
            grp["lr"] = _lr_at(tc.lr, it, tc.iterations, tc.lr_decay)
        loss = teacher_loss(teacher, codec, s, batch, t, noise, tc.use_wt, dtype)
        if not torch.isfinite(loss):
            raise NonFiniteError("teacher_mse", f"teacher loss became non-finite at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        it += 1
        row = {"iter": it, "loss": loss.item()}
        history.append(row)
        if it % cfg.train.log_every == 0 or it == tc.iterations:
            row["elapsed"] = time.time() - t0
            logger.write(row)
            log.info("teacher iter %d loss %.5f", it, row["loss"])
        if out and (it % cfg.train.checkpoint_every == 0 or it == tc.iterations):
            save_teacher(out / "checkpoint", cfg, codec, teacher, it, opt)
    models.freeze(teacher)
    return TrainResult(teacher, history, it)


def save_teacher(path, cfg, codec, teacher, iteration, opt=None):
    return models.save_checkpoint(
        path, {"codec": codec, "teacher": teacher},
        extra={"kind": "teacher", "iteration": iteration, "config": cfg.to_dict(),
               "config_hash": cfg.hash(), "schedule": schedule_of(cfg).to_dict(), "rng": rng_snapshot()},
        optimizers={"teacher": opt} if opt else None)


def load_teacher(path, cfg_override: ExperimentConfig | None = None):
    """Returns ``(cfg, codec, teacher, manifest)`` built from a teacher checkpoint."""
    from .config import config_from_dict

    path = _checkpoint_dir(path)
    manifest = models.read_manifest(path)
    if manifest.get("kind") != "teacher":
        raise ConfigError(f"{path} is not a teacher checkpoint")
    cfg = config_from_dict(manifest["config"])
    codec, make_denoiser, _ = build_models(cfg)
    teacher = make_denoiser()
    models.load_checkpoint(path, {"codec": codec, "teacher": teacher})
    dtype = dtype_of(cfg_override or cfg)
    return cfg, models.freeze(codec.to(dtype)), models.freeze(teacher.to(dtype)), manifest


def _checkpoint_dir(path) -> Path:
    p = Path(path)
    if (p / "manifest.json").exists():
        return p
    if (p / "checkpoint" / "manifest.json").exists():
        return p / "checkpoint"
    raise ConfigError(f"no checkpoint found at {p}")


# --------------------------------------------------------------------------
# Distillation
# --------------------------------------------------------------------------


def distill_step(student, teacher, disc, codec, embedder, s: Schedule, batch: PairBatch,
                 noise: torch.Tensor, cfg: ExperimentConfig, opt_s, opt_d, z_tch=None,
                 dtype=torch.float32) -> tuple[LossReport, torch.Tensor]:
    """One student update followed by one discriminator update; returns (report, z_tch)."""
    dc = cfg.distill
    w = dc.weights
    hr = batch.hr.to(dtype)
    with torch.no_grad():
        z0 = codec.encode(hr)
        zy = codec.encode(batch.lr_up.to(dtype))
        z_T = init_state(zy, noise, s)
        if z_tch is None:
            z_tch = teacher_target(teacher, z_T, zy, s, single_call=dc.teacher_single_call)

    z_stu = student(z_T, zy, s.T)
    l_distill = distill_loss(z_tch, z_stu)
    l_hfp = hfp_loss(z_tch, z_stu)

    if w.sd > 0:
        l_sd = semantic_loss(hr, codec.decode(z_stu), embedder)
    else:
        with torch.no_grad():
            l_sd = semantic_loss(hr, codec.decode(z_stu), embedder)

    disc.requires_grad_(False)
    if w.adv > 0:
        l_adv = gen_adv_loss(disc(z_stu))
    else:
        with torch.no_grad():
            l_adv = gen_adv_loss(disc(z_stu))
    disc.requires_grad_(True)

    report = total_student_loss(l_distill, l_hfp, l_sd, l_adv, w)
    opt_s.zero_grad(set_to_none=True)
    report.total.backward()
    opt_s.step()

    l_disc = disc_loss(disc(z0), disc(z_stu.detach()))
    if not torch.isfinite(l_disc):
        raise NonFiniteError("disc")
    opt_d.zero_grad(set_to_none=True)
    l_disc.backward()
    opt_d.step()
    report.disc = l_disc
    return report, z_tch


def init_student(teacher) -> torch.nn.Module:
    student = copy.deepcopy(teacher)
    student.train()
    for p in student.parameters():
        p.requires_grad_(True)
    student.frozen = False
    return student


def distill(cfg: ExperimentConfig, teacher, codec, embedder, stream: PairStream, out_dir=None,
            student=None, disc=None, start: int = 0, optimizer_states=None,
            teacher_ref: str | None = None) -> TrainResult:
    """Train a one-step student from a frozen teacher, alternating with the discriminator."""
    if teacher is None:
        raise ConfigError("distillation requires a teacher")
    s = schedule_of(cfg)
    dc = cfg.distill
    dtype = dtype_of(cfg)
    _, _, make_disc = build_models(cfg)
    models.freeze(teacher)
    frozen = {"teacher": models.param_checksum(teacher), "codec": models.param_checksum(codec),
              "embedder": models.param_checksum(embedder)}
    if student is None:
        student = init_student(teacher)
    if models.param_checksum(student) != frozen["teacher"] and start == 0:
        raise ConfigError("student must start from the teacher's parameters")
    if disc is None:
        torch.manual_seed(derive_seed(cfg.train.seed, 0xD15C))
        disc = make_disc()
    student, disc = student.to(dtype).train(), disc.to(dtype).train()
    opt_s = torch.optim.Adam(student.parameters(), lr=dc.lr_student)
    opt_d = torch.optim.Adam(disc.parameters(), lr=dc.lr_disc, betas=(0.5, 0.999))
    if optimizer_states:
        opt_s.load_state_dict(optimizer_states["student"])
        opt_d.load_state_dict(optimizer_states["disc"])
    out = Path(out_dir) if out_dir else None
    logger = JsonlLog(out / "train_log.jsonl" if out else None)
    cache: dict[str, torch.Tensor] = {}
    history = []
    it = start
    batches = stream(start)
    C, f = codec.latent_channels, codec.spatial_factor
    t0 = time.time()
    while it < dc.iterations:
        batch = next(batches)
        B, _, H, W = batch.hr.shape
        noise = seeded_randn((B, C, H // f, W // f), stream.noise_seed(it, 0xD1), dtype)
        key = None
        z_tch = None
        if dc.cache_teacher and stream.period:
            key = tensor_hash(batch.lr_up, noise)
            z_tch = cache.get(key)
        report, z_tch = distill_step(student, teacher, disc, codec, embedder, s, batch, noise, cfg,
                                     opt_s, opt_d, z_tch=z_tch, dtype=dtype)
        if key is not None:
            cache[key] = z_tch
        it += 1
        row = {"iter": it, **report.floats()}
        history.append(row)
        if it % cfg.train.log_every == 0 or it == dc.iterations:
            row["elapsed"] = time.time() - t0
            logger.write(row)
            log.info("distill iter %d total %.5f", it, row["total"])
        if out and (it % cfg.train.checkpoint_every == 0 or it == dc.iterations):
            save_student(out / "checkpoint", cfg, codec, student, disc, it, teacher_ref,
                         {"student": opt_s, "disc": opt_d})
    for name, m in (("teacher", teacher), ("codec", codec), ("embedder", embedder)):
        if models.param_checksum(m) != frozen[name]:
            raise RuntimeError(f"frozen component {name} changed during distillation")
    student.eval()
    return TrainResult(student, history, it, extra={"disc": disc, "frozen_checksums": frozen})


def save_student(path, cfg, codec, student, disc, iteration, teacher_ref=None, optimizers=None):
    return models.save_checkpoint(
        path, {"codec": codec, "student": student, "disc": disc},
        extra={"kind": "student", "iteration": iteration, "config": cfg.to_dict(),
               "config_hash": cfg.hash(), "schedule": schedule_of(cfg).to_dict(),
               "teacher": str(teacher_ref) if teacher_ref else None, "rng": rng_snapshot()},
        optimizers=optimizers)


def load_student(path):
    """Returns ``(cfg, codec, student, disc, manifest)``."""
    from .config import config_from_dict

    path = _checkpoint_dir(path)
    manifest = models.read_manifest(path)
    if manifest.get("kind") != "student":
        raise ConfigError(f"{path} is not a student checkpoint")
    cfg = config_from_dict(manifest["config"])
    codec, make_denoiser, make_disc = build_models(cfg)
    student, disc = make_denoiser(), make_disc()
    models.load_checkpoint(path, {"codec": codec, "student": student, "disc": disc})
    dtype = dtype_of(cfg)
    return cfg, models.freeze(codec.to(dtype)), student.to(dtype).eval(), disc.to(dtype), manifest
