"""Command-line entry point.

Subcommands: make-dataset, train-teacher, distill, infer, eval, analyze-steps,
ablate. Each writes into a fresh run directory under ``--out`` (default: the
config's ``out_dir``) together with the resolved config.

Exit codes: 0 ok, 2 configuration error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime
from pathlib import Path

import torch

from . import evalkit, models, trainer
from .config import ExperimentConfig, load_config
from .dataio import derive_seed, fixed_pairs, list_images, load_dataset, load_image, make_pair, save_image, upsample
from .errors import ConfigError, NonFiniteError
from .losses import LossWeights
from .sampler import student_infer, teacher_infer

log = logging.getLogger("onestep_sr")

CACHE_ENV = "ONESTEP_SR_CACHE"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

ABLATION_GRID = (
    ("distill", (False, False, False)),
    ("distill+hfp", (True, False, False)),
    ("distill+hfp+sd", (True, True, False)),
    ("distill+hfp+sd+adv", (True, True, True)),
)


# --------------------------------------------------------------------------
# Run directories
# --------------------------------------------------------------------------


def make_run_dir(root, name: str) -> Path:
    """Create a new, never-reused directory ``root/name-YYYYmmdd-HHMMSS[-k]``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    k = 0
    while True:
        d = root / (f"{name}-{stamp}" + (f"-{k}" if k else ""))
        try:
            d.mkdir()
            return d
        except FileExistsError:
            k += 1


def record_run(run_dir: Path, cfg: ExperimentConfig, subcommand: str, argv: list[str], extra=None):
    cfg.dump(run_dir / "config.yaml")
    meta = {"subcommand": subcommand, "argv": argv, "seed": cfg.train.seed,
            "config_hash": cfg.hash(), "created": datetime.now().isoformat(timespec="seconds"),
            "torch": torch.__version__}
    meta.update(extra or {})
    (run_dir / "run.json").write_text(json.dumps(meta, indent=2))


def _resolve(args) -> ExperimentConfig:
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    path = args.config
    resume = getattr(args, "resume", None)
    if path is None and resume:
        path = Path(resume) / "config.yaml"
    return load_config(path, overrides)


def _apply_runtime(cfg: ExperimentConfig):
    trainer.set_determinism(cfg.train.deterministic)


# --------------------------------------------------------------------------
# Codec cache
# --------------------------------------------------------------------------


def _codec_key(cfg: ExperimentConfig, images) -> str:
    h = hashlib.sha256()
    m = cfg.model
    h.update(json.dumps([m.codec, m.latent_channels, m.codec_width, m.spatial_factor,
                         dataclasses.asdict(cfg.codec_train), cfg.train.seed,
                         cfg.data.degrade.to_dict(), cfg.data.patch_size]).encode())
    for im in images:
        h.update(im.numpy().tobytes())
    return h.hexdigest()[:24]


def prepare_codec(cfg: ExperimentConfig, images):
    codec, _, _ = trainer.build_models(cfg)
    cache = os.environ.get(CACHE_ENV)
    if cache and not isinstance(codec, models.IdentityCodec):
        path = Path(cache) / f"codec-{_codec_key(cfg, images)}"
        if (path / "manifest.json").exists():
            models.load_checkpoint(path, {"codec": codec})
            log.info("loaded cached codec from %s", path)
            return models.freeze(codec)
        codec = trainer.pretrain_codec(cfg, codec, images)
        models.save_checkpoint(path, {"codec": codec}, extra={"kind": "codec", "config": cfg.to_dict()})
        return codec
    return trainer.pretrain_codec(cfg, codec, images)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_make_dataset(args, cfg, run_dir):
    src = Path(args.input or cfg.data.train_dir)
    images, names = load_dataset(src, cfg.data.patch_size)
    (run_dir / "hr").mkdir()
    (run_dir / "lr").mkdir()
    entries = []
    for i, (img, name) in enumerate(zip(images, names)):
        seed = derive_seed(cfg.train.seed, i)
        pair = make_pair(img, cfg.data.degrade, cfg.data.patch_size, seed)
        stem = f"{i:05d}_{name.stem}"
        save_image(pair.hr[0], run_dir / "hr" / f"{stem}.png")
        save_image(pair.lr[0], run_dir / "lr" / f"{stem}.png")
        entries.append({"source": str(name), "hr": f"hr/{stem}.png", "lr": f"lr/{stem}.png", "seed": seed})
    manifest = {"params": cfg.data.degrade.to_dict(), "patch_size": cfg.data.patch_size,
                "seed": cfg.train.seed, "files": entries}
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    log.info("wrote %d pairs to %s", len(entries), run_dir)


def _resume_state(resume_dir):
    ckpt = Path(resume_dir) / "checkpoint"
    manifest = models.read_manifest(ckpt)
    return ckpt, manifest


def _optim_states(ckpt) -> dict:
    return torch.load(Path(ckpt) / "weights.pt", map_location="cpu").get("_optim") or {}


def cmd_train_teacher(args, cfg, run_dir):
    stream = trainer.PairStream(cfg.data.train_dir, cfg, cfg.teacher.batch_size, cfg.train.seed)
    start, teacher, opt_state = 0, None, None
    if args.resume:
        ckpt, manifest = _resume_state(args.resume)
        codec, make_denoiser, _ = trainer.build_models(cfg)
        teacher = make_denoiser()
        models.load_checkpoint(ckpt, {"codec": codec, "teacher": teacher})
        codec = models.freeze(codec)
        opt_state = _optim_states(ckpt).get("teacher")
        start = manifest["iteration"]
        trainer.rng_restore(manifest.get("rng"))
        log.info("resuming teacher at iteration %d", start)
    else:
        codec = prepare_codec(cfg, stream.images)
    # the trainer writes the final checkpoint, optimizer state included
    trainer.train_teacher(cfg, codec, stream, out_dir=run_dir, teacher=teacher,
                          start=start, optimizer_state=opt_state)
    log.info("teacher checkpoint: %s", run_dir / "checkpoint")


def _distill_config(cfg: ExperimentConfig, teacher_cfg: ExperimentConfig, explicit: bool) -> ExperimentConfig:
    if not explicit:
        return dataclasses.replace(cfg, model=teacher_cfg.model, schedule=teacher_cfg.schedule)
    for section in ("model", "schedule"):
        if getattr(cfg, section) != getattr(teacher_cfg, section):
            raise ConfigError(f"config section '{section}' differs from the teacher checkpoint's")
    return cfg


def run_distill(cfg, teacher_path, out_dir, resume_dir=None):
    teacher_cfg, codec, teacher, _ = trainer.load_teacher(teacher_path)
    embedder = trainer.build_embedder(cfg)
    stream = trainer.PairStream(cfg.data.train_dir, cfg, cfg.distill.batch_size, cfg.train.seed)
    student = disc = opt_states = None
    start = 0
    if resume_dir:
        ckpt, manifest = _resume_state(resume_dir)
        _, make_denoiser, make_disc = trainer.build_models(cfg)
        student, disc = make_denoiser(), make_disc()
        models.load_checkpoint(ckpt, {"student": student, "disc": disc})
        opt_states = _optim_states(ckpt) or None
        start = manifest["iteration"]
        trainer.rng_restore(manifest.get("rng"))
    res = trainer.distill(cfg, teacher, codec, embedder, stream, out_dir=out_dir, student=student,
                          disc=disc, start=start, optimizer_states=opt_states,
                          teacher_ref=str(Path(teacher_path).resolve()))
    (Path(out_dir) / "frozen_checksums.json").write_text(json.dumps(res.extra["frozen_checksums"], indent=2))
    return res


def _teacher_arg(args):
    if args.resume and not args.teacher:
        return json.loads((Path(args.resume) / "run.json").read_text())["teacher"]
    if not args.teacher:
        raise ConfigError("--teacher is required")
    return args.teacher


def cmd_distill(args, cfg, run_dir):
    run_distill(cfg, _teacher_arg(args), run_dir, args.resume)
    log.info("student checkpoint: %s", run_dir / "checkpoint")


def _load_any(path):
    """Load a teacher or student checkpoint: returns (kind, cfg, codec, model)."""
    manifest = models.read_manifest(trainer._checkpoint_dir(path))
    if manifest.get("kind") == "teacher":
        cfg, codec, model, _ = trainer.load_teacher(path)
        return "teacher", cfg, codec, model
    if manifest.get("kind") == "student":
        cfg, codec, model, _, _ = trainer.load_student(path)
        return "student", cfg, codec, model
    raise ConfigError(f"{path} is neither a teacher nor a student checkpoint")


def _noise_for(cfg, shape, salt):
    return trainer.seeded_randn(shape, derive_seed(cfg.train.seed, salt), trainer.dtype_of(cfg))


@torch.no_grad()
def run_inference(kind, model, codec, cfg, lr_up, noise, chunk: int = 16):
    """Returns (images, seconds per image); ``kind`` is 'student' (1 step) or 'teacher' (T steps)."""
    s = trainer.schedule_of(cfg)
    dtype = trainer.dtype_of(cfg)
    outs, secs = [], []
    for i in range(0, lr_up.shape[0], chunk):
        x, n = lr_up[i : i + chunk].to(dtype), noise[i : i + chunk]
        t0 = time.perf_counter()
        if kind == "student":
            y = student_infer(model, codec, x, s, n)
        else:
            y, _ = teacher_infer(model, codec, x, s, n)
        dt = time.perf_counter() - t0
        outs.append(y.float())
        secs += [dt / x.shape[0]] * x.shape[0]
    return torch.cat(outs), secs


def cmd_infer(args, cfg, run_dir):
    kind, ckpt_cfg, codec, model = _load_any(args.checkpoint)
    T = ckpt_cfg.schedule.T
    steps = T if args.steps in ("T", str(T)) else int(args.steps)
    if steps not in (1, T):
        raise ConfigError(f"--steps must be 1 or T={T}, got {args.steps}")
    if steps == T and kind != "teacher":
        raise ConfigError("--steps T needs a teacher checkpoint")
    if steps == 1 and kind == "teacher" and not args.allow_teacher_one_step:
        raise ConfigError("--steps 1 needs a student checkpoint (or --allow-teacher-one-step)")
    src = Path(args.input)
    files = list_images(src) if src.is_dir() else [src]
    if not files:
        raise ConfigError(f"no images found at {src}")
    scale = ckpt_cfg.data.degrade.scale
    ckpt_cfg = dataclasses.replace(ckpt_cfg, train=dataclasses.replace(ckpt_cfg.train, seed=cfg.train.seed))
    (run_dir / "sr").mkdir()
    for i, f in enumerate(files):
        lr = load_image(f)[None]
        H, W = lr.shape[-2:]
        unit = codec.spatial_factor * 4
        if (H * scale) % unit or (W * scale) % unit:
            raise ConfigError(f"{f}: upscaled size must be divisible by {unit}")
        lr_up = upsample(lr, scale)
        noise = _noise_for(ckpt_cfg, (1, codec.latent_channels, H * scale // codec.spatial_factor,
                                      W * scale // codec.spatial_factor), derive_seed(0x1F, i))
        sr, _ = run_inference("student" if steps == 1 else "teacher", model, codec, ckpt_cfg, lr_up, noise)
        save_image(sr[0], run_dir / "sr" / f"{f.stem}_x{scale}.png")
    log.info("wrote %d images to %s", len(files), run_dir / "sr")


def evaluate(cfg, val, embedder, teacher=None, student=None, codec=None, label=None):
    """MetricsReports for bicubic and whichever of teacher/student are given."""
    reports = []
    t0 = time.perf_counter()
    up = upsample(val.lr, cfg.data.degrade.scale)
    dt = (time.perf_counter() - t0) / val.lr.shape[0]
    reports.append(evalkit.metrics_report("bicubic", 0, up, val.hr, embedder, dt, label=label))
    shape = (val.hr.shape[0], codec.latent_channels if codec else 3,
             val.hr.shape[-2] // (codec.spatial_factor if codec else 1),
             val.hr.shape[-1] // (codec.spatial_factor if codec else 1))
    noise = _noise_for(cfg, shape, 0xE7A1)
    if teacher is not None:
        sr, secs = run_inference("teacher", teacher, codec, cfg, val.lr_up, noise)
        reports.append(evalkit.metrics_report("teacher", cfg.schedule.T, sr, val.hr, embedder, secs, label=label))
    if student is not None:
        sr, secs = run_inference("student", student, codec, cfg, val.lr_up, noise)
        reports.append(evalkit.metrics_report("student", 1, sr, val.hr, embedder, secs, label=label))
    return reports


def _val_pairs(cfg):
    return fixed_pairs(cfg.data.val_dir, cfg.data.degrade, derive_seed(cfg.train.seed, 0x7A1),
                       cfg.data.patch_size, limit=cfg.eval.max_images)


def cmd_eval(args, cfg, run_dir):
    if not args.teacher and not args.student:
        raise ConfigError("eval needs --teacher and/or --student")
    teacher = student = codec = None
    if args.teacher:
        tcfg, codec, teacher, _ = trainer.load_teacher(args.teacher)
        cfg = dataclasses.replace(cfg, model=tcfg.model, schedule=tcfg.schedule)
    if args.student:
        scfg, codec, student, _, _ = trainer.load_student(args.student)
        cfg = dataclasses.replace(cfg, model=scfg.model, schedule=scfg.schedule)
    embedder = trainer.build_embedder(cfg)
    reports = evaluate(cfg, _val_pairs(cfg), embedder, teacher, student, codec)
    summary = {}
    for r in reports:
        r.write(run_dir)
        summary[r.method] = r.aggregate
        log.info("%s (%d steps): %s", r.method, r.steps, r.aggregate)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))


def cmd_analyze_steps(args, cfg, run_dir):
    tcfg, codec, teacher, _ = trainer.load_teacher(args.teacher)
    cfg = dataclasses.replace(cfg, model=tcfg.model, schedule=tcfg.schedule)
    val = _val_pairs(cfg)
    n = min(args.images, val.hr.shape[0])
    s = trainer.schedule_of(cfg)
    noise = _noise_for(cfg, (n, codec.latent_channels, val.hr.shape[-2] // codec.spatial_factor,
                             val.hr.shape[-1] // codec.spatial_factor), 0xA5)
    with torch.no_grad():
        _, trace = teacher_infer(teacher, codec, val.lr_up[:n].to(trainer.dtype_of(cfg)), s, noise, capture=True)
    rep = evalkit.analyze_steps(trace, codec, cfg.eval.rho, cfg.eval.lowpass_frac, cfg.eval.space)
    rep.save(run_dir)
    evalkit.plot_spectrum_report(rep, run_dir)
    log.info("spearman(progress, hf)=%.3f slope_full=%.4g slope_lowpass=%.4g",
             rep.summary["spearman_progress_vs_hf"], rep.summary["slope_full"], rep.summary["slope_lowpass"])


def cmd_ablate(args, cfg, run_dir):
    teacher_cfg, _, _, _ = trainer.load_teacher(args.teacher)
    cfg = _distill_config(cfg, teacher_cfg, explicit=False)
    base = cfg.distill.weights
    embedder = trainer.build_embedder(cfg)
    val = _val_pairs(cfg)
    rows = []
    for label, (hfp, sd, adv) in ABLATION_GRID:
        w = LossWeights(hfp=base.hfp if hfp else 0.0, sd=base.sd if sd else 0.0, adv=base.adv if adv else 0.0)
        sub_cfg = dataclasses.replace(cfg, distill=dataclasses.replace(cfg.distill, weights=w))
        sub = run_dir / label
        sub.mkdir()
        sub_cfg.dump(sub / "config.yaml")
        log.info("ablation %s: weights %s", label, w)
        res = run_distill(sub_cfg, args.teacher, sub)
        _, codec, student, _, _ = trainer.load_student(sub / "checkpoint")
        report = evaluate(sub_cfg, val, embedder, student=student, codec=codec, label=label)[-1]
        report.write(run_dir, stem=f"metrics_{label}")
        rows.append({"label": label, "losses": {"distill": True, "hfp": hfp, "sd": sd, "adv": adv},
                     "aggregate": report.aggregate})
    for prev, cur in zip(rows, rows[1:]):
        cur["delta_vs_previous"] = {k: cur["aggregate"][k] - prev["aggregate"][k] for k in cur["aggregate"]}
    (run_dir / "ablation_summary.json").write_text(json.dumps(rows, indent=2))


COMMANDS = {
    "make-dataset": cmd_make_dataset,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "analyze-steps": cmd_analyze_steps,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="onestep-sr", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="overrides train.seed")
        p.add_argument("--out", help="root for run directories (default: config out_dir)")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="dotted config override, e.g. distill.iterations=200 (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("make-dataset", help="write degraded LR PNGs and a manifest")
    common(p)
    p.add_argument("--input", help="directory of HR images (default: data.train_dir)")

    p = sub.add_parser("train-teacher", help="pretrain the codec and the multi-step teacher")
    common(p)
    p.add_argument("--resume", help="run directory of a partial train-teacher run")

    p = sub.add_parser("distill", help="distill a one-step student from a teacher checkpoint")
    common(p)
    p.add_argument("--teacher", help="teacher run directory or checkpoint")
    p.add_argument("--resume", help="run directory of a partial distill run")

    p = sub.add_parser("infer", help="super-resolve LR images")
    common(p)
    p.add_argument("--checkpoint", required=True, help="teacher or student checkpoint")
    p.add_argument("--input", required=True, help="LR image or directory of LR images")
    p.add_argument("--steps", default="1", help="1 (student) or T (teacher)")
    p.add_argument("--allow-teacher-one-step", action="store_true",
                   help="run a single teacher call at t=T when --steps 1 is given a teacher")

    p = sub.add_parser("eval", help="PSNR/SSIM/semantic consistency on the validation set")
    common(p)
    p.add_argument("--teacher")
    p.add_argument("--student")

    p = sub.add_parser("analyze-steps", help="spectral analysis of teacher predictions per step")
    common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--images", type=int, default=20)

    p = sub.add_parser("ablate", help="distill with the four loss combinations and evaluate each")
    common(p)
    p.add_argument("--teacher", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    handler = None
    try:
        cfg = _resolve(args)
        _apply_runtime(cfg)
        extra = {}
        if args.command == "distill":
            teacher_path = _teacher_arg(args)
            teacher_cfg = trainer.load_teacher(teacher_path)[0]
            cfg = _distill_config(cfg, teacher_cfg, explicit=args.config is not None or args.resume is not None)
            extra["teacher"] = str(Path(teacher_path).resolve())
        elif getattr(args, "teacher", None):
            extra["teacher"] = str(Path(args.teacher).resolve())
        resume = getattr(args, "resume", None)
        if resume:
            run_dir = Path(resume)
            if not (run_dir / "config.yaml").exists():
                raise ConfigError(f"{run_dir} is not a run directory")
            if load_config(run_dir / "config.yaml").hash() != cfg.hash():
                raise ConfigError(f"resolved config differs from the one recorded in {run_dir}")
            with (run_dir / "resumes.jsonl").open("a") as fh:
                fh.write(json.dumps({"argv": argv, "at": datetime.now().isoformat(timespec="seconds")}) + "\n")
        else:
            run_dir = make_run_dir(args.out or cfg.out_dir, args.command)
            record_run(run_dir, cfg, args.command, argv, extra)
        handler = logging.FileHandler(run_dir / "run.log")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger().addHandler(handler)
        COMMANDS[args.command](args, cfg, run_dir)
        print(run_dir)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, RuntimeError) as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
