"""Workflow stages shared by the command line: dataset synthesis through evaluation.

Every stage reads and writes files under one run directory::

    <out>/dataset/manifest.json        clip list (paths relative to dataset/)
    <out>/dataset/clips/<clip_id>/      frames, .flo flows, encoded PNGs, trajectory
    <out>/checkpoints/                  motion.ckpt, video.ckpt, *_train.jsonl
    <out>/generated/                    sampled frames and flows
    <out>/reports/                      consistency.json, metrics.json
    <out>/viz/                          flow visualisations and legend
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import io
from .codec import compute_scale_factor, encode_flow, flow_to_rgb
from .errors import DataError, UnscorableClipError
from .estimate import estimate_flow_naive
from .filtering import ConsistencyReport, filter_dataset, score_flow_pairs
from .flow import FlowField, FrameSequence
from .flowmatch import (FMConfig, FMModel, TrainingPools, load_checkpoint, sample, save_checkpoint,
                        stack_images, train, two_stage_generate, unstack_images)
from .manifest import DatasetManifest, ManifestEntry
from .metrics import ROBUSTNESS_SNRS_DB, MetricReport, add_noise_snr, motion_error
from .synth import (MODES, default_intrinsics, plucker_stack, dense_fill, random_shift, shift_cycle,
                    synthetic_clip, testbed_clip, testbed_gt_flows, testbed_trajectory)
from .trajectory import Trajectory


@dataclass
class PipelineConfig:
    out: str = "run"
    seed: int = 0
    width: int = 32
    height: int = 32
    n_frames: int = 4  # desk-scale override of the 121-frame default
    mode: str = "camera"
    n_real: int = 49  # one clip per integer shift in [-3, 3]^2
    n_synthetic: int = 24
    codec_percentile: float = 99.0
    filter_percentile: float = 90.0
    filter_sources: list = field(default_factory=lambda: ["real"])
    mixture_ratio: float = 0.5
    sample_steps: int = 100
    motion_steps: int = 300
    motion_pretrain_fraction: float = 0.3
    video_steps: int = 1600
    batch_size: int = 16
    lr: float = 3e-3
    lr_schedule: str = "cosine"
    prediction: str = "sample"
    hidden: int = 64
    control_hidden: int = 32
    kernel: int = 1  # trunk and control block kernel; 1x1 is 2x faster and as accurate here
    n_eval: int = 4
    snrs: list = field(default_factory=lambda: list(ROBUSTNESS_SNRS_DB))

    def __post_init__(self):
        for name in ("codec_percentile", "filter_percentile"):
            p = getattr(self, name)
            if not 0 < p <= 100:
                raise DataError(f"{name} must lie in (0, 100], got {p}")
        if self.width <= 0 or self.height <= 0:
            raise DataError("resolution must be positive")
        if self.n_frames < 2:
            raise DataError("need at least two frames")
        if self.mode not in MODES:
            raise DataError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.mixture_ratio <= 1:
            raise DataError("mixture_ratio must lie in [0, 1]")
        if self.sample_steps < 1:
            raise DataError("integrator steps must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise DataError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def root(self) -> Path:
        return Path(self.out)

    @property
    def dataset_dir(self) -> Path:
        return self.root / "dataset"

    @property
    def manifest_path(self) -> Path:
        return self.dataset_dir / "manifest.json"


def stage_seed(root_seed: int, stage: str) -> int:
    """Per-stage seed from a stable hash of the stage name."""
    digest = hashlib.sha256(f"{root_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DataError(f"missing prerequisite {path} (run `{hint}` first)")
    return path


def load_manifest(cfg: PipelineConfig) -> DatasetManifest:
    _require(cfg.manifest_path, "gen-dataset")
    return DatasetManifest.load(cfg.manifest_path)


# -- gen-dataset ----------------------------------------------------------------

def _write_clip(cfg: PipelineConfig, clip) -> ManifestEntry:
    rel = Path("clips") / clip.clip_id
    d = cfg.dataset_dir / rel
    d.mkdir(parents=True, exist_ok=True)
    frames, fwd, bwd = [], [], []
    for k, im in enumerate(clip.frames.frames):
        io.write_rgb_png(d / f"frame_{k:03d}.png", im)
        frames.append(str(rel / f"frame_{k:03d}.png"))
    for k, (f, b) in enumerate(zip(clip.flows, clip.backward_flows)):
        io.write_flo(d / f"flow_{k:03d}.flo", f)
        io.write_flo(d / f"flow_bwd_{k:03d}.flo", b)
        fwd.append(str(rel / f"flow_{k:03d}.flo"))
        bwd.append(str(rel / f"flow_bwd_{k:03d}.flo"))
    (d / "trajectory.json").write_text(clip.trajectory.to_json(), encoding="utf-8")
    return ManifestEntry(clip.clip_id, clip.source, flow_paths=fwd, frame_paths=frames,
                         backward_flow_paths=bwd, trajectory_path=str(rel / "trajectory.json"),
                         extra=dict(clip.extra))


def gen_dataset(cfg: PipelineConfig, mode: str | None = None) -> DatasetManifest:
    """Render testbed (``real``) and scene (``synthetic``) clips and write the manifest."""
    mode = mode or cfg.mode
    if mode not in MODES:
        raise DataError(f"mode must be one of {MODES}, got {mode!r}")
    rng = np.random.default_rng(stage_seed(cfg.seed, "gen-dataset"))
    intr = default_intrinsics(cfg.width, cfg.height)
    try:
        cfg.dataset_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {cfg.dataset_dir}: {exc}") from exc
    entries = []
    # real clips sweep the whole shift grid so every testbed motion is represented
    for i, shift in enumerate(shift_cycle(rng, cfg.n_real)):
        clip = testbed_clip(f"real_{i:04d}", shift, cfg.n_frames, intr)
        entries.append(_write_clip(cfg, clip))
    for i in range(cfg.n_synthetic):
        clip = synthetic_clip(f"syn_{i:04d}", int(rng.integers(2 ** 31)), mode, cfg.n_frames, intr)
        entries.append(_write_clip(cfg, clip))
    manifest = DatasetManifest(entries, None, {"mode": mode, "n_frames": cfg.n_frames,
                                                "resolution": [cfg.height, cfg.width], "seed": cfg.seed})
    manifest.save(cfg.manifest_path)
    return manifest


def read_flows(cfg: PipelineConfig, paths) -> list:
    return [io.read_flo(cfg.dataset_dir / p) for p in paths]


def read_frames(cfg: PipelineConfig, paths) -> list:
    return [io.read_rgb_png(cfg.dataset_dir / p) for p in paths]


# -- encode ----------------------------------------------------------------------

def encode(cfg: PipelineConfig) -> DatasetManifest:
    """Dataset scale factor, then one RGB PNG per forward flow."""
    manifest = load_manifest(cfg)
    flows = {e.clip_id: read_flows(cfg, e.flow_paths) for e in manifest.entries}
    s_f = compute_scale_factor([f for fl in flows.values() for f in fl], cfg.codec_percentile)
    for e in manifest.entries:
        d = Path(e.flow_paths[0]).parent if e.flow_paths else Path("clips") / e.clip_id
        e.encoded_paths = []
        for k, f in enumerate(flows[e.clip_id]):
            p = d / f"enc_{k:03d}.png"
            io.write_rgb_png(cfg.dataset_dir / p, encode_flow(dense_fill(f), s_f))
            e.encoded_paths.append(str(p))
    manifest.scale_factor_px = s_f
    manifest.extra["codec_percentile"] = cfg.codec_percentile
    manifest.save(cfg.manifest_path)
    return manifest


# -- filter ----------------------------------------------------------------------

def filter_stage(cfg: PipelineConfig):
    """Score every clip by cycle consistency and drop the worst of the selected sources."""
    manifest = load_manifest(cfg)
    report = ConsistencyReport()
    for e in manifest.entries:
        if not e.backward_flow_paths:
            e.error = None
            continue
        pairs = zip(read_flows(cfg, e.flow_paths), read_flows(cfg, e.backward_flow_paths))
        try:
            e.error, count = score_flow_pairs(pairs)
        except UnscorableClipError:
            e.error = None
            continue
        if e.source in cfg.filter_sources:
            report.per_clip.append((e.clip_id, e.error, count))
    manifest, threshold = filter_dataset(manifest, cfg.filter_percentile, cfg.filter_sources)
    manifest.extra["filter"] = {"percentile": cfg.filter_percentile, "threshold_px": threshold,
                                "sources": list(cfg.filter_sources)}
    manifest.save(cfg.manifest_path)
    out = report.to_dict()
    out["threshold_px"] = threshold
    out["percentile"] = cfg.filter_percentile
    (cfg.root / "reports").mkdir(parents=True, exist_ok=True)
    io.write_json(cfg.root / "reports" / "consistency.json", out)
    return manifest, threshold, report


# -- train ----------------------------------------------------------------------

def _encoded_tensor(cfg, e: ManifestEntry) -> torch.Tensor:
    if not e.encoded_paths:
        raise DataError(f"clip {e.clip_id} has no encoded flow (run `encode` first)")
    return stack_images(read_frames(cfg, e.encoded_paths))


def _plucker_tensor(cfg, e: ManifestEntry) -> torch.Tensor:
    traj = Trajectory.from_json((cfg.dataset_dir / e.trajectory_path).read_text(encoding="utf-8"))
    return torch.from_numpy(plucker_stack(traj))


def motion_config(cfg: PipelineConfig, mode: str) -> FMConfig:
    k = cfg.n_frames
    pre = int(round(cfg.motion_steps * cfg.motion_pretrain_fraction))
    return FMConfig(sample_shape=(3 * (k - 1), cfg.height, cfg.width),
                    control_channels=6 * k if mode == "camera" else 0,
                    hidden=cfg.hidden, control_hidden=cfg.control_hidden, kernel=cfg.kernel, steps=cfg.sample_steps,
                    lr=cfg.lr, batch_size=cfg.batch_size, mixture_ratio=cfg.mixture_ratio,
                    pretrain_steps=pre, finetune_steps=cfg.motion_steps - pre,
                    seed=stage_seed(cfg.seed, "train-motion"), prediction=cfg.prediction,
                    lr_schedule=cfg.lr_schedule)


def video_config(cfg: PipelineConfig) -> FMConfig:
    k = cfg.n_frames
    return FMConfig(sample_shape=(3 * k, cfg.height, cfg.width), control_channels=3 * (k - 1),
                    hidden=cfg.hidden, control_hidden=cfg.control_hidden, kernel=cfg.kernel, steps=cfg.sample_steps,
                    lr=cfg.lr, batch_size=cfg.batch_size, mixture_ratio=0.0,
                    pretrain_steps=cfg.video_steps, finetune_steps=0,
                    seed=stage_seed(cfg.seed, "train-video"), prediction=cfg.prediction,
                    lr_schedule=cfg.lr_schedule)


def build_pools(cfg: PipelineConfig, manifest: DatasetManifest, mode: str):
    """Motion pools (encoded flow, Plücker maps) per source and video pool (frames, encoded flow)."""
    motion, video = TrainingPools(), TrainingPools()
    for source in ("real", "synthetic"):
        entries = manifest.by_source(source)
        if not entries:
            continue
        enc = torch.stack([_encoded_tensor(cfg, e) for e in entries])
        setattr(motion, source, enc)
        if mode == "camera":
            setattr(motion, f"{source}_control", torch.stack([_plucker_tensor(cfg, e) for e in entries]))
        if source == "real":
            video.real = torch.stack([stack_images(read_frames(cfg, e.frame_paths)) for e in entries])
            video.real_control = enc
    return motion, video


def train_stage(cfg: PipelineConfig, log=None):
    """Train the motion generator (pretrain on real, fine-tune on mixtures) and the video generator."""
    manifest = load_manifest(cfg)
    if manifest.scale_factor_px is None:
        raise DataError("manifest has no scale factor (run `encode` first)")
    mode = manifest.extra.get("mode", cfg.mode)
    motion_pools, video_pools = build_pools(cfg, manifest, mode)
    ck = cfg.root / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(stage_seed(cfg.seed, "train"))
    out = {}
    # tiny activations late in training otherwise hit slow denormal arithmetic
    torch.set_flush_denormal(True)
    try:
        for name, mcfg, pools in (("motion", motion_config(cfg, mode), motion_pools),
                                  ("video", video_config(cfg), video_pools)):
            model = FMModel(mcfg)
            with open(ck / f"{name}_train.jsonl", "w", encoding="utf-8") as fh:
                def sink(rec, fh=fh, name=name):
                    fh.write(rec.to_json() + "\n")
                    if log is not None:
                        log(name, rec)
                model, records = train(model, pools, mcfg, log=sink)
            save_checkpoint(model, ck / f"{name}.ckpt",
                            {"mode": mode, "scale_factor_px": manifest.scale_factor_px})
            out[name] = (model, records)
    finally:
        torch.set_flush_denormal(False)
    return out


# -- generate -----------------------------------------------------------------------

def eval_shifts(cfg: PipelineConfig) -> list:
    rng = np.random.default_rng(stage_seed(cfg.seed, "eval-clips"))
    return [random_shift(rng) for _ in range(cfg.n_eval)]


def _load_models(cfg: PipelineConfig):
    ck = cfg.root / "checkpoints"
    motion, extra = load_checkpoint(_require(ck / "motion.ckpt", "train"))
    video, _ = load_checkpoint(_require(ck / "video.ckpt", "train"))
    return motion, video, extra


def generate_from_flows(video: FMModel, flows_per_clip, s_f: float, steps: int, seed: int) -> list:
    """Stage-2 frames conditioned on given flow sequences (one batch)."""
    control = torch.stack([stack_images([encode_flow(f, s_f) for f in fl]) for fl in flows_per_clip])
    gen = torch.Generator().manual_seed(seed)
    x = sample(video, (control.shape[0],) + video.config.sample_shape, control, steps, gen)
    return [unstack_images(x[b]) for b in range(x.shape[0])]


def _save_sequence(d: Path, frames=None, flows=None) -> None:
    d.mkdir(parents=True, exist_ok=True)
    for k, im in enumerate(frames if frames is not None else []):
        io.write_rgb_png(d / f"frame_{k:03d}.png", im)
    for k, f in enumerate(flows if flows is not None else []):
        io.write_flo(d / f"flow_{k:03d}.flo", f)


def generate_stage(cfg: PipelineConfig) -> dict:
    """Stage-2 samples on ground-truth testbed flow (clean and noisy) plus two-stage samples."""
    manifest = load_manifest(cfg)
    motion, video, extra = _load_models(cfg)
    s_f = float(extra.get("scale_factor_px") or manifest.scale_factor_px)
    mode = extra.get("mode", cfg.mode)
    intr = default_intrinsics(cfg.width, cfg.height)
    shifts = eval_shifts(cfg)
    gt = [testbed_gt_flows(s, cfg.n_frames, intr) for s in shifts]
    root = cfg.root / "generated"
    seed = stage_seed(cfg.seed, "generate")
    clean = generate_from_flows(video, gt, s_f, cfg.sample_steps, seed)
    for i, (fr, fl) in enumerate(zip(clean, gt)):
        _save_sequence(root / "gt_cond" / f"eval_{i:02d}", fr, fl)
    for db in cfg.snrs:
        noisy = [[add_noise_snr(f, db, stage_seed(cfg.seed, f"noise-{db}-{i}-{k}")).flow
                  for k, f in enumerate(fl)] for i, fl in enumerate(gt)]
        frames = generate_from_flows(video, noisy, s_f, cfg.sample_steps, seed)
        for i, fr in enumerate(frames):
            _save_sequence(root / f"snr_{db:g}" / f"eval_{i:02d}", fr, noisy[i])
    plucker = None
    if mode == "camera":
        plucker = torch.stack([torch.from_numpy(plucker_stack(testbed_trajectory(s, cfg.n_frames, intr)))
                               for s in shifts])
    else:
        plucker = torch.zeros(len(shifts), 0, cfg.height, cfg.width)
    flows, videos = two_stage_generate(motion, video, plucker, s_f, mode, cfg.sample_steps,
                                       stage_seed(cfg.seed, "two-stage"))
    for i, (fl, fr) in enumerate(zip(flows, videos)):
        _save_sequence(root / "two_stage" / f"eval_{i:02d}", fr, fl)
    summary = {"shifts": [list(s) for s in shifts], "snrs": list(cfg.snrs), "scale_factor_px": s_f,
               "mode": mode}
    io.write_json(root / "summary.json", summary)
    return summary


# -- eval --------------------------------------------------------------------------

def _read_sequence(d: Path):
    frames = [io.read_rgb_png(p) for p in sorted(d.glob("frame_*.png"))]
    flows = [io.read_flo(p) for p in sorted(d.glob("flow_*.flo"))]
    return frames, flows


def _m_err_dir(d: Path, reference: dict | None = None) -> float:
    """M-Err pooled over every clip directory below ``d``."""
    inp, est = [], []
    clips = sorted(p for p in d.iterdir() if p.is_dir())
    if not clips:
        raise DataError(f"no generated clips under {d}")
    for c in clips:
        frames, flows = _read_sequence(c)
        if reference is not None:
            flows = reference[c.name]
        inp += flows
        est += estimate_flow_naive(FrameSequence(np.stack(frames)))
    return motion_error(inp, est)


def eval_stage(cfg: PipelineConfig) -> MetricReport:
    root = _require(cfg.root / "generated", "generate")
    summary = io.read_json(_require(root / "summary.json", "generate"))
    gt_dirs = sorted(p for p in (root / "gt_cond").iterdir() if p.is_dir())
    reference = {c.name: _read_sequence(c)[1] for c in gt_dirs}
    report = MetricReport()
    report.m_err = _m_err_dir(root / "gt_cond")
    per_frame = []
    for c in gt_dirs:
        frames, flows = _read_sequence(c)
        est = estimate_flow_naive(FrameSequence(np.stack(frames)))
        per_frame.append([motion_error([a], [b]) for a, b in zip(flows, est)])
    report.per_frame_m_err = per_frame
    for db in summary["snrs"]:
        report.robustness[float(db)] = _m_err_dir(root / f"snr_{db:g}", reference)
    report.two_stage_m_err = _m_err_dir(root / "two_stage")
    out = report.to_dict()
    out["mode"] = summary["mode"]
    (cfg.root / "reports").mkdir(parents=True, exist_ok=True)
    io.write_json(cfg.root / "reports" / "metrics.json", out)
    return report


def eval_flow_dirs(input_dir, estimated_dir) -> MetricReport:
    """M-Err between two directories of .flo files matched by sorted name."""
    a = sorted(Path(input_dir).glob("*.flo"))
    b = sorted(Path(estimated_dir).glob("*.flo"))
    if not a:
        raise DataError(f"no .flo files in {input_dir}")
    report = MetricReport()
    report.m_err = motion_error([io.read_flo(p) for p in a], [io.read_flo(p) for p in b])
    return report


# -- viz -------------------------------------------------------------------------

def color_wheel(size: int = 65) -> np.ndarray:
    """Legend: the codec colour of every normalised flow inside the unit disk, black outside."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    g = np.stack([(xx - c) / c, (yy - c) / c], axis=-1)
    inside = np.linalg.norm(g, axis=-1) <= 1.0
    g[~inside] = 0.0
    rgb = flow_to_rgb(FlowField(g))
    rgb[~inside] = 0.0
    return rgb


def viz_stage(cfg: PipelineConfig, clips=None) -> list:
    manifest = load_manifest(cfg)
    if manifest.scale_factor_px is None:
        raise DataError("manifest has no scale factor (run `encode` first)")
    out = cfg.root / "viz"
    out.mkdir(parents=True, exist_ok=True)
    io.write_rgb_png(out / "legend.png", color_wheel())
    written = [out / "legend.png"]
    for e in manifest.entries:
        if clips and e.clip_id not in clips:
            continue
        for k, f in enumerate(read_flows(cfg, e.flow_paths)):
            p = out / e.clip_id / f"flow_{k:03d}.png"
            p.parent.mkdir(parents=True, exist_ok=True)
            io.write_rgb_png(p, encode_flow(f, manifest.scale_factor_px))
            written.append(p)
    return written
