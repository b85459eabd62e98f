"""Flow matching on image-shaped tensors.

Linear path ``x_t = (1 - t) x0 + t eps`` from data (t=0) to Gaussian noise
(t=1); the regression target is the constant velocity ``eps - x0`` and
sampling integrates ``dx/dt = u(x, t)`` backwards from t=1 with explicit
Euler steps.

With ``prediction="sample"`` the network outputs an estimate of ``x0`` and
the velocity is recovered as ``(x_t - x0_hat) / t``; its training loss is the
squared ``x0`` error, which equals the velocity error weighted by ``t**2``.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError


@dataclass
class FMConfig:
    sample_shape: tuple = (3, 32, 32)
    control_channels: int = 0
    cond_dim: int = 0
    hidden: int = 64
    control_hidden: int = 32
    n_blocks: int = 3
    kernel: int = 3
    pos_freqs: tuple = (1, 2, 4)
    time_dim: int = 32
    steps: int = 100  # Euler steps at sampling time
    lr: float = 2e-3
    batch_size: int = 16
    mixture_ratio: float = 0.5
    pretrain_steps: int = 0
    finetune_steps: int = 500
    seed: int = 0
    prediction: str = "velocity"  # or "sample": network predicts x0
    min_t: float = 1e-4  # floor on t when turning an x0 estimate into a velocity
    lr_schedule: str = "constant"  # or "cosine"

    def __post_init__(self):
        self.sample_shape = tuple(int(s) for s in self.sample_shape)
        self.pos_freqs = tuple(self.pos_freqs)
        if self.prediction not in ("velocity", "sample"):
            raise DataError(f"prediction must be 'velocity' or 'sample', got {self.prediction!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise DataError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if not self.min_t > 0:
            raise DataError("min_t must be positive")
        if self.steps < 1:
            raise DataError("integrator steps must be >= 1")
        if not 0.0 <= self.mixture_ratio <= 1.0:
            raise DataError("mixture_ratio must lie in [0, 1]")
        if self.batch_size < 1:
            raise DataError("batch size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sample_shape"] = list(self.sample_shape)
        d["pos_freqs"] = list(self.pos_freqs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FMConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def fm_interpolate(x0, eps, t):
    """Point on the straight path from ``x0`` (t=0) to ``eps`` (t=1)."""
    x0, eps = torch.as_tensor(x0), torch.as_tensor(eps)
    if x0.shape != eps.shape:
        raise DataError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    t = torch.as_tensor(t, dtype=x0.dtype)
    if torch.any((t < 0) | (t > 1)):
        raise DataError("t must lie in [0, 1]")
    if t.ndim == 1 and x0.ndim > 1:
        t = t.reshape(-1, *([1] * (x0.ndim - 1)))
    return (1 - t) * x0 + t * eps


def fm_target_velocity(x0, eps):
    x0, eps = torch.as_tensor(x0), torch.as_tensor(eps)
    if x0.shape != eps.shape:
        raise DataError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    return eps - x0


def gaussian_optimal_velocity(x, t):
    """Exact marginal velocity when the data are standard normal."""
    return (2 * t - 1) / ((1 - t) ** 2 + t ** 2) * x


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half, dtype=t.dtype))
    ang = math.pi * t[:, None] * freqs[None]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


def positional_channels(h: int, w: int, freqs, dtype=torch.float32) -> torch.Tensor:
    """Fourier features of pixel coordinates, (4 * len(freqs), H, W)."""
    yy, xx = torch.meshgrid(torch.arange(h, dtype=dtype) / h, torch.arange(w, dtype=dtype) / w,
                            indexing="ij")
    ch = []
    for f in freqs:
        for g in (xx, yy):
            ch += [torch.sin(2 * math.pi * f * g), torch.cos(2 * math.pi * f * g)]
    if not ch:
        return torch.zeros(0, h, w, dtype=dtype)
    return torch.stack(ch)


class FMModel(nn.Module):
    """Small convolutional velocity network with an additive control branch.

    The trunk is an input convolution, ``n_blocks`` convolution blocks and an
    output convolution.  When ``control_channels > 0`` a narrower branch of
    the same depth reads the control maps and, after every trunk block, adds
    its features into the trunk through a zero-initialised 1x1 projection.
    """

    def __init__(self, config: FMConfig):
        super().__init__()
        self.config = config
        # parameter init draws from its own seeded stream, leaving the global RNG alone
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self._build(config)

    def _build(self, config: FMConfig):
        c, h, w = config.sample_shape
        k, pad = config.kernel, config.kernel // 2
        hid, chid = config.hidden, config.control_hidden
        self.register_buffer("pos", positional_channels(h, w, config.pos_freqs), persistent=False)
        npos = self.pos.shape[0]

        self.inp = nn.Conv2d(c + npos, hid, 3, padding=1)
        self.blocks = nn.ModuleList(nn.Conv2d(hid, hid, k, padding=pad) for _ in range(config.n_blocks))
        self.out = nn.Conv2d(hid, c, 3, padding=1)
        self.time_mlp = nn.Sequential(nn.Linear(config.time_dim, hid), nn.SiLU(), nn.Linear(hid, hid))
        self.cond_proj = nn.Linear(config.cond_dim, hid) if config.cond_dim else None

        if config.control_channels:
            self.ctrl_in = nn.Conv2d(config.control_channels + npos, chid, 3, padding=1)
            self.ctrl_blocks = nn.ModuleList(nn.Conv2d(chid, chid, k, padding=pad)
                                             for _ in range(config.n_blocks))
            self.ctrl_proj = nn.ModuleList(nn.Conv2d(chid, hid, 1) for _ in range(config.n_blocks))
            for p in self.ctrl_proj:
                nn.init.zeros_(p.weight)
                nn.init.zeros_(p.bias)
        else:
            self.ctrl_in = None

    @property
    def has_control(self) -> bool:
        return self.ctrl_in is not None

    def control_features(self, control: torch.Tensor) -> list:
        """Context maps added to the trunk after each block."""
        pos = self.pos.to(control.dtype).expand(control.shape[0], -1, -1, -1)
        g = F.silu(self.ctrl_in(torch.cat([control, pos], dim=1)))
        feats = []
        for blk, proj in zip(self.ctrl_blocks, self.ctrl_proj):
            g = F.silu(blk(g))
            feats.append(proj(g))
        return feats

    def forward(self, x, t, control=None, cond=None):
        b = x.shape[0]
        t = torch.as_tensor(t, dtype=x.dtype)
        if t.ndim == 0:
            t = t.expand(b)
        emb = self.time_mlp(timestep_embedding(t, self.config.time_dim))
        if self.cond_proj is not None and cond is not None:
            emb = emb + self.cond_proj(cond)
        emb = emb[:, :, None, None]
        pos = self.pos.to(x.dtype).expand(b, -1, -1, -1)
        h = F.silu(self.inp(torch.cat([x, pos], dim=1)))
        feats = self.control_features(control) if (control is not None and self.has_control) else None
        for i, blk in enumerate(self.blocks):
            h = F.silu(blk(h + emb))
            if feats is not None:
                h = h + feats[i]
        return self.out(h)


def _call(model, x, t, control):
    if isinstance(model, FMModel) or control is not None:
        return model(x, t, control)
    return model(x, t)


def _predicts_sample(model) -> bool:
    return getattr(getattr(model, "config", None), "prediction", "velocity") == "sample"


def velocity(model, x, t, control=None):
    """Velocity field of ``model`` at ``(x, t)`` whatever its output parameterization."""
    out = _call(model, x, t, control)
    if not _predicts_sample(model):
        return out
    t = torch.as_tensor(t, dtype=x.dtype)
    if t.ndim == 0:
        t = t.expand(x.shape[0])
    t = t.clamp(min=model.config.min_t).reshape(-1, *([1] * (x.ndim - 1)))
    return (x - out) / t


def fm_loss(model, x0: torch.Tensor, control=None, generator: torch.Generator | None = None):
    """Mean squared velocity error with ``t ~ U[0, 1]`` and ``eps ~ N(0, I)`` per sample.

    For ``x0``-predicting models this is the squared ``x0`` error instead.
    """
    if x0.shape[0] == 0:
        raise DataError("empty batch")
    b = x0.shape[0]
    t = torch.rand(b, generator=generator, dtype=x0.dtype)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    xt = fm_interpolate(x0, eps, t)
    pred = _call(model, xt, t, control)
    if _predicts_sample(model):
        return torch.mean((pred - x0) ** 2)
    return torch.mean((pred - fm_target_velocity(x0, eps)) ** 2)


@torch.no_grad()
def sample(model, shape, control=None, steps: int = 100, generator: torch.Generator | None = None,
           noise: torch.Tensor | None = None, dtype=torch.float32) -> torch.Tensor:
    """Euler integration of the learned velocity from t=1 (noise) to t=0."""
    if steps < 1:
        raise DataError("integrator steps must be >= 1")
    x = torch.randn(shape, generator=generator, dtype=dtype) if noise is None else noise.clone()
    dt = 1.0 / steps
    for i in range(steps):
        t = torch.full((x.shape[0],), 1.0 - i * dt, dtype=x.dtype)
        x = x - dt * velocity(model, x, t, control)
    return x


# -- training -----------------------------------------------------------------

@dataclass
class TrainRecord:
    step: int
    loss: float
    n_real: int
    n_synthetic: int
    phase: str = "finetune"

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainingPools:
    """In-memory training tensors: samples (N, C, H, W) and optional controls per source."""

    real: torch.Tensor | None = None
    synthetic: torch.Tensor | None = None
    real_control: torch.Tensor | None = None
    synthetic_control: torch.Tensor | None = None

    def size(self, source: str) -> int:
        x = getattr(self, source)
        return 0 if x is None else int(x.shape[0])


def batch_composition(batch_size: int, mixture_ratio: float) -> tuple:
    """(n_real, n_synthetic) with the synthetic count floored."""
    n_syn = int(math.floor(mixture_ratio * batch_size + 1e-12))
    return batch_size - n_syn, n_syn


def _draw(pools: TrainingPools, source: str, n: int, gen: torch.Generator):
    if n == 0:
        return None, None
    size = pools.size(source)
    if size == 0:
        raise DataError(f"no {source} samples available for this phase")
    idx = torch.randint(0, size, (n,), generator=gen)
    x = getattr(pools, source)[idx]
    c = getattr(pools, f"{source}_control")
    return x, (None if c is None else c[idx])


def train(model: FMModel, pools: TrainingPools, config: FMConfig, log=None):
    """Pretrain on real samples, then fine-tune on real/synthetic mixtures.

    Each fine-tune batch holds ``floor(mixture_ratio * B)`` synthetic samples
    and the rest real.  Returns ``(model, records)``.
    """
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    total = max(config.pretrain_steps, 0) + max(config.finetune_steps, 0)
    sched = None
    if config.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda i: 0.5 * (1 + math.cos(math.pi * i / total)))
    records = []
    phases = [("pretrain", config.pretrain_steps, (config.batch_size, 0)),
              ("finetune", config.finetune_steps, batch_composition(config.batch_size, config.mixture_ratio))]
    step = 0
    for phase, n_steps, (n_real, n_syn) in phases:
        if n_steps <= 0:
            continue
        for _ in range(n_steps):
            xr, cr = _draw(pools, "real", n_real, gen)
            xs, cs = _draw(pools, "synthetic", n_syn, gen)
            x0 = torch.cat([x for x in (xr, xs) if x is not None])
            ctrl = None
            if model.has_control:
                parts = [c for c in (cr, cs) if c is not None]
                if len(parts) != sum(x is not None for x in (xr, xs)):
                    raise DataError("control maps missing for a conditioned model")
                ctrl = torch.cat(parts)
            loss = fm_loss(model, x0, ctrl, generator=gen)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            rec = TrainRecord(step, float(loss.detach()), n_real, n_syn, phase)
            records.append(rec)
            if log is not None:
                log(rec)
            step += 1
    return model, records


# -- checkpoints ----------------------------------------------------------------

_CKPT_MAGIC = b"MKCK"


def save_checkpoint(model: FMModel, path, extra: dict | None = None) -> None:
    """Flat float32 blob of named tensors after a JSON header.

    Layout: magic, uint64 header length, header JSON, raw data.  The header
    lists ``{name, shape, offset}`` per tensor (offset in bytes from the start
    of the data section) plus the model config.
    """
    tensors, offset, blobs = [], 0, []
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"config": model.config.to_dict(), "tensors": tensors, "extra": extra or {}}
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Returns ``(model, extra)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != _CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint")
    (n,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + n])
    data = raw[12 + n:]
    model = FMModel(FMConfig.from_dict(header["config"]))
    state = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=t["offset"]).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    return model, header.get("extra", {})


# -- two-stage generation -------------------------------------------------------

def stack_images(images) -> torch.Tensor:
    """List of (H, W, 3) images in [0, 1] to one (3n, H, W) tensor in [-1, 1]."""
    arr = np.concatenate([np.asarray(im, dtype=np.float32).transpose(2, 0, 1) for im in images])
    return torch.from_numpy(arr * 2.0 - 1.0)


def unstack_images(x: torch.Tensor) -> np.ndarray:
    """(3n, H, W) tensor in [-1, 1] to (n, H, W, 3) images clipped to [0, 1]."""
    arr = x.detach().cpu().numpy().astype(float)
    n = arr.shape[0] // 3
    arr = arr.reshape(n, 3, *arr.shape[1:]).transpose(0, 2, 3, 1)
    return np.clip((arr + 1.0) / 2.0, 0.0, 1.0)


def two_stage_generate(motion_model: FMModel, video_model: FMModel, plucker, s_f: float,
                       mode: str = "camera", steps: int = 100, seed: int = 0):
    """Sample encoded flow with the motion model, then frames conditioned on it.

    ``plucker`` is a (B, 6 * frames, H, W) tensor, or None in ``human-like``
    mode.  Returns ``(flows, frames)``: per sample a list of decoded
    :class:`FlowField` and an (frames, H, W, 3) array.
    """
    from .codec import rgb_to_flow

    if mode not in ("camera", "human-like"):
        raise DataError(f"unknown mode {mode!r}")
    if mode == "camera" and plucker is None:
        raise DataError("camera mode needs Plücker conditioning")
    mc, h, w = motion_model.config.sample_shape
    vc, vh, vw = video_model.config.sample_shape
    if (h, w) != (vh, vw) or video_model.config.control_channels != mc or mc != vc - 3:
        raise DataError(f"incompatible stages: motion {motion_model.config.sample_shape} "
                        f"vs video {video_model.config.sample_shape} "
                        f"(control {video_model.config.control_channels})")
    control = None
    if plucker is not None and mode == "camera":
        control = torch.as_tensor(plucker, dtype=torch.float32)
        if control.ndim == 3:
            control = control[None]
        if control.shape[1] != motion_model.config.control_channels or control.shape[2:] != (h, w):
            raise DataError(f"Plücker maps {tuple(control.shape)} do not fit the motion model")
        batch = control.shape[0]
    else:
        batch = 1 if plucker is None else int(torch.as_tensor(plucker).shape[0])
    gen = torch.Generator().manual_seed(seed)
    enc = sample(motion_model, (batch, mc, h, w), control, steps, gen)
    enc = enc.clamp(-1.0, 1.0)
    frames = sample(video_model, (batch, vc, h, w), enc, steps, gen)
    flows, videos = [], []
    for b in range(batch):
        rgbs = unstack_images(enc[b])
        flows.append([rgb_to_flow(im, s_f) for im in rgbs])
        videos.append(unstack_images(frames[b]))
    return flows, videos
