"""Alternating discriminator / generator optimization with checkpoints.

Each step first updates both discriminators on detached translations, then
updates both generators on the variant's objective. Checkpoints carry the
optimizer and sampler state so a resumed run continues bit-compatibly.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import DatasetManifest, UnpairedSampler, substream_seed
from .losses import LossReport, LossWeights, Variant, discriminator_loss, objective_terms
from .nets import NetConfig, Networks, build_networks
from .volumes import SUPPORTED_N

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CSV_FIELDS = ("step", "variant", *LossReport.FIELDS, "gen_total", "disc")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, phase: str, components: dict):
        self.step, self.phase, self.components = step, phase, components
        parts = ", ".join(f"{k}={v:.6g}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step} ({phase} phase): {parts}")


@dataclass(frozen=True)
class TrainConfig:
    variant: Variant = Variant.PROPOSED
    n_slices: int = 3
    batch_size: int = 4
    epochs: int = 1
    steps_per_epoch: int = 100
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    lr_decay: bool = False  # linear decay to zero over the second half
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_interval: int = 500
    crop: int | None = 64  # random spatial crop for training windows
    gen_depth: int = 3
    gen_width: int = 16

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.n_slices not in SUPPORTED_N:
            raise ValueError(f"n_slices must be one of {SUPPORTED_N}, got {self.n_slices}")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must be >= 1")
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ValueError("lr must be finite and non-negative")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def net_config(self) -> NetConfig:
        return NetConfig(n_slices=self.n_slices, gen_depth=self.gen_depth, gen_width=self.gen_width)

    def as_record(self) -> dict:
        rec = asdict(self)
        rec["variant"] = self.variant.value
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "TrainConfig":
        rec = dict(rec)
        rec["weights"] = LossWeights(**rec["weights"])
        rec["betas"] = tuple(rec["betas"])
        return cls(**rec)


@dataclass
class TrainState:
    nets: Networks
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    config: TrainConfig
    step: int = 0
    trace: deque = field(default_factory=lambda: deque(maxlen=64))  # (step, phase) log
    last_extra: dict = field(default_factory=dict)


def init_state(config: TrainConfig, dtype=torch.float32) -> TrainState:
    net_seed = substream_seed(config.seed, "training", 0)
    nets = build_networks(config.net_config(), seed=net_seed, dtype=dtype)
    opt_g = torch.optim.Adam(nets.generators(), lr=config.lr, betas=config.betas)
    opt_d = torch.optim.Adam(nets.discriminators(), lr=config.lr, betas=config.betas)
    return TrainState(nets, opt_g, opt_d, config)


def _current_lr(config: TrainConfig, step: int) -> float:
    if not config.lr_decay:
        return config.lr
    half = config.total_steps / 2
    return config.lr * min(1.0, max(0.0, (config.total_steps - step) / half))


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _check_finite(step, phase, components):
    values = {k: float(v) for k, v in components.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise NonFiniteLossError(step, phase, values)


def _as_tensor(batch, dtype):
    return torch.as_tensor(np.ascontiguousarray(batch), dtype=dtype)


def train_step(state: TrainState, batch_x, batch_y) -> tuple[TrainState, LossReport]:
    """One discriminator update followed by one generator update."""
    nets, cfg = state.nets, state.config
    dtype = next(nets.G_Y.parameters()).dtype
    bx, by = _as_tensor(batch_x, dtype), _as_tensor(batch_y, dtype)
    lr = _current_lr(cfg, state.step)
    _set_lr(state.opt_d, lr)
    _set_lr(state.opt_g, lr)

    # discriminator phase: translations are constants here
    with torch.no_grad():
        fake_y, fake_x = nets.G_Y(bx), nets.G_X(by)
    state.opt_d.zero_grad(set_to_none=True)
    d_loss = discriminator_loss(nets, bx, by, fake_x, fake_y)
    _check_finite(state.step, "discriminator", {"disc": d_loss.detach()})
    d_loss.backward()
    state.opt_d.step()
    state.trace.append((state.step, "D"))

    # generator phase: discriminators are fixed
    for p in nets.discriminators():
        p.requires_grad_(False)
    try:
        state.opt_g.zero_grad(set_to_none=True)
        terms = objective_terms(cfg.variant, cfg.weights, nets, bx, by)
        _check_finite(state.step, "generator", {k: getattr(terms, k).detach() for k in (*LossReport.FIELDS, "gen_total")})
        terms.gen_total.backward()
        state.opt_g.step()
    finally:
        for p in nets.discriminators():
            p.requires_grad_(True)
    state.trace.append((state.step, "G"))

    for p in nets.generators():
        if not torch.isfinite(p).all():
            raise NonFiniteLossError(state.step, "generator parameters", terms.report().as_dict())
    state.step += 1
    state.last_extra = {"gen_total": float(terms.gen_total.detach()), "disc": float(d_loss.detach())}
    return state, terms.report()


# --- checkpoints ---------------------------------------------------------------

def config_hash(config: TrainConfig) -> str:
    return config.net_config().hash()


def save_checkpoint(state: TrainState, path: str | os.PathLike, sampler_rng: np.random.Generator | None = None) -> Path:
    path = Path(path)
    nets = state.nets
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.config.as_record(),
        "config_hash": config_hash(state.config),
        "step": state.step,
        "enc_seed": nets.config.enc_seed,
        "nets": {k: getattr(nets, k).state_dict() for k in ("G_X", "G_Y", "D_X", "D_Y")},
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "sampler_rng": sampler_rng.bit_generator.state if sampler_rng is not None else None,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


@dataclass
class Checkpoint:
    state: TrainState
    sampler_state: dict | None
    path: Path | None = None


def load_checkpoint(path: str | os.PathLike, expect_n_slices: int | None = None) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    config = TrainConfig.from_record(payload["config"])
    if config_hash(config) != payload["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch, architecture drifted")
    if expect_n_slices is not None and expect_n_slices != config.n_slices:
        raise ValueError(f"checkpoint was trained with N={config.n_slices}, requested N={expect_n_slices}")
    state = init_state(config)
    for k, sd in payload["nets"].items():
        getattr(state.nets, k).load_state_dict(sd)
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_d.load_state_dict(payload["opt_d"])
    state.step = payload["step"]
    torch.set_rng_state(payload["torch_rng"])
    return Checkpoint(state, payload["sampler_rng"], Path(path))


# --- loop ------------------------------------------------------------------------

def _read_rows(csv_path: Path, upto: int) -> list[dict]:
    if not csv_path.exists():
        return []
    with csv_path.open(newline="") as fh:
        return [row for row in csv.DictReader(fh) if int(row["step"]) < upto]


def train(config: TrainConfig, manifest: DatasetManifest, out_dir: str | os.PathLike,
          resume: str | os.PathLike | None = None, stop_after: int | None = None) -> Checkpoint:
    """Run ``config.total_steps`` steps; writes ``loss.csv`` and ``checkpoint.pt`` in out_dir.

    ``stop_after`` ends the run early at that step (used to simulate interruption).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path, csv_path = out / "checkpoint.pt", out / "loss.csv"
    sampler = UnpairedSampler(manifest)
    rng = np.random.default_rng(substream_seed(config.seed, "sampling", 0))
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.state.config != config:
            raise ValueError("resume checkpoint was written with a different training config")
        state = ck.state
        if ck.sampler_state is not None:
            rng.bit_generator.state = ck.sampler_state
    else:
        state = init_state(config)
    rows = _read_rows(csv_path, state.step) if resume is not None else []
    enc_before = [p.detach().clone() for p in state.nets.f.parameters()]

    end = config.total_steps if stop_after is None else min(stop_after, config.total_steps)
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
        while state.step < end:
            batch = sampler.sample(config.n_slices, config.batch_size, rng, crop=config.crop)
            step = state.step
            state, report = train_step(state, batch.x, batch.y)
            writer.writerow({"step": step, "variant": config.variant.value, **report.as_dict(), **state.last_extra})
            if state.step % config.checkpoint_interval == 0 or state.step == end:
                fh.flush()
                save_checkpoint(state, ckpt_path, rng)
            if step % 100 == 0:
                log.info("step %d total=%.4f disc=%.4f", step, report.total, state.last_extra["disc"])

    for before, after in zip(enc_before, state.nets.f.parameters()):
        if not torch.equal(before, after):
            raise RuntimeError("feature encoder changed during training")
    return Checkpoint(state, rng.bit_generator.state, ckpt_path)
