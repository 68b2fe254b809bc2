"""Training loop for one stage's backbone, with resumable checkpoints."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig, SliceUNet, load_checkpoint, save_checkpoint
from .data import PairSettings, draw_training_pair, prepare_training_sources
from .diffusion import INPAINT, REFINE, build_linear_schedule, training_loss
from .errors import ConfigurationError, NumericalError
from .orient import AXIAL, CORONAL

log = logging.getLogger(__name__)

FULL_ITERATIONS = 325_000
LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    stage: str = AXIAL
    iterations: int = 2000
    learning_rate: float = 1e-4
    lr_schedule: str = "constant"
    seed: int = 0
    grad_clip: float = 1.0
    save_every: int = 500
    blur_sigma: float = 1.0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    pairs: PairSettings = field(default_factory=PairSettings)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.stage not in (AXIAL, CORONAL):
            raise ConfigurationError(f"stage must be {AXIAL!r} or {CORONAL!r}, got {self.stage!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if isinstance(self.pairs, dict):
            self.pairs = PairSettings(**self.pairs)
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        self.pairs.multiple = max(self.pairs.multiple, self.backbone.downsampling_factor)

    @property
    def context_mode(self) -> str:
        return INPAINT if self.stage == AXIAL else REFINE

    def lr_at(self, iteration: int) -> float:
        if self.lr_schedule == "cosine":
            return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * iteration / self.iterations))
        return self.learning_rate

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        d["pairs"]["factor_range"] = list(self.pairs.factor_range)
        return d


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration])


def train_stage(volumes, masks, config: TrainConfig, checkpoint=None, loss_log=None, resume=False, device="cpu"):
    """Train (or continue training) one stage's denoiser.

    Every iteration draws one slice stack and one timestep from an RNG keyed
    on (seed, iteration), so a resumed run reproduces the draws it would
    have made without interruption. Returns (model, list of losses).
    """
    schedule = build_linear_schedule(config.T, config.beta_start, config.beta_end)
    sources = prepare_training_sources(volumes, masks, config.stage, config.pairs)

    start = 0
    opt_state = None
    if resume and checkpoint is not None and Path(checkpoint).exists():
        model, payload = load_checkpoint(checkpoint)
        if payload.get("stage") != config.stage:
            raise ConfigurationError(f"cannot resume a {payload.get('stage')} checkpoint as {config.stage}")
        start = int(payload.get("iteration", 0))
        opt_state = payload.get("optimizer")
        model.train()
    else:
        torch.manual_seed(config.seed)
        model = SliceUNet(config.backbone)
    model.to(device)
    model.stage = config.stage
    model.schedule_params = schedule.to_dict()

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    if opt_state is not None:
        optimizer.load_state_dict(opt_state)

    def save(iteration):
        if checkpoint is None:
            return
        save_checkpoint(
            checkpoint,
            model,
            config.stage,
            {
                "iteration": iteration,
                "optimizer": optimizer.state_dict(),
                "schedule": schedule.to_dict(),
                "train_config": config.to_dict(),
            },
        )

    log_file = open(loss_log, "a" if start else "w") if loss_log else None
    if log_file is not None and start == 0:
        log_file.write("iteration,t,loss\n")
    losses = []
    try:
        model.train()
        for it in range(start, config.iterations):
            rng = iteration_rng(config.seed, it)
            x0, m = draw_training_pair(sources, config.stage, rng, config.pairs)
            t = int(rng.integers(schedule.T))
            for group in optimizer.param_groups:
                group["lr"] = config.lr_at(it)
            try:
                loss = training_loss(model, x0, m, config.context_mode, schedule, rng, config.blur_sigma, t=t)
            except NumericalError as exc:
                raise NumericalError(str(exc), stage=config.stage, step=it + 1) from exc
            if not math.isfinite(loss.item()):
                raise NumericalError("non-finite loss", stage=config.stage, step=it + 1)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            losses.append(loss.item())
            if log_file is not None:
                log_file.write(f"{it + 1},{t},{loss.item():.8g}\n")
            if (it + 1) % config.save_every == 0:
                save(it + 1)
                log.info("%s iteration %d loss %.5f", config.stage, it + 1, np.mean(losses[-config.save_every :]))
    finally:
        if log_file is not None:
            log_file.close()
    save(config.iterations)
    model.eval()
    return model, losses


def read_loss_log(path) -> np.ndarray:
    """(iteration, t, loss) rows of a loss log."""
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
