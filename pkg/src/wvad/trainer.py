"""Training loop: balanced sampling, Adam with decoupled weight decay,
per-step loss logging, epoch-end checkpoints with exact resume.

Determinism contract: (videos, config) fully determine the trajectory at a
fixed BLAS thread count. All training math runs in float32, matching the
checkpoint precision, so save -> load -> continue is bitwise identical to an
uninterrupted run. One generator drives sampling (and dropout, when on);
its state is serialised into the checkpoint next to the optimiser moments.

Checkpoint layout: the encoder module's parameter block, then an appended
section ``WVOP`` with u32 step, u32 next-epoch, a JSON generator state, and
the first/second moments as float32 in parameter declaration order.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import EncoderConfig, LinearModel, TransformerModel, load_checkpoint, save_checkpoint
from .errors import ConfigError, FormatError, TrainingError
from .losses import BatchItem, LossConfig, loss_total
from .mining import MiningConfig, mine_batch
from .tensor import Tensor

OPT_MAGIC = b"WVOP"

LOG_COLUMNS = ("step", "epoch", "l_total", "l_snp", "l_vid", "l_reg", "l_cnt",
               "n_ha", "n_hn")

# one video as the trainer sees it
VideoTriple = tuple[str, int, np.ndarray]


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    weight_decay: float = 5e-4
    batch_normal: int = 16
    batch_abnormal: int = 16
    seed: int = 0
    mining_warmup_epochs: int = 2   # epochs of noisy scores skipped before mining starts
    model: str = "transformer"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be >= 0")
        if self.batch_normal < 1 or self.batch_abnormal < 1:
            raise ConfigError("both classes need at least one video per batch")
        if self.mining_warmup_epochs < 0:
            raise ConfigError("mining_warmup_epochs must be >= 0")
        if self.model not in ("transformer", "linear"):
            raise ConfigError(f"model must be transformer or linear, got {self.model!r}")


@dataclass
class LogRow:
    step: int
    epoch: int
    l_total: float
    l_snp: float
    l_vid: float
    l_reg: float
    l_cnt: float
    n_ha: int
    n_hn: int

    def as_csv(self) -> list[str]:
        return [str(self.step), str(self.epoch), repr(self.l_total), repr(self.l_snp),
                repr(self.l_vid), repr(self.l_reg), repr(self.l_cnt),
                str(self.n_ha), str(self.n_hn)]


@dataclass
class TrainResult:
    model: TransformerModel | LinearModel
    log: list[LogRow]
    steps: int
    checkpoint_path: Path | None


# ---------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[tuple[str, Tensor]]) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for _, p in params],
                   v=[np.zeros_like(p.data) for _, p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 0.0):
    """One Adam update with bias correction; weight decay applied to the
    parameter directly (decoupled), not mixed into the gradient."""
    b1, b2 = betas
    state.t += 1
    t = state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {i} at adam step {t}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / (1.0 - b1 ** t)
        v_hat = state.v[i] / (1.0 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * p.data


# ---------------------------------------------------------------------
# sampling


def sample_batch(videos: Sequence[VideoTriple], rng: np.random.Generator,
                 batch_normal: int, batch_abnormal: int) -> list[int]:
    """One balanced batch of video indices, without replacement per class."""
    normal = [i for i, (_, label, _) in enumerate(videos) if label == 0]
    abnormal = [i for i, (_, label, _) in enumerate(videos) if label == 1]
    if len(normal) < batch_normal or len(abnormal) < batch_abnormal:
        raise ConfigError(
            f"need {batch_normal} normal / {batch_abnormal} abnormal videos, "
            f"dataset has {len(normal)} / {len(abnormal)}")
    picked_n = rng.permutation(len(normal))[:batch_normal]
    picked_a = rng.permutation(len(abnormal))[:batch_abnormal]
    return [normal[i] for i in picked_n] + [abnormal[i] for i in picked_a]


class BalancedSampler:
    """Per-epoch class-balanced batches, sampling without replacement.

    Each epoch reshuffles both class pools and chunks them; the tail that
    does not fill a batch is dropped, so a video appears at most once per
    epoch."""

    def __init__(self, labels: Sequence[int], batch_normal: int, batch_abnormal: int):
        self.normal = [i for i, y in enumerate(labels) if y == 0]
        self.abnormal = [i for i, y in enumerate(labels) if y == 1]
        if len(self.normal) < batch_normal or len(self.abnormal) < batch_abnormal:
            raise ConfigError(
                f"need {batch_normal} normal / {batch_abnormal} abnormal videos, "
                f"dataset has {len(self.normal)} / {len(self.abnormal)}")
        self.batch_normal = batch_normal
        self.batch_abnormal = batch_abnormal
        self.steps_per_epoch = min(len(self.normal) // batch_normal,
                                   len(self.abnormal) // batch_abnormal)

    def epoch_batches(self, rng: np.random.Generator) -> list[list[int]]:
        norm = rng.permutation(len(self.normal))
        abno = rng.permutation(len(self.abnormal))
        batches = []
        for s in range(self.steps_per_epoch):
            n = [self.normal[i] for i in norm[s * self.batch_normal:(s + 1) * self.batch_normal]]
            a = [self.abnormal[i]
                 for i in abno[s * self.batch_abnormal:(s + 1) * self.batch_abnormal]]
            batches.append(n + a)
        return batches


# ---------------------------------------------------------------------
# optimiser-state serialisation


def _opt_state_bytes(state: AdamState, step: int, next_epoch: int,
                     rng: np.random.Generator) -> bytes:
    rng_blob = json.dumps(rng.bit_generator.state, sort_keys=True).encode("utf-8")
    parts = [OPT_MAGIC, struct.pack("<III", step, next_epoch, len(rng_blob)), rng_blob]
    for arr in state.m:
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    for arr in state.v:
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def _parse_opt_state(extra: bytes, params: Sequence[tuple[str, Tensor]], path):
    if extra[:4] != OPT_MAGIC:
        raise FormatError(f"{path}: checkpoint has no optimiser section")
    if len(extra) < 16:
        raise FormatError(f"{path}: truncated optimiser header")
    step, next_epoch, rng_len = struct.unpack_from("<III", extra, 4)
    offset = 16 + rng_len
    if len(extra) < offset:
        raise FormatError(f"{path}: truncated generator state")
    try:
        rng_state = json.loads(extra[16:offset].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad generator state: {e}") from e
    bit_gen = np.random.PCG64()
    bit_gen.state = rng_state
    rng = np.random.Generator(bit_gen)
    moments = []
    for _ in range(2):
        group = []
        for name, p in params:
            nbytes = p.data.size * 4
            if offset + nbytes > len(extra):
                raise FormatError(f"{path}: truncated moments at {name}")
            flat = np.frombuffer(extra, dtype="<f4", count=p.data.size, offset=offset)
            group.append(flat.reshape(p.data.shape).astype(np.float32))
            offset += nbytes
        moments.append(group)
    state = AdamState(m=moments[0], v=moments[1], t=step)
    return state, step, next_epoch, rng


# ---------------------------------------------------------------------
# training


def _build_model(config: TrainConfig):
    if config.model == "linear":
        return LinearModel.init(config.encoder.d_in, config.seed)
    return TransformerModel.init(config.encoder, config.seed)


def train(videos: Sequence[VideoTriple], config: TrainConfig,
          out_dir=None, resume=None) -> TrainResult:
    """Run the full loop; ``config.epochs`` is the total epoch target.

    With ``resume`` pointing at an epoch-end checkpoint, training continues
    from the stored epoch and reproduces the uninterrupted run exactly.
    """
    sampler = BalancedSampler([label for _, label, _ in videos],
                              config.batch_normal, config.batch_abnormal)
    if resume is not None:
        model, extra = load_checkpoint(resume)
        if model.kind != config.model:
            raise ConfigError(
                f"checkpoint is a {model.kind} model, config wants {config.model}")
        named = model.named_params()
        opt, step, start_epoch, rng = _parse_opt_state(extra, named, resume)
    else:
        model = _build_model(config)
        named = model.named_params()
        opt = AdamState.for_params(named)
        step = 0
        start_epoch = 0
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 1])))

    params = [p for _, p in named]
    out_path = Path(out_dir) if out_dir is not None else None
    ckpt_path = None
    log_fh = None
    writer = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_path / "checkpoint.wvck"
        log_fh = open(out_path / "log.csv", "w", newline="", encoding="utf-8")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)

    log: list[LogRow] = []
    try:
        for epoch in range(start_epoch, config.epochs):
            for batch_indices in sampler.epoch_batches(rng):
                step += 1
                row = train_step(model, [videos[i] for i in batch_indices],
                                 config, opt, rng, step, epoch)
                log.append(row)
                if writer is not None:
                    writer.writerow(row.as_csv())
            if ckpt_path is not None:
                save_checkpoint(ckpt_path, model,
                                extra=_opt_state_bytes(opt, step, epoch + 1, rng))
        if ckpt_path is not None and start_epoch >= config.epochs:
            # resumed past the target: persist state so the path is valid
            save_checkpoint(ckpt_path, model,
                            extra=_opt_state_bytes(opt, step, start_epoch, rng))
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(model=model, log=log, steps=step, checkpoint_path=ckpt_path)


def train_step(model, batch_videos: Sequence[VideoTriple], config: TrainConfig,
               opt: AdamState, rng: np.random.Generator, step: int, epoch: int) -> LogRow:
    """Forward, mine, loss, backward, Adam update for one batch."""
    items = []
    for video_id, label, feats in batch_videos:
        out = model.forward(feats, rng=rng)
        items.append(BatchItem(video_id=video_id, label=label, scores=out.scores,
                               video_score=out.video_score, features=out.features))
    mined = None
    if config.loss.w_contrast > 0 and epoch >= config.mining_warmup_epochs:
        mined = mine_batch([(b.video_id, b.label, b.scores.data) for b in items],
                           config.mining)
    total, breakdown = loss_total(items, mined, config.loss)
    if not np.isfinite(breakdown.l_total):
        raise TrainingError(
            f"non-finite loss at step {step} (epoch {epoch}): {breakdown}")
    params = [p for _, p in model.named_params()]
    for p in params:
        p.zero_grad()
    total.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    try:
        adam_step(params, grads, opt, lr=config.lr, weight_decay=config.weight_decay)
    except TrainingError as e:
        raise TrainingError(f"step {step} (epoch {epoch}): {e}") from e
    for i, p in enumerate(params):
        if not np.all(np.isfinite(p.data)):
            raise TrainingError(
                f"non-finite parameter {i} after step {step} (epoch {epoch})")
    counts = mined.counts() if mined is not None else {"HA": 0, "HN": 0}
    return LogRow(step=step, epoch=epoch, l_total=breakdown.l_total,
                  l_snp=breakdown.l_snp, l_vid=breakdown.l_vid,
                  l_reg=breakdown.l_reg, l_cnt=breakdown.l_cnt,
                  n_ha=counts["HA"], n_hn=counts["HN"])
