"""Training objective: four weighted terms over a mixed batch.

  l_vid   binary cross-entropy on the video-level scores, averaged over the
          batch so its scale does not depend on batch size
  l_snp   ranking hinge between abnormal and normal videos: the mean of each
          video's top-k snippet scores must separate by a margin of 1
  l_reg   per-video smoothness (squared score differences) plus sparsity
          (mean score), both scaled by 1/T and summed over the batch
  l_cnt   contrastive pull of hard snippets toward their easy counterparts,
          on L2-normalised features with a temperature, negated-log-ratio
          form; anchors are hard abnormal (positives easy abnormal,
          negatives easy normal) and symmetrically hard normal

A term with weight 0.0 is skipped entirely and reported as 0 in the
breakdown, which keeps ablations honest: no gradient can leak from a
disabled term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, TrainingError
from .mining import MinedSets
from .tensor import Tensor, concat, gather_rows, l2_normalize, topk_mean

_CLAMP = 1e-7

_PAIR_MODES = ("matched", "all_pairs")


@dataclass
class LossConfig:
    k: int = 3
    smooth_weight: float = 5e-4      # weight of the squared-difference term inside l_reg
    sparse_weight: float = 5e-4      # weight of the mean-score term inside l_reg
    temperature: float = 0.07
    w_contrast: float = 1.0
    w_snippet: float = 1.0
    w_video: float = 1.0
    w_reg: float = 1.0
    pair_mode: str = "matched"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.smooth_weight < 0 or self.sparse_weight < 0:
            raise ConfigError("regularisation weights must be >= 0")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        for name in ("w_contrast", "w_snippet", "w_video", "w_reg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.pair_mode not in _PAIR_MODES:
            raise ConfigError(f"pair_mode must be one of {_PAIR_MODES}, got {self.pair_mode!r}")


@dataclass
class LossBreakdown:
    """Scalar values of the objective terms, as logged per training step."""

    l_total: float
    l_cnt: float
    l_snp: float
    l_vid: float
    l_reg: float


@dataclass
class BatchItem:
    """One video's forward results plus its weak label."""

    video_id: str
    label: int
    scores: Tensor       # (T,)
    video_score: Tensor  # scalar
    features: Tensor     # (T, D)


def loss_video(video_scores: Sequence[Tensor], labels: Sequence[int]) -> Tensor:
    """Mean binary cross-entropy over the batch's video-level scores.

    Scores are clamped to [1e-7, 1-1e-7] before the logs.
    """
    if len(video_scores) != len(labels):
        raise ValueError(f"{len(video_scores)} scores vs {len(labels)} labels")
    if not video_scores:
        raise ValueError("empty batch")
    v = concat([s.reshape(1) for s in video_scores]).clip(_CLAMP, 1.0 - _CLAMP)
    y = Tensor(np.asarray(labels, dtype=v.data.dtype))
    return -(y * v.log() + (1.0 - y) * (1.0 - v).log()).mean()


def loss_snippet_topk(abn_scores: Tensor, nrm_scores: Tensor, k: int) -> Tensor:
    """Ranking hinge for one abnormal/normal video pair.

    max(0, 1 - topk_mean(abnormal) + topk_mean(normal)): zero once the
    abnormal video's top-k mean exceeds the normal one's by the margin.
    """
    margin = 1.0 - topk_mean(abn_scores, k) + topk_mean(nrm_scores, k)
    return margin.relu()


def loss_regularisation(scores: Tensor, smooth_weight: float, sparse_weight: float) -> Tensor:
    """Smoothness + sparsity for one video's score sequence, both scaled by 1/T."""
    n = scores.data.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 snippets, got {n}")
    diffs = scores[1:] - scores[:-1]
    smooth = (diffs * diffs).sum() / float(n)
    sparse = scores.sum() / float(n)
    return smooth * smooth_weight + sparse * sparse_weight


def _info_nce(anchors: Tensor | None, positives: Tensor | None,
              negatives: Tensor | None, temperature: float) -> Tensor | None:
    """Sum over all anchor/positive pairs of the negated log-ratio.

    Each pair's denominator holds that pair's similarity plus the anchor's
    similarities to every negative. Rows are L2-normalised first, so the
    result only sees cosine similarities. Returns None when no pair exists
    or there is no negative to contrast against.
    """
    if anchors is None or positives is None or negatives is None:
        return None
    a = l2_normalize(anchors)
    p = l2_normalize(positives)
    n = l2_normalize(negatives)
    s_ap = (a @ p.T) * (1.0 / temperature)               # (A, P)
    s_an = (a @ n.T) * (1.0 / temperature)               # (A, N)
    neg_sum = s_an.exp().sum(axis=1, keepdims=True)      # (A, 1)
    log_ratio = s_ap - (s_ap.exp() + neg_sum).log()
    return -log_ratio.sum()


def _gather_features(features_by_video: dict[str, Tensor],
                     items: Sequence[tuple[str, int]]) -> Tensor | None:
    if not items:
        return None
    by_video: dict[str, list[int]] = {}
    for video_id, t in items:
        by_video.setdefault(video_id, []).append(t)
    parts = [gather_rows(features_by_video[vid], ts) for vid, ts in by_video.items()]
    return parts[0] if len(parts) == 1 else concat(parts, axis=0)


def loss_contrastive(mined: MinedSets, features_by_video: dict[str, Tensor],
                     temperature: float) -> Tensor:
    """Both contrastive directions; empty anchor/positive/negative sets give 0."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    ha = _gather_features(features_by_video, mined.hard_abnormal)
    ea = _gather_features(features_by_video, mined.easy_abnormal)
    hn = _gather_features(features_by_video, mined.hard_normal)
    en = _gather_features(features_by_video, mined.easy_normal)
    total: Tensor | None = None
    for term in (_info_nce(ha, ea, en, temperature),
                 _info_nce(hn, en, ea, temperature)):
        if term is not None:
            total = term if total is None else total + term
    if total is not None:
        return total
    dtype = (next(iter(features_by_video.values())).data.dtype
             if features_by_video else np.float64)
    return Tensor(np.zeros((), dtype=dtype))


def loss_total(batch: Sequence[BatchItem], mined: MinedSets | None,
               config: LossConfig) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the four terms over one batch.

    Requires at least one video of each label. A zero-weighted term is not
    evaluated; the contrastive term additionally needs mined sets (pass None
    while mining is warming up and the term is reported as 0).
    """
    abnormal = [b for b in batch if b.label == 1]
    normal = [b for b in batch if b.label == 0]
    if not abnormal or not normal:
        raise TrainingError(
            f"batch needs both labels, got {len(abnormal)} abnormal / {len(normal)} normal")

    dtype = batch[0].scores.data.dtype
    zero = Tensor(np.zeros((), dtype=dtype))
    total: Tensor | None = None
    parts: dict[str, float] = {}

    def add(name: str, weight: float, term: Tensor | None):
        nonlocal total
        if term is None:
            parts[name] = 0.0
            return
        parts[name] = float(term.data)
        weighted = term * weight
        total = weighted if total is None else total + weighted

    if config.w_contrast > 0 and mined is not None:
        features = {b.video_id: b.features for b in batch}
        add("l_cnt", config.w_contrast,
            loss_contrastive(mined, features, config.temperature))
    else:
        add("l_cnt", 0.0, None)

    if config.w_snippet > 0:
        if config.pair_mode == "matched":
            pairs = list(zip(abnormal, normal))
        else:
            pairs = [(a, n) for a in abnormal for n in normal]
        snp: Tensor | None = None
        for a, n in pairs:
            h = loss_snippet_topk(a.scores, n.scores, config.k)
            snp = h if snp is None else snp + h
        add("l_snp", config.w_snippet, snp)
    else:
        add("l_snp", 0.0, None)

    if config.w_video > 0:
        add("l_vid", config.w_video,
            loss_video([b.video_score for b in batch], [b.label for b in batch]))
    else:
        add("l_vid", 0.0, None)

    if config.w_reg > 0:
        reg: Tensor | None = None
        for b in batch:
            r = loss_regularisation(b.scores, config.smooth_weight, config.sparse_weight)
            reg = r if reg is None else reg + r
        add("l_reg", config.w_reg, reg)
    else:
        add("l_reg", 0.0, None)

    if total is None:
        total = zero
    breakdown = LossBreakdown(l_total=float(total.data), l_cnt=parts["l_cnt"],
                              l_snp=parts["l_snp"], l_vid=parts["l_vid"],
                              l_reg=parts["l_reg"])
    return total, breakdown
