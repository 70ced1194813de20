"""Hard/easy snippet mining from per-video score sequences.

Runs on plain numpy arrays (scores detached from the graph): threshold the
scores, erode the binary prediction to find the boundary snippets of each
predicted-abnormal run, flag zeros inside mostly-positive windows as missed
abnormal, and pick top-k/bottom-k snippets for the remaining sets. The four
outputs feed the contrastive objective:

  hard abnormal  boundary snippets + missed zeros (abnormal videos)
  easy abnormal  top-k scored snippets of abnormal videos, minus hard ones
  hard normal    top-k scored snippets of normal videos
  easy normal    bottom-k scored snippets of normal videos

All selections are deterministic: ties break toward the lowest index and
every output set is returned sorted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError


@dataclass
class MiningConfig:
    threshold: float = 0.5
    erosion_width: int = 3
    region_window: int = 5       # consecutive-snippet window scanned for missed zeros
    region_min_count: int = 3    # positives required in a window before its zeros count as missed
    k_hard_normal: int = 3
    k_easy: int = 3

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0,1), got {self.threshold}")
        if self.erosion_width < 1 or self.erosion_width % 2 == 0:
            raise ConfigError(f"erosion_width must be odd, got {self.erosion_width}")
        if not 1 <= self.region_min_count <= self.region_window:
            raise ConfigError(
                f"need 1 <= region_min_count <= region_window, got "
                f"{self.region_min_count} > {self.region_window}")
        if self.k_hard_normal < 1 or self.k_easy < 1:
            raise ConfigError("selection counts must be >= 1")


@dataclass(frozen=True)
class MinedSets:
    """Snippet index sets as sorted (video_id, t) tuples."""

    hard_abnormal: tuple[tuple[str, int], ...]
    easy_abnormal: tuple[tuple[str, int], ...]
    hard_normal: tuple[tuple[str, int], ...]
    easy_normal: tuple[tuple[str, int], ...]

    def counts(self) -> dict[str, int]:
        return {"HA": len(self.hard_abnormal), "EA": len(self.easy_abnormal),
                "HN": len(self.hard_normal), "EN": len(self.easy_normal)}


EMPTY_MINED = MinedSets((), (), (), ())


def threshold_predictions(scores: np.ndarray, threshold: float) -> np.ndarray:
    """Binary prediction per snippet; strictly greater than the threshold."""
    return (np.asarray(scores) > threshold).astype(np.uint8)


def erode(pred: np.ndarray, width: int) -> np.ndarray:
    """Morphological erosion with replicate padding.

    Output t is 1 iff every prediction in the width-wide window centred at t
    is 1; edge windows reuse the boundary value, so a run touching the video
    boundary is not automatically opened up.
    """
    if width < 1 or width % 2 == 0:
        raise ValueError(f"erosion width must be odd, got {width}")
    pred = np.asarray(pred)
    half = width // 2
    padded = np.pad(pred, half, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, width)
    return windows.all(axis=1).astype(np.uint8)


def temporal_edges(pred: np.ndarray, eroded: np.ndarray) -> list[int]:
    """Predicted-abnormal snippets removed by erosion: run boundaries."""
    pred = np.asarray(pred)
    eroded = np.asarray(eroded)
    if pred.shape != eroded.shape:
        raise ValueError("prediction and eroded sequence lengths differ")
    return np.nonzero(pred.astype(bool) & ~eroded.astype(bool))[0].tolist()


def missed_pseudo_abnormal(pred: np.ndarray, window: int, min_count: int) -> list[int]:
    """Zeros lying inside any length-``window`` stretch with >= ``min_count`` ones."""
    pred = np.asarray(pred)
    n = pred.shape[0]
    if not 1 <= min_count <= window:
        raise ValueError(f"need 1 <= min_count <= window, got {min_count}, {window}")
    if window > n:
        raise ValueError(f"window {window} longer than sequence {n}")
    sums = np.lib.stride_tricks.sliding_window_view(pred, window).sum(axis=1)
    flagged = np.zeros(n, dtype=bool)
    for start in np.nonzero(sums >= min_count)[0]:
        flagged[start:start + window] = True
    return np.nonzero(flagged & (pred == 0))[0].tolist()


def mine_hard_abnormal(scores: np.ndarray, config: MiningConfig) -> list[int]:
    """Hard-abnormal snippets of one abnormal video: edges plus missed zeros."""
    pred = threshold_predictions(scores, config.threshold)
    edges = temporal_edges(pred, erode(pred, config.erosion_width))
    missed = missed_pseudo_abnormal(pred, config.region_window, config.region_min_count)
    return sorted(set(edges) | set(missed))


def mine_hard_normal(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k highest scores in one normal video, ties to low index."""
    scores = np.asarray(scores)
    if not 1 <= k <= scores.shape[0]:
        raise ValueError(f"k must be in [1, {scores.shape[0]}], got {k}")
    return sorted(np.argsort(-scores, kind="stable")[:k].tolist())


def mine_easy(scores: np.ndarray, label: int,
              k: int, hard_abnormal: Sequence[int] = ()) -> list[int]:
    """Easy set for one video: top-k minus hard for abnormal, bottom-k for normal."""
    scores = np.asarray(scores)
    if not 1 <= k <= scores.shape[0]:
        raise ValueError(f"k must be in [1, {scores.shape[0]}], got {k}")
    if label == 1:
        top = np.argsort(-scores, kind="stable")[:k].tolist()
        return sorted(set(top) - set(hard_abnormal))
    if label == 0:
        return sorted(np.argsort(scores, kind="stable")[:k].tolist())
    raise ValueError(f"label must be 0 or 1, got {label}")


def mine_batch(videos: Sequence[tuple[str, int, np.ndarray]],
               config: MiningConfig) -> MinedSets:
    """Mine every video of a batch; items are (video_id, label, scores)."""
    ha: list[tuple[str, int]] = []
    ea: list[tuple[str, int]] = []
    hn: list[tuple[str, int]] = []
    en: list[tuple[str, int]] = []
    for video_id, label, scores in videos:
        if label == 1:
            hard = mine_hard_abnormal(scores, config)
            ha.extend((video_id, t) for t in hard)
            ea.extend((video_id, t)
                      for t in mine_easy(scores, 1, config.k_easy, hard))
        elif label == 0:
            hn.extend((video_id, t)
                      for t in mine_hard_normal(scores, config.k_hard_normal))
            en.extend((video_id, t) for t in mine_easy(scores, 0, config.k_easy))
        else:
            raise ValueError(f"label must be 0 or 1, got {label} for {video_id}")
    return MinedSets(tuple(sorted(ha)), tuple(sorted(ea)),
                     tuple(sorted(hn)), tuple(sorted(en)))
