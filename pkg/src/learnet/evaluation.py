"""One-shot recognition protocol, tracking and their error metrics."""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from learnet.data import (
    Alphabet,
    DatasetError,
    SyntheticSequence,
    exemplar_crop,
    map_reference,
    object_side,
    search_crop,
    write_pgm,
)
from learnet.networks import NetworkSpec, bind, total_stride

DEFAULT_WAY = 20
DEFAULT_PROBLEMS = 2000


# ====================================================================== recognition

@dataclass(frozen=True)
class RecognitionProblem:
    exemplar: np.ndarray          # (28, 28)
    candidates: np.ndarray        # (K, 28, 28)
    answer_index: int
    alphabet: str = ""

    @property
    def way(self) -> int:
        return len(self.candidates)


def make_problem(alphabets: Sequence[Alphabet], rng: np.random.Generator,
                 way: int = DEFAULT_WAY) -> RecognitionProblem:
    """One exemplar and ``way`` candidates (fewer if the alphabet is smaller),
    all from one alphabet, exactly one of which shares the exemplar's character."""
    usable = [a for a in alphabets if a.n_characters >= 2]
    if not usable:
        raise DatasetError("need an alphabet with at least two characters")
    alpha = usable[rng.integers(len(usable))]
    k = min(way, alpha.n_characters)
    chars = rng.choice(alpha.n_characters, size=k, replace=False)
    target = alpha.characters[chars[0]][1]
    zi, xi = rng.choice(len(target), size=2, replace=False)
    cands = [target[xi]]
    for c in chars[1:]:
        imgs = alpha.characters[c][1]
        cands.append(imgs[rng.integers(len(imgs))])
    order = rng.permutation(k)
    candidates = np.stack(cands)[order]
    answer = int(np.flatnonzero(order == 0)[0])
    return RecognitionProblem(target[zi], candidates, answer, alpha.name)


def make_problems(alphabets, rng, n: int, way: int = DEFAULT_WAY) -> list:
    return [make_problem(alphabets, rng, way) for _ in range(n)]


Scorer = Callable[[RecognitionProblem], np.ndarray]


def network_scorer(spec: NetworkSpec, params) -> Scorer:
    """Bind each exemplar once, then score every candidate with the induced network."""
    def score(problem: RecognitionProblem) -> np.ndarray:
        return bind(spec, params, problem.exemplar).scores(problem.candidates)
    return score


class RandomScorer:
    """Untrained baseline: independent uniform scores."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def __call__(self, problem: RecognitionProblem) -> np.ndarray:
        return self.rng.random(problem.way)


def pick(scores: np.ndarray) -> int:
    """Index of the highest score; the first one wins ties."""
    return int(np.argmax(np.asarray(scores)))


def solve_problem(spec: NetworkSpec, params, problem: RecognitionProblem) -> int:
    return pick(network_scorer(spec, params)(problem))


@dataclass
class RecognitionReport:
    error: float
    n: int
    way_counts: dict = field(default_factory=dict)   # way size -> number of problems


def evaluate_recognition(scorer: Scorer, alphabets, n_problems: int, rng: np.random.Generator,
                         way: int = DEFAULT_WAY) -> RecognitionReport:
    wrong = 0
    ways = Counter()
    for _ in range(n_problems):
        problem = make_problem(alphabets, rng, way)
        ways[problem.way] += 1
        wrong += pick(scorer(problem)) != problem.answer_index
    return RecognitionReport(wrong / n_problems if n_problems else float("nan"), n_problems, dict(ways))


def error_rate(spec: Optional[NetworkSpec], params, alphabets, n_problems: int = DEFAULT_PROBLEMS,
               rng: Optional[np.random.Generator] = None, scorer: Optional[Scorer] = None,
               way: int = DEFAULT_WAY) -> float:
    """Fraction of sampled problems answered incorrectly."""
    rng = np.random.default_rng(0) if rng is None else rng
    if scorer is None:
        scorer = network_scorer(spec, params)
    return evaluate_recognition(scorer, alphabets, n_problems, rng, way).error


# ====================================================================== tracking

@dataclass
class TrackResult:
    centres: np.ndarray        # (T, 2) predicted centres; row 0 is the given box
    peaks: np.ndarray          # (T,) peak score, NaN for frame 0
    displacement: np.ndarray   # (T,) distance to the ground truth, px
    score_maps: list = field(default_factory=list)

    @property
    def mean_displacement(self) -> float:
        return float(self.displacement[1:].mean()) if len(self.displacement) > 1 else 0.0


@dataclass(frozen=True)
class TrackGeometry:
    exemplar_size: int = 32
    search_size: int = 64

    def scale(self, box) -> float:
        """Frame pixels per search-crop pixel."""
        return 4.0 * object_side(box) / self.search_size


def track(spec: NetworkSpec, params, sequence: SyntheticSequence, search_radius: Optional[float] = None,
          geometry: TrackGeometry = TrackGeometry(), keep_maps: bool = False) -> TrackResult:
    """Follow the first frame's object through the sequence.

    The exemplar is bound once. Each new frame is searched in a crop centred on
    the previous estimate; the score-map peak, scaled by the network stride and
    the crop scale, moves the estimate. Peaks farther than ``search_radius``
    frame pixels from the crop centre are not considered. Size stays fixed.
    """
    box0 = sequence.boxes[0]
    pupil = bind(spec, params, exemplar_crop(sequence.frames[0], box0, geometry.exemplar_size))
    stride = total_stride(spec)
    scale = geometry.scale(box0)
    centre = np.array(box0[:2], dtype=np.float64)
    n = len(sequence)
    centres = np.empty((n, 2))
    centres[0] = centre
    peaks = np.full(n, np.nan)
    maps = []
    mask = None
    for t in range(1, n):
        x = search_crop(sequence.frames[t], box0, geometry.search_size, centre=centre)
        smap = pupil.score_map(x)[0]
        ref = map_reference(smap.shape[0])
        if search_radius is not None and mask is None:
            ii, jj = np.indices(smap.shape)
            mask = np.hypot(ii - ref, jj - ref) * stride * scale <= search_radius
            if not mask.any():
                mask[int(ref), int(ref)] = True
        masked = smap if mask is None else np.where(mask, smap, -np.inf)
        i, j = np.unravel_index(int(np.argmax(masked)), smap.shape)
        centre = centre + np.array([j - ref, i - ref]) * stride * scale
        centres[t] = centre
        peaks[t] = smap[i, j]
        if keep_maps:
            maps.append(smap)
    disp = np.hypot(*(centres - sequence.boxes[:, :2]).T)
    return TrackResult(centres, peaks, disp, maps)


def displacement_error(result, truth) -> float:
    """Mean Euclidean distance between predicted and true centres.

    ``result`` is a TrackResult or a ``(T, 2)`` array; ``truth`` holds
    centres or boxes whose first two columns are centres.
    """
    pred = result.centres if isinstance(result, TrackResult) else np.asarray(result, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)[:, :2]
    if pred.shape[0] != truth.shape[0]:
        raise ValueError(f"{pred.shape[0]} predictions for {truth.shape[0]} frames")
    return float(np.hypot(*(pred[:, :2] - truth).T).mean())


def random_peak_baseline(map_size: int, stride: int, scale: float = 1.0) -> float:
    """Expected distance of a uniformly random score-map cell from the map
    reference, in frame pixels."""
    ref = map_reference(map_size)
    ii, jj = np.indices((map_size, map_size))
    return float(np.hypot(ii - ref, jj - ref).mean() * stride * scale)


def pair_classification_error(positive_scores, negative_scores) -> float:
    """Probability that a random positive pair scores no higher than a random
    negative pair, ties counting one half."""
    pos = np.asarray(positive_scores, dtype=np.float64).ravel()
    neg = np.sort(np.asarray(negative_scores, dtype=np.float64).ravel())
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need at least one positive and one negative score")
    below = np.searchsorted(neg, pos, side="left")
    tied = np.searchsorted(neg, pos, side="right") - below
    correct = below.sum() + 0.5 * tied.sum()
    return float(1.0 - correct / (pos.size * neg.size))


def peak_responses(spec: NetworkSpec, params, batch, chunk: int = 64) -> np.ndarray:
    """Raw maximum of each pair's score map."""
    from learnet.networks import forward_conv_gamma
    out = []
    for start in range(0, len(batch), chunk):
        part = batch.slice(start, start + chunk)
        maps = forward_conv_gamma(spec, params, part.z, part.x).data
        out.append(maps.reshape(len(part), -1).max(axis=1))
    return np.concatenate(out)


def tracking_pair_error(spec: NetworkSpec, params, batch) -> float:
    """Pair classification error of peak responses over a labelled batch."""
    labels = batch.labels.reshape(len(batch), -1).max(axis=1)
    peaks = peak_responses(spec, params, batch)
    return pair_classification_error(peaks[labels > 0], peaks[labels <= 0])


# ====================================================================== reports

def write_metrics_csv(path, rows):
    """Rows of ``(metric, value, n, seed)`` with a header."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value", "n", "seed"])
        for metric, value, n, seed in rows:
            w.writerow([metric, repr(float(value)), int(n), int(seed)])


def write_track_csv(path, result: TrackResult, truth):
    truth = np.asarray(truth)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "pred_cx", "pred_cy", "true_cx", "true_cy", "displacement", "peak"])
        for t in range(len(result.centres)):
            w.writerow([t, repr(float(result.centres[t, 0])), repr(float(result.centres[t, 1])),
                        repr(float(truth[t, 0])), repr(float(truth[t, 1])),
                        repr(float(result.displacement[t])), repr(float(result.peaks[t]))])


def normalized(arr: np.ndarray) -> np.ndarray:
    """Affine map of ``arr`` onto [0, 1]; constant arrays map to 0."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    return np.zeros_like(arr) if hi == lo else (arr - lo) / (hi - lo)


def dump_map(path, arr: np.ndarray):
    write_pgm(Path(path), normalized(arr))
