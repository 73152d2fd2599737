"""Siamese pairwise-ranking training and evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor
from .data import FeatureClip, sample_segments
from .model import AssessmentModel, forward, score_frames
from .pairs import PairLabel, PairSet

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, pair: PairLabel):
        super().__init__(f"loss became non-finite in epoch {epoch} at pair {pair.id_a},{pair.id_b}")
        self.epoch = epoch
        self.pair = pair


def hinge_loss(s_i: float, s_j: float, margin: float = 0.5) -> float:
    """Margin ranking loss for a pair whose first video is the better one."""
    return max(0.0, -s_i + s_j + margin)


def hinge_loss_tensor(s_better: Tensor, s_worse: Tensor, margin: float = 0.5) -> Tensor:
    """Summed hinge loss over aligned score vectors."""
    return ad.sum_all(ad.relu(ad.add_scalar(ad.sub(s_worse, s_better), margin)))


@dataclass
class SGDMomentum:
    """SGD with heavy-ball momentum and L2 weight decay on every tensor.

    ``g' = g + weight_decay * theta``, ``buf = momentum * buf + g'``,
    ``theta -= lr * buf``.
    """

    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        for name, p in params.items():
            g = grads[name] + self.weight_decay * p
            buf = self.buffers.get(name)
            buf = g if buf is None else self.momentum * buf + g
            self.buffers[name] = buf
            p -= self.lr * buf


def sgd_momentum_step(optim: SGDMomentum, params: dict[str, np.ndarray],
                      grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    optim.step(params, grads)
    return params


@dataclass
class StepResult:
    loss: float
    pair_losses: np.ndarray
    scores: dict[str, float]


def pair_gradients(pairs: Sequence[PairLabel], model: AssessmentModel,
                   frames: Mapping[str, np.ndarray], margin: float = 0.5
                   ) -> tuple[StepResult, dict[str, np.ndarray]]:
    """Summed hinge loss over ``pairs`` and its gradient.

    Every distinct video is scored once by the shared parameters; its score
    feeds all pairs it belongs to.
    """
    missing = [v for p in pairs for v in (p.id_a, p.id_b) if v not in frames]
    if missing:
        raise KeyError(f"no frames for video {missing[0]}")
    ids = list(dict.fromkeys(v for p in pairs for v in (p.id_a, p.id_b)))
    pos = {v: i for i, v in enumerate(ids)}
    tape = Tape()
    scores, _ = forward(model.bind(tape), np.stack([frames[v] for v in ids]))
    better = ad.take(scores, [pos[p.id_a] for p in pairs])
    worse = ad.take(scores, [pos[p.id_b] for p in pairs])
    loss = hinge_loss_tensor(better, worse, margin)
    grads = ad.backward(tape, loss).named()
    per_pair = np.maximum(0.0, worse.data - better.data + margin)
    # the hinge clamps NaN scores to zero, which would hide a divergence
    value = loss.item() if np.isfinite(scores.data).all() else float("nan")
    return StepResult(value, per_pair, dict(zip(ids, scores.data.tolist()))), grads


def siamese_step(pairs: PairLabel | Sequence[PairLabel], model: AssessmentModel,
                 optim: SGDMomentum, frames: Mapping[str, np.ndarray],
                 margin: float = 0.5) -> float:
    """Score both videos of each pair with shared weights, backprop, update once."""
    if isinstance(pairs, PairLabel):
        pairs = [pairs]
    result, grads = pair_gradients(pairs, model, frames, margin)
    if math.isfinite(result.loss):
        optim.step(model.params, grads)
    return result.loss


# -- evaluation --------------------------------------------------------------

def eval_frames(clips: Mapping[str, FeatureClip], ids: Sequence[str], segments: int
                ) -> np.ndarray:
    return np.stack([clips[v].frames(sample_segments(clips[v].timesteps, segments, "test"))
                     for v in ids])


def video_scores(model: AssessmentModel, clips: Mapping[str, FeatureClip],
                 ids: Optional[Sequence[str]] = None, batch: int = 64) -> dict[str, float]:
    """Deterministic test-mode scores (last frame of each segment)."""
    ids = sorted(clips) if ids is None else list(ids)
    out = {}
    for i in range(0, len(ids), batch):
        chunk = ids[i:i + batch]
        s, _ = score_frames(model, eval_frames(clips, chunk, model.config.segments))
        out.update(zip(chunk, s.tolist()))
    return out


def ranking_accuracy(pairs: PairSet, scores: Mapping[str, float]) -> float:
    """Fraction of pairs where the better video scores strictly higher."""
    if len(pairs) == 0:
        raise ValueError("cannot evaluate ranking accuracy on an empty pair set")
    correct = sum(scores[p.id_a] > scores[p.id_b] for p in pairs)
    return correct / len(pairs)


def evaluate_ranking_accuracy(pairs: PairSet, model: AssessmentModel,
                              clips: Mapping[str, FeatureClip]) -> float:
    if len(pairs) == 0:
        raise ValueError("cannot evaluate ranking accuracy on an empty pair set")
    return ranking_accuracy(pairs, video_scores(model, clips, pairs.video_ids()))


# -- cross-validation splits -------------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    index: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def split_pairs(self, pairs: PairSet) -> tuple[PairSet, PairSet, int]:
        """Train pairs, test pairs, and the number of discarded cross pairs."""
        train = pairs.restrict(self.train_ids)
        test = pairs.restrict(self.test_ids)
        return train, test, len(pairs) - len(train) - len(test)


def kfold_split(video_ids: Sequence[str], k: int = 4, seed: int = 0) -> list[FoldSplit]:
    ids = list(video_ids)
    if k < 2 or k > len(ids):
        raise ValueError(f"cannot split {len(ids)} videos into {k} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    groups = [sorted(ids[i] for i in g) for g in np.array_split(perm, k)]
    folds = []
    for i, test in enumerate(groups):
        train = sorted(v for j, g in enumerate(groups) if j != i for v in g)
        folds.append(FoldSplit(i, tuple(train), tuple(test)))
    return folds


# -- training ----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    margin: float = 0.5
    batch_pairs: int = 1
    seed: int = 0


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    train_accuracy: float
    wall_time: float

    def line(self, with_time: bool = True) -> str:
        s = f"epoch={self.epoch} loss={self.mean_loss:.6f} train_acc={self.train_accuracy:.4f}"
        return s + (f" wall={self.wall_time:.2f}s" if with_time else "")


@dataclass
class TrainReport:
    initial_accuracy: float
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1].train_accuracy if self.epochs else self.initial_accuracy

    def lines(self, with_time: bool = True) -> list[str]:
        return ([f"epoch=0 train_acc={self.initial_accuracy:.4f}"]
                + [r.line(with_time) for r in self.epochs])

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")


def train(pairs: PairSet, model: AssessmentModel, clips: Mapping[str, FeatureClip],
          config: TrainConfig = TrainConfig(), optim: Optional[SGDMomentum] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainReport:
    """Train ``model`` in place on the pair set.

    Every epoch shuffles the pairs and draws one random frame per segment
    for each video, then takes one optimizer step per ``batch_pairs`` pairs.
    """
    if len(pairs) == 0:
        raise ValueError("no training pairs")
    if config.batch_pairs < 1:
        raise ValueError("batch_pairs must be at least 1")
    ids = pairs.video_ids()
    missing = [v for v in ids if v not in clips]
    if missing:
        raise KeyError(f"no clip for video {missing[0]}")
    optim = optim or SGDMomentum(config.lr, config.momentum, config.weight_decay)
    n_seg = model.config.segments
    report = TrainReport(evaluate_ranking_accuracy(pairs, model, clips))
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch]))
        order = rng.permutation(len(pairs))
        frames = {v: clips[v].frames(sample_segments(clips[v].timesteps, n_seg, "train", rng))
                  for v in ids}
        total = 0.0
        for b in range(0, len(order), config.batch_pairs):
            batch = [pairs[i] for i in order[b:b + config.batch_pairs]]
            loss = siamese_step(batch, model, optim, frames, config.margin)
            if not math.isfinite(loss):
                raise DivergenceError(epoch, batch[0])
            total += loss
        record = EpochRecord(epoch, total / len(pairs), evaluate_ranking_accuracy(pairs, model, clips),
                             time.perf_counter() - start)
        report.epochs.append(record)
        logger.debug(record.line())
        if on_epoch is not None:
            on_epoch(record)
    return report
