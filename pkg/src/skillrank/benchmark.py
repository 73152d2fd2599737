"""Cross-validated runs on the planted-signal benchmark."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import FeatureClip, SyntheticSpec, generate_synthetic, sample_segments
from .model import AssessmentModel, ModelConfig, Variant, score_frames
from .pairs import PairSet
from .ranking import TrainConfig, TrainReport, evaluate_ranking_accuracy, kfold_split, train

ABLATION_ORDER = (Variant.FULL, Variant.NO_RNN_ATT, Variant.XBAR_ONLY, Variant.HTASK_ONLY,
                  Variant.NO_ATTENTION)

# Training setup used for the synthetic benchmark: pairs are batched so that
# four-fold CV over five seeds fits the runtime budget on one core.
BENCH_TRAIN = TrainConfig(epochs=20, lr=1e-3, batch_pairs=16)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass
class FoldResult:
    fold: int
    test_accuracy: float
    train_pairs: int
    test_pairs: int
    discarded_pairs: int
    report: TrainReport
    attention_mass: Optional[float] = None
    model: Optional[AssessmentModel] = field(default=None, repr=False)

    def line(self) -> str:
        s = (f"fold={self.fold} test_acc={self.test_accuracy:.4f} train_pairs={self.train_pairs} "
             f"test_pairs={self.test_pairs} discarded_cross_pairs={self.discarded_pairs}")
        if self.attention_mass is not None:
            s += f" patch_attention={self.attention_mass:.4f}"
        return s


@dataclass
class CVResult:
    variant: Variant
    seed: int
    folds: list[FoldResult]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([f.test_accuracy for f in self.folds]))

    @property
    def mean_attention_mass(self) -> Optional[float]:
        masses = [f.attention_mass for f in self.folds if f.attention_mass is not None]
        return float(np.mean(masses)) if masses else None

    def lines(self) -> list[str]:
        return ([f"variant={self.variant.value} seed={self.seed}"]
                + [f.line() for f in self.folds]
                + [f"mean_test_acc={self.mean_accuracy:.4f}"])


def cross_validate(clips: Mapping[str, FeatureClip], pairs: PairSet, model_config: ModelConfig,
                   train_config: TrainConfig = BENCH_TRAIN, k: int = 4, seed: int = 0,
                   origins: Optional[Mapping[str, np.ndarray]] = None, patch: int = 0,
                   keep_models: bool = False) -> CVResult:
    """k-fold CV over videos; pairs straddling train and test are discarded.

    With ``origins`` (planted patch positions) the held-out attention mass
    inside the patch is measured for attention variants.
    """
    ids = sorted(set(pairs.video_ids()) & set(clips))
    results = []
    for fold in kfold_split(ids, k, seed):
        train_pairs, test_pairs, discarded = fold.split_pairs(pairs)
        model = AssessmentModel.init(model_config, seed=derive_seed(seed, fold.index))
        cfg = replace(train_config, seed=derive_seed(seed, fold.index, 1))
        report = train(train_pairs, model, clips, cfg)
        acc = evaluate_ranking_accuracy(test_pairs, model, clips)
        mass = None
        if origins is not None and model_config.variant.has_attention:
            mass = attention_mass(model, clips, fold.test_ids, origins, patch)
        results.append(FoldResult(fold.index, acc, len(train_pairs), len(test_pairs), discarded,
                                  report, mass, model if keep_models else None))
    return CVResult(model_config.variant, seed, results)


def receptive_field_weights(config: ModelConfig, grid: tuple[int, int]) -> np.ndarray:
    """``[H'*W', H, W]`` share of each attention location over input cells."""
    h, w = grid
    gh, gw = config.grid(h, w)
    k, pad = (config.fusion_kernel, config.fusion_padding) if config.two_stream else (1, 0)
    out = np.zeros((gh * gw, h, w))
    for i in range(gh):
        for j in range(gw):
            r0, c0 = max(i - pad, 0), max(j - pad, 0)
            r1, c1 = min(i - pad + k, h), min(j - pad + k, w)
            out[i * gw + j, r0:r1, c0:c1] = 1.0 / ((r1 - r0) * (c1 - c0))
    return out


def attention_on_input_grid(config: ModelConfig, alpha: np.ndarray, grid: tuple[int, int]
                            ) -> np.ndarray:
    """Spread attention ``alpha[..., H'*W']`` back over the input cells."""
    return np.tensordot(alpha, receptive_field_weights(config, grid), axes=(-1, 0))


def attention_mass(model: AssessmentModel, clips: Mapping[str, FeatureClip], ids: Sequence[str],
                   origins: Mapping[str, np.ndarray], patch: int) -> float:
    """Mean attention mass falling inside the planted patch (test-mode frames)."""
    masses = []
    for vid in ids:
        clip = clips[vid]
        idx = sample_segments(clip.timesteps, model.config.segments, "test")
        _, tr = score_frames(model, clip.frames(idx)[None], trace=True)
        for t, frame in enumerate(idx):
            spread = attention_on_input_grid(model.config, tr.alpha[t][0], clip.grid)
            r, c = origins[vid][frame]
            masses.append(spread[r:r + patch, c:c + patch].sum())
    return float(np.mean(masses))


@dataclass
class BenchmarkTable:
    """Cross-validated accuracy per variant and seed."""

    results: dict[Variant, list[CVResult]]
    uniform_mass: float

    def mean(self, variant: Variant) -> float:
        return float(np.mean([r.mean_accuracy for r in self.results[variant]]))

    def accuracies(self, variant: Variant) -> list[float]:
        return [r.mean_accuracy for r in self.results[variant]]

    def attention_mass(self, variant: Variant) -> Optional[float]:
        masses = [r.mean_attention_mass for r in self.results[variant]]
        return float(np.mean(masses)) if masses and None not in masses else None

    def rows(self) -> list[str]:
        seeds = [r.seed for r in next(iter(self.results.values()))]
        head = f"{'variant':<14}" + "".join(f" seed{s:<4}" for s in seeds) + "   mean"
        lines = [head]
        for v in ABLATION_ORDER:
            if v in self.results:
                accs = " ".join(f"{a:8.4f}" for a in self.accuracies(v))
                lines.append(f"{v.value:<14} {accs}  {self.mean(v):.4f}")
        return lines


def run_benchmark(variants: Sequence[Variant | str] = ABLATION_ORDER, seeds: Sequence[int] = (0,),
                  spec: SyntheticSpec = SyntheticSpec(), model_config: ModelConfig = ModelConfig(),
                  train_config: TrainConfig = BENCH_TRAIN, k: int = 4) -> BenchmarkTable:
    """Four-fold CV of each variant on a freshly generated dataset per seed."""
    results: dict[Variant, list[CVResult]] = {Variant(v): [] for v in variants}
    for seed in seeds:
        data = generate_synthetic(replace(spec, seed=seed))
        for v in results:
            cfg = replace(model_config, variant=v, stream_channels=spec.stream_channels)
            results[v].append(cross_validate(data.clips, data.pairs, cfg, train_config, k, seed,
                                             data.origins, spec.patch))
    return BenchmarkTable(results, spec.patch ** 2 / (spec.height * spec.width))
