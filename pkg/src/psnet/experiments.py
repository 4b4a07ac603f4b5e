"""End-to-end desk experiments: overfitting a small corpus and the ablation ordering."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Sequence

from .data import BitemporalSample, SceneConfig, Vocabulary, build_vocab, decode_caption, generate_dataset, normalize
from .metrics import EvalCorpus, bleu_n
from .model import ModelConfig, PsNetParams, generate_caption
from .train import Checkpoint, TrainConfig, train

log = logging.getLogger(__name__)


def caption_samples(samples: Sequence[BitemporalSample], params: PsNetParams, vocab: Vocabulary) -> list[str]:
    return [decode_caption(generate_caption(s.t1, s.t2, params), vocab) for s in samples]


def score_captions(samples: Sequence[BitemporalSample], predictions: Sequence[str]) -> tuple[float, float]:
    """(corpus BLEU-4, fraction of predictions equal to some reference)."""
    refs = [[" ".join(normalize(c)) for c in s.captions] for s in samples]
    exact = sum(p in r for p, r in zip(predictions, refs)) / len(samples)
    return bleu_n(EvalCorpus.from_strings(predictions, refs), 4), exact


@dataclass
class OverfitResult:
    epochs: int
    bleu4: float
    exact: float
    losses: list[float]
    checkpoint: Checkpoint


def overfit(
    samples: Sequence[BitemporalSample],
    model_cfg: ModelConfig | None = None,
    train_cfg: TrainConfig = TrainConfig(),
    max_epochs: int = 300,
    eval_every: int = 25,
    bleu_target: float = 0.95,
    exact_target: float = 0.9,
) -> OverfitResult:
    """Train in ``eval_every``-epoch rounds until greedy captions reproduce the
    training references or ``max_epochs`` is reached."""
    vocab = build_vocab(c for s in samples for c in s.captions)
    model_cfg = dataclasses.replace(model_cfg or ModelConfig(), vocab_size=len(vocab))
    ckpt, losses = None, []
    bleu4 = exact = 0.0
    while ckpt is None or ckpt.epoch < max_epochs:
        rounds = min(eval_every, max_epochs - (ckpt.epoch if ckpt else 0))
        res = train(model_cfg, dataclasses.replace(train_cfg, epochs=rounds), samples, resume=ckpt, vocab=vocab)
        ckpt, losses = res.checkpoint, res.losses  # full history, resumed epochs included
        bleu4, exact = score_captions(samples, caption_samples(samples, res.params, vocab))
        log.info("overfit epoch %d: loss %.4f bleu4 %.4f exact %.3f", ckpt.epoch, losses[-1], bleu4, exact)
        if bleu4 >= bleu_target and exact >= exact_target:
            break
    return OverfitResult(ckpt.epoch, bleu4, exact, losses, ckpt)


@dataclass
class AblationResult:
    scores: dict[str, list[float]]  # variant -> held-out BLEU-4 per seed

    @property
    def means(self) -> dict[str, float]:
        return {k: sum(v) / len(v) for k, v in self.scores.items()}

    @property
    def ordered(self) -> bool:
        m = self.means
        return m["psnet"] >= m["pdp"] >= m["baseline"]


def ablation(
    train_size: int = 256,
    heldout_size: int = 64,
    seeds: Sequence[int] = (0, 1, 2),
    epochs: int = 40,
    data_seed: int = 2024,
    scene: SceneConfig = SceneConfig(),
    base_cfg: ModelConfig | None = None,
    variants: Sequence[str] = ("baseline", "pdp", "psnet"),
) -> AblationResult:
    """Held-out BLEU-4 of each encoder/decoder variant, trained from several seeds."""
    train_set = generate_dataset(data_seed, train_size, scene)
    heldout = generate_dataset(data_seed + 1, heldout_size, scene)
    vocab = build_vocab(c for s in train_set for c in s.captions)
    base_cfg = dataclasses.replace(base_cfg or ModelConfig(), vocab_size=len(vocab))
    scores: dict[str, list[float]] = {v: [] for v in variants}
    for seed in seeds:
        for variant in variants:
            cfg = dataclasses.replace(base_cfg, variant=variant)
            res = train(cfg, TrainConfig(epochs=epochs, seed=seed), train_set, vocab=vocab)
            bleu4, _ = score_captions(heldout, caption_samples(heldout, res.params, vocab))
            log.info("ablation seed %d %s: held-out BLEU-4 %.4f (final loss %.4f)", seed, variant, bleu4, res.losses[-1])
            scores[variant].append(bleu4)
    return AblationResult(scores)
