"""Shared projection head aligning one concept's embeddings across layers.

Positives are embeddings of the same concept and run taken at two different
layers; negatives are random-CAV embeddings from the anchor's own layer.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import rng as rng_mod
from .autodiff import Adam, Tape, Tensor, ops
from .autoencoder import CavEmbedding
from .nn import LayerNorm, Linear, Module

log = logging.getLogger(__name__)

COLLAPSE_COSINE = 0.95


class CollapseError(RuntimeError):
    """Projected random and concept embeddings became indistinguishable."""


@dataclass
class AlignConfig:
    temperature: float = 0.5
    lambda_nce: float = 1.0
    lambda_cons: float = 3.0
    negatives_per_anchor: int = 16
    epochs: int = 150
    lr: float = 1e-3

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.lambda_nce < 0 or self.lambda_cons < 0:
            raise ValueError("loss weights must be >= 0")
        if self.negatives_per_anchor < 1:
            raise ValueError("need at least one negative per anchor")


class ProjectionHead(Module):
    """normalize(mlp(z) + residual(z)); the mlp is two linear/layer-norm/GELU blocks."""

    def __init__(self, d_embed: int = 64, seed: int = 0):
        g = rng_mod.stream(seed, "align", "head")
        self.fc1 = Linear(d_embed, d_embed, g, init="xavier")
        self.ln1 = LayerNorm(d_embed)
        self.fc2 = Linear(d_embed, d_embed, g, init="xavier")
        self.ln2 = LayerNorm(d_embed)
        self.residual = Linear(d_embed, d_embed, g, init="xavier")
        self.d_embed = d_embed

    def mlp(self, z: Tensor) -> Tensor:
        h = ops.gelu(self.ln1(self.fc1(z)))
        return ops.gelu(self.ln2(self.fc2(h)))

    def __call__(self, z: Tensor) -> Tensor:
        return ops.normalize(ops.add(self.mlp(z), self.residual(z)), axis=-1)


def project(head: ProjectionHead, z) -> np.ndarray:
    arr = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float32)
    if arr.shape[-1] != head.d_embed:
        raise ValueError(f"embedding width {arr.shape[-1]} != {head.d_embed}")
    single = arr.ndim == 1
    out = head(Tensor(np.atleast_2d(arr))).data
    return out[0] if single else out


@dataclass
class PairBatch:
    """Index triples into the concept and random embedding lists."""

    anchors: np.ndarray      # [P] into embeddings
    positives: np.ndarray    # [P] into embeddings
    negatives: np.ndarray    # [P, n_neg] into random_embeddings
    embeddings: Sequence[CavEmbedding] = field(repr=False, default=())
    random_embeddings: Sequence[CavEmbedding] = field(repr=False, default=())

    def __len__(self) -> int:
        return len(self.anchors)


def positive_pairs(embeddings: Sequence[CavEmbedding]) -> List[Tuple[int, int]]:
    """Unordered cross-layer pairs sharing concept and run."""
    groups: Dict[Tuple[str, int], List[int]] = {}
    for i, e in enumerate(embeddings):
        groups.setdefault((e.concept_id, e.run_index), []).append(i)
    layers_per_concept: Dict[str, set] = {}
    for e in embeddings:
        layers_per_concept.setdefault(e.concept_id, set()).add(e.layer)
    lonely = sorted(c for c, ls in layers_per_concept.items() if len(ls) < 2)
    if lonely:
        raise ValueError(f"concepts present at a single layer only: {lonely}")
    pairs = []
    for idxs in groups.values():
        for i, j in itertools.combinations(idxs, 2):
            if embeddings[i].layer != embeddings[j].layer:
                pairs.append((i, j))
    return pairs


def build_pairs(embeddings: Sequence[CavEmbedding], random_embeddings: Sequence[CavEmbedding],
                config: AlignConfig, rng: np.random.Generator) -> PairBatch:
    """Every positive pair in both orders, negatives resampled per anchor."""
    by_layer: Dict[str, np.ndarray] = {}
    for i, e in enumerate(random_embeddings):
        by_layer.setdefault(e.layer, []).append(i)  # type: ignore[attr-defined]
    by_layer = {k: np.asarray(v) for k, v in by_layer.items()}
    missing = sorted({e.layer for e in embeddings} - set(by_layer))
    if missing:
        raise ValueError(f"no random CAV embeddings at layers {missing}")
    pairs = positive_pairs(embeddings)
    ordered = pairs + [(j, i) for i, j in pairs]
    anchors = np.array([a for a, _ in ordered], dtype=np.int64)
    positives = np.array([p for _, p in ordered], dtype=np.int64)
    negatives = np.empty((len(ordered), config.negatives_per_anchor), dtype=np.int64)
    for row, a in enumerate(anchors):
        pool = by_layer[embeddings[a].layer]
        negatives[row] = pool[rng.integers(0, len(pool), size=config.negatives_per_anchor)]
    return PairBatch(anchors, positives, negatives, embeddings, random_embeddings)


def infonce_loss(z_a: Tensor, z_p: Tensor, negatives: Tensor, temperature: float) -> Tensor:
    """Mean over anchors of -log softmax of the positive among [positive, negatives].

    ``z_a``/``z_p`` are [P, d] (or [d]), ``negatives`` is [P, n, d] (or [n, d]).
    """
    if negatives.shape[-2] == 0:
        raise ValueError("empty negative set")
    if z_a.ndim == 1:
        z_a, z_p = ops.reshape(z_a, (1, -1)), ops.reshape(z_p, (1, -1))
        negatives = ops.reshape(negatives, (1,) + negatives.shape)
    p, n, d = negatives.shape
    pos = ops.cosine_similarity(z_a, z_p, axis=-1)                        # [P]
    a_rep = ops.reshape(ops.concat([ops.reshape(z_a, (p, 1, d))] * n, axis=1), (p * n, d))
    neg = ops.reshape(ops.cosine_similarity(a_rep, ops.reshape(negatives, (p * n, d)), axis=-1),
                      (p, n))
    logits = ops.scale(ops.concat([ops.reshape(pos, (p, 1)), neg], axis=1), 1.0 / temperature)
    return ops.mean(ops.sub(ops.logsumexp(logits, axis=1), ops.index(logits, (slice(None), 0))))


def align_consistency_loss(z: Tensor, head: ProjectionHead) -> Tensor:
    """1 - cos(z, f(z)), averaged over rows for a batch."""
    norms = np.linalg.norm(np.atleast_2d(z.data), axis=-1)
    if np.any(norms == 0):
        raise ValueError("consistency loss of a zero embedding")
    if z.ndim == 1:
        return ops.sub(1.0, ops.cosine_similarity(z, ops.reshape(head(ops.reshape(z, (1, -1))), z.shape)))
    return ops.sub(1.0, ops.mean(ops.cosine_similarity(z, head(z), axis=-1)))


@dataclass
class AlignedEmbedding:
    concept_id: str
    layer: str
    run_index: int
    z_tilde: np.ndarray


@dataclass
class AlignmentStats:
    positive_cosine: float
    negative_cosine: float
    random_concept_cosine: float

    @property
    def margin(self) -> float:
        return self.positive_cosine - self.negative_cosine


@dataclass
class Stage2Result:
    head: ProjectionHead
    aligned: List[AlignedEmbedding]
    losses: List[float]
    before: AlignmentStats
    after: AlignmentStats


def alignment_stats(head: ProjectionHead, embeddings: Sequence[CavEmbedding],
                    random_embeddings: Sequence[CavEmbedding]) -> AlignmentStats:
    """Mean positive-pair cosine, mean anchor vs same-layer random cosine, and
    mean cosine over all (random, concept) pairs, all after projection."""
    zc = project(head, np.stack([e.z for e in embeddings]))
    zr = project(head, np.stack([e.z for e in random_embeddings]))
    pairs = positive_pairs(embeddings)
    pos = float(np.mean([zc[i] @ zc[j] for i, j in pairs]))
    layers_r = np.array([e.layer for e in random_embeddings])
    neg_vals = []
    for i, e in enumerate(embeddings):
        neg_vals.append(zr[layers_r == e.layer] @ zc[i])
    neg = float(np.mean(np.concatenate(neg_vals)))
    cross = float(np.mean(zr @ zc.T))
    return AlignmentStats(pos, neg, cross)


def train_stage2(embeddings: Sequence[CavEmbedding], random_embeddings: Sequence[CavEmbedding],
                 config: AlignConfig = AlignConfig(), seed: int = 0) -> Stage2Result:
    if not embeddings or not random_embeddings:
        raise ValueError("stage 2 needs concept and random embeddings")
    d = len(embeddings[0].z)
    head = ProjectionHead(d, seed)
    before = alignment_stats(head, embeddings, random_embeddings)
    zc = Tensor(np.stack([e.z for e in embeddings]))
    zr = Tensor(np.stack([e.z for e in random_embeddings]))
    g = rng_mod.stream(seed, "align", "negatives")
    opt = Adam(head.parameters(), lr=config.lr)
    losses = []
    n_neg = config.negatives_per_anchor
    for epoch in range(config.epochs):
        batch = build_pairs(embeddings, random_embeddings, config, g)
        p = len(batch)
        opt.zero_grad()
        with Tape() as tape:
            pc = head(zc)
            pr = head(zr)
            a = ops.take(pc, batch.anchors)
            pos = ops.take(pc, batch.positives)
            neg = ops.reshape(ops.take(pr, batch.negatives.reshape(-1)), (p, n_neg, d))
            nce = infonce_loss(a, pos, neg, config.temperature)
            cons = ops.sub(1.0, ops.mean(ops.cosine_similarity(zc, pc, axis=-1)))
            loss = ops.add(ops.scale(nce, config.lambda_nce), ops.scale(cons, config.lambda_cons))
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"stage 2 loss is not finite at epoch {epoch}")
        tape.backward(loss, opt.params)
        opt.step()
        losses.append(loss.item())
    after = alignment_stats(head, embeddings, random_embeddings)
    log.info("stage 2: positive cos %.3f -> %.3f, negative cos %.3f -> %.3f",
             before.positive_cosine, after.positive_cosine,
             before.negative_cosine, after.negative_cosine)
    if after.random_concept_cosine > COLLAPSE_COSINE:
        raise CollapseError(
            f"stage 2 collapsed: mean random/concept cosine {after.random_concept_cosine:.3f} "
            f"> {COLLAPSE_COSINE} (positive {after.positive_cosine:.3f}, "
            f"loss {losses[0]:.4f} -> {losses[-1]:.4f})")
    z_tilde = project(head, zc.data)
    aligned = [AlignedEmbedding(e.concept_id, e.layer, e.run_index, z_tilde[i].copy())
               for i, e in enumerate(embeddings)]
    return Stage2Result(head, aligned, losses, before, after)
