"""Per-layer linear CAVs and hard TCAV scores."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Adam, Tape, Tensor, ops
from .probe import ProbeSet, TargetModel, World, activations, logit_gradient

L2 = 0.01
EPOCHS = 200
LR = 0.01


class OrientationTieError(ValueError):
    """Both probe sets project identically onto the learned direction."""


@dataclass
class CavVector:
    concept_id: str
    layer: str
    run_index: int
    vector: np.ndarray
    train_accuracy: float
    kind: str = "concept"


def fit_linear_probes(pos: np.ndarray, neg: np.ndarray, l2: float = L2, epochs: int = EPOCHS,
                      lr: float = LR) -> Tuple[np.ndarray, np.ndarray]:
    """Train ``B`` independent L2-regularised logistic regressions at once.

    ``pos`` is [B, n, d], ``neg`` is [B, m, d]. Returns weights [B, d] and
    biases [B]. The summed objective decouples across problems and Adam is
    per-coordinate, so each probe trains exactly as it would alone.

    The positive and negative terms are built symmetrically (and the penalty
    first) so that swapping ``pos`` and ``neg`` yields exactly ``-w``.
    """
    pos = np.asarray(pos, dtype=np.float32)
    neg = np.asarray(neg, dtype=np.float32)
    if pos.ndim != 3 or neg.ndim != 3:
        raise ValueError("pos/neg must be [B, n, d]")
    if pos.shape[0] != neg.shape[0] or pos.shape[2] != neg.shape[2]:
        raise ValueError(f"probe batch mismatch {pos.shape} vs {neg.shape}")
    if pos.shape[1] == 0 or neg.shape[1] == 0:
        raise ValueError("empty probe set")
    b_count, n, d = pos.shape
    m = neg.shape[1]
    w = Tensor(np.zeros((b_count, d, 1)), requires_grad=True)
    b = Tensor(np.zeros((b_count, 1, 1)), requires_grad=True)
    xp, xn = Tensor(pos), Tensor(neg)
    opt = Adam([w, b], lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        with Tape() as tape:
            penalty = ops.scale(ops.sum(ops.square(w)), 0.5 * l2)
            zp = ops.add(ops.matmul(xp, w), b)
            zn = ops.add(ops.matmul(xn, w), b)
            data = ops.add(ops.sum(ops.softplus(ops.neg(zp))), ops.sum(ops.softplus(zn)))
            loss = ops.add(ops.scale(data, 1.0 / (n + m)), penalty)
        tape.backward(loss, opt.params)
        opt.step()
    return w.data[:, :, 0].copy(), b.data[:, 0, 0].copy()


def _orient(w: np.ndarray, pos: np.ndarray, neg: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(w))
    if norm == 0.0:
        raise OrientationTieError("probe weights are all zero")
    v = (w / norm).astype(np.float32)
    mp = float((pos @ v).mean())
    mn = float((neg @ v).mean())
    if mp == mn:
        raise OrientationTieError("mean projections of positive and negative sets tie")
    return v if mp > mn else -v


def _accuracy(w: np.ndarray, b: float, pos: np.ndarray, neg: np.ndarray) -> float:
    correct = (pos @ w + b > 0).sum() + (neg @ w + b <= 0).sum()
    return float(correct) / (len(pos) + len(neg))


def train_cavs(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], meta: Sequence[tuple],
               **kw) -> List[CavVector]:
    """Fit one CAV per (positive acts, negative acts) pair.

    ``meta`` holds ``(concept_id, layer, run_index, kind)`` per pair.
    Pairs with equal set sizes are trained in one batch.
    """
    if len(pairs) != len(meta):
        raise ValueError("pairs and meta differ in length")
    out: List[Optional[CavVector]] = [None] * len(pairs)
    groups: Dict[tuple, List[int]] = {}
    for i, (p, n) in enumerate(pairs):
        groups.setdefault((p.shape, n.shape), []).append(i)
    for idxs in groups.values():
        pos = np.stack([pairs[i][0] for i in idxs])
        neg = np.stack([pairs[i][1] for i in idxs])
        ws, bs = fit_linear_probes(pos, neg, **kw)
        for j, i in enumerate(idxs):
            v = _orient(ws[j], pos[j], neg[j])
            cid, layer, run, kind = meta[i]
            out[i] = CavVector(cid, layer, run, v, _accuracy(ws[j], bs[j], pos[j], neg[j]), kind)
    return out  # type: ignore[return-value]


def train_cav(acts_pos, acts_neg, concept_id: str = "", layer: str = "", run_index: int = 0,
              **kw) -> CavVector:
    pos = np.asarray(acts_pos.data if isinstance(acts_pos, Tensor) else acts_pos, dtype=np.float32)
    neg = np.asarray(acts_neg.data if isinstance(acts_neg, Tensor) else acts_neg, dtype=np.float32)
    if pos.ndim != 2 or neg.ndim != 2 or pos.shape[1] != neg.shape[1]:
        raise ValueError(f"activation sets must be [n, d] with equal d: {pos.shape} vs {neg.shape}")
    return train_cavs([(pos, neg)], [(concept_id, layer, run_index, "concept")], **kw)[0]


def train_random_cav(model: TargetModel, set_a: ProbeSet, set_b: ProbeSet, layer: str,
                     run_index: int = 0, **kw) -> CavVector:
    if set_a.set_id == set_b.set_id:
        raise ValueError(f"random CAV needs two distinct sets, got {set_a.set_id} twice")
    pos = activations(model, layer, set_a.examples).data
    neg = activations(model, layer, set_b.examples).data
    return train_cavs([(pos, neg)], [(f"{set_a.set_id}~{set_b.set_id}", layer, run_index, "random")],
                      **kw)[0]


# -- scoring --------------------------------------------------------------------

def directional_derivatives(grads: np.ndarray, v: np.ndarray) -> np.ndarray:
    """grad_i . v for every row; the single code path both scorers share."""
    return np.matmul(grads, v)


def hard_score(dots: np.ndarray) -> float:
    """Fraction of strictly positive dots; exact zeros count as negative."""
    if len(dots) == 0:
        raise ValueError("empty example set")
    return float(np.count_nonzero(dots > 0)) / len(dots)


class GradientCache:
    """Per-example logit gradients of the class examples, by (layer, class index)."""

    def __init__(self, model: TargetModel, world: World):
        self.model = model
        self.world = world
        self._cache: Dict[Tuple[str, int], np.ndarray] = {}

    def get(self, layer: str, k: int) -> np.ndarray:
        key = (layer, k)
        if key not in self._cache:
            x = self.world.dataset.inputs[self.world.class_ids[k]]
            acts = activations(self.model, layer, x)
            self._cache[key] = logit_gradient(self.model, layer, k, acts)
        return self._cache[key]


def tcav_score(model: TargetModel, layer: str, k: int, x_k, v: np.ndarray,
               grads: Optional[np.ndarray] = None) -> float:
    """Share of class-k inputs whose class-k logit increases along ``v`` at ``layer``."""
    v = np.asarray(v, dtype=np.float32)
    if grads is None:
        x_k = np.asarray(x_k, dtype=np.float32)
        if len(x_k) == 0:
            raise ValueError("empty class example set")
        grads = logit_gradient(model, layer, k, activations(model, layer, x_k))
    return hard_score(directional_derivatives(grads, v))


# -- score table ---------------------------------------------------------------

ScoreKey = Tuple[str, str, str, int, str]  # concept, class, layer, run, method


@dataclass
class ScoreTable:
    concepts: List[str]
    classes: List[str]
    layers: List[str]
    runs: int
    scores: Dict[ScoreKey, float] = field(default_factory=dict)

    def set(self, concept: str, cls: str, layer: str, run: int, method: str, score: float) -> None:
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"score {score} outside [0, 1]")
        self.scores[(concept, cls, layer, run, method)] = float(score)

    def get(self, concept: str, cls: str, layer: str, run: int, method: str) -> float:
        return self.scores[(concept, cls, layer, run, method)]

    def methods(self) -> List[str]:
        return sorted({k[4] for k in self.scores})

    def is_complete(self, method: str) -> bool:
        return all(
            (c, k, l, r, method) in self.scores
            for c in self.concepts for k in self.classes for l in self.layers
            for r in range(self.runs)
        )

    def run_mean(self, concept: str, cls: str, layer: str, method: str) -> float:
        return float(np.mean([self.get(concept, cls, layer, r, method) for r in range(self.runs)]))

    def layer_series(self, concept: str, cls: str, method: str) -> List[float]:
        """Per-layer scores averaged over runs, in layer order."""
        return [self.run_mean(concept, cls, l, method) for l in self.layers]

    def entries(self, method: Optional[str] = None) -> Iterable[Tuple[ScoreKey, float]]:
        for key in sorted(self.scores, key=self._order):
            if method is None or key[4] == method:
                yield key, self.scores[key]

    def _order(self, key: ScoreKey):
        c, k, l, r, m = key
        return (m, self.concepts.index(c), self.classes.index(k), self.layers.index(l), r)

    def merged(self, other: "ScoreTable") -> "ScoreTable":
        if (self.concepts, self.classes, self.layers, self.runs) != (
                other.concepts, other.classes, other.layers, other.runs):
            raise ValueError("score tables cover different grids")
        out = ScoreTable(list(self.concepts), list(self.classes), list(self.layers), self.runs)
        out.scores = {**self.scores, **other.scores}
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["concept", "class", "layer", "run", "method", "score"])
        for (c, k, l, r, m), s in self.entries():
            w.writerow([c, k, l, r, m, repr(s)])
        return buf.getvalue()


# -- baseline --------------------------------------------------------------------

@dataclass
class BaselineResult:
    table: ScoreTable
    cavs: List[CavVector]
    random_cavs: List[CavVector]


def collect_cavs(model: TargetModel, concept_sets: Dict[str, ProbeSet],
                 random_sets: Sequence[ProbeSet], layers: Sequence[str],
                 **kw) -> Tuple[List[CavVector], List[CavVector]]:
    """Concept CAVs (concept set vs random set r) and random CAVs (random r vs r+1)."""
    runs = len(random_sets)
    if runs < 2:
        raise ValueError("need at least two random probe sets")
    pairs, meta = [], []
    for layer in layers:
        rand_acts = [activations(model, layer, s.examples).data for s in random_sets]
        for cid, cset in concept_sets.items():
            c_acts = activations(model, layer, cset.examples).data
            for r in range(runs):
                pairs.append((c_acts, rand_acts[r]))
                meta.append((cid, layer, r, "concept"))
        for r in range(runs):
            pairs.append((rand_acts[r], rand_acts[(r + 1) % runs]))
            meta.append((f"{random_sets[r].set_id}~{random_sets[(r + 1) % runs].set_id}",
                         layer, r, "random"))
    cavs = train_cavs(pairs, meta, **kw)
    return [c for c in cavs if c.kind == "concept"], [c for c in cavs if c.kind == "random"]


def score_cavs(cavs: Sequence[CavVector], world: World, grads: GradientCache, table: ScoreTable,
               method: str = "TCAV") -> ScoreTable:
    for cav in cavs:
        for k, cls in enumerate(world.class_ids):
            s = hard_score(directional_derivatives(grads.get(cav.layer, k), cav.vector))
            table.set(cav.concept_id, cls, cav.layer, cav.run_index, method, s)
    return table


def run_baseline(model: TargetModel, world: World, concept_sets: Dict[str, ProbeSet],
                 random_sets: Sequence[ProbeSet], layers: Sequence[str],
                 grads: Optional[GradientCache] = None, **kw) -> BaselineResult:
    grads = grads or GradientCache(model, world)
    cavs, random_cavs = collect_cavs(model, concept_sets, random_sets, layers, **kw)
    table = ScoreTable(list(concept_sets), list(world.class_ids), list(layers), len(random_sets))
    score_cavs(cavs, world, grads, table, "TCAV")
    return BaselineResult(table, cavs, random_cavs)
