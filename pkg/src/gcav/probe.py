"""Synthetic ground-truth world and the fully connected target classifier.

Concepts are orthonormal directions in a ``d_in``-dimensional feature space.
Class ``k`` examples are a random positive combination of that class's
relevant concept directions plus isotropic Gaussian noise, so which concepts
matter for which class is known exactly.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import rng as rng_mod
from .autodiff import Adam, Tape, Tensor, ops
from .nn import Linear, Module

log = logging.getLogger(__name__)

PROBE_COUNT = 50


@dataclass
class ConceptSpec:
    concept_id: str
    direction: np.ndarray
    relevance: Dict[str, bool]


@dataclass
class ProbeSet:
    kind: str  # "concept" | "random"
    set_id: str
    examples: np.ndarray
    concept_id: Optional[str] = None

    @property
    def count(self) -> int:
        return len(self.examples)


@dataclass
class ClassDataset:
    class_ids: List[str]
    inputs: Dict[str, np.ndarray]

    def stacked(self):
        """All examples with integer labels, classes in declaration order."""
        xs = [self.inputs[k] for k in self.class_ids]
        ys = [np.full(len(x), i, dtype=np.int64) for i, x in enumerate(xs)]
        return np.concatenate(xs).astype(np.float32), np.concatenate(ys)


@dataclass
class World:
    seed: int
    d_in: int
    concepts: List[ConceptSpec]
    dataset: ClassDataset
    noise: float = 0.3
    probe_noise: float = 0.3
    random_noise: float = 0.3
    alpha_range: tuple = (1.0, 2.0)
    random_sets: List[ProbeSet] = field(default_factory=list)

    @property
    def concept_ids(self) -> List[str]:
        return [c.concept_id for c in self.concepts]

    @property
    def class_ids(self) -> List[str]:
        return self.dataset.class_ids

    def concept(self, concept_id: str) -> ConceptSpec:
        for c in self.concepts:
            if c.concept_id == concept_id:
                return c
        raise KeyError(f"unknown concept {concept_id!r}")

    def relevant(self, class_id: str) -> List[str]:
        return [c.concept_id for c in self.concepts if c.relevance[class_id]]

    def irrelevant(self, class_id: str) -> List[str]:
        return [c.concept_id for c in self.concepts if not c.relevance[class_id]]


def default_relevance(n_concepts: int, n_classes: int) -> List[List[int]]:
    """Class k depends on concept k alone; the remaining concepts are distractors."""
    if n_classes > n_concepts:
        raise ValueError(f"need at least one concept per class ({n_concepts} < {n_classes})")
    if n_concepts < 2:
        raise ValueError("each class needs an irrelevant concept, so n_concepts >= 2")
    return [[k] for k in range(n_classes)]


def generate_world(seed: int, d_in: int = 32, n_concepts: int = 4, n_classes: int = 4,
                   n_per_class: int = 200, noise: float = 0.3,
                   relevance: Optional[Sequence[Sequence[int]]] = None,
                   alpha_range: tuple = (1.0, 2.0), probe_noise: float = 0.3,
                   random_noise: float = 0.3) -> World:
    if n_concepts > d_in:
        raise ValueError(f"cannot place {n_concepts} orthonormal directions in {d_in} dims")
    if n_per_class < PROBE_COUNT:
        raise ValueError(f"need >= {PROBE_COUNT} examples per class")
    rel = [list(r) for r in (relevance or default_relevance(n_concepts, n_classes))]
    if len(rel) != n_classes:
        raise ValueError("relevance must list one concept set per class")
    for r in rel:
        if not r or len(set(r)) == n_concepts or any(not 0 <= c < n_concepts for c in r):
            raise ValueError("each class needs >= 1 relevant and >= 1 irrelevant concept")
    if len({tuple(sorted(r)) for r in rel}) != n_classes:
        raise ValueError("classes must have distinct relevant-concept sets")

    g = rng_mod.stream(seed, "world", "directions")
    q, _ = np.linalg.qr(g.normal(size=(d_in, d_in)))
    dirs = q[:, :n_concepts].T.astype(np.float64)

    class_ids = [f"class{k}" for k in range(n_classes)]
    concepts = []
    for c in range(n_concepts):
        relevance_map = {class_ids[k]: (c in rel[k]) for k in range(n_classes)}
        concepts.append(ConceptSpec(f"concept{c}", dirs[c].astype(np.float32), relevance_map))

    inputs = {}
    for k, cid in enumerate(class_ids):
        gk = rng_mod.stream(seed, "world", "class", cid)
        alphas = gk.uniform(*alpha_range, size=(n_per_class, len(rel[k])))
        x = alphas @ dirs[rel[k]] + gk.normal(0.0, noise, size=(n_per_class, d_in))
        inputs[cid] = x.astype(np.float32)

    return World(seed=seed, d_in=d_in, concepts=concepts,
                 dataset=ClassDataset(class_ids, inputs), noise=noise,
                 probe_noise=probe_noise, random_noise=random_noise,
                 alpha_range=tuple(alpha_range))


def random_probe_sets(world: World, n_sets: int, count: int = PROBE_COUNT) -> List[ProbeSet]:
    """Shared pool of pure-noise probe sets (the negatives for every concept)."""
    sets = []
    for r in range(n_sets):
        g = rng_mod.stream(world.seed, "probe", "random", r)
        x = g.normal(0.0, world.random_noise, size=(count, world.d_in)).astype(np.float32)
        sets.append(ProbeSet("random", f"random{r}", x))
    return sets


def concept_probe_set(world: World, concept_id: str, count: int = PROBE_COUNT) -> ProbeSet:
    spec = world.concept(concept_id)
    g = rng_mod.stream(world.seed, "probe", "concept", concept_id)
    beta = g.uniform(*world.alpha_range, size=(count, 1))
    x = beta * spec.direction[None, :] + g.normal(0.0, world.probe_noise, size=(count, world.d_in))
    return ProbeSet("concept", f"{concept_id}", x.astype(np.float32), concept_id=concept_id)


def make_probe_sets(world: World, concept_id: str, n_random_sets: int = 10,
                    count: int = PROBE_COUNT):
    """Concept probe set plus ``n_random_sets`` random sets."""
    world.concept(concept_id)  # raises on unknown id
    return concept_probe_set(world, concept_id, count), random_probe_sets(world, n_random_sets, count)


# -- target model -------------------------------------------------------------

class TargetModel(Module):
    """Fully connected ReLU classifier with named hidden layers L1..LH."""

    def __init__(self, d_in: int, n_classes: int, width: int = 64, depth: int = 5,
                 instrumented: Optional[Sequence[str]] = None, seed: int = 0,
                 common_mode: float = 0.0, residual: bool = False, branch_gain: float = 1.0):
        g = rng_mod.stream(seed, "target", "init")
        dims = [d_in] + [width] * depth
        self.hidden = [Linear(dims[i], dims[i + 1], g) for i in range(depth)]
        self.output = Linear(width, n_classes, g, init="xavier")
        if residual and branch_gain != 1.0:
            for lin in self.hidden[1:]:
                lin.weight.data = (lin.weight.data * branch_gain).astype(np.float32)
        if common_mode:
            # a readout shared by every logit; softmax cross-entropy never updates it
            u = g.normal(0.0, common_mode / np.sqrt(width), size=(width, 1))
            self.output.weight.data = (self.output.weight.data + u).astype(np.float32)
        self.layer_names = [f"L{i + 1}" for i in range(depth)]
        self.instrumented = list(instrumented or self.layer_names[:-1])
        for name in self.instrumented:
            if name not in self.layer_names:
                raise ValueError(f"unknown layer {name!r}")
        self.n_classes = n_classes
        self.width = width
        self.residual = residual

    def _layer_index(self, layer: str) -> int:
        try:
            return self.layer_names.index(layer)
        except ValueError:
            raise KeyError(f"unknown layer {layer!r}") from None

    def layer_width(self, layer: str) -> int:
        return self.hidden[self._layer_index(layer)].n_out

    def forward_to(self, layer: str, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        for i in range(self._layer_index(layer) + 1):
            h = self._block(i, h)
        return h

    def _block(self, i: int, h: Tensor) -> Tensor:
        out = ops.relu(self.hidden[i](h))
        if self.residual and i > 0:
            out = ops.add(h, out)
        return out

    def head_from(self, layer: str, a) -> Tensor:
        h = a if isinstance(a, Tensor) else Tensor(a)
        for i in range(self._layer_index(layer) + 1, len(self.hidden)):
            h = self._block(i, h)
        return self.output(h)

    def __call__(self, x) -> Tensor:
        return self.head_from(self.layer_names[0], self.forward_to(self.layer_names[0], x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self(x).data.argmax(axis=1)


class TargetTrainingError(RuntimeError):
    pass


def train_target(model: TargetModel, dataset: ClassDataset, epochs: int = 300,
                 lr: float = 3e-3, batch_size: int = 64, seed: int = 0,
                 min_accuracy: float = 0.95) -> TargetModel:
    """Minimise softmax cross-entropy with Adam; error if accuracy stays < ``min_accuracy``."""
    x, y = dataset.stacked()
    if len(x) == 0:
        raise ValueError("empty dataset")
    if epochs == 0:
        return model
    g = rng_mod.stream(seed, "target", "batches")
    opt = Adam(model.parameters(), lr=lr)
    n = len(x)
    onehot = np.eye(model.n_classes, dtype=np.float32)
    for epoch in range(epochs):
        order = g.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            with Tape() as tape:
                logp = ops.log_softmax(model(x[idx]), axis=1)
                loss = ops.neg(ops.mean(ops.sum(ops.mul(logp, Tensor(onehot[y[idx]])), axis=1)))
            tape.backward(loss, opt.params)
            opt.step()
    acc = accuracy(model, dataset)
    log.info("target trained: %d epochs, accuracy %.4f", epochs, acc)
    if acc < min_accuracy:
        raise TargetTrainingError(f"training accuracy {acc:.3f} < {min_accuracy} after {epochs} epochs")
    return model


def accuracy(model: TargetModel, dataset: ClassDataset) -> float:
    x, y = dataset.stacked()
    return float((model.predict(x) == y).mean())


def activations(model: TargetModel, layer: str, inputs) -> Tensor:
    """Layer activations f_l(x) in eval mode, shape [n, d_l]."""
    if layer not in model.instrumented:
        raise KeyError(f"layer {layer!r} is not instrumented")
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float32))
    return model.forward_to(layer, x)


def logit_gradient(model: TargetModel, layer: str, k: int, a) -> np.ndarray:
    """d logit_k / d activation at ``layer``, per example.

    ``a`` may be one activation vector [d_l] or a batch [n, d_l]; rows never
    interact, so each row's gradient is that example's own.
    """
    if layer not in model.instrumented:
        raise KeyError(f"layer {layer!r} is not instrumented")
    if not 0 <= k < model.n_classes:
        raise KeyError(f"class index {k} out of range")
    arr = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float32)
    single = arr.ndim == 1
    leaf = Tensor(np.atleast_2d(arr), requires_grad=True)
    with Tape() as tape:
        logits = model.head_from(layer, leaf)
        total = ops.sum(logits[:, k])
    (grad,) = tape.backward(total, [leaf])
    return grad[0] if single else grad


def dump_dataset_csv(dataset: ClassDataset, path: Path) -> None:
    x, y = dataset.stacked()
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(x.shape[1])] + ["label"])
        for row, label in zip(x, y):
            w.writerow([repr(float(v)) for v in row] + [dataset.class_ids[label]])
