"""Targeted activation-shift attack on concept probe inputs and its TCAV/TGCAV audit."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import Adam, Tape, Tensor, ops
from .cav import CavVector, ScoreTable, collect_cavs, score_cavs
from .config import AttackConfig
from .evaluate import pct_change, score_tgcav
from .probe import ProbeSet, TargetModel, World, activations

log = logging.getLogger(__name__)

ATTACK_COLUMNS = ["method", "scope", "before", "after", "pct_change"]
AUTO_LAYER = "auto"


@dataclass
class AttackSpec:
    source_concept: str
    target_concept: str
    layer: str
    epsilon: float = 0.5
    gamma: float = 0.01
    steps: int = 200
    lr: float = 0.01

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.source_concept == self.target_concept:
            raise ValueError("source and target concepts must differ")
        if self.steps < 0 or self.gamma < 0 or self.lr <= 0:
            raise ValueError("steps and gamma must be >= 0, lr > 0")

    @classmethod
    def from_config(cls, a: AttackConfig) -> "AttackSpec":
        return cls(a.source_concept, a.target_concept, a.layer, a.epsilon, a.gamma, a.steps, a.lr)


def perturb(model: TargetModel, layer: str, x: np.ndarray, mu_target: np.ndarray,
            epsilon: float, gamma: float, steps: int, lr: float) -> np.ndarray:
    """Minimise ||f_l(x + d) - mu||^2 + gamma ||d||^2 per row with Adam, keeping |d| <= epsilon.

    The summed objective separates over rows and Adam is per-coordinate, so
    the batch run equals attacking each example on its own.
    """
    x = np.asarray(x, dtype=np.float32)
    delta = Tensor(np.zeros_like(x), requires_grad=True)
    if epsilon == 0 or steps == 0:
        return x.copy()
    mu = Tensor(np.broadcast_to(mu_target, (len(x), len(mu_target))).copy())
    opt = Adam([delta], lr=lr)
    for step in range(steps):
        opt.zero_grad()
        with Tape() as tape:
            h = model.forward_to(layer, ops.add(Tensor(x), delta))
            fit = ops.sum(ops.square(ops.sub(h, mu)))
            loss = ops.add(fit, ops.scale(ops.sum(ops.square(delta)), gamma))
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"attack diverged at step {step}")
        tape.backward(loss, opt.params)
        opt.step()
        delta.data = np.clip(delta.data, -epsilon, epsilon)
    return (x + delta.data).astype(np.float32)


def resolve_layer(spec: AttackSpec, baseline: ScoreTable, cls: str) -> AttackSpec:
    """Pin ``layer="auto"`` to the layer where the source concept scores lowest for ``cls``."""
    if spec.layer != AUTO_LAYER:
        return spec
    layer = min(baseline.layers,
                key=lambda l: (baseline.run_mean(spec.source_concept, cls, l, "TCAV"),
                               baseline.layers.index(l)))
    return dataclasses.replace(spec, layer=layer)


def target_mean(model: TargetModel, layer: str, target_set: ProbeSet) -> np.ndarray:
    return activations(model, layer, target_set.examples).data.mean(axis=0)


def run_attack(model: TargetModel, concept_sets: Dict[str, ProbeSet], spec: AttackSpec) -> ProbeSet:
    """Perturbed copy of the source concept's probe set."""
    for c in (spec.source_concept, spec.target_concept):
        if c not in concept_sets:
            raise KeyError(f"no probe set for concept {c!r}")
    if spec.layer not in model.instrumented:
        raise KeyError(f"layer {spec.layer!r} is not instrumented")
    src = concept_sets[spec.source_concept]
    mu = target_mean(model, spec.layer, concept_sets[spec.target_concept])
    x = perturb(model, spec.layer, src.examples, mu, spec.epsilon, spec.gamma, spec.steps, spec.lr)
    return ProbeSet("concept", f"{src.set_id}@attacked", x, concept_id=src.concept_id)


def shift_cosines(model: TargetModel, layer: str, before: np.ndarray, after: np.ndarray,
                  mu: np.ndarray):
    """Per-example cos(f_l(x), mu) before and after perturbation."""
    def cos(x):
        h = activations(model, layer, x).data
        return (h @ mu) / (np.linalg.norm(h, axis=1) * np.linalg.norm(mu) + 1e-12)
    return cos(before), cos(after)


def attacked_class(world: World, spec: AttackSpec) -> str:
    """First class the target concept drives and the source concept does not."""
    for k in world.class_ids:
        rel = world.concept(spec.target_concept).relevance[k]
        if rel and not world.concept(spec.source_concept).relevance[k]:
            return k
    raise ValueError(f"no class relies on {spec.target_concept} but not on {spec.source_concept}")


@dataclass
class AttackRow:
    method: str
    scope: str  # "attacked_layer" | "mean"
    before: float
    after: float

    @property
    def pct_change(self) -> Optional[float]:
        return None if self.before == 0 else pct_change(self.before, self.after)

    @property
    def rise(self) -> float:
        return self.after - self.before


@dataclass
class AttackOutcome:
    spec: AttackSpec
    cls: str
    perturbed: ProbeSet
    rows: List[AttackRow] = field(default_factory=list)
    shift_success: float = 0.0
    max_abs_delta: float = 0.0

    def row(self, method: str, scope: str) -> AttackRow:
        for r in self.rows:
            if r.method == method and r.scope == scope:
                return r
        raise KeyError((method, scope))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ATTACK_COLUMNS)
        for r in self.rows:
            pc = r.pct_change
            w.writerow([r.method, r.scope, repr(r.before), repr(r.after),
                        "undefined" if pc is None else repr(pc)])
        return buf.getvalue()


def _rows(method: str, before: ScoreTable, b_method: str, after: ScoreTable, a_method: str,
          concept: str, cls: str, layer: str) -> List[AttackRow]:
    return [
        AttackRow(method, "attacked_layer", before.run_mean(concept, cls, layer, b_method),
                  after.run_mean(concept, cls, layer, a_method)),
        AttackRow(method, "mean", float(np.mean(before.layer_series(concept, cls, b_method))),
                  float(np.mean(after.layer_series(concept, cls, a_method)))),
    ]


def evaluate_attack(ctx, spec: AttackSpec) -> AttackOutcome:
    """Attack the source probe set, then rescore with retrained and frozen GCAV stages.

    ``ctx`` is a completed :class:`gcav.pipeline.Context`.
    """
    from . import pipeline as pl

    cfg, store = ctx.cfg, ctx.store
    pl.check_prerequisites(ctx, "score")
    store.require(pl.SENTINELS["score"])
    world, csets, rsets = pl.load_world(store)
    model = pl.load_model(store, cfg)
    cavs, randoms, tcav_before = pl.load_cavs(store)
    aes = pl.load_autoencoders(store, cfg)
    head, _ = pl.load_aligned(store)
    fm, _ = pl.load_fusion(store, cfg)
    tgcav_before = pl.load_tgcav(store)
    layers = cfg.model.instrumented
    grads = ctx.grads(model, world)
    cls = attacked_class(world, spec)
    spec = resolve_layer(spec, tcav_before, cls)
    if spec.layer not in layers:
        raise KeyError(f"layer {spec.layer!r} is not instrumented")

    perturbed = run_attack(model, csets, spec)
    src = csets[spec.source_concept].examples
    mu = target_mean(model, spec.layer, csets[spec.target_concept])
    c0, c1 = shift_cosines(model, spec.layer, src, perturbed.examples, mu)

    new_src, _ = collect_cavs(model, {spec.source_concept: perturbed}, rsets, layers,
                              l2=cfg.cav.l2, epochs=cfg.cav.epochs, lr=cfg.cav.lr)
    grid = (list(tcav_before.concepts), list(tcav_before.classes), list(layers), tcav_before.runs)
    tcav_after = score_cavs(new_src, world, grads, ScoreTable(*grid), "TCAV")

    attacked_cavs: List[CavVector] = [c for c in cavs if c.concept_id != spec.source_concept] + new_src
    aes2 = pl.fit_stage1(cfg, attacked_cavs, randoms, layers, ctx.threads)
    aligned2 = pl.fit_stage2(cfg, aes2, attacked_cavs, randoms).aligned
    gcavs2 = pl.fit_stage3(cfg, aligned2, aes2, grads, layers).gcavs
    retrained = score_tgcav([g for g in gcavs2 if g.concept_id == spec.source_concept], aes2,
                            world, grads, ScoreTable(*grid))

    frozen = pl.frozen_gcavs(cfg, aes, head, fm, new_src, layers)
    frozen_table = score_tgcav(frozen, aes, world, grads, ScoreTable(*grid))

    s = spec.source_concept
    rows = (_rows("TCAV", tcav_before, "TCAV", tcav_after, "TCAV", s, cls, spec.layer)
            + _rows("TGCAV", tgcav_before, "TGCAV", retrained, "TGCAV", s, cls, spec.layer)
            + _rows("TGCAV_frozen", tgcav_before, "TGCAV", frozen_table, "TGCAV", s, cls, spec.layer))
    out = AttackOutcome(spec, cls, perturbed, rows,
                        shift_success=float(np.mean(c1 > c0)),
                        max_abs_delta=float(np.abs(perturbed.examples - src).max()))
    log.info("attack on %s at %s: TCAV %+.3f, TGCAV %+.3f (class %s)", s, spec.layer,
             out.row("TCAV", "attacked_layer").rise, out.row("TGCAV", "attacked_layer").rise, cls)
    return out
