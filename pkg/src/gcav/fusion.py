"""Attention fusion of aligned per-layer embeddings into one global CAV.

Training pushes every class example's directional-derivative sign to agree
across layers. The hard sign test is made trainable with a straight-through
estimator: the forward value is the 0/1 indicator, the backward pass uses the
gradient of sigmoid(tau * dot), and tau sharpens over training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import rng as rng_mod
from .align import AlignedEmbedding
from .autodiff import Adam, Tape, Tensor, ops
from .autodiff.ops import _sigmoid
from .autodiff.tensor import make_result, precision
from .autoencoder import LayerAutoencoder
from .cav import GradientCache, directional_derivatives, hard_score
from .nn import LayerNorm, Linear, Module
from .probe import TargetModel, activations, logit_gradient

log = logging.getLogger(__name__)


@dataclass
class FusionConfig:
    lambda_var: float = 3.0
    lambda_cons: float = 1.0
    batch_size: int = 32
    heads: int = 4
    dropout: float = 0.1
    ffn_mult: int = 4
    epochs: int = 300
    lr: float = 1e-3
    unit_output: bool = True

    def __post_init__(self):
        if self.lambda_var < 0 or self.lambda_cons < 0:
            raise ValueError("loss weights must be >= 0")
        if self.batch_size < 2:
            raise ValueError("class batch size must be >= 2")
        if self.heads < 1:
            raise ValueError("need at least one attention head")


@dataclass
class RelaxationSchedule:
    """Geometric temperature ramp tau(t) = tau0 * (tau_max / tau0) ** (t / T)."""

    tau0: float = 1.0
    tau_max: float = 50.0
    total_steps: int = 300
    step: int = 0

    def __post_init__(self):
        if not 0 < self.tau0 <= self.tau_max:
            raise ValueError(f"need 0 < tau0 <= tau_max, got {self.tau0}, {self.tau_max}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    def tau(self, t: Optional[int] = None) -> float:
        t = self.step if t is None else t
        frac = min(max(t, 0), self.total_steps) / self.total_steps
        return float(self.tau0 * (self.tau_max / self.tau0) ** frac)

    def advance(self) -> float:
        self.step += 1
        return self.tau()


class FusionModule(Module):
    """One transformer encoder block over the layer axis, mean-pooled.

    Input [batch, L, d] -> positional table -> multi-head self-attention
    (+residual, layer norm) -> feed-forward with dropout (+residual, layer
    norm) -> mean over L -> output linear -> [batch, d].
    """

    def __init__(self, n_layers: int, d_embed: int = 64, heads: int = 4, dropout: float = 0.1,
                 ffn_mult: int = 4, seed: int = 0, unit_output: bool = True):
        if d_embed % heads:
            raise ValueError(f"d_embed {d_embed} not divisible by {heads} heads")
        g = rng_mod.stream(seed, "fuse", "init")
        self.pos = Tensor(g.normal(0.0, 0.1, size=(n_layers, d_embed)), requires_grad=True)
        self.wq = Linear(d_embed, d_embed, g, init="xavier")
        self.wk = Linear(d_embed, d_embed, g, init="xavier")
        self.wv = Linear(d_embed, d_embed, g, init="xavier")
        self.wo = Linear(d_embed, d_embed, g, init="xavier")
        self.ln1 = LayerNorm(d_embed)
        self.ff1 = Linear(d_embed, ffn_mult * d_embed, g)
        self.ff2 = Linear(ffn_mult * d_embed, d_embed, g, init="xavier")
        self.ln2 = LayerNorm(d_embed)
        self.out = Linear(d_embed, d_embed, g, init="xavier")
        self.n_layers = n_layers
        self.d_embed = d_embed
        self.heads = heads
        self.p_drop = dropout
        self.unit_output = unit_output

    def _split(self, x: Tensor, b: int, L: int) -> Tensor:
        dh = self.d_embed // self.heads
        return ops.transpose(ops.reshape(x, (b, L, self.heads, dh)), (0, 2, 1, 3))

    def attention(self, x: Tensor) -> Tensor:
        b, L, d = x.shape
        dh = d // self.heads
        q = self._split(self.wq(x), b, L)
        k = self._split(self.wk(x), b, L)
        v = self._split(self.wv(x), b, L)
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        mixed = ops.matmul(ops.softmax(scores, axis=-1), v)
        merged = ops.reshape(ops.transpose(mixed, (0, 2, 1, 3)), (b, L, d))
        return self.wo(merged)

    def __call__(self, z, rng: Optional[np.random.Generator] = None) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim != 3 or z.shape[1] != self.n_layers or z.shape[2] != self.d_embed:
            raise ValueError(f"expected [batch, {self.n_layers}, {self.d_embed}], got {z.shape}")
        x = ops.add(z, self.pos)
        x = self.ln1(ops.add(x, self.attention(x)))
        ff = self.ff2(ops.dropout(ops.relu(self.ff1(x)), self.p_drop, rng, self.training))
        x = self.ln2(ops.add(x, ops.dropout(ff, self.p_drop, rng, self.training)))
        out = self.out(ops.mean(x, axis=1))
        return ops.normalize(out, axis=-1) if self.unit_output else out


@dataclass
class GlobalCav:
    concept_id: str
    run_index: int
    z_gcav: np.ndarray


@dataclass
class ReconstructedCav:
    concept_id: str
    layer: str
    v: np.ndarray
    v_unit: np.ndarray


def fuse(fm: FusionModule, z_stack) -> np.ndarray:
    """Eval-mode fusion of [batch, L, d] aligned embeddings."""
    was_training = fm.training
    fm.eval()
    try:
        return fm(z_stack).data.copy()
    finally:
        fm.train(was_training)


def unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float32)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError("cannot normalise a zero vector")
    return (v / norm).astype(np.float32)


def decode_gcav(g: GlobalCav, autoencoders: Mapping[str, LayerAutoencoder],
                layers: Sequence[str]) -> Dict[str, ReconstructedCav]:
    out = {}
    for layer in layers:
        if layer not in autoencoders:
            raise KeyError(f"no decoder for layer {layer!r}")
        ae = autoencoders[layer]
        v = ae.decode_tensor(Tensor(g.z_gcav[None, :])).data[0].copy()
        out[layer] = ReconstructedCav(g.concept_id, layer, v, unit(v))
    return out


# -- relaxed scoring ------------------------------------------------------------

def ste_indicator(dots: Tensor, tau: float) -> Tensor:
    """Forward [dot > 0] as 0/1; backward d sigmoid(tau * dot) / d dot."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    x = dots.data
    hard = (x > 0).astype(x.dtype)
    s = _sigmoid(tau * x)
    slope = (tau * s * (1.0 - s)).astype(x.dtype)
    return make_result(hard, (dots,), lambda g: (g * slope,), "ste_indicator")


def soft_indicator(dots: Tensor, tau: float) -> Tensor:
    return ops.sigmoid(ops.scale(dots, tau))


def relaxed_tcav(model: TargetModel, layer: str, k: int, x_batch, v, tau: float,
                 grads: Optional[np.ndarray] = None) -> Tensor:
    """Batch-mean STE indicator; its value equals the hard TCAV score.

    The mean runs in float64 so the forward value is bit-identical to
    ``hard_score``'s ``count / n``.
    """
    if grads is None:
        x_batch = np.asarray(x_batch, dtype=np.float32)
        if len(x_batch) == 0:
            raise ValueError("empty class batch")
        grads = logit_gradient(model, layer, k, activations(model, layer, x_batch))
    if len(grads) == 0:
        raise ValueError("empty class batch")
    v = v if isinstance(v, Tensor) else Tensor(v)
    dots = ops.matmul(Tensor(grads), v)
    with precision(np.float64):
        return ops.mean(ste_indicator(dots, tau))


def variance_loss(scores: Tensor) -> Tensor:
    """Mean over samples of the population variance across layers.

    ``scores`` is [N, L] (or [..., N, L]); the mean runs over every leading axis.
    """
    if scores.ndim < 2 or scores.shape[-1] < 2:
        raise ValueError("variance loss needs >= 2 layers on the last axis")
    return ops.mean(ops.variance(scores, axis=-1))


def fusion_consistency_loss(v_l: Tensor, target: Tensor) -> Tensor:
    """1 - cos(v_l, decoder_l(z_tilde_l)); batch rows are averaged."""
    if v_l.shape != target.shape:
        raise ValueError(f"layer mismatch: {v_l.shape} vs {target.shape}")
    if v_l.ndim == 1:
        return ops.sub(1.0, ops.cosine_similarity(v_l, target))
    return ops.sub(1.0, ops.mean(ops.cosine_similarity(v_l, target, axis=-1)))


# -- training ---------------------------------------------------------------------

def stack_aligned(aligned: Sequence[AlignedEmbedding], layers: Sequence[str]
                  ) -> Tuple[np.ndarray, List[Tuple[str, int]]]:
    """[B, L, d] aligned embeddings with B ordered by (concept, run) first appearance."""
    table: Dict[Tuple[str, int], Dict[str, np.ndarray]] = {}
    for a in aligned:
        table.setdefault((a.concept_id, a.run_index), {})[a.layer] = a.z_tilde
    keys = list(table)
    rows = []
    for key in keys:
        missing = [l for l in layers if l not in table[key]]
        if missing:
            raise ValueError(f"{key} lacks aligned embeddings at {missing}")
        rows.append(np.stack([table[key][l] for l in layers]))
    return np.stack(rows).astype(np.float32), keys


@dataclass
class Stage3Result:
    module: FusionModule
    gcavs: List[GlobalCav]
    losses: List[float] = field(default_factory=list)
    variance_terms: List[float] = field(default_factory=list)


def train_stage3(aligned: Sequence[AlignedEmbedding],
                 autoencoders: Mapping[str, LayerAutoencoder], grads: GradientCache,
                 layers: Sequence[str], config: FusionConfig = FusionConfig(),
                 schedule: Optional[RelaxationSchedule] = None, seed: int = 0) -> Stage3Result:
    """Train one fusion module shared by every (concept, run).

    ``grads`` supplies per-example logit gradients for every class; each step
    draws ``config.batch_size`` examples per class.
    """
    schedule = schedule or RelaxationSchedule(total_steps=config.epochs)
    z_np, keys = stack_aligned(aligned, layers)
    b, L, d = z_np.shape
    fm = FusionModule(L, d, config.heads, config.dropout, config.ffn_mult, seed,
                      config.unit_output)
    fm.train()
    n_classes = len(grads.world.class_ids)
    decoders = [autoencoders[l] for l in layers]
    targets = [Tensor(ae.decode_tensor(Tensor(z_np[:, i, :])).data) for i, ae in enumerate(decoders)]
    class_grads = [[grads.get(l, k) for k in range(n_classes)] for l in layers]
    g_batch = rng_mod.stream(seed, "fuse", "batches")
    g_drop = rng_mod.stream(seed, "fuse", "dropout")
    opt = Adam(fm.parameters(), lr=config.lr)
    z = Tensor(z_np)
    losses, var_terms = [], []
    for step in range(config.epochs):
        tau = schedule.tau()
        picks = [g_batch.choice(len(class_grads[0][k]), size=config.batch_size, replace=False)
                 for k in range(n_classes)]
        opt.zero_grad()
        with Tape() as tape:
            zg = fm(z, g_drop)
            cons_terms, per_layer = [], []
            for i, ae in enumerate(decoders):
                v = ae.decode_tensor(zg)
                cons_terms.append(fusion_consistency_loss(v, targets[i]))
                vt = ops.transpose(ops.normalize(v, axis=-1))
                per_layer.append(ops.stack(
                    [ste_indicator(ops.matmul(Tensor(class_grads[i][k][picks[k]]), vt), tau)
                     for k in range(n_classes)]))                     # [K, N, B]
            s = ops.transpose(ops.stack(per_layer), (1, 2, 3, 0))    # [K, N, B, L]
            l_var = variance_loss(s)
            l_cons = ops.mean(ops.stack(cons_terms))
            loss = ops.add(ops.scale(l_var, config.lambda_var), ops.scale(l_cons, config.lambda_cons))
        if not np.isfinite(loss.item()):
            raise FloatingPointError(
                f"stage 3 loss not finite at step {step} (tau={tau:.3f}, "
                f"var={l_var.item()}, cons={l_cons.item()})")
        tape.backward(loss, opt.params)
        opt.step()
        schedule.advance()
        losses.append(loss.item())
        var_terms.append(l_var.item())
    for ae in decoders:
        ae.zero_grad()
    zg = fuse(fm, z_np)
    gcavs = [GlobalCav(c, r, zg[i].copy()) for i, (c, r) in enumerate(keys)]
    log.info("stage 3: loss %.4f -> %.4f over %d steps", losses[0], losses[-1], len(losses))
    return Stage3Result(fm, gcavs, losses, var_terms)


def tgcav_vectors(gcavs: Sequence[GlobalCav], autoencoders: Mapping[str, LayerAutoencoder],
                  layers: Sequence[str]) -> Dict[Tuple[str, int, str], np.ndarray]:
    """Unit decoded vectors keyed by (concept, run, layer)."""
    out = {}
    for g in gcavs:
        for layer, rec in decode_gcav(g, autoencoders, layers).items():
            out[(g.concept_id, g.run_index, layer)] = rec.v_unit
    return out
