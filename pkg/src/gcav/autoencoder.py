"""Per-layer autoencoders mapping CAVs of any width into one shared embedding size.

Each map is linear -> ReLU -> linear. The output layers stay linear so that
signed CAV components can be reproduced.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from . import rng as rng_mod
from .autodiff import Adam, Tape, Tensor, ops
from .cav import CavVector
from .nn import Linear, Module

log = logging.getLogger(__name__)

CONVERGENCE_LOSS = 0.05


class Stage1ConvergenceError(RuntimeError):
    pass


class LayerAutoencoder(Module):
    def __init__(self, layer: str, d_layer: int, d_embed: int = 64, hidden: int = 64,
                 seed: int = 0, shared_init: bool = False, bias: bool = True):
        g = rng_mod.stream(seed, "ae", "shared" if shared_init else layer)
        self.enc1 = Linear(d_layer, hidden, g, bias=bias)
        self.enc2 = Linear(hidden, d_embed, g, bias=bias, init="xavier")
        self.dec1 = Linear(d_embed, hidden, g, bias=bias)
        self.dec2 = Linear(hidden, d_layer, g, bias=bias, init="xavier")
        self.layer = layer
        self.d_layer = d_layer
        self.d_embed = d_embed
        self.hidden = hidden

    def encode_tensor(self, x: Tensor) -> Tensor:
        return self.enc2(ops.relu(self.enc1(x)))

    def decode_tensor(self, z: Tensor) -> Tensor:
        return self.dec2(ops.relu(self.dec1(z)))

    def encoder_state(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.state_dict().items() if k.startswith("enc")}

    def decoder_state(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.state_dict().items() if k.startswith("dec")}


@dataclass
class CavEmbedding:
    concept_id: str
    layer: str
    run_index: int
    z: np.ndarray
    kind: str = "concept"


def encode(ae: LayerAutoencoder, x: CavVector) -> CavEmbedding:
    if x.layer != ae.layer:
        raise ValueError(f"CAV from layer {x.layer!r} given to the {ae.layer!r} autoencoder")
    z = ae.encode_tensor(Tensor(x.vector[None, :])).data[0]
    return CavEmbedding(x.concept_id, x.layer, x.run_index, z.copy(), x.kind)


def decode(ae: LayerAutoencoder, z) -> np.ndarray:
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float32)
    if z.shape[-1] != ae.d_embed:
        raise ValueError(f"embedding width {z.shape[-1]} != {ae.d_embed}")
    single = z.ndim == 1
    out = ae.decode_tensor(Tensor(np.atleast_2d(z))).data
    return out[0] if single else out


def reconstruction_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """1 - cos(x_hat, x), averaged over rows when given a batch."""
    for t in (x, x_hat):
        norms = np.linalg.norm(np.atleast_2d(t.data), axis=-1)
        if np.any(norms == 0):
            raise ValueError("reconstruction loss of a zero-norm vector")
    if x.ndim == 1:
        return ops.sub(1.0, ops.cosine_similarity(x_hat, x))
    return ops.sub(1.0, ops.mean(ops.cosine_similarity(x_hat, x, axis=-1)))


@dataclass
class Stage1Result:
    autoencoder: LayerAutoencoder
    losses: List[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def train_stage1(layer: str, cavs: Sequence[CavVector], d_embed: int = 64, hidden: int = 64,
                 epochs: int = 500, lr: float = 1e-3, seed: int = 0,
                 threshold: float = CONVERGENCE_LOSS, shared_init: bool = False,
                 bias: bool = True) -> Stage1Result:
    """Fit one layer's autoencoder on every CAV at that layer (full batch)."""
    if len(cavs) < 2:
        raise ValueError(f"stage 1 at {layer}: need >= 2 CAVs, got {len(cavs)}")
    wrong = {c.layer for c in cavs} - {layer}
    if wrong:
        raise ValueError(f"stage 1 at {layer}: CAVs from other layers {sorted(wrong)}")
    x = Tensor(np.stack([c.vector for c in cavs]))
    ae = LayerAutoencoder(layer, x.shape[1], d_embed, hidden, seed, shared_init, bias)
    opt = Adam(ae.parameters(), lr=lr)
    losses = []
    for _ in range(epochs):
        opt.zero_grad()
        with Tape() as tape:
            loss = reconstruction_loss(x, ae.decode_tensor(ae.encode_tensor(x)))
        tape.backward(loss, opt.params)
        opt.step()
        losses.append(loss.item())
    with Tape():
        final = reconstruction_loss(x, ae.decode_tensor(ae.encode_tensor(x))).item()
    losses.append(final)
    log.info("stage 1 %s: %d CAVs, final loss %.5f", layer, len(cavs), final)
    if final > threshold:
        first = losses[0]
        raise Stage1ConvergenceError(
            f"stage 1 at {layer} did not converge: loss {first:.4f} -> {final:.4f} "
            f"(> {threshold}) after {epochs} epochs on {len(cavs)} CAVs")
    return Stage1Result(ae, losses)


def round_trip_cosine(ae: LayerAutoencoder, cavs: Sequence[CavVector]) -> float:
    """Mean cos(x, decode(encode(x))) over ``cavs``."""
    x = np.stack([c.vector for c in cavs])
    x_hat = ae.decode_tensor(ae.encode_tensor(Tensor(x))).data
    num = (x * x_hat).sum(axis=1)
    den = np.linalg.norm(x, axis=1) * np.linalg.norm(x_hat, axis=1)
    return float(np.mean(num / den))
