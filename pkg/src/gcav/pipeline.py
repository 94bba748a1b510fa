"""Staged pipeline: world -> target -> CAVs -> stages 1-3 -> TGCAV scores -> report.

Every stage reads its inputs back from the artifact store, so a resumed run
follows exactly the same code path as an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import align as align_mod
from .align import AlignedEmbedding, project, train_stage2
from .autoencoder import CavEmbedding, LayerAutoencoder, encode, train_stage1
from .cav import CavVector, GradientCache, ScoreTable, run_baseline
from .config import PipelineConfig
from .evaluate import ComparisonReport, build_report, export, per_run_csv, score_tgcav
from .fusion import FusionModule, GlobalCav, RelaxationSchedule, fuse, stack_aligned, train_stage3
from .probe import (ClassDataset, ConceptSpec, ProbeSet, TargetModel, World, concept_probe_set,
                    generate_world, random_probe_sets, train_target, accuracy)
from .store import STAGES, ArtifactStore, MissingArtifactError, pack_state, stage_index, unpack_state

log = logging.getLogger(__name__)

PIPELINE_STAGES = ("gen", "target", "cavs", "ae", "align", "fuse", "score")

# one artifact per stage whose presence marks the stage as available downstream
SENTINELS = {
    "gen": "gen/directions",
    "target": "target/model",
    "cavs": "cavs/tcav",
    "align": "align/head",
    "fuse": "fuse/module",
    "score": "score/tgcav",
}


class StageError(RuntimeError):
    """A stage failed; carries the stage name for the exit code."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


def exit_code(stage: str) -> int:
    """10 + the stage's position, so each stage fails with its own status."""
    return 10 + stage_index(stage)


def worker_count() -> int:
    raw = os.environ.get("GCAV_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"GCAV_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError("GCAV_THREADS must be >= 1")
    return n


def ordered_map(fn: Callable, items: Sequence, threads: int) -> list:
    """``map`` over a bounded pool; results come back in input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def fingerprint(cfg: PipelineConfig, stage: str) -> str:
    """Hash of the config sections that can change ``stage``'s outputs."""
    sections = {
        "gen": ("seed", "world", "cav"),
        "target": ("model",),
        "cavs": ("cav",),
        "ae": ("stage1",),
        "align": ("align",),
        "fuse": ("fuse", "schedule"),
        "score": (),
        "attack": ("attack",),
    }
    d = cfg.to_dict()
    keys = []
    for s in PIPELINE_STAGES[:PIPELINE_STAGES.index(stage) + 1] if stage in PIPELINE_STAGES else []:
        keys.extend(sections[s])
    if stage == "attack":
        keys = [k for s in PIPELINE_STAGES for k in sections[s]] + ["attack"]
    payload = json.dumps({k: d[k] for k in dict.fromkeys(keys)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# -- loaders -----------------------------------------------------------------------

def load_world(store: ArtifactStore) -> Tuple[World, Dict[str, ProbeSet], List[ProbeSet]]:
    store.require(SENTINELS["gen"])
    meta = store.stage_meta("gen")
    dirs = store.get("gen/directions")
    concepts = [ConceptSpec(cid, dirs[i], dict(meta["relevance"][cid]))
                for i, cid in enumerate(meta["concepts"])]
    inputs = {k: store.get(f"gen/class/{k}") for k in meta["classes"]}
    world = World(seed=meta["seed"], d_in=meta["d_in"], concepts=concepts,
                  dataset=ClassDataset(list(meta["classes"]), inputs),
                  noise=meta["noise"], probe_noise=meta["probe_noise"],
                  random_noise=meta["random_noise"])
    csets = {c: ProbeSet("concept", c, store.get(f"gen/probe/concept/{c}"), concept_id=c)
             for c in meta["concepts"]}
    rsets = [ProbeSet("random", sid, store.get(f"gen/probe/random/{sid}"))
             for sid in meta["random_sets"]]
    world.random_sets = rsets
    return world, csets, rsets


def build_model(cfg: PipelineConfig) -> TargetModel:
    m = cfg.model
    return TargetModel(cfg.world.d_in, cfg.world.n_classes, width=m.width, depth=m.depth,
                       instrumented=m.instrumented, seed=cfg.seed, common_mode=m.common_mode,
                       residual=m.residual, branch_gain=m.branch_gain)


def load_model(store: ArtifactStore, cfg: PipelineConfig) -> TargetModel:
    store.require(SENTINELS["target"])
    model = build_model(cfg)
    model.load_state_dict(unpack_state(store.get("target/model"), store.stage_meta("target")["layout"]))
    return model


def _cav_key(c: CavVector) -> str:
    if c.kind == "concept":
        return f"cavs/concept/{c.concept_id}/{c.layer}/{c.run_index}"
    return f"cavs/random/{c.layer}/{c.run_index}"


def load_cavs(store: ArtifactStore) -> Tuple[List[CavVector], List[CavVector], ScoreTable]:
    store.require(SENTINELS["cavs"])
    meta = store.stage_meta("cavs")
    cavs, randoms = [], []
    for rec in meta["cavs"]:
        c = CavVector(rec["concept"], rec["layer"], rec["run"], store.get(rec["key"]),
                      rec["train_accuracy"], rec["kind"])
        (cavs if c.kind == "concept" else randoms).append(c)
    table = grid_to_table(store.get("cavs/tcav"), meta["grid"], "TCAV")
    return cavs, randoms, table


def table_to_grid(table: ScoreTable, method: str) -> np.ndarray:
    out = np.empty((len(table.concepts), len(table.classes), len(table.layers), table.runs))
    for (c, k, l, r, m), s in table.entries(method):
        out[table.concepts.index(c), table.classes.index(k), table.layers.index(l), r] = s
    return out


def grid_to_table(grid: np.ndarray, axes: dict, method: str) -> ScoreTable:
    t = ScoreTable(list(axes["concepts"]), list(axes["classes"]), list(axes["layers"]), axes["runs"])
    for i, c in enumerate(t.concepts):
        for j, k in enumerate(t.classes):
            for li, l in enumerate(t.layers):
                for r in range(t.runs):
                    t.set(c, k, l, r, method, float(grid[i, j, li, r]))
    return t


def _grid_axes(table: ScoreTable) -> dict:
    return {"concepts": table.concepts, "classes": table.classes, "layers": table.layers,
            "runs": table.runs}


def load_autoencoders(store: ArtifactStore, cfg: PipelineConfig) -> Dict[str, LayerAutoencoder]:
    meta = store.stage_meta("ae") if store.stage_complete("ae") else None
    first = f"ae/{cfg.model.instrumented[0]}/enc"
    store.require(first)
    out = {}
    for layer, rec in meta["layers"].items():
        s1 = cfg.stage1
        ae = LayerAutoencoder(layer, rec["d_layer"], s1.d_embed, s1.hidden, cfg.seed, s1.shared_init)
        state = unpack_state(store.get(f"ae/{layer}/enc"), rec["enc_layout"])
        state.update(unpack_state(store.get(f"ae/{layer}/dec"), rec["dec_layout"]))
        ae.load_state_dict(state)
        out[layer] = ae
    return out


def load_aligned(store: ArtifactStore) -> Tuple[align_mod.ProjectionHead, List[AlignedEmbedding]]:
    store.require(SENTINELS["align"])
    meta = store.stage_meta("align")
    head = align_mod.ProjectionHead(meta["d_embed"], 0)
    head.load_state_dict(unpack_state(store.get("align/head"), meta["layout"]))
    aligned = [AlignedEmbedding(c, l, r, store.get(f"align/ztilde/{c}/{l}/{r}"))
               for c, l, r in meta["keys"]]
    return head, aligned


def load_fusion(store: ArtifactStore, cfg: PipelineConfig) -> Tuple[FusionModule, List[GlobalCav]]:
    store.require(SENTINELS["fuse"])
    meta = store.stage_meta("fuse")
    f = cfg.fuse
    fm = FusionModule(meta["n_layers"], meta["d_embed"], f.heads, f.dropout, f.ffn_mult, cfg.seed,
                      f.unit_output)
    fm.load_state_dict(unpack_state(store.get("fuse/module"), meta["layout"]))
    gcavs = [GlobalCav(c, r, store.get(f"fuse/gcav/{c}/{r}")) for c, r in meta["keys"]]
    return fm, gcavs


def load_tgcav(store: ArtifactStore) -> ScoreTable:
    store.require(SENTINELS["score"])
    return grid_to_table(store.get("score/tgcav"), store.stage_meta("score")["grid"], "TGCAV")


# -- stage bodies shared with the attack harness --------------------------------------

def fit_stage1(cfg: PipelineConfig, cavs: Sequence[CavVector], random_cavs: Sequence[CavVector],
               layers: Sequence[str], threads: int = 1) -> Dict[str, LayerAutoencoder]:
    s1 = cfg.stage1

    def one(layer):
        corpus = [c for c in list(cavs) + list(random_cavs) if c.layer == layer]
        return train_stage1(layer, corpus, s1.d_embed, s1.hidden, s1.epochs, s1.lr, cfg.seed,
                            s1.threshold, s1.shared_init).autoencoder

    return dict(zip(layers, ordered_map(one, list(layers), threads)))


def embed(aes: Dict[str, LayerAutoencoder], cavs: Sequence[CavVector]) -> List[CavEmbedding]:
    return [encode(aes[c.layer], c) for c in cavs]


def fit_stage2(cfg: PipelineConfig, aes, cavs, random_cavs):
    return train_stage2(embed(aes, cavs), embed(aes, random_cavs), cfg.align, cfg.seed)


def fit_stage3(cfg: PipelineConfig, aligned, aes, grads: GradientCache, layers):
    schedule = RelaxationSchedule(cfg.schedule.tau0, cfg.schedule.tau_max, cfg.fuse.epochs)
    return train_stage3(aligned, aes, grads, layers, cfg.fuse, schedule, cfg.seed)


def frozen_gcavs(cfg: PipelineConfig, aes, head, fm: FusionModule, cavs: Sequence[CavVector],
                 layers: Sequence[str]) -> List[GlobalCav]:
    """GCAVs for ``cavs`` through already-trained stages (no retraining)."""
    embs = embed(aes, cavs)
    z = project(head, np.stack([e.z for e in embs]))
    aligned = [AlignedEmbedding(e.concept_id, e.layer, e.run_index, z[i].copy())
               for i, e in enumerate(embs)]
    stack, keys = stack_aligned(aligned, layers)
    zg = fuse(fm, stack)
    return [GlobalCav(c, r, zg[i].copy()) for i, (c, r) in enumerate(keys)]


# -- stages -------------------------------------------------------------------------------

@dataclass
class Context:
    cfg: PipelineConfig
    store: ArtifactStore
    threads: int = 1
    _grads: Optional[GradientCache] = None

    def grads(self, model: TargetModel, world: World) -> GradientCache:
        if self._grads is None or self._grads.model is not model:
            self._grads = GradientCache(model, world)
        return self._grads


def stage_gen(ctx: Context) -> None:
    cfg = ctx.cfg
    w = cfg.world
    world = generate_world(cfg.seed, d_in=w.d_in, n_concepts=w.n_concepts, n_classes=w.n_classes,
                           n_per_class=w.n_per_class, noise=w.noise, relevance=w.relevance,
                           probe_noise=w.probe_noise, random_noise=w.random_noise)
    csets = {c: concept_probe_set(world, c, cfg.cav.probe_size) for c in world.concept_ids}
    rsets = random_probe_sets(world, cfg.cav.runs, cfg.cav.probe_size)
    arrays = {"gen/directions": np.stack([c.direction for c in world.concepts])}
    for k in world.class_ids:
        arrays[f"gen/class/{k}"] = world.dataset.inputs[k]
    for c, s in csets.items():
        arrays[f"gen/probe/concept/{c}"] = s.examples
    for s in rsets:
        arrays[f"gen/probe/random/{s.set_id}"] = s.examples
    meta = {"seed": world.seed, "d_in": world.d_in, "classes": world.class_ids,
            "concepts": world.concept_ids,
            "relevance": {c.concept_id: c.relevance for c in world.concepts},
            "noise": world.noise, "probe_noise": world.probe_noise,
            "random_noise": world.random_noise, "random_sets": [s.set_id for s in rsets]}
    ctx.store.put_stage("gen", arrays, meta)


def stage_target(ctx: Context) -> None:
    cfg = ctx.cfg
    world, _, _ = load_world(ctx.store)
    model = build_model(cfg)
    m = cfg.model
    train_target(model, world.dataset, epochs=m.epochs, lr=m.lr, batch_size=m.batch_size,
                 seed=cfg.seed, min_accuracy=m.min_accuracy)
    flat, layout = pack_state(model.state_dict())
    ctx.store.put_stage("target", {"target/model": flat},
                        {"layout": layout, "accuracy": accuracy(model, world.dataset)})


def stage_cavs(ctx: Context) -> None:
    cfg = ctx.cfg
    world, csets, rsets = load_world(ctx.store)
    model = load_model(ctx.store, cfg)
    res = run_baseline(model, world, csets, rsets, cfg.model.instrumented,
                       grads=ctx.grads(model, world), l2=cfg.cav.l2, epochs=cfg.cav.epochs,
                       lr=cfg.cav.lr)
    arrays = {_cav_key(c): c.vector for c in res.cavs + res.random_cavs}
    arrays["cavs/tcav"] = table_to_grid(res.table, "TCAV")
    recs = [{"key": _cav_key(c), "concept": c.concept_id, "layer": c.layer, "run": c.run_index,
             "kind": c.kind, "train_accuracy": c.train_accuracy}
            for c in res.cavs + res.random_cavs]
    ctx.store.put_stage("cavs", arrays, {"cavs": recs, "grid": _grid_axes(res.table)},
                        files={"scores_tcav.csv": res.table.to_csv()})


def stage_ae(ctx: Context) -> None:
    cfg = ctx.cfg
    cavs, randoms, _ = load_cavs(ctx.store)
    layers = cfg.model.instrumented
    aes = fit_stage1(cfg, cavs, randoms, layers, ctx.threads)
    arrays, layers_meta = {}, {}
    for layer, ae in aes.items():
        enc, enc_layout = pack_state(ae.encoder_state())
        dec, dec_layout = pack_state(ae.decoder_state())
        arrays[f"ae/{layer}/enc"] = enc
        arrays[f"ae/{layer}/dec"] = dec
        layers_meta[layer] = {"d_layer": ae.d_layer, "enc_layout": enc_layout, "dec_layout": dec_layout}
    ctx.store.put_stage("ae", arrays, {"layers": layers_meta})


def stage_align(ctx: Context) -> None:
    cfg = ctx.cfg
    cavs, randoms, _ = load_cavs(ctx.store)
    aes = load_autoencoders(ctx.store, cfg)
    res = fit_stage2(cfg, aes, cavs, randoms)
    flat, layout = pack_state(res.head.state_dict())
    arrays = {"align/head": flat}
    for a in res.aligned:
        arrays[f"align/ztilde/{a.concept_id}/{a.layer}/{a.run_index}"] = a.z_tilde
    meta = {"layout": layout, "d_embed": res.head.d_embed,
            "keys": [[a.concept_id, a.layer, a.run_index] for a in res.aligned],
            "before": dataclasses.asdict(res.before), "after": dataclasses.asdict(res.after),
            "final_loss": res.losses[-1]}
    ctx.store.put_stage("align", arrays, meta)


def stage_fuse(ctx: Context) -> None:
    cfg = ctx.cfg
    world, _, _ = load_world(ctx.store)
    model = load_model(ctx.store, cfg)
    aes = load_autoencoders(ctx.store, cfg)
    _, aligned = load_aligned(ctx.store)
    res = fit_stage3(cfg, aligned, aes, ctx.grads(model, world), cfg.model.instrumented)
    flat, layout = pack_state(res.module.state_dict())
    arrays = {"fuse/module": flat}
    for g in res.gcavs:
        arrays[f"fuse/gcav/{g.concept_id}/{g.run_index}"] = g.z_gcav
    meta = {"layout": layout, "n_layers": res.module.n_layers, "d_embed": res.module.d_embed,
            "keys": [[g.concept_id, g.run_index] for g in res.gcavs],
            "final_loss": res.losses[-1], "final_variance": res.variance_terms[-1]}
    ctx.store.put_stage("fuse", arrays, meta)


def stage_score(ctx: Context) -> None:
    cfg = ctx.cfg
    world, _, _ = load_world(ctx.store)
    model = load_model(ctx.store, cfg)
    aes = load_autoencoders(ctx.store, cfg)
    _, gcavs = load_fusion(ctx.store, cfg)
    _, _, tcav = load_cavs(ctx.store)
    table = ScoreTable(list(tcav.concepts), list(tcav.classes), list(tcav.layers), tcav.runs)
    score_tgcav(gcavs, aes, world, ctx.grads(model, world), table)
    if not table.is_complete("TGCAV"):
        raise ValueError("TGCAV grid incomplete: some concept/run has no GCAV")
    ctx.store.put_stage("score", {"score/tgcav": table_to_grid(table, "TGCAV")},
                        {"grid": _grid_axes(table)},
                        files={"scores_tgcav.csv": table.to_csv()})


STAGE_FUNCS = {"gen": stage_gen, "target": stage_target, "cavs": stage_cavs, "ae": stage_ae,
               "align": stage_align, "fuse": stage_fuse, "score": stage_score}

PREREQUISITE = {"target": "gen", "cavs": "target", "ae": "cavs", "align": "ae", "fuse": "align",
                "score": "fuse"}


def _sentinel(cfg: PipelineConfig, stage: str) -> str:
    if stage == "ae":
        return f"ae/{cfg.model.instrumented[0]}/enc"
    return SENTINELS[stage]


def check_prerequisites(ctx: Context, stage: str) -> None:
    """Every earlier stage must be complete; the error names the first absent key."""
    for s in PIPELINE_STAGES[:PIPELINE_STAGES.index(stage)]:
        key = _sentinel(ctx.cfg, s)
        if not ctx.store.has(key) or not ctx.store.stage_complete(s):
            raise MissingArtifactError(f"stage {stage!r} needs artifact {key!r} (run stage {s!r} first)")


def run_stage(ctx: Context, stage: str) -> float:
    """Run one stage, dropping everything downstream of it; returns seconds."""
    if stage not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}")
    check_prerequisites(ctx, stage)
    ctx.store.invalidate_after(stage) if ctx.store.stage_complete(stage) else None
    t0 = time.perf_counter()
    try:
        STAGE_FUNCS[stage](ctx)
    except MissingArtifactError:
        raise
    except Exception as e:  # noqa: BLE001 - converted to a stage failure with its name
        raise StageError(stage, f"{type(e).__name__}: {e}") from e
    ctx.store.invalidate_after(stage)
    rec = ctx.store._manifest["stages"][stage]
    rec["fingerprint"] = fingerprint(ctx.cfg, stage)
    ctx.store._save()
    elapsed = time.perf_counter() - t0
    log.info("stage %s done in %.1fs", stage, elapsed)
    return elapsed


def stage_is_current(ctx: Context, stage: str) -> bool:
    rec = ctx.store._manifest["stages"].get(stage)
    return bool(rec and rec.get("complete") and rec.get("fingerprint") == fingerprint(ctx.cfg, stage))


def run_all(ctx: Context, resume: bool = False) -> Dict[str, float]:
    """Run every pipeline stage; with ``resume`` skip the completed prefix."""
    timings = {}
    rerun = not resume
    for stage in PIPELINE_STAGES:
        if not rerun and stage_is_current(ctx, stage):
            log.info("stage %s up to date, skipped", stage)
            continue
        rerun = True
        timings[stage] = run_stage(ctx, stage)
    return timings


def make_report(ctx: Context) -> ComparisonReport:
    world, _, _ = load_world(ctx.store)
    _, _, tcav = load_cavs(ctx.store)
    return build_report(tcav, load_tgcav(ctx.store), world, ctx.cfg.model_name, with_iqr=True)


def write_report(ctx: Context, out_dir: Path, formats: Sequence[str], stable_names: bool) -> List[Path]:
    report = make_report(ctx)
    stamp = "stable" if stable_names else time.strftime("%Y%m%dT%H%M%S", time.gmtime())
    paths = export(report, out_dir, formats, stamp)
    tgcav = load_tgcav(ctx.store)
    _, _, tcav = load_cavs(ctx.store)
    per_run = out_dir / f"per_run_{ctx.cfg.model_name}_{stamp}.csv"
    per_run.write_text(per_run_csv(tcav.merged(tgcav)))
    return paths + [per_run]
