import numpy as np
import pytest

from gcav import pipeline as pl
from gcav.attack import (ATTACK_COLUMNS, AttackSpec, attacked_class, evaluate_attack, perturb,
                         resolve_layer, run_attack, shift_cosines, target_mean)
from gcav.cav import ScoreTable


def _setup(ctx):
    world, csets, _ = pl.load_world(ctx.store)
    return world, csets, pl.load_model(ctx.store, ctx.cfg)


def test_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec("concept1", "concept1", "L1")
    with pytest.raises(ValueError):
        AttackSpec("concept1", "concept0", "L1", epsilon=-1.0)


@pytest.mark.parametrize("eps", [0.01, 0.1, 0.5])
def test_budget_respected(small_run, eps):
    _, csets, model = _setup(small_run)
    spec = AttackSpec("concept1", "concept0", "L2", epsilon=eps, steps=50)
    src = csets["concept1"].examples
    out = run_attack(model, csets, spec)
    assert np.abs(out.examples - src).max() <= eps + 1e-7
    assert out.concept_id == csets["concept1"].concept_id


def test_zero_budget_is_identity(small_run):
    _, csets, model = _setup(small_run)
    out = run_attack(model, csets, AttackSpec("concept1", "concept0", "L2", epsilon=0.0))
    assert np.array_equal(out.examples, csets["concept1"].examples)


def test_budget_ladder_is_monotone(small_run):
    _, csets, model = _setup(small_run)
    src = csets["concept1"].examples
    mu = target_mean(model, "L2", csets["concept0"])
    means = []
    for eps in (0.05, 0.2, 0.5):
        x = perturb(model, "L2", src, mu, eps, 0.01, 200, 0.01)
        means.append(shift_cosines(model, "L2", src, x, mu)[1].mean())
    assert means[0] <= means[1] <= means[2]


def test_batch_equals_per_example(small_run):
    _, csets, model = _setup(small_run)
    src = csets["concept1"].examples[:4]
    mu = target_mean(model, "L2", csets["concept0"])
    batch = perturb(model, "L2", src, mu, 0.3, 0.01, 30, 0.01)
    single = np.concatenate([perturb(model, "L2", src[i:i + 1], mu, 0.3, 0.01, 30, 0.01)
                             for i in range(len(src))])
    np.testing.assert_allclose(batch, single, rtol=1e-5, atol=1e-6)


def test_unknown_concept_or_layer(small_run):
    _, csets, model = _setup(small_run)
    with pytest.raises(KeyError):
        run_attack(model, csets, AttackSpec("concept9", "concept0", "L2"))
    with pytest.raises(KeyError):
        run_attack(model, csets, AttackSpec("concept1", "concept0", "L9"))


def test_attacked_class(small_run):
    world, _, _ = _setup(small_run)
    k = attacked_class(world, AttackSpec("concept1", "concept0", "L1"))
    assert world.concept("concept0").relevance[k]
    assert not world.concept("concept1").relevance[k]


def test_resolve_layer_picks_lowest_source_score():
    t = ScoreTable(["a", "b"], ["k"], ["L1", "L2", "L3"], 1)
    for l, v in zip(["L1", "L2", "L3"], [0.6, 0.2, 0.2]):
        t.set("a", "k", l, 0, "TCAV", v)
        t.set("b", "k", l, 0, "TCAV", 0.5)
    spec = AttackSpec("a", "b", "auto")
    assert resolve_layer(spec, t, "k").layer == "L2"  # ties go to the earlier layer
    fixed = AttackSpec("a", "b", "L3")
    assert resolve_layer(fixed, t, "k") is fixed


@pytest.fixture(scope="module")
def outcome(small_run):
    checksums = small_run.store.checksums()
    spec = AttackSpec("concept1", "concept0", "L2")
    out = evaluate_attack(small_run, spec)
    return out, checksums


def test_outcome_rows_and_csv(outcome):
    out, _ = outcome
    lines = out.to_csv().splitlines()
    assert lines[0] == ",".join(ATTACK_COLUMNS) == "method,scope,before,after,pct_change"
    assert len(lines) == 1 + 3 * 2
    assert {r.method for r in out.rows} == {"TCAV", "TGCAV", "TGCAV_frozen"}


def test_shift_success(outcome):
    out, _ = outcome
    assert out.shift_success >= 0.95
    assert out.max_abs_delta <= out.spec.epsilon + 1e-7


def test_before_scores_match_pipeline(outcome, small_run):
    out, checksums = outcome
    _, _, tcav = pl.load_cavs(small_run.store)
    tgcav = pl.load_tgcav(small_run.store)
    s, k, l = out.spec.source_concept, out.cls, out.spec.layer
    assert out.row("TCAV", "attacked_layer").before == tcav.run_mean(s, k, l, "TCAV")
    assert out.row("TGCAV", "attacked_layer").before == tgcav.run_mean(s, k, l, "TGCAV")
    assert out.row("TGCAV_frozen", "mean").before == out.row("TGCAV", "mean").before
    # the audit must not touch stored artifacts
    assert small_run.store.checksums() == checksums


def test_pct_change_from_unrounded(outcome):
    out, _ = outcome
    r = out.row("TCAV", "mean")
    if r.before:
        assert r.pct_change == pytest.approx((r.after - r.before) / r.before * 100)


def test_evaluate_needs_pipeline(fresh_small):
    from gcav.store import MissingArtifactError
    with pytest.raises(MissingArtifactError):
        evaluate_attack(fresh_small, AttackSpec("concept1", "concept0", "L2"))
