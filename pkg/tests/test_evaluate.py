import csv
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcav import pipeline as pl
from gcav.cav import ScoreTable, tcav_score
from gcav.evaluate import (REPORT_COLUMNS, ComparisonReport, LayerStats, build_report, cv_bounds,
                           cv_from_table, export, is_finite_report, layer_stats, pct_change,
                           per_run_csv, report_csv, report_filename, report_json, report_svg,
                           strictly_more_stable, tgcav_score)
from gcav.fusion import GlobalCav, decode_gcav

REFERENCE = Path(__file__).parent / "fixtures" / "reference_stats.csv"


def reference_rows():
    with REFERENCE.open() as fh:
        return list(csv.DictReader(fh))


# -- reference-table regression ---------------------------------------------------

def test_fixture_covers_all_rows():
    rows = reference_rows()
    assert len(rows) == 54
    assert sum(r["method"] == "TCAV" for r in rows) == 27


@pytest.mark.parametrize("row", reference_rows(),
                         ids=lambda r: f"{r['model']}-{r['concept']}-{r['method']}")
def test_reference_cv(row):
    mean, std, cv = float(row["mean"]), float(row["std"]), float(row["cv"])
    lo, hi = cv_bounds(mean, std)
    assert lo - 0.001 <= cv <= hi + 0.001
    assert lo <= cv_from_table(mean, std) <= hi


@pytest.mark.parametrize("mean,std,cv", [(0.808, 0.140, 0.173), (0.373, 0.019, 0.051)])
def test_cv_examples(mean, std, cv):
    assert cv_from_table(mean, std) == pytest.approx(cv, abs=1e-3)


def test_percent_change_convention():
    assert pct_change(0.52, 0.96) == pytest.approx(84.6, abs=0.1)
    # a reference +28.49 does not follow from its rounded 0.38 -> 0.49 cells
    assert pct_change(0.38, 0.49) == pytest.approx(28.9, abs=0.1)


def test_percent_change_zero_baseline():
    with pytest.raises(ZeroDivisionError):
        pct_change(0.0, 0.5)


# -- layer statistics ------------------------------------------------------------------

def test_rr_examples():
    assert layer_stats([0.2, 0.4, 0.6]).rr == pytest.approx(1.0)
    const = layer_stats([0.3, 0.3, 0.3, 0.3])
    assert const.rr == 0.0 and const.std == 0.0 and const.cv == 0.0


def test_population_std():
    assert layer_stats([0.0, 1.0]).std == 0.5


def test_zero_mean_is_undefined():
    s = layer_stats([0.0, 0.0, 0.0])
    assert s.cv is None and s.rr is None and not s.defined


def test_short_series_rejected():
    with pytest.raises(ValueError):
        layer_stats([0.5])


def test_iqr_optional():
    assert layer_stats([0.1, 0.2, 0.3, 0.4]).iqr is None
    assert layer_stats([0.1, 0.2, 0.3, 0.4], with_iqr=True).iqr == pytest.approx(0.15)


@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8), st.randoms(use_true_random=False))
@settings(max_examples=60, deadline=None)
def test_stats_permutation_invariant(series, rnd):
    shuffled = list(series)
    rnd.shuffle(shuffled)
    a, b = layer_stats(series), layer_stats(shuffled)
    for name in ("mean", "std", "cv", "rr"):
        assert getattr(a, name) == pytest.approx(getattr(b, name), rel=1e-12, abs=1e-12)


def test_strictly_more_stable():
    old, new = layer_stats([0.2, 0.8]), layer_stats([0.45, 0.55])
    assert strictly_more_stable(new, old)
    assert not strictly_more_stable(old, new)
    assert not strictly_more_stable(layer_stats([0.0, 0.0]), old)


# -- scoring --------------------------------------------------------------------------

def test_tgcav_equals_tcav_under_substitution(small_run):
    cfg, store = small_run.cfg, small_run.store
    world, _, _ = pl.load_world(store)
    model = pl.load_model(store, cfg)
    aes = pl.load_autoencoders(store, cfg)
    _, gcavs = pl.load_fusion(store, cfg)
    x = world.dataset.inputs["class1"]
    for layer in cfg.model.instrumented:
        v = decode_gcav(gcavs[0], aes, [layer])[layer].v_unit
        assert tgcav_score(model, layer, 1, x, gcavs[0], aes) == tcav_score(model, layer, 1, x, v)


def test_tgcav_brute_force_count():
    class _Ae:
        d_embed = 3

        def decode_tensor(self, z):
            return z

    grads = np.zeros((10, 3), np.float32)
    grads[:4, 0] = 1.0
    grads[4:, 0] = -1.0
    g = GlobalCav("c", 0, np.array([2.0, 0.0, 0.0], np.float32))
    assert tgcav_score(None, "L", 0, None, g, {"L": _Ae()}, grads=grads) == 0.4


def test_tgcav_missing_decoder():
    with pytest.raises(KeyError):
        tgcav_score(None, "L9", 0, None, GlobalCav("c", 0, np.ones(3)), {})


def test_stored_tgcav_in_unit_range(small_run):
    table = pl.load_tgcav(small_run.store)
    assert table.is_complete("TGCAV")
    assert all(0.0 <= s <= 1.0 for _, s in table.entries("TGCAV"))


# -- report ----------------------------------------------------------------------------

def _tables(values_tcav, values_tgcav, layers=("L1", "L2", "L3")):
    t1 = ScoreTable(["c0", "c1"], ["k0"], list(layers), 2)
    t2 = ScoreTable(["c0", "c1"], ["k0"], list(layers), 2)
    for ci, c in enumerate(["c0", "c1"]):
        for li, l in enumerate(layers):
            for r in range(2):
                t1.set(c, "k0", l, r, "TCAV", values_tcav[ci][li])
                t2.set(c, "k0", l, r, "TGCAV", values_tgcav[ci][li])
    return t1, t2


@pytest.fixture
def report():
    t1, t2 = _tables([[0.2, 0.5, 0.8], [0.1, 0.6, 0.3]], [[0.5, 0.55, 0.6], [0.0, 0.0, 0.0]])
    return build_report(t1, t2, model="toy")


def test_report_rows_and_runs_averaged(report):
    assert len(report.rows) == 2
    assert report.row("k0", "c0").stats["TCAV"].series == pytest.approx([0.2, 0.5, 0.8])


def test_undefined_counts_as_not_improved(report):
    assert report.row("k0", "c0").improved
    assert not report.row("k0", "c1").improved
    assert report.improved_fraction() == 0.5


def test_grid_mismatch_rejected():
    t1, _ = _tables([[0.1] * 3] * 2, [[0.1] * 3] * 2)
    _, t2 = _tables([[0.1] * 2] * 2, [[0.1] * 2] * 2, layers=("L1", "L2"))
    with pytest.raises(ValueError, match="grids"):
        build_report(t1, t2)


def test_incomplete_grid_rejected():
    t1, t2 = _tables([[0.1] * 3] * 2, [[0.1] * 3] * 2)
    del t2.scores[("c0", "k0", "L1", 0, "TGCAV")]
    with pytest.raises(ValueError, match="incomplete"):
        build_report(t1, t2)


def test_csv_header_and_undefined(report):
    lines = report_csv(report).splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS) == "class,concept,method,mean,std,cv,rr"
    assert lines[-1].endswith("undefined,undefined")
    assert len(lines) == 1 + 2 * 2


def test_json_round_trip(report):
    again = ComparisonReport.from_dict(json.loads(report_json(report)))
    assert again == report


def test_per_run_csv():
    t1, t2 = _tables([[0.2, 0.5, 0.8], [0.1, 0.6, 0.3]], [[0.5, 0.55, 0.6], [0.4, 0.4, 0.4]])
    lines = per_run_csv(t1.merged(t2)).splitlines()
    assert lines[0] == "class,concept,method,run,mean,std,cv,rr"
    assert len(lines) == 1 + 2 * 2 * 2


def test_svg_has_one_bar_per_cell(report):
    svg = report_svg(report, "TCAV")
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg.count("<rect") == 2 * 3 + 3  # bars plus legend swatches


def test_filename():
    assert report_filename("synthetic", "stable", "csv") == "report_synthetic_stable.csv"


def test_export_is_byte_stable(tmp_path, report):
    a = export(report, tmp_path / "a")
    b = export(report, tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in b]
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
    assert {p.suffix for p in a} == {".csv", ".json", ".svg"}


def test_export_format_subset(tmp_path, report):
    paths = export(report, tmp_path, formats=["csv"])
    assert [p.suffix for p in paths] == [".csv"]
    with pytest.raises(ValueError):
        export(report, tmp_path, formats=["pdf"])


def test_finite_report(report):
    assert is_finite_report(report)
