import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from slamkit.evaluation import (
    AteResult,
    DegenerateAlignmentError,
    MISSING_CELL,
    RunRecord,
    align_umeyama,
    build_report,
    compute_ate,
    compute_percent_lost,
    render_csv,
    render_html,
    render_latex,
)
from slamkit.frame import STATE_LOST, STATE_OK
from slamkit.geometry import SE3, Sim3, se3_exp, so3_exp
from slamkit.trajectory import TrajectoryRecord

DATA = Path(__file__).parent / "data"


def cloud(n, rng, scale=3.0):
    return rng.uniform(-scale, scale, (n, 3))


def record_from_positions(positions, t0=0.0, dt=0.1, states=None):
    rec = TrajectoryRecord(kind="final")
    for i, p in enumerate(positions):
        st = states[i] if states is not None else STATE_OK
        rec.append(t0 + dt * i, SE3(np.eye(3), np.asarray(p, float)), st)
    return rec


# ---------------------------------------------------------------- alignment


def test_align_identity():
    rng = np.random.default_rng(0)
    pts = cloud(40, rng)
    g, res = align_umeyama(pts, pts, with_scale=False)
    assert np.abs(g.r - np.eye(3)).max() < 1e-12
    assert np.abs(g.t).max() < 1e-12
    assert g.s == 1.0
    assert res.max() < 1e-12


def test_align_recovers_known_similarity():
    rng = np.random.default_rng(1)
    src = cloud(60, rng)
    g_true = Sim3(so3_exp(np.array([0.4, -0.2, 0.9])), np.array([1.0, -2.0, 0.5]), 2.5)
    dst = g_true.transform(src)
    g, res = align_umeyama(src, dst, with_scale=True)
    assert np.abs(g.r - g_true.r).max() < 1e-9
    assert np.abs(g.t - g_true.t).max() < 1e-9
    assert abs(g.s - 2.5) < 1e-9
    assert res.max() < 1e-9


def test_align_rejects_too_few_pairs():
    with pytest.raises(DegenerateAlignmentError):
        align_umeyama(np.zeros((2, 3)), np.zeros((2, 3)))


def test_align_rejects_collinear():
    t = np.linspace(0, 1, 10)
    line = np.stack([t, 2 * t, -t], axis=1)
    with pytest.raises(DegenerateAlignmentError):
        align_umeyama(line, line)


def test_align_associates_by_timestamp():
    rng = np.random.default_rng(2)
    pts = cloud(30, rng)
    ref = record_from_positions(pts)
    # estimate timestamps jittered inside the association window
    est = TrajectoryRecord(kind="final")
    for i, p in enumerate(pts):
        est.append(0.1 * i + 0.004, SE3(np.eye(3), p + 0.01), STATE_OK)
    g, res = align_umeyama(est, ref, with_scale=False)
    assert len(res) == 30
    assert res.max() < 1e-9  # constant offset absorbed by the alignment


# ---------------------------------------------------------------- ATE


def test_ate_identical_is_zero():
    rng = np.random.default_rng(3)
    pts = cloud(25, rng)
    r = compute_ate(pts, pts)
    assert r.rmse < 1e-12
    assert r.max_error < 1e-12


def test_ate_arithmetic_two_samples():
    r = AteResult.from_errors([3.0, 4.0])
    assert r.rmse == pytest.approx(3.5355339, abs=1e-6)
    assert r.max_error == 4.0
    assert r.mean == 3.5
    assert r.median == 3.5
    assert r.max_error >= r.rmse >= r.rmse / np.sqrt(r.num_pairs)


def test_ate_invariant_under_joint_rigid_transform():
    rng = np.random.default_rng(4)
    ref = cloud(50, rng)
    est = ref + rng.normal(0, 0.05, ref.shape)
    base = compute_ate(est, ref).rmse
    for seed in range(5):
        r2 = np.random.default_rng(seed)
        T = se3_exp(np.r_[r2.uniform(-2, 2, 3), r2.uniform(-2, 2, 3)])
        moved = compute_ate(T.transform(est), T.transform(ref)).rmse
        assert moved == pytest.approx(base, abs=1e-9)


def test_ate_scale_invariant_with_scale():
    rng = np.random.default_rng(5)
    ref = cloud(50, rng)
    est = ref + rng.normal(0, 0.05, ref.shape)
    base = compute_ate(est, ref, with_scale=True).rmse
    for lam in (0.1, 0.5, 7.0):
        scaled = compute_ate(est * lam, ref, with_scale=True).rmse
        assert scaled == pytest.approx(base, abs=1e-9)
    # without scale the monocular gauge is not removed
    assert compute_ate(est * 7.0, ref, with_scale=False).rmse > 10 * base


# ---------------------------------------------------------------- lost


def test_percent_lost():
    pts = np.zeros((500, 3))
    pts[:, 0] = np.arange(500)
    rec = record_from_positions(pts)
    assert compute_percent_lost(rec) == 0.0
    states = [STATE_LOST if i < 2 else STATE_OK for i in range(500)]
    rec2 = record_from_positions(pts, states=states)
    assert compute_percent_lost(rec2) == pytest.approx(0.4)
    rec3 = record_from_positions(pts[:5], states=[STATE_LOST] * 5)
    assert compute_percent_lost(rec3) == 100.0


# ---------------------------------------------------------------- report


def test_report_single_cell():
    rep = build_report([RunRecord("seq0", "base", {"rmse": 0.125})], group="G")
    t = rep.table("rmse")
    assert t.averages() == [0.125]
    assert t.std_devs() == [0.0]
    assert t.best() == ("base", 0.125)


def test_report_missing_cells_excluded():
    runs = [
        RunRecord("d1", "A", {"rmse": 1.0}),
        RunRecord("d2", "A", {"rmse": 3.0}),
        RunRecord("d1", "B", {"rmse": 1.5}),
    ]
    rep = build_report(runs)
    t = rep.table("rmse")
    assert t.averages() == [2.0, 1.5]
    assert t.best() == ("B", 1.5)
    for text in (render_csv(rep), render_html(rep), render_latex(rep)):
        assert MISSING_CELL in text


def test_report_footers_recomputed_not_stored():
    rep = build_report([RunRecord("d1", "A", {"rmse": 1.0}),
                        RunRecord("d2", "A", {"rmse": 3.0})])
    t = rep.table("rmse")
    assert t.averages() == [2.0]
    t.cells[("d2", "A")] = 5.0
    assert t.averages() == [3.0]


def load_benchmark_tables():
    with open(DATA / "benchmark_tables.json") as f:
        return json.load(f)["tables"]


def report_from_table(tab):
    runs = []
    for row in tab["rows"]:
        dataset, values = row[0], row[1:]
        for preset, v in zip(tab["presets"], values):
            runs.append(RunRecord(dataset, preset, {tab["metric"]: v}))
    return build_report(runs, group=tab["group"])


def test_benchmark_footer_averages_and_best_rows():
    """Average and Best footer rows recompute from every table body."""
    tabs = load_benchmark_tables()
    assert len(tabs) == 9
    for tab in tabs:
        t = report_from_table(tab).table(tab["metric"])
        for got, want in zip(t.averages(), tab["footer"]["average"]):
            assert got == pytest.approx(want, abs=5e-6), (tab["group"], tab["metric"])
        best_p, best_v = t.best()
        assert best_p == tab["footer"]["best_preset"]
        assert best_v == pytest.approx(tab["footer"]["best_metric"], abs=5e-6)


def test_benchmark_std_dev_matches_population_oracle():
    """Std Dev rows follow the population (divide by N) convention."""
    for tab in load_benchmark_tables():
        t = report_from_table(tab).table(tab["metric"])
        body = np.array([row[1:] for row in tab["rows"]], dtype=float)
        oracle = np.sqrt(np.mean((body - body.mean(axis=0)) ** 2, axis=0))
        for got, want in zip(t.std_devs(), oracle):
            assert got == pytest.approx(want, abs=1e-12)


@pytest.mark.xfail(strict=True, reason="published Std Dev footers pool per-run "
                   "scatter that the displayed bodies do not carry; no function "
                   "of the body values reproduces them")
def test_benchmark_std_dev_matches_published_footers():
    for tab in load_benchmark_tables():
        t = report_from_table(tab).table(tab["metric"])
        for got, want in zip(t.std_devs(), tab["footer"]["std_dev"]):
            assert got == pytest.approx(want, abs=5e-6)


def test_render_csv_parses_back():
    rep = report_from_table(load_benchmark_tables()[0])
    rows = list(csv.reader(io.StringIO(render_csv(rep))))
    assert rows[0] == ["TUM: Table RMSE"]
    header = rows[1]
    assert header[0] == "Dataset"
    labels = [r[0] for r in rows if r]
    for footer in ("Average", "Std Dev", "Best (Average) Preset",
                   "Best (Average) Metric"):
        assert footer in labels


def test_render_latex_and_html_shape():
    rep = report_from_table(load_benchmark_tables()[3])
    tex = render_latex(rep)
    assert "\\begin{tabular}" in tex and "\\bottomrule" in tex
    assert "EUROC: Table RMSE" in tex
    assert "root\\_sift" in tex
    html = render_html(rep)
    assert "<table" in html and "</table>" in html
    assert html.count("<tr>") >= 13  # header + 9 datasets + 4 footer rows


def test_cell_formatting_matches_display_convention():
    rep = build_report([RunRecord("d", "A", {"rmse": 0.0}),
                        RunRecord("d2", "A", {"rmse": 1.55}),
                        RunRecord("d3", "A", {"rmse": 21.60014})])
    text = render_csv(rep)
    assert "0.0" in text.splitlines()[2]
    assert "1.55" in text
    assert "21.60014" in text
