"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""

import json
import math
import time

import numpy as np
import pytest

from builders import random_sessions, web_item
from caseval.agreement import RatingRecord, cohen_kappa, krippendorff_alpha, write_ratings
from caseval.baselines import PbmParams, RandomModel, RandomParams, dcg, fit_pbm, fit_random, fit_ubm
from caseval.cli import main
from caseval.evaluation import checksum, evaluate_models, make_trainer, pearson, sat_loglik, tq_fold
from caseval.features import extract_features, fit_normalization
from caseval.model import attractiveness, examination_prob, metric_utility
from caseval.simulator import SimConfig, simulate, simulate_pbm, simulate_with_truth
from caseval.training import ParamLayout, TrainConfig, fit, gradient, total_objective
from caseval.types import VARIANT_PRESETS, CasParams, ModelVariant, RatingHistogram, Session


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail

    return emit


def _central_difference(sessions, params, config, norms, h=1e-5):
    layout = ParamLayout.for_variant(config.variant)
    theta = layout.pack(params)
    out = np.zeros_like(theta)
    for i in range(len(theta)):
        step = np.zeros_like(theta)
        step[i] = h
        up = total_objective(sessions, layout.unpack(theta + step), config, norms)
        down = total_objective(sessions, layout.unpack(theta - step), config, norms)
        out[i] = (up - down) / (2 * h)
    return out


def test_1_gradient_correctness(report):
    start = time.perf_counter()
    worst = 0.0
    for name, variant in VARIANT_PRESETS.items():
        config = TrainConfig(variant=variant)
        layout = ParamLayout.for_variant(variant)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            sessions = random_sessions(rng, n=30, k=5)
            norms = fit_normalization(sessions)
            params = layout.unpack(rng.normal(0.0, 0.5, layout.size))
            g = gradient(sessions, params, config, norms)
            fd = _central_difference(sessions, params, config, norms)
            worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1.0))))
    elapsed = time.perf_counter() - start
    report(1, worst < 1e-5 and elapsed < 60, f"max rel err {worst:.2e}, {elapsed:.1f}s")


def test_2_parameter_recovery(report):
    start = time.perf_counter()
    config = SimConfig(n_sessions=50000, seed=2)
    sessions, truths, norms = simulate_with_truth(config)
    result = fit(sessions, TrainConfig(variant=ModelVariant(reg_lambda=0.0)), norms=norms)
    model = result.model
    exam_err, true_u, fit_u = [], [], []
    for s, t in zip(sessions, truths):
        pred = model.predict(s)
        exam_err.append(np.abs(pred.exam_probs - np.array(t.exam_probs)))
        true_u.append(t.expected_utility)
        fit_u.append(pred.utility)
    exam_mae = float(np.mean(np.concatenate(exam_err)))
    hists = {it.r_ratings.counts for s in sessions for it in s.items}
    attr_mae = float(
        np.mean(
            [
                abs(attractiveness(RatingHistogram(h), config.true_params) - attractiveness(RatingHistogram(h), result.params))
                for h in hists
            ]
        )
    )
    r = pearson(true_u, fit_u)
    elapsed = time.perf_counter() - start
    ok = exam_mae < 0.02 and attr_mae < 0.02 and r > 0.95 and elapsed < 300
    report(2, ok, f"exam MAE {exam_mae:.4f}, attr MAE {attr_mae:.4f} over {len(hists)} histograms, "
                  f"utility r {r:.4f}, {elapsed:.1f}s")


@pytest.fixture(scope="module")
def sat_folds():
    start = time.perf_counter()
    sessions = simulate(SimConfig(n_sessions=5000, seed=11))
    result = tq_fold(sessions, 5, 5, 0, make_trainer(["CAS", "CASnod", "CASnosat", "random"]), evaluate_models)
    scores = {n: np.array([o.models[n].sat_loglik for o in result.outcomes]) for n in ("CAS", "CASnod", "CASnosat", "random")}
    return scores, time.perf_counter() - start


def test_3_satisfaction_model_value(report, sat_folds):
    scores, elapsed = sat_folds
    ordered = int(np.sum((scores["CAS"] > scores["random"]) & (scores["random"] > scores["CASnosat"])))
    means = ", ".join(f"{k} {v.mean():.4f}" for k, v in scores.items() if k != "CASnod")
    report(3, ordered >= 20 and elapsed < 300, f"ordering held in {ordered}/25 folds ({means}), {elapsed:.1f}s")


def test_4_d_label_ablation(report, sat_folds):
    scores, _ = sat_folds
    assert any(t != 0 for t in SimConfig().true_params.tau_d)
    diff = float(np.mean(scores["CASnod"] - scores["CAS"]))
    report(4, diff < 0, f"mean paired CASnod - CAS sat loglik {diff:.5f}")


def test_5_em_recovery(report):
    start = time.perf_counter()
    truth = PbmParams(tuple(1.0 / (k + 1) for k in range(10)), (0.2, 0.4, 0.6, 0.8))
    sessions = simulate_pbm(truth, SimConfig(n_sessions=100000, seed=5))
    pbm_trace, ubm_trace = [], []
    pbm = fit_pbm(sessions, history=pbm_trace)
    ubm = fit_ubm(sessions, history=ubm_trace)
    g, tg = np.array(pbm.gamma), np.array(truth.gamma)
    ratio_err = float(np.max(np.abs(g / g[0] - tg / tg[0])))
    monotone = bool(np.all(np.diff(pbm_trace) >= 0) and np.all(np.diff(ubm_trace) >= 0))
    spread = max(max(row) - min(row) for row in ubm.gamma)
    elapsed = time.perf_counter() - start
    ok = ratio_err < 0.03 and monotone and spread < 0.05
    report(5, ok, f"gamma ratio err {ratio_err:.4f}, EM monotone {monotone}, UBM row spread {spread:.4f}, {elapsed:.1f}s")


def test_6_closed_form_fixtures(report):
    hist = {0: (1, 0, 0, 0), 2: (0, 0, 1, 0), 3: (0, 0, 0, 1)}
    serp = [web_item(k + 1, r=hist[b]) for k, b in enumerate([3, 2, 0])]
    d = dcg(serp)
    kappa = cohen_kappa([0, 0, 1, 1], [0, 1, 0, 1])
    perfect = [RatingRecord(w, f"i{j}", "R", j % 4) for w in "abc" for j in range(8)]
    alpha = krippendorff_alpha(perfect)
    rnd = RandomModel(RandomParams(p_click=0.3, p_sat=0.74))
    sat = [Session("a", "q", tuple(serp), True)]
    unsat = [Session("b", "q", tuple(serp), False)]
    ll_sat, ll_unsat = sat_loglik(rnd, sat), sat_loglik(rnd, unsat)
    fitted = fit_random(sat * 74 + unsat * 26).p_sat
    ok = (
        abs(d - 8.8928) < 1e-3
        and kappa == 0.0
        and alpha == 1.0
        and abs(ll_sat - math.log(0.74)) < 1e-9
        and abs(ll_unsat - math.log(0.26)) < 1e-9
        and abs(fitted - 0.74) < 1e-9
    )
    report(6, ok, f"DCG {d:.4f}, kappa {kappa}, alpha {alpha}, ln fixtures {ll_sat:.6f} {ll_unsat:.6f}")


def test_7_harness_integrity(report):
    sessions = simulate(SimConfig(n_sessions=120, seed=3))
    seen = []

    def train(train_set):
        seen.append(checksum(train_set))
        return make_trainer(["random", "DCG"])(train_set)

    a = tq_fold(sessions, 5, 5, 42, train, evaluate_models)
    b = tq_fold(sessions, 5, 5, 42, make_trainer(["random", "DCG"]), evaluate_models)
    by_id = {s.session_id: s for s in sessions}
    partitions = True
    for rep in range(5):
        folds = [o.session_ids for o in a.outcomes if o.repetition == rep]
        flat = [i for f in folds for i in f]
        partitions &= len(flat) == len(set(flat)) == len(sessions)
    refit = [o.train_checksum for o in a.outcomes] == seen
    complement = all(
        o.train_checksum == checksum([s for s in sessions if s.session_id not in set(o.session_ids)])
        and o.test_checksum == checksum([by_id[i] for i in o.session_ids])
        for o in a.outcomes
    )
    distinct = len(set(seen)) == 25
    identical = a.to_json() == b.to_json() and a.to_csv() == b.to_csv()
    ok = len(a.outcomes) == 25 and partitions and refit and complement and distinct and identical
    report(7, ok, f"{len(a.outcomes)} outcomes, partition {partitions}, refit checksums {refit and complement}, "
                  f"byte-identical {identical}")


def test_8_metric_consistency(report):
    rng = np.random.default_rng(8)
    variant = ModelVariant()
    worst = 0.0
    for k in (1, 2, 3):
        sessions = random_sessions(rng, n=1, k=k)
        norms = fit_normalization(random_sessions(rng, n=20, k=3))
        params = CasParams(
            tuple(rng.normal(0, 0.7, 17)),
            float(rng.normal()),
            tuple(rng.normal(0, 0.5, 4)),
            tuple(rng.normal(0, 0.5, 3)),
            tuple(rng.normal(0, 0.5, 4)),
            float(rng.normal()),
        )
        items = sessions[0].items
        eps = np.array([examination_prob(extract_features(it, variant, norms), params) for it in items])
        alpha = np.array([attractiveness(it.r_ratings, params) for it in items])
        u_d = np.array([it.d_ratings.expanded() @ np.array(params.tau_d) for it in items])
        u_r = np.array([it.r_ratings.expanded() @ np.array(params.tau_r) for it in items])
        n = 1_000_000
        examined = rng.random((n, k)) < eps
        clicked = examined & (rng.random((n, k)) < alpha)
        accrued = examined @ u_d + clicked @ u_r
        se = accrued.std(ddof=1) / math.sqrt(n)
        closed = metric_utility(items, params, variant, norms)
        worst = max(worst, abs(accrued.mean() - closed) / se)
    report(8, worst < 3.0, f"largest deviation {worst:.2f} standard errors")


def _planted_ratings(rng):
    n_items, honest, per_worker = 200, 40, 60
    truth = {kind: rng.integers(0, g, n_items) for kind, g in (("D", 3), ("R", 4))}
    source = "the quick brown fox jumps over the lazy dog near the river bank"
    recs = []

    def rate(worker, kind, items, grade_fn, quote="brown fox"):
        for j in items:
            recs.append(RatingRecord(worker, f"item{j}", kind, int(grade_fn(kind, j)), quote, source))

    def honest_grade(kind, j):
        n = 3 if kind == "D" else 4
        return truth[kind][j] if rng.random() < 0.8 else rng.integers(0, n)

    def random_grade(kind, j):
        return rng.integers(0, 3 if kind == "D" else 4)

    for kind in ("D", "R"):
        for w in range(honest):
            rate(f"honest{w}", kind, rng.choice(n_items, per_worker, replace=False), honest_grade)
        for w in range(4):
            rate(f"random{w}", kind, rng.choice(n_items, per_worker, replace=False), random_grade)
        for w in range(4):
            rate(f"quote{w}", kind, rng.choice(n_items, per_worker, replace=False), honest_grade, quote="not in the text")
        for w in range(4):
            rate(f"lazy{w}", kind, rng.choice(n_items, 2, replace=False), honest_grade)
    return recs, honest


def test_9_agreement_pipeline(report, tmp_path, capsys):
    recs, honest = _planted_ratings(np.random.default_rng(9))
    path = tmp_path / "ratings.jsonl"
    write_ratings(path, recs)
    code = main(["agreement", "--ratings", str(path), "--disagreement-threshold", "0.25", "--out", str(tmp_path / "a")])
    capsys.readouterr()
    out = json.loads((tmp_path / "a.report.json").read_text())
    ok = code == 0
    details = []
    for kind in ("D", "R"):
        removed = {w["worker_id"] for w in out["removed_workers"][kind]}
        planted = {f"{p}{w}" for p in ("random", "quote", "lazy") for w in range(4)}
        honest_removed = len([w for w in removed if w.startswith("honest")])
        ok &= planted <= removed and honest_removed <= 0.05 * honest
        details.append(f"{kind}: {len(planted & removed)}/12 planted, {honest_removed}/{honest} honest removed")
    header = (tmp_path / "a.table.csv").read_text().splitlines()[0]
    shaped = header == "label,pct_workers_removed,pct_ratings_removed,cohen_kappa,krippendorff_alpha"
    shaped &= [r["label"] for r in out["table"]] == ["D", "R"]
    report(9, ok and shaped, "; ".join(details) + f"; table shape {shaped}")
