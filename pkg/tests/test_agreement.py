import json

import krippendorff
import numpy as np
import pytest

from caseval.agreement import (
    FilterPolicy,
    RatingRecord,
    aggregate_histograms,
    agreement_report,
    average_pairwise_kappa,
    cohen_kappa,
    filter_spammers,
    krippendorff_alpha,
    quote_ok,
    read_ratings,
    worker_kappas,
    write_ratings,
)
from caseval.types import SessionFormatError

# reliability data with missing values; published alphas are 0.743 nominal, 0.815 ordinal
NAN = None
TEXTBOOK = {
    "A": [1, 2, 3, 3, 2, 1, 4, 1, 2, NAN, NAN, NAN],
    "B": [1, 2, 3, 3, 2, 2, 4, 1, 2, 5, NAN, 3],
    "C": [NAN, 3, 3, 3, 2, 3, 4, 2, 2, 5, 1, NAN],
    "D": [1, 2, 3, 3, 2, 4, 4, 1, 2, 5, 1, NAN],
}


def _records(table, kind="R"):
    return [
        RatingRecord(w, f"i{j}", kind, g)
        for w, row in table.items()
        for j, g in enumerate(row)
        if g is not None
    ]


def _matrix(table):
    return np.array([[np.nan if g is None else g for g in row] for row in table.values()], dtype=float)


def test_kappa_examples():
    assert cohen_kappa([0, 1, 2, 3], [0, 1, 2, 3]) == 1.0
    assert cohen_kappa([0, 0, 1, 1], [0, 1, 0, 1]) == 0.0
    assert cohen_kappa([2, 2, 2], [2, 2, 2]) == 1.0
    assert cohen_kappa([], []) is None
    # p_o = 0.7, p_e = 0.5
    a = [1] * 5 + [0] * 5
    b = [1, 1, 1, 1, 0, 0, 0, 0, 1, 1]
    assert cohen_kappa(a, b) == pytest.approx((0.7 - 0.5) / 0.5)


def test_kappa_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.integers(0, 4, 20), rng.integers(0, 4, 20)
        k = cohen_kappa(list(a), list(b))
        assert k == pytest.approx(cohen_kappa(list(b), list(a)))
        assert -1.0 <= k <= 1.0


def test_alpha_textbook_values():
    recs = _records(TEXTBOOK)
    assert krippendorff_alpha(recs, "nominal") == pytest.approx(0.743, abs=5e-4)
    assert krippendorff_alpha(recs, "ordinal") == pytest.approx(0.815, abs=5e-4)


@pytest.mark.parametrize("metric", ["nominal", "ordinal"])
def test_alpha_matches_reference_package(metric):
    rng = np.random.default_rng(1)
    for _ in range(20):
        truth = rng.integers(0, 4, 15)
        table = {}
        for w in range(5):
            row = np.where(rng.random(15) < 0.7, truth, rng.integers(0, 4, 15))
            table[f"w{w}"] = [int(g) if rng.random() > 0.2 else None for g in row]
        ours = krippendorff_alpha(_records(table), metric)
        ref = krippendorff.alpha(_matrix(table), level_of_measurement=metric)
        assert ours == pytest.approx(ref, abs=1e-9)


def test_alpha_edge_cases():
    assert krippendorff_alpha(_records({"a": [1, 2, 3]})) is None
    perfect = _records({"a": [0, 1, 2, 3], "b": [0, 1, 2, 3]})
    assert krippendorff_alpha(perfect) == 1.0
    with pytest.raises(ValueError):
        krippendorff_alpha(perfect, "ratio")


def test_nominal_alpha_invariant_to_grade_relabeling():
    rng = np.random.default_rng(2)
    table = {f"w{w}": [int(g) for g in rng.integers(0, 4, 12)] for w in range(4)}
    perm = {0: 2, 1: 3, 2: 0, 3: 1}
    relabeled = {w: [perm[g] for g in row] for w, row in table.items()}
    assert krippendorff_alpha(_records(relabeled)) == pytest.approx(krippendorff_alpha(_records(table)), abs=1e-12)


def test_pairwise_kappa_and_worker_kappas():
    table = {"a": [0, 1, 2, 3], "b": [0, 1, 2, 3], "c": [3, 2, 1, 0]}
    recs = _records(table)
    # pairs: ab=1, ac=bc=-1/3
    assert average_pairwise_kappa(recs) == pytest.approx((1 - 2 / 3) / 3)
    wk = worker_kappas(recs)
    assert wk["a"] == pytest.approx((1 - 1 / 3) / 2)
    assert wk["c"] == pytest.approx(-1 / 3)
    assert average_pairwise_kappa(_records({"solo": [1, 2]})) is None


def test_quote_rule():
    assert quote_ok(RatingRecord("w", "i", "R", 1, "the  Answer", "Here is THE answer."))
    assert not quote_ok(RatingRecord("w", "i", "R", 1, "made up", "Here is the answer."))
    assert quote_ok(RatingRecord("w", "i", "R", 1, None, "text"))
    assert quote_ok(RatingRecord("w", "i", "R", 1, "text", None))


def test_min_ratings_filter():
    recs = _records({"a": [0, 1, 2], "b": [0, 1, None], "c": [1, 1, 1]})
    res = filter_spammers(recs, FilterPolicy(min_ratings=3))
    assert res.removed["R"] == {"b": ["min_ratings"]}
    assert {r.worker_id for r in res.kept} == {"a", "c"}
    assert filter_spammers(recs, FilterPolicy(min_ratings=2)).removed["R"] == {}


def test_quote_filter_removes_all_of_a_workers_ratings():
    recs = _records({"a": [0, 1, 2], "b": [0, 1, 2]})
    recs.append(RatingRecord("b", "i9", "R", 1, "invented", "real source"))
    res = filter_spammers(recs, FilterPolicy(min_ratings=1))
    assert res.removed["R"] == {"b": ["quote"]}
    assert not any(r.worker_id == "b" for r in res.kept)
    assert filter_spammers(recs, FilterPolicy(min_ratings=1, require_quote=False)).removed["R"] == {}


def test_allowlist_protects_a_worker():
    recs = _records({"a": [0], "b": [0, 1, 2]})
    res = filter_spammers(recs, FilterPolicy(min_ratings=3, allowlist=frozenset({"a"})))
    assert res.removed["R"] == {}


def test_kinds_are_filtered_separately():
    recs = _records({"a": [0, 1, 2]}, "R") + _records({"a": [0]}, "D")
    res = filter_spammers(recs, FilterPolicy(min_ratings=3))
    assert res.removed_workers("D") == {"a"} and res.removed_workers("R") == set()
    assert {r.label_kind for r in res.kept} == {"R"}


def _planted(rng, honest=8, spammers=2, items=40):
    truth = rng.integers(0, 4, items)
    recs = []
    for w in range(honest):
        for j in range(items):
            g = truth[j] if rng.random() < 0.85 else rng.integers(0, 4)
            recs.append(RatingRecord(f"h{w}", f"i{j}", "R", int(g)))
    for w in range(spammers):
        for j in range(items):
            recs.append(RatingRecord(f"s{w}", f"i{j}", "R", int(rng.integers(0, 4))))
    return recs


def test_disagreement_filter_finds_planted_spammers_and_is_idempotent():
    recs = _planted(np.random.default_rng(3))
    policy = FilterPolicy(disagreement_threshold=0.3)
    res = filter_spammers(recs, policy)
    assert res.removed_workers("R") == {"s0", "s1"}
    assert all(rs == ["disagreement"] for rs in res.removed["R"].values())
    again = filter_spammers(res.kept, policy)
    assert again.kept == res.kept
    assert again.removed["R"] == {}


def test_no_threshold_means_no_disagreement_removals():
    res = filter_spammers(_planted(np.random.default_rng(4)), FilterPolicy())
    assert res.removed["R"] == {}


def test_filtering_does_not_lower_agreement_on_planted_data():
    recs = _planted(np.random.default_rng(5))
    report, _ = agreement_report(recs, FilterPolicy(disagreement_threshold=0.3))
    raw, _ = agreement_report(recs, FilterPolicy())
    r_filtered = report.rows[1]
    assert r_filtered.label_kind == "R"
    assert r_filtered.kappa > raw.rows[1].kappa
    assert r_filtered.alpha > raw.rows[1].alpha


def test_report_shape():
    recs = _planted(np.random.default_rng(6))
    report, _ = agreement_report(recs, FilterPolicy(disagreement_threshold=0.3), "ordinal")
    d = json.loads(json.dumps(report.to_dict()))
    assert [row["label"] for row in d["table"]] == ["D", "R"]
    r = d["table"][1]
    assert r["pct_workers_removed"] == pytest.approx(20.0)
    assert r["pct_ratings_removed"] == pytest.approx(20.0)
    # no D ratings at all
    assert d["table"][0]["pct_workers_removed"] is None and d["table"][0]["cohen_kappa"] is None
    csv = report.to_csv().splitlines()
    assert csv[0] == "label,pct_workers_removed,pct_ratings_removed,cohen_kappa,krippendorff_alpha"
    assert csv[1] == "D,,,,"
    assert len(csv) == 3


def test_histogram_aggregation():
    recs = [
        RatingRecord("a", "x", "D", 2),
        RatingRecord("b", "x", "D", 2),
        RatingRecord("a", "x", "R", 0),
        RatingRecord("c", "y", "R", 3),
    ]
    assert aggregate_histograms(recs) == {
        "x": {"d_ratings": [0, 0, 2], "r_ratings": [1, 0, 0, 0]},
        "y": {"d_ratings": [0, 0, 0], "r_ratings": [0, 0, 0, 1]},
    }


def test_ratings_io(tmp_path):
    recs = _planted(np.random.default_rng(7), honest=2, spammers=1, items=3)
    recs.append(RatingRecord("q", "z", "D", 1, "quote", "source"))
    path = tmp_path / "r.jsonl"
    write_ratings(path, recs)
    assert read_ratings(path) == recs
    path.write_text(path.read_text() + '{"worker_id": "a", "item_id": "b", "label_kind": "D", "grade": 7}\n')
    with pytest.raises(SessionFormatError) as exc:
        read_ratings(path)
    assert exc.value.line == len(recs) + 1
