import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_dialogue, make_doc
from policysim.judging import JudgeMode, JudgeRun, TurnPrediction
from policysim.metrics import (
    COLUMNS,
    ErrorMetric,
    ErrorTag,
    ErrorType,
    LengthMismatch,
    OrphanRun,
    aggregate,
    load_error_tags,
    load_report,
    render_report,
    report_from_dict,
    report_to_dict,
    save_error_tags,
    save_report,
    score_cla,
    score_relaxed,
    score_run,
    score_sga,
    score_vda,
)
from policysim.model import GuidelineCategory, GuidelineRef, MalformedRecord, TurnLabel

W, C = GuidelineCategory.WORKFLOW, GuidelineCategory.CONDITION
P1, P2, COND = GuidelineRef(W, "p1", 1), GuidelineRef(W, "p2", 2), GuidelineRef(C, "c1")
UNIVERSE = (P1, P2, COND)
# near misses: right key wrong phase, and a condition sharing a workflow key
DECOYS = (GuidelineRef(W, "p1", 2), GuidelineRef(C, "p2"), None)


def L(ref, v):
    return TurnLabel(ref, bool(v))


def P(ref, v, bad=False):
    return TurnPrediction(ref, bool(v), bad)


# -- worked examples -----------------------------------------------------------

def test_half_sga():
    labels = [L(P1, 0), L(P2, 0)]
    preds = [P(P1, 0), P(P1, 0)]
    assert score_sga(labels, preds) == 0.5
    assert score_vda(labels, preds) is None
    assert score_cla(labels, preds) is False


def test_sga_needs_not_violated_flag():
    assert score_sga([L(P1, 0)], [P(P1, 1)]) == 0.0


def test_half_vda_ignores_guideline():
    labels = [L(P1, 0), L(P2, 1), L(COND, 1)]
    preds = [P(P1, 0), P(None, 1), P(P1, 0)]
    assert score_vda(labels, preds) == 0.5
    assert score_sga(labels, preds) == 1.0


def test_wrong_phase_is_wrong_guideline():
    assert score_sga([L(P2, 0)], [P(GuidelineRef(W, "p2", 3), 0)]) == 0.0


def test_relaxed_flags_only():
    labels = [L(P1, 0), L(P2, 1), L(COND, 0)]
    preds = [P(None, 0), P(None, 1), P(None, 1)]
    s = score_relaxed(labels, preds)
    assert (s.sga, s.vda, s.cla) == (0.5, 1.0, False)


def test_length_mismatch():
    with pytest.raises(LengthMismatch):
        score_sga([L(P1, 0)], [])


def test_cla_violation_label_only():
    labels = [L(P1, 0), L(P2, 1)]
    preds = [P(COND, 0), P(None, 1)]
    assert score_cla(labels, preds) is False
    assert score_cla(labels, preds, violation_label_only=True) is True


# -- brute-force oracle ------------------------------------------------------------

def oracle(labels, preds, relaxed=False):
    """Plain re-statement of the three metrics, written without the library helpers."""
    def same(t, p):
        if p is None or t.category != p.category or t.key != p.key:
            return False
        return t.phase_index == p.phase_index if t.category == W else True

    c_hits = c_n = v_hits = v_n = 0
    all_ok = True
    for t, p in zip(labels, preds):
        flag_ok = (not p.unparseable) and p.violated == t.violated
        ref_ok = relaxed or same(t.guideline, p.guideline)
        if t.violated:
            v_n += 1
            v_hits += flag_ok
        else:
            c_n += 1
            c_hits += flag_ok and ref_ok
        all_ok = all_ok and flag_ok and ref_ok
    return (c_hits / c_n if c_n else None, v_hits / v_n if v_n else None, all_ok)


def random_case(rng):
    n = int(rng.integers(1, 9))
    labels = [L(UNIVERSE[rng.integers(3)], rng.random() < 0.3) for _ in range(n)]
    choices = UNIVERSE + DECOYS
    preds = []
    for t in labels:
        ref = t.guideline if rng.random() < 0.6 else choices[rng.integers(len(choices))]
        v = t.violated if rng.random() < 0.7 else not t.violated
        preds.append(P(ref, v, rng.random() < 0.05))
    return labels, preds


def test_against_brute_force_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(10_000):
        labels, preds = random_case(rng)
        sga, vda, cla = oracle(labels, preds)
        assert score_sga(labels, preds) == sga
        assert score_vda(labels, preds) == vda
        assert score_cla(labels, preds) is cla
        r = score_relaxed(labels, preds)
        assert (r.sga, r.vda, r.cla) == oracle(labels, preds, relaxed=True)


def test_metric_implications():
    rng = np.random.default_rng(7)
    for _ in range(3_000):
        labels, preds = random_case(rng)
        sga, vda, cla = score_sga(labels, preds), score_vda(labels, preds), score_cla(labels, preds)
        if cla:
            assert sga in (1.0, None) and vda in (1.0, None)
        if sga == 1.0 and vda in (1.0, None):
            # violated turns may still name the wrong guideline
            assert score_cla(labels, preds, violation_label_only=True)
        assert score_cla(labels, preds, violation_label_only=True) >= cla


@settings(max_examples=150, deadline=None)
@given(st.randoms(use_true_random=False))
def test_permutation_invariance(r):
    rng = np.random.default_rng(r.randint(0, 2**32 - 1))
    labels, preds = random_case(rng)
    order = list(range(len(labels)))
    r.shuffle(order)
    lp, pp = [labels[i] for i in order], [preds[i] for i in order]
    for fn in (score_sga, score_vda, score_cla):
        a, b = fn(labels, preds), fn(lp, pp)
        assert a == b or (a is not None and math.isclose(a, b))


# -- runs and aggregation ------------------------------------------------------

def dialogue(labels, did, domain="airline"):
    doc = make_doc(k=2)
    return make_dialogue(labels, dialogue_id=did, domain=domain, doc=doc)


def run(did, preds, judge="j", r=1, mode=JudgeMode.CHAT, bad=False):
    return JudgeRun(did, judge, r, tuple(preds), mode, unparseable=bad)


def test_unparseable_run_scores_zero_where_defined():
    d = dialogue([L(P1, 0), L(P2, 0)], "d")
    s = score_run(d, run("d", (), bad=True))
    assert (s.sga, s.vda, s.cla) == (0.0, None, False)


def test_reward_runs_score_relaxed_by_default():
    d = dialogue([L(P1, 0), L(P2, 1)], "d")
    r = run("d", [P(None, 0), P(None, 1)], mode=JudgeMode.REWARD_CLS)
    s = score_run(d, r)
    assert (s.sga, s.vda, s.cla) == (1.0, 1.0, True)
    assert score_run(d, r, relaxed=False).sga == 0.0


def test_cla_over_four_runs_is_half():
    d = dialogue([L(P1, 0)], "d")
    runs = [run("d", [P(P1, k % 2)], r=k + 1) for k in range(4)]
    assert aggregate(runs, [d]).row("j", "airline").cla == 0.5


def test_mean_of_conversation_means_and_undefined_excluded():
    d1 = dialogue([L(P1, 0), L(P2, 0)], "d1")  # SGA 1.0, VDA undefined
    d2 = dialogue([L(P1, 0), L(P2, 0), L(P2, 1)], "d2")  # SGA .5
    runs = [run("d1", [P(P1, 0), P(P2, 0)]),
            run("d2", [P(P1, 0), P(P1, 0), P(P2, 1)]), run("d2", [P(P1, 0), P(P1, 0), P(P2, 0)], r=2)]
    row = aggregate(runs, [d1, d2]).row("j", "airline")
    assert row.sga == pytest.approx(0.75)
    assert row.vda == pytest.approx(0.5)  # d2 only: runs 1 and 0
    assert (row.conversations, row.runs, row.compliant_turns, row.violated_turns) == (2, 3, 4, 1)


def test_rows_split_by_judge_and_domain():
    d1, d2 = dialogue([L(P1, 0)], "a", "airline"), dialogue([L(P1, 0)], "b", "bank")
    runs = [run("a", [P(P1, 0)], judge="x"), run("b", [P(P1, 1)], judge="x"), run("a", [P(P1, 1)], judge="y")]
    rep = aggregate(runs, [d1, d2])
    assert [(r.judge, r.domain) for r in rep.rows] == [("x", "airline"), ("x", "bank"), ("y", "airline")]
    assert rep.row("x", "bank").sga == 0.0
    assert "averaging" in rep.metadata


def test_orphan_run():
    with pytest.raises(OrphanRun):
        aggregate([run("ghost", [])], [dialogue([L(P1, 0)], "d")])


def test_aggregate_is_order_invariant():
    rng = np.random.default_rng(3)
    corpus, runs = [], []
    for i in range(6):
        labels, _ = random_case(rng)
        corpus.append(dialogue(labels, f"d{i}"))
        for r in range(1, 4):
            _, preds = random_case(rng)
            preds = (preds * 8)[:len(labels)]
            runs.append(run(f"d{i}", preds, r=r))
    a = aggregate(runs, corpus)
    b = aggregate(list(reversed(runs)), list(reversed(corpus)))
    for x, y in zip(a.rows, b.rows):
        for f in ("sga", "vda", "cla"):
            assert getattr(x, f) == pytest.approx(getattr(y, f))


# -- rendering -----------------------------------------------------------------

def report():
    d = dialogue([L(P1, 0), L(P2, 1)], "d")
    return aggregate([run("d", [P(P1, 0), P(None, 0)])], [d])


def test_csv_and_table():
    csv_text = render_report(report(), "csv")
    head, row = csv_text.strip().split("\n")
    assert head.split(",") == list(COLUMNS)
    assert row.split(",")[2:5] == ["100.00", "0.00", "0.00"]
    table = render_report(report(), "table")
    assert "SGA %" in table and "100.00" in table
    with pytest.raises(ValueError):
        render_report(report(), "xml")


def test_json_round_trip(tmp_path):
    rep = report()
    assert report_from_dict(json.loads(render_report(rep, "json"))) == report_from_dict(report_to_dict(rep))
    save_report(rep, tmp_path / "r.json")
    assert load_report(tmp_path / "r.json").rows == rep.rows


def test_undefined_rendered_as_na():
    d = dialogue([L(P1, 0)], "d")
    assert "n/a" in render_report(aggregate([run("d", [P(P1, 0)])], [d]), "csv")


def test_error_tags_round_trip(tmp_path):
    tags = [ErrorTag("d1", 2, ErrorMetric.VDA, ErrorType.TYPE3, "missed it"),
            ErrorTag("d1", 1, ErrorMetric.SGA, ErrorType.TYPE1)]
    save_error_tags(tags, tmp_path / "t.jsonl")
    assert load_error_tags(tmp_path / "t.jsonl") == tags
    (tmp_path / "bad.jsonl").write_text('{"dialogue_id": "d", "turn": 1, "metric": "SGA", "error_type": "Type9"}\n')
    with pytest.raises(MalformedRecord):
        load_error_tags(tmp_path / "bad.jsonl")
