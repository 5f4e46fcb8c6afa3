import json

import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_dialogue, make_doc
from policysim.model import (
    Guideline,
    GuidelineCategory,
    GuidelineDocument,
    GuidelineRef,
    IoFailure,
    MalformedRecord,
    SchemaError,
    Turn,
    TurnLabel,
    VariantKind,
    dialogue_to_dict,
    load_corpus,
    save_corpus,
    slugify,
    validate_dialogue,
    validate_document,
)

W, C, U = GuidelineCategory.WORKFLOW, GuidelineCategory.CONDITION, GuidelineCategory.UNIVERSAL


def wref(doc, i):
    return doc.workflow.phases[i - 1].ref()


def test_well_formed_doc_has_no_findings():
    assert validate_document(make_doc(k=3)) == []


def test_duplicate_key_across_sections():
    doc = make_doc(k=3)
    clash = Guideline.condition("change_flight__p2", "x", "y")
    bad = GuidelineDocument(doc.universal, doc.workflow, doc.conditions + (clash,))
    findings = validate_document(bad)
    assert [f.kind for f in findings] == ["DuplicateKey"]
    assert findings[0].key == "change_flight__p2"


def test_dangling_injection():
    doc = make_doc(k=3, injected={"nope": VariantKind.WORKFLOW_MODIFIED})
    assert [f.kind for f in validate_document(doc)] == ["DanglingInjection"]


def test_condition_without_action_is_malformed():
    doc = make_doc(k=2)
    broken = Guideline("c", "When x", C, trigger="x")
    bad = GuidelineDocument(doc.universal, doc.workflow, (broken,))
    assert [f.kind for f in validate_document(bad)] == ["MalformedCondition"]


def test_phase_indices_must_be_contiguous():
    doc = make_doc(k=3)
    p = doc.workflow.phases
    gap = Guideline(p[2].key, p[2].content, W, phase_index=5)
    wf = type(doc.workflow)(doc.workflow.workflow_id, doc.workflow.intent, (p[0], p[1], gap))
    bad = GuidelineDocument(doc.universal, wf, doc.conditions)
    assert "MalformedWorkflow" in [f.kind for f in validate_document(bad)]


def test_validation_is_pure():
    doc = make_doc(k=3, injected={"nope": VariantKind.WORKFLOW_MODIFIED})
    assert validate_document(doc) == validate_document(doc)


def test_ref_requires_phase_iff_workflow():
    with pytest.raises(SchemaError):
        GuidelineRef(W, "k")
    with pytest.raises(SchemaError):
        GuidelineRef(C, "k", 2)
    GuidelineRef(C, "k")


def test_resolve_checks_category_and_phase():
    doc = make_doc(k=3)
    assert doc.resolve(GuidelineRef(W, "change_flight__p2", 2)) is not None
    assert doc.resolve(GuidelineRef(W, "change_flight__p2", 3)) is None
    assert doc.resolve(GuidelineRef(C, "change_flight__p2")) is None


def test_slugify():
    assert slugify("Verify Identity!") == "verify_identity"
    assert slugify("???") == "item"


def _dialogues(n):
    doc = make_doc(k=3, injected={"change_flight__p2": VariantKind.WORKFLOW_MODIFIED})
    out = []
    for j in range(n):
        labels = [TurnLabel(wref(doc, 1), False), TurnLabel(wref(doc, 2), True),
                  TurnLabel(GuidelineRef(C, "cond_1"), False)]
        out.append(make_dialogue(labels, dialogue_id=f"d{j}", doc=doc))
    return out


def test_corpus_round_trip(tmp_path):
    dlgs = _dialogues(5)
    path = tmp_path / "c.jsonl"
    save_corpus(dlgs, path)
    assert load_corpus(path) == dlgs
    assert len(path.read_text().splitlines()) == 5


def test_empty_corpus(tmp_path):
    path = tmp_path / "c.jsonl"
    save_corpus([], path)
    assert path.read_text() == ""
    assert load_corpus(path) == []


def test_turn_label_length_mismatch_is_malformed(tmp_path):
    d = dialogue_to_dict(_dialogues(1)[0])
    d["labels"] = d["labels"][:2]
    path = tmp_path / "c.jsonl"
    good = json.dumps(dialogue_to_dict(_dialogues(1)[0]))
    path.write_text(good + "\n" + json.dumps(d) + "\n")
    with pytest.raises(MalformedRecord) as ei:
        load_corpus(path)
    assert ei.value.line_no == 2


def test_unsound_label_is_malformed(tmp_path):
    d = dialogue_to_dict(_dialogues(1)[0])
    d["labels"][0]["violated"] = True
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps(d) + "\n")
    with pytest.raises(MalformedRecord):
        load_corpus(path)


def test_unknown_field_strict_vs_lenient(tmp_path):
    d = dialogue_to_dict(_dialogues(1)[0])
    d["extra"] = 1
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps(d) + "\n")
    with pytest.raises(MalformedRecord):
        load_corpus(path)
    assert len(load_corpus(path, strict=False)) == 1


def test_missing_file_is_io_failure(tmp_path):
    with pytest.raises(IoFailure):
        load_corpus(tmp_path / "absent.jsonl")


def test_validate_dialogue_turn_bound():
    dlg = _dialogues(1)[0]
    assert validate_dialogue(dlg, max_turns=3) == []
    assert [f.kind for f in validate_dialogue(dlg, max_turns=2)] == ["TooManyTurns"]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.text(min_size=1), st.text()), min_size=1, max_size=4))
def test_unicode_round_trip(tmp_path_factory, texts):
    doc = make_doc(k=1)
    turns = tuple(Turn(a, u) for a, u in texts)
    labels = tuple(TurnLabel(wref(doc, 1), False) for _ in texts)
    dlg = make_dialogue(labels, doc=doc)
    dlg = type(dlg)(dlg.dialogue_id, "航空 ✈", turns, labels, dlg.source_document, dlg.oracle_document)
    path = tmp_path_factory.mktemp("u") / "c.jsonl"
    save_corpus([dlg], path)
    assert load_corpus(path) == [dlg]
