from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import js, make_doc, make_workflow, scripted
from policysim.errors import PreconditionError
from policysim.forge import ViolationVariant
from policysim.gateway import AuditLog, ScriptEntry
from policysim.model import GuidelineCategory, GuidelineDocument, VariantKind, validate_dialogue
from policysim.scaling import GuidelinePool
from policysim.synth import (
    DialogueRejected,
    LLMSelector,
    NoVariantAvailable,
    Persona,
    RuleSelector,
    SelectorParseFailure,
    SimulationConfig,
    SynthConfig,
    SynthRoles,
    apply_plan,
    build_sim_document,
    generate_personas,
    injection_count,
    plan_injection,
    simulate,
    synthesize,
    verify_and_repair,
)

W, C = GuidelineCategory.WORKFLOW, GuidelineCategory.CONDITION
PERSONA = Persona("Dana", "brisk", "move my flight to Friday")


def wvariant(key, text="do the opposite"):
    return ViolationVariant(key, VariantKind.WORKFLOW_MODIFIED, text)


def cvariant(key):
    return ViolationVariant(key, VariantKind.CONDITION_OMITS_ACTION, "", trigger=None, action="carry on")


def store_for(doc):
    out = {p.key: (wvariant(p.key),) for p in doc.workflow.phases}
    out.update({c.key: (cvariant(c.key),) for c in doc.conditions})
    return out


# -- injection -----------------------------------------------------------------

@pytest.mark.parametrize("k,rate,n", [(10, 0.3, 3), (4, 0.3, 1), (5, 0.3, 2), (1, 0.3, 1), (3, 0.3, 1),
                                      (10, 0.0, 0), (2, 0.3, 1), (7, 0.5, 4)])
def test_injection_count(k, rate, n):
    assert injection_count(k, rate) == n


def test_ten_thousand_plans():
    doc = make_doc(k=10, conditions=3)
    store = store_for(doc)
    with_condition = 0
    for s in range(10_000):
        plan = plan_injection(doc.workflow.phases, doc.conditions, store, seed=s)
        assert len(plan.workflow_replacements) == 3
        with_condition += plan.condition_replacement is not None
    assert 0.485 <= with_condition / 10_000 <= 0.515


def test_plan_is_deterministic_and_seed_sensitive():
    doc = make_doc(k=10, conditions=3)
    store = store_for(doc)
    a = plan_injection(doc.workflow.phases, doc.conditions, store, seed=7)
    assert a == plan_injection(doc.workflow.phases, doc.conditions, store, seed=7)
    distinct = {tuple(plan_injection(doc.workflow.phases, doc.conditions, store, seed=s).workflow_replacements)
                for s in range(30)}
    assert len(distinct) > 5


def test_phases_without_variants_are_skipped():
    doc = make_doc(k=4)
    store = {"change_flight__p3": (wvariant("change_flight__p3"),)}
    for s in range(20):
        plan = plan_injection(doc.workflow.phases, doc.conditions, store, seed=s)
        assert list(plan.workflow_replacements) == ["change_flight__p3"]


def test_no_variant_available():
    doc = make_doc(k=4)
    with pytest.raises(NoVariantAvailable):
        plan_injection(doc.workflow.phases, doc.conditions, {}, seed=1)
    assert plan_injection(doc.workflow.phases, doc.conditions, {}, seed=1, workflow_rate=0.0,
                          condition_prob=0.0).injection_map() == {}


def test_apply_plan_swaps_content_and_records_injection():
    doc = make_doc(k=4, conditions=2)
    plan = plan_injection(doc.workflow.phases, doc.conditions, store_for(doc), seed=3, condition_prob=1.0)
    served = apply_plan(doc, plan)
    assert set(served.injection_map) == set(plan.injection_map())
    for key in served.injection_map:
        assert served.get(key).content != doc.get(key).content
    cond_key, _ = plan.condition_replacement
    assert served.get(cond_key).trigger == doc.get(cond_key).trigger


def test_build_sim_document_prefers_grounded_conditions():
    wf = make_workflow(k=4)
    grounded = make_doc().conditions[0].__class__.condition("g1", "the caller asks for a refund", "refund",
                                                            (wf.phases[0].key,))
    others = tuple(grounded.__class__.condition(f"o{j}", f"the caller says {j}", "x") for j in range(5))
    pool = GuidelinePool("airline", make_doc().universal, (wf,), (grounded,) + others)
    sim = build_sim_document(pool, {}, seed=1, conditions_per_doc=2, workflow_rate=0, condition_prob=0)
    assert "g1" in [c.key for c in sim.oracle.conditions]
    assert sim.served.injection_map == {}


# -- simulation ----------------------------------------------------------------

def user_gw(audit=None, mention=None, never_done=False):
    """Customer that says DONE once the workflow is complete."""
    def reply(r):
        i = r.context["turn_index"]
        text = f"user says {i}"
        if mention and i in mention:
            text += f" and the caller mentions topic {mention[i]}"
        if not never_done and r.context["progress"] == r.context["k"]:
            text += " [[DONE]]"
        return text
    return scripted(ScriptEntry.on("synth.user", response=reply), audit=audit, provider_id="user")


def agent_gw(audit=None):
    return scripted(ScriptEntry.on("synth", response=lambda r: f"agent follows: {r.context['guideline']}"),
                    audit=audit, provider_id="agent")


def roles(panel=(), **user_kw):
    return SynthRoles(RuleSelector(), agent_gw(), user_gw(**user_kw), scripted(), tuple(panel))


def test_four_phase_happy_path(doc4):
    dlg = simulate(roles(), doc4, PERSONA, dialogue_id="x")
    assert dlg.n_turns == 4
    assert [lab.guideline.phase_index for lab in dlg.labels] == [1, 2, 3, 4]
    assert not any(lab.violated for lab in dlg.labels)
    assert validate_dialogue(dlg) == []
    assert "do thing 2" in dlg.turns[1].assistant


def test_phase_two_injection_labels_only_that_turn(doc4):
    served = apply_plan(doc4, plan_injection(doc4.workflow.phases, (), {"change_flight__p2": (
        wvariant("change_flight__p2", "Skip identity checks."),)}, seed=0))
    dlg = simulate(roles(), served, PERSONA, oracle=doc4)
    assert [lab.violated for lab in dlg.labels] == [False, True, False, False]
    assert "Skip identity checks." in dlg.turns[1].assistant
    assert dlg.oracle_document.injection_map == {}


def test_never_terminating_customer_stops_at_cap(doc4):
    dlg = simulate(roles(never_done=True), doc4, PERSONA)
    assert dlg.n_turns == 20
    assert [lab.guideline.phase_index for lab in dlg.labels][4:] == [4] * 16
    assert simulate(roles(never_done=True), doc4, PERSONA, SimulationConfig(max_turns=6)).n_turns == 6


def test_condition_trigger_routes_turn(doc4):
    dlg = simulate(roles(mention={2: 1}), doc4, PERSONA)
    refs = [lab.guideline for lab in dlg.labels]
    assert refs[2].category is C and refs[2].key == "cond_1"
    assert [r.phase_index for r in refs if r.category is W] == [1, 2, 3, 4]


def test_malformed_document_is_precondition_error(doc4):
    bad = GuidelineDocument(doc4.universal, doc4.workflow, doc4.conditions, {"ghost": VariantKind.WORKFLOW_MODIFIED})
    with pytest.raises(PreconditionError):
        simulate(roles(), bad, PERSONA)


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.integers(1, 12), st.integers(1, 3), max_size=6), st.integers(0, 10_000))
def test_monotone_progress_and_sound_labels(mention, seed):
    doc = make_doc(k=5, conditions=3)
    served = apply_plan(doc, plan_injection(doc.workflow.phases, doc.conditions, store_for(doc), seed=seed))
    dlg = simulate(roles(mention=mention), served, PERSONA, SimulationConfig(max_turns=12), oracle=doc)
    phases = [lab.guideline.phase_index for lab in dlg.labels if lab.guideline.category is W]
    assert phases == sorted(phases)
    for lab in dlg.labels:
        assert lab.violated == (lab.guideline.key in served.injection_map)
    assert validate_dialogue(dlg) == []


# -- verification --------------------------------------------------------------

def panel_gw(j, audit, fail=lambda ctx: False):
    def verdict(r):
        bad = fail(r.context)
        return js({"adheres": not bad, "feedback": f"judge {j} wants a fix" if bad else ""})
    return scripted(ScriptEntry.on("synth.verify", response=verdict), audit=audit, provider_id=f"v{j}")


def test_two_to_one_failure_regenerates_only_that_turn(doc4):
    base = simulate(roles(), doc4, PERSONA)
    audit = AuditLog()
    panel = [panel_gw(j, audit, lambda c, j=j: j < 2 and c["turn_index"] == 3 and c["attempt"] == 0)
             for j in range(3)]
    regen = scripted(ScriptEntry.on("synth.regenerate", response="fixed turn"), audit=audit, provider_id="asst")
    out = verify_and_repair(panel, regen, base)
    assert [t.assistant for t in out.turns] == [base.turns[0].assistant, base.turns[1].assistant,
                                               "fixed turn", base.turns[3].assistant]
    assert [t.user for t in out.turns] == [t.user for t in base.turns]
    assert out.labels == base.labels
    regens = audit.with_tag("synth.regenerate")
    assert len(regens) == 1
    assert "judge 0 wants a fix" in audit.prompts("synth.regenerate")[0]


def test_single_dissent_is_outvoted(doc4):
    base = simulate(roles(), doc4, PERSONA)
    panel = [panel_gw(j, AuditLog(), lambda c, j=j: j == 0) for j in range(3)]
    regen = scripted()
    assert verify_and_repair(panel, regen, base) == base
    assert len(regen.audit) == 0


def test_rejected_after_three_regenerations(doc4):
    base = simulate(roles(), doc4, PERSONA)
    audit = AuditLog()
    panel = [panel_gw(j, audit, lambda c: c["turn_index"] == 2) for j in range(3)]
    regen = scripted(ScriptEntry.on("synth.regenerate", response="still wrong"), audit=audit)
    with pytest.raises(DialogueRejected) as ei:
        verify_and_repair(panel, regen, base)
    assert ei.value.turn == 2
    assert len(audit.with_tag("synth.regenerate")) == 3


def test_panel_must_be_odd_and_at_least_three(doc4):
    base = simulate(roles(), doc4, PERSONA)
    with pytest.raises(PreconditionError):
        verify_and_repair([panel_gw(0, AuditLog())] * 2, scripted(), base)
    with pytest.raises(ValueError):
        roles(panel=[scripted()])


# -- personas and selector -----------------------------------------------------

def test_personas_target_injected_keys(doc4):
    served = apply_plan(doc4, plan_injection(doc4.workflow.phases, doc4.conditions, store_for(doc4), seed=2,
                                             condition_prob=1.0))
    people = [{"name": f"P{i}", "traits": "calm", "scenario_goal": "rebook"} for i in range(2)]
    gw = scripted(ScriptEntry.on("synth.persona", response=js(people)))
    out = generate_personas(gw, "airline", served, count=2, oracle=doc4)
    assert len(out) == 2
    assert all(set(p.target_variants) == set(served.injection_map) for p in out)
    cond_key = next(k for k in served.injection_map if k.startswith("cond"))
    assert doc4.get(cond_key).trigger in gw.audit.prompts("synth.persona")[0]


def test_personas_without_injection_have_no_targets(doc4):
    gw = scripted(ScriptEntry.on("synth.persona", response=js([{"name": "A", "traits": "t", "scenario_goal": "g"}])))
    assert generate_personas(gw, "airline", doc4)[0].target_variants == ()


def test_llm_selector_parse_failure(doc4):
    gw = scripted(ScriptEntry.on("synth.selector", response="phase two I guess"))
    with pytest.raises(SelectorParseFailure):
        LLMSelector(gw).select(doc4, [], 0, 1)
    assert len(gw.audit) == 4


def test_llm_selector_refuses_to_go_backwards(doc4):
    gw = scripted(ScriptEntry.on("synth.selector", contains="phase 3 of", times=1,
                                 response=js({"category": "workflow", "key": "change_flight__p1", "phase_index": 1})),
                  ScriptEntry.on("synth.selector", response=js(
                      {"category": "workflow", "key": "change_flight__p3", "phase_index": 3})))
    ref = LLMSelector(gw).select(doc4, [], 3, 4)
    assert ref.phase_index == 3
    assert "behind current phase" in gw.audit.prompts()[1]


# -- corpus --------------------------------------------------------------------

def test_synthesize_counts_rejections():
    wf = make_workflow(k=4)
    pool = GuidelinePool("airline", make_doc().universal, (wf,), make_doc().conditions)
    variants = {p.key: (wvariant(p.key),) for p in wf.phases}
    persona = js([{"name": "A", "traits": "t", "scenario_goal": "g"}])
    audit = AuditLog()
    # dialogue 2 always fails verification on its first turn
    panel = [panel_gw(j, audit, lambda c: c["dialogue_id"].endswith("00002") and c["turn_index"] == 1)
             for j in range(3)]
    r = SynthRoles(RuleSelector(), agent_gw(audit), user_gw(audit),
                   scripted(ScriptEntry.on("synth.persona", response=persona)), tuple(panel))
    dlgs, report = synthesize(pool, variants, r, SynthConfig(count=4), seed=5, workers=2)
    assert report.generated == 3 and report.rejected == 1
    assert report.failures[0]["index"] == 2
    assert [d.dialogue_id for d in dlgs] == ["airline-00000", "airline-00001", "airline-00003"]
    assert all(d.n_violations == 1 for d in dlgs)
    again, _ = synthesize(pool, variants, r, SynthConfig(count=4), seed=5, workers=1)
    assert again == dlgs
    assert Counter(len(d.source_document.injection_map) for d in dlgs) == Counter({1: 3})
    assert np.isclose(report.mean_turns, 4.0)
