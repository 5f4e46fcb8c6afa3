"""Shared fixtures: tiny guideline documents and scripted gateways."""

from __future__ import annotations

import json

import pytest

from policysim.gateway import AuditLog, Gateway, ScriptedProvider, ScriptEntry
from policysim.model import (
    Guideline,
    GuidelineCategory,
    GuidelineDocument,
    LabeledDialogue,
    Turn,
    Workflow,
)

W = GuidelineCategory.WORKFLOW


def make_workflow(wid: str = "change_flight", k: int = 4, intent: str = "change a flight") -> Workflow:
    phases = tuple(Guideline(f"{wid}__p{i}", f"Step {i} of {intent}: do thing {i}.", W, phase_index=i)
                   for i in range(1, k + 1))
    return Workflow(wid, intent, phases)


def make_doc(k: int = 4, conditions: int = 2, injected: dict | None = None) -> GuidelineDocument:
    universal = (Guideline("be_polite", "Stay polite.", GuidelineCategory.UNIVERSAL),)
    conds = tuple(Guideline.condition(f"cond_{j}", f"the caller mentions topic {j}", f"handle topic {j}")
                  for j in range(1, conditions + 1))
    return GuidelineDocument(universal, make_workflow(k=k), conds, injected or {})


def make_dialogue(labels, dialogue_id: str = "d1", domain: str = "airline",
                  doc: GuidelineDocument | None = None) -> LabeledDialogue:
    """Dialogue whose turns are placeholders and whose labels are ``labels``."""
    doc = doc or make_doc()
    turns = tuple(Turn(f"agent {i}", f"user {i}") for i in range(1, len(labels) + 1))
    oracle = GuidelineDocument(doc.universal, doc.workflow, doc.conditions, {})
    return LabeledDialogue(dialogue_id, domain, turns, tuple(labels), doc, oracle)


def scripted(*entries: ScriptEntry, provider_id: str = "scripted", audit: AuditLog | None = None,
             **kw) -> Gateway:
    """Gateway over a ScriptedProvider that never sleeps between retries."""
    return Gateway(ScriptedProvider(entries, provider_id=provider_id, **kw), audit=audit,
                   sleep=lambda s: None)


def js(obj) -> str:
    return json.dumps(obj)


@pytest.fixture
def doc4() -> GuidelineDocument:
    return make_doc(k=4)
