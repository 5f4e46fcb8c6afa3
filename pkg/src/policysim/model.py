"""Guidelines, guideline documents, labeled dialogues, and their JSON forms.

Everything here is an immutable value type.  Documents and dialogues are
validated by reporting findings instead of raising, so callers decide what
is fatal.  The corpus format is JSONL, one dialogue per line.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from policysim.errors import PolicySimError


class GuidelineCategory(str, enum.Enum):
    UNIVERSAL = "universal"
    WORKFLOW = "workflow"
    CONDITION = "condition"


class VariantKind(str, enum.Enum):
    WORKFLOW_MODIFIED = "workflow_modified"
    CONDITION_OMITS_ACTION = "condition_omits_action"
    CONDITION_ADDS_CONFLICT = "condition_adds_conflict"


class MalformedRecord(PolicySimError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class IoFailure(PolicySimError):
    def __init__(self, path: str | Path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)


class SchemaError(PolicySimError, ValueError):
    """A dict did not match the expected JSON shape."""


_SLUG_RE = re.compile(r"[^a-z0-9]+")


def slugify(text: str) -> str:
    """Lowercase, underscore-separated key derived from free text."""
    slug = _SLUG_RE.sub("_", text.lower()).strip("_")
    return slug or "item"


def condition_text(trigger: str, action: str) -> str:
    return f"When {trigger.rstrip('. ')}, {action}"


@dataclass(frozen=True)
class Guideline:
    key: str
    content: str
    category: GuidelineCategory
    trigger: str | None = None
    action: str | None = None
    phase_index: int | None = None
    # workflow phase keys a condition guideline is grounded in
    grounded_in: tuple[str, ...] = ()

    @classmethod
    def condition(cls, key: str, trigger: str, action: str,
                  grounded_in: Iterable[str] = ()) -> "Guideline":
        return cls(key, condition_text(trigger, action), GuidelineCategory.CONDITION,
                   trigger=trigger, action=action, grounded_in=tuple(grounded_in))

    def ref(self) -> "GuidelineRef":
        return GuidelineRef(self.category, self.key,
                            self.phase_index if self.category is GuidelineCategory.WORKFLOW else None)


@dataclass(frozen=True)
class Workflow:
    workflow_id: str
    intent: str
    phases: tuple[Guideline, ...]

    def text(self) -> str:
        """Concatenated phase text; the operand for embedding similarity."""
        return "\n".join(f"{p.phase_index}. {p.content}" for p in self.phases)

    @property
    def keys(self) -> tuple[str, ...]:
        return tuple(p.key for p in self.phases)


@dataclass(frozen=True)
class GuidelineRef:
    category: GuidelineCategory
    key: str
    phase_index: int | None = None

    def __post_init__(self):
        is_wf = self.category is GuidelineCategory.WORKFLOW
        if is_wf != (self.phase_index is not None):
            raise SchemaError(
                f"phase_index must be given iff category is workflow: {self.category.value}/{self.key}"
            )


@dataclass(frozen=True)
class GuidelineDocument:
    universal: tuple[Guideline, ...]
    workflow: Workflow
    conditions: tuple[Guideline, ...]
    injection_map: Mapping[str, VariantKind] = field(default_factory=dict)

    def guidelines(self) -> Iterator[Guideline]:
        yield from self.universal
        yield from self.workflow.phases
        yield from self.conditions

    def get(self, key: str) -> Guideline | None:
        for g in self.guidelines():
            if g.key == key:
                return g
        return None

    def resolve(self, ref: GuidelineRef) -> Guideline | None:
        g = self.get(ref.key)
        if g is None or g.category is not ref.category:
            return None
        if ref.category is GuidelineCategory.WORKFLOW and g.phase_index != ref.phase_index:
            return None
        return g

    @property
    def injected_keys(self) -> tuple[str, ...]:
        return tuple(self.injection_map)


@dataclass(frozen=True)
class Turn:
    assistant: str
    user: str


@dataclass(frozen=True)
class TurnLabel:
    guideline: GuidelineRef
    violated: bool


@dataclass(frozen=True)
class LabeledDialogue:
    dialogue_id: str
    domain: str
    turns: tuple[Turn, ...]
    labels: tuple[TurnLabel, ...]
    source_document: GuidelineDocument
    oracle_document: GuidelineDocument

    @property
    def n_turns(self) -> int:
        return len(self.turns)

    @property
    def n_violations(self) -> int:
        return sum(lab.violated for lab in self.labels)


# -- validation ----------------------------------------------------------------

@dataclass(frozen=True)
class Finding:
    kind: str
    message: str
    key: str | None = None


def validate_document(doc: GuidelineDocument) -> list[Finding]:
    """Every invariant violation in ``doc``; an empty list means well-formed."""
    findings: list[Finding] = []
    seen: dict[str, str] = {}
    sections = (
        ("universal", doc.universal, GuidelineCategory.UNIVERSAL),
        ("workflow", doc.workflow.phases, GuidelineCategory.WORKFLOW),
        ("conditions", doc.conditions, GuidelineCategory.CONDITION),
    )
    for section, items, category in sections:
        for g in items:
            if not g.key:
                findings.append(Finding("EmptyKey", f"guideline without key in {section}"))
            elif g.key in seen:
                findings.append(Finding(
                    "DuplicateKey", f"key {g.key!r} in {section} already used in {seen[g.key]}", g.key))
            else:
                seen[g.key] = section
            if not g.content.strip():
                findings.append(Finding("EmptyContent", f"{g.key!r} has empty content", g.key))
            if g.category is not category:
                findings.append(Finding(
                    "WrongCategory", f"{g.key!r} is {g.category.value} but sits in {section}", g.key))
            has_pair = bool(g.trigger) and bool(g.action)
            if g.category is GuidelineCategory.CONDITION and not has_pair:
                findings.append(Finding("MalformedCondition", f"{g.key!r} lacks trigger or action", g.key))
            if g.category is not GuidelineCategory.CONDITION and (g.trigger or g.action):
                findings.append(Finding(
                    "MalformedCondition", f"{g.key!r} carries trigger/action but is not a condition", g.key))

    phases = doc.workflow.phases
    if not phases:
        findings.append(Finding("MalformedWorkflow", f"workflow {doc.workflow.workflow_id!r} has no phases"))
    indices = [p.phase_index for p in phases]
    if indices != list(range(1, len(phases) + 1)):
        findings.append(Finding(
            "MalformedWorkflow", f"phase indices {indices} are not contiguous from 1"))

    for key in doc.injection_map:
        if key not in seen:
            findings.append(Finding("DanglingInjection", f"injection_map names absent key {key!r}", key))
    return findings


def validate_dialogue(dialogue: LabeledDialogue, max_turns: int | None = None) -> list[Finding]:
    findings = [
        Finding(f.kind, f"source_document: {f.message}", f.key)
        for f in validate_document(dialogue.source_document)
    ]
    findings += [
        Finding(f.kind, f"oracle_document: {f.message}", f.key)
        for f in validate_document(dialogue.oracle_document)
    ]
    n = len(dialogue.turns)
    if n != len(dialogue.labels):
        findings.append(Finding("LengthMismatch", f"{n} turns but {len(dialogue.labels)} labels"))
    if n < 1:
        findings.append(Finding("EmptyDialogue", "dialogue has no turns"))
    if max_turns is not None and n > max_turns:
        findings.append(Finding("TooManyTurns", f"{n} turns exceeds maximum {max_turns}"))
    injected = dialogue.source_document.injection_map
    for i, lab in enumerate(dialogue.labels, 1):
        if dialogue.source_document.resolve(lab.guideline) is None:
            findings.append(Finding("UnresolvedLabel", f"turn {i} label does not resolve", lab.guideline.key))
        if lab.violated != (lab.guideline.key in injected):
            findings.append(Finding(
                "UnsoundLabel", f"turn {i}: violated={lab.violated} disagrees with injection map",
                lab.guideline.key))
    return findings


# -- JSON forms ----------------------------------------------------------------

def _check_fields(d: Any, required: set[str], optional: set[str], where: str, strict: bool) -> None:
    if not isinstance(d, dict):
        raise SchemaError(f"{where}: expected object, got {type(d).__name__}")
    missing = required - d.keys()
    if missing:
        raise SchemaError(f"{where}: missing fields {sorted(missing)}")
    if strict:
        extra = d.keys() - required - optional
        if extra:
            raise SchemaError(f"{where}: unknown fields {sorted(extra)}")


def _text(d: dict, name: str, where: str) -> str:
    v = d[name]
    if not isinstance(v, str):
        raise SchemaError(f"{where}.{name}: expected string")
    return v


def guideline_to_dict(g: Guideline) -> dict[str, Any]:
    out: dict[str, Any] = {"key": g.key, "content": g.content, "category": g.category.value}
    if g.trigger is not None:
        out["trigger"] = g.trigger
    if g.action is not None:
        out["action"] = g.action
    if g.phase_index is not None:
        out["phase_index"] = g.phase_index
    if g.grounded_in:
        out["grounded_in"] = list(g.grounded_in)
    return out


def guideline_from_dict(d: Any, strict: bool = True, where: str = "guideline") -> Guideline:
    _check_fields(d, {"key", "content", "category"},
                  {"trigger", "action", "phase_index", "grounded_in"}, where, strict)
    try:
        category = GuidelineCategory(d["category"])
    except ValueError:
        raise SchemaError(f"{where}.category: unknown value {d['category']!r}") from None
    phase = d.get("phase_index")
    if phase is not None and (not isinstance(phase, int) or isinstance(phase, bool)):
        raise SchemaError(f"{where}.phase_index: expected integer")
    return Guideline(
        key=_text(d, "key", where),
        content=_text(d, "content", where),
        category=category,
        trigger=d.get("trigger"),
        action=d.get("action"),
        phase_index=phase,
        grounded_in=tuple(d.get("grounded_in", ())),
    )


def workflow_to_dict(w: Workflow) -> dict[str, Any]:
    return {"workflow_id": w.workflow_id, "intent": w.intent,
            "phases": [guideline_to_dict(p) for p in w.phases]}


def workflow_from_dict(d: Any, strict: bool = True, where: str = "workflow") -> Workflow:
    _check_fields(d, {"workflow_id", "intent", "phases"}, set(), where, strict)
    if not isinstance(d["phases"], list):
        raise SchemaError(f"{where}.phases: expected array")
    return Workflow(
        workflow_id=_text(d, "workflow_id", where),
        intent=_text(d, "intent", where),
        phases=tuple(guideline_from_dict(p, strict, f"{where}.phases[{i}]")
                     for i, p in enumerate(d["phases"])),
    )


def document_to_dict(doc: GuidelineDocument) -> dict[str, Any]:
    return {
        "universal": [guideline_to_dict(g) for g in doc.universal],
        "workflow": workflow_to_dict(doc.workflow),
        "conditions": [guideline_to_dict(g) for g in doc.conditions],
        "injection_map": {k: v.value for k, v in doc.injection_map.items()},
    }


def document_from_dict(d: Any, strict: bool = True, where: str = "document") -> GuidelineDocument:
    _check_fields(d, {"universal", "workflow", "conditions", "injection_map"}, set(), where, strict)
    try:
        injection = {str(k): VariantKind(v) for k, v in d["injection_map"].items()}
    except (ValueError, AttributeError):
        raise SchemaError(f"{where}.injection_map: expected mapping key -> variant kind") from None
    return GuidelineDocument(
        universal=tuple(guideline_from_dict(g, strict, f"{where}.universal[{i}]")
                        for i, g in enumerate(d["universal"])),
        workflow=workflow_from_dict(d["workflow"], strict, f"{where}.workflow"),
        conditions=tuple(guideline_from_dict(g, strict, f"{where}.conditions[{i}]")
                         for i, g in enumerate(d["conditions"])),
        injection_map=injection,
    )


def ref_to_dict(ref: GuidelineRef) -> dict[str, Any]:
    out: dict[str, Any] = {"category": ref.category.value, "key": ref.key}
    if ref.phase_index is not None:
        out["phase_index"] = ref.phase_index
    return out


def ref_from_dict(d: dict, where: str = "ref") -> GuidelineRef:
    try:
        category = GuidelineCategory(d["category"])
    except (ValueError, KeyError):
        raise SchemaError(f"{where}.category: missing or unknown") from None
    key = d.get("key")
    if not isinstance(key, str) or not key:
        raise SchemaError(f"{where}.key: expected non-empty string")
    phase = d.get("phase_index")
    if phase is not None and (not isinstance(phase, int) or isinstance(phase, bool)):
        raise SchemaError(f"{where}.phase_index: expected integer")
    return GuidelineRef(category, key, phase)


def dialogue_to_dict(dlg: LabeledDialogue) -> dict[str, Any]:
    return {
        "dialogue_id": dlg.dialogue_id,
        "domain": dlg.domain,
        "turns": [{"assistant": t.assistant, "user": t.user} for t in dlg.turns],
        "labels": [{**ref_to_dict(lab.guideline), "violated": lab.violated} for lab in dlg.labels],
        "source_document": document_to_dict(dlg.source_document),
        "oracle_document": document_to_dict(dlg.oracle_document),
    }


_RECORD_FIELDS = {"dialogue_id", "domain", "turns", "labels", "source_document", "oracle_document"}


def dialogue_from_dict(d: Any, strict: bool = True) -> LabeledDialogue:
    _check_fields(d, _RECORD_FIELDS, set(), "record", strict)
    turns = []
    for i, t in enumerate(d["turns"]):
        _check_fields(t, {"assistant", "user"}, set(), f"turns[{i}]", strict)
        turns.append(Turn(_text(t, "assistant", f"turns[{i}]"), _text(t, "user", f"turns[{i}]")))
    labels = []
    for i, lab in enumerate(d["labels"]):
        where = f"labels[{i}]"
        _check_fields(lab, {"category", "key", "violated"}, {"phase_index"}, where, strict)
        if not isinstance(lab["violated"], bool):
            raise SchemaError(f"{where}.violated: expected boolean")
        labels.append(TurnLabel(ref_from_dict(lab, where), lab["violated"]))
    return LabeledDialogue(
        dialogue_id=_text(d, "dialogue_id", "record"),
        domain=_text(d, "domain", "record"),
        turns=tuple(turns),
        labels=tuple(labels),
        source_document=document_from_dict(d["source_document"], strict, "source_document"),
        oracle_document=document_from_dict(d["oracle_document"], strict, "oracle_document"),
    )


# -- corpus files --------------------------------------------------------------

def load_corpus(path: str | Path, strict: bool = True,
                max_turns: int | None = None) -> list[LabeledDialogue]:
    """Read a JSONL corpus, validating every record.

    ``strict`` rejects unknown fields; lenient mode ignores them.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(path, str(exc)) from exc
    out = []
    for line_no, line in jsonl_lines(text):
        try:
            dlg = dialogue_from_dict(json.loads(line), strict=strict)
        except (json.JSONDecodeError, SchemaError) as exc:
            raise MalformedRecord(line_no, str(exc)) from exc
        problems = validate_dialogue(dlg, max_turns)
        if problems:
            raise MalformedRecord(line_no, "; ".join(p.message for p in problems))
        out.append(dlg)
    return out


def jsonl_lines(text: str) -> Iterator[tuple[int, str]]:
    """(line number, line) pairs of a JSONL body.

    Splits on ``\n`` only: records are written with ``ensure_ascii=False``,
    so characters such as U+2028 may appear raw inside a record.
    """
    for no, line in enumerate(text.split("\n"), 1):
        if line.strip():
            yield no, line


def dumps_record(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def save_corpus(dialogues: Iterable[LabeledDialogue], path: str | Path) -> None:
    dialogues = list(dialogues)
    for dlg in dialogues:
        problems = validate_dialogue(dlg)
        if problems:
            raise SchemaError(f"{dlg.dialogue_id}: " + "; ".join(p.message for p in problems))
    body = "".join(dumps_record(dialogue_to_dict(d)) + "\n" for d in dialogues)
    try:
        Path(path).write_text(body, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(path, str(exc)) from exc
