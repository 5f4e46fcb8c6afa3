"""Running compliance judges over labeled dialogues.

Three judge modes:

``chat``
    One call per dialogue.  The judge sees the oracle document and the
    transcript and returns a guideline and a violation flag for every turn.
``reward-cls``
    A scalar reward model scores each conversation prefix ending at an agent
    turn.  A negative score means violated.
``reward-gen``
    A generative reward model labels each agent turn compliant or violated
    several times, and the majority wins.

Judges only ever see the oracle document, never the injected one.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

from policysim.agents import render_history
from policysim.errors import PolicySimError, PreconditionError
from policysim.gateway import GENERATION_TEMPERATURE, ChatRequest, Gateway, GatewayError, Message, Role
from policysim.llmjson import as_bool, extract_json, repair_request
from policysim.model import (
    GuidelineCategory,
    GuidelineDocument,
    GuidelineRef,
    IoFailure,
    LabeledDialogue,
    MalformedRecord,
    SchemaError,
    dumps_record,
    jsonl_lines,
    ref_from_dict,
    ref_to_dict,
)
from policysim.rng import derive_seed

log = logging.getLogger(__name__)

PROMPT_VERSION = "judge-v1"
DOC_OPEN = "<<GUIDELINES>>"
DOC_CLOSE = "<</GUIDELINES>>"


class JudgeMode(str, enum.Enum):
    CHAT = "chat"
    REWARD_CLS = "reward-cls"
    REWARD_GEN = "reward-gen"


class UnparseableJudgeOutput(PolicySimError):
    pass


@dataclass(frozen=True)
class TurnPrediction:
    guideline: GuidelineRef | None
    violated: bool
    unparseable: bool = False


@dataclass(frozen=True)
class JudgeRun:
    dialogue_id: str
    judge_id: str
    run_index: int
    predictions: tuple[TurnPrediction, ...]
    mode: JudgeMode = JudgeMode.CHAT
    raw_output: str = ""
    unparseable: bool = False
    error: str | None = None


# -- prompts -------------------------------------------------------------------

def render_document(doc: GuidelineDocument) -> str:
    """Canonical text layout: universal, numbered workflow phases, conditions."""
    lines = ["UNIVERSAL GUIDELINES (category: universal)"]
    lines += [f"- [{g.key}] {g.content}" for g in doc.universal]
    lines += ["", f"WORKFLOW (category: workflow) for intent: {doc.workflow.intent}"]
    lines += [f"{p.phase_index}. [{p.key}] {p.content}" for p in doc.workflow.phases]
    lines += ["", "CONDITION GUIDELINES (category: condition)"]
    lines += [f"- [{c.key}] {c.content}" for c in doc.conditions]
    return "\n".join(lines)


def guideline_section(prompt: str) -> str | None:
    """The document block embedded in a judge prompt, for audit checks."""
    start = prompt.find(DOC_OPEN)
    end = prompt.find(DOC_CLOSE)
    if start < 0 or end < start:
        return None
    return prompt[start + len(DOC_OPEN) + 1:end - 1]


def _doc_block(doc: GuidelineDocument) -> str:
    return f"{DOC_OPEN}\n{render_document(doc)}\n{DOC_CLOSE}"


def numbered_transcript(dialogue: LabeledDialogue) -> str:
    lines = []
    for i, t in enumerate(dialogue.turns, 1):
        lines.append(f"[Turn {i}] Agent: {t.assistant}")
        if t.user:
            lines.append(f"[Turn {i}] Customer: {t.user}")
    return "\n".join(lines)


CHAT_SYSTEM = ("You audit contact-center conversations for guideline compliance. "
               "Output JSON only.")

CHAT_PROMPT = (
    "{doc}\n\nCONVERSATION ({n} agent turns):\n{transcript}\n\n"
    "For EVERY agent turn, identify the single guideline that governs the agent's response "
    "(a workflow phase or a condition guideline) and whether the response violates it.\n"
    "Reply with a JSON array of exactly {n} objects, one per turn, in order:\n"
    "{schema}"
)
CHAT_SCHEMA = ('[{"turn": 1, "category": "workflow"|"condition", "key": "<guideline key>", '
               '"phase_index": <int for workflow, null for condition>, "violation": true|false}, ...]')

GEN_PROMPT = (
    "{doc}\n\nCONVERSATION SO FAR:\n{history}\n\n"
    "Consider only the final agent message. Is it compliant with the guideline document above, "
    "or does it violate it?\nReply with JSON {{\"label\": \"compliant\"|\"violated\"}}."
)

# hash of the prompt templates, cited in reports so results name the prompt
PROMPT_HASH = hashlib.sha256("\x1e".join(
    [PROMPT_VERSION, CHAT_SYSTEM, CHAT_PROMPT, CHAT_SCHEMA, GEN_PROMPT]).encode()).hexdigest()[:16]


# -- chat judges ---------------------------------------------------------------

def parse_turn_predictions(parsed: Any, n_turns: int) -> tuple[TurnPrediction, ...]:
    """Validate a chat judge's JSON against the per-turn schema.

    Raises ``ValueError`` naming the first problem.
    """
    if isinstance(parsed, dict):
        for key in ("turns", "predictions"):
            if isinstance(parsed.get(key), list):
                parsed = parsed[key]
                break
    if not isinstance(parsed, list):
        raise ValueError("expected a JSON array of per-turn objects")
    seen: dict[int, TurnPrediction] = {}
    for item in parsed:
        if not isinstance(item, dict):
            raise ValueError("each turn entry must be an object")
        turn = item.get("turn")
        if not isinstance(turn, int) or isinstance(turn, bool) or not 1 <= turn <= n_turns:
            raise ValueError(f"turn id {turn!r} outside 1..{n_turns}")
        if turn in seen:
            raise ValueError(f"turn {turn} appears twice")
        violated = as_bool(item.get("violation"))
        if violated is None:
            raise ValueError(f"turn {turn}: violation must be true or false")
        fields = {k: item.get(k) for k in ("category", "key", "phase_index")}
        if fields["category"] != GuidelineCategory.WORKFLOW.value:
            fields["phase_index"] = None
        try:
            ref = ref_from_dict(fields, where=f"turn {turn}")
        except SchemaError as exc:
            raise ValueError(str(exc)) from None
        seen[turn] = TurnPrediction(ref, violated)
    if len(seen) != n_turns:
        missing = sorted(set(range(1, n_turns + 1)) - set(seen))
        raise ValueError(f"expected {n_turns} turns, missing {missing}")
    return tuple(seen[i] for i in range(1, n_turns + 1))


def _oracle_of(dialogue: LabeledDialogue, doc: GuidelineDocument | None) -> GuidelineDocument:
    doc = doc if doc is not None else dialogue.oracle_document
    if doc.injection_map:
        raise PreconditionError("judges must be given the oracle document, which has no injections")
    return doc


def judge_conversation(gw: Gateway, dialogue: LabeledDialogue, doc: GuidelineDocument | None = None, *,
                       judge_id: str | None = None, run_index: int = 1, retries: int = 2,
                       seed: int = 0, temperature: float = GENERATION_TEMPERATURE) -> JudgeRun:
    """One chat-judge pass over ``dialogue``; repair prompts on schema failures.

    An output still invalid after ``retries`` repairs yields a run flagged
    unparseable rather than an exception.
    """
    doc = _oracle_of(dialogue, doc)
    n = dialogue.n_turns
    request = ChatRequest.single(
        CHAT_SYSTEM,
        CHAT_PROMPT.format(doc=_doc_block(doc), n=n, transcript=numbered_transcript(dialogue),
                           schema=CHAT_SCHEMA),
        temperature=temperature, tag="judge.chat",
        seed=derive_seed(seed, "judge", dialogue.dialogue_id, run_index) % 2**31,
        context={"dialogue_id": dialogue.dialogue_id, "n_turns": n, "run_index": run_index},
    )
    judge_id = judge_id or gw.provider_id
    req, outputs = request, []
    for _ in range(retries + 1):
        content = gw.complete(req).content
        outputs.append(content)
        try:
            preds = parse_turn_predictions(extract_json(content), n)
        except ValueError as exc:
            req = repair_request(request, content, f"{exc}. Required schema: {CHAT_SCHEMA}")
            continue
        return JudgeRun(dialogue.dialogue_id, judge_id, run_index, preds, JudgeMode.CHAT, content)
    return JudgeRun(dialogue.dialogue_id, judge_id, run_index, (), JudgeMode.CHAT,
                    "\n---\n".join(outputs), unparseable=True)


# -- reward models -------------------------------------------------------------

def _prefix_messages(dialogue: LabeledDialogue, i: int) -> tuple[Message, ...]:
    msgs = []
    for t in dialogue.turns[:i - 1]:
        msgs.append(Message(Role.ASSISTANT, t.assistant))
        msgs.append(Message(Role.USER, t.user or "(no reply)"))
    msgs.append(Message(Role.ASSISTANT, dialogue.turns[i - 1].assistant))
    return tuple(msgs)


def reward_classifier_eval(gw: Gateway, dialogue: LabeledDialogue, doc: GuidelineDocument | None = None, *,
                           judge_id: str | None = None, run_index: int = 1) -> JudgeRun:
    """Score each prefix ending at an agent turn; violated iff score < 0."""
    doc = _oracle_of(dialogue, doc)
    preds, raw, errors = [], [], []
    for i in range(1, dialogue.n_turns + 1):
        req = ChatRequest(_doc_block(doc), _prefix_messages(dialogue, i), tag="judge.reward_cls",
                          context={"dialogue_id": dialogue.dialogue_id, "turn_index": i})
        try:
            score = gw.score(req)
        except GatewayError as exc:
            errors.append(f"turn {i}: {exc}")
            preds.append(TurnPrediction(None, False, unparseable=True))
            raw.append("null")
            continue
        preds.append(TurnPrediction(None, score < 0))
        raw.append(repr(score))
    return JudgeRun(dialogue.dialogue_id, judge_id or gw.provider_id, run_index, tuple(preds),
                    JudgeMode.REWARD_CLS, json.dumps(raw), error="; ".join(errors) or None)


def parse_vote(text: str) -> bool | None:
    """True for violated, False for compliant, None to abstain."""
    parsed = extract_json(text)
    if isinstance(parsed, dict):
        label = parsed.get("label", parsed.get("verdict"))
        if isinstance(label, str):
            text = label
        else:
            v = as_bool(parsed.get("violated", parsed.get("violation")))
            if v is not None:
                return v
    low = text.lower()
    said_v, said_c = "violat" in low, "compliant" in low and "non-compliant" not in low
    if "non-compliant" in low:
        said_v = True
    if said_v != said_c:
        return said_v
    return None


def reward_generative_eval(gw: Gateway, dialogue: LabeledDialogue, doc: GuidelineDocument | None = None, *,
                           votes: int = 3, judge_id: str | None = None, run_index: int = 1,
                           seed: int = 0, temperature: float = GENERATION_TEMPERATURE) -> JudgeRun:
    """Label each agent turn by majority over ``votes`` independent calls.

    A vote that does not parse abstains; a turn with no strict majority
    among all ``votes`` is flagged unparseable.
    """
    if votes < 1 or votes % 2 == 0:
        raise PreconditionError("votes must be a positive odd number")
    doc = _oracle_of(dialogue, doc)
    block = _doc_block(doc)
    preds, raw = [], []
    for i in range(1, dialogue.n_turns + 1):
        history = render_history(dialogue.turns[:i - 1], trailing_agent=dialogue.turns[i - 1].assistant)
        tally = {True: 0, False: 0}
        outs = []
        for v in range(votes):
            req = ChatRequest.single(
                "You are a reward model judging agent compliance. Output JSON only.",
                GEN_PROMPT.format(doc=block, history=history), temperature=temperature,
                tag="judge.reward_gen",
                seed=derive_seed(seed, "vote", dialogue.dialogue_id, run_index, i, v) % 2**31,
                context={"dialogue_id": dialogue.dialogue_id, "turn_index": i, "vote": v})
            out = gw.complete(req).content
            outs.append(out)
            verdict = parse_vote(out)
            if verdict is not None:
                tally[verdict] += 1
        raw.append(outs)
        if tally[True] * 2 > votes:
            preds.append(TurnPrediction(None, True))
        elif tally[False] * 2 > votes:
            preds.append(TurnPrediction(None, False))
        else:
            preds.append(TurnPrediction(None, False, unparseable=True))
    return JudgeRun(dialogue.dialogue_id, judge_id or gw.provider_id, run_index, tuple(preds),
                    JudgeMode.REWARD_GEN, json.dumps(raw))


# -- benchmark -----------------------------------------------------------------

def run_benchmark(gw: Gateway, corpus: Sequence[LabeledDialogue], runs: int = 4, *,
                  mode: JudgeMode | str = JudgeMode.CHAT, judge_id: str | None = None,
                  votes: int = 3, seed: int = 0, workers: int = 1) -> list[JudgeRun]:
    """``runs`` independent judge runs per dialogue, ordered by dialogue then run.

    A gateway failure on one dialogue is recorded as an unparseable run and
    the benchmark continues.
    """
    if runs < 1:
        raise PreconditionError("runs must be positive")
    mode = JudgeMode(mode)
    judge_id = judge_id or gw.provider_id
    jobs = [(d, r) for d in corpus for r in range(1, runs + 1)]

    def one(job: tuple[LabeledDialogue, int]) -> JudgeRun:
        dlg, r = job
        try:
            if mode is JudgeMode.CHAT:
                return judge_conversation(gw, dlg, judge_id=judge_id, run_index=r, seed=seed)
            if mode is JudgeMode.REWARD_CLS:
                return reward_classifier_eval(gw, dlg, judge_id=judge_id, run_index=r)
            return reward_generative_eval(gw, dlg, votes=votes, judge_id=judge_id, run_index=r, seed=seed)
        except GatewayError as exc:
            log.warning("judge %s failed on %s run %d: %s", judge_id, dlg.dialogue_id, r, exc)
            return JudgeRun(dlg.dialogue_id, judge_id, r, (), mode, "", unparseable=True,
                            error=f"{type(exc).__name__}: {exc}")

    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        return list(ex.map(one, jobs))


# -- persistence ---------------------------------------------------------------

def prediction_to_dict(p: TurnPrediction) -> dict[str, Any]:
    out: dict[str, Any] = {"violated": p.violated}
    if p.guideline is not None:
        out["guideline"] = ref_to_dict(p.guideline)
    if p.unparseable:
        out["unparseable"] = True
    return out


def run_to_dict(run: JudgeRun) -> dict[str, Any]:
    out: dict[str, Any] = {
        "dialogue_id": run.dialogue_id, "judge_id": run.judge_id, "run_index": run.run_index,
        "mode": run.mode.value, "unparseable": run.unparseable, "prompt_hash": PROMPT_HASH,
        "predictions": [prediction_to_dict(p) for p in run.predictions], "raw_output": run.raw_output,
    }
    if run.error:
        out["error"] = run.error
    return out


def run_from_dict(d: Any) -> JudgeRun:
    try:
        preds = tuple(
            TurnPrediction(ref_from_dict(p["guideline"]) if "guideline" in p else None,
                           bool(p["violated"]), bool(p.get("unparseable", False)))
            for p in d["predictions"])
        return JudgeRun(d["dialogue_id"], d["judge_id"], int(d["run_index"]), preds,
                        JudgeMode(d["mode"]), d.get("raw_output", ""), bool(d.get("unparseable", False)),
                        d.get("error"))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad judge run record: {exc}") from exc


def save_runs(runs: Iterable[JudgeRun], path: str | Path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for run in runs:
                fh.write(dumps_record(run_to_dict(run)) + "\n")
    except OSError as exc:
        raise IoFailure(path, str(exc)) from exc


def load_runs(path: str | Path) -> list[JudgeRun]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(path, str(exc)) from exc
    out = []
    for no, line in jsonl_lines(text):
        try:
            out.append(run_from_dict(json.loads(line)))
        except (json.JSONDecodeError, SchemaError) as exc:
            raise MalformedRecord(no, str(exc)) from None
    return out
