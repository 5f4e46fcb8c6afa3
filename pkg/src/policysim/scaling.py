"""Grow a per-domain guideline pool from seeds and keep it diverse.

Pipeline for one domain: new intents, workflow variants per intent, the
judge-and-refine quality loop, similarity-based deduplication of workflows,
then condition guidelines grounded in the surviving workflow phases.
Universal guidelines pass through untouched.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from policysim.errors import PolicySimError, PreconditionError
from policysim.gateway import GENERATION_TEMPERATURE, ChatRequest, Gateway, cosine
from policysim.llmjson import OutputRejected, ask_json, as_bool, extract_json
from policysim.model import (
    Guideline,
    GuidelineCategory,
    IoFailure,
    SchemaError,
    Workflow,
    guideline_from_dict,
    guideline_to_dict,
    slugify,
    workflow_from_dict,
    workflow_to_dict,
)

log = logging.getLogger(__name__)


class GenerationExhausted(PolicySimError):
    pass


class MalformedWorkflow(PolicySimError):
    pass


class MalformedGuideline(PolicySimError):
    pass


class SimilarityParseFailure(PolicySimError):
    pass


@dataclass(frozen=True)
class SimilarityConfig:
    alpha: float = 0.5
    tau: float = 0.8
    max_rewrites: int = 3

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0 or not 0.0 <= self.tau <= 1.0:
            raise ValueError("alpha and tau must lie in [0, 1]")
        if self.max_rewrites < 1:
            raise ValueError("max_rewrites must be positive")


@dataclass(frozen=True)
class GuidelinePool:
    domain: str
    universal: tuple[Guideline, ...] = ()
    workflows: tuple[Workflow, ...] = ()
    conditions: tuple[Guideline, ...] = ()
    # workflow_id / condition key -> "seed" | "generated" | "refined:<it>" | "rewritten"
    provenance: Mapping[str, str] = field(default_factory=dict)

    def keys(self) -> set[str]:
        out = {g.key for g in self.universal} | {g.key for g in self.conditions}
        for w in self.workflows:
            out.update(w.keys)
        return out

    def workflow(self, workflow_id: str) -> Workflow:
        for w in self.workflows:
            if w.workflow_id == workflow_id:
                return w
        raise KeyError(workflow_id)

    def phase(self, key: str) -> Guideline | None:
        for w in self.workflows:
            for p in w.phases:
                if p.key == key:
                    return p
        return None

    def oracle(self, key: str) -> Guideline | None:
        """A workflow phase or condition guideline by key."""
        found = self.phase(key)
        if found is None:
            found = next((c for c in self.conditions if c.key == key), None)
        return found


def pool_to_dict(pool: GuidelinePool) -> dict[str, Any]:
    return {
        "domain": pool.domain,
        "universal": [guideline_to_dict(g) for g in pool.universal],
        "workflows": [workflow_to_dict(w) for w in pool.workflows],
        "conditions": [guideline_to_dict(g) for g in pool.conditions],
        "provenance": dict(pool.provenance),
    }


def pool_from_dict(d: Mapping[str, Any], domain: str | None = None) -> GuidelinePool:
    for k in ("universal", "workflows", "conditions"):
        if k not in d:
            raise SchemaError(f"pool file lacks top-level key {k!r}")
    workflows = tuple(workflow_from_dict(w, strict=False) for w in d["workflows"])
    provenance = dict(d.get("provenance") or {})
    for w in workflows:
        provenance.setdefault(w.workflow_id, "seed")
    conditions = tuple(guideline_from_dict(g, strict=False) for g in d["conditions"])
    for c in conditions:
        provenance.setdefault(c.key, "seed")
    return GuidelinePool(
        domain=domain or d.get("domain", ""),
        universal=tuple(guideline_from_dict(g, strict=False) for g in d["universal"]),
        workflows=workflows,
        conditions=conditions,
        provenance=provenance,
    )


def load_pool(path: str | Path, domain: str | None = None) -> GuidelinePool:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise IoFailure(path, str(exc)) from exc
    return pool_from_dict(data, domain)


def save_pool(pool: GuidelinePool, path: str | Path) -> None:
    Path(path).write_text(json.dumps(pool_to_dict(pool), indent=2, ensure_ascii=False) + "\n",
                          encoding="utf-8")


def workflow_hash(w: Workflow) -> str:
    return hashlib.sha256(w.text().encode("utf-8")).hexdigest()


def _norm(text: str) -> str:
    return " ".join(text.lower().split())


def _render_workflow(w: Workflow) -> str:
    return f"[{w.workflow_id}] intent: {w.intent}\n" + w.text()


def _unique(base: str, taken: set[str]) -> str:
    key, n = base, 2
    while key in taken:
        key = f"{base}_{n}"
        n += 1
    taken.add(key)
    return key


# -- intents -------------------------------------------------------------------

INTENT_PROMPT = (
    "You design contact-center guidelines for the {domain} domain. Customers contact "
    "the center with different intents. Examples of existing intents:\n{seeds}\n\n"
    "Propose {count} NEW customer intents for this domain, distinct from the examples "
    "and from each other. Reply with a JSON array of {count} short intent labels."
)


def generate_intents(gw: Gateway, domain: str, seed_intents: Sequence[str], count: int = 10,
                     retries: int = 3) -> list[str]:
    """``count`` new intents from one model call; duplicate-laden replies are retried."""
    if not seed_intents:
        raise PreconditionError("generate_intents needs at least one seed intent")
    if count < 1:
        raise PreconditionError("count must be positive")
    seeds_norm = {_norm(s) for s in seed_intents}

    def validate(parsed: Any) -> list[str]:
        if isinstance(parsed, dict):
            parsed = parsed.get("intents")
        if not isinstance(parsed, list) or not all(isinstance(x, str) and x.strip() for x in parsed):
            raise OutputRejected("expected a JSON array of intent strings")
        seen: set[str] = set()
        for x in parsed:
            n = _norm(x)
            if n in seeds_norm:
                raise OutputRejected(f"intent {x!r} repeats a seed intent")
            if n in seen:
                raise OutputRejected(f"intent {x!r} is listed twice")
            seen.add(n)
        if len(parsed) < count:
            raise OutputRejected(f"expected {count} intents, got {len(parsed)}")
        return [x.strip() for x in parsed[:count]]

    req = ChatRequest.single(
        "You are a careful domain expert. Output JSON only.",
        INTENT_PROMPT.format(domain=domain, seeds="\n".join(f"- {s}" for s in seed_intents), count=count),
        temperature=GENERATION_TEMPERATURE, tag="scale.intents",
        context={"domain": domain, "seeds": list(seed_intents), "count": count},
    )
    return ask_json(gw, req, validate, retries,
                    lambda reason, _: GenerationExhausted(f"intent generation failed: {reason}"))


# -- workflows -----------------------------------------------------------------

WORKFLOW_PROMPT = (
    "Write an agent workflow for the intent \"{intent}\" in the {domain} domain: an ordered "
    "list of phases, each a concrete instruction the agent must follow in one reply.\n"
    "{prior}"
    "Reply with JSON: {{\"phases\": [{{\"name\": \"...\", \"instruction\": \"...\"}}, ...]}}"
)


def _prior_block(prior: Sequence[Workflow]) -> str:
    if not prior:
        return ""
    body = "\n\n".join(_render_workflow(w) for w in prior)
    return ("Existing workflows for this intent are listed below. Yours must differ from "
            "all of them in procedure, required fields and phrasing:\n" + body + "\n\n")


def parse_workflow(parsed: Any, workflow_id: str, intent: str) -> Workflow:
    """Model JSON to a :class:`Workflow`; phase keys derive from phase names."""
    if isinstance(parsed, dict):
        parsed = parsed.get("phases")
    if not isinstance(parsed, list) or not parsed:
        raise OutputRejected("workflow must have a non-empty 'phases' array")
    taken: set[str] = set()
    phases = []
    for i, item in enumerate(parsed, 1):
        if isinstance(item, str):
            name, text = f"phase {i}", item
        elif isinstance(item, dict):
            name = item.get("name") or f"phase {i}"
            text = item.get("instruction") or item.get("content") or ""
        else:
            raise OutputRejected(f"phase {i} is neither an object nor a string")
        if not isinstance(text, str) or not text.strip():
            raise OutputRejected(f"phase {i} has no instruction text")
        key = _unique(f"{workflow_id}__{slugify(str(name))}", taken)
        phases.append(Guideline(key, text.strip(), GuidelineCategory.WORKFLOW, phase_index=i))
    return Workflow(workflow_id, intent, tuple(phases))


def generate_workflow_variants(gw: Gateway, intent: str, existing: Sequence[Workflow],
                               count: int = 3, domain: str = "", retries: int = 3,
                               taken_ids: Iterable[str] = ()) -> list[Workflow]:
    """``count`` workflows for ``intent``, each prompted with every earlier one."""
    taken = set(taken_ids) | {w.workflow_id for w in existing}
    base = slugify(intent)
    out: list[Workflow] = []
    for _ in range(count):
        prior = [*existing, *out]
        wid = _unique(f"{base}_v{len(prior) + 1}", taken)
        req = ChatRequest.single(
            "You write precise, realistic contact-center workflows. Output JSON only.",
            WORKFLOW_PROMPT.format(intent=intent, domain=domain or "given", prior=_prior_block(prior)),
            temperature=GENERATION_TEMPERATURE, tag="scale.workflow",
            context={"intent": intent, "domain": domain, "workflow_id": wid,
                     "variant": len(prior) + 1, "prior": [w.workflow_id for w in prior]},
        )
        out.append(ask_json(gw, req, lambda p, wid=wid: parse_workflow(p, wid, intent), retries,
                            lambda reason, _: MalformedWorkflow(f"{wid}: {reason}")))
    return out


# -- conditions ----------------------------------------------------------------

CONDITION_PROMPT = (
    "Workflow for intent \"{intent}\":\n{workflow}\n\n"
    "Write {count} condition guidelines for this workflow. Each names a trigger (a specific "
    "user behaviour that can occur during one of the phases above) and the action the agent "
    "must take when it occurs. Ground each in the phase keys where the trigger can arise.\n"
    "Phase keys: {keys}\n"
    "Reply with a JSON array of objects {{\"name\", \"trigger\", \"action\", \"grounded_in\": [phase keys]}}."
)


def generate_condition_guidelines(gw: Gateway, pool: GuidelinePool, per_workflow: int = 2,
                                  retries: int = 3,
                                  workflows: Sequence[Workflow] | None = None) -> list[Guideline]:
    """Condition guidelines whose triggers are grounded in existing workflow phases."""
    targets = list(pool.workflows if workflows is None else workflows)
    if not targets:
        raise PreconditionError("condition generation needs at least one workflow")
    taken = pool.keys()
    out: list[Guideline] = []
    for w in targets:
        keys = w.keys

        def validate(parsed: Any, w=w, keys=keys) -> list[dict]:
            if isinstance(parsed, dict):
                parsed = parsed.get("conditions", [parsed])
            if not isinstance(parsed, list) or not parsed:
                raise OutputRejected("expected a non-empty JSON array")
            rows = []
            for i, item in enumerate(parsed):
                if not isinstance(item, dict):
                    raise OutputRejected(f"item {i} is not an object")
                trigger, action = item.get("trigger"), item.get("action")
                if not isinstance(trigger, str) or not trigger.strip():
                    raise OutputRejected(f"item {i} has no trigger")
                if not isinstance(action, str) or not action.strip():
                    raise OutputRejected(f"item {i} has no action")
                grounded = []
                for g in item.get("grounded_in") or []:
                    if isinstance(g, int) and 1 <= g <= len(keys):
                        g = keys[g - 1]
                    if g not in keys:
                        raise OutputRejected(f"item {i} is grounded in unknown phase {g!r}")
                    grounded.append(g)
                if not grounded:
                    raise OutputRejected(f"item {i} is not grounded in any phase")
                rows.append({"name": str(item.get("name") or trigger), "trigger": trigger.strip(),
                             "action": action.strip(), "grounded_in": grounded})
            return rows

        req = ChatRequest.single(
            "You write contact-center condition guidelines. Output JSON only.",
            CONDITION_PROMPT.format(intent=w.intent, workflow=w.text(), count=per_workflow,
                                    keys=", ".join(keys)),
            temperature=GENERATION_TEMPERATURE, tag="scale.conditions",
            context={"workflow": workflow_to_dict(w), "count": per_workflow},
        )
        rows = ask_json(gw, req, validate, retries,
                        lambda reason, _: MalformedGuideline(f"{w.workflow_id}: {reason}"))
        for row in rows:
            key = _unique(slugify(row["name"]), taken)
            out.append(Guideline.condition(key, row["trigger"], row["action"], row["grounded_in"]))
    return out


# -- judge and refine ----------------------------------------------------------

@dataclass(frozen=True)
class RefineRecord:
    iteration: int
    pass_rate_overall: float
    pass_rate_nonoverlap: float
    pass_rate_nonconflict: float
    selected: bool = False


@dataclass(frozen=True)
class RefineTrace:
    records: tuple[RefineRecord, ...]

    @property
    def selected(self) -> RefineRecord:
        return next(r for r in self.records if r.selected)

    def to_dict(self) -> dict[str, Any]:
        return {"records": [asdict(r) for r in self.records]}


@dataclass(frozen=True)
class QualityVerdict:
    non_overlapping: bool
    non_conflicting: bool
    reason: str


QUALITY_PROMPT = (
    "Assess the workflow below against the rest of the guideline pool.\n"
    "non_overlapping: the workflow is distinct in scope from every other workflow.\n"
    "non_conflicting: none of its instructions contradict each other, the other workflows, "
    "or the condition guidelines.\n\n"
    "WORKFLOW UNDER REVIEW:\n{workflow}\n\nOTHER WORKFLOWS:\n{others}\n\nCONDITIONS:\n{conditions}\n\n"
    "Reply with JSON {{\"non_overlapping\": bool, \"non_conflicting\": bool, \"reason\": \"...\"}}."
)

REFINE_PROMPT = (
    "Revise this workflow so it is non-overlapping with the other workflows and contains no "
    "conflicting instructions. Reviewer feedback:\n{feedback}\n\n"
    "WORKFLOW:\n{workflow}\n\nOTHER WORKFLOWS:\n{others}\n\n"
    "Keep the same intent. Reply with JSON {{\"phases\": [{{\"name\", \"instruction\"}}, ...]}}."
)


def _quality_verdict(gw: Gateway, w: Workflow, pool: GuidelinePool, iteration: int,
                     judge_index: int) -> QualityVerdict:
    others = "\n\n".join(_render_workflow(o) for o in pool.workflows if o.workflow_id != w.workflow_id)
    req = ChatRequest.single(
        "You are a strict reviewer of contact-center guidelines. Output JSON only.",
        QUALITY_PROMPT.format(workflow=_render_workflow(w), others=others or "(none)",
                              conditions="\n".join(c.content for c in pool.conditions) or "(none)"),
        tag="scale.refine_judge",
        context={"workflow_id": w.workflow_id, "iteration": iteration, "judge": judge_index,
                 "workflow": workflow_to_dict(w)},
    )
    parsed = extract_json(gw.complete(req).content)
    if isinstance(parsed, dict):
        ov, cf = as_bool(parsed.get("non_overlapping")), as_bool(parsed.get("non_conflicting"))
        if ov is not None and cf is not None:
            return QualityVerdict(ov, cf, str(parsed.get("reason", "")))
    return QualityVerdict(False, False, "judge output could not be parsed")


def judge_and_refine(pool: GuidelinePool, judges: Sequence[Gateway], refiner: Gateway,
                     iterations: int = 10, workers: int = 1,
                     retries: int = 3) -> tuple[GuidelinePool, RefineTrace]:
    """Iterated two-judge review with refinement of failing workflows.

    Each iteration judges the current pool, records pass rates, then rewrites
    every failing workflow from the judges' reasons.  The pool snapshot that
    scored the best overall pass rate is returned (ties go to the earliest).
    Iteration stops early once every workflow passes, since later rounds
    would judge an unchanged pool.
    """
    if len(judges) < 2:
        raise PreconditionError("judge_and_refine needs two independent judges")
    if iterations < 1:
        raise PreconditionError("iterations must be positive")
    current = pool
    snapshots: list[GuidelinePool] = []
    rows: list[tuple[float, float, float]] = []
    for it in range(1, iterations + 1):
        jobs = [(w, j) for w in current.workflows for j in range(len(judges[:2]))]
        with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
            verdicts = list(ex.map(lambda wj: _quality_verdict(judges[wj[1]], wj[0], current, it, wj[1]),
                                   jobs))
        per_wf: dict[str, list[QualityVerdict]] = {}
        for (w, _), v in zip(jobs, verdicts):
            per_wf.setdefault(w.workflow_id, []).append(v)
        n = max(1, len(current.workflows))
        ok_overlap = {wid for wid, vs in per_wf.items() if all(v.non_overlapping for v in vs)}
        ok_conflict = {wid for wid, vs in per_wf.items() if all(v.non_conflicting for v in vs)}
        passing = ok_overlap & ok_conflict
        rows.append((len(passing) / n, len(ok_overlap) / n, len(ok_conflict) / n))
        snapshots.append(current)
        failing = [w for w in current.workflows if w.workflow_id not in passing]
        if not failing or it == iterations:
            break
        revised = {}
        for w in failing:
            feedback = "\n".join(f"- judge {i + 1}: {v.reason}" for i, v in enumerate(per_wf[w.workflow_id]))
            others = "\n\n".join(_render_workflow(o) for o in current.workflows
                                 if o.workflow_id != w.workflow_id)
            req = ChatRequest.single(
                "You revise contact-center workflows. Output JSON only.",
                REFINE_PROMPT.format(feedback=feedback, workflow=_render_workflow(w),
                                     others=others or "(none)"),
                temperature=GENERATION_TEMPERATURE, tag="scale.refine",
                context={"workflow": workflow_to_dict(w), "iteration": it, "feedback": feedback},
            )
            revised[w.workflow_id] = ask_json(
                refiner, req, lambda p, w=w: parse_workflow(p, w.workflow_id, w.intent), retries,
                lambda reason, _, w=w: MalformedWorkflow(f"{w.workflow_id}: {reason}"))
        prov = dict(current.provenance)
        prov.update({wid: f"refined:{it}" for wid in revised})
        current = replace(current, provenance=prov,
                          workflows=tuple(revised.get(w.workflow_id, w) for w in current.workflows))
    best = int(np.argmax([r[0] for r in rows]))  # argmax returns the first maximum
    trace = RefineTrace(tuple(
        RefineRecord(i + 1, *r, selected=(i == best)) for i, r in enumerate(rows)))
    return snapshots[best], trace


# -- similarity and dedup ------------------------------------------------------

SIMILARITY_PROMPT = (
    "Rate how similar these two contact-center workflows are in procedure and scope, as an "
    "integer from 0 (unrelated) to 100 (the same workflow).\n\nA:\n{a}\n\nB:\n{b}\n\n"
    "Reply with the integer only."
)


def parse_similarity(text: str) -> float | None:
    parsed = extract_json(text)
    if isinstance(parsed, dict):
        parsed = parsed.get("similarity", parsed.get("score"))
    if isinstance(parsed, (int, float)) and not isinstance(parsed, bool):
        value = float(parsed)
    else:
        m = re.search(r"-?\d+(?:\.\d+)?", text or "")
        if m is None:
            return None
        value = float(m.group())
    return min(1.0, max(0.0, value / 100.0))


class BlendedSimilarity:
    """Embedding cosine blended with a model similarity score, memoized.

    ``alpha * emb + (1 - alpha) * llm`` with both terms clamped to [0, 1].
    Pairs are put in a canonical order first, so the score is symmetric.
    Memo keys are workflow content hashes: a rewritten workflow gets fresh rows.
    """

    def __init__(self, embedder: Gateway, judge: Gateway, cfg: SimilarityConfig = SimilarityConfig(),
                 retries: int = 2):
        self.embedder = embedder
        self.judge = judge
        self.cfg = cfg
        self.retries = retries
        self._emb: dict[str, Any] = {}
        self._memo: dict[tuple[str, str], tuple[float, float]] = {}

    def _embedding(self, w: Workflow):
        h = workflow_hash(w)
        if h not in self._emb:
            self._emb[h] = self.embedder.embed([w.text()], tag="scale.embed")[0]
        return self._emb[h]

    def _llm(self, a: Workflow, b: Workflow) -> float:
        req = ChatRequest.single(
            "You compare workflows. Reply with one integer.",
            SIMILARITY_PROMPT.format(a=a.text(), b=b.text()), tag="scale.similarity",
            context={"a": workflow_to_dict(a), "b": workflow_to_dict(b)},
        )
        for _ in range(self.retries + 1):
            value = parse_similarity(self.judge.complete(req).content)
            if value is not None:
                return value
        raise SimilarityParseFailure(f"no similarity score for {a.workflow_id} vs {b.workflow_id}")

    def components(self, a: Workflow, b: Workflow) -> tuple[float, float]:
        ha, hb = workflow_hash(a), workflow_hash(b)
        if hb < ha:
            a, b, ha, hb = b, a, hb, ha
        key = (ha, hb)
        if key not in self._memo:
            emb = 1.0 if ha == hb else cosine(self._embedding(a), self._embedding(b))
            self._memo[key] = (min(1.0, max(0.0, emb)), self._llm(a, b))
        return self._memo[key]

    def __call__(self, a: Workflow, b: Workflow) -> float:
        emb, llm = self.components(a, b)
        return self.cfg.alpha * emb + (1 - self.cfg.alpha) * llm


def blended_similarity(a: Workflow, b: Workflow, cfg: SimilarityConfig, embedder: Gateway,
                       judge: Gateway) -> float:
    return BlendedSimilarity(embedder, judge, cfg)(a, b)


@dataclass
class DedupTrace:
    events: list[dict[str, Any]] = field(default_factory=list)

    def of(self, kind: str) -> list[dict[str, Any]]:
        return [e for e in self.events if e["event"] == kind]

    def to_dict(self) -> dict[str, Any]:
        return {"events": self.events}


Rewriter = Callable[[Workflow, Sequence[Workflow], int], Workflow]


def dedup_workflows(pool: GuidelinePool, cfg: SimilarityConfig,
                    similarity: Callable[[Workflow, Workflow], float],
                    rewrite: Rewriter) -> tuple[GuidelinePool, DedupTrace]:
    """Greedy rewrite-or-discard until no workflow pair scores above ``cfg.tau``.

    The first offending pair in insertion order is taken; its member with more
    above-threshold neighbours is the duplicate (ties: the earlier one).  Up to
    ``cfg.max_rewrites`` rewrites are tried, and the first one whose maximum
    similarity to every other workflow is at most ``tau`` replaces it in place.
    Otherwise the duplicate is dropped.
    """
    trace = DedupTrace()
    scores: dict[tuple[str, str], float] = {}

    def s(a: Workflow, b: Workflow) -> float:
        ha, hb = sorted((workflow_hash(a), workflow_hash(b)))
        if (ha, hb) not in scores:
            scores[(ha, hb)] = float(similarity(a, b))
            trace.events.append({"event": "compare", "a": a.workflow_id, "b": b.workflow_id,
                                 "score": scores[(ha, hb)]})
        return scores[(ha, hb)]

    items = list(pool.workflows)
    prov = dict(pool.provenance)
    removed: list[str] = []
    while True:
        pair = next(((i, j) for i in range(len(items)) for j in range(i + 1, len(items))
                     if s(items[i], items[j]) > cfg.tau), None)
        if pair is None:
            break
        i, j = pair

        def neighbours(k: int) -> int:
            return sum(1 for m in range(len(items)) if m != k and s(items[k], items[m]) > cfg.tau)

        ni, nj = neighbours(i), neighbours(j)
        dup = j if nj > ni else i
        target = items[dup]
        trace.events.append({"event": "select", "pair": [items[i].workflow_id, items[j].workflow_id],
                             "neighbours": [ni, nj], "duplicate": target.workflow_id})
        others = items[:dup] + items[dup + 1:]
        resolved = False
        for attempt in range(1, cfg.max_rewrites + 1):
            candidate = rewrite(target, others, attempt)
            worst = max((s(candidate, o) for o in others), default=0.0)
            ok = worst <= cfg.tau
            trace.events.append({"event": "rewrite", "duplicate": target.workflow_id,
                                 "attempt": attempt, "max_similarity": worst, "accepted": ok})
            if ok:
                items[dup] = candidate
                prov[candidate.workflow_id] = "rewritten"
                resolved = True
                break
        if not resolved:
            trace.events.append({"event": "remove", "workflow_id": target.workflow_id})
            removed.append(target.workflow_id)
            prov.pop(target.workflow_id, None)
            del items[dup]
    return replace(pool, workflows=tuple(items), provenance=prov), trace


REWRITE_PROMPT = (
    "The workflow below is too similar to others in the pool. Rewrite it for the same intent "
    "with a clearly different procedure, different required information and different "
    "phrasing from every workflow listed afterwards. Attempt {attempt}.\n\n"
    "WORKFLOW:\n{workflow}\n\nOTHERS:\n{others}\n\n"
    "Reply with JSON {{\"phases\": [{{\"name\", \"instruction\"}}, ...]}}."
)


def make_rewriter(gw: Gateway, retries: int = 3) -> Rewriter:
    def rewrite(w: Workflow, others: Sequence[Workflow], attempt: int) -> Workflow:
        req = ChatRequest.single(
            "You rewrite contact-center workflows. Output JSON only.",
            REWRITE_PROMPT.format(attempt=attempt, workflow=_render_workflow(w),
                                  others="\n\n".join(_render_workflow(o) for o in others) or "(none)"),
            temperature=GENERATION_TEMPERATURE, tag="scale.rewrite",
            context={"workflow": workflow_to_dict(w), "attempt": attempt},
        )
        return ask_json(gw, req, lambda p: parse_workflow(p, w.workflow_id, w.intent), retries,
                        lambda reason, _: MalformedWorkflow(f"{w.workflow_id}: {reason}"))
    return rewrite


# -- orchestration -------------------------------------------------------------

@dataclass(frozen=True)
class ScaleConfig:
    intents: int = 10
    variants: int = 3
    iterations: int = 10
    conditions_per_workflow: int = 2
    similarity: SimilarityConfig = SimilarityConfig()


@dataclass(frozen=True)
class ScaleRoles:
    generator: Gateway
    judges: Sequence[Gateway]
    refiner: Gateway
    embedder: Gateway
    similarity_judge: Gateway


def scale_pool(seeds: GuidelinePool, roles: ScaleRoles, cfg: ScaleConfig = ScaleConfig(),
               workers: int = 1) -> tuple[GuidelinePool, RefineTrace, DedupTrace]:
    """Seeds to a deduplicated pool with grounded condition guidelines."""
    seed_intents = list(dict.fromkeys(w.intent for w in seeds.workflows))
    if not seed_intents:
        raise PreconditionError("seed pool needs at least one workflow")
    intents = generate_intents(roles.generator, seeds.domain, seed_intents, cfg.intents)
    workflows = list(seeds.workflows)
    prov = dict(seeds.provenance)
    for intent in intents:
        new = generate_workflow_variants(roles.generator, intent, [], cfg.variants, seeds.domain,
                                         taken_ids={w.workflow_id for w in workflows})
        workflows += new
        prov.update({w.workflow_id: "generated" for w in new})
    pool = replace(seeds, workflows=tuple(workflows), provenance=prov)
    log.info("scale: %d workflows before quality control", len(pool.workflows))

    pool, refine_trace = judge_and_refine(pool, roles.judges, roles.refiner, cfg.iterations, workers)
    sim = BlendedSimilarity(roles.embedder, roles.similarity_judge, cfg.similarity)
    pool, dedup_trace = dedup_workflows(pool, cfg.similarity, sim, make_rewriter(roles.generator))
    log.info("scale: %d workflows after dedup", len(pool.workflows))

    seed_ids = {w.workflow_id for w in seeds.workflows}
    fresh = [w for w in pool.workflows if w.workflow_id not in seed_ids]
    # seed conditions may be grounded in phases that no longer exist
    live = {k for w in pool.workflows for k in w.keys}
    kept = tuple(c for c in pool.conditions if not c.grounded_in or set(c.grounded_in) & live)
    pool = replace(pool, conditions=kept)
    if fresh:
        conds = generate_condition_guidelines(roles.generator, pool, cfg.conditions_per_workflow,
                                              workflows=fresh)
        prov = dict(pool.provenance)
        prov.update({c.key: "generated" for c in conds})
        pool = replace(pool, conditions=pool.conditions + tuple(conds), provenance=prov)
    return pool, refine_trace, dedup_trace
