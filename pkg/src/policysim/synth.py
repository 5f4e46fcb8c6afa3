"""Injected guideline documents, three-agent simulation, labels, and repair.

A dialogue is built in four steps:

1. :func:`build_sim_document` samples a workflow and some conditions from the
   pool and swaps a share of them for violation variants.
2. :func:`generate_personas` creates a customer persona that steers toward
   the injected guidelines.
3. :func:`simulate` runs selector, agent and customer turn by turn.  A turn is
   labeled violated exactly when its governing key was injected.
4. :func:`verify_and_repair` has a judge panel check every agent message
   against the guideline it was *served* and regenerates failures.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Mapping, Protocol, Sequence

import numpy as np

from policysim.agents import agent_reply, render_history
from policysim.errors import PolicySimError, PreconditionError
from policysim.forge import ViolationVariant, VariantStore
from policysim.gateway import GENERATION_TEMPERATURE, ChatRequest, Gateway
from policysim.llmjson import OutputRejected, as_bool, ask_json, extract_json
from policysim.model import (
    Guideline,
    GuidelineCategory,
    GuidelineDocument,
    GuidelineRef,
    LabeledDialogue,
    SchemaError,
    Turn,
    TurnLabel,
    ref_from_dict,
    slugify,
    validate_document,
)
from policysim.rng import derive_seed
from policysim.scaling import GuidelinePool

log = logging.getLogger(__name__)

DONE = "[[DONE]]"


class NoVariantAvailable(PolicySimError):
    pass


class SelectorParseFailure(PolicySimError):
    pass


class MalformedPersona(PolicySimError):
    pass


class DialogueRejected(PolicySimError):
    def __init__(self, turn: int, feedback: str):
        super().__init__(f"turn {turn} still fails verification: {feedback}")
        self.turn = turn
        self.feedback = feedback


# -- injection -----------------------------------------------------------------

@dataclass(frozen=True)
class InjectionPlan:
    workflow_replacements: Mapping[str, ViolationVariant]
    condition_replacement: tuple[str, ViolationVariant] | None
    rng_seed: int

    def injection_map(self):
        out = {k: v.kind for k, v in self.workflow_replacements.items()}
        if self.condition_replacement is not None:
            key, v = self.condition_replacement
            out[key] = v.kind
        return out


def injection_count(k: int, rate: float) -> int:
    """Phases to replace: half-up rounding of ``rate * k``, at least one when rate > 0."""
    if k < 1 or rate <= 0:
        return 0
    return min(k, max(1, math.floor(rate * k + 0.5 + 1e-9)))


def plan_injection(phases: Sequence[Guideline], conditions: Sequence[Guideline], variants: VariantStore,
                   seed: int, workflow_rate: float = 0.30,
                   condition_prob: float = 0.50) -> InjectionPlan:
    """Pick which phases (and maybe one condition) get violation variants.

    Phases without an accepted variant are passed over in favour of others;
    :class:`NoVariantAvailable` only when too few phases are replaceable.
    The condition coin is always flipped so the random stream does not
    depend on variant availability.
    """
    rng = np.random.default_rng(seed)
    need = injection_count(len(phases), workflow_rate)
    order = rng.permutation(len(phases))
    chosen: dict[str, ViolationVariant] = {}
    for idx in order:
        if len(chosen) == need:
            break
        key = phases[idx].key
        options = variants.get(key) or ()
        if options:
            chosen[key] = options[int(rng.integers(len(options)))]
    if len(chosen) < need:
        raise NoVariantAvailable(f"need {need} replaceable phases, only {len(chosen)} have variants")
    # keep document order for readability
    chosen = {p.key: chosen[p.key] for p in phases if p.key in chosen}

    condition = None
    flip = rng.random()
    if flip < condition_prob:
        eligible = [c for c in conditions if variants.get(c.key)]
        if eligible:
            c = eligible[int(rng.integers(len(eligible)))]
            options = variants[c.key]
            condition = (c.key, options[int(rng.integers(len(options)))])
    return InjectionPlan(chosen, condition, seed)


def apply_plan(doc: GuidelineDocument, plan: InjectionPlan) -> GuidelineDocument:
    """The served document: oracle content replaced per ``plan``."""
    phases = tuple(plan.workflow_replacements[p.key].apply(p) if p.key in plan.workflow_replacements else p
                   for p in doc.workflow.phases)
    conditions = doc.conditions
    if plan.condition_replacement is not None:
        key, v = plan.condition_replacement
        conditions = tuple(v.apply(c) if c.key == key else c for c in conditions)
    return GuidelineDocument(doc.universal, replace(doc.workflow, phases=phases), conditions,
                             plan.injection_map())


@dataclass(frozen=True)
class SimDocument:
    served: GuidelineDocument
    oracle: GuidelineDocument
    plan: InjectionPlan


def build_sim_document(pool: GuidelinePool, variants: VariantStore, seed: int, *,
                       conditions_per_doc: int = 3, workflow_rate: float = 0.30,
                       condition_prob: float = 0.50, workflow_id: str | None = None) -> SimDocument:
    """Sample one workflow and a condition subset, then inject variants.

    Conditions grounded in the sampled workflow are drawn first (they are the
    ones that can trigger), the rest of the subset from the remaining pool.
    """
    if not pool.workflows:
        raise PreconditionError("pool has no workflows")
    rng = np.random.default_rng(seed)
    if workflow_id is None:
        wf = pool.workflows[int(rng.integers(len(pool.workflows)))]
    else:
        wf = pool.workflow(workflow_id)
    grounded = [c for c in pool.conditions if set(c.grounded_in) & set(wf.keys)]
    rest = [c for c in pool.conditions if c not in grounded]
    size = min(conditions_per_doc, len(pool.conditions))
    picked = [grounded[i] for i in rng.permutation(len(grounded))[:size]]
    if len(picked) < size:
        picked += [rest[i] for i in rng.permutation(len(rest))[:size - len(picked)]]
    order = {c.key: n for n, c in enumerate(pool.conditions)}
    picked.sort(key=lambda c: order[c.key])
    oracle = GuidelineDocument(pool.universal, wf, tuple(picked), {})
    plan = plan_injection(wf.phases, oracle.conditions, variants, derive_seed(seed, "inject"),
                          workflow_rate, condition_prob)
    return SimDocument(apply_plan(oracle, plan), oracle, plan)


# -- personas ------------------------------------------------------------------

@dataclass(frozen=True)
class Persona:
    name: str
    traits: str
    scenario_goal: str
    target_variants: tuple[str, ...] = ()


PERSONA_PROMPT = (
    "Create {count} realistic customer personas for a {domain} contact center. Each customer "
    "calls about: {intent}.\n{targets}"
    "Reply with a JSON array of objects {{\"name\", \"traits\", \"scenario_goal\"}}."
)


def generate_personas(gw: Gateway, domain: str, doc: GuidelineDocument, count: int = 1,
                      seed: int | None = None, oracle: GuidelineDocument | None = None,
                      retries: int = 3) -> list[Persona]:
    """``count`` personas, each targeting every injected key of ``doc``."""
    targets = tuple(doc.injection_map)
    reference = oracle or doc
    lines = []
    for key in targets:
        g = reference.get(key)
        if g is not None:
            lines.append(f"- {g.trigger}" if g.trigger else f"- the step: {g.content}")
    block = ("Their goal should naturally lead the call through these situations:\n"
             + "\n".join(lines) + "\n") if lines else ""

    def validate(parsed: Any) -> list[Persona]:
        if isinstance(parsed, dict):
            parsed = parsed.get("personas", [parsed])
        if not isinstance(parsed, list) or len(parsed) < count:
            raise OutputRejected(f"expected an array of {count} personas")
        out = []
        for item in parsed[:count]:
            if not isinstance(item, dict) or not all(
                    isinstance(item.get(k), str) and item[k].strip() for k in ("name", "traits", "scenario_goal")):
                raise OutputRejected("each persona needs name, traits and scenario_goal strings")
            out.append(Persona(item["name"].strip(), item["traits"].strip(),
                               item["scenario_goal"].strip(), targets))
        return out

    req = ChatRequest.single(
        "You design customer personas for contact-center simulations. Output JSON only.",
        PERSONA_PROMPT.format(count=count, domain=domain, intent=doc.workflow.intent, targets=block),
        temperature=GENERATION_TEMPERATURE, tag="synth.persona", seed=seed,
        context={"domain": domain, "intent": doc.workflow.intent, "count": count, "targets": list(targets),
                 "seed": seed},
    )
    return ask_json(gw, req, validate, retries, lambda reason, _: MalformedPersona(reason))


# -- selectors -----------------------------------------------------------------

@dataclass(frozen=True)
class SimulationConfig:
    max_turns: int = 20
    max_regenerations: int = 3
    sentinel: str = DONE

    def __post_init__(self):
        if self.max_turns < 1 or self.max_regenerations < 1:
            raise ValueError("max_turns and max_regenerations must be positive")


class Selector(Protocol):
    def select(self, doc: GuidelineDocument, history: Sequence[Turn], progress: int,
               turn_index: int) -> GuidelineRef: ...


def _norm(text: str) -> str:
    return " ".join(text.lower().split())


class RuleSelector:
    """Deterministic selector: a condition fires when its trigger text appears
    in the customer's last message; otherwise the workflow advances one phase
    (staying on the last phase once the workflow is done)."""

    def select(self, doc, history, progress, turn_index):
        if history and history[-1].user:
            said = _norm(history[-1].user)
            for c in doc.conditions:
                if c.trigger and _norm(c.trigger) in said:
                    return c.ref()
        k = len(doc.workflow.phases)
        phase = doc.workflow.phases[min(progress + 1, k) - 1]
        return phase.ref()


SELECTOR_PROMPT = (
    "GUIDELINES (key: text)\nWORKFLOW \"{intent}\":\n{phases}\nCONDITIONS:\n{conditions}\n\n"
    "The workflow has reached phase {progress} of {k} (0 = not started). Conversation so far:\n"
    "{history}\n\n"
    "Which single guideline governs the agent's NEXT message? Pick a condition only if the "
    "customer's last message meets its trigger. Otherwise pick the workflow phase the agent is "
    "on; never go back to an earlier phase. Before the workflow starts use phase 1, after it "
    "ends use the last phase.\n"
    "Reply with JSON {{\"category\": \"workflow\"|\"condition\", \"key\": \"...\", \"phase_index\": int|null}}."
)


class LLMSelector:
    def __init__(self, gw: Gateway, retries: int = 3):
        self.gw = gw
        self.retries = retries

    def select(self, doc, history, progress, turn_index):
        wf = doc.workflow
        k = len(wf.phases)

        def validate(parsed: Any) -> GuidelineRef:
            if not isinstance(parsed, dict):
                raise OutputRejected("expected a JSON object")
            if parsed.get("category") == GuidelineCategory.CONDITION.value:
                parsed = {**parsed, "phase_index": None}
            try:
                ref = ref_from_dict(parsed)
            except SchemaError as exc:
                raise OutputRejected(str(exc)) from None
            if ref.category is GuidelineCategory.UNIVERSAL:
                raise OutputRejected("universal guidelines cannot govern a turn")
            if doc.resolve(ref) is None:
                raise OutputRejected(f"{ref.key!r} does not name a guideline with that category/phase")
            if ref.category is GuidelineCategory.WORKFLOW and ref.phase_index < progress:
                raise OutputRejected(f"phase {ref.phase_index} is behind current phase {progress}")
            return ref

        req = ChatRequest.single(
            "You track which guideline governs each agent turn. Output JSON only.",
            SELECTOR_PROMPT.format(
                intent=wf.intent, k=k, progress=progress, history=render_history(history),
                phases="\n".join(f"{p.phase_index}. {p.key}: {p.content}" for p in wf.phases),
                conditions="\n".join(f"- {c.key}: when {c.trigger}" for c in doc.conditions) or "(none)"),
            tag="synth.selector",
            context={"progress": progress, "turn_index": turn_index,
                     "last_user": history[-1].user if history else "",
                     "phases": [p.key for p in wf.phases],
                     "conditions": {c.key: c.trigger for c in doc.conditions}},
        )
        return ask_json(self.gw, req, validate, self.retries,
                        lambda reason, _: SelectorParseFailure(f"turn {turn_index}: {reason}"))


# -- simulation ----------------------------------------------------------------

@dataclass(frozen=True)
class SynthRoles:
    selector: Selector
    assistant: Gateway
    user_sim: Gateway
    persona_gen: Gateway
    panel: Sequence[Gateway] = ()

    def __post_init__(self):
        if self.panel and (len(self.panel) < 3 or len(self.panel) % 2 == 0):
            raise ValueError("verifier panel must have an odd number (>= 3) of judges")


USER_PROMPT = (
    "You are {name}, a customer calling a {domain} contact center. {traits}\n"
    "Your goal: {goal}\n{targets}"
    "Reply as the customer with one message. When your goal is met or the agent closes the "
    "call, end your message with {sentinel}."
)


def user_reply(gw: Gateway, persona: Persona, domain: str, history: Sequence[Turn], latest_agent: str,
               doc: GuidelineDocument, sentinel: str = DONE, context: Mapping[str, Any] | None = None) -> str:
    scenarios = []
    for key in persona.target_variants:
        g = doc.get(key)
        if g is not None:
            scenarios.append(f"- {g.trigger}" if g.trigger else f"- get the agent to: {g.content}")
    targets = ("As a compliance auditor, steer the call so these situations come up:\n"
               + "\n".join(scenarios) + "\n") if scenarios else ""
    system = USER_PROMPT.format(name=persona.name, domain=domain, traits=persona.traits,
                                goal=persona.scenario_goal, targets=targets, sentinel=sentinel)
    req = ChatRequest.single(
        system, f"Conversation so far:\n{render_history(history, trailing_agent=latest_agent)}",
        temperature=GENERATION_TEMPERATURE, tag="synth.user",
        context=dict(context or {}, turn_index=len(history) + 1, persona=asdict(persona),
                     latest_agent=latest_agent,
                     conditions={c.key: c.trigger for c in doc.conditions}),
    )
    return gw.complete(req).content.strip()


def simulate(roles: SynthRoles, doc: GuidelineDocument, persona: Persona,
             cfg: SimulationConfig = SimulationConfig(), *, dialogue_id: str = "dialogue",
             domain: str = "", oracle: GuidelineDocument | None = None) -> LabeledDialogue:
    """Run selector, agent and customer until the customer signals completion
    or ``cfg.max_turns`` turns have been produced."""
    problems = validate_document(doc)
    if problems:
        raise PreconditionError("document is malformed: " + "; ".join(p.message for p in problems))
    oracle = oracle or doc
    turns: list[Turn] = []
    labels: list[TurnLabel] = []
    progress = 0
    ctx = {"dialogue_id": dialogue_id}
    for i in range(1, cfg.max_turns + 1):
        ref = roles.selector.select(doc, turns, progress, i)
        g = doc.resolve(ref)
        if g is None:
            raise SelectorParseFailure(f"turn {i}: selector chose unresolvable {ref}")
        if ref.category is GuidelineCategory.WORKFLOW:
            progress = max(progress, ref.phase_index)
        reply = agent_reply(roles.assistant, domain, doc.universal, g.content, turns,
                            context=dict(ctx, key=g.key, category=g.category.value,
                                         injected=g.key in doc.injection_map))
        said = user_reply(roles.user_sim, persona, domain, turns, reply, oracle, cfg.sentinel,
                          context=dict(ctx, progress=progress, k=len(doc.workflow.phases)))
        done = cfg.sentinel in said
        turns.append(Turn(reply, said.replace(cfg.sentinel, "").strip()))
        labels.append(TurnLabel(ref, ref.key in doc.injection_map))
        if done:
            break
    return LabeledDialogue(dialogue_id, domain, tuple(turns), tuple(labels), doc, oracle)


VERIFY_PROMPT = (
    "GUIDELINE the agent was instructed to follow:\n{guideline}\n\nCONVERSATION:\n{history}\n\n"
    "Does the final agent message adhere to that guideline? Judge it only against this guideline.\n"
    "Reply with JSON {{\"adheres\": bool, \"feedback\": \"...\"}}."
)


def _panel_vote(panel: Sequence[Gateway], dialogue: LabeledDialogue, i: int, reply: str,
                attempt: int) -> tuple[bool, list[str]]:
    """(majority adheres, feedback from dissenting judges) for turn ``i`` (1-based)."""
    g = dialogue.source_document.resolve(dialogue.labels[i - 1].guideline)
    assert g is not None
    history = render_history(dialogue.turns[:i - 1], trailing_agent=reply)

    def vote(j: int) -> tuple[bool, str]:
        req = ChatRequest.single(
            "You verify that a simulated agent followed its instructions. Output JSON only.",
            VERIFY_PROMPT.format(guideline=g.content, history=history),
            tag="synth.verify",
            context={"dialogue_id": dialogue.dialogue_id, "turn_index": i, "judge": j,
                     "attempt": attempt, "reply": reply, "guideline": g.content},
        )
        parsed = extract_json(panel[j].complete(req).content)
        verdict = as_bool(parsed.get("adheres")) if isinstance(parsed, dict) else None
        if verdict is True:
            return True, ""
        reason = str(parsed.get("feedback", "")) if isinstance(parsed, dict) else "unparseable verdict"
        return False, f"judge {j + 1}: {reason or 'does not adhere'}"

    with ThreadPoolExecutor(max_workers=len(panel)) as ex:
        votes = list(ex.map(vote, range(len(panel))))
    fails = sum(not ok for ok, _ in votes)
    notes = [n for ok, n in votes if not ok]
    return fails * 2 < len(panel), notes


def verify_and_repair(panel: Sequence[Gateway], assistant: Gateway, dialogue: LabeledDialogue,
                      cfg: SimulationConfig = SimulationConfig()) -> LabeledDialogue:
    """Majority-vote adherence check of each agent turn against its served guideline.

    Failing turns are regenerated with the judges' feedback, up to
    ``cfg.max_regenerations`` times, after which :class:`DialogueRejected`.
    """
    if len(panel) < 3 or len(panel) % 2 == 0:
        raise PreconditionError("verifier panel must have an odd number (>= 3) of judges")
    turns = list(dialogue.turns)
    for i in range(1, len(turns) + 1):
        current = replace(dialogue, turns=tuple(turns))
        reply = turns[i - 1].assistant
        ok, notes = _panel_vote(panel, current, i, reply, 0)
        regens = 0
        while not ok:
            if regens == cfg.max_regenerations:
                raise DialogueRejected(i, " | ".join(notes))
            regens += 1
            g = dialogue.source_document.resolve(dialogue.labels[i - 1].guideline)
            reply = agent_reply(assistant, dialogue.domain, dialogue.source_document.universal,
                                g.content, turns[:i - 1], tag="synth.regenerate",
                                context={"dialogue_id": dialogue.dialogue_id, "key": g.key,
                                         "attempt": regens},
                                feedback="\n".join(notes))
            ok, notes = _panel_vote(panel, current, i, reply, regens)
        if reply != turns[i - 1].assistant:
            turns[i - 1] = Turn(reply, turns[i - 1].user)
    return replace(dialogue, turns=tuple(turns))


# -- corpus synthesis ----------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    count: int = 10
    conditions_per_doc: int = 3
    workflow_rate: float = 0.30
    condition_prob: float = 0.50
    simulation: SimulationConfig = SimulationConfig()
    verify: bool = True
    # extra attempts, with a fresh persona and document, for rejected dialogues
    retry_rejected: int = 0


@dataclass
class SynthReport:
    generated: int = 0
    rejected: int = 0
    aborted: int = 0
    mean_turns: float = 0.0
    mean_violations: float = 0.0
    failures: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _one_dialogue(pool: GuidelinePool, variants: VariantStore, roles: SynthRoles, cfg: SynthConfig,
                  seed: int, index: int, workflow_id: str | None = None, attempt: int = 0) -> LabeledDialogue:
    dseed = derive_seed(seed, "dialogue", index) if attempt == 0 else derive_seed(seed, "dialogue", index, attempt)
    sim_doc = build_sim_document(pool, variants, dseed, conditions_per_doc=cfg.conditions_per_doc,
                                 workflow_rate=cfg.workflow_rate, condition_prob=cfg.condition_prob,
                                 workflow_id=workflow_id)
    persona = generate_personas(roles.persona_gen, pool.domain, sim_doc.served, 1,
                                seed=derive_seed(dseed, "persona") % 2**31, oracle=sim_doc.oracle)[0]
    dlg = simulate(roles, sim_doc.served, persona, cfg.simulation,
                   dialogue_id=f"{slugify(pool.domain)}-{index:05d}", domain=pool.domain,
                   oracle=sim_doc.oracle)
    if cfg.verify and roles.panel:
        dlg = verify_and_repair(roles.panel, roles.assistant, dlg, cfg.simulation)
    return dlg


def synthesize(pool: GuidelinePool, variants: VariantStore, roles: SynthRoles, cfg: SynthConfig = SynthConfig(),
               seed: int = 0, workers: int = 1,
               workflow_ids: Sequence[str] | None = None) -> tuple[list[LabeledDialogue], SynthReport]:
    """``cfg.count`` dialogues (or one per id in ``workflow_ids``), in index order.

    Rejected and aborted dialogues are logged in the report and left out.
    """
    jobs = list(workflow_ids) if workflow_ids is not None else [None] * cfg.count

    def run(i: int):
        for attempt in range(cfg.retry_rejected + 1):
            try:
                return _one_dialogue(pool, variants, roles, cfg, seed, i, jobs[i], attempt)
            except DialogueRejected as exc:
                rejection = ("rejected", i, str(exc))
            except (SelectorParseFailure, NoVariantAvailable, MalformedPersona) as exc:
                return ("aborted", i, f"{type(exc).__name__}: {exc}")
        return rejection

    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        results = list(ex.map(run, range(len(jobs))))
    report = SynthReport()
    out = []
    for res in results:
        if isinstance(res, LabeledDialogue):
            out.append(res)
            continue
        status, i, why = res
        log.warning("dialogue %d %s: %s", i, status, why)
        setattr(report, status, getattr(report, status) + 1)
        report.failures.append({"index": i, "status": status, "reason": why})
    report.generated = len(out)
    if out:
        report.mean_turns = float(np.mean([d.n_turns for d in out]))
        report.mean_violations = float(np.mean([d.n_violations for d in out]))
    return out, report


def seed_dialogues(pool: GuidelinePool, roles: SynthRoles, cfg: SynthConfig = SynthConfig(), seed: int = 0,
                   workers: int = 1) -> tuple[list[LabeledDialogue], SynthReport]:
    """One violation-free dialogue per workflow, carrying the conditions grounded in it.

    These are the seed conversations the forge stage replays candidate
    variants against.
    """
    grounded = max((sum(1 for c in pool.conditions if set(c.grounded_in) & set(w.keys))
                    for w in pool.workflows), default=0)
    clean = replace(cfg, workflow_rate=0.0, condition_prob=0.0, conditions_per_doc=grounded)
    return synthesize(pool, {}, roles, clean, seed=derive_seed(seed, "seed-dialogues"), workers=workers,
                      workflow_ids=[w.workflow_id for w in pool.workflows])
