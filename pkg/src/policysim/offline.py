"""Scripted stand-ins for every model role, so the whole pipeline runs offline.

``world`` answers every request tag the pipeline issues with deterministic,
well-formed output derived from the request context.  ``perfect_judge`` and
``always_compliant`` are benchmark judges with known scores: the first
reads the ground-truth labels from a corpus file, the second never flags
anything.

Each factory takes an ``options`` mapping (from the pipeline config) and
returns a :class:`~policysim.gateway.ScriptedProvider`.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from pathlib import Path
from typing import Any, Callable, Mapping

from policysim.gateway import ChatRequest, ScriptedProvider, ScriptEntry, bag_of_words_embedding
from policysim.model import LabeledDialogue, load_corpus, ref_to_dict, slugify

ScriptFactory = Callable[[Mapping[str, Any]], ScriptedProvider]


def _h(*parts: Any) -> int:
    return int.from_bytes(hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()[:4], "little")


def _lc(text: str) -> str:
    return text[:1].lower() + text[1:]


# -- guideline scaling ---------------------------------------------------------

INTENTS = [
    "Request a refund for a cancelled flight", "Add a checked bag to a booking",
    "Select or change a seat", "Update passenger contact details", "Upgrade a ticket with miles",
    "Book travel for an unaccompanied minor", "Travel with a pet in the cabin",
    "Correct a misspelled passenger name", "Request a receipt for a past trip",
    "Rebook after a missed connection", "Join the loyalty program", "Cancel a booking within 24 hours",
]

OPENERS = ["Greet the caller and confirm they want to {i}.",
           "Introduce yourself and restate the request to {i} in one sentence.",
           "Thank the caller for waiting and ask which booking the request to {i} concerns."]
CHECKS = ["Verify identity with the booking reference and surname.",
          "Ask for the loyalty number and the date of birth on the account.",
          "Send a one-time code to the phone on file and ask the caller to read it back."]
MIDDLES = ["Explain the policy that applies when customers {i}, including any fee.",
           "Check whether the caller is eligible to {i} and state the outcome plainly.",
           "List the available options to {i} and let the caller choose one."]
ACTIONS = ["Complete the change and give the confirmation code.",
           "Submit the request and state when the caller will hear back.",
           "Record the outcome and email a written summary to the address on file."]
CLOSERS = ["Ask whether anything else is needed and end the call politely.",
           "Summarize what was done and thank the caller by name."]


def _phases(intent: str, salt: int) -> list[dict[str, str]]:
    i = _lc(intent)
    rows = [("open", OPENERS), ("identity", CHECKS), ("policy", MIDDLES), ("action", ACTIONS)]
    out = [{"name": name, "instruction": bank[(salt + n) % len(bank)].format(i=i)}
           for n, (name, bank) in enumerate(rows)]
    if salt % 2:
        out.append({"name": "close", "instruction": CLOSERS[salt // 2 % len(CLOSERS)]})
    return out


def _intents(req: ChatRequest) -> str:
    ctx = req.context
    seeds = {s.strip().lower() for s in ctx.get("seeds", [])}
    pool = [x for x in INTENTS if x.lower() not in seeds]
    n = int(ctx.get("count", 3))
    pool += [f"Other request {j}" for j in range(1, n - len(pool) + 1)]
    return json.dumps(pool[:n])


def _workflow(req: ChatRequest) -> str:
    ctx = req.context
    return json.dumps({"phases": _phases(ctx["intent"], _h(ctx["intent"]) + int(ctx.get("variant", 1)) - 1)})


def _rewrite(req: ChatRequest) -> str:
    w = req.context["workflow"]
    return json.dumps({"phases": _phases(w["intent"], _h(w["workflow_id"], req.context["attempt"]))})


def _refine(req: ChatRequest) -> str:
    w = req.context["workflow"]
    return json.dumps({"phases": [{"name": p["key"].split("__")[-1], "instruction": p["content"]}
                                  for p in w["phases"]]})


CONDITION_BANK = [
    ("asks_supervisor", "the caller asks for a supervisor about {i}", "offer a callback from a supervisor within two hours"),
    ("tight_deadline", "the caller says they must travel within 48 hours to {i}",
     "state the earliest available option before anything else"),
    ("card_declined", "the caller says their card was declined while trying to {i}",
     "offer another payment method without repeating the card number"),
    ("upset_caller", "the caller says they are upset about how long it takes to {i}",
     "apologize once and state the next concrete step"),
]


def _conditions(req: ChatRequest) -> str:
    w = req.context["workflow"]
    keys = [p["key"] for p in w["phases"]]
    start = _h(w["workflow_id"]) % len(CONDITION_BANK)
    rows = []
    for j in range(int(req.context.get("count", 2))):
        name, trig, act = CONDITION_BANK[(start + j) % len(CONDITION_BANK)]
        rows.append({"name": f"{w['workflow_id']}_{name}", "trigger": trig.format(i=_lc(w["intent"])),
                     "action": act, "grounded_in": keys[1:3] or keys[:1]})
    return json.dumps(rows)


_WORD = re.compile(r"[a-z0-9]+")


def _similarity(req: ChatRequest) -> str:
    a = " ".join(p["content"] for p in req.context["a"]["phases"])
    b = " ".join(p["content"] for p in req.context["b"]["phases"])
    wa, wb = set(_WORD.findall(a.lower())), set(_WORD.findall(b.lower()))
    return str(round(100 * len(wa & wb) / max(1, len(wa | wb))))


# -- violation forging ---------------------------------------------------------

WORKFLOW_TWISTS = [
    "Skip this step unless the caller raises it: {c}",
    "Tell the caller this step is not needed today instead of the following: {c}",
    "{C} Also ask the caller for the full card number and security code.",
    "{C} Promise a full refund regardless of eligibility.",
]


def _variants(req: ChatRequest) -> str:
    c = req.context["oracle"]["content"]
    shift = len(req.context.get("feedback", ()))
    n = int(req.context.get("n", 4))
    return json.dumps([WORKFLOW_TWISTS[(shift + j) % len(WORKFLOW_TWISTS)].format(c=_lc(c), C=c)
                       for j in range(n)])


def _condition_variant(req: ChatRequest) -> str:
    o = req.context["oracle"]
    if int(req.context.get("nonce", 0)) % 2 == 0:
        return json.dumps({"kind": "omits_action", "trigger": o["trigger"],
                           "action": "acknowledge the remark and continue with the current step"})
    return json.dumps({"kind": "adds_conflict", "trigger": o["trigger"],
                       "action": f"tell the caller nothing can be done, then {o['action']}"})


def _content_judge(req: ChatRequest) -> str:
    changed = req.context["original"].strip() != req.context["modified"].strip()
    return json.dumps({"changed": changed, "feedback": "" if changed else "reply did not change"})


# -- simulation ----------------------------------------------------------------

def _reply(req: ChatRequest) -> str:
    return f"Certainly. {req.context['guideline']}"


def _persona(req: ChatRequest) -> str:
    ctx = req.context
    n = int(ctx.get("count", 1))
    names = ["Alex Morgan", "Sam Rivera", "Jordan Lee", "Casey Patel", "Riley Chen", "Taylor Brooks"]
    return json.dumps([{"name": names[(_h(ctx.get("seed"), j)) % len(names)],
                        "traits": "Polite but in a hurry; answers questions briefly.",
                        "scenario_goal": f"{ctx['intent']}."} for j in range(n)])


def _selector(req: ChatRequest) -> str:
    ctx = req.context
    said = " ".join(str(ctx.get("last_user", "")).lower().split())
    for key, trigger in ctx["conditions"].items():
        if trigger and " ".join(trigger.lower().split()) in said:
            return json.dumps({"category": "condition", "key": key, "phase_index": None})
    phases = ctx["phases"]
    i = min(int(ctx["progress"]) + 1, len(phases))
    return json.dumps({"category": "workflow", "key": phases[i - 1], "phase_index": i})


def _user(req: ChatRequest) -> str:
    ctx = req.context
    targets = list(ctx["persona"].get("target_variants", ()))
    conds = ctx["conditions"]
    order = [k for k in targets if k in conds] + [k for k in conds if k not in targets]
    t = int(ctx["turn_index"])
    slot = (t - 1) // 2
    if t % 2 == 1 and slot < len(order):
        return f"Before we go on, {conds[order[slot]]}."
    if int(ctx["progress"]) >= int(ctx["k"]):
        return "That covers everything, thank you. [[DONE]]"
    return "Okay, please go ahead."


def _naive_chat_judge(req: ChatRequest) -> str:
    """Guesses phase i for turn i and never flags a violation."""
    keys = re.findall(r"^(\d+)\. \[([^\]]+)\]", req.text(), flags=re.M)
    n = int(req.context["n_turns"])
    out = []
    for t in range(1, n + 1):
        idx, key = keys[min(t, len(keys)) - 1]
        out.append({"turn": t, "category": "workflow", "key": key, "phase_index": int(idx), "violation": False})
    return json.dumps(out)


def world(options: Mapping[str, Any] | None = None) -> ScriptedProvider:
    """Answers every pipeline tag; see the module docstring."""
    ok = json.dumps({"pass": True, "note": ""})
    entries = [
        ScriptEntry.on("scale.intents", response=_intents),
        ScriptEntry.on("scale.workflow", response=_workflow),
        ScriptEntry.on("scale.conditions", response=_conditions),
        ScriptEntry.on("scale.refine_judge", response=json.dumps(
            {"non_overlapping": True, "non_conflicting": True, "reason": "clear and consistent"})),
        ScriptEntry.on("scale.refine", response=_refine),
        ScriptEntry.on("scale.similarity", response=_similarity),
        ScriptEntry.on("scale.rewrite", response=_rewrite),
        ScriptEntry.on("forge.variants", response=_variants),
        ScriptEntry.on("forge.condition_variant", response=_condition_variant),
        ScriptEntry.on("forge.constraint", response=ok),
        ScriptEntry.on("forge.reply", response=_reply),
        ScriptEntry.on("forge.content_judge", response=_content_judge),
        ScriptEntry.on("forge.compliance_judge", response=json.dumps({"violated": False, "feedback": ""})),
        ScriptEntry.on("synth.persona", response=_persona),
        ScriptEntry.on("synth.selector", response=_selector),
        ScriptEntry.on("synth.assistant", response=_reply),
        ScriptEntry.on("synth.regenerate", response=_reply),
        ScriptEntry.on("synth.user", response=_user),
        ScriptEntry.on("synth.verify", response=json.dumps({"adheres": True, "feedback": ""})),
        ScriptEntry.on("judge.chat", response=_naive_chat_judge),
        ScriptEntry.on("judge.reward_cls", response=1.0),
        ScriptEntry.on("judge.reward_gen", response=json.dumps({"label": "compliant"})),
    ]
    return ScriptedProvider(entries, provider_id=str((options or {}).get("id", "world")),
                            embedder=bag_of_words_embedding)


# -- benchmark judges with known answers ---------------------------------------

class _LabelBook:
    """Ground-truth labels read lazily, since the corpus may not exist yet."""

    def __init__(self, corpus: str | Path):
        self.path = Path(corpus)
        self._labels: dict[str, LabeledDialogue] | None = None
        self._lock = threading.Lock()

    def get(self, dialogue_id: str) -> LabeledDialogue:
        with self._lock:
            if self._labels is None:
                self._labels = {d.dialogue_id: d for d in load_corpus(self.path, strict=False)}
            return self._labels[dialogue_id]


def perfect_judge(options: Mapping[str, Any]) -> ScriptedProvider:
    """Answers with the true labels; needs ``options["corpus"]``."""
    if "corpus" not in options:
        raise ValueError("perfect_judge needs a 'corpus' option")
    book = _LabelBook(options["corpus"])

    def chat(req: ChatRequest) -> str:
        dlg = book.get(req.context["dialogue_id"])
        return json.dumps([{"turn": i, **ref_to_dict(lab.guideline), "violation": lab.violated}
                           for i, lab in enumerate(dlg.labels, 1)])

    def score(req: ChatRequest) -> float:
        dlg = book.get(req.context["dialogue_id"])
        return -1.0 if dlg.labels[req.context["turn_index"] - 1].violated else 1.0

    def gen(req: ChatRequest) -> str:
        dlg = book.get(req.context["dialogue_id"])
        bad = dlg.labels[req.context["turn_index"] - 1].violated
        return json.dumps({"label": "violated" if bad else "compliant"})

    return ScriptedProvider([ScriptEntry.on("judge.chat", response=chat),
                             ScriptEntry.on("judge.reward_cls", response=score),
                             ScriptEntry.on("judge.reward_gen", response=gen)],
                            provider_id=str(options.get("id", "perfect_judge")))


def always_compliant(options: Mapping[str, Any] | None = None) -> ScriptedProvider:
    """Never flags a violation in any mode."""
    return ScriptedProvider([ScriptEntry.on("judge.chat", response=_naive_chat_judge),
                             ScriptEntry.on("judge.reward_cls", response=0.5),
                             ScriptEntry.on("judge.reward_gen", response=json.dumps({"label": "compliant"}))],
                            provider_id=str((options or {}).get("id", "always_compliant")))


SCRIPTS: dict[str, ScriptFactory] = {
    "world": world,
    "perfect_judge": perfect_judge,
    "always_compliant": always_compliant,
}


def seed_pool_path(domain: str = "airline") -> Path:
    return Path(__file__).parent / "data" / f"seed_pool_{slugify(domain)}.json"
