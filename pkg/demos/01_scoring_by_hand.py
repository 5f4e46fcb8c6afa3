"""
Scoring a judge by hand
=======================

Three tiny conversations, a judge's per-turn answers, and the three
numbers the benchmark reports for them.
"""

from policysim.judging import JudgeRun, TurnPrediction
from policysim.metrics import aggregate, render_report, score_cla, score_sga, score_vda
from policysim.model import (Guideline, GuidelineCategory, GuidelineDocument,
                             LabeledDialogue, Turn, TurnLabel, Workflow)

W, C = GuidelineCategory.WORKFLOW, GuidelineCategory.CONDITION

# A two-phase workflow and one condition guideline make up the rulebook.
phases = (Guideline("refund__p1", "Confirm the booking reference.", W, phase_index=1),
          Guideline("refund__p2", "State the refund amount before processing.", W, phase_index=2))
human = Guideline.condition("human", "the caller asks for a person", "transfer the call")
doc = GuidelineDocument((), Workflow("refund", "request a refund", phases), (human,))
P1, P2, HUMAN = phases[0].ref(), phases[1].ref(), human.ref()

# %%
# Turn level: SGA only looks at compliant turns and wants the right
# guideline *and* "not violated"; VDA only looks at violated turns and
# ignores which guideline the judge named.
labels = [TurnLabel(P1, False), TurnLabel(HUMAN, False), TurnLabel(P2, True)]
preds = [TurnPrediction(P1, False), TurnPrediction(P2, False), TurnPrediction(HUMAN, True)]

print("SGA", score_sga(labels, preds))   # 1 of 2 compliant turns right
print("VDA", score_vda(labels, preds))   # the violation was caught
print("CLA", score_cla(labels, preds))   # but not every turn is right

# %%
# Conversation level: runs are averaged per conversation first, then over
# conversations.  A conversation with no violated turn has no VDA and is
# simply left out of that mean.
def dialogue(did, labs):
    turns = tuple(Turn(f"agent line {i}", f"caller line {i}") for i in range(1, len(labs) + 1))
    return LabeledDialogue(did, "airline", turns, tuple(labs), doc, doc)

corpus = [dialogue("a", labels), dialogue("b", [TurnLabel(P1, False), TurnLabel(P2, False)])]
runs = [JudgeRun("a", "demo-judge", 1, tuple(preds)),
        JudgeRun("a", "demo-judge", 2, tuple(TurnPrediction(l.guideline, l.violated) for l in labels)),
        JudgeRun("b", "demo-judge", 1, (TurnPrediction(P1, False), TurnPrediction(P2, False)))]

print(render_report(aggregate(runs, corpus)))
