"""
Watching the deduplication loop
===============================

Three workflows, one pair too similar.  The loop picks the member with
more close neighbours, tries to rewrite it, and drops it when every
rewrite is still too close.
"""

from policysim.model import Guideline, GuidelineCategory, Workflow
from policysim.scaling import GuidelinePool, SimilarityConfig, dedup_workflows


def wf(wid, text):
    return Workflow(wid, wid, (Guideline(f"{wid}__p1", text, GuidelineCategory.WORKFLOW, phase_index=1),))


# A hand-made similarity table stands in for the blended embedding/LLM score.
table = {frozenset(("A", "B")): 0.90, frozenset(("A", "C")): 0.85, frozenset(("B", "C")): 0.30}


def similarity(a, b):
    return table.get(frozenset((a.phases[0].content, b.phases[0].content)), 0.95)


def rewrite(w, others, attempt):
    # every rewrite lands too close to something (unknown pairs score 0.95)
    return wf(w.workflow_id, f"{w.phases[0].content} (take {attempt})")


pool = GuidelinePool("airline", workflows=(wf("A", "A"), wf("B", "B"), wf("C", "C")))
out, trace = dedup_workflows(pool, SimilarityConfig(tau=0.8, max_rewrites=3), similarity, rewrite)

for event in trace.events:
    print(event)

print("kept:", [w.workflow_id for w in out.workflows])
