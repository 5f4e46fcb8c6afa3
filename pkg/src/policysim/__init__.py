"""Synthesize guideline-governed dialogues with injected compliance violations
and measure how well compliance judges find them.

Stages, in pipeline order:

* :mod:`policysim.scaling`  - grow a per-domain guideline pool and deduplicate it
* :mod:`policysim.forge`    - build adversarially optimized violation variants
* :mod:`policysim.synth`    - inject variants, simulate dialogues, label turns
* :mod:`policysim.judging`  - run chat judges and reward-model baselines
* :mod:`policysim.metrics`  - SGA / VDA / CLA scoring and report rendering

All model traffic goes through :class:`policysim.gateway.Gateway`.
"""

from policysim.model import (
    Guideline,
    GuidelineCategory,
    GuidelineDocument,
    GuidelineRef,
    LabeledDialogue,
    TurnLabel,
    VariantKind,
    Workflow,
    load_corpus,
    save_corpus,
    validate_document,
)

__version__ = "0.1.0"

__all__ = [
    "Guideline",
    "GuidelineCategory",
    "GuidelineDocument",
    "GuidelineRef",
    "LabeledDialogue",
    "TurnLabel",
    "VariantKind",
    "Workflow",
    "load_corpus",
    "save_corpus",
    "validate_document",
]
