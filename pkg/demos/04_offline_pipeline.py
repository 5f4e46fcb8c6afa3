"""
The whole pipeline, offline
===========================

Every stage runs against the built-in scripted providers, so this needs no
network and no keys.  Two reference judges are scored: one that reads the
true labels and one that never reports a violation.
"""

import json
import tempfile
from pathlib import Path

from policysim.cli import run_all
from policysim.config import load_config
from policysim.model import load_corpus

workdir = Path(tempfile.mkdtemp(prefix="policysim-demo-"))
config = {
    "domain": "airline", "seed": 3, "workers": 4,
    "providers": {"world": {"kind": "scripted", "script": "world"},
                  "oracle": {"kind": "scripted", "script": "perfect_judge"},
                  "yes_man": {"kind": "scripted", "script": "always_compliant"}},
    "roles": {"generator": "world", "assistant": "world", "user_sim": "world",
              "judges": ["world", "world", "world"]},
    "scale": {"intents": 4, "variants": 2},
    "simulation": {"count": 20},
    "benchmark": {"judges": ["oracle", "yes_man"]},
    "paths": {"out_dir": "out"},
}
(workdir / "config.json").write_text(json.dumps(config, indent=2))

# scale -> seed dialogues -> forge -> synth -> judge -> score -> report
run_all(load_config(workdir / "config.json"))

# %%
# One synthesized dialogue, with its labels.
dlg = load_corpus(workdir / "out" / "corpus.jsonl")[0]
print(f"\n{dlg.dialogue_id}: {dlg.n_turns} turns, {dlg.n_violations} injected violation(s)")
for turn, label in zip(dlg.turns, dlg.labels):
    flag = "VIOLATED" if label.violated else "ok"
    print(f"  {flag:8} {turn.assistant[:56]:56}  <- {label.guideline.key}")

print("\noutputs in", workdir / "out")
