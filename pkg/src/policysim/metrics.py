"""Turn-level judge scoring, run and domain aggregation, and report rendering.

Metrics per conversation:

* SGA: on compliant turns, the judge names the governing guideline (category
  and key, plus phase for workflow guidelines) and says "not violated".
* VDA: on violated turns, the judge says "violated"; the named guideline
  does not matter.
* CLA: every turn has both the right guideline and the right flag.

Reward models cannot name guidelines, so their relaxed SGA and CLA look at
the violation flag only.  A metric with no turns to score is ``None`` and is
left out of every mean.
"""

from __future__ import annotations

import csv
import enum
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from policysim.errors import PolicySimError
from policysim.judging import PROMPT_HASH, JudgeMode, JudgeRun, TurnPrediction
from policysim.model import (
    GuidelineCategory,
    GuidelineRef,
    IoFailure,
    LabeledDialogue,
    MalformedRecord,
    TurnLabel,
    dumps_record,
    jsonl_lines,
)

AVERAGING = "mean over runs per conversation, then mean over conversations per (judge, domain)"


class LengthMismatch(PolicySimError, ValueError):
    pass


class OrphanRun(PolicySimError):
    pass


def _check(labels: Sequence[TurnLabel], preds: Sequence[TurnPrediction]) -> None:
    if len(labels) != len(preds):
        raise LengthMismatch(f"{len(labels)} labels but {len(preds)} predictions")


def guideline_match(truth: GuidelineRef, pred: GuidelineRef | None) -> bool:
    if pred is None or pred.category is not truth.category or pred.key != truth.key:
        return False
    return truth.category is not GuidelineCategory.WORKFLOW or pred.phase_index == truth.phase_index


def _flag_ok(lab: TurnLabel, p: TurnPrediction) -> bool:
    return not p.unparseable and p.violated == lab.violated


def _ratio(hits: list[bool]) -> float | None:
    return sum(hits) / len(hits) if hits else None


def score_sga(labels: Sequence[TurnLabel], preds: Sequence[TurnPrediction]) -> float | None:
    _check(labels, preds)
    return _ratio([guideline_match(lab.guideline, p.guideline) and _flag_ok(lab, p)
                   for lab, p in zip(labels, preds) if not lab.violated])


def score_vda(labels: Sequence[TurnLabel], preds: Sequence[TurnPrediction]) -> float | None:
    _check(labels, preds)
    return _ratio([_flag_ok(lab, p) for lab, p in zip(labels, preds) if lab.violated])


def score_cla(labels: Sequence[TurnLabel], preds: Sequence[TurnPrediction],
              violation_label_only: bool = False) -> bool:
    """Every turn right.  ``violation_label_only`` drops the guideline check."""
    _check(labels, preds)
    return all(_flag_ok(lab, p) and (violation_label_only or guideline_match(lab.guideline, p.guideline))
               for lab, p in zip(labels, preds))


@dataclass(frozen=True)
class ConversationScore:
    dialogue_id: str
    sga: float | None
    vda: float | None
    cla: bool
    mode: JudgeMode = JudgeMode.CHAT


def score_relaxed(labels: Sequence[TurnLabel], preds: Sequence[TurnPrediction],
                  dialogue_id: str = "", mode: JudgeMode = JudgeMode.REWARD_CLS) -> ConversationScore:
    """Flag-only SGA and CLA, for judges that cannot name guidelines."""
    _check(labels, preds)
    sga = _ratio([_flag_ok(lab, p) for lab, p in zip(labels, preds) if not lab.violated])
    return ConversationScore(dialogue_id, sga, score_vda(labels, preds),
                             score_cla(labels, preds, violation_label_only=True), mode)


def score_run(dialogue: LabeledDialogue, run: JudgeRun, relaxed: bool | None = None,
              cla_violation_label_only: bool = False) -> ConversationScore:
    """Score one run.  An unparseable run scores zero on every defined metric.

    ``relaxed=None`` picks the relaxed metrics for reward-model runs.
    """
    labels = dialogue.labels
    if relaxed is None:
        relaxed = run.mode is not JudgeMode.CHAT
    if run.unparseable:
        has_c = any(not lab.violated for lab in labels)
        has_v = any(lab.violated for lab in labels)
        return ConversationScore(dialogue.dialogue_id, 0.0 if has_c else None, 0.0 if has_v else None,
                                 False, run.mode)
    if relaxed:
        return score_relaxed(labels, run.predictions, dialogue.dialogue_id, run.mode)
    return ConversationScore(dialogue.dialogue_id, score_sga(labels, run.predictions),
                             score_vda(labels, run.predictions),
                             score_cla(labels, run.predictions, cla_violation_label_only), run.mode)


# -- aggregation ---------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    judge: str
    domain: str
    sga: float | None
    vda: float | None
    cla: float | None
    conversations: int
    runs: int
    compliant_turns: int
    violated_turns: int
    unparseable_runs: int


@dataclass(frozen=True)
class BenchmarkReport:
    rows: tuple[ReportRow, ...]
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def row(self, judge: str, domain: str) -> ReportRow:
        for r in self.rows:
            if r.judge == judge and r.domain == domain:
                return r
        raise KeyError((judge, domain))


def _mean(values: Iterable[float | None]) -> float | None:
    kept = [v for v in values if v is not None]
    return float(np.mean(kept)) if kept else None


def aggregate(runs: Iterable[JudgeRun], corpus: Sequence[LabeledDialogue], *, relaxed: bool | None = None,
              cla_violation_label_only: bool = False) -> BenchmarkReport:
    by_id = {d.dialogue_id: d for d in corpus}
    grouped: dict[tuple[str, str], list[JudgeRun]] = defaultdict(list)
    for run in runs:
        if run.dialogue_id not in by_id:
            raise OrphanRun(f"predictions for unknown dialogue {run.dialogue_id!r} (judge {run.judge_id})")
        grouped[(run.judge_id, run.dialogue_id)].append(run)

    per_cell: dict[tuple[str, str], list[tuple[LabeledDialogue, list[ConversationScore], int]]] = defaultdict(list)
    modes = set()
    for (judge, did), rs in grouped.items():
        dlg = by_id[did]
        scores = [score_run(dlg, r, relaxed, cla_violation_label_only) for r in rs]
        modes.update(r.mode.value for r in rs)
        per_cell[(judge, dlg.domain)].append((dlg, scores, sum(r.unparseable for r in rs)))

    rows = []
    for (judge, domain), items in sorted(per_cell.items()):
        sga = [_mean(s.sga for s in scores) for _, scores, _ in items]
        vda = [_mean(s.vda for s in scores) for _, scores, _ in items]
        cla = [_mean(float(s.cla) for s in scores) for _, scores, _ in items]
        rows.append(ReportRow(
            judge, domain, _mean(sga), _mean(vda), _mean(cla),
            conversations=len(items), runs=sum(len(s) for _, s, _ in items),
            compliant_turns=sum(d.n_turns - d.n_violations for d, _, _ in items),
            violated_turns=sum(d.n_violations for d, _, _ in items),
            unparseable_runs=sum(u for _, _, u in items)))
    meta = {"averaging": AVERAGING, "relaxed": relaxed if relaxed is not None else "by mode",
            "cla_violation_label_only": cla_violation_label_only, "modes": sorted(modes),
            "judge_prompt_hash": PROMPT_HASH}
    return BenchmarkReport(tuple(rows), meta)


# -- rendering -----------------------------------------------------------------

COLUMNS = ("judge", "domain", "sga", "vda", "cla", "conversations", "runs",
           "compliant_turns", "violated_turns", "unparseable_runs")


def _pct(v: float | None) -> str:
    return "n/a" if v is None else f"{100 * v:.2f}"


def report_to_dict(report: BenchmarkReport) -> dict[str, Any]:
    return {"metadata": dict(report.metadata), "rows": [asdict(r) for r in report.rows]}


def report_from_dict(d: Mapping[str, Any]) -> BenchmarkReport:
    return BenchmarkReport(tuple(ReportRow(**r) for r in d["rows"]), dict(d.get("metadata", {})))


def render_report(report: BenchmarkReport, fmt: str = "table") -> str:
    """``table`` and ``csv`` show percentages to two decimals; ``json`` keeps raw values."""
    rows = sorted(report.rows, key=lambda r: (r.judge, r.domain))
    if fmt == "json":
        return json.dumps(report_to_dict(BenchmarkReport(tuple(rows), report.metadata)), indent=2,
                          sort_keys=True) + "\n"
    cells = [[r.judge, r.domain, _pct(r.sga), _pct(r.vda), _pct(r.cla), str(r.conversations), str(r.runs),
              str(r.compliant_turns), str(r.violated_turns), str(r.unparseable_runs)] for r in rows]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        w.writerows(cells)
        return buf.getvalue()
    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}")
    head = ["Judge", "Domain", "SGA %", "VDA %", "CLA %", "Conv.", "Runs", "Compliant", "Violated", "Unparsed"]
    widths = [max(len(head[i]), *(len(c[i]) for c in cells)) for i in range(len(head))]
    fmt_row = lambda row: "  ".join(c.ljust(w) if i < 2 else c.rjust(w)  # noqa: E731
                                    for i, (c, w) in enumerate(zip(row, widths)))
    lines = [fmt_row(head), "  ".join("-" * w for w in widths), *(fmt_row(c) for c in cells)]
    return "\n".join(lines) + "\n"


def save_report(report: BenchmarkReport, path: str | Path) -> None:
    try:
        Path(path).write_text(render_report(report, "json"), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(path, str(exc)) from exc


def load_report(path: str | Path) -> BenchmarkReport:
    try:
        return report_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except OSError as exc:
        raise IoFailure(path, str(exc)) from exc
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise IoFailure(path, f"not a report file: {exc}") from exc


# -- error taxonomy (manual annotation records) --------------------------------

class ErrorMetric(str, enum.Enum):
    SGA = "SGA"
    VDA = "VDA"


class ErrorType(str, enum.Enum):
    TYPE1 = "Type1"
    TYPE2 = "Type2"
    TYPE3 = "Type3"
    TYPE4 = "Type4"
    TYPE5 = "Type5"
    TYPE6 = "Type6"
    TYPE7 = "Type7"
    TYPE8 = "Type8"


ERROR_TYPE_NAMES = {
    ErrorType.TYPE1: "scope mis-attribution",
    ErrorType.TYPE2: "semantic misunderstanding",
    ErrorType.TYPE3: "false negative",
    ErrorType.TYPE4: "false positive",
    ErrorType.TYPE5: "overly strict",
    ErrorType.TYPE6: "non-equivalent behaviour accepted",
    ErrorType.TYPE7: "reasoning chain error",
    ErrorType.TYPE8: "ignored key evidence",
}


@dataclass(frozen=True)
class ErrorTag:
    dialogue_id: str
    turn: int
    metric: ErrorMetric
    error_type: ErrorType
    note: str = ""


def save_error_tags(tags: Iterable[ErrorTag], path: str | Path) -> None:
    body = "".join(dumps_record({**asdict(t), "metric": t.metric.value, "error_type": t.error_type.value}) + "\n"
                   for t in tags)
    try:
        Path(path).write_text(body, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(path, str(exc)) from exc


def load_error_tags(path: str | Path) -> list[ErrorTag]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(path, str(exc)) from exc
    out = []
    for no, line in jsonl_lines(text):
        try:
            d = json.loads(line)
            turn = d["turn"]
            if not isinstance(turn, int) or turn < 1:
                raise ValueError("turn must be a positive integer")
            out.append(ErrorTag(d["dialogue_id"], turn, ErrorMetric(d["metric"]),
                                ErrorType(d["error_type"]), d.get("note", "")))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise MalformedRecord(no, str(exc)) from None
    return out
