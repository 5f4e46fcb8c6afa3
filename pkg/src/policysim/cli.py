"""Command-line entry point: one subcommand per pipeline stage plus ``run-all``.

Exit codes: 0 success, 1 partial failure (rejected or aborted dialogues,
unparseable judge runs), 2 fatal error or bad configuration.  Every command
writes a ``<output>.manifest.json`` next to its main output.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

from policysim import forge, judging, metrics, scaling, synth
from policysim.config import RULE_SELECTOR, ConfigError, Gateways, PipelineConfig, load_config
from policysim.errors import PolicySimError
from policysim.gateway import AuditLog, GatewayError
from policysim.model import load_corpus, save_corpus
from policysim.rng import derive_seed

log = logging.getLogger("policysim")


# -- manifests -----------------------------------------------------------------

def file_hash(path: str | Path) -> str | None:
    p = Path(path)
    if not p.is_file():
        return None
    return hashlib.sha256(p.read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    inputs: dict[str, str | None] = field(default_factory=dict)
    outputs: dict[str, str | None] = field(default_factory=dict)
    provider_calls: dict[str, int] = field(default_factory=dict)
    wall_time_s: float = 0.0
    status: str = "ok"
    notes: dict[str, Any] = field(default_factory=dict)

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: Path) -> "RunManifest | None":
        try:
            return cls(**json.loads(path.read_text(encoding="utf-8")))
        except (OSError, ValueError, TypeError):
            return None


def manifest_path(output: Path) -> Path:
    return output.with_name(output.name + ".manifest.json")


class Stage:
    """Book-keeping around one stage: hashes, provider calls, timing, manifest."""

    def __init__(self, command: str, cfg_hash: str, seed: int, audit: AuditLog,
                 inputs: dict[str, Path], outputs: dict[str, Path]):
        self.command, self.audit = command, audit
        self.inputs, self.outputs = inputs, outputs
        self.manifest = RunManifest(command, cfg_hash, seed,
                                    {k: file_hash(p) for k, p in inputs.items()})
        self._t0 = time.perf_counter()
        self._calls0 = dict(audit.counts())

    @property
    def main(self) -> Path:
        return next(iter(self.outputs.values()))

    def up_to_date(self) -> bool:
        old = RunManifest.read(manifest_path(self.main))
        if old is None or old.status == "failed":
            return False
        current = {k: file_hash(p) for k, p in self.outputs.items()}
        return (old.command == self.command and old.config_hash == self.manifest.config_hash
                and old.seed == self.manifest.seed and old.inputs == self.manifest.inputs
                and list(old.outputs.values()) == list(current.values()) and None not in current.values())

    def finish(self, status: str = "ok", **notes: Any) -> None:
        m = self.manifest
        m.outputs = {k: file_hash(p) for k, p in self.outputs.items()}
        m.provider_calls = {k: v - self._calls0.get(k, 0) for k, v in self.audit.counts().items()
                            if v - self._calls0.get(k, 0)}
        m.wall_time_s = round(time.perf_counter() - self._t0, 3)
        m.status = status
        m.notes = notes
        m.write(manifest_path(self.main))


def _json_dump(obj: Any, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- stage bodies --------------------------------------------------------------

def _cfg_hash(cfg: PipelineConfig | None) -> str:
    return cfg.digest if cfg is not None else ""


def do_scale(cfg: PipelineConfig, gws: Gateways, seeds_path: Path, out: Path, domain: str | None,
             seed: int) -> int:
    stage = Stage("scale", _cfg_hash(cfg), seed, gws.audit, {"seeds": seeds_path}, {"pool": out})
    seeds = scaling.load_pool(seeds_path, domain or cfg.domain)
    roles = scaling.ScaleRoles(gws.role("generator"), gws.judges(), gws.role("refiner"), gws.role("embedder"),
                               gws.role("similarity_judge"))
    pool, refine_trace, dedup_trace = scaling.scale_pool(seeds, roles, cfg.scale, cfg.workers)
    out.parent.mkdir(parents=True, exist_ok=True)
    scaling.save_pool(pool, out)
    _json_dump({"refine": refine_trace.to_dict(), "dedup": dedup_trace.to_dict()},
               out.with_name(out.stem + ".trace.json"))
    stage.finish(workflows=len(pool.workflows), conditions=len(pool.conditions),
                 removed=len(dedup_trace.of("remove")),
                 rewritten=sum(e["accepted"] for e in dedup_trace.of("rewrite")))
    return 0


def _synth_roles(cfg: PipelineConfig, gws: Gateways, panel: int) -> synth.SynthRoles:
    sel_name = cfg.roles["selector"]
    selector = synth.RuleSelector() if sel_name == RULE_SELECTOR else synth.LLMSelector(gws.provider(sel_name))
    return synth.SynthRoles(selector, gws.role("assistant"), gws.role("user_sim"), gws.role("persona"),
                            gws.judges(panel) if panel else ())


def do_seed_dialogues(cfg: PipelineConfig, gws: Gateways, pool_path: Path, out: Path, seed: int) -> int:
    stage = Stage("seed-dialogues", _cfg_hash(cfg), seed, gws.audit, {"pool": pool_path}, {"corpus": out})
    pool = scaling.load_pool(pool_path, cfg.domain)
    dialogues, report = synth.seed_dialogues(pool, _synth_roles(cfg, gws, cfg.panel), cfg.synth,
                                             derive_seed(seed, "synth"), cfg.workers)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(dialogues, out)
    failed = report.rejected + report.aborted
    stage.finish("partial" if failed else "ok", **report.to_dict())
    return 1 if failed else 0


def do_forge(cfg: PipelineConfig, gws: Gateways, pool_path: Path, seeds_path: Path, out: Path,
             seed: int) -> int:
    stage = Stage("forge", _cfg_hash(cfg), seed, gws.audit, {"pool": pool_path, "seed_dialogues": seeds_path},
                  {"variants": out})
    pool = scaling.load_pool(pool_path, cfg.domain)
    seeds = load_corpus(seeds_path)
    roles = forge.ForgeRoles(gws.role("generator"), gws.role("constraint_judge"), gws.role("assistant"),
                             gws.role("content_judge"), gws.role("compliance_judge"))
    oracles = [p for w in pool.workflows for p in w.phases] + list(pool.conditions)
    store, report = forge.forge_variants(oracles, seeds, roles, cfg.forge, cfg.workers)
    out.parent.mkdir(parents=True, exist_ok=True)
    forge.save_variants(store, out)
    stage.finish(**report.to_dict())
    return 0


def do_synth(cfg: PipelineConfig, gws: Gateways, pool_path: Path, variants_path: Path, out: Path,
             seed: int, count: int | None = None) -> int:
    stage = Stage("synth", _cfg_hash(cfg), seed, gws.audit, {"pool": pool_path, "variants": variants_path},
                  {"corpus": out})
    pool = scaling.load_pool(pool_path, cfg.domain)
    store = forge.load_variants(variants_path)
    scfg = cfg.synth if count is None else replace(cfg.synth, count=count)
    dialogues, report = synth.synthesize(pool, store, _synth_roles(cfg, gws, cfg.panel), scfg,
                                         derive_seed(seed, "synth"), cfg.workers)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(dialogues, out)
    _json_dump(report.to_dict(), out.with_name(out.stem + ".report.json"))
    failed = report.rejected + report.aborted
    stage.finish("partial" if failed else "ok", **report.to_dict())
    return 1 if failed else 0


def do_judge(cfg: PipelineConfig, gws: Gateways, corpus_path: Path, judges: Sequence[Any], out: Path,
             seed: int, lenient: bool = False) -> int:
    stage = Stage("judge", _cfg_hash(cfg), seed, gws.audit, {"corpus": corpus_path}, {"predictions": out})
    corpus = load_corpus(corpus_path, strict=not lenient)
    runs: list[judging.JudgeRun] = []
    for bj in judges:
        runs += judging.run_benchmark(gws.provider(bj.provider), corpus, bj.runs, mode=bj.mode,
                                      judge_id=bj.provider, votes=bj.votes, seed=derive_seed(seed, "judge"),
                                      workers=cfg.workers)
    out.parent.mkdir(parents=True, exist_ok=True)
    judging.save_runs(runs, out)
    bad = sum(r.unparseable for r in runs)
    stage.finish("partial" if bad else "ok", runs=len(runs), unparseable_runs=bad,
                 prompt_hash=judging.PROMPT_HASH)
    return 1 if bad else 0


def do_score(cfg: PipelineConfig | None, corpus_path: Path, preds_path: Path, out: Path, fmt: str,
             relaxed: bool | None, cla_label_only: bool, seed: int, audit: AuditLog,
             echo: Callable[[str], None] | None = print) -> int:
    stage = Stage("score", _cfg_hash(cfg), seed, audit, {"corpus": corpus_path, "predictions": preds_path},
                  {"report": out})
    report = metrics.aggregate(judging.load_runs(preds_path), load_corpus(corpus_path, strict=False),
                               relaxed=relaxed, cla_violation_label_only=cla_label_only)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.save_report(report, out)
    if echo:
        echo(metrics.render_report(report, fmt).rstrip("\n"))
    stage.finish(rows=len(report.rows))
    return 0


def do_report(in_path: Path, fmt: str, out: Path | None, echo: Callable[[str], None] | None = print) -> str:
    text = metrics.render_report(metrics.load_report(in_path), fmt)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    if echo:
        echo(text.rstrip("\n"))
    return text


# -- run-all -------------------------------------------------------------------

def run_all(cfg: PipelineConfig, seed: int | None = None, force: bool = False, audit: AuditLog | None = None,
            echo: Callable[[str], None] | None = print) -> int:
    """scale, seed dialogues, forge, synth, judge, score, report; stages whose
    manifest still matches their inputs and outputs are skipped."""
    seed = cfg.seed if seed is None else seed
    gws = Gateways(cfg, audit)
    P = cfg.path
    P("out_dir").mkdir(parents=True, exist_ok=True)
    worst = 0

    def step(name: str, inputs: dict[str, Path], output: Path, body: Callable[[], int]) -> None:
        nonlocal worst
        probe = Stage(name, cfg.digest, seed, gws.audit, inputs, {"main": output})
        if not force and probe.up_to_date():
            log.info("%s: up to date, reusing %s", name, output)
            return
        log.info("%s: running", name)
        worst = max(worst, body())

    step("scale", {"seeds": P("seed_pool")}, P("pool"),
         lambda: do_scale(cfg, gws, P("seed_pool"), P("pool"), cfg.domain, seed))
    step("seed-dialogues", {"pool": P("pool")}, P("seed_dialogues"),
         lambda: do_seed_dialogues(cfg, gws, P("pool"), P("seed_dialogues"), seed))
    step("forge", {"pool": P("pool"), "seed_dialogues": P("seed_dialogues")}, P("variants"),
         lambda: do_forge(cfg, gws, P("pool"), P("seed_dialogues"), P("variants"), seed))
    step("synth", {"pool": P("pool"), "variants": P("variants")}, P("corpus"),
         lambda: do_synth(cfg, gws, P("pool"), P("variants"), P("corpus"), seed))
    if not cfg.benchmark:
        raise ConfigError("benchmark.judges", "run-all needs at least one benchmark judge")
    step("judge", {"corpus": P("corpus")}, P("predictions"),
         lambda: do_judge(cfg, gws, P("corpus"), cfg.benchmark, P("predictions"), seed))
    step("score", {"corpus": P("corpus"), "predictions": P("predictions")}, P("report"),
         lambda: do_score(cfg, P("corpus"), P("predictions"), P("report"), "table", cfg.relaxed,
                          cfg.cla_violation_label_only, seed, gws.audit, echo=None))
    do_report(P("report"), "table", P("report_table"), echo)
    return worst


# -- argument parsing ----------------------------------------------------------

def _global_flags(parser: argparse.ArgumentParser, default: Any) -> None:
    parser.add_argument("--config", type=Path, default=default, help="pipeline config JSON")
    parser.add_argument("--seed", type=int, default=default, help="root seed (overrides config)")
    parser.add_argument("--workers", type=int, default=default, help="worker pool width (overrides config)")
    parser.add_argument("-v", "--verbose", action="store_true", default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="policysim", description=__doc__.splitlines()[0])
    _global_flags(parser, None)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scale", parents=[common], help="expand seed guidelines into a deduplicated pool")
    p.add_argument("--domain")
    p.add_argument("--seeds", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--rewrites", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--intents", type=int)
    p.add_argument("--variants", type=int)

    p = sub.add_parser("forge", parents=[common], help="search for undetectable violation variants")
    p.add_argument("--pool", type=Path, required=True)
    p.add_argument("--seed-dialogues", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--batch", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--harvest-all", action="store_true")
    p.add_argument("--no-prefilter", action="store_true", help="skip the three constraint checks")

    p = sub.add_parser("synth", parents=[common], help="simulate labeled dialogues")
    p.add_argument("--pool", type=Path, required=True)
    p.add_argument("--variants", type=Path, help="variant file (not needed with --seed-dialogues)")
    p.add_argument("--count", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--max-turns", type=int)
    p.add_argument("--panel", type=int, help="verifier panel size (odd, >= 3; 0 disables)")
    p.add_argument("--conditions-per-doc", type=int)
    p.add_argument("--retry-rejected", type=int, help="extra attempts for rejected dialogues")
    p.add_argument("--seed-dialogues", action="store_true",
                   help="one violation-free dialogue per workflow, as forge input")

    p = sub.add_parser("judge", parents=[common], help="run a benchmark judge over a corpus")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--judge", required=True, help="provider name from the config")
    p.add_argument("--mode", choices=[m.value for m in judging.JudgeMode], default="chat")
    p.add_argument("--runs", type=int)
    p.add_argument("--votes", type=int, default=3)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--lenient", action="store_true", help="ignore unknown corpus fields")

    p = sub.add_parser("score", parents=[common], help="compute SGA/VDA/CLA")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--preds", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--format", choices=["table", "json", "csv"], default="table")
    p.add_argument("--relaxed", action="store_true", help="violation-label-only SGA and CLA for every run")
    p.add_argument("--cla-violation-label-only", action="store_true")

    p = sub.add_parser("report", parents=[common], help="render a saved report")
    p.add_argument("--in", dest="in_path", type=Path, required=True)
    p.add_argument("--format", choices=["table", "json", "csv"], default="table")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("run-all", parents=[common], help="every stage in order, resuming where possible")
    p.add_argument("--force", action="store_true", help="rerun stages even when up to date")
    return parser


def _need_config(args: argparse.Namespace) -> PipelineConfig:
    if args.config is None:
        raise ConfigError("--config", f"the {args.command} command needs a config file")
    cfg = load_config(args.config)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    return cfg


def _dispatch(args: argparse.Namespace) -> int:
    cmd = args.command
    if cmd == "report":
        do_report(args.in_path, args.format, args.out)
        return 0
    if cmd == "score":
        cfg = load_config(args.config) if args.config is not None else None
        relaxed = True if args.relaxed else (cfg.relaxed if cfg else None)
        cla_only = args.cla_violation_label_only or bool(cfg and cfg.cla_violation_label_only)
        return do_score(cfg, args.corpus, args.preds, args.out, args.format, relaxed, cla_only,
                        args.seed if args.seed is not None else (cfg.seed if cfg else 0), AuditLog())

    cfg = _need_config(args)
    seed = args.seed if args.seed is not None else cfg.seed
    if cmd == "run-all":
        return run_all(cfg, seed, args.force)
    gws = Gateways(cfg)
    if cmd == "scale":
        sim = scaling.SimilarityConfig(
            alpha=args.alpha if args.alpha is not None else cfg.similarity.alpha,
            tau=args.tau if args.tau is not None else cfg.similarity.tau,
            max_rewrites=args.rewrites if args.rewrites is not None else cfg.similarity.max_rewrites)
        knobs = {k: getattr(args, k) for k in ("iterations", "intents", "variants") if getattr(args, k) is not None}
        cfg = replace(cfg, similarity=sim, scale=replace(cfg.scale, similarity=sim, **knobs))
        gws.cfg = cfg
        return do_scale(cfg, gws, args.seeds, args.out, args.domain, seed)
    if cmd == "forge":
        knobs = {"batch_size": args.batch, "max_rounds": args.rounds}
        fcfg = replace(cfg.forge, **{k: v for k, v in knobs.items() if v is not None})
        if args.harvest_all:
            fcfg = replace(fcfg, harvest_all=True)
        if args.no_prefilter:
            fcfg = replace(fcfg, prefilter=False)
        cfg = replace(cfg, forge=fcfg)
        gws.cfg = cfg
        return do_forge(cfg, gws, args.pool, args.seed_dialogues, args.out, seed)
    if cmd == "synth":
        sim = cfg.synth.simulation
        if args.max_turns is not None:
            sim = replace(sim, max_turns=args.max_turns)
        knobs = {"conditions_per_doc": args.conditions_per_doc, "retry_rejected": args.retry_rejected}
        scfg = replace(cfg.synth, simulation=sim, **{k: v for k, v in knobs.items() if v is not None})
        panel = cfg.panel if args.panel is None else args.panel
        if panel and (panel < 3 or panel % 2 == 0 or panel > len(cfg.judges)):
            raise ConfigError("--panel", f"must be 0 or an odd number in [3, {len(cfg.judges)}]")
        cfg = replace(cfg, synth=scfg, panel=panel)
        gws.cfg = cfg
        if args.seed_dialogues:
            return do_seed_dialogues(cfg, gws, args.pool, args.out, seed)
        if args.variants is None:
            raise ConfigError("--variants", "required unless --seed-dialogues is given")
        return do_synth(cfg, gws, args.pool, args.variants, args.out, seed, args.count)
    if cmd == "judge":
        from policysim.config import BenchmarkJudge

        if args.judge not in cfg.providers:
            raise ConfigError("--judge", f"unknown provider {args.judge!r}")
        runs = args.runs if args.runs is not None else (4 if args.mode == "chat" else 1)
        gws = Gateways(cfg, overrides={args.judge: {"corpus": str(args.corpus.resolve())}})
        return do_judge(cfg, gws, args.corpus, [BenchmarkJudge(args.judge, args.mode, runs, args.votes)],
                        args.out, seed, args.lenient)
    raise ConfigError("command", f"unknown command {cmd!r}")  # pragma: no cover


def run_command(argv: Sequence[str] | None = None, stderr=None) -> int:
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=stderr)
        return 2
    except (PolicySimError, GatewayError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=stderr)
        return 2


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
