"""Pipeline configuration: one JSON file naming providers, role bindings and knobs.

String values may reference environment variables as ``${NAME}``.  Relative
paths resolve against the config file's directory.  A minimal offline
config::

    {
      "domain": "airline",
      "seed": 7,
      "providers": {
        "world": {"kind": "scripted", "script": "world"},
        "oracle": {"kind": "scripted", "script": "perfect_judge"}
      },
      "roles": {"generator": "world", "assistant": "world", "user_sim": "world",
                "judges": ["world", "world", "world"]},
      "benchmark": {"judges": ["oracle"]},
      "paths": {"out_dir": "run"}
    }
"""

from __future__ import annotations

import hashlib
import importlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from policysim.errors import PolicySimError
from policysim.forge import ForgeConfig
from policysim.gateway import AuditLog, Gateway, HttpProvider, ScriptedProvider
from policysim.offline import SCRIPTS, seed_pool_path
from policysim.scaling import ScaleConfig, SimilarityConfig
from policysim.synth import SimulationConfig, SynthConfig


class ConfigError(PolicySimError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def interpolate(value: Any, env: Mapping[str, str], where: str = "") -> Any:
    if isinstance(value, str):
        def sub(m: re.Match) -> str:
            if m.group(1) not in env:
                raise ConfigError(where, f"environment variable {m.group(1)} is not set")
            return env[m.group(1)]
        return _ENV_RE.sub(sub, value)
    if isinstance(value, dict):
        return {k: interpolate(v, env, f"{where}.{k}" if where else k) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate(v, env, f"{where}[{i}]") for i, v in enumerate(value)]
    return value


@dataclass(frozen=True)
class ProviderConfig:
    name: str
    kind: str
    endpoint: str = ""
    model: str = ""
    token_env: str | None = None
    timeout: float = 60.0
    max_attempts: int = 3
    backoff: float = 1.0
    max_in_flight: int = 5
    script: str = ""
    options: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class BenchmarkJudge:
    provider: str
    mode: str = "chat"
    runs: int = 4
    votes: int = 3


ROLE_DEFAULTS = {
    # optional role -> role it falls back to
    "selector": "generator", "refiner": "generator", "embedder": "generator",
    "similarity_judge": "generator", "persona": "generator", "constraint_judge": "generator",
    "content_judge": "generator", "compliance_judge": "generator", "scorer": "generator",
}
REQUIRED_ROLES = ("generator", "assistant", "user_sim")
RULE_SELECTOR = "rule"


@dataclass(frozen=True)
class PipelineConfig:
    domain: str
    seed: int
    workers: int
    providers: Mapping[str, ProviderConfig]
    roles: Mapping[str, str]
    judges: tuple[str, ...]
    similarity: SimilarityConfig
    scale: ScaleConfig
    forge: ForgeConfig
    synth: SynthConfig
    panel: int
    benchmark: tuple[BenchmarkJudge, ...]
    relaxed: bool | None
    cla_violation_label_only: bool
    paths: Mapping[str, Path]
    digest: str

    def path(self, name: str) -> Path:
        return self.paths[name]


def _section(raw: Mapping[str, Any], name: str) -> dict[str, Any]:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(name, "expected an object")
    return value


def _build(cls, data: Mapping[str, Any], where: str, **extra):
    try:
        return cls(**data, **extra)
    except TypeError as exc:
        raise ConfigError(where, str(exc)) from None
    except ValueError as exc:
        raise ConfigError(where, str(exc)) from None


def _rate(value: Any, where: str) -> float:
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not 0.0 <= value <= 1.0:
        raise ConfigError(where, "must be a number in [0, 1]")
    return float(value)


PATH_NAMES = ("pool", "seed_dialogues", "variants", "corpus", "predictions", "report", "report_table")
PATH_FILES = {"pool": "pool.json", "seed_dialogues": "seed_dialogues.jsonl", "variants": "variants.json",
              "corpus": "corpus.jsonl", "predictions": "predictions.jsonl", "report": "report.json",
              "report_table": "report.txt"}


def parse_config(raw: Any, base_dir: Path, env: Mapping[str, str] | None = None,
                 digest: str = "") -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a JSON object")
    raw = interpolate(raw, os.environ if env is None else env)
    domain = raw.get("domain", "airline")
    if not isinstance(domain, str) or not domain:
        raise ConfigError("domain", "expected a non-empty string")
    seed = raw.get("seed", 0)
    workers = raw.get("workers", 1)
    for name, v in (("seed", seed), ("workers", workers)):
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            raise ConfigError(name, "expected a non-negative integer")

    providers = {}
    for name, p in _section(raw, "providers").items():
        where = f"providers.{name}"
        if not isinstance(p, dict):
            raise ConfigError(where, "expected an object")
        kind = p.get("kind")
        if kind not in ("openai", "scripted"):
            raise ConfigError(f"{where}.kind", "must be 'openai' or 'scripted'")
        p = dict(p)
        opts = dict(p.get("options") or {})
        if isinstance(opts.get("corpus"), str):
            opts["corpus"] = str((base_dir / opts["corpus"]).resolve())
        p["options"] = opts
        pc = _build(ProviderConfig, p, where, name=name)
        if kind == "openai" and not (pc.endpoint and pc.model):
            raise ConfigError(where, "openai providers need endpoint and model")
        if kind == "scripted" and not pc.script:
            raise ConfigError(f"{where}.script", "scripted providers need a script name or module:attr")
        providers[name] = pc
    if not providers:
        raise ConfigError("providers", "at least one provider is required")

    roles_raw = _section(raw, "roles")
    roles: dict[str, str] = {}
    for r in REQUIRED_ROLES:
        if r not in roles_raw:
            raise ConfigError(f"roles.{r}", "required role is not bound")
    for r, v in roles_raw.items():
        if r == "judges":
            continue
        if r not in REQUIRED_ROLES and r not in ROLE_DEFAULTS:
            raise ConfigError(f"roles.{r}", "unknown role")
        if not isinstance(v, str) or (v not in providers and not (r == "selector" and v == RULE_SELECTOR)):
            raise ConfigError(f"roles.{r}", f"unknown provider {v!r}")
        roles[r] = v
    for r, fallback in ROLE_DEFAULTS.items():
        roles.setdefault(r, roles[fallback])
    judges = roles_raw.get("judges", [])
    if not isinstance(judges, list) or not judges:
        raise ConfigError("roles.judges", "expected a non-empty list of provider names")
    for i, j in enumerate(judges):
        if j not in providers:
            raise ConfigError(f"roles.judges[{i}]", f"unknown provider {j!r}")

    similarity = _build(SimilarityConfig, _section(raw, "similarity"), "similarity")
    scale = _build(ScaleConfig, _section(raw, "scale"), "scale", similarity=similarity)
    forge = _build(ForgeConfig, _section(raw, "forge"), "forge")
    sim_raw = dict(_section(raw, "simulation"))
    panel = sim_raw.pop("panel", 3)
    synth_keys = {"count", "conditions_per_doc", "verify", "retry_rejected"}
    synth_kw = {k: sim_raw.pop(k) for k in list(sim_raw) if k in synth_keys}
    simulation = _build(SimulationConfig, sim_raw, "simulation")
    inj = _section(raw, "injection")
    unknown = set(inj) - {"workflow_rate", "condition_prob"}
    if unknown:
        raise ConfigError("injection", f"unknown fields {sorted(unknown)}")
    synth = _build(SynthConfig, synth_kw, "simulation",
                   workflow_rate=_rate(inj.get("workflow_rate", 0.30), "injection.workflow_rate"),
                   condition_prob=_rate(inj.get("condition_prob", 0.50), "injection.condition_prob"),
                   simulation=simulation)
    if not isinstance(panel, int) or (panel and (panel < 3 or panel % 2 == 0)):
        raise ConfigError("simulation.panel", "must be 0 (no verification) or an odd number >= 3")
    if panel > len(judges):
        raise ConfigError("simulation.panel", f"needs {panel} judges but roles.judges lists {len(judges)}")

    bench_raw = _section(raw, "benchmark")
    bench = []
    for i, j in enumerate(bench_raw.get("judges", [])):
        where = f"benchmark.judges[{i}]"
        spec = {"provider": j} if isinstance(j, str) else j
        if not isinstance(spec, dict):
            raise ConfigError(where, "expected a provider name or an object")
        spec = {"runs": bench_raw.get("runs", 4), "mode": bench_raw.get("mode", "chat"),
                "votes": bench_raw.get("votes", 3), **spec}
        bj = _build(BenchmarkJudge, spec, where)
        if bj.provider not in providers:
            raise ConfigError(where, f"unknown provider {bj.provider!r}")
        if bj.mode not in ("chat", "reward-cls", "reward-gen"):
            raise ConfigError(f"{where}.mode", "must be chat, reward-cls or reward-gen")
        if bj.runs < 1 or bj.votes < 1 or bj.votes % 2 == 0:
            raise ConfigError(where, "runs must be positive and votes a positive odd number")
        bench.append(bj)
    metrics_raw = _section(raw, "metrics")

    paths_raw = _section(raw, "paths")
    out_dir = (base_dir / paths_raw.get("out_dir", "run")).resolve()
    paths = {"out_dir": out_dir}
    for name in PATH_NAMES:
        paths[name] = (base_dir / paths_raw[name]).resolve() if name in paths_raw else out_dir / PATH_FILES[name]
    paths["seed_pool"] = ((base_dir / paths_raw["seed_pool"]).resolve() if "seed_pool" in paths_raw
                          else seed_pool_path(domain))
    unknown = set(paths_raw) - set(PATH_NAMES) - {"out_dir", "seed_pool"}
    if unknown:
        raise ConfigError("paths", f"unknown fields {sorted(unknown)}")

    return PipelineConfig(domain, seed, workers, providers, roles, tuple(judges), similarity, scale, forge,
                          synth, panel, tuple(bench), metrics_raw.get("relaxed"),
                          bool(metrics_raw.get("cla_violation_label_only", False)), paths, digest)


def load_config(path: str | Path, env: Mapping[str, str] | None = None) -> PipelineConfig:
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise ConfigError("", f"cannot read config {p}: {exc.strerror or exc}") from None
    try:
        raw = json.loads(data)
    except ValueError as exc:
        raise ConfigError("", f"config {p} is not valid JSON: {exc}") from None
    return parse_config(raw, p.resolve().parent, env, hashlib.sha256(data).hexdigest())


# -- providers -----------------------------------------------------------------

def resolve_script(name: str):
    if name in SCRIPTS:
        return SCRIPTS[name]
    if ":" in name:
        module, attr = name.split(":", 1)
        try:
            return getattr(importlib.import_module(module), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigError("script", f"cannot load {name!r}: {exc}") from None
    raise ConfigError("script", f"unknown script {name!r}; builtins are {sorted(SCRIPTS)}")


class Gateways:
    """One gateway per provider, shared by every role bound to it, with one audit log."""

    def __init__(self, cfg: PipelineConfig, audit: AuditLog | None = None,
                 overrides: Mapping[str, Mapping[str, Any]] | None = None):
        self.cfg = cfg
        self.audit = audit if audit is not None else AuditLog()
        self.overrides = overrides or {}
        self._made: dict[str, Gateway] = {}

    def provider(self, name: str) -> Gateway:
        if name in self._made:
            return self._made[name]
        pc = self.cfg.providers.get(name)
        if pc is None:
            raise ConfigError(f"providers.{name}", "not defined")
        if pc.kind == "scripted":
            options = {"id": name, "corpus": str(self.cfg.path("corpus")), **pc.options,
                       **self.overrides.get(name, {})}
            provider = resolve_script(pc.script)(options)
            if not isinstance(provider, ScriptedProvider) and not hasattr(provider, "complete"):
                raise ConfigError(f"providers.{name}.script", "factory did not return a provider")
        else:
            provider = HttpProvider(pc.endpoint, pc.model, pc.token_env, pc.timeout, provider_id=name)
        gw = Gateway(provider, audit=self.audit, max_attempts=pc.max_attempts, backoff=pc.backoff,
                     max_in_flight=pc.max_in_flight)
        self._made[name] = gw
        return gw

    def role(self, role: str) -> Gateway:
        return self.provider(self.cfg.roles[role])

    def judges(self, n: int | None = None) -> list[Gateway]:
        names = self.cfg.judges if n is None else self.cfg.judges[:n]
        return [self.provider(j) for j in names]
