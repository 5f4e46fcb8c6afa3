import io
import json
import shutil
import textwrap

import pytest

from policysim.cli import manifest_path, run_all, run_command
from policysim.config import load_config
from policysim.gateway import AuditLog
from policysim.metrics import load_report
from policysim.model import load_corpus

BASE = {
    "domain": "airline", "seed": 7, "workers": 2,
    "providers": {"world": {"kind": "scripted", "script": "world"},
                  "oracle": {"kind": "scripted", "script": "perfect_judge"},
                  "yes_man": {"kind": "scripted", "script": "always_compliant"}},
    "roles": {"generator": "world", "assistant": "world", "user_sim": "world",
              "judges": ["world", "world", "world"]},
    "scale": {"intents": 3, "variants": 2},
    "simulation": {"count": 12},
    "benchmark": {"judges": ["oracle", "yes_man"]},
    "paths": {"out_dir": "out"},
}


def write_cfg(d, **patch):
    cfg = json.loads(json.dumps(BASE))
    for dotted, value in patch.items():
        node = cfg
        *head, last = dotted.split("__")
        for h in head:
            node = node.setdefault(h, {})
        node[last] = value
    d.mkdir(parents=True, exist_ok=True)
    (d / "cfg.json").write_text(json.dumps(cfg))
    return d / "cfg.json"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    path = write_cfg(d)
    assert run_command(["run-all", "--config", str(path)]) == 0
    return d


def test_run_all_outputs_and_identity(pipeline):
    out = pipeline / "out"
    for name in ("pool.json", "seed_dialogues.jsonl", "variants.json", "corpus.jsonl", "predictions.jsonl",
                 "report.json", "report.txt"):
        assert (out / name).is_file(), name
    rep = load_report(out / "report.json")
    oracle = rep.row("oracle", "airline")
    assert (oracle.sga, oracle.vda, oracle.cla) == (1.0, 1.0, 1.0)
    assert rep.row("yes_man", "airline").vda == 0.0
    corpus = load_corpus(out / "corpus.jsonl")
    assert len(corpus) == 12 and all(d.n_violations >= 1 for d in corpus)
    m = json.loads(manifest_path(out / "corpus.jsonl").read_text())
    assert m["status"] == "ok" and m["provider_calls"]["world"] > 0


def test_resume_skips_up_to_date_stages(pipeline):
    cfg = load_config(pipeline / "cfg.json")
    audit = AuditLog()
    assert run_all(cfg, audit=audit, echo=None) == 0
    assert audit.records == []
    # a tampered corpus is regenerated, byte for byte, so judging is not repeated
    corpus = pipeline / "out" / "corpus.jsonl"
    saved = corpus.read_bytes()
    corpus.write_bytes(saved[: len(saved) // 2])
    audit = AuditLog()
    assert run_all(cfg, audit=audit, echo=None) == 0
    assert {r["tag"].split(".")[0] for r in audit.records} == {"synth"}
    assert corpus.read_bytes() == saved
    # missing predictions rerun the judges only
    (pipeline / "out" / "predictions.jsonl").unlink()
    audit = AuditLog()
    assert run_all(cfg, audit=audit, echo=None) == 0
    assert {r["tag"] for r in audit.records} == {"judge.chat"}
    assert load_report(pipeline / "out" / "report.json").row("oracle", "airline").conversations == 12


def test_score_and_report_commands(pipeline, tmp_path, capsys):
    out = pipeline / "out"
    rc = run_command(["score", "--corpus", str(out / "corpus.jsonl"), "--preds", str(out / "predictions.jsonl"),
                      "--out", str(tmp_path / "r.json"), "--format", "csv"])
    assert rc == 0
    assert capsys.readouterr().out.startswith("judge,domain,sga,vda,cla")
    assert run_command(["report", "--in", str(tmp_path / "r.json"), "--format", "json",
                        "--out", str(tmp_path / "r2.json")]) == 0
    assert json.loads((tmp_path / "r2.json").read_text())["rows"][0]["judge"] == "oracle"


def test_judge_command_reward_mode(pipeline, tmp_path):
    out = pipeline / "out"
    rc = run_command(["judge", "--config", str(pipeline / "cfg.json"), "--corpus", str(out / "corpus.jsonl"),
                      "--judge", "oracle", "--mode", "reward-gen", "--out", str(tmp_path / "p.jsonl")])
    assert rc == 0
    assert run_command(["score", "--corpus", str(out / "corpus.jsonl"), "--preds", str(tmp_path / "p.jsonl"),
                        "--out", str(tmp_path / "r.json")]) == 0
    row = load_report(tmp_path / "r.json").rows[0]
    assert (row.sga, row.vda, row.cla, row.runs) == (1.0, 1.0, 1.0, 12)


@pytest.mark.parametrize("argv", [["run-all"], ["run-all", "--config", "/nonexistent/cfg.json"], ["frobnicate"],
                                  ["synth", "--pool", "x"]])
def test_usage_and_config_errors_exit_two(argv):
    err = io.StringIO()
    assert run_command(argv, stderr=err) == 2


def test_invalid_config_value_names_field(tmp_path):
    path = write_cfg(tmp_path, similarity__tau=1.5)
    err = io.StringIO()
    assert run_command(["run-all", "--config", str(path)], stderr=err) == 2
    assert "tau" in err.getvalue()


def test_synth_rejection_exits_one_with_manifest_note(pipeline, tmp_path, monkeypatch):
    (tmp_path / "ps_rejecting_world.py").write_text(textwrap.dedent("""
        import json
        from policysim.gateway import ScriptEntry
        from policysim.offline import world

        def make(options):
            p = world(options)
            no = json.dumps({"adheres": False, "feedback": "wrong step"})
            p.entries.insert(0, ScriptEntry.on("synth.verify", response=lambda r: no
                if r.context["dialogue_id"].endswith("00001") else json.dumps({"adheres": True})))
            return p
    """))
    monkeypatch.syspath_prepend(str(tmp_path))
    providers = dict(BASE["providers"], rej={"kind": "scripted", "script": "ps_rejecting_world:make"})
    path = write_cfg(tmp_path, providers=providers, roles__judges=["rej", "rej", "rej"])
    out = tmp_path / "corpus.jsonl"
    src = pipeline / "out"
    rc = run_command(["synth", "--config", str(path), "--pool", str(src / "pool.json"),
                      "--variants", str(src / "variants.json"), "--count", "3", "--out", str(out)])
    assert rc == 1
    assert len(load_corpus(out)) == 2
    m = json.loads(manifest_path(out).read_text())
    assert m["status"] == "partial" and m["notes"]["rejected"] == 1
    assert m["notes"]["failures"][0]["index"] == 1


def test_zero_workflow_rate_gives_clean_corpus(tmp_path):
    path = write_cfg(tmp_path, injection__workflow_rate=0.0, injection__condition_prob=0.0,
                     simulation__count=4, scale__intents=2)
    assert run_command(["run-all", "--config", str(path)]) == 0
    corpus = load_corpus(tmp_path / "out" / "corpus.jsonl")
    assert corpus and all(d.n_violations == 0 for d in corpus)
    assert load_report(tmp_path / "out" / "report.json").row("oracle", "airline").vda is None


def test_reproducible_bytes(pipeline, tmp_path):
    shutil.copy(pipeline / "cfg.json", tmp_path / "cfg.json")
    assert run_command(["run-all", "--config", str(tmp_path / "cfg.json")]) == 0
    for name in ("pool.json", "variants.json", "corpus.jsonl", "predictions.jsonl", "report.json", "report.txt"):
        assert (tmp_path / "out" / name).read_bytes() == (pipeline / "out" / name).read_bytes(), name
