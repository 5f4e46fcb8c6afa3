import pytest

from conftest import scripted
from policysim.gateway import ChatRequest, ScriptEntry
from policysim.llmjson import OutputRejected, as_bool, ask_json, extract_json


@pytest.mark.parametrize("text,expected", [
    ('{"a": 1}', {"a": 1}),
    ('Sure!\n```json\n[1, 2]\n```', [1, 2]),
    ('prefix {"x": true} suffix', {"x": True}),
    ("no json here", None),
    ("", None),
])
def test_extract_json(text, expected):
    assert extract_json(text) == expected


def test_as_bool():
    assert as_bool("Yes") is True and as_bool("fail") is False
    assert as_bool("maybe") is None and as_bool(1) is None


def test_ask_json_repairs_then_succeeds():
    gw = scripted(ScriptEntry.on("t", response="garbage", times=1), ScriptEntry.on("t", response='{"v": 2}'))

    def validate(p):
        if p.get("v") != 2:
            raise OutputRejected("v must be 2")
        return p["v"]

    assert ask_json(gw, ChatRequest.single("s", "u", tag="t"), validate, 2, lambda r, o: RuntimeError(r)) == 2
    prompts = gw.audit.prompts("t")
    assert len(prompts) == 2
    assert "rejected: output is not valid JSON" in prompts[1]


def test_ask_json_gives_up():
    gw = scripted(ScriptEntry.on("t", response="garbage"))
    with pytest.raises(RuntimeError, match="not valid JSON"):
        ask_json(gw, ChatRequest.single("s", "u", tag="t"), lambda p: p, 1, lambda r, o: RuntimeError(r))
    assert len(gw.audit) == 2
