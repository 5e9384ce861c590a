"""Command line behaviour: outputs, exit codes and the config file."""
import json
import logging

import pytest

from webstep import cli
from webstep.actions import CLICK, Action, format_action

PAGE = (
    "<html><head><title>x</title></head><body>"
    '<div class="a  b" onclick="go()"><font>Hi</font> <a href="/x">Go</a></div>'
    "<!-- c --></body></html>"
)
GOLDEN = (
    '<html node="3"><body node="2"><div class="a b" node="1">Hi '
    '<a href="/x" node="0">Go</a></div></body></html>'
)
LONG_LINK = f'<a href="/{"q" * 40}" title="Go">x</a>'


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


@pytest.fixture(autouse=True)
def _no_endpoints(monkeypatch):
    for name in ("WEBSTEP_BASE_URL", "WEBSTEP_PLANNER_BASE_URL"):
        monkeypatch.delenv(name, raising=False)


def test_preprocess_golden(tmp_path):
    out = tmp_path / "out.html"

    assert cli.main(["preprocess", "--in", _write(tmp_path / "page.html", PAGE), "--out", str(out)]) == 0
    assert out.read_text(encoding="utf-8") == GOLDEN


def test_preprocess_to_stdout_with_ratio_pruning(tmp_path, capsys):
    page = _write(tmp_path / "page.html", LONG_LINK)

    code = cli.main(["preprocess", "--in", page, "--tokenizer", "char", "--threshold", "1.5", "--min-len", "8"])

    assert code == 0
    assert capsys.readouterr().out == '<a node="0" title="Go">x</a>'


def test_threshold_without_tokenizer_is_a_usage_error(tmp_path):
    page = _write(tmp_path / "page.html", PAGE)

    assert cli.main(["preprocess", "--in", page, "--threshold", "2.0"]) == cli.EXIT_USAGE


def test_empty_page(tmp_path):
    out = tmp_path / "out.html"

    assert cli.main(["preprocess", "--in", _write(tmp_path / "empty.html", ""), "--out", str(out)]) == 0
    assert out.read_text(encoding="utf-8") == ""


def test_missing_input_is_a_runtime_failure(tmp_path, caplog):
    caplog.set_level(logging.ERROR)

    assert cli.main(["preprocess", "--in", str(tmp_path / "absent.html")]) == cli.EXIT_FAILURE
    assert any("preprocess failed" in message for message in caplog.messages)


def test_bad_flags_exit_with_usage_code():
    assert cli.main(["preprocess"]) == cli.EXIT_USAGE
    assert cli.main(["dataset", "--workflows", "w.jsonl", "--out", "o.jsonl", "--budget", "100", "--context-window", "900"]) == cli.EXIT_USAGE
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE


def test_analyze_prints_table_and_writes_json(tmp_path, capsys):
    pages = [
        _write(tmp_path / "a.html", f'<div data-x="{"a " * 20}">x</div>'),
        _write(tmp_path / "b.html", f'<p title="{"z" * 40}">z</p>'),
    ]
    out = tmp_path / "ratios.json"

    code = cli.main(
        ["analyze", "--in", *pages, "--tokenizer", "whitespace", "--thresholds", "1.5,2.5", "--out", str(out), "--jobs", "2"]
    )

    assert code == 0
    reports = json.loads(out.read_text(encoding="utf-8"))
    assert [report["threshold"] for report in reports] == [1.5, 2.5]
    printed = capsys.readouterr().out
    assert printed.splitlines()[0].startswith("Threshold")


def _workflow_line(i, selector):
    page = '<main><input id="q" name="q"><button id="go">Search</button></main>'
    return json.dumps(
        {
            "id": f"wf-{i}",
            "objective": "Search the catalogue",
            "steps": [
                {
                    "url": "https://shop.example.com",
                    "raw_html": page,
                    "description": "Click the search button",
                    "op": CLICK,
                    "selector": selector,
                }
            ],
        }
    )


def test_dataset_writes_examples_and_report(tmp_path, capsys):
    workflows = _write(
        tmp_path / "workflows.jsonl",
        "\n".join([_workflow_line(0, "#go"), "{broken", _workflow_line(2, "#missing")]) + "\n",
    )
    out = tmp_path / "train.jsonl"

    code = cli.main(["dataset", "--workflows", workflows, "--out", str(out), "--tokenizer", "whitespace", "--budget", "200"])

    assert code == 0
    rows = [json.loads(line) for line in out.read_text(encoding="utf-8").splitlines()]
    assert [row["workflow_id"] for row in rows] == ["wf-0"]
    report = json.loads((tmp_path / "train.jsonl.report.json").read_text(encoding="utf-8"))
    assert report["accepted"] == 1
    assert report["rejected_lines"][0]["line"] == 2
    assert report["invalid"][0]["workflow_id"] == "wf-2"
    assert "Examples: 1" in capsys.readouterr().out

def test_dataset_jobs_keep_workflow_order(tmp_path):
    workflows = _write(
        tmp_path / "workflows.jsonl", "\n".join(_workflow_line(i, "#go") for i in range(6)) + "\n"
    )
    outputs = []
    for jobs in ("1", "3"):
        out = tmp_path / f"train-{jobs}.jsonl"
        args = ["dataset", "--workflows", workflows, "--out", str(out), "--tokenizer", "whitespace"]
        assert cli.main([*args, "--budget", "200", "--jobs", jobs]) == 0
        outputs.append(out.read_text(encoding="utf-8"))

    assert outputs[0] == outputs[1]
    assert [json.loads(line)["workflow_id"] for line in outputs[1].splitlines()] == [
        f"wf-{i}" for i in range(6)
    ]



def test_dataset_needs_tokenizer(tmp_path):
    workflows = _write(tmp_path / "workflows.jsonl", _workflow_line(0, "#go") + "\n")

    assert cli.main(["dataset", "--workflows", workflows, "--out", str(tmp_path / "o.jsonl"), "--budget", "200"]) == cli.EXIT_USAGE


def test_eval_writes_report_and_records(tmp_path, capsys):
    gold_action = Action(1, "Click Go", CLICK, 0, '<button node="0">')
    gold = _write(
        tmp_path / "gold.jsonl",
        json.dumps({"workflow_id": "w", "step_index": 1, "action_text": format_action(gold_action)}) + "\n",
    )
    predictions = _write(
        tmp_path / "pred.jsonl",
        json.dumps({"workflow_id": "w", "step_index": 1, "action_text": format_action(gold_action)}) + "\n",
    )
    out = tmp_path / "report.json"
    records = tmp_path / "records.jsonl"

    code = cli.main(["eval", "--gold", gold, "--predictions", predictions, "--out", str(out), "--records", str(records)])

    assert code == 0
    report = json.loads(out.read_text(encoding="utf-8"))
    assert report["em"] == 1.0
    assert report["missing_predictions"] == 0
    assert json.loads(records.read_text(encoding="utf-8"))["element_correct"] is True
    assert "Calibrated EM" in capsys.readouterr().out


def test_agent_step_with_mock_transcript(tmp_path, capsys):
    html = _write(tmp_path / "page.html", "<div><button>Inbox</button><button>Send</button></div>")
    reply = format_action(Action(1, 'Click "Send"', CLICK, 1, '<button node="1">'))
    mock = _write(tmp_path / "mock.jsonl", json.dumps({"stage": "generate", "completion": reply}) + "\n")
    history = _write(tmp_path / "history.txt", format_action(Action(1, 'Click "Inbox"', CLICK, 0, "<button>")))

    code = cli.main(
        ["agent", "step", "--objective", "Send it", "--url", "https://mail.example.com", "--html", html,
         "--history", history, "--mock", mock, "--samples", "3"]
    )

    assert code == 0
    printed = capsys.readouterr().out
    assert printed.startswith("2.\nDescription: Click \"Send\"\n")
    assert "Node: 1\n" in printed


def test_agent_step_without_endpoint_is_a_usage_error(tmp_path):
    html = _write(tmp_path / "page.html", "<button>Go</button>")

    code = cli.main(["agent", "step", "--objective", "x", "--url", "u", "--html", html])

    assert code == cli.EXIT_USAGE


def test_agent_run_with_mock_transcript(tmp_path):
    page = {
        "url": "https://mail.example.com",
        "html": "<div><button>Inbox</button></div>",
        "accessibility_tree": "[7] button 'Inbox'",
    }
    env = _write(tmp_path / "env.jsonl", json.dumps(page) + "\n")
    rows = [
        {"stage": "refine", "completion": "Click the inbox button."},
        {"stage": "generate", "completion": format_action(Action(1, 'Click "Inbox"', CLICK, 0, ""))},
        {"stage": "translate", "completion": "click [7]"},
        {"stage": "check", "completion": "Summary: completed, 3 unread"},
    ]
    mock = _write(tmp_path / "mock.jsonl", "\n".join(json.dumps(row) for row in rows) + "\n")
    out = tmp_path / "state.json"
    transcript = tmp_path / "transcript.jsonl"

    code = cli.main(
        ["agent", "run", "--objective", "Open the inbox", "--env", env, "--mock", mock,
         "--out", str(out), "--transcript", str(transcript), "--samples", "1"]
    )

    assert code == 0
    state = json.loads(out.read_text(encoding="utf-8"))
    assert state["done"] is True
    assert state["answer"] == "3 unread"
    assert state["env_actions"] == ["click [7]", "stop [3 unread]"]
    assert len(transcript.read_text(encoding="utf-8").splitlines()) == 4


def test_config_file_supplies_defaults(tmp_path, capsys, caplog):
    config = _write(
        tmp_path / "webstep.toml",
        'verbose = false\nmystery = 1\n\n[preprocess]\ntokenizer = "char"\nthreshold = 1.5\nmin-len = 8\n',
    )
    page = _write(tmp_path / "page.html", LONG_LINK)
    caplog.set_level(logging.WARNING)

    assert cli.main(["--config", config, "preprocess", "--in", page]) == 0
    assert capsys.readouterr().out == '<a node="0" title="Go">x</a>'
    assert any("mystery" in message for message in caplog.messages)


def test_flags_override_config_file(tmp_path, capsys):
    config = _write(tmp_path / "webstep.toml", '[preprocess]\ntokenizer = "char"\nthreshold = 1.5\nmin-len = 8\n')
    page = _write(tmp_path / "page.html", LONG_LINK)

    assert cli.main(["--config", config, "preprocess", "--in", page, "--min-len", "100"]) == 0
    assert "href" in capsys.readouterr().out


def test_malformed_config_file(tmp_path):
    config = _write(tmp_path / "bad.toml", "threshold = = 2\n")
    page = _write(tmp_path / "page.html", PAGE)

    assert cli.main(["--config", config, "preprocess", "--in", page]) == cli.EXIT_USAGE


def test_map_ordered_keeps_input_order():
    assert cli.map_ordered(lambda value: value * value, range(10), jobs=4) == [v * v for v in range(10)]
    assert cli.map_ordered(str, [], jobs=3) == []
