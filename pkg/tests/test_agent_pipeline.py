"""End-to-end runs of the agent loop against a replayed environment."""
import asyncio
import hashlib
import json
import re
from dataclasses import replace

from webstep.actions import CLICK, TYPE, Action, format_action
from webstep.agent import (
    Box,
    EnvAction,
    Limits,
    Observation,
    PipelineClients,
    ReplayEnv,
    Task,
    Transcript,
    Viewport,
    prepare_observation,
    propose_action,
    run_pipeline,
)
from webstep.llm import GenParams, ScriptedChatClient
from webstep.prompts import get_template
from webstep.tokenizer import whitespace_profile

HTML = '<div><button>Inbox</button><input name="to"><button>Send</button></div>'
TREE = "[11] button 'Inbox'\n[12] textbox 'To'\n[13] button 'Send'"
ADDRESS = "emma.lopez@gmail.com"

OPEN_INBOX = Action(1, 'Click "Inbox"', CLICK, 0, '<button node="0">')
ENTER_ADDRESS = Action(
    1, f'Enter the recipient: type "{ADDRESS}"', TYPE, 1, '<input name="to" node="1">', payload=ADDRESS
)
SEND = Action(1, 'Click "Send"', CLICK, 2, '<button node="2">')


def _page(**extra):
    return Observation(url="https://mail.example.com/compose", html=HTML, accessibility_tree=TREE, **extra)


def _round(action, command, summary="Summary: incomplete", votes=None):
    completions = votes or [format_action(action)]
    return [
        {"stage": "generate", "completions": completions},
        {"stage": "translate", "completion": command},
        {"stage": "check", "completion": summary},
    ]


def _script(*rounds):
    rows = [{"stage": "refine", "completion": "Open the inbox,\n  type the address and press send."}]
    for round_rows in rounds:
        rows.extend(round_rows)
    return ScriptedChatClient(rows)


def _run(client, limits, env=None, transcript=None):
    env = env or ReplayEnv([_page(), _page(), _page()])
    state = asyncio.run(
        run_pipeline(
            Task(objective=f"Send an email to {ADDRESS}", domain="email"),
            env,
            PipelineClients(actor=client, planner=client),
            limits,
            transcript=transcript,
        )
    )
    return state, env


def test_pipeline_completes_task(tmp_path):
    client = _script(
        _round(OPEN_INBOX, "click [11]", votes=[format_action(OPEN_INBOX)] * 2 + [format_action(SEND)]),
        _round(ENTER_ADDRESS, f"type [12] [{ADDRESS}]"),
        _round(SEND, "The send button.\nclick [13]", summary=f"Sent.\nSummary: completed, {ADDRESS}"),
    )
    transcript = Transcript(tmp_path / "run.jsonl")

    state, env = _run(client, Limits(max_steps=5, params=GenParams(n_samples=3)), transcript=transcript)

    assert state.done
    assert state.answer == ADDRESS
    assert state.reason is None
    assert state.steps == 3
    assert [str(action) for action in env.executed] == [
        "click [11]",
        f"type [12] [{ADDRESS}]",
        "click [13]",
        f"stop [{ADDRESS}]",
    ]
    assert [action.index for action in state.history] == [1, 2, 3]
    assert [action.node for action in state.history] == [0, 1, 2]
    assert "\n" not in state.refined_objective
    assert client.remaining == 0

    rows = [json.loads(line) for line in (tmp_path / "run.jsonl").read_text(encoding="utf-8").splitlines()]
    assert [row["stage"] for row in rows] == ["refine"] + ["generate", "translate", "check"] * 3
    refine_prompt = client.prompts[0][0]["content"]
    assert rows[0]["prompt_hash"] == hashlib.sha256(refine_prompt.encode("utf-8")).hexdigest()
    assert len(rows[1]["completions"]) == 3
    assert rows[1]["action"].startswith("1.\nDescription: Click \"Inbox\"")
    assert rows[-1]["action"] == "completed"
    assert state.to_dict()["env_actions"][-1] == f"stop [{ADDRESS}]"


def test_generate_prompt_carries_history():
    client = _script(
        _round(OPEN_INBOX, "click [11]"),
        _round(SEND, "click [13]", summary="Summary: completed"),
    )

    state, _ = _run(client, Limits(params=GenParams(n_samples=1)))

    second_generate = client.prompts[4][0]["content"]
    assert second_generate.startswith("Objective: Open the inbox, type the address and press send.")
    assert second_generate.endswith(format_action(OPEN_INBOX))
    assert state.answer is None


def test_step_limit_stops_the_run():
    client = _script(_round(OPEN_INBOX, "click [11]"))

    state, env = _run(client, Limits(max_steps=1, params=GenParams(n_samples=1)))

    assert not state.done
    assert state.reason == "step limit of 1 reached"
    assert [str(action) for action in env.executed] == ["click [11]"]


def test_no_valid_action_stops_the_run():
    client = _script([{"stage": "generate", "completions": ["no idea", "Node: 55\nAction: mouse_click_action"]}])

    state, env = _run(client, Limits(params=GenParams(n_samples=2)))

    assert not state.done
    assert "None of 2 samples" in state.reason
    assert env.executed == []
    assert state.history == []


def test_rejected_translation_executes_nothing():
    client = _script(
        [
            {"stage": "generate", "completion": format_action(OPEN_INBOX)},
            {"stage": "translate", "completion": "click [99]"},
            {"stage": "translate", "completion": "I would click the inbox"},
            {"stage": "check", "completion": "Summary: incomplete"},
        ]
    )

    state, env = _run(client, Limits(max_steps=1, params=GenParams(n_samples=1)))

    assert env.executed == []
    assert len(state.history) == 1
    assert client.remaining == 0


def test_offscreen_target_is_scrolled_into_view():
    page = _page(viewport=Viewport(top=0, height=800), boxes={12: _box(2000)})
    env = ReplayEnv([page, _page()])
    client = _script(_round(ENTER_ADDRESS, f"type [12] [{ADDRESS}]", summary="Summary: completed"))

    state, env = _run(client, Limits(params=GenParams(n_samples=1)), env=env)

    assert env.executed == [
        EnvAction("scroll", text="down"),
        EnvAction("scroll", text="down"),
        EnvAction("type", element=12, text=ADDRESS),
        EnvAction("stop"),
    ]
    assert env.pages[0].viewport.top == 1600
    assert state.done


def _box(y):
    return Box(0, y, 300, 30)


def test_arbitration_overrides_the_vote():
    client = _script(
        [
            {
                "stage": "generate",
                "completions": [format_action(OPEN_INBOX)] * 2 + [format_action(SEND)],
            },
            {"stage": "select", "completion": "No. 2"},
            {"stage": "translate", "completion": "click [13]"},
            {"stage": "check", "completion": "Summary: completed"},
        ]
    )

    state, env = _run(client, Limits(params=GenParams(n_samples=3), arbitrate=True))

    assert state.history[0].node == 2
    assert env.executed[0] == EnvAction("click", element=13)


def test_propose_action_uses_last_chunk():
    html = "<div>" + "".join(f"<button>Item {i} with a longer label</button>" for i in range(40)) + "</div>"
    client = ScriptedChatClient(
        [{"completion": format_action(Action(1, "Click the last item", CLICK, 39, ""))}]
    )
    limits = Limits(
        params=GenParams(n_samples=1), tokenizer=whitespace_profile(), budget=64, pool_chunks=False
    )

    action = asyncio.run(
        propose_action(client, "Open the last item", Observation(url="u", html=html), [OPEN_INBOX], limits)
    )

    assert action.index == 2
    prompt = client.prompts[0][0]["content"]
    assert 'node="39"' in prompt
    assert 'node="0"' not in prompt.split("Step-by-step guide:")[0]


class _ChunkAwareClient:
    """Votes three times for node 0 when it is shown, once for another node otherwise."""

    def __init__(self):
        self.prompts = []

    async def complete(self, prompt, params, stage=None):
        self.prompts.append(prompt)
        shown = [int(value) for value in re.findall(r'node="(\d+)"', prompt)]
        if not shown:
            return ["no idea"] * 3
        if 0 in shown:
            return [format_action(Action(1, "Click the first item", CLICK, 0, ""))] * 3
        other = Action(1, "Click another item", CLICK, max(shown), "")
        return [format_action(other), "no idea", "no idea"]


def test_propose_action_pools_samples_from_every_chunk():
    html = "<div>" + "".join(f"<button>Item {i} with a longer label</button>" for i in range(40)) + "</div>"
    client = _ChunkAwareClient()
    limits = Limits(params=GenParams(n_samples=3), tokenizer=whitespace_profile(), budget=64)
    transcript = Transcript()

    action = asyncio.run(
        propose_action(
            client,
            "Open the first item",
            Observation(url="u", html=html),
            [],
            limits,
            transcript=transcript,
        )
    )

    assert action.node == 0
    assert len(client.prompts) > 2
    assert 'node="0"' in client.prompts[0]
    assert all('node="0"' not in prompt for prompt in client.prompts[1:])
    assert [row["stage"] for row in transcript.rows] == ["generate"] * len(client.prompts)
    assert transcript.rows[-1]["action"].startswith("1.\nDescription: Click the first item")


def test_baseline_instructions_lead_the_actor_request():
    client = ScriptedChatClient([{"completion": format_action(OPEN_INBOX)}])
    limits = Limits(params=GenParams(n_samples=1), baseline_instructions=True)

    action = asyncio.run(propose_action(client, "Open the inbox", _page(), [], limits))

    assert action.node == 0
    system, user = client.prompts[0]
    assert system == {"role": "system", "content": get_template("baseline")}
    assert user["content"].startswith("Objective: Open the inbox\n")


def test_translate_sees_the_chunk_holding_the_choice():
    html = "<div>" + "".join(f"<button>Item {i} with a longer label</button>" for i in range(40)) + "</div>"
    limits = Limits(tokenizer=whitespace_profile(), budget=64)

    page = prepare_observation(Observation(url="u", html=html), limits)

    assert len(page.chunks) > 2
    assert 'node="0"' in page.html_for(0)
    assert 'node="0"' not in page.html_for(39)
    assert page.html_for(999) == page.chunks[-1].text
    last_only = prepare_observation(Observation(url="u", html=html), replace(limits, pool_chunks=False))
    assert [chunk.text for chunk in last_only.chunks] == [page.chunks[-1].text]
