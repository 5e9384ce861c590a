import pytest

from conftest import TEST_DATA
from webstep.actions import (
    CLICK,
    PRESS,
    TYPE,
    Action,
    ActionParseError,
    build_chat_messages,
    build_prompt,
    describe,
    extract_payload,
    format_action,
    format_history,
    parse_action,
    parse_history,
)
from webstep.prompts import get_template

MENU = Action(
    index=1,
    description='Click the "Menu" button to browse all food options',
    op=CLICK,
    node=832,
    target='<svg class="open-hamburger-icon" node="832" role="img">',
)

GMAIL_HISTORY = [
    Action(1, 'Click "See all settings"', CLICK, 254, '<button class="Tj" node="254">'),
    Action(
        2,
        'Click "Accounts"',
        CLICK,
        2625,
        '<a class="f0 LJOhwe" href="https://mail.google.com/mail/u/0/?tab=#settings/accounts"'
        ' node="2625" role="tab">',
    ),
    Action(
        3,
        'Click "Add another account"',
        CLICK,
        1215,
        '<span class="LJOhwe sA" id=":kp" node="1215" role="link">',
    ),
]


def test_format_action_golden():
    assert format_action(MENU) == (
        "1.\n"
        'Description: Click the "Menu" button to browse all food options\n'
        "Action: mouse_click_action\n"
        "Node: 832\n"
        'Target: <svg class="open-hamburger-icon" node="832" role="img">\n'
    )
    assert MENU.target_matches_node()


def test_parse_reads_back_formatted_action():
    typed = Action(2, 'Enter the recipient: type "emma.lopez@gmail.com"', TYPE, 17, '<input node="17">',
                   payload="emma.lopez@gmail.com")

    assert parse_action(format_action(MENU)) == MENU
    assert parse_action(format_action(typed)) == typed


def test_parse_tolerates_noise():
    text = (
        "\n\n  3.  \n"
        "Description: Click the \"Menu\" button\n"
        "  to browse all food options\n\n"
        "Action: mouse_click_action\n"
        "Node:  832 \n"
        'Target: <svg class="open-hamburger-icon"\n'
        ' node="832" role="img">\n'
        "4.\n"
        "Description: ignored\n"
    )

    action = parse_action(text)
    assert action.index == 3
    assert action.description == 'Click the "Menu" button to browse all food options'
    assert action.node == 832
    assert action.target == '<svg class="open-hamburger-icon"node="832" role="img">'


def test_parse_without_index_defaults_to_first_step():
    action = parse_action("Action: keyboard_combination_action\nNode: 4\nDescription: press \"Enter\"")

    assert action.index == 1
    assert action.op == PRESS
    assert action.payload == "Enter"


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("Description: x\nNode: 3", "missing 'Action:'"),
        ("Action: mouse_click_action\nDescription: x", "missing 'Node:'"),
        ("Action: drag_action\nNode: 3", "unknown operation"),
        ("Action: mouse_click_action\nNode: three", "not an integer"),
        ("Action: mouse_click_action\nNode: -2", "negative node"),
        ("0.\nAction: mouse_click_action\nNode: 2", "invalid index"),
    ],
)
def test_parse_errors_carry_diagnostics(text, fragment):
    with pytest.raises(ActionParseError) as excinfo:
        parse_action(text)

    assert fragment in str(excinfo.value)


def test_action_rejects_bad_fields():
    with pytest.raises(ValueError):
        Action(0, "x", CLICK, 1, "")
    with pytest.raises(ValueError):
        Action(1, "x", "hover", 1, "")


def test_describe_adds_missing_payload():
    assert describe("Fill in the name field.", TYPE, "Ana") == 'Fill in the name field: type "Ana"'
    assert describe("", PRESS, "Ctrl+A") == 'Press "Ctrl+A"'
    assert describe('Type "Ana" into the name field', TYPE, "Ana") == 'Type "Ana" into the name field'
    assert describe("Click Save", CLICK, None) == "Click Save"


def test_extract_payload():
    assert extract_payload('Search for shoes: type "red shoes"', TYPE) == "red shoes"
    assert extract_payload('Open "Filters" then press "Enter"', PRESS) == "Enter"
    assert extract_payload('Use "quoted" text', TYPE) == "quoted"
    assert extract_payload('Click "Save"', CLICK) is None
    assert extract_payload("type nothing quoted", TYPE) is None


@pytest.mark.parametrize(
    "description, op, payload",
    [
        ('Enter "New York" in the "From" field', TYPE, "New York"),
        ('Pick the "From" field and enter "New York"', TYPE, "New York"),
        ('Type "a" then press "b"', PRESS, "a"),
        ("", TYPE, 'say "hi"'),
        ("Write the reply", TYPE, 'say "hi" to "Bo"'),
        ('Select "All"', PRESS, "Ctrl+A"),
        ("Clear the box", TYPE, ""),
    ],
)
def test_keyboard_payload_survives_round_trip(description, op, payload):
    action = Action(1, describe(description, op, payload), op, 4, '<input node="4">', payload=payload)

    assert parse_action(format_action(action)) == action


def test_gmail_prompt_golden():
    expected = (TEST_DATA / "gmail_prompt.txt").read_text(encoding="utf-8")
    prompt = build_prompt(
        "Grant delegation access to another user in Gmail settings.",
        "https://mail.google.com/mail/u/0/",
        "{processed dom}",
        GMAIL_HISTORY,
    )

    assert prompt == expected


def test_history_is_renumbered_and_parsed_back():
    shuffled = [GMAIL_HISTORY[2], GMAIL_HISTORY[0]]
    text = format_history(shuffled)

    assert text.startswith("1.\n")
    assert [action.index for action in parse_history(text)] == [1, 2]
    assert [action.node for action in parse_history(text)] == [1215, 254]
    assert parse_history("") == []


def test_parse_history_needs_leading_index():
    with pytest.raises(ActionParseError):
        parse_history("Description: x\n1.\nAction: mouse_click_action\nNode: 2\n")


def test_chat_messages_lead_with_baseline_instructions():
    messages = build_chat_messages("Objective: x")

    assert messages[0] == {"role": "system", "content": get_template("baseline")}
    assert messages[1] == {"role": "user", "content": "Objective: x"}
    assert build_chat_messages("p", system="s")[0]["content"] == "s"
