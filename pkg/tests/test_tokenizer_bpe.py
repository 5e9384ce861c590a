import json
import random

import pytest

from conftest import TOY_MERGES, toy_tokenizer_payload
from webstep.tokenizer import (
    PRETOKENIZE_PATTERN,
    BytePairEncoder,
    TokenizerLoadError,
    bytes_to_unicode,
    load_bpe,
    resolve_tokenizer,
)

ALPHABET = "theingandbutonlinkrsd  ,.!é-_0123"


def _oracle_tokens(text):
    """Apply every merge in rank order to each pre-token, one full pass per merge."""

    table = bytes_to_unicode()
    tokens = []
    for match in PRETOKENIZE_PATTERN.finditer(text):
        symbols = [table[b] for b in match.group(0).encode("utf-8")]
        for left, right in TOY_MERGES:
            merged = []
            i = 0
            while i < len(symbols):
                if i < len(symbols) - 1 and symbols[i] == left and symbols[i + 1] == right:
                    merged.append(left + right)
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        tokens.extend(symbols)
    return tokens


def test_bpe_matches_merge_oracle_on_random_strings():
    payload = toy_tokenizer_payload()
    encoder = BytePairEncoder(payload["model"]["vocab"], list(TOY_MERGES))
    rng = random.Random(2024)
    for _ in range(200):
        text = "".join(rng.choice(ALPHABET) for _ in range(rng.randint(1, 40)))
        assert encoder.tokenize(text) == _oracle_tokens(text), text


def test_known_encodings(toy_tokenizer):
    assert toy_tokenizer.count("the") == 1
    assert toy_tokenizer.count(" the") == 1
    assert toy_tokenizer.count("button") == 1
    assert toy_tokenizer.count("thing") == 2
    assert toy_tokenizer.count("") == 0


def test_every_token_has_an_id(toy_tokenizer):
    assert -1 not in toy_tokenizer.encode("the linked button and string é!")


def test_loader_accepts_both_merge_encodings(tmp_path, toy_tokenizer):
    payload = toy_tokenizer_payload()
    payload["model"]["merges"] = [list(pair) for pair in TOY_MERGES]
    path = tmp_path / "pairs.json"
    path.write_text(json.dumps(payload), encoding="utf-8")

    assert load_bpe(path).encode("the button") == toy_tokenizer.encode("the button")


@pytest.mark.parametrize(
    "model, section",
    [
        (None, "'model'"),
        ({"merges": []}, "'model.vocab'"),
        ({"vocab": {}}, "'model.merges'"),
        ({"vocab": {"a": "x"}, "merges": []}, "'model.vocab'"),
        ({"vocab": {}, "merges": ["a"]}, "'model.merges'"),
    ],
)
def test_loader_errors_name_the_section(tmp_path, model, section):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({} if model is None else {"model": model}), encoding="utf-8")

    with pytest.raises(TokenizerLoadError) as excinfo:
        load_bpe(path)
    assert section in str(excinfo.value)


def test_loader_rejects_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")

    with pytest.raises(TokenizerLoadError):
        load_bpe(path)


def test_unknown_tokens_use_unk_id():
    encoder = BytePairEncoder({"a": 0, "<unk>": 1}, [], unk_token="<unk>")

    assert encoder.encode("ab") == [0, 1]


def test_resolve_builtin_and_file(toy_tokenizer_path):
    assert resolve_tokenizer("whitespace").count("a  b c") == 3
    assert resolve_tokenizer("char").count("abc") == 3
    assert resolve_tokenizer(str(toy_tokenizer_path)).name == "toy-tokenizer"
