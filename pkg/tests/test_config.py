import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionseg.config import ConfigError, RunConfig, dump_kv, load_config, parse_config_text, parse_kv, parse_value
from lesionseg.losses import LossSpec
from lesionseg.trainer import TrainConfig

EXAMPLE = """
# a scar run
lesion = scar
epochs = 30
input_size = [160, 160]
loss.kind = weighted_bce
loss.pos_weight = [135.0, 175.0, 386.0, 170.0, 550.0]
name = "with = sign"
"""


def test_parse_example():
    d = parse_kv(EXAMPLE)
    assert d["lesion"] == "scar" and d["epochs"] == 30
    assert d["input_size"] == [160, 160]
    assert d["loss"] == {"kind": "weighted_bce", "pos_weight": [135.0, 175.0, 386.0, 170.0, 550.0]}
    assert d["name"] == "with = sign"


@pytest.mark.parametrize(
    "text,value",
    [("1", 1), ("-2", -2), ("1.5", 1.5), ("1e-3", 1e-3), ("true", True), ("False", False), ("none", None), ("[]", []), ("abc", "abc")],
)
def test_scalars(text, value):
    assert parse_value(text) == value


@pytest.mark.parametrize(
    "text",
    ["novalue", "1bad = 2", "a = [1, 2", "a = 1\na = 2", "a = 1\na.b = 2", 'a = "open', "a = x]"],
)
def test_malformed_lines(text):
    with pytest.raises(ConfigError):
        parse_kv(text)


def test_json_alternative():
    assert parse_config_text('{"epochs": 3, "loss": {"kind": "dice"}}') == {"epochs": 3, "loss": {"kind": "dice"}}
    with pytest.raises(ConfigError):
        parse_config_text("{not json")
    with pytest.raises(ConfigError):
        parse_config_text("[1, 2]")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="missing"):
        load_config(tmp_path / "missing.cfg")


scalars = st.one_of(
    st.integers(-10**6, 10**6),
    st.floats(allow_nan=False, allow_infinity=False),
    st.booleans(),
    st.none(),
    st.text(st.characters(blacklist_categories=("Cs", "Cc")), max_size=12),
)
keys = st.from_regex(r"[a-z_][a-z0-9_]{0,6}", fullmatch=True)
trees = st.recursive(
    st.one_of(scalars, st.lists(scalars, max_size=4)),
    lambda inner: st.dictionaries(keys, inner, min_size=1, max_size=4),
    max_leaves=12,
)


@settings(max_examples=200, deadline=None)
@given(st.dictionaries(keys, trees, max_size=5))
def test_dump_parse_round_trip(data):
    assert parse_kv(dump_kv(data)) == data


def test_run_config_echo():
    rc = RunConfig(
        TrainConfig(lesion="scar", epochs=7, loss=LossSpec(kind="tversky", tversky_alpha=0.2, tversky_beta=0.8)),
        data="/d",
        out="/o",
        lesions=["all"],
        seeds=[0, 1, 2],
        grid={"tversky": [0.1, 0.2], "dice": []},
    )
    text = rc.to_text()
    back = RunConfig.from_text(text)
    assert back == rc
    assert back.to_text() == text
    assert RunConfig.from_text(json.dumps(rc.to_dict())) == rc


def test_run_config_rejects_bad_training_values():
    with pytest.raises(ConfigError):
        RunConfig.from_text("epochs = 0")
    with pytest.raises(ConfigError):
        RunConfig.from_text("unknown_key = 1")


def test_list_strings_with_escaped_quotes_and_commas():
    items = ['"', 'a", b', "\\", "x,y"]
    text = "[" + ", ".join(json.dumps(i) for i in items) + "]"
    assert parse_value(text) == items
