import pytest

from clearct.config import SCHEMA, ConfigError, RunConfig, schema_doc


def test_defaults_cover_the_schema():
    cfg = RunConfig()
    for sec, keys in SCHEMA.items():
        for k, key in keys.items():
            assert cfg.get(sec, k) == key.default
    assert cfg.get("pretrain", "tau") == 0.2 and cfg.get("downstream", "patience") == 8
    assert cfg.get("eval", "lambdas") == (0.0, 1.0, 3.0, 5.0)


def test_parse_and_dump_round_trip():
    cfg = RunConfig.loads("[pretrain]\nlambda = 3\nmethod = moco\n[eval]\nlambdas = 0, 5\ndegenerate_as_half = yes\n")
    assert cfg.get("pretrain", "lambda") == 3.0 and cfg.get("pretrain", "method") == "moco"
    assert cfg.get("eval", "lambdas") == (0.0, 5.0) and cfg.get("eval", "degenerate_as_half") is True
    again = RunConfig.loads(cfg.dumps())
    assert again.dumps() == cfg.dumps()


@pytest.mark.parametrize("text, match", [
    ("[pretrain]\nlamda = 1\n", "unknown key"),
    ("[training]\nlr = 1\n", "unknown section"),
    ("[pretrain]\nlambda = -1\n", "non-negative"),
    ("[pretrain]\nmethod = simclr\n", "expected one of"),
    ("[downstream]\nstandardize = maybe\n", "boolean"),
    ("[eval]\nk = zero\n", "k"),
    ("not an ini", "<string>"),
])
def test_invalid_configs_rejected(text, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig.loads(text)


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        RunConfig.load(tmp_path / "nope.ini")


def test_copy_is_independent():
    a = RunConfig()
    b = a.copy()
    b.set("pretrain", "lambda", "5")
    assert a.get("pretrain", "lambda") == 0.0


def test_schema_doc_lists_every_key():
    doc = schema_doc()
    assert sum(len(k) for k in SCHEMA.values()) == len(doc.splitlines())
    assert "[pretrain] lambda = 0.0" in doc
