import pytest

from quasinormal.config import ARMS, RunConfig, parse_config, parse_text
from quasinormal.errors import ConfigError


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "c.ini").write_text("")
    assert parse_config(tmp_path / "c.ini").to_text() == RunConfig().to_text()


def test_single_key(tmp_path):
    (tmp_path / "c.ini").write_text("[solver]\ngamma = 2.0\n")
    cfg = parse_config(tmp_path / "c.ini")
    assert cfg["solver"]["gamma"] == 2.0
    ref = RunConfig()
    ref.set("solver", "gamma", 2.0)
    assert cfg.to_text() == ref.to_text()


def test_bad_value_names_key_and_line(tmp_path):
    (tmp_path / "c.ini").write_text("# comment\n[solver]\ngamma = banana\n")
    with pytest.raises(ConfigError) as info:
        parse_config(tmp_path / "c.ini")
    assert info.value.line == 3 and info.value.key == "gamma"
    assert "line 3" in str(info.value) and "gamma" in str(info.value)


@pytest.mark.parametrize("text, line", [
    ("[solver]\nbogus = 1\n", 2),
    ("[nosuch]\n", 1),
    ("[solver]\ngamma = -1\n", 2),
    ("[solver]\ngamma = nan\n", 2),
    ("gamma = 1\n", 1),
    ("[solver]\ngamma\n", 2),
    ("[evaluate]\narms = direct, bogus\n", 2),
    ("[data]\ndims = 48\n", 2),
])
def test_rejections_carry_line(text, line):
    with pytest.raises(ConfigError) as info:
        parse_text(text)
    assert info.value.line == line


def test_override_precedence(tmp_path):
    (tmp_path / "c.ini").write_text("[solver]\ngamma = 2.0\nmax_iter = 50\n")
    cfg = parse_config(tmp_path / "c.ini", ["solver.gamma=0.5"])
    assert cfg["solver"]["gamma"] == 0.5 and cfg["solver"]["max_iter"] == 50
    with pytest.raises(ConfigError):
        parse_config(None, ["gamma=1"])


def test_round_trip_and_lists():
    cfg = parse_text("[evaluate]\narms = pca1, direct\n[data]\ndims = 32, 40\n")
    assert cfg["evaluate"]["arms"] == ("pca1", "direct")
    assert cfg["data"]["dims"] == (32, 40)
    again = parse_text(cfg.to_text())
    assert again.to_text() == cfg.to_text()
    assert RunConfig()["evaluate"]["arms"] == ARMS


def test_missing_file():
    with pytest.raises(ConfigError):
        parse_config("/nonexistent/config.ini")
