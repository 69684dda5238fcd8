import pytest

from msat_music.services.train_config import (
    ConfigValueError,
    TrainConfig,
    UnknownConfigKey,
    load_train_config,
    parse_config_text,
)
from msat_music.services.train_log import TrainLog, format_entry, parse_line, read_train_log


def test_defaults():
    cfg = load_train_config()
    assert cfg == TrainConfig()
    assert (cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps) == (1e-3, 0.9, 0.98, 1e-9)
    assert cfg.fusion == "global" and cfg.frozen_context == "aligned"
    assert cfg.model_config().max_len == cfg.max_seq_len


def test_file_then_overrides(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("# run\n\nlearning_rate = 0.01\nfusion=local\ninit_bar_from_pretrained=off\nmax_steps=5\n")
    cfg = load_train_config(path, {"max_steps": 7, "seed": None})
    assert cfg.learning_rate == 0.01
    assert cfg.fusion == "local"
    assert cfg.init_bar_from_pretrained is False
    assert cfg.max_steps == 7
    assert cfg.seed == 0


def test_effective_config_round_trips(tmp_path):
    cfg = TrainConfig(learning_rate=3e-4, fusion="none", log_path="runs/a.log", init_bar_from_pretrained=False)
    path = tmp_path / "effective.cfg"
    path.write_text(cfg.to_text())
    assert "init_bar_from_pretrained=false" in cfg.to_text()
    assert load_train_config(path) == cfg


def test_unknown_key_is_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("learning_rat=0.1\n")
    with pytest.raises(UnknownConfigKey):
        load_train_config(path)
    with pytest.raises(UnknownConfigKey):
        TrainConfig().with_overrides({"bogus": 1})


@pytest.mark.parametrize("text", [
    "max_steps=ten\n",
    "fusion=attention\n",
    "init_bar_from_pretrained=maybe\n",
    "batch_size=0\n",
    "frozen_context=causal\n",
    "just a line\n",
])
def test_bad_values_are_rejected(tmp_path, text):
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    with pytest.raises(ConfigValueError):
        load_train_config(path)


def test_parse_config_text_keeps_raw_strings():
    assert parse_config_text("a=1\n# b=2\nc = x=y\n") == {"a": "1", "c": "x=y"}


def test_log_lines_parse_back(tmp_path):
    alpha = [1 / 3] * 18
    log = TrainLog(tmp_path / "logs" / "train.log")
    log.append(format_entry(0, float("nan"), 23.6, [1.6, 5.5, 2.6, 4.9, 4.2, 4.9], alpha))
    log.append(format_entry(100, 3.25, 3.5, [0.1, 0.9, 0.5, 1.0, 0.7, 0.3]))
    entries = read_train_log(tmp_path / "logs" / "train.log")

    assert [e.step for e in entries] == [0, 100]
    assert entries[0].time.endswith("Z")
    assert entries[0].valid_loss == pytest.approx(23.6)
    assert entries[0].alpha == pytest.approx(tuple(alpha), abs=1e-6)
    assert entries[1].train_loss == pytest.approx(3.25)
    assert entries[1].field_losses == pytest.approx((0.1, 0.9, 0.5, 1.0, 0.7, 0.3))
    assert entries[1].alpha is None


def test_parse_line_ignores_other_lines():
    assert parse_line("starting run") is None
    assert parse_line("step=1 train_loss=1.0 valid_loss=2.0 fields=1,2,3") is None
    entry = parse_line("step=3 train_loss=1.5 valid_loss=2.0 fields=1,2,3,4,5,6")
    assert entry.step == 3 and entry.time == ""


def test_log_restarts_empty_and_missing_path_is_noop(tmp_path):
    path = tmp_path / "train.log"
    path.write_text("old\n")
    TrainLog(path)
    assert path.read_text() == ""
    TrainLog(None).append("ignored")
    assert read_train_log(tmp_path / "missing.log") == []
