import csv
from pathlib import Path

import pytest

from codedfd import cli
from codedfd.errors import ConfigError
from codedfd.fedcore import METRICS_HEADER
from codedfd.harness import ExperimentConfig, desk_config, parse_config_text

SMALL = ["--override", "fl.total_clients=6", "--override", "fl.clients_per_round=3",
         "--override", "data.samples_per_class=20", "--override", "model.filters=2,32",
         "--override", "model.hidden=32"]


def run(tmp_path, *args):
    return cli.main([*args, "--out", str(tmp_path)])


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


# ---- config -----------------------------------------------------------------

def test_config_text_parsing_and_round_trip(tmp_path):
    raw = parse_config_text("# comment\nfl.alpha = 1/4  # trailing\n\nserver.mode=fedadam\n")
    assert raw == {"fl.alpha": "1/4", "server.mode": "fedadam"}
    cfg = ExperimentConfig().updated(raw)
    assert cfg["fl.alpha"] == 0.25
    (tmp_path / "c.cfg").write_text(cfg.to_text())
    assert ExperimentConfig.load(tmp_path / "c.cfg").to_text() == cfg.to_text()
    with pytest.raises(ConfigError):
        parse_config_text("no equals sign here")
    with pytest.raises(ConfigError):
        ExperimentConfig().updated({"fl.nope": "1"})
    with pytest.raises(ConfigError):
        ExperimentConfig().updated({"fl.rounds": "many"})


def test_eta0_default_depends_on_mode():
    assert ExperimentConfig().eta0_log10() == 0.0
    assert ExperimentConfig().updated({"server.mode": "fedadam"}).eta0_log10() == -2.0


@pytest.mark.parametrize("override", [
    "fl.alpha=0.3",                    # gold needs alpha 0.5
    "fl.alpha=1/3",                    # keep weight of a 32-unit layer is not an integer
    "model.hidden=100",                # gold needs a power-of-two width
    "fl.clients_per_round=50",         # more clients per round than exist
    "server.mode=sgd",
    "data.source=idx",                 # idx without files
    "fl.rounds=0",
])
def test_config_errors_exit_2(tmp_path, capsys, override):
    assert run(tmp_path, "train", *SMALL, "--override", "fl.total_clients=40", "--override", override) == 2
    assert "config error" in capsys.readouterr().err


def test_bad_override_syntax_and_missing_file_exit_2(tmp_path):
    assert run(tmp_path, "train", "--override", "fl.alpha") == 2
    assert run(tmp_path, "train", "--config", str(tmp_path / "missing.cfg")) == 2


def test_runtime_error_exits_3(tmp_path, capsys):
    (tmp_path / "img").write_bytes(b"\x00\x00\x08\x01junk")
    (tmp_path / "lbl").write_bytes(b"\x00\x00\x08\x01junk")
    code = run(tmp_path, "train", "--override", "data.source=idx", "--override", f"data.images={tmp_path / 'img'}",
               "--override", f"data.labels={tmp_path / 'lbl'}")
    assert code == 3
    assert "BadMagic" in capsys.readouterr().err


def test_show_config_reflects_seed_and_overrides(tmp_path, capsys):
    assert run(tmp_path, "show-config", "--seed", "7", "--override", "fl.strategy=cwc") == 0
    text = capsys.readouterr().out
    assert "run.seed = 7" in text and "fl.strategy = cwc" in text


# ---- gen-codes --------------------------------------------------------------

@pytest.mark.parametrize("width,bound", [(32, 9), (64, 17), (128, 17)])
def test_gen_codes_gold_report(tmp_path, capsys, width, bound):
    assert run(tmp_path, "gen-codes", "--override", f"codes.widths={width}") == 0
    report = (tmp_path / "codes_report.txt").read_text()
    assert f"max unnormalized |R| over family: {bound}" in report
    assert f"gold bound: {bound}" in report
    assert (tmp_path / f"masks_0_gold_{width}.txt").exists()


def test_gen_codes_cwc_and_random_same(tmp_path):
    assert run(tmp_path, "gen-codes", "--override", "fl.strategy=cwc", "--override", "codes.widths=8",
               "--override", "fl.clients_per_round=4", "--override", "fl.total_clients=4") == 0
    report = (tmp_path / "codes_report.txt").read_text()
    assert "reported d_min: 4" in report and "min pairwise distance: 4" in report
    assert run(tmp_path, "gen-codes", "--override", "fl.strategy=random_same", "--override", "codes.widths=16") == 0
    assert "rows identical: true" in (tmp_path / "codes_report.txt").read_text()


# ---- train ------------------------------------------------------------------

def test_train_outputs_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["train", *SMALL, "--override", "fl.rounds=4", "--override", "run.eval_every=2", "--seed", "3"]
    assert cli.main([*args, "--out", str(a)]) == 0
    assert cli.main([*args, "--out", str(b)]) == 0
    rows = read_csv(a / "metrics.csv")
    assert tuple(rows[0]) == METRICS_HEADER and len(rows) == 5
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "weights.bin").read_bytes() == (b / "weights.bin").read_bytes()
    acc = read_csv(a / "bytes_accuracy.csv")
    assert acc[0] == ["cumulative_bytes", "test_acc"] and len(acc) == 3
    assert (a / "config.txt").read_text().count("run.seed = 3") == 1


def test_bandwidth_in_metrics(tmp_path):
    common = ["train", *SMALL, "--override", "fl.rounds=1",
              "--override", "model.spec=input:1x8x8,flatten,dense:16:relu,dense:16:relu,dense:10"]
    assert run(tmp_path / "full", *common, "--override", "fl.alpha=0", "--override", "fl.strategy=random_same") == 0
    assert run(tmp_path / "half", *common, "--override", "fl.strategy=random_distinct") == 0
    full = read_csv(tmp_path / "full" / "metrics.csv")[1]
    half = read_csv(tmp_path / "half" / "metrics.csv")[1]
    # 3 clients x 4 bytes; only the second hidden layer is maskable and keeps 8 of 16 units
    assert int(full[6]) == 12 * (64 * 16 + 16 + 16 * 16 + 16 + 16 * 10 + 10)
    assert int(half[6]) == 12 * (64 * 16 + 16 + 16 * 8 + 8 + 8 * 10 + 10)
    assert int(half[8]) == 2 * int(half[6])


def test_no_dropout_run_learns_separable_data(tmp_path):
    args = ["train", *SMALL, "--override", "fl.alpha=0", "--override", "fl.strategy=random_same",
            "--override", "fl.rounds=30", "--override", "data.noise=0.1", "--override", "run.eval_every=30",
            "--override", "fl.client_lr=0.1", "--override", "fl.epochs=3"]
    assert run(tmp_path, *args) == 0
    last = read_csv(tmp_path / "metrics.csv")[-1]
    assert float(last[3]) > 0.9 and float(last[5]) > 0.9


# ---- adapt and report ---------------------------------------------------------

def test_adapt_with_stub_sessions(tmp_path, capsys):
    code = run(tmp_path, "adapt", "--override", "adapt.stub=true", "--override", "adapt.window=1",
               "--override", "adapt.gamma_target=0.5", "--override", "adapt.eta0_log10=-1")
    assert code == 0
    summary = (tmp_path / "adapt_summary.txt").read_text()
    assert "eta_star_log10=-1.75" in summary and "r_star=20" in summary
    fields = dict(kv.split("=") for kv in summary.split())
    assert fields["overhead"] == fields["measured_overhead"]
    assert read_csv(tmp_path / "adapt_log.csv")[0][0] == "step"


def test_adapt_failure_writes_log_and_exits_3(tmp_path):
    code = run(tmp_path, "adapt", "--override", "adapt.stub=true", "--override", "adapt.window=1",
               "--override", "adapt.gamma_target=0.5", "--override", "adapt.eta0_log10=3",
               "--override", "adapt.max_rounds=10")
    assert code == 3
    assert len(read_csv(tmp_path / "adapt_log.csv")) == 1 + 3 * 10
    assert not (tmp_path / "adapt_summary.txt").exists()


def test_report_aggregates_runs(tmp_path):
    for seed in (1, 2):
        assert run(tmp_path / f"r{seed}", "train", *SMALL, "--override", "fl.rounds=2", "--seed", str(seed)) == 0
    inputs = [str(tmp_path / f"r{s}" / "metrics.csv") for s in (1, 2)]
    assert cli.main(["report", *inputs, "--out", str(tmp_path / "rep")]) == 0
    rows = read_csv(tmp_path / "rep" / "report.csv")
    assert tuple(rows[0]) == cli.REPORT_HEADER
    assert [r[:3] for r in rows[1:]] == [["gold", "1", "2"], ["gold", "2", "2"]]
    assert run(tmp_path / "rep2", "report") == 2
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    assert cli.main(["report", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "rep3")]) == 3


def test_desk_config_is_valid():
    cfg = desk_config().validate()
    rc = cfg.round_config()
    assert (rc.total_clients, rc.clients_per_round, cfg["adapt.max_rounds"]) == (40, 8, 150)
    assert cfg.adaptation_config().gamma_target == 0.6


def test_shipped_desk_config_matches_harness():
    shipped = ExperimentConfig.load(Path(__file__).parents[1] / "configs" / "desk.cfg").validate()
    harness = desk_config(**{"fl.strategy": "gold", "run.eval_every": 10})
    assert shipped.to_text() == harness.to_text()
