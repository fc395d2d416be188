import csv
import filecmp
import json
import os

import pytest

from careflow import cli

SYNTH_SETTINGS = ["n_stops=60", "n_routes=6", "pois_per_class=6", "n_cards=400", "days=35",
                  "accompaniment_pairs=15", "survey_size=150", "mm_groups=30", "mm_per_group=10"]


@pytest.fixture(scope="module")
def city(tmp_path_factory):
    out = tmp_path_factory.mktemp("city")
    args = ["synth", "--out-dir", str(out), "--seed", "5"]
    for s in SYNTH_SETTINGS:
        args += ["--set", s]
    assert cli.main(args) == 0
    return out


def _config(city, path, **extra):
    lines = [f"gtfs = {city / 'gtfs'}", f"pois = {city / 'pois.csv'}", f"stages = {city / 'stages.csv'}",
             f"registrations = {city / 'registrations.csv'}", f"name_cache = {city / 'name_cache.csv'}",
             f"baby_names = {city / 'baby_names.csv'}", f"survey = {city / 'survey.csv'}", "# comment", ""]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="module")
def run_dir(city, tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = _config(city, d / "careflow.cfg", seed=2)
    assert cli.main(["run", "--config", str(cfg), "--out-dir", str(d / "out")]) == 0
    return d


EXPECTED = {"card_genders.csv", "poi_stops.csv", "buffer_sensitivity.csv", "sample.csv", "funnel.csv",
            "parity_series.csv", "percentiles.csv", "flow_stats.csv", "events.csv", "patterns.csv",
            "hourly_density.csv", "gender_vs_rate.csv", "fare_breakdown.csv", "gender_moc_table.csv",
            "convenience.csv", "chi2.csv", "gender_validation.csv", "run_report.json", "timings.json"}


def test_run_emits_all_reports(run_dir):
    names = set(os.listdir(run_dir / "out"))
    assert EXPECTED <= names
    report = json.loads((run_dir / "out" / "run_report.json").read_text())
    assert report["seeds"]["sample"] == 2
    cards = [r["cards"] for r in report["funnel"]]
    stages = [r["stages"] for r in report["funnel"]]
    assert cards == sorted(cards, reverse=True) and stages == sorted(stages, reverse=True)
    assert report["stages"]["gender"]["validation"]["error_rate"] == pytest.approx(0.10, abs=0.01)
    assert set(json.loads((run_dir / "out" / "timings.json").read_text())) >= {"ingest", "gender", "mocgeo"}


def test_rerun_is_byte_identical(city, run_dir, tmp_path):
    assert cli.main(["run", "--config", str(run_dir / "careflow.cfg"), "--out-dir", str(tmp_path / "again")]) == 0
    for name in sorted(os.listdir(run_dir / "out")):
        if name == "timings.json":
            continue
        assert filecmp.cmp(run_dir / "out" / name, tmp_path / "again" / name, shallow=False), name


def test_subcommands_match_orchestrated_run(city, run_dir, tmp_path):
    cfg = str(run_dir / "careflow.cfg")
    out = run_dir / "out"
    assert cli.main(["infer-gender", "--config", cfg, "--out", str(tmp_path / "g.csv")]) == 0
    assert filecmp.cmp(tmp_path / "g.csv", out / "card_genders.csv", shallow=False)
    assert cli.main(["poi-stops", "--config", cfg, "--out", str(tmp_path / "p.csv")]) == 0
    assert filecmp.cmp(tmp_path / "p.csv", out / "poi_stops.csv", shallow=False)
    assert cli.main(["sample", "--config", cfg, "--genders", str(tmp_path / "g.csv"),
                     "--out", str(tmp_path / "s.csv")]) == 0
    assert filecmp.cmp(tmp_path / "s.csv", out / "sample.csv", shallow=False)
    assert cli.main(["analyze-moc", "--config", cfg, "--sample", str(tmp_path / "s.csv"),
                     "--poi-stops", str(tmp_path / "p.csv"), "--out-dir", str(tmp_path / "moc")]) == 0
    for name in ("parity_series.csv", "percentiles.csv", "flow_stats.csv"):
        assert filecmp.cmp(tmp_path / "moc" / name, out / name, shallow=False), name
    assert cli.main(["analyze-accompaniment", "--config", cfg, "--genders", str(tmp_path / "g.csv"),
                     "--out-dir", str(tmp_path / "acc")]) == 0
    for name in ("events.csv", "patterns.csv", "gender_vs_rate.csv", "fare_breakdown.csv", "hourly_density.csv"):
        assert filecmp.cmp(tmp_path / "acc" / name, out / name, shallow=False), name
    assert cli.main(["stats", "chi2", "--in", str(out / "gender_moc_table.csv"), "--out", str(tmp_path / "c.csv")]) == 0
    assert filecmp.cmp(tmp_path / "c.csv", out / "chi2.csv", shallow=False)


def test_flag_beats_file_beats_default(city, tmp_path, monkeypatch):
    cfg = _config(city, tmp_path / "c.cfg", seed=3, min_days=12)
    monkeypatch.setenv("CAREFLOW_CONFIG", str(cfg))
    args = cli.build_parser().parse_args(["sample", "--genders", "x", "--out", "y", "--seed", "9"])
    resolved = cli.resolve(args, cli._FLAG_KEYS)
    assert resolved["seed"] == "9"          # flag
    assert resolved["min_days"] == "12"     # file via the environment variable
    assert resolved["cutoff"] == "0.51"     # default
    args = cli.build_parser().parse_args(["sample", "--genders", "x", "--out", "y", "--set", "min_days=4"])
    assert cli.resolve(args, cli._FLAG_KEYS)["min_days"] == "4"


def test_missing_gtfs_names_ingest_stage(city, tmp_path, capsys):
    cfg = _config(city, tmp_path / "c.cfg")
    code = cli.main(["run", "--config", str(cfg), "--gtfs", str(tmp_path / "nowhere"), "--out-dir", str(tmp_path / "o")])
    assert code != 0
    assert "ingest stage" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = blue\n")
    assert cli.main(["ingest-check", "--config", str(cfg)]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_threads_must_be_positive(city, capsys):
    assert cli.main(["ingest-check", "--pois", str(city / "pois.csv"), "--threads", "0"]) == 2


def test_ingest_check_counts(city, capsys):
    assert cli.main(["ingest-check", "--gtfs", str(city / "gtfs"), "--pois", str(city / "pois.csv")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["stops"] == 60 and out["pois"] == 18


def test_stats_subcommands(city, tmp_path):
    table = tmp_path / "t.csv"
    table.write_text("gender,MoC,NonMoC\nWoman,10,20\nMan,20,10\n")
    assert cli.main(["stats", "chi2", "--in", str(table), "--out", str(tmp_path / "chi.csv")]) == 0
    row = next(csv.DictReader(open(tmp_path / "chi.csv")))
    assert abs(float(row["statistic"]) - 20 / 3) < 1e-9 and row["df"] == "1"

    values = tmp_path / "w.csv"
    values.write_text("group,value\na,1\na,2\na,4\nb,3\nb,5\nb,8\n")
    assert cli.main(["stats", "welch", "--in", str(values), "--out", str(tmp_path / "welch.csv")]) == 0
    row = next(csv.DictReader(open(tmp_path / "welch.csv")))
    assert row["group_a"] == "a" and float(row["t"]) < 0

    out = tmp_path / "mixed.csv"
    assert cli.main(["stats", "mixed", "--in", str(city / "mixed_model.csv"), "--out", str(out)]) == 0
    row = next(csv.DictReader(open(out)))
    assert row["converged"] == "true" and int(row["n_obs"]) == 300
    assert cli.main(["stats", "mixed", "--in", str(city / "mixed_model.csv"), "--out", str(out),
                     "--sample-n", "120", "--seed", "4"]) == 0
    row = next(csv.DictReader(open(out)))
    assert (row["n_obs"], row["sample_n"], row["seed"]) == ("120", "120", "4")


def test_stats_bad_input_fails(tmp_path, capsys):
    bad = tmp_path / "t.csv"
    bad.write_text("gender,MoC\nWoman,0\nMan,0\n")
    assert cli.main(["stats", "chi2", "--in", str(bad), "--out", str(tmp_path / "o.csv")]) == 1
    assert "stats stage" in capsys.readouterr().err


def test_synth_null_and_config_file(tmp_path):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text("\n".join(SYNTH_SETTINGS) + "\nsynth.seed = 8\n")
    assert cli.main(["synth", "--config", str(cfg), "--null", "--out-dir", str(tmp_path / "n")]) == 0
    manifest = json.loads((tmp_path / "n" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 8 and manifest["config"]["poi_women_share"] == 0.5
    bad = tmp_path / "bad.cfg"
    bad.write_text("days = 5\n")
    assert cli.main(["synth", "--config", str(bad), "--out-dir", str(tmp_path / "b")]) == 1
