import json

import pytest

from fullanno.cli import main

from conftest import make_coco_files, make_config_doc


@pytest.fixture
def config_file(tmp_path):
    instances, captions = make_coco_files(tmp_path, n_images=5)
    doc = make_config_doc(tmp_path, instances, captions)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return str(path), doc


def test_run_dry_run_succeeds(config_file, capsys):
    path, doc = config_file
    assert main(["run", "--config", path, "--dry-run"]) == 0
    out = capsys.readouterr().out
    assert "5 records" in out


def test_unknown_flag_exits_2(config_file):
    path, _ = config_file
    with pytest.raises(SystemExit) as e:
        main(["run", "--config", path, "--frobnicate"])
    assert e.value.code == 2


def test_missing_subcommand_exits_2():
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2


def test_stats_matches_compute_stats(config_file, capsys):
    from fullanno.ingestion import read_enriched
    from fullanno.pipeline import compute_stats, stats_json
    from fullanno.tokenizers import WhitespaceTokenizer

    path, doc = config_file
    main(["run", "--config", path, "--dry-run"])
    capsys.readouterr()
    assert main(["stats", doc["output_path"], "--json"]) == 0
    shown = json.loads(capsys.readouterr().out)
    handle = read_enriched(doc["output_path"])
    assert shown == stats_json(compute_stats(handle, WhitespaceTokenizer()))


def test_stats_table_layout(config_file, capsys):
    path, doc = config_file
    main(["run", "--config", path, "--dry-run"])
    capsys.readouterr()
    main(["stats", doc["output_path"]])
    out = capsys.readouterr().out
    assert "#Images" in out and "ATL for Dense Cap" in out


def test_validate_on_output(config_file, capsys):
    path, doc = config_file
    main(["run", "--config", path, "--dry-run"])
    assert main(["validate", doc["output_path"]]) == 0


def test_data_error_exits_1_with_json_stderr(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{broken\n")
    assert main(["validate", str(bad)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "SchemaError"


def test_staged_runs_via_cli(config_file, capsys):
    path, doc = config_file
    assert main(["run", "--config", path, "--dry-run", "--stage", "1"]) == 0
    assert main(["run", "--config", path, "--dry-run", "--stage", "2",
                 "--resume"]) == 0
    assert main(["run", "--config", path, "--dry-run", "--stage", "3",
                 "--resume"]) == 0
    assert main(["export", "--config", path]) == 0


def test_workers_flag_overrides_config(config_file):
    path, doc = config_file
    assert main(["run", "--config", path, "--dry-run", "--workers", "2"]) == 0


def test_ingest_subcommand(config_file, capsys):
    path, doc = config_file
    assert main(["ingest", "--config", path]) == 0
    assert "ingested 5 images" in capsys.readouterr().out
