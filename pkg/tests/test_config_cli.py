import json

import pytest

from latexplain import cli, config
from latexplain.errors import ConfigError
from latexplain.imgio import decode_pgm, parse_saliency_csv, read_pgm
from conftest import IMAGES, LABELS

SMALL = ["aae.epochs=8", "blackbox.epochs=2", "neighgen.population=30", "neighgen.generations=4",
         "explain.budget=5000"]


def run(tmp, *argv, sets=SMALL):
    args = list(argv) + ["--out", str(tmp)] + [a for s in sets for a in ("--set", s)]
    return cli.main(args)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert run(out, "ingest", "--images", str(IMAGES), "--labels", str(LABELS)) == 0
    assert run(out, "train-bb") == 0
    assert run(out, "train-aae") == 0
    return out


def test_config_round_trip():
    cfg = config.RunConfig(seed=7)
    config.set_key(cfg, "aae.hidden", "32,16")
    config.set_key(cfg, "eval.colors", "black,white")
    config.set_key(cfg, "neighgen.balance", "0.25")
    again = config.loads(config.dumps(cfg))
    assert again == cfg
    assert config.dumps(again) == config.dumps(cfg)


def test_config_rejects_unknown_and_bad_values():
    with pytest.raises(ConfigError):
        config.loads("aae.nope = 3\n")
    with pytest.raises(ConfigError):
        config.loads("bogus = 3\n")
    with pytest.raises(ConfigError):
        config.loads("aae.epochs = many\n")
    with pytest.raises(ConfigError):
        config.loads("just words\n")
    assert config.loads("# comment\n\nseed = 4\n").seed == 4


def test_config_file_checks_data_paths(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(f"data.images = {tmp_path / 'missing.gz'}\n")
    with pytest.raises(ConfigError):
        config.load(p)
    with pytest.raises(ConfigError):
        config.load(tmp_path / "absent.cfg")


def test_missing_artifact_reports_error(tmp_path, capsys):
    assert run(tmp_path, "explain", "--indices", "0") == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError"
    assert "dataset" in err["message"] or "ingest" in err["message"]


def test_bad_set_flag(tmp_path, capsys):
    assert run(tmp_path, "train-bb", sets=["aae.epochs"]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"


def test_index_ranges():
    assert cli._parse_indices("0,3,10-12") == [0, 3, 10, 11, 12]


def test_explain_writes_artifacts(small_run):
    assert run(small_run, "explain", "--indices", "0-1") == 0
    folder = small_run / "explain" / "00000"
    doc = json.loads((folder / "manifest.json").read_text())
    assert read_pgm(folder / doc["source"]).shape == (28, 28)
    assert 1 <= len(doc["exemplars"]) <= 10
    assert len(doc["counter_exemplars"]) <= 2
    for item in doc["exemplars"] + doc["counter_exemplars"]:
        assert (folder / item["file"]).is_file()
    assert len(parse_saliency_csv((folder / "saliency.csv").read_text())) == 784
    assert set(read_pgm(folder / "saliency_bands.pgm").ravel().tolist()) <= {0, 128, 255}
    assert (small_run / "config.txt").is_file()


def test_explain_is_deterministic(small_run, tmp_path):
    assert run(small_run, "explain", "--indices", "1") == 0
    first = (small_run / "explain" / "00001" / "manifest.json").read_text()
    assert run(small_run, "explain", "--indices", "1") == 0
    assert (small_run / "explain" / "00001" / "manifest.json").read_text() == first


def test_interpolate_writes_steps(small_run):
    for pos in range(5):
        code = run(small_run, "interpolate", "--instance", str(pos), "--steps", "8")
        if code == 0:
            break
    assert code == 0
    folder = next((small_run / "interpolate").iterdir())
    doc = json.loads((folder / "interpolation.json").read_text())
    assert len(doc["steps"]) == 8
    for step in doc["steps"]:
        assert decode_pgm((folder / step["file"]).read_bytes()).shape == (28, 28)


def test_evaluate_relevance_rows(small_run):
    assert run(small_run, "evaluate", "--metric", "relevance", "--instances", "3") == 0
    lines = (small_run / "eval" / "relevance.csv").read_text().splitlines()
    assert lines[0] == "color,tau,relevance"
    assert len(lines) == 1 + 33


def test_evaluate_random_stability(small_run):
    assert run(small_run, "evaluate", "--metric", "stability", "--instances", "2", "--explainer", "random") == 0
    doc = json.loads((small_run / "eval" / "stability.json").read_text())
    assert doc["instances"] == 2 and doc["explainer"] == "random"
