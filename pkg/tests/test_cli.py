import json

import pytest

from voxatlas import cli
from voxatlas.volume import read_vvol


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, atlas = root / "data", root / "atlas"
    assert cli.main(["phantom-gen", "--n", "5", "--n-train", "3", "--dims", "16", "--spacing", "4",
                     "--out", str(data), "--seed", "2"]) == cli.EXIT_OK
    assert cli.main(["build-atlas", "--data", str(data), "--out", str(atlas), "--cases", "3",
                     "--rounds", "1"]) == cli.EXIT_OK
    return root


def test_phantom_gen_manifest(workspace):
    rec = json.loads((workspace / "data" / "manifest.json").read_text())
    assert rec["command"] == "phantom-gen" and rec["seed"] == 2
    assert rec["config"]["n"] == 5
    assert any(k.endswith("manifest.csv") for k in rec["outputs"])
    assert len((workspace / "data" / "manifest.csv").read_text().splitlines()) == 11


def test_train_segment_evaluate(workspace):
    run = workspace / "run"
    assert cli.main(["train", "--data", str(workspace / "data"), "--atlas", str(workspace / "atlas"),
                     "--out", str(run), "--epochs", "1", "--lr", "1e-3"]) == cli.EXIT_OK
    assert (run / "model.vnet").exists() and (run / "train_log.csv").exists()
    pred = workspace / "pred"
    for img in sorted((workspace / "data").glob("*_img.vvol")):
        out = pred / img.name.replace("_img", "_lab")
        assert cli.main(["segment", "--model", str(run / "model.vnet"), "--atlas",
                         str(workspace / "atlas"), "--in", str(img), "--out", str(out)]) == cli.EXIT_OK
        assert read_vvol(out).dims == (16, 16, 16)
    csvs = []
    for name in ("a.csv", "b.csv"):
        assert cli.main(["evaluate", "--pred", str(pred), "--truth", str(workspace / "data"),
                         "--out", str(workspace / name), "--bootstrap", "50"]) == cli.EXIT_OK
        csvs.append((workspace / name).read_bytes())
    assert csvs[0] == csvs[1]
    assert csvs[0].startswith(b"case,dice,msd_mm,hsd_mm,corr_ef,seconds\n")


def test_config_precedence(workspace, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"data={workspace / 'data'}\natlas={workspace / 'atlas'}\nlr=0.5\nepochs=3\n"
                   "# comment\nno_consistency=true\n")
    args = cli.parse_args(["train", "--config", str(cfg), "--out", "x", "--epochs", "1"])
    assert args.epochs == 1  # flag beats file
    assert args.lr == 0.5  # file beats default
    assert args.no_consistency is True
    assert args.alpha == 0.6  # default


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("bogus=1\n")
    assert cli.main(["train", "--config", str(bad), "--data", "d", "--atlas", "a", "--out", "o"]) == cli.EXIT_USAGE
    bad.write_text("no equals sign\n")
    assert cli.main(["gradcheck", "--config", str(bad)]) == cli.EXIT_USAGE
    bad.write_text("optimizer=rmsprop\n")
    assert cli.main(["train", "--config", str(bad), "--data", "d", "--atlas", "a", "--out", "o"]) == cli.EXIT_USAGE


def test_usage_and_data_errors(workspace, tmp_path):
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["train", "--data", "x"]) == cli.EXIT_USAGE
    assert cli.main(["train", "--data", str(workspace / "data"), "--atlas", str(workspace / "atlas"),
                     "--out", str(tmp_path / "o"), "--momentum", "1.5"]) == cli.EXIT_USAGE
    assert cli.main(["train", "--data", str(tmp_path / "missing"), "--atlas", str(workspace / "atlas"),
                     "--out", str(tmp_path / "o")]) == cli.EXIT_DATA
    assert cli.main(["segment", "--model", "nope.vnet", "--atlas", str(workspace / "atlas"),
                     "--in", str(tmp_path / "missing.vvol"), "--out", str(tmp_path / "s.vvol")]) == cli.EXIT_DATA
    assert cli.main(["phantom-gen", "--n", "1", "--out", str(tmp_path / "p")]) == cli.EXIT_USAGE


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["train", "--help"])
    text = capsys.readouterr().out
    for needle in ("default 0.6", "default 0.4", "default 0.0002", "default 0.5", "Batch size"):
        assert needle in text
