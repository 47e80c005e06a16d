import io
import shutil

import pytest

from retina_grader.cli import main

TINY = "conv:4:3x3:1x1:1 relu maxpool:2x2:2x2 flatten dense:5 softmax"


def run(*argv):
    out = io.StringIO()
    code = main(list(argv), out=out)
    return code, out.getvalue()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    code, _ = run("synth", "--per-grade", "6", "--seed", "3", "--out", str(d / "data"), "--size", "64")
    assert code == 0
    return d


def config(d, name="run", extra=""):
    p = d / f"{name}.cfg"
    p.write_text(f"""data.manifest = data/manifest.csv
output.dir = out/{name}
split.seed = 1
preproc.width = 16
preproc.height = 16
net.layers = {TINY}
train.learning_rate = 0.05
train.batch_size = 8
train.max_epochs = 3
train.early_stop_patience = 0
train.seed = 4
{extra}""")
    return p


def test_synth_writes_manifest(tmp_path):
    code, out = run("synth", "--per-grade", "2", "--seed", "7", "--out", str(tmp_path))
    assert code == 0 and "10 images" in out
    assert len((tmp_path / "manifest.csv").read_text().splitlines()) == 11


def test_synth_rejects_tiny_per_grade(tmp_path):
    assert run("synth", "--per-grade", "1", "--out", str(tmp_path))[0] == 1


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as info:
        main(["synth"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 1


def test_split_command(dataset, tmp_path):
    code, out = run("split", str(dataset / "data" / "manifest.csv"), "--ratio", "0.5", "--seed", "2",
                    "--out", str(tmp_path / "s.csv"))
    assert code == 0
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "id,split" and len(lines) == 31
    assert sum(line.endswith(",train") for line in lines) == 15
    assert run("split", str(dataset / "data" / "manifest.csv"), "--ratio", "1.0")[0] == 1
    assert run("split", str(tmp_path / "nope.csv"))[0] == 2


def test_train_eval_predict(dataset):
    code, out = run("train", str(config(dataset)), "--quiet")
    assert code == 0, out
    run_dir = dataset / "out" / "run"
    for name in ("model.rgm", "curves.csv", "curves.svg", "summary.json"):
        assert (run_dir / name).is_file()
    assert len((run_dir / "curves.csv").read_text().splitlines()) == 4

    code, out = run("eval", str(run_dir / "model.rgm"), str(dataset / "data" / "manifest.csv"),
                    "--splits", str(run_dir / "splits.csv"), "--split", "train")
    assert code == 0 and "accuracy" in out and "sensitivity" in out
    rows = [line.split() for line in out.splitlines()[-5:]]
    assert [int(r[0]) for r in rows] == [0, 1, 2, 3, 4]
    assert sum(int(v) for r in rows for v in r[1:]) == 24

    image = dataset / "data" / "images" / "syn00000.ppm"
    code, first = run("predict", str(run_dir / "model.rgm"), str(image))
    assert code == 0
    probs = [float(line.split()[-1]) for line in first.splitlines()[1:6]]
    assert abs(sum(probs) - 1.0) < 1e-6
    assert "prediction:" in first
    assert run("predict", str(run_dir / "model.rgm"), str(image))[1] == first
    assert run("predict", str(run_dir / "model.rgm"), str(dataset / "missing.ppm"))[0] == 2


def test_train_is_reproducible(dataset):
    assert run("train", str(config(dataset, "a")), "--quiet")[0] == 0
    assert run("train", str(config(dataset, "b")), "--quiet")[0] == 0
    a, b = dataset / "out" / "a", dataset / "out" / "b"
    for name in ("model.rgm", "curves.csv", "curves.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_train_preflight_fails_before_work(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("data.manifest = nowhere.csv\noutput.dir = out\n")
    assert run("train", str(p))[0] == 1
    assert not (tmp_path / "out").exists()
    p.write_text("data.manifest = nowhere.csv\ntrain.warp = 9\n")
    assert run("train", str(p))[0] == 1


def test_eval_detects_corruption(dataset, tmp_path):
    assert run("train", str(config(dataset, "c")), "--quiet")[0] == 0
    model = tmp_path / "m.rgm"
    shutil.copy(dataset / "out" / "c" / "model.rgm", model)
    data = bytearray(model.read_bytes())
    data[100] ^= 0xFF
    model.write_bytes(bytes(data))
    code, _ = run("eval", str(model), str(dataset / "data" / "manifest.csv"),
                  "--splits", str(dataset / "out" / "c" / "splits.csv"))
    assert code == 2


def test_tune_writes_sorted_leaderboard(dataset):
    extra = "search.learning_rates = 0.0, 0.05\nsearch.batch_sizes = 4, 8\nsearch.max_epochs = 2\n"
    assert run("tune", str(config(dataset, "t1", extra)), "--quiet")[0] == 0
    assert run("tune", str(config(dataset, "t2", extra)), "--quiet")[0] == 0
    board = (dataset / "out" / "t1" / "leaderboard.csv").read_text()
    assert board == (dataset / "out" / "t2" / "leaderboard.csv").read_text()
    rows = [line.split(",") for line in board.splitlines()[1:]]
    assert len(rows) == 4
    keys = [(-float(r[9]), float(r[10]), int(r[1])) for r in rows]
    assert keys == sorted(keys)
    assert run("tune", str(config(dataset, "t3", extra + "search.budget = 0\n")))[0] == 1
