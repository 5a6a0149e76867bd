import json

import numpy as np
import pytest

from jade.cli import main
from jade.data import load_container, read_manifest, write_idx


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("synth", "--out-dir", out, "--n-per-class", 20, "--n-per-class-aux", 25, "--seed", 1) == 0
    return out


def train_args(synth_dir, out, *extra):
    return ("train", "--manifest", synth_dir / "manifest.txt", "--out-dir", out, "--epochs", 1,
            "--set", "n_per_class=10", "--set", "batch_size=32", "--set", "eval_every=5", *extra)


# --- synth / import-mnist ----------------------------------------------------------------


def test_synth_writes_four_containers(synth_dir):
    entries = read_manifest(synth_dir / "manifest.txt")
    assert sorted((e.name, e.split) for e in entries) == [
        ("synth-auxiliary", "test"), ("synth-auxiliary", "train"),
        ("synth-primary", "test"), ("synth-primary", "train")]
    assert all(e.path.is_file() for e in entries)
    assert len(load_container(synth_dir / "synth-auxiliary_train.jadc")) == 250
    assert (synth_dir / "synth_oracle.txt").read_text().count("nearest_template_error=") == 4


def test_synth_same_seed_identical(synth_dir, tmp_path):
    assert run("synth", "--out-dir", tmp_path, "--n-per-class", 20, "--n-per-class-aux", 25, "--seed", 1) == 0
    for name in ("synth-primary_train.jadc", "synth-auxiliary_test.jadc", "manifest.txt"):
        assert (tmp_path / name).read_bytes() == (synth_dir / name).read_bytes()


def test_synth_rejects_zero(tmp_path):
    with pytest.raises(SystemExit) as err:
        run("synth", "--out-dir", tmp_path, "--n-per-class", 0)
    assert err.value.code == 2


def _idx_files(tmp_path):
    rng = np.random.default_rng(0)
    images = write_idx(rng.integers(0, 256, (30, 28, 28)), tmp_path / "train-images-idx3-ubyte.gz", compress=True)
    labels = write_idx(rng.integers(0, 10, 30), tmp_path / "train-labels-idx1-ubyte")
    return images, labels


def test_import_mnist(tmp_path):
    images, labels = _idx_files(tmp_path)
    out = tmp_path / "out"
    assert run("import-mnist", "--images", images, "--labels", labels, "--out-dir", out) == 0
    assert (out / "manifest.txt").read_text() == "name=mnist split=train path=mnist_train.jadc\n"
    first = (out / "mnist_train.jadc").read_bytes()
    assert run("import-mnist", "--images", images, "--labels", labels, "--out-dir", out) == 0
    assert (out / "mnist_train.jadc").read_bytes() == first


def test_import_mnist_missing_file_writes_nothing(tmp_path):
    images, _ = _idx_files(tmp_path)
    out = tmp_path / "out"
    with pytest.raises(SystemExit) as err:
        run("import-mnist", "--images", images, "--labels", tmp_path / "nope", "--out-dir", out)
    assert err.value.code == 2
    assert not out.exists() or not any(out.iterdir())


def test_import_mnist_bad_file_exits_nonzero(tmp_path):
    images, labels = _idx_files(tmp_path)
    out = tmp_path / "out"
    assert run("import-mnist", "--images", labels, "--labels", labels, "--out-dir", out) == 1
    assert not out.exists() or not any(out.iterdir())


# --- train / eval / diagnose -------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run(*train_args(synth_dir, out, "--mode", "single,paired,jade", "--run-count", 3)) == 0
    return out


def test_train_layout(trained):
    for mode in ("single", "paired", "jade"):
        for r in range(3):
            d = trained / mode / f"run{r}"
            for name in ("config.txt", "checkpoint.jadk", "history.jsonl", "eval_reports.csv", "objective.png"):
                assert (d / name).is_file(), d / name
    lines = (trained / "results.txt").read_text().splitlines()
    assert [line.split("|")[0].strip() for line in lines[2:]] == ["Single Classifier", "Paired Classifier", "JADE"]
    assert (trained / "results.png").stat().st_size > 0


def test_runs_use_distinct_seeds(trained):
    seeds = {(trained / "jade" / f"run{r}" / "config.txt").read_text().split("seed_params=")[1].split()[0]
             for r in range(3)}
    assert seeds == {"0", "1", "2"}


def test_metrics_stream(trained):
    records = [json.loads(line) for line in (trained / "metrics.jsonl").read_text().splitlines()]
    assert {r["mode"] for r in records} == {"single", "paired", "jade"}
    assert all({"step", "split", "error"} <= r.keys() for r in records)


def test_resolved_config_reproduces_run(trained, synth_dir, tmp_path):
    run_dir = trained / "paired" / "run1"
    assert run("train", "--config", run_dir / "config.txt", "--out-dir", tmp_path) == 0
    again = tmp_path / "paired" / "run0"
    assert (again / "history.jsonl").read_bytes() == (run_dir / "history.jsonl").read_bytes()
    assert (again / "checkpoint.jadk").read_bytes() == (run_dir / "checkpoint.jadk").read_bytes()


def test_zero_epochs_reports_untrained(synth_dir, tmp_path):
    assert run(*train_args(synth_dir, tmp_path, "--mode", "single", "--run-count", 2), "--epochs", 0) == 0
    history = (tmp_path / "single" / "run0" / "history.jsonl").read_text().splitlines()
    assert [json.loads(line)["kind"] for line in history] == ["eval"]
    assert (tmp_path / "results.txt").is_file()


def test_train_config_errors_before_compute(synth_dir, tmp_path):
    with pytest.raises(SystemExit) as err:
        run(*train_args(synth_dir, tmp_path / "a", "--set", "bogus_key=1"))
    assert err.value.code == 2
    with pytest.raises(SystemExit):
        run("train", "--manifest", tmp_path / "missing.txt", "--out-dir", tmp_path / "b")
    assert not (tmp_path / "a").exists() and not (tmp_path / "b").exists()


def test_train_nan_exits_nonzero(synth_dir, tmp_path):
    code = run(*train_args(synth_dir, tmp_path, "--mode", "single", "--run-count", 1, "--set", "learning_rate=1e30"))
    assert code == 3


def test_eval_splits_labelled_separately(trained, synth_dir, tmp_path):
    ck = trained / "jade" / "run0" / "checkpoint.jadk"
    assert run("eval", "--checkpoint", ck, "--manifest", synth_dir / "manifest.txt", "--dataset", "synth-primary",
               "--split", "train", "--split", "test", "--out-dir", tmp_path) == 0
    assert (tmp_path / "eval_synth-primary_train.txt").is_file()
    assert (tmp_path / "eval_synth-primary_test.txt").is_file()
    assert (tmp_path / "confusion_synth-primary_test.csv").is_file()


def test_eval_auxiliary_container(trained, synth_dir, tmp_path):
    ck = trained / "paired" / "run0" / "checkpoint.jadk"
    assert run("eval", "--checkpoint", ck, "--container", synth_dir / "synth-auxiliary_test.jadc",
               "--domain", "auxiliary", "--out-dir", tmp_path) == 0
    # without --dataset the container is named after its file
    assert "domain=auxiliary" in (tmp_path / "eval_synth-auxiliary_test_test.txt").read_text()


def test_diagnose_profiles(trained, synth_dir, tmp_path):
    ck = trained / "jade" / "run0" / "checkpoint.jadk"
    args = ("diagnose", "--checkpoint", ck, "--manifest", synth_dir / "manifest.txt", "--dataset", "synth-primary")
    assert run(*args, "--all-classes", "--n", 20, "--out-dir", tmp_path / "fixed") == 0
    assert len(list((tmp_path / "fixed").glob("profile_class*.csv"))) == 10
    assert run(*args, "--random", "--n", 200, "--out-dir", tmp_path / "random") == 0
    assert [p.name for p in (tmp_path / "random").glob("profile_*.csv")] == ["profile_random.csv"]
    assert (tmp_path / "random" / "profiles.png").is_file()


def test_diagnose_rejects_non_jade(trained, synth_dir, tmp_path):
    ck = trained / "single" / "run0" / "checkpoint.jadk"
    with pytest.raises(SystemExit) as err:
        run("diagnose", "--checkpoint", ck, "--manifest", synth_dir / "manifest.txt", "--dataset", "synth-primary",
            "--random", "--out-dir", tmp_path)
    assert err.value.code == 2
