import json
from pathlib import Path

import numpy as np
import pytest

from nappure import cli
from nappure import pipeline as P
from nappure import transforms as T
from nappure.attack import evaluate
from nappure.prior import GmmPrior
from nappure.tensor import write_tensor

SMALL = {"data": {"train": 300, "eval": 24, "val": 24}, "purify": {"iterations": 20}}


def small_config(**over):
    return P.merge(P.load_config(None, **SMALL), over)


def tree(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    cfg = small_config()
    out = tmp_path_factory.mktemp("small")
    return cfg, out, P.run_pipeline(cfg, out)


# data generation -------------------------------------------------------------


def desk_prior(s=0.05, k=3):
    means = P.desk_means(k, (1, 8, 8))
    return GmmPrior(np.full(k, 1 / k), means.reshape(k, -1), s)


def test_zero_variance_gives_means(tmp_path):
    prior = desk_prior(s=0.0)
    m = P.gen_dataset(prior, 1, (1, 8, 8), 0, tmp_path)
    x = P.DatasetManifest.load(tmp_path).images()
    assert np.array_equal(x.reshape(3, -1), P.stored(np.clip(prior.means, 0, 1)))
    assert list(m.labels()) == [0, 1, 2]


def test_balanced_counts(tmp_path):
    m = P.gen_dataset(desk_prior(), 128, (1, 8, 8), 5, tmp_path)
    assert len(m.entries) == 384
    assert np.bincount(m.labels()).tolist() == [128, 128, 128]
    x = m.images()
    assert x.min() >= 0 and x.max() <= 1


def test_same_seed_same_bytes(tmp_path):
    prior = desk_prior()
    P.gen_dataset(prior, 4, (1, 8, 8), 9, tmp_path / "a")
    P.gen_dataset(prior, 4, (1, 8, 8), 9, tmp_path / "b")
    P.gen_dataset(prior, 4, (1, 8, 8), 10, tmp_path / "c")
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    assert tree(tmp_path / "a") != tree(tmp_path / "c")


def test_splits_differ():
    prior = desk_prior()
    a, _ = P.sample_split(prior, 6, (1, 8, 8), 1, "eval")
    b, _ = P.sample_split(prior, 6, (1, 8, 8), 1, "val")
    assert not np.array_equal(a, b)


def test_gen_dataset_errors(tmp_path):
    with pytest.raises(ValueError):
        P.gen_dataset(desk_prior(), 0, (1, 8, 8), 0, tmp_path)
    with pytest.raises(ValueError):
        P.gen_dataset(desk_prior(), 1, (1, 4, 4), 0, tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        P.gen_dataset(desk_prior(), 1, (1, 8, 8), 0, blocker / "sub")


def test_manifest_validation(tmp_path):
    write_tensor(tmp_path / "a.napt", np.zeros((1, 2, 2)))
    good = {"shape": [1, 2, 2], "classes": 2, "entries": [{"file": "a.napt", "label": 1, "split": "eval"}]}
    (tmp_path / "manifest.json").write_text(json.dumps(good))
    m = P.DatasetManifest.load(tmp_path)
    assert m.images().shape == (1, 1, 2, 2) and m.indices() == [0]
    bad = dict(good, entries=[{"file": "a.napt", "label": 2, "split": "eval"}])
    (tmp_path / "manifest.json").write_text(json.dumps(bad))
    with pytest.raises(ValueError):
        P.DatasetManifest.load(tmp_path)
    bad = dict(good, entries=[{"file": "missing.napt", "label": 0, "split": "eval"}])
    (tmp_path / "manifest.json").write_text(json.dumps(bad))
    with pytest.raises(FileNotFoundError):
        P.DatasetManifest.load(tmp_path / "manifest.json")


def test_config_hash_tracks_content():
    a, b = small_config(), small_config()
    assert P.config_hash(a) == P.config_hash(b)
    b["seed"] = 2
    assert P.config_hash(a) != P.config_hash(b)


def test_load_config_merges(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"purify": {"iterations": 7}}))
    cfg = P.load_config(path, seed=4)
    assert cfg["purify"]["iterations"] == 7 and cfg["seed"] == 4
    assert cfg["purify"]["eta1"] == P.default_config()["purify"]["eta1"]


# run report ------------------------------------------------------------------


def test_report_layout(small_run):
    cfg, out, report = small_run
    assert len(report.rows) == len(cfg["attacks"]) * len(cfg["defenses"])
    assert report.config_hash == P.config_hash(cfg) and report.seed == 1
    for r in report.rows:
        assert 0 <= r["clean_acc"] <= 1 and 0 <= r["robust_acc"] <= 1
    saved = json.loads((out / "report.json").read_text())
    assert saved["rows"] == report.rows and saved["config"] == cfg
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[0] == "defense,attack,clean_acc,robust_acc" and len(lines) == len(report.rows) + 1
    assert set(json.loads((out / "timing.json").read_text())) == {"gen", "train", "attack", "purify", "eval"}


def test_report_matches_stored_tensors(small_run):
    cfg, out, report = small_run
    clf = P.load_classifier(out)
    x, y = P.load_split(out, "eval")
    assert report.clean_accuracy == evaluate(clf, x, y)
    for r in report.rows:
        d, a = r["defense"], r["attack"]
        sub = out / "attacks" / a if d == "none" else out / "purified" / d / a
        m = P.DatasetManifest.load(sub)
        assert r["robust_acc"] == evaluate(clf, m.images(), m.labels())


def test_none_row_is_attacked_accuracy(small_run):
    cfg, out, report = small_run
    clf = P.load_classifier(out)
    x, y = P.load_split(out, "eval")
    for a in cfg["attacks"]:
        x_adv = P.run_attack(clf, x, y, P.attack_config(cfg, a))
        r = report.row("none", a)
        assert r["robust_acc"] == evaluate(clf, x_adv, y)
        assert r["clean_acc"] == report.clean_accuracy


def test_zero_attacks_clean_only(tmp_path):
    cfg = small_config()
    cfg["attacks"] = {}
    report = P.run_pipeline(cfg, tmp_path)
    assert report.rows == [] and report.clean_accuracy >= 0.9
    assert not (tmp_path / "attacks").exists()


def test_lm_row_equals_zero_lambda_additive(tmp_path):
    cfg = small_config(purify_overrides={"additive": {"lambda1": 0.0, "lambda2": 0.0}})
    cfg["attacks"] = {"additive": cfg["attacks"]["additive"]}
    cfg["defenses"] = ["lm", "nappure"]
    report = P.run_pipeline(cfg, tmp_path)
    assert report.row("lm", "additive") == dict(report.row("nappure", "additive"), defense="lm")
    for a, b in (("additive", "additive"), ("clean-all", "clean-additive")):
        assert tree(tmp_path / "purified" / "lm" / a) == tree(tmp_path / "purified" / "nappure" / b)


def test_unknown_names_rejected(small_run, tmp_path):
    cfg, out, _ = small_run
    with pytest.raises(P.StageError):
        P.stage_purify(cfg, out, defenses=["bogus"])
    with pytest.raises(ValueError):
        P.defend("bogus", np.zeros((1, 1, 8, 8)), [0], None, None, cfg, 1)
    with pytest.raises(ValueError):
        P.defend("nappure", np.zeros((1, 1, 8, 8)), [0], None, None, cfg, 1)


def test_stage_error_names_stage(tmp_path):
    cfg = small_config()
    with pytest.raises(P.StageError) as info:
        P.stage_attack(cfg, tmp_path)
    assert info.value.stage == "attack" and info.value.config_hash == P.config_hash(cfg)
    assert P.config_hash(cfg)[:12] in str(info.value)
    bad = small_config(prior={"min_distance": 100.0})
    with pytest.raises(P.StageError) as info:
        P.stage_gen(bad, tmp_path)
    assert info.value.stage == "gen"


def test_ppm_export(tmp_path):
    cfg = small_config(export_ppm=True)
    cfg["attacks"] = {"patch": cfg["attacks"]["patch"]}
    cfg["defenses"] = ["none"]
    P.run_pipeline(cfg, tmp_path)
    strips = sorted((tmp_path / "ppm" / "none" / "patch").iterdir())
    assert len(strips) == 8
    assert strips[0].read_bytes().startswith(b"P5\n26 8\n255\n")


# studies ---------------------------------------------------------------------


def test_grid_single_cell(tmp_path):
    best, table = P.grid_search(small_config(), [0.01], [5.0], tmp_path)
    assert best == (0.01, 5.0) and len(table) == 1
    assert (tmp_path / "grid.csv").read_text().splitlines()[0] == "lambda1,lambda2,accuracy"


def test_grid_log_shape(tmp_path):
    cfg = small_config(purify={"iterations": 5})
    best, table = P.grid_search(cfg, [0.001, 0.01, 0.1], [1, 5, 10], tmp_path)
    assert len(table) == 9
    assert all(0 <= r["accuracy"] <= 1 for r in table)
    top = max(r["accuracy"] for r in table)
    assert best == min((r["lambda1"], r["lambda2"]) for r in table if r["accuracy"] == top)
    assert len((tmp_path / "grid.csv").read_text().splitlines()) == 10


def test_grid_validation_manifest(tmp_path):
    cfg = small_config()
    prior, data, clf, _ = P.prepare(cfg, tmp_path)
    x, y = data["val"]
    x_adv = P.run_attack(clf, x, y, P.attack_config(cfg, "flow"))
    P.write_images(tmp_path / "valadv", x_adv, y, "val", cfg["shape"], 3)
    a = P.grid_search(cfg, [0.01], [0.0, 5.0], tmp_path, validation=tmp_path / "valadv")
    b = P.grid_search(cfg, [0.01], [0.0, 5.0], tmp_path / "other")
    assert a == b
    P.write_images(tmp_path / "empty", [], [], "val", cfg["shape"], 3)
    with pytest.raises(ValueError):
        P.grid_search(cfg, [0.01], [5.0], tmp_path, validation=tmp_path / "empty")


def test_grid_empty_rejected(tmp_path):
    with pytest.raises(ValueError):
        P.grid_search(small_config(), [], [1.0], tmp_path)
    with pytest.raises(ValueError):
        P.grid_search(small_config(), [0.01], [], tmp_path)


def test_reconstruction_term_needed_on_flow(tmp_path):
    cfg = P.default_config()
    best, table = P.grid_search(cfg, [0.01], [0.0, 5.0], tmp_path)
    acc = {r["lambda2"]: r["accuracy"] for r in table}
    assert best == (0.01, 5.0) and acc[5.0] > acc[0.0]


def test_sweep_zero_is_undefended(tmp_path):
    cfg = small_config()
    table = P.iteration_sweep(cfg, [0, 20], tmp_path)
    prior, clf, x, x_adv, y = P._attacked_split(cfg, tmp_path, "patch", "eval")
    assert table[0] == {"iterations": 0, "robust_acc": evaluate(clf, x_adv, y)}
    assert table == P.iteration_sweep(cfg, [0, 20], tmp_path / "again")
    assert (tmp_path / "sweep.csv").read_text().splitlines()[1].startswith("0,")
    with pytest.raises(ValueError):
        P.iteration_sweep(cfg, [], tmp_path)


def test_mismatch_degenerate_row(small_run, tmp_path):
    cfg, _, report = small_run
    table = P.mismatch_eval(cfg, cfg["defense_specs"]["conv"], {"same": {}}, tmp_path)
    assert table == [{"variant": "same",
                      "undefended": report.row("none", "conv")["robust_acc"],
                      "purified": report.row("nappure", "conv")["robust_acc"]}]


def test_mismatch_empty_and_incompatible(tmp_path):
    cfg = small_config()
    assert P.mismatch_eval(cfg, {"kind": "conv", "kernel_size": 5}, {}, tmp_path) == []
    with pytest.raises(ValueError):
        P.mismatch_eval(cfg, {"kind": "conv", "kernel_size": 5}, {"f": {"spec": {"kind": "flow"}}}, tmp_path)


def test_mismatch_smaller_attack_kernel(tmp_path):
    cfg = P.default_config()
    variants = {"k3": {"spec": {"kind": "conv", "kernel_size": 3}}, "k5": {"spec": {"kind": "conv", "kernel_size": 5}}}
    table = {r["variant"]: r for r in P.mismatch_eval(cfg, {"kind": "conv", "kernel_size": 5}, variants, tmp_path)}
    assert table["k3"]["purified"] >= table["k5"]["purified"] - 0.05


def test_composite_eval_rows(tmp_path):
    table = P.composite_eval(small_config(purify={"iterations": 5}), tmp_path)
    assert set(table) == {"none", "lm", "nappure-joint"} | {f"nappure/{f}" for f in ("conv", "patch", "flow", "additive")}
    assert all(0 <= v <= 1 for v in table.values())
    assert len((tmp_path / "composite.csv").read_text().splitlines()) == len(table) + 1


def test_flow_purification_recovers_class(desk):
    cfg, prior, data, clf = desk
    x, y = data["eval"]
    x_adv = P.run_attack(clf, x, y, P.attack_config(cfg, "flow"))
    xp = P.defend("nappure", x_adv, list(range(len(y))), "flow", prior, cfg, int(cfg["seed"]))
    same = prior.nearest_mean(xp) == prior.nearest_mean(x)
    assert len(same) == 256 and same.mean() >= 0.70


# command line ----------------------------------------------------------------


@pytest.fixture
def small_json(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_cli_staged_equals_run(tmp_path, small_json, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["--config", str(small_json), "--out", str(a), "run"]) == 0
    for cmd in ("gen-data", "train-clf", "attack", "purify", "eval"):
        assert cli.main([cmd, "--config", str(small_json), "--out", str(b)]) == 0
    ta, tb = tree(a), tree(b)
    del ta["timing.json"]
    assert ta == tb
    assert "clean accuracy" in capsys.readouterr().out


def test_cli_seed_flag(tmp_path, small_json):
    assert cli.main(["gen-data", "--config", str(small_json), "--seed", "7", "--out", str(tmp_path)]) == 0
    assert P.DatasetManifest.load(tmp_path / "data" / "eval").seed == 7


def test_cli_subset_flags(tmp_path, small_json):
    base = ["--config", str(small_json), "--out", str(tmp_path)]
    for cmd in ("gen-data", "train-clf"):
        assert cli.main([cmd] + base) == 0
    assert cli.main(["attack", "--attack", "patch"] + base) == 0
    assert cli.main(["purify", "--attack", "patch", "--defense", "none,lm"] + base) == 0
    assert sorted(p.name for p in (tmp_path / "attacks").iterdir()) == ["patch"]
    assert sorted(p.name for p in (tmp_path / "purified").iterdir()) == ["lm", "none"]


def test_cli_exit_codes(tmp_path, small_json, capsys):
    assert cli.main(["attack", "--config", str(small_json), "--out", str(tmp_path / "empty")]) == 2
    assert "attack" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1
    with pytest.raises(SystemExit):
        cli.main(["no-such-command"])


def test_cli_studies(tmp_path, small_json, capsys):
    base = ["--config", str(small_json), "--out", str(tmp_path)]
    assert cli.main(["grid", "--lambda1", "0.01", "--lambda2", "5"] + base) == 0
    assert "best lambda1=0.01 lambda2=5.0" in capsys.readouterr().out
    assert cli.main(["sweep-iters", "--iters", "0,5"] + base) == 0
    assert cli.main(["mismatch", "--variants", "{}"] + base) == 0
    assert (tmp_path / "grid.csv").exists() and (tmp_path / "sweep.csv").exists()
