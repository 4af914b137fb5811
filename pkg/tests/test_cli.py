import json

import pytest

from sounding_loc import config as C
from sounding_loc.cli import EXIT_INVALID, EXIT_MISSING, EXIT_NUMERIC, EXIT_OK, main
from sounding_loc.errors import ConfigError

TINY = [
    "data.n_solos=8", "data.n_cocktails=6", "data.test_fraction=0.5",
    "stage1.alt_rounds=0", "stage1.loc_epochs=1", "stage1.head_fit_steps=3", "stage1.kmeans_restarts=1",
    "stage1.batch_size=4", "stage2.epochs=1", "stage2.batch_size=2",
]


def _run(cmd, root, *extra, overrides=TINY):
    argv = [cmd, "--output-dir", str(root), "--seed", "1"]
    for o in overrides:
        argv += ["--override", o]
    return main(argv + list(extra))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    codes = {cmd: _run(cmd, root) for cmd in ("gen-data", "train-stage1", "train-stage2", "eval")}
    return root, codes


def test_pipeline_exit_codes_and_artifacts(tiny_run):
    root, codes = tiny_run
    assert codes == {"gen-data": 0, "train-stage1": 0, "train-stage2": 0, "eval": 0}
    for cmd in ("gen-data", "train-stage1", "train-stage2", "eval"):
        cfg = json.loads((root / cmd / "config.json").read_text())
        assert cfg["seed"] == 1 and cfg["data"]["n_solos"] == 8
    assert {p.name for p in (root / "gen-data").glob("*.json")} >= {"stage1.json", "stage2.json", "test.json"}
    assert (root / "train-stage1" / "dictionary.npz").exists()
    summary = json.loads((root / "train-stage1" / "summary.json").read_text())
    assert {"nmi", "kmeans_objective", "seconds"} <= set(summary)
    log = [json.loads(x) for x in (root / "train-stage1" / "log.jsonl").read_text().splitlines()]
    assert any(r["phase"] == "kmeans" and "kmeans_objective" in r for r in log)
    report = json.loads((root / "eval" / "report.json").read_text())
    assert report["counts"]["evaluated"] == 3 and report["counts"]["missing"] == 0
    assert len(list((root / "eval" / "predictions").glob("*.npz"))) == 3


def test_eval_prints_aggregate(tiny_run, capsys):
    root, _ = tiny_run
    assert _run("eval", root) == EXIT_OK
    out = capsys.readouterr().out
    assert "ciou@0.3" in out and "nsa" in out


def test_visualize(tiny_run):
    root, _ = tiny_run
    scene = json.loads((root / "gen-data" / "test.json").read_text())["samples"][0]["id"]
    assert _run("visualize", root, "--scene", scene) == EXIT_OK
    assert len(list((root / "visualize").glob(f"{scene}_*.png"))) == 5
    assert _run("visualize", root, "--scene", "nope") == EXIT_INVALID


def test_gen_data_is_byte_identical(tiny_run, tmp_path):
    root, _ = tiny_run
    assert _run("gen-data", tmp_path) == EXIT_OK
    for name in ("stage1.json", "stage2.json", "test.json"):
        assert (tmp_path / "gen-data" / name).read_bytes() == (root / "gen-data" / name).read_bytes()


def test_single_class_world_is_invalid(tmp_path):
    assert _run("gen-data", tmp_path, overrides=TINY + ["data.num_classes=1"]) == EXIT_INVALID


def test_unknown_override_is_invalid(tmp_path):
    assert _run("gen-data", tmp_path, overrides=["stage2.lambda=1"]) == EXIT_INVALID
    assert _run("gen-data", tmp_path, overrides=["stage2"]) == EXIT_INVALID


def test_missing_artifacts(tmp_path):
    assert _run("train-stage1", tmp_path) == EXIT_MISSING
    assert _run("train-stage2", tmp_path) == EXIT_MISSING
    assert _run("eval", tmp_path) == EXIT_MISSING
    assert _run("visualize", tmp_path) == EXIT_MISSING


def test_stage2_without_dictionary(tiny_run, tmp_path):
    root, _ = tiny_run
    over = TINY + [f"paths.data={root / 'gen-data'}"]
    assert _run("train-stage2", tmp_path, overrides=over) == EXIT_MISSING


def test_collapsed_localization_is_numeric_failure(tiny_run, tmp_path):
    root, _ = tiny_run
    # the initial head cannot exceed sigmoid(5) ~ 0.993, so every mask is empty
    over = TINY + [f"paths.data={root / 'gen-data'}", "stage1.mask_threshold=0.999"]
    assert _run("train-stage1", tmp_path, overrides=over) == EXIT_NUMERIC


def test_ablation_flag_reaches_eval(tiny_run, tmp_path):
    root, _ = tiny_run
    over = TINY + [f"paths.data={root / 'gen-data'}", f"paths.stage1={root / 'train-stage1'}",
                   "stage2.enable_product_filter=false"]
    assert _run("train-stage2", tmp_path, overrides=over) == EXIT_OK
    assert _run("eval", tmp_path, overrides=over) == EXIT_OK
    side = next((tmp_path / "eval" / "predictions").glob("*.json"))
    assert json.loads(side.read_text())["key_to_class"]


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"stage2": {"lam": 0.3}, "seed": 4}))
    cfg = C.load_config(path, ["stage2.epochs=3", "paths.data=/x", "model.profile=paper"])
    assert cfg["stage2"]["lam"] == 0.3 and cfg["stage2"]["epochs"] == 3 and cfg["seed"] == 4
    assert cfg["paths"]["data"] == "/x"
    assert C.load_config(path, seed=9)["seed"] == 9
    assert C.stage2_config(cfg).lam == 0.3 and C.backbones(cfg)[0].channels == 512
    path.write_text(json.dumps({"stage9": {}}))
    with pytest.raises(ConfigError):
        C.load_config(path)
    path.write_text("{")
    with pytest.raises(ConfigError):
        C.load_config(path)
    with pytest.raises(ConfigError):
        C.load_config(tmp_path / "none.json")


@pytest.mark.parametrize("lam", [0.3, 0.5, 0.8, 1.0, 1.5])
def test_lambda_sweep_axis(lam):
    cfg = C.load_config(overrides=[f"stage2.lam={lam}"])
    assert C.stage2_config(cfg).lam == lam


def test_saved_config_round_trips(tmp_path):
    cfg = C.load_config(overrides=["stage1.K=6"])
    C.save_config(cfg, tmp_path / "c.json")
    assert C.load_config(tmp_path / "c.json") == cfg
    assert C.stage1_config(cfg).K == 6 and C.metric_config(cfg).tau_fraction == 0.1
