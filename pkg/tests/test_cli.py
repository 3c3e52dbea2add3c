import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from stereo_consistency import cli
from stereo_consistency import experiment as ex
from stereo_consistency.io import load_archive
from stereo_consistency.metrics import read_jsonl, read_reports_csv

SMALL = [
    "data.height=32", "data.width=32", "data.train_count=4", "data.test_count=2", "net.max_disp=16",
    "train.steps=3", "train.batch_size=2", "train.log_every=1", "ssw.warmup_steps=2", "ssw.mask_refresh=2",
]


def sets(*extra):
    out = []
    for item in SMALL + list(extra):
        out += ["--set", item]
    return out


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "out"))
    return tmp_path / "out"


def test_default_yaml_matches_defaults():
    assert ex.config_from_dict(yaml.safe_load(ex.DEFAULT_CONFIG_YAML)) == ex.ExperimentConfig()


def test_config_roundtrip_and_hash():
    cfg = ex.with_overrides(ex.ExperimentConfig(), {"seed": 3, "scf.m": 0.9})
    back = ex.config_from_dict(json.loads(json.dumps(ex.config_to_dict(cfg))))
    assert back == cfg
    assert ex.config_hash(back) == ex.config_hash(cfg)
    assert ex.config_hash(ex.with_overrides(cfg, {"output_dir": "elsewhere"})) == ex.config_hash(cfg)
    assert ex.config_hash(ex.with_overrides(cfg, {"seed": 4})) != ex.config_hash(cfg)


def test_load_config_file_and_provenance(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 5\ntrain:\n  steps: 7\n")
    prov = []
    cfg = ex.load_config(path, ["train.steps=9"], prov)
    assert cfg.seed == 5 and cfg.train.steps == 9
    sources = {(p["key"], p["source"]) for p in prov}
    assert ("seed", f"file:{path}") in sources
    assert any(k == "train.steps" and s != f"file:{path}" for k, s in sources)


@pytest.mark.parametrize(
    "name,expect",
    [("C", (True, False, False)), ("C+M", (True, True, False)), ("W", (False, False, True)), ("C+M+W", (True, True, True))],
)
def test_ablation_cells_reachable_by_flags(name, expect):
    args = cli.build_parser().parse_args(["train", "--ablation", name])
    cfg, _ = cli._resolve(args)
    assert (cfg.scf.enabled, cfg.scf.momentum, cfg.ssw.enabled) == expect
    args = cli.build_parser().parse_args(["train", "--no-contrastive", "--no-whitening"])
    cfg, prov = cli._resolve(args)
    assert not cfg.scf.enabled and not cfg.ssw.enabled
    assert {p["source"] for p in prov} == {"flag"}


def test_exit_codes(root, tmp_path, capsys):
    assert cli.main(["train", "--set", "nope.x=1"]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("net: [1, 2\n")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert cli.main(["train", "--set", "net.max_disp=100"]) == 2
    assert cli.main(["train"] + sets()) == 3
    assert cli.main(["eval"] + sets()) == 3
    assert cli.main(["plot", str(tmp_path / "missing.csv")]) == 3


def test_hash_mismatch_refused(root, capsys):
    assert cli.main(["gen-data"] + sets()) == 0
    assert cli.main(["train", "--ablation", "baseline"] + sets()) == 0
    cfg = ex.load_config(None, SMALL + [f"{k}={json.dumps(v)}" for k, v in ex.ablation_overrides("baseline").items()])
    ckpt = cli.run_dir(cfg) / "checkpoint.npz"
    code = cli.main(["eval", "--checkpoint", str(ckpt)] + sets("train.lr=0.5"))
    assert code == 4
    assert "trained with config" in capsys.readouterr().err


def test_pipeline_with_losses_off(root, tmp_path):
    assert cli.main(["gen-data"] + sets()) == 0
    assert cli.main(["train", "--no-contrastive", "--no-whitening"] + sets()) == 0
    cfg = ex.load_config(None, SMALL + ["scf.enabled=false", "ssw.enabled=false"])
    out = cli.run_dir(cfg)
    log = read_jsonl(out / "train_log.jsonl")
    assert len(log) == 3
    assert all(set(r) <= {"step", "lr", "l_disp", "l_total", "probe_cosine"} for r in log)
    _, manifest = load_archive(out / "checkpoint.npz")
    assert manifest["config_hash"] == ex.config_hash(cfg) and manifest["seed"] == 0 and "torch" in manifest["versions"]
    assert cli.main(["eval"] + sets("scf.enabled=false", "ssw.enabled=false")) == 0
    header = (out / "eval_summary.csv").read_text().splitlines()[0]
    assert ex.config_hash(cfg) in header and "seed=0" in header and "KITTI" in header
    rows = read_reports_csv(out / "eval_summary.csv")
    assert [r["style_tag"] for r in rows] == list(cfg.eval.styles)
    assert cli.main(["diagnose"] + sets("scf.enabled=false", "ssw.enabled=false")) == 0
    report = json.loads((out / "diagnose.json").read_text())
    assert set(report["styles"]) == set(cfg.eval.styles)
    arrays, _ = load_archive(out / "diagnose_arrays.npz")
    assert arrays["clean.V0"].shape == (8, 8) and arrays["clean.mask1"].dtype == bool
    assert cli.main(["plot", str(out / "eval_summary.csv"), "--out", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "style_error.csv").exists()


def test_full_method_log_keys(root):
    assert cli.main(["gen-data"] + sets()) == 0
    assert cli.main(["train", "--ablation", "C+M+W"] + sets()) == 0
    cfg = ex.load_config(None, SMALL + [f"{k}={json.dumps(v)}" for k, v in ex.ablation_overrides("C+M+W").items()])
    log = read_jsonl(cli.run_dir(cfg) / "train_log.jsonl")
    assert {"l_scf", "l_ssw", "ssw_skipped", "probe_cosine"} <= set(log[0])
    assert log[0]["ssw_skipped"] and not log[-1]["ssw_skipped"]
    arrays, _ = load_archive(cli.run_dir(cfg) / "checkpoint.npz")
    assert any(k.startswith("key.") for k in arrays) and "ssw.mask0" in arrays


def test_identity_style_matches_train_style_eval():
    cfg = ex.load_config(None, SMALL + ["eval.styles={a: {name: a}, b: {name: b}}"])
    train, test = ex.build_corpora(cfg)
    run = ex.train(cfg, train)
    _, summary = ex.evaluate(run.net, test, cfg)
    assert summary[0].err_gt_3px == summary[1].err_gt_3px


def test_runs_are_byte_identical(tmp_path, monkeypatch):
    outputs = []
    for name in ("a", "b"):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / name))
        assert cli.main(["gen-data"] + sets()) == 0
        assert cli.main(["train", "--ablation", "C+M+W"] + sets()) == 0
        assert cli.main(["eval", "--ablation", "C+M+W"] + sets()) == 0
        run = next((tmp_path / name).glob("run-*"))
        outputs.append({p.name: p.read_bytes() for p in sorted(run.iterdir())})
    assert outputs[0].keys() == outputs[1].keys()
    for k in outputs[0]:
        assert outputs[0][k] == outputs[1][k], k


def test_plot_momentum_table():
    rows = []
    for m in (0.0, 0.9, 0.999, 0.9999):
        for seed in (0, 1):
            for st in ("clean", "shift"):
                rows.append(dict(sample_id="ALL", style_tag=st, variant="C+M", momentum=str(m), seed=str(seed),
                                 mean_cosine=str(0.5 + m / 4 + seed / 100), err_gt_3px="10", per_channel_abs_diff="0.1 0.2"))
    tables = ex.plot_tables(rows)
    assert [r["momentum"] for r in tables["momentum"]] == [0.0, 0.9, 0.999, 0.9999]
    assert tables["momentum"][1]["clean"] == pytest.approx(0.5 + 0.9 / 4 + 0.005)


def test_show_config_and_module_entry():
    res = subprocess.run([sys.executable, "-m", "stereo_consistency", "show-config"], capture_output=True, text=True)
    assert res.returncode == 0
    assert ex.config_from_dict(yaml.safe_load(res.stdout)) == ex.ExperimentConfig()
