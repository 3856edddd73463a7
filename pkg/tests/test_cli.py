import json
import subprocess
import sys

import numpy as np
import pytest

from cropr import cli
from cropr.checkpoint import load_container, load_model
from cropr.data import NeedleTask
from cropr.schedule import PruningSchedule

TINY = {
    "model": {"image_side": 16, "patch_size": 4, "depth": 3, "width": 16, "heads": 2, "num_classes": 4},
    "schedule": {"kind": "staged", "stages": [{"block": 1, "r": 6}, {"block": 2, "r": 4}]},
    "task": {"name": "needle", "train_size": 48, "test_size": 24, "seed": 5,
             "params": {"num_decoys": 3, "num_distractors": 3}},
    "train": {"epochs": 1, "batch_size": 16, "precision": "float64"},
    "bench": {"batch_sizes": [2], "reps": 1, "router_tokens": 64, "router_reps": 2, "kernel_tokens": 64},
}


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture(scope="module")
def trained(config, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert cli.main(["train", "--config", config, "--out", str(out)]) == 0
    return out


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_schedule_golden_output(capsys, tmp_path):
    code, out = run(capsys, "schedule", "--set",
                    'schedule={"kind":"per_block","r":8,"depth":24,"m0":196,"cls":true}', "--out", tmp_path)
    assert code == 0
    assert "final tokens: 12" in out.out and "TPR 0.9439 (94%)" in out.out
    sched = PruningSchedule.from_json((tmp_path / "schedule.json").read_text())
    assert len(sched.entries) == 23
    code, out = run(capsys, "schedule", "--set",
                    'schedule={"kind":"staged","stages":[{"block":6,"r":50},{"block":12,"r":50},'
                    '{"block":18,"r":50}],"depth":24,"m0":196,"cls":true,"llf":true}')
    assert "final tokens: 46" in out.out and "(77%)" in out.out
    code, out = run(capsys, "schedule", "--set",
                    'schedule={"kind":"keep_targets","blocks":[5,8,11,14,20],'
                    '"keep":[6400,4096,2304,1024,256],"depth":24,"m0":9216,"llf":true}')
    assert "(97%)" in out.out


def test_schedule_empty_and_div8(capsys):
    code, out = run(capsys, "schedule", "--set", 'schedule={"kind":"staged","stages":[]}')
    table = out.out.split("}\n", 1)[1]
    lines = table.splitlines()
    assert code == 0 and lines[0].startswith("no pruning") and lines[1].startswith("total_pruned 0")
    code, out = run(capsys, "schedule", "--set", 'schedule={"kind":"per_block","r":8,"depth":4,"m0":60,"prefer_div8":true}')
    assert "warning:" in out.out


def test_config_errors_exit_2(capsys, config, tmp_path):
    assert run(capsys, "schedule", "--set", "nonsense")[0] == 2
    assert run(capsys, "schedule", "--config", tmp_path / "missing.json")[0] == 2
    code, out = run(capsys, "train", "--config", config, "--set", 'schedule.stages=[{"block":9,"r":2}]',
                    "--out", tmp_path)
    assert code == 2 and "config error" in out.err
    assert not (tmp_path / "metrics.csv").exists()


def test_train_one_epoch_one_row_and_bitwise_rerun(trained, config, tmp_path):
    rows = cli.read_csv(trained / "metrics.csv")
    assert len(rows) == 1
    assert {"main_loss", "aux_loss_b1", "aux_loss_b2", "accuracy", "recall"} <= set(rows[0])
    header = [ln for ln in open(trained / "metrics.csv") if ln.startswith("#")]
    assert any("config_hash" in ln for ln in header) and any(ln.startswith("# version") for ln in header)
    assert cli.main(["train", "--config", config, "--out", str(tmp_path)]) == 0
    assert cli.read_csv(tmp_path / "metrics.csv")[0]["main_loss"] == rows[0]["main_loss"]
    a, _ = load_model(trained / "model.ckpt")
    b, _ = load_model(tmp_path / "model.ckpt")
    assert all(np.array_equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


def test_eval_selector_roundtrip_and_rate_zero(capsys, trained, config, tmp_path):
    ckpt = trained / "model.ckpt"
    code, _ = run(capsys, "eval", "--checkpoint", ckpt, "--selector", "random", "--out", tmp_path)
    row = cli.read_csv(tmp_path / "eval.csv")[0]
    assert code == 0 and row["selector"] == "random"
    assert "# selector random" in open(tmp_path / "eval.csv").read()

    run(capsys, "eval", "--checkpoint", ckpt, "--rate", 0, "--out", tmp_path / "r0")
    r0 = cli.read_csv(tmp_path / "r0" / "eval.csv")[0]
    model, meta = load_model(ckpt)
    unpruned = cli.PrunedViT(model.config, PruningSchedule(3, 16), "classification", "cropr", "none")
    unpruned.vit.load_state_dict(model.vit.state_dict())
    data = cli._dataset(meta["run_config"], model.config, "test")
    ref = cli.evaluate(unpruned, data)
    assert float(r0["accuracy"]) == float(f"{ref['accuracy']:.9g}")
    assert float(r0["tpr"]) == 0.0


def test_eval_parallel_matches_serial(capsys, trained, tmp_path):
    ckpt = trained / "model.ckpt"
    run(capsys, "eval", "--checkpoint", ckpt, "--out", tmp_path / "a")
    run(capsys, "eval", "--checkpoint", ckpt, "--workers", 3, "--out", tmp_path / "b")
    a = cli.read_csv(tmp_path / "a" / "eval.csv")[0]
    b = cli.read_csv(tmp_path / "b" / "eval.csv")[0]
    assert float(a["accuracy"]) == pytest.approx(float(b["accuracy"]), abs=1e-9)


def test_fold_smaller_and_verified(capsys, trained, tmp_path):
    out = tmp_path / "m.folded.ckpt"
    code, res = run(capsys, "fold", "--checkpoint", trained / "model.ckpt", "--output", out, "--verify", 100)
    assert code == 0 and "verify: 100 inputs" in res.out
    assert out.stat().st_size < (trained / "model.ckpt").stat().st_size
    code, _ = run(capsys, "eval", "--checkpoint", out, "--folded", "--out", tmp_path)
    assert code == 0


def test_fold_mha_variant_is_rejected(capsys, config, tmp_path):
    assert cli.main(["train", "--config", config, "--set", 'selector.variant={"scorer":"mha"}',
                     "--out", str(tmp_path)]) == 0
    code, res = run(capsys, "fold", "--checkpoint", tmp_path / "model.ckpt")
    assert code == 2 and "mha" in res.err.lower()


def test_heatmap(capsys, trained, config, tmp_path):
    code, res = run(capsys, "heatmap", "--checkpoint", trained / "model.ckpt", "--out", tmp_path)
    assert code == 0
    hist = {int(k): v for k, v in json.loads(res.out)["stage_histogram"].items()}
    assert hist == {1: 6, 2: 4, 4: 6}
    pgm, maxval = cli.read_pgm(tmp_path / "heatmap.pgm")
    assert pgm.shape == (16, 16) and maxval == 4
    assert set(np.unique(pgm)) <= {1, 2, 3, 4}
    rows = cli.read_csv(tmp_path / "heatmap.csv")
    assert len(rows) == 16 and all(pgm[int(r["row"]) * 4, int(r["col"]) * 4] == int(r["stage"]) for r in rows)

    unpruned = tmp_path / "u"
    cli.main(["train", "--config", config, "--set", 'schedule={"kind":"staged","stages":[]}', "--out", str(unpruned)])
    run(capsys, "heatmap", "--checkpoint", unpruned / "model.ckpt", "--out", unpruned)
    pgm, _ = cli.read_pgm(unpruned / "heatmap.pgm")
    assert np.all(pgm == 4)


def test_export_tokens(capsys, trained, tmp_path):
    code, _ = run(capsys, "export-tokens", "--checkpoint", trained / "model.ckpt", "--num-samples", 3,
                  "--out", tmp_path)
    assert code == 0
    arrays, meta = load_container(tmp_path / "tokens.bin")
    assert arrays["tokens"].shape == (3 * 16, 16) and meta["rows_per_image"] == 16
    run(capsys, "heatmap", "--checkpoint", trained / "model.ckpt", "--out", tmp_path)
    pgm, _ = cli.read_pgm(tmp_path / "heatmap.pgm")
    np.testing.assert_array_equal(arrays["stage"][:16], pgm[::4, ::4].ravel())
    assert arrays["labels"].shape == (3,)


def test_gen_data_round_trip(capsys, config, tmp_path):
    code, res = run(capsys, "gen-data", "--config", config, "--num-samples", 4, "--out", tmp_path)
    arrays, meta = load_container(res.out.strip())
    task = NeedleTask(num_decoys=3, num_distractors=3, image_side=16, patch=4)
    ref = task.dataset(4, [5, 1])
    assert meta["split"] == "test"
    for k in ref:
        assert np.array_equal(arrays[k], ref[k])


def test_bench_writes_csv(capsys, config, tmp_path):
    code, res = run(capsys, "bench", "--config", config, "--skip-kernels", "--out", tmp_path)
    assert code == 0
    text = (tmp_path / "bench.csv").read_text()
    assert "analytic_flops" in text and "multiply-add = 2 FLOPs" in text
    rows = cli.read_csv(tmp_path / "bench.csv")
    assert any(r["config"].endswith("/best") for r in rows) and rows[0]["config"].startswith("router/")


def test_ablate_subset(capsys, config, tmp_path):
    code, res = run(capsys, "ablate", "--config", config, "--only", "baseline", "mlp_off", "--out", tmp_path)
    rows = cli.read_csv(tmp_path / "ablation.csv")
    assert code == 0 and [r["variant"] for r in rows] == ["baseline", "mlp_off"]


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "cropr.cli", "schedule"], capture_output=True, text=True,
                         cwd=tmp_path)
    assert out.returncode == 0 and "TPR" in out.stdout
