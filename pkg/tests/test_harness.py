import json

import numpy as np
import pytest

from mot.checkpoint import load_experts, load_model, load_tensors, save_experts, save_model, save_tensors
from mot.cli import main as cli_main
from mot.harness.config import ExpertSpec, PretrainConfig, RunConfig, dump_config, load_config
from mot.harness.experiments import (ExperimentReport, build_pool, build_tasks, evaluate, run_experiment,
                                     small_variant, specialist_accuracy, specialists)
from mot.harness.tasks import SyntheticTaskSpec
from mot.model import MoTConfig, MoTModel
from mot.training import TrainConfig

from conftest import tiny_experts


def tiny_config(**kw) -> RunConfig:
    base = dict(
        tasks=[SyntheticTaskSpec("copy", n_train=200, n_heldout=20, length=(2, 3)),
               SyntheticTaskSpec("reverse", n_train=200, n_heldout=20, length=(2, 3)),
               SyntheticTaskSpec("modular-arithmetic", n_train=200, n_heldout=20, length=(2, 3), shifts=3)],
        pool=[ExpertSpec("copy", 2, 8, heads=2), ExpertSpec("reverse", 2, 8, heads=2),
              ExpertSpec("modular-arithmetic", 3, 12, heads=2)],
        mot=MoTConfig(Q=2, d_s=8, heads=2, K=2, d_z=8, h_r=6),
        train=TrainConfig(steps=3, batch_size=4, warmup=1, log_every=1),
        pretrain=PretrainConfig(steps=10, eval_every=10),
        eval_max=10,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def tiny_pool():
    cfg = tiny_config()
    tasks = build_tasks(cfg)
    return cfg, tasks, build_pool(cfg, tasks)


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(pool=[ExpertSpec("sorting")])
    with pytest.raises(ValueError):
        tiny_config(mix={"fact-lookup": 1.0})
    with pytest.raises(ValueError):
        tiny_config(mot=MoTConfig(Q=2, d_s=8, heads=2, K=4))
    with pytest.raises(ValueError):
        tiny_config(vocab=16)
    with pytest.raises(ValueError):
        RunConfig(tasks=[SyntheticTaskSpec("fact-lookup")], pool=[ExpertSpec("fact-lookup")])


def test_config_yaml_round_trip(tmp_path):
    cfg = tiny_config(mix={"copy": 0.5, "reverse": 0.25, "modular-arithmetic": 0.25})
    dump_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back.to_dict() == cfg.to_dict()


def test_config_rejects_unknown_keys(tmp_path):
    d = tiny_config().to_dict()
    d["learning_rate"] = 1
    (tmp_path / "c.yaml").write_text(json.dumps(d))
    with pytest.raises(ValueError):
        load_config(tmp_path / "c.yaml")


def test_output_root_follows_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("MOT_OUTPUT_ROOT", str(tmp_path))
    assert tiny_config(output="abc").output_dir == tmp_path / "abc"


def test_tensor_container_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    t = {"router/w1": rng.normal(size=(3, 4)).astype(np.float32), "interaction/layer0/WQ": np.eye(2)}
    save_tensors(tmp_path / "x.safetensors", t, {"note": "hi"})
    back, meta = load_tensors(tmp_path / "x.safetensors")
    assert meta["note"] == "hi"
    assert back["router/w1"].dtype == np.float32 and np.array_equal(back["router/w1"], t["router/w1"])
    assert np.array_equal(back["interaction/layer0/WQ"], np.eye(2, dtype=np.float32))
    raw = (tmp_path / "x.safetensors").read_bytes()
    header = json.loads(raw[8:8 + int.from_bytes(raw[:8], "little")])
    assert header["router/w1"]["dtype"] == "F32" and header["router/w1"]["shape"] == [3, 4]


def test_model_checkpoint_round_trip(tmp_path):
    model = MoTModel(tiny_experts(dtype=np.float32), MoTConfig(Q=2, d_s=8, heads=2, d_z=8, h_r=6))
    for p in model.trainable().values():
        p.data += 0.1
    save_model(tmp_path / "m.safetensors", model)
    back, _ = load_model(tmp_path / "m.safetensors")
    for k, p in model.trainable().items():
        assert np.array_equal(back.trainable()[k].data, p.data)
    assert [e.weight_hash() for e in back.experts] == [e.weight_hash() for e in model.experts]
    names = load_tensors(tmp_path / "m.safetensors")[0]
    assert all(k.split("/")[0] in ("router", "interaction", "expert0", "expert1") for k in names)
    save_experts(tmp_path / "e.safetensors", model.experts)
    experts, _ = load_experts(tmp_path / "e.safetensors")
    assert all(e.frozen for e in experts)


def test_pool_is_cached(tiny_pool):
    cfg, tasks, experts = tiny_pool
    again = build_pool(cfg, tasks)
    assert [e.weight_hash() for e in again] == [e.weight_hash() for e in experts]


def test_specialist_accuracy_matches_pretraining_log(tiny_pool):
    cfg, tasks, experts = tiny_pool
    accs = specialist_accuracy(experts, tasks, cfg, max_per_task=1000)
    logged = [next(r["heldout_acc"] for r in reversed(e.pretrain_log) if "heldout_acc" in r) for e in experts]
    assert accs == pytest.approx(logged)


def test_untrained_router_routes_near_chance(tiny_pool):
    cfg, tasks, experts = tiny_pool
    model = MoTModel(experts, replace_k(cfg.mot, 1))
    res = evaluate(model, tasks, specialists(cfg), 20, K=1)
    assert all(0.0 <= v <= 1.0 for v in res.accuracy.values())
    # a random router sends each query to its specialist with probability about 1/M
    assert abs(res.routing_accuracy - 1 / 3) < 0.34
    assert sum(res.frequencies) == pytest.approx(1.0)


def replace_k(mc, K):
    from dataclasses import replace

    return replace(mc, K=K)


def test_small_variant_shrinks_the_interaction():
    s = small_variant(MoTConfig(Q=8, d_s=64, heads=8, h_r=64))
    assert (s.Q, s.d_s, s.h_r) == (6, 32, 16)


def test_dropout_protocol_rows(tiny_pool, tmp_path):
    cfg, tasks, experts = tiny_pool
    rep = run_experiment(cfg, "dropout", experts, tasks, tmp_path)
    assert [r["label"] for r in rep.rows] == ["full", "without expert 0", "without expert 1", "without expert 2"]
    assert all("error" not in r for r in rep.rows)


def test_loss_ablation_rows_in_cumulative_order(tiny_pool, tmp_path):
    cfg, tasks, experts = tiny_pool
    rep = run_experiment(cfg, "loss-ablation", experts, tasks, tmp_path)
    assert [r["label"] for r in rep.rows] == ["LM", "+ent", "+bal", "+con"]
    ws = [r["weights"] for r in rep.rows]
    assert ws[0] == {"ent": 0, "bal": 0, "con": 0} and all(w["ent"] > 0 for w in ws[1:])
    assert ws[2]["bal"] > 0 and ws[3]["con"] > 0


def test_no_crossattn_trainable_count(tiny_pool, tmp_path):
    cfg, tasks, experts = tiny_pool
    rep = run_experiment(cfg, "no-crossattn", experts, tasks, tmp_path)
    full, nox = (r["params"]["total"] for r in rep.rows)
    assert full - nox == cfg.mot.Q * 4 * cfg.mot.d_s**2


def test_report_round_trip_and_files(tiny_pool, tmp_path):
    cfg, tasks, experts = tiny_pool
    rep = run_experiment(cfg, "vary-Q", experts, tasks, tmp_path)
    text = (tmp_path / "vary-Q.report.jsonl").read_text()
    back = ExperimentReport.from_jsonl(text)
    assert back.to_jsonl() == text
    assert [r["label"] for r in back.rows] == ["Q=1", "Q=2", "Q=4"][: len(back.rows)]
    assert (tmp_path / "vary-Q.summary.txt").read_text().startswith("vary-Q")
    assert (tmp_path / "vary-Q.csv").read_text().splitlines()[0].startswith("label")
    assert rep.experiment == "vary-Q"


def test_failing_sub_run_is_recorded_not_raised(tiny_pool, tmp_path):
    cfg, tasks, experts = tiny_pool
    rep = run_experiment(cfg, "vary-Q", experts, tasks, tmp_path)
    # the 2-layer experts cannot host 4 stacks
    bad = [r for r in rep.rows if r["label"] == "Q=4"]
    assert bad and "error" in bad[0]
    assert all("error" not in r for r in rep.rows if r["label"] != "Q=4")


def test_experiment_is_reproducible(tiny_pool, tmp_path):
    cfg, tasks, experts = tiny_pool
    a = run_experiment(cfg, "main", experts, tasks, tmp_path / "a")
    b = run_experiment(cfg, "main", experts, tasks, tmp_path / "b")
    strip = lambda r: {k: v for k, v in r.items() if not k.endswith("seconds") and k != "log"}  # noqa: E731
    assert [strip(r) for r in a.rows] == [strip(r) for r in b.rows]


def test_unknown_experiment_is_rejected(tiny_pool, tmp_path):
    cfg, tasks, experts = tiny_pool
    with pytest.raises(ValueError):
        run_experiment(cfg, "everything", experts, tasks, tmp_path)


def test_cli_end_to_end(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("MOT_OUTPUT_ROOT", str(tmp_path / "out"))
    path = tmp_path / "tiny.yaml"
    dump_config(tiny_config(output="cli"), path)
    assert cli_main(["params", str(path)]) == 0
    rec = json.loads(capsys.readouterr().out.splitlines()[0])
    assert rec["total"] == rec["instantiated"]["total"]
    assert cli_main(["pretrain-experts", str(path)]) == 0
    assert (tmp_path / "out" / "cli" / "experts.safetensors").exists()
    assert cli_main(["train", str(path)]) == 0
    ckpt = tmp_path / "out" / "cli" / "train" / "main.safetensors"
    assert ckpt.exists() and (tmp_path / "out" / "cli" / "train" / "main.train.jsonl").exists()
    capsys.readouterr()
    assert cli_main(["generate", str(path), "--prompt", "3 9 10 2", "--max-len", "4", "--drop-expert", "2"]) == 0
    out = capsys.readouterr().out.splitlines()
    rec = json.loads(out[-1])
    assert out[0].split() == [str(t) for t in rec["tokens"]] and 2 not in rec["active"]
    assert cli_main(["eval", str(path), "--checkpoint", str(ckpt)]) == 0
    assert cli_main(["ablate", str(path), "--experiment", "small"]) == 0
    assert (tmp_path / "out" / "cli" / "small" / "small.report.jsonl").exists()
