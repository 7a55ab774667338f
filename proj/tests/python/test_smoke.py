import math

import pytest

import groklab


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("groklab")
    data = root / "data"
    summary = groklab.generate(
        {"task": "comparison", "n_entities": 30, "n_attributes": 3, "k": 2, "phi": 2.0,
         "mode": "cot", "validation_cap": 400, "test_cap": 60},
        str(data),
    )
    out = groklab.train(str(data), str(root / "run"), model="tiny",
                        train_overrides={"max_steps": 30, "eval_every": 10, "checkpoint_every": 10,
                                         "batch_size": 8, "eval_samples": 30})
    return root, summary, out


def test_generate_summary(run):
    _, summary, _ = run
    assert summary["composed_train"] > 0
    assert summary["train"] == summary["atomics"] + summary["composed_train"]
    assert not summary["capped"]


def test_load_split_matches_counts(run):
    root, summary, _ = run
    test = groklab.load_split(str(root / "data"), "test")
    assert len(test) == summary["test"]
    assert all(ex["split"] == "OOD" for ex in test)


def test_train_log_and_evaluate(run):
    root, _, out = run
    steps = sorted({e["step"] for e in out["evals"]})
    assert steps == [10, 20, 30]
    for e in out["evals"]:
        if e.get("full_acc") is not None:
            assert e["answer_acc"] - e["full_acc"] >= 0.0
    rec = groklab.evaluate(str(root / "data"), str(root / "run" / "ckpt" / "last.ckpt"), "test")
    assert rec["n"] > 0
    assert 0.0 <= rec["answer_acc"] <= 1.0


def test_score_exact_target(run):
    root, summary, _ = run
    gold = groklab.load_split(str(root / "data"), "test")[0]
    eos = summary["eos"]
    flags = groklab.score(gold["trace"] + gold["answer"] + [eos], gold, "cot", eos)
    assert flags["answer_ok"] and flags["trace_ok"] and flags["full_ok"]
    flags = groklab.score(gold["trace"] + gold["answer"], gold, "cot", eos)
    assert not flags["answer_ok"] and not flags["terminated"]


def test_fit_logistic_recovers_parameters():
    steps = [10 ** (2 + 4 * i / 49) for i in range(50)]
    accs = [groklab.logistic(0.9, 6.0, 5000.0, s) for s in steps]
    fit = groklab.fit_logistic(steps, accs)
    assert fit["converged"]
    assert fit["L"] == pytest.approx(0.9, abs=1e-6)
    assert fit["k_fit"] == pytest.approx(6.0, rel=1e-6)
    assert fit["t0"] == pytest.approx(5000.0, rel=1e-6)
    assert groklab.normalized_rate(0.9, 6.0, 5000.0) == pytest.approx(6.0 / (5000 * 0.9 * math.log(10)))


def test_probe_and_patch(run):
    root, _, _ = run
    p = groklab.probe(str(root / "data"), str(root / "run" / "ckpt" / "last.ckpt"), 0, role="entity", slot=0, target="token", split="validation")
    assert p["test_acc"] == 1.0
    g = groklab.patch(str(root / "data"), str(root / "run" / "ckpt" / "last.ckpt"), split="validation", pairs=2)
    assert len(g["effects"]) == len(g["layers"])
    assert len(g["effects"][0]) == len(g["labels"])
    assert g["labels"][-1] == "eos"


def test_sweep_is_idempotent(tmp_path):
    ini = tmp_path / "exp.ini"
    ini.write_text(
        "[experiment]\ntask = comparison\nk = 2\nphi = 1.0\nmode = direct\nmodel = tiny\n"
        f"out = {tmp_path / 'out'}\n"
        "[data]\nentities = 20\nattributes = 3\nvalidation_cap = 40\ntest_cap = 30\n"
        "[train]\nsteps = 10\nbatch = 8\neval_every = 5\ncheckpoint_every = 5\neval_samples = 20\n"
        "[mech]\nenabled = false\n"
    )
    first = groklab.sweep(str(ini))
    assert first["failures"] == 0
    assert first["cells"][0]["ran"] == ["gen", "train", "fit"]
    second = groklab.sweep(str(ini))
    assert second["cells"][0]["ran"] == []
    assert (tmp_path / "out" / "report" / "accuracy_table.csv").exists()


def test_parameter_count():
    cfg = {"n_layers": 2, "hidden_dim": 64, "n_heads": 4, "context_len": 8, "vocab_size": 90,
           "layernorm_eps": 1e-5, "init_scale": 1.0, "tied_head": False}
    d, V, C, L = 64, 90, 8, 2
    assert groklab.parameter_count(cfg) == V * d + C * d + L * (12 * d * d + 13 * d) + 2 * d + d * V + V
