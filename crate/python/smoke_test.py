"""Smoke test for the packtrain Python module.

Build and install first:
    pip install maturin
    maturin develop -m crates/python/Cargo.toml
"""

import packtrain


def check_tensor():
    t = packtrain.Tensor([2, 3], [float(i) for i in range(6)])
    assert t.shape == [2, 3] and len(t) == 6
    assert t.max_abs_diff(packtrain.Tensor.zeros([2, 3])) == 5.0
    assert t.max_abs_diff(packtrain.Tensor.zeros([3])) is None


def check_packed_training():
    models = [
        packtrain.ModelSpec("a", batch_size=10, steps=30, optimizer="adam", learning_rate=0.01),
        packtrain.ModelSpec("b", batch_size=25, steps=12, activation="tanh"),
        packtrain.ModelSpec("c", batch_size=40, steps=5, optimizer="momentum", hidden=[6, 4]),
    ]
    packed = packtrain.train(models, samples=200, packed=True)
    alone = packtrain.train(models, samples=200, packed=False)
    assert packed.keys() == alone.keys() == {"a", "b", "c"}
    worst = max(packed[m][p].max_abs_diff(alone[m][p]) for m in packed for p in packed[m])
    assert worst <= 1e-9, worst


def check_simulator():
    assert "mlp3" in packtrain.builtin_profiles()
    r = packtrain.step_time("mlp3", members=4, batch_size=32)
    assert r["t_pack_ms"] < r["t_seq_ms"] and r["impv"] > 0
    try:
        packtrain.step_time("densenet121", members=4, batch_size=32)
    except MemoryError:
        pass
    else:
        raise AssertionError("expected MemoryError")
    s = packtrain.switching_overhead("mlp3", [1000.0, 1000.0])
    assert abs(s["swoh_ms"] - 11000.0) < 1e-6, s


def check_tuner():
    assert packtrain.bracket_schedule(81, 3)[0] == (4, 81, 1.0)
    assert packtrain.config_distance(0, 0) == 0.0
    assert packtrain.config_distance(3, 500) == packtrain.config_distance(500, 3)
    assert set(packtrain.describe_config(0)) == {"batch_size", "optimizer", "learning_rate", "activation"}
    results = {s: packtrain.tune(s, max_epochs=27, seed=1) for s in ("original", "batchsize", "random", "knn")}
    best = {r.best_config_id for r in results.values()}
    assert len(best) == 1, results
    assert results["knn"].total_ms < results["original"].total_ms


def check_experiment():
    spec = 'mode = "simulate"\ndevice = "mlp3"\nseed = 3\n[simulate]\nsamples = 1000\n' \
           '[[simulate.plans]]\nname = "pair"\nmembers = [{ batch = 32 }, { batch = 32 }]\n'
    csv = packtrain.run_experiment(spec)
    lines = csv.strip().splitlines()
    assert lines[0].startswith("plan,members") and len(lines) == 2, csv
    try:
        packtrain.run_experiment("mode = 'tune'\nbogus = 1\n")
    except ValueError as e:
        assert "bogus" in str(e)
    else:
        raise AssertionError("expected ValueError")


if __name__ == "__main__":
    for check in (check_tensor, check_packed_training, check_simulator, check_tuner, check_experiment):
        check()
        print(f"ok {check.__name__}")
