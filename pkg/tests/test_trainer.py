from dataclasses import replace

import numpy as np
import pytest
from sklearn.metrics import homogeneity_score

from rosgas import trainer
from rosgas.rl import AgentConfig
from rosgas.synthgen import SynthConfig, generate
from rosgas.trainer import (Environment, FixedPolicy, InfeasibleRun, MetricsLog, TrainConfig, accuracy,
                            embedding_quality, evaluate, final_retrain, homogeneity, layer_probe, run,
                            run_training)

SMALL = TrainConfig(gnn_batch=4, episodes=2, gnn_epochs=3, flush_epochs=1, probe_size=8)


@pytest.fixture(scope="module")
def small_graph():
    return generate(SynthConfig(n_users=400, labeled_fraction=0.1, seed=3))[0]


def test_baseline_never_builds_agents(small_graph):
    res = run(small_graph, replace(SMALL, variant="BASELINE"))
    assert res.agents == (None, None) and res.search_stack is None
    assert {r["phase"] for r in res.log.records} == {"retrain"}
    assert set(res.summary()["policy_choices"]) == {"k2_l3"}


def test_one_step_one_transition(small_graph):
    cfg = replace(SMALL, episodes=1, steps_per_episode=1)
    env = Environment(small_graph, cfg)
    _, (width, depth), log = run_training(env, cfg, AgentConfig())
    assert len(width.replay) == 1 and len(depth.replay) == 1
    assert len(log.search_steps()) == 1


def test_replay_sizes_and_log_columns(small_graph):
    env = Environment(small_graph, SMALL)
    _, (width, depth), log = run_training(env, SMALL, AgentConfig())
    T = trainer.steps_per_episode(env, SMALL)
    assert len(width.replay) == len(depth.replay) == SMALL.episodes * T
    for r in log.search_steps():
        assert r["reward"] in (-1, 1)
        assert 0.0 <= r["val_acc"] <= 1.0
        assert 1 <= r["k"] <= SMALL.k_max and 1 <= r["l"] <= SMALL.l_max


def test_variant_gating(small_graph):
    for variant, (has_w, has_d) in {"K": (True, False), "L": (False, True), "KL": (True, True)}.items():
        env = Environment(small_graph, replace(SMALL, variant=variant))
        _, (w, d), log = run_training(env, replace(SMALL, variant=variant), AgentConfig())
        assert (w is not None, d is not None) == (has_w, has_d)
        if not has_w:
            assert {r["k"] for r in log.search_steps()} == {SMALL.fixed_k}
        if w is not None:
            assert len(w.nn_memory) == 0
    env = Environment(small_graph, replace(SMALL, variant="KL-NN"))
    _, (w, d), _ = run_training(env, replace(SMALL, variant="KL-NN"), AgentConfig())
    assert len(w.nn_memory) > 0


def test_every_buffered_item_trained_once(small_graph, monkeypatch):
    seen = []
    real = trainer.train_batch

    def spy(stack, env, items, cfg, pairs=None):
        seen.append(list(items))
        return real(stack, env, items, cfg, pairs)

    monkeypatch.setattr(trainer, "train_batch", spy)
    cfg = replace(SMALL, flush_epochs=1)
    env = Environment(small_graph, cfg)
    _, _, log = run_training(env, cfg, AgentConfig())
    steps = [(env.g.node_ids.tolist().index(r["target"]), r["k"], r["l"]) for r in log.search_steps()]
    flushed = [it for batch in seen for it in batch]
    assert sorted(flushed) == sorted(steps)
    assert all(len({l for _, _, l in b}) == 1 for b in seen)
    assert all(len(b) == cfg.gnn_batch for b in seen[:-3]) or len(seen) <= 3


def test_same_seed_same_log(small_graph):
    a = run(small_graph, SMALL).log.to_jsonl()
    b = run(small_graph, SMALL).log.to_jsonl()
    assert a == b
    c = run(small_graph, replace(SMALL, seed=1)).log.to_jsonl()
    assert a != c


def test_constant_policy_retrain_equals_baseline(small_graph):
    env = Environment(small_graph, SMALL)
    a = final_retrain(env, replace(SMALL, variant="KL"), FixedPolicy(2, 3))
    b = run(small_graph, replace(SMALL, variant="BASELINE")).stack
    for k, v in a.state_dict().items():
        np.testing.assert_array_equal(v, b.params[k].value)


def test_infeasible_configs(small_graph):
    with pytest.raises(InfeasibleRun):
        run(small_graph, replace(SMALL, k_max=1, fixed_k=1))
    with pytest.raises(InfeasibleRun):
        run(small_graph, replace(SMALL, gnn_batch=1000))
    with pytest.raises(ValueError):
        TrainConfig(variant="XL").validate()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"episode": 3})


# ---------------------------------------------------------------------------
# evaluation


def test_accuracy_examples():
    assert accuracy([1, 0, 1], [1, 0, 1]) == 1.0
    # TP, TN, FP, FN once each
    assert accuracy([1, 0, 1, 0], [1, 0, 0, 1]) == 0.5
    with pytest.raises(ValueError):
        accuracy([], [])


def test_accuracy_matches_counter(rng):
    for _ in range(200):
        n = int(rng.integers(1, 50))
        p, y = rng.integers(0, 2, n), rng.integers(0, 2, n)
        correct = 0
        for a, b in zip(p.tolist(), y.tolist()):
            correct += a == b
        assert accuracy(p, y) == correct / n


def test_evaluate_rejects_empty_mask(small_graph):
    env = Environment(small_graph, SMALL)
    res = run(small_graph, replace(SMALL, variant="BASELINE"))
    with pytest.raises(ValueError):
        evaluate(env, res.stack, res.policy, [])


def test_layer_probe_single_run(small_graph):
    env = Environment(small_graph, SMALL)
    targets = env.g.val[:4]
    rows = layer_probe(env, SMALL, targets, 1, lambda t: 1, lambda t: 2, epochs=2)
    assert len(rows) == 4
    for r in rows:
        ratios = [r["ratio_l1"], r["ratio_l2"], r["ratio_l3"]]
        assert set(ratios) <= {0.0, 1.0}
        best = {i + 1 for i, v in enumerate(ratios) if v == max(ratios)}
        assert r["match"] == (r["agent_choice"] in best)
        assert r["agent_choice"] == 2
    assert rows[0]["target_id"] == int(env.g.node_ids[sorted(targets)[0]])


def test_layer_probe_all_ties_match(small_graph, monkeypatch):
    env = Environment(small_graph, SMALL)
    targets = env.g.val[:3]
    truth = env.g.labels[sorted(targets)]
    monkeypatch.setattr(trainer, "predict_targets", lambda *a, **k: (truth, None))
    rows = layer_probe(env, SMALL, targets, 2, lambda t: 1, lambda t: 3, epochs=1)
    assert all((r["ratio_l1"], r["ratio_l2"], r["ratio_l3"]) == (1.0, 1.0, 1.0) for r in rows)
    assert all(r["match"] for r in rows)


# ---------------------------------------------------------------------------
# embeddings


def test_homogeneity_examples():
    assert homogeneity([0, 0, 1, 1], [5, 5, 7, 7]) == 1.0
    assert homogeneity([0, 1, 0, 1], [0, 0, 1, 1]) == pytest.approx(0.0, abs=1e-12)
    assert homogeneity([1, 1, 1], [0, 1, 0]) == 1.0


def test_homogeneity_matches_sklearn(rng):
    for _ in range(200):
        n = int(rng.integers(2, 60))
        y, c = rng.integers(0, 2, n), rng.integers(0, int(rng.integers(1, 5)), n)
        assert homogeneity(y, c) == pytest.approx(homogeneity_score(y, c), abs=1e-10)


def test_embedding_quality_four_points():
    emb = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]])
    assert embedding_quality(emb, [0, 0, 1, 1]) == 1.0
    assert embedding_quality(emb, [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-12)
    assert embedding_quality(emb, [1, 1, 1, 1]) == 1.0
    with pytest.raises(ValueError):
        embedding_quality(emb[:1], [0])


def test_metrics_jsonl_is_sorted_json():
    log = MetricsLog()
    log.append(phase="search", episode=0, val_acc=0.5, b=1, a=2)
    assert log.to_jsonl() == '{"a": 2, "b": 1, "episode": 0, "phase": "search", "val_acc": 0.5}\n'
