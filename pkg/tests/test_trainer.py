import math

import numpy as np
import pytest
from helpers import make_world

from stamp import kernel as K
from stamp.evaluator import evaluate
from stamp.kernel import Tensor
from stamp.map_head import MapConfig
from stamp.sap import PruneConfig, SapHook
from stamp.trainer import (
    AdamW,
    BatchSampler,
    StepRecord,
    TrainConfig,
    TrainConfigError,
    Trainer,
    TrainingDiverged,
    read_step_log,
    run_training,
    write_step_log,
)


@pytest.fixture(scope="module")
def world():
    return make_world()


def test_config_validation():
    with pytest.raises(TrainConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(TrainConfigError):
        TrainConfig(early_stop_patience=0)
    with pytest.raises(TrainConfigError):
        TrainConfig(weight_decay=-1)


def test_adam_oracle_five_steps():
    p = Tensor(np.array([0.5]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    x, m, v = 0.5, 0.0, 0.0
    b1, b2, eps, lr, wd = 0.9, 0.999, 1e-8, 0.1, 0.01
    for t in range(1, 6):
        opt.zero_grad()
        ((p - 3.0) * (p - 3.0)).sum().backward()
        opt.step()
        g = 2 * (x - 3.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x *= 1 - lr * wd
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert abs(p.data[0] - x) < 1e-12


def test_adam_skips_missing_grad():
    p = Tensor(np.ones(2), requires_grad=True)
    AdamW([p], lr=0.1).step()
    assert (p.data == 1.0).all()


def test_sampler_deterministic_epochs():
    ex = list(range(10))
    a, b = BatchSampler(ex, 4, 7), BatchSampler(ex, 4, 7)
    draws = [a.next() for _ in range(5)]
    assert draws == [b.next() for _ in range(5)]
    # the first epoch is a permutation of all examples
    flat = [x for d in draws for x in d]
    assert sorted(flat[:10]) == ex
    with pytest.raises(TrainConfigError):
        BatchSampler([], 4, 0)


def _run(world, seed=0, steps=10, deterministic=True, prune=None, map_cfg=None, dropout=0.1):
    tr = Trainer(world.model(seed=seed, dropout=dropout), TrainConfig(batch_size=8, max_steps=steps, seed=seed, deterministic=deterministic), prune, map_cfg)
    sampler = BatchSampler(world.split.train, 8, seed)
    return tr, [tr.train_step(world.batch(sampler.next())) for _ in range(steps)]


def test_same_seed_identical_losses(world):
    stamp = (PruneConfig(alpha=1 / 3, l_prune=1, window_W=2), MapConfig(lam=0.3))
    _, a = _run(world, seed=5, prune=stamp[0], map_cfg=stamp[1])
    _, b = _run(world, seed=5, prune=stamp[0], map_cfg=stamp[1])
    assert [(r.l_ntp, r.l_map, r.l_total) for r in a] == [(r.l_ntp, r.l_map, r.l_total) for r in b]


def test_loss_identity_every_step(world):
    _, log = _run(world, seed=1, steps=8, map_cfg=MapConfig(lam=0.3))
    for r in log:
        assert abs(r.l_total - (r.l_ntp + 0.3 * r.l_map)) <= 1e-12
        assert r.l_map > 0
    _, log = _run(world, seed=1, steps=3)
    assert all(r.l_map == 0.0 and r.l_total == r.l_ntp for r in log)


def test_step_records_instrumented(world):
    _, log = _run(world, steps=3)
    assert [r.step for r in log] == [1, 2, 3]
    assert all(r.wall_millis > 0 and r.high_water_bytes > 0 for r in log)


def test_plain_ntp_loss_decreases(world):
    _, log = _run(world, seed=2, steps=200, deterministic=False, dropout=0.0)
    first = np.mean([r.l_ntp for r in log[:20]])
    last = np.mean([r.l_ntp for r in log[-20:]])
    assert last < 0.8 * first


def test_divergence_reports_components(world):
    tr = Trainer(world.model(), TrainConfig(batch_size=4, max_steps=10))
    tr.model.params["lnf.b"].data[0] = np.nan
    with pytest.raises(TrainingDiverged) as exc:
        tr.train_step(world.batch(world.split.train[:4]))
    assert exc.value.step == 1
    assert set(exc.value.components) == {"l_ntp", "l_map", "l_total"}


def _validator(world, hook=None):
    def validate(model, examples):
        return evaluate(model, examples, world.catalog, world.trie, world.window, world.V_c, beam_width=10, prune_hook=hook).recall_at[10]

    return validate


def test_early_stop_after_two_evaluations(world):
    tr = Trainer(world.model(), TrainConfig(batch_size=4, max_steps=100, eval_interval_steps=5, early_stop_patience=1))
    res = run_training(tr, world.split.train, world.split.val, world.batch, lambda m, ex: 0.5)
    assert res.stop_reason == "early_stop"
    assert [s for s, _ in res.evals] == [5, 10]
    assert len(res.log) == 10 and res.best_step == 5


def test_max_steps_reason(world, tmp_path):
    tr = Trainer(world.model(), TrainConfig(batch_size=4, max_steps=3, eval_interval_steps=50))
    calls = []
    res = run_training(tr, world.split.train, world.split.val, world.batch, lambda m, ex: calls.append(len(ex)) or 0.1, tmp_path / "s.csv")
    assert res.stop_reason == "max_steps" and len(res.log) == 3
    assert len(calls) == 1
    back = read_step_log(tmp_path / "s.csv")
    key = lambda r: (r.step, r.l_ntp, r.l_map, r.l_total, r.high_water_bytes)
    assert [key(r) for r in back] == [key(r) for r in res.log]
    assert all(abs(a.wall_millis - b.wall_millis) < 1e-4 for a, b in zip(back, res.log))


def test_empty_validation_rejected(world):
    tr = Trainer(world.model(), TrainConfig(batch_size=4, max_steps=3))
    with pytest.raises(TrainConfigError):
        run_training(tr, world.split.train, [], world.batch, lambda m, ex: 0.0)


def test_eval_users_cap(world):
    tr = Trainer(world.model(), TrainConfig(batch_size=4, max_steps=2, eval_interval_steps=2, eval_users=7))
    seen = []
    run_training(tr, world.split.train, world.split.val, world.batch, lambda m, ex: seen.append(len(ex)) or 0.0)
    assert seen == [7]


def test_checkpoint_reproduces_validation_metric(world, tmp_path):
    prune = PruneConfig(alpha=0.5, l_prune=1, window_W=2)
    tr = Trainer(world.model(seed=3), TrainConfig(batch_size=8, max_steps=40, eval_interval_steps=10, seed=3), prune, MapConfig(lam=0.3))
    validate = _validator(world, SapHook(prune))
    res = run_training(tr, world.split.train, world.split.val, world.batch, validate)
    model = world.model(seed=99, dropout=0.1)
    model.load_state_dict(res.best_state)
    path = tmp_path / "ck.npz"
    model.save(path)
    back, _ = type(model).load(path)
    assert validate(back, world.split.val) == res.best_metric
    assert res.best_metric == max(m for _, m in res.evals)


def test_step_log_roundtrip(tmp_path):
    log = [StepRecord(1, 0.1, 0.2, 0.1 + 0.3 * 0.2, 12.5, 1024), StepRecord(2, 1 / 3, 0.0, 1 / 3, 7.25, 99)]
    p = tmp_path / "s.csv"
    write_step_log(log, p)
    assert p.read_text().splitlines()[0] == "step,l_ntp,l_map,l_total,wall_millis,high_water_bytes"
    assert read_step_log(p) == log


def test_deterministic_flag_scoped(world):
    K.set_deterministic(False)
    _run(world, steps=1, deterministic=True)
    assert not K.is_deterministic()
