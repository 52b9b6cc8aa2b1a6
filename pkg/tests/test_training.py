import hashlib
import math

import numpy as np
import pytest

from lmort.errors import ConfigError, DataError, NumericError
from lmort.hidden_states import LayeredStates, TrainExample, write_dump
from lmort.lmort_core import TunerConfig, init_params
from lmort.space_analysis import RepVector
from lmort.training import (
    COSINE,
    DOT,
    OptimizerState,
    TrainConfig,
    adam_step,
    build_state_cache,
    contrastive_loss,
    init_optimizer,
    load_optimizer,
    save_optimizer,
    similarity,
    train_loop,
    train_step,
)


# --- similarity --------------------------------------------------------------


def test_similarity_values():
    u = RepVector(np.array([1.0, 0.0]), normalized=True)
    assert similarity(u, u, COSINE) == pytest.approx(1.0, abs=1e-15)
    v = RepVector(np.array([0.0, 1.0]), normalized=True)
    assert similarity(u, v, DOT) == 0.0
    a = RepVector(np.array([1.0, 2.0]))
    b = RepVector(np.array([3.0, 4.0]))
    assert similarity(a, b, DOT) == pytest.approx(11.0, abs=1e-15)


def test_similarity_errors():
    z = RepVector(np.array([0.0, 0.0]))
    u = RepVector(np.array([1.0, 0.0]))
    with pytest.raises(DataError, match="zero vector"):
        similarity(z, u, COSINE)
    with pytest.raises(DataError, match="dimension"):
        similarity(u, RepVector(np.array([1.0, 0.0, 0.0])), DOT)


def test_cosine_gradients_match_finite_differences():
    from lmort.training import _similarity_and_grads

    rng = np.random.default_rng(0)
    for kind in (DOT, COSINE):
        x = rng.normal(size=6)
        y = rng.normal(size=6)
        _, dx, dy = _similarity_and_grads(x, y, kind)
        h = 1e-7
        for i in range(6):
            for vec, grad in ((x, dx), (y, dy)):
                vec[i] += h
                up = _similarity_and_grads(x, y, kind)[0]
                vec[i] -= 2 * h
                down = _similarity_and_grads(x, y, kind)[0]
                vec[i] += h
                assert grad[i] == pytest.approx((up - down) / (2 * h), abs=1e-6)


# --- contrastive loss --------------------------------------------------------


def test_contrastive_no_negatives_zero():
    loss, g_pos, g_negs = contrastive_loss(0.7, [])
    assert loss == 0.0
    assert g_pos == 0.0 and g_negs == []


def test_contrastive_symmetric_ln2():
    loss, g_pos, g_negs = contrastive_loss(0.3, [0.3])
    assert loss == pytest.approx(math.log(2.0), abs=1e-12)
    assert g_pos == pytest.approx(-0.5, abs=1e-12)
    assert g_negs[0] == pytest.approx(0.5, abs=1e-12)


def test_contrastive_easy_case_value_and_fd():
    # -log(e^10 / (e^10 + 1)), evaluated directly
    loss, g_pos, g_negs = contrastive_loss(10.0, [0.0])
    assert loss == pytest.approx(4.539889921682063e-05, rel=1e-10)
    h = 1e-6
    fd_pos = (contrastive_loss(10.0 + h, [0.0])[0] - contrastive_loss(10.0 - h, [0.0])[0]) / (2 * h)
    fd_neg = (contrastive_loss(10.0, [h])[0] - contrastive_loss(10.0, [-h])[0]) / (2 * h)
    assert g_pos == pytest.approx(fd_pos, abs=1e-9)
    assert g_negs[0] == pytest.approx(fd_neg, abs=1e-9)


def test_contrastive_gradients_sum_to_zero():
    rng = np.random.default_rng(1)
    for _ in range(20):
        sims = rng.normal(size=5)
        _, g_pos, g_negs = contrastive_loss(float(sims[0]), [float(s) for s in sims[1:]])
        assert abs(g_pos + sum(g_negs)) < 1e-12


def test_contrastive_shift_invariance():
    rng = np.random.default_rng(2)
    sims = rng.normal(size=4)
    base = contrastive_loss(float(sims[0]), [float(s) for s in sims[1:]])
    shifted = contrastive_loss(float(sims[0]) + 123.0, [float(s) + 123.0 for s in sims[1:]])
    assert base[0] == pytest.approx(shifted[0], abs=1e-12)
    assert base[1] == pytest.approx(shifted[1], abs=1e-12)
    for g1, g2 in zip(base[2], shifted[2]):
        assert g1 == pytest.approx(g2, abs=1e-12)


def test_contrastive_loss_nonnegative_and_stable():
    loss, _, _ = contrastive_loss(1000.0, [900.0, 800.0])
    assert 0.0 <= loss < 1e-40
    with pytest.raises(NumericError):
        contrastive_loss(float("nan"), [0.0])


def test_contrastive_temperature():
    loss_t, g_pos_t, _ = contrastive_loss(0.5, [0.1], temperature=0.05)
    loss_1, _, _ = contrastive_loss(0.5 / 0.05, [0.1 / 0.05], temperature=1.0)
    assert loss_t == pytest.approx(loss_1, abs=1e-12)
    h = 1e-7
    fd = (contrastive_loss(0.5 + h, [0.1], temperature=0.05)[0]
          - contrastive_loss(0.5 - h, [0.1], temperature=0.05)[0]) / (2 * h)
    assert g_pos_t == pytest.approx(fd, abs=1e-6)


# --- Adam --------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    cfg = TunerConfig(n_blocks=1, d_model=4, n_heads=2, seed=0)
    params = init_params(cfg, 4)
    state = init_optimizer(params)
    grads = params.zeros_like()
    new_params, new_state = adam_step(params, grads, state, TrainConfig(learning_rate=0.1))
    assert new_state.step == 1
    for name, t in params.named():
        assert np.array_equal(t, new_params[name]), name


def test_adam_descends_quadratic():
    # minimize 0.5 * x^2 elementwise; gradient = x
    cfg = TunerConfig(n_blocks=1, d_model=4, n_heads=2, seed=1)
    params = init_params(cfg, 4)
    state = init_optimizer(params)
    tc = TrainConfig(learning_rate=0.05)
    before = sum(float((t * t).sum()) for _, t in params.named())
    for _ in range(30):
        grads = {name: t.copy() for name, t in params.named()}
        params, state = adam_step(params, grads, state, tc)
    after = sum(float((t * t).sum()) for _, t in params.named())
    assert after < before * 0.5


def test_adam_grad_clip():
    cfg = TunerConfig(n_blocks=1, d_model=4, n_heads=2, seed=2)
    params = init_params(cfg, 4)
    tc_clip = TrainConfig(learning_rate=1.0, grad_clip=1e-9)
    grads = {name: np.ones_like(t) for name, t in params.named()}
    new_params, _ = adam_step(params, grads, init_optimizer(params), tc_clip)
    # clipping rescales but Adam renormalizes direction; params still move
    moved = max(float(np.abs(new_params[n] - t).max()) for n, t in params.named())
    assert moved > 0


# --- train_step / train_loop -------------------------------------------------


def synthetic_records(rng, ids, d=8, n=4, layers=(0, 1)):
    records = []
    for seq_id in ids:
        states = {l: rng.normal(size=(n, d)).astype(np.float32) for l in layers}
        records.append(LayeredStates(seq_id, states, np.ones(n, dtype=bool)))
    return records


def tiny_problem(seed=0, n_queries=3, n_passages=6):
    rng = np.random.default_rng(seed)
    ids = [f"q{i}" for i in range(n_queries)] + [f"p{i}" for i in range(n_passages)]
    records = synthetic_records(rng, ids)
    examples = [
        TrainExample(f"q{i}", (f"p{i}",), (f"p{(i + 1) % n_passages}", f"p{(i + 2) % n_passages}"))
        for i in range(n_queries)
    ]
    return records, examples


def test_train_step_zero_loss_keeps_params():
    records, _ = tiny_problem()
    examples = [TrainExample("q0", ("p0",), ())]  # no negatives -> loss exactly 0
    cache = build_state_cache(records, 0, 1, np.float64)
    cfg = TunerConfig(n_blocks=1, d_model=8, n_heads=2, seed=0)
    params = init_params(cfg, 8)
    tc = TrainConfig(learning_rate=0.1, dtype="float64")
    new_params, _, loss = train_step(examples, cache, params, init_optimizer(params), cfg, tc)
    assert loss == 0.0
    for name, t in params.named():
        assert np.array_equal(t, new_params[name]), name


def test_train_step_deterministic_and_cache_untouched():
    records, examples = tiny_problem()
    cache = build_state_cache(records, 0, 1, np.float64)
    before = {k: (v[0].tobytes(), v[1].tobytes()) for k, v in cache.items()}
    cfg = TunerConfig(n_blocks=1, d_model=8, n_heads=2, seed=0)
    params = init_params(cfg, 8)
    tc = TrainConfig(learning_rate=1e-3, dtype="float64")
    out1 = train_step(examples, cache, params, init_optimizer(params), cfg, tc)
    out2 = train_step(examples, cache, params, init_optimizer(params), cfg, tc)
    assert out1[2] == out2[2]
    for name, t in out1[0].named():
        assert np.array_equal(t, out2[0][name]), name
    for k, (a, u) in before.items():
        assert cache[k][0].tobytes() == a and cache[k][1].tobytes() == u


def test_train_step_missing_cached_state():
    records, _ = tiny_problem()
    cache = build_state_cache(records, 0, 1)
    examples = [TrainExample("q0", ("ghost",), ())]
    cfg = TunerConfig(n_blocks=1, d_model=8, n_heads=2, seed=0)
    params = init_params(cfg, 8, np.float32)
    with pytest.raises(DataError, match="no cached states"):
        train_step(examples, cache, params, init_optimizer(params), cfg,
                   TrainConfig(learning_rate=1e-3))


def test_repeated_steps_descend():
    records, examples = tiny_problem(seed=3)
    cache = build_state_cache(records, 0, 1, np.float64)
    cfg = TunerConfig(n_blocks=1, d_model=8, n_heads=2, seed=3)
    params = init_params(cfg, 8)
    state = init_optimizer(params)
    tc = TrainConfig(learning_rate=1e-3, dtype="float64")
    losses = []
    for _ in range(50):
        params, state, loss = train_step(examples, cache, params, state, cfg, tc)
        losses.append(loss)
    upticks = sum(1 for a, b in zip(losses, losses[1:]) if b > a + 1e-12)
    assert upticks <= 5
    assert losses[-1] < losses[0]


def test_in_batch_negatives_increase_loss():
    records, examples = tiny_problem(seed=4)
    cache = build_state_cache(records, 0, 1, np.float64)
    cfg = TunerConfig(n_blocks=1, d_model=8, n_heads=2, seed=4)
    params = init_params(cfg, 8)
    tc_off = TrainConfig(learning_rate=1e-3, dtype="float64")
    tc_on = TrainConfig(learning_rate=1e-3, dtype="float64", use_in_batch_negatives=True)
    _, _, loss_off = train_step(examples, cache, params, init_optimizer(params), cfg, tc_off)
    _, _, loss_on = train_step(examples, cache, params, init_optimizer(params), cfg, tc_on)
    assert loss_on > loss_off  # more denominators, higher softmax loss


def test_train_loop_zero_epochs_returns_init(tmp_path):
    records, examples = tiny_problem()
    cfg = TunerConfig(n_blocks=1, d_model=8, n_heads=2, seed=5)
    tc = TrainConfig(epochs=0, learning_rate=1e-3)
    params, rows = train_loop(examples, records, 0, 1, cfg, tc, checkpoint_dir=tmp_path)
    assert rows == []
    init = init_params(cfg, 8, np.float32)
    for name, t in init.named():
        assert np.array_equal(t, params[name]), name
    assert (tmp_path / "final.lmt").exists()


def test_train_loop_missing_ids():
    records, examples = tiny_problem()
    examples.append(TrainExample("q9", ("p0",), ()))
    cfg = TunerConfig(n_blocks=1, d_model=8, n_heads=2, seed=5)
    with pytest.raises(DataError, match="does not cover"):
        train_loop(examples, records, 0, 1, cfg, TrainConfig(epochs=1, learning_rate=1e-3))


def test_train_loop_writes_log_and_checkpoints(tmp_path):
    records, examples = tiny_problem(seed=6)
    cfg = TunerConfig(n_blocks=1, d_model=8, n_heads=2, seed=6)
    tc = TrainConfig(epochs=2, batch_size=2, learning_rate=1e-3, seed=6)
    _, rows = train_loop(examples, records, 0, 1, cfg, tc, checkpoint_dir=tmp_path)
    assert len(rows) == 2 * 2  # ceil(3/2) batches per epoch * 2 epochs
    log_lines = (tmp_path / "loss_log.csv").read_text().splitlines()
    assert log_lines[0] == "step,loss"
    assert len(log_lines) == len(rows) + 1
    for tag in ("epoch_1", "epoch_2", "final"):
        assert (tmp_path / f"{tag}.lmt").exists()
        assert (tmp_path / f"{tag}.opt").exists()


def test_train_loop_bitwise_rerun(tmp_path):
    records, examples = tiny_problem(seed=7)
    cfg = TunerConfig(n_blocks=1, d_model=8, n_heads=2, seed=7)
    tc = TrainConfig(epochs=2, batch_size=2, learning_rate=1e-3, seed=7)
    p1, r1 = train_loop(examples, records, 0, 1, cfg, tc)
    p2, r2 = train_loop(examples, records, 0, 1, cfg, tc)
    assert r1 == r2
    for name, t in p1.named():
        assert np.array_equal(t, p2[name]), name


def test_resumption_equivalence_float32(tmp_path):
    records, examples = tiny_problem(seed=8)
    cfg = TunerConfig(n_blocks=1, d_model=8, n_heads=2, seed=8)
    tc4 = TrainConfig(epochs=4, batch_size=2, learning_rate=1e-3, seed=8)
    tc2 = TrainConfig(epochs=2, batch_size=2, learning_rate=1e-3, seed=8)

    full_dir = tmp_path / "full"
    full_dir.mkdir()
    p_full, rows_full = train_loop(examples, records, 0, 1, cfg, tc4, checkpoint_dir=full_dir)

    resume_dir = tmp_path / "resume"
    resume_dir.mkdir()
    train_loop(examples, records, 0, 1, cfg, tc2, checkpoint_dir=resume_dir)
    p_res, rows_res = train_loop(examples, records, 0, 1, cfg, tc4,
                                 checkpoint_dir=resume_dir, resume=True)

    assert rows_res == rows_full
    for name, t in p_full.named():
        assert np.array_equal(t, p_res[name]), name
    assert (full_dir / "final.lmt").read_bytes() == (resume_dir / "final.lmt").read_bytes()


def test_training_leaves_dump_file_untouched(tmp_path):
    records, examples = tiny_problem(seed=9)
    dump_path = tmp_path / "states.hsd"
    write_dump(records, dump_path)
    digest_before = hashlib.sha256(dump_path.read_bytes()).hexdigest()
    from lmort.hidden_states import read_dump

    loaded = read_dump(dump_path)
    cfg = TunerConfig(n_blocks=1, d_model=8, n_heads=2, seed=9)
    train_loop(examples, loaded, 0, 1, cfg,
               TrainConfig(epochs=1, batch_size=2, learning_rate=1e-3, seed=9))
    assert hashlib.sha256(dump_path.read_bytes()).hexdigest() == digest_before


def test_cache_is_write_protected():
    records, _ = tiny_problem()
    cache = build_state_cache(records, 0, 1)
    h_a, h_u, mask = cache["q0"]
    for arr in (h_a, h_u, mask):
        with pytest.raises(ValueError):
            arr[0] = 0


def test_optimizer_round_trip(tmp_path):
    cfg = TunerConfig(n_blocks=1, d_model=4, n_heads=2, seed=10)
    params = init_params(cfg, 4, np.float32)
    state = OptimizerState({k: np.full_like(v, 0.25) for k, v in params.tensors.items()},
                           {k: np.full_like(v, 0.5) for k, v in params.tensors.items()}, 7)
    save_optimizer(tmp_path / "s.opt", state)
    back = load_optimizer(tmp_path / "s.opt")
    assert back.step == 7
    for name in state.m:
        assert np.array_equal(back.m[name], state.m[name])
        assert np.array_equal(back.v[name], state.v[name])


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(similarity="manhattan")
    with pytest.raises(ConfigError):
        TrainConfig(dtype="float16")
