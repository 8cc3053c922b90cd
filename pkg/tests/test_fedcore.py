import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codedfd import nn
from codedfd.codegen import CodeStrategy
from codedfd.data import PartitionSpec, partition, synthesize
from codedfd.dropout import maskable_layers
from codedfd.errors import EmptyCohort, ModeMismatch
from codedfd.fedcore import (
    BYTES_PER_PARAM,
    METRICS_HEADER,
    FederatedSession,
    MaskSchedule,
    Mode,
    RoundConfig,
    ServerOptimizerState,
    favg_step,
    favg_weights,
    fedadam_step,
    run_round,
    select_clients,
)
from oracles import adam_scalar_oracle, reference_favg


def small_world(total=6, per_class=12, seed=0):
    ds = synthesize(3, per_class, (1, 4, 4), 1.0, 0.2, seed)
    return partition(ds, PartitionSpec("iid", total, seed=seed))


# ---- sampling and weights ---------------------------------------------------

def test_select_clients_distinct_and_deterministic():
    cfg = RoundConfig(5, 20, 0.5, "random_distinct", seed=3)
    a = select_clients(4, cfg)
    assert len(set(a.tolist())) == 5 and a.max() < 20
    assert np.array_equal(a, select_clients(4, cfg))
    assert not np.array_equal(a, select_clients(5, cfg))
    full = RoundConfig(7, 7, 0.0, "random_same")
    assert sorted(select_clients(0, full).tolist()) == list(range(7))


def test_favg_weights():
    assert favg_weights([10, 10, 10, 10]).tolist() == [0.25] * 4
    assert favg_weights([1, 3]).tolist() == [0.25, 0.75]
    with pytest.raises(EmptyCohort):
        favg_weights([])
    with pytest.raises(EmptyCohort):
        favg_weights([3, 0])


def test_round_config_validation():
    with pytest.raises(ValueError):
        RoundConfig(5, 4)
    with pytest.raises(ValueError):
        RoundConfig(2, 4, alpha=1.0)
    assert RoundConfig(2, 4, alpha=0.0).label == "no_dropout"
    assert RoundConfig(2, 4, alpha=0.5, strategy="cwc").label == "cwc"


# ---- server optimizers ------------------------------------------------------

def test_favg_step_and_mode_checks():
    s = ServerOptimizerState(Mode.FAVG, eta=0.5)
    out = favg_step(s, [np.array([1.0, 2.0])], [np.array([2.0, -2.0])])
    assert out[0].tolist() == [2.0, 1.0]
    with pytest.raises(ModeMismatch):
        fedadam_step(s, [np.zeros(1)], [np.zeros(1)])
    with pytest.raises(ModeMismatch):
        favg_step(ServerOptimizerState(Mode.FEDADAM), [np.zeros(1)], [np.zeros(1)])


def test_fedadam_two_steps_hand_computed():
    # step 1: m = 0.1 * 0.5 = 0.05, v = 0.01 * 0.0025 = 2.5e-5, w = 1 + 0.1 * 0.05 / (0.005 + 0.001)
    s = ServerOptimizerState(Mode.FEDADAM, eta=0.1)
    w1, s = fedadam_step(s, [np.array([1.0])], [np.array([0.5])])
    assert w1[0][0] == pytest.approx(1.0 + 0.1 * 0.05 / (math.sqrt(2.5e-5) + 0.001), abs=1e-15)
    w2, s = fedadam_step(s, w1, [np.array([-0.2])])
    m2 = 0.9 * 0.05 + 0.1 * -0.2
    v2 = 0.99 * 2.5e-5 + 0.01 * m2 * m2
    assert s.momentum[0][0] == pytest.approx(m2, abs=1e-15)
    assert w2[0][0] == pytest.approx(w1[0][0] + 0.1 * m2 / (math.sqrt(v2) + 0.001), abs=1e-15)


@settings(max_examples=50)
@given(st.floats(-3, 3), st.lists(st.floats(-1, 1), min_size=1, max_size=6), st.floats(1e-3, 1.0))
def test_fedadam_matches_scalar_oracle(w0, deltas, eta):
    s = ServerOptimizerState(Mode.FEDADAM, eta=eta)
    w = [np.array([w0, -w0])]
    want = adam_scalar_oracle(w0, deltas, eta)
    for d, expect in zip(deltas, want):
        w, s = fedadam_step(s, w, [np.array([d, -d])])
        assert w[0][0] == pytest.approx(expect, rel=1e-12, abs=1e-12)
        assert w[0][1] == pytest.approx(-expect, rel=1e-12, abs=1e-12)


def test_fedadam_moments_update_on_untouched_coordinates():
    s = ServerOptimizerState(Mode.FEDADAM, eta=1.0)
    w, s = fedadam_step(s, [np.zeros(2)], [np.array([1.0, 0.0])])
    w, s = fedadam_step(s, w, [np.array([0.0, 0.0])])
    # the first coordinate keeps moving on its momentum although its delta is 0
    assert s.momentum[0][0] == pytest.approx(0.09)
    assert w[0][0] > 0 and w[0][1] == 0


# ---- rounds -----------------------------------------------------------------

def test_alpha_zero_matches_mask_free_reference():
    clients = small_world()
    spec = nn.desk_model(4, 3, (2, 4), 6)
    cfg = RoundConfig(4, 6, 0.0, "random_same", 1, 0.05, 5, seed=2)
    sess = FederatedSession(spec, clients, cfg, ServerOptimizerState(Mode.FAVG, 1.0), dtype=np.float64, eval_every=0)
    sess.run(3)
    ref = reference_favg(spec, spec.init(2, np.float64), clients, cfg, 3)
    assert max(float(np.abs(a - b).max()) for a, b in zip(sess.params, ref)) < 1e-12


def test_round_metrics_and_bandwidth_accounting():
    clients = small_world()
    spec = nn.dense_chain_model(16, (8, 8), 3)
    flat = [type(c)(c.x.reshape(len(c), -1), c.y, client_id=c.client_id) for c in clients]
    cfg = RoundConfig(3, 6, 0.5, "random_distinct", seed=1)
    masks = MaskSchedule(spec, cfg).matrices(0)
    _, _, m = run_round(0, spec, spec.init(0), ServerOptimizerState(), cfg, masks, flat, cumulative_bytes=100)
    sizes = [s for s in spec.param_shapes()]
    # per client: W0 16x8 and b0 8 whole (first layer never masked); W1 keeps 4 of 8 columns; b1 4; W2 4x3; b2 3
    per_client = 16 * 8 + 8 + 8 * 4 + 4 + 4 * 3 + 3
    assert sizes[0] == (16, 8)
    assert m.kept_by_param == [3 * n for n in (128, 8, 32, 4, 12, 3)]
    assert m.bytes_down == m.bytes_up == BYTES_PER_PARAM * 3 * per_client
    assert m.cumulative_bytes == 100 + 2 * m.bytes_down
    assert len(m.client_accuracies) == 3
    assert m.csv_row()[2] == "random_distinct"
    assert len(m.csv_row()) == len(METRICS_HEADER)


def test_random_same_clients_hold_identical_coordinates():
    spec = nn.dense_chain_model(4, (6, 6), 2)
    cfg = RoundConfig(4, 8, 0.5, "random_same", seed=5)
    masks = MaskSchedule(spec, cfg).matrices(3)
    for mm in masks:
        assert (mm.rows == mm.rows[0]).all()


def test_coded_schedule_reshuffles_a_fixed_base():
    spec = nn.desk_model(8, 3, (2, 32), 32)
    cfg = RoundConfig(4, 8, 0.5, "gold", seed=0)
    sched = MaskSchedule(spec, cfg)
    m0, m1 = sched.matrices(0), sched.matrices(1)
    assert not np.array_equal(m0[0].rows, m1[0].rows)
    for a, b in zip(m0, m1):
        assert sorted(map(tuple, a.rows)) != [] and a.rows.shape == b.rows.shape
        assert set(a.rows.sum(axis=1).tolist()) == {a.layer_width // 2}


def test_session_determinism():
    clients = small_world(seed=1)
    spec = nn.desk_model(4, 3, (2, 4), 8)

    def run():
        cfg = RoundConfig(3, 6, 0.5, "cwc", seed=4)
        s = FederatedSession(spec, clients, cfg, ServerOptimizerState(Mode.FEDADAM, 0.01),
                             test_set=(clients[0].x, clients[0].y), eval_every=2)
        s.run(4)
        return [m.csv_row() for m in s.history], s.params

    rows_a, pa = run()
    rows_b, pb = run()
    assert rows_a == rows_b
    assert all(np.array_equal(a, b) for a, b in zip(pa, pb))
    assert rows_a[1][5] != "" and rows_a[0][5] == ""


def test_session_requires_all_client_datasets():
    clients = small_world()
    with pytest.raises(ValueError):
        FederatedSession(nn.dense_chain_model(16, (4,), 3), clients[:-1], RoundConfig(2, 6, 0.0))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.sampled_from(list(CodeStrategy)))
def test_merge_never_moves_unheld_coordinates(seed, strategy):
    clients = small_world(seed=seed % 5)
    spec = nn.desk_model(4, 3, (2, 32), 32)
    cfg = RoundConfig(2, 6, 0.5, strategy, seed=seed)
    params = spec.init(seed, np.float64)
    masks = MaskSchedule(spec, cfg).matrices(0)
    new, _, _ = run_round(0, spec, params, ServerOptimizerState(), cfg, masks, clients)
    held_units = np.logical_or.reduce([mm.rows[:2].astype(bool) for mm in masks[-1:]][0], axis=0)
    dense_idx = maskable_layers(spec)[-1]
    bias_pos = 2 * spec.trainable_layers().index(dense_idx) + 1
    assert np.array_equal(new[bias_pos][~held_units], params[bias_pos][~held_units])
