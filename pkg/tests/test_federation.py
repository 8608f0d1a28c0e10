import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualfed import tensor as T
from dualfed.config import TrainConfig
from dualfed.errors import ConfigError, ParseError, ProtocolError
from dualfed.experiments import local_config, prepare_run, run_single
from dualfed.federation import (CLIENT_TO_SERVER, MSG_HEADER_SIZE, SERVER_TO_CLIENT, CommCostModel,
                                LocalTrainConfig, Message, ServerState, SGD, audit_transcript,
                                aggregate, broadcast, client_local_train, comm_cost_report,
                                logits_share_sweep, read_transcript, register_clients, run_rounds,
                                server_init, write_transcript)
from dualfed.losses import LossConfig, cross_entropy
from dualfed.model import AdapterParams, adapter_forward, adapter_nbytes, head_forward, serialize_adapters
from dualfed.tensor import Tensor

SMALL = {"rounds": 2, "local_epochs": 1, "batch_size": 16, "target": 0,
         "dataset.n_per_class": 20, "dataset.n_domains": 3, "dataset.n_classes": 3, "dataset.d_in": 6,
         "model.d_h": 8, "model.rank": 2, "model.heads": 2}


def small_cfg(**kw):
    return TrainConfig().updated(**{**SMALL, **kw})


def rand_adapter(seed, d=6, r=2):
    g = np.random.default_rng(seed)
    a = AdapterParams.init(d, r, g)
    for p in a.parameters():
        p.data = g.normal(size=p.shape)
    return a


def server_with(n_k):
    s = ServerState(None, (0,), len(n_k))
    s.n_k = dict(enumerate(n_k))
    tot = sum(n_k)
    s.weights = {k: n / tot for k, n in s.n_k.items()}
    return s


def weighted_mean_oracle(adapters, n_k):
    tot = sum(n_k)
    out = []
    for i in range(4):
        ps = [a.parameters()[i].data for a in adapters]
        flat = np.zeros(ps[0].size)
        for j in range(flat.size):
            flat[j] = sum(n / tot * p.reshape(-1)[j] for p, n in zip(ps, n_k))
        out.append(flat.reshape(ps[0].shape))
    return out


# ---------------------------------------------------------------- server weights


def test_server_init_rejects_zero_clients():
    with pytest.raises(ConfigError):
        server_init(0, None)


def test_registration_weights():
    st_ = prepare_run(small_cfg(clients=4, **{"dataset.n_domains": 5}), 0, 0)
    assert st_.server.weights == {}
    w = register_clients(st_.server, st_.clients)
    assert st_.server.total_samples == sum(c.n_k for c in st_.clients)
    assert abs(sum(w.values()) - 1) <= 1e-12
    ns = [c.n_k for c in st_.clients]
    assert len(set(ns)) == 1 and all(v == 0.25 for v in w.values())
    assert sum(m.kind == "register_n_k" for m in st_.server.transcript) == 4


def test_weights_one_three():
    s = server_with([1, 3])
    assert s.weights == {0: 0.25, 1: 0.75}


# ---------------------------------------------------------------- broadcast


def test_broadcast_copies_and_isolates():
    st_ = prepare_run(small_cfg(), 0, 0)
    register_clients(st_.server, st_.clients)
    g = st_.server.a_di_global
    g[1].w_down.data = g[1].w_down.data + 1.0
    n0 = len(st_.server.transcript)
    broadcast(st_.server, st_.clients)
    new = st_.server.transcript[n0:]
    assert len(new) == len(st_.clients) and all(m.kind == "broadcast_A_di" for m in new)
    assert all(m.byte_length == MSG_HEADER_SIZE + adapter_nbytes(8, 2) for m in new)
    for c in st_.clients:
        assert c.model.a_di[1].flat().tobytes() == g[1].flat().tobytes()
    before = g[1].flat().copy()
    st_.clients[0].model.a_di[1].w_up.data[:] = 7.0
    assert g[1].flat().tobytes() == before.tobytes()
    assert st_.clients[1].model.a_di[1].flat().tobytes() == before.tobytes()


# ---------------------------------------------------------------- aggregation


def test_aggregate_scalar_example():
    s = server_with([1, 3])
    a = [AdapterParams(*(Tensor(np.full(sh, v)) for sh in [(2, 1), (1,), (1, 2), (2,)])) for v in (0.0, 4.0)]
    out = aggregate(s, [(0, {0: a[0]}), (1, {0: a[1]})])
    assert all(np.array_equal(p.data, np.full(p.shape, 3.0)) for p in out[0].parameters())
    assert s.round == 1


def test_aggregate_matches_oracle_k5():
    g = np.random.default_rng(11)
    n_k = [int(v) for v in g.integers(1, 500, 5)]
    s = server_with(n_k)
    ads = [rand_adapter(i) for i in range(5)]
    out = aggregate(s, [(i, {0: a}) for i, a in enumerate(ads)])
    for got, ref in zip(out[0].parameters(), weighted_mean_oracle(ads, n_k)):
        assert np.max(np.abs(got.data - ref)) <= 1e-12
    assert abs(sum(s.weights.values()) - 1) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 10_000), min_size=1, max_size=6), st.integers(0, 1000), st.randoms())
def test_aggregate_permutation_invariant_and_fixed_point(n_k, seed, rnd):
    ads = [rand_adapter(seed + i) for i in range(len(n_k))]
    ups = [(i, {0: a}) for i, a in enumerate(ads)]
    ref = aggregate(server_with(n_k), ups)[0].flat()
    shuffled = ups[:]
    rnd.shuffle(shuffled)
    assert aggregate(server_with(n_k), shuffled)[0].flat().tobytes() == ref.tobytes()
    same = [(i, {0: ads[0]}) for i in range(len(n_k))]
    assert aggregate(server_with(n_k), same)[0].flat().tobytes() == ads[0].flat().tobytes()


def test_aggregate_missing_and_extra_upload():
    s = server_with([2, 2, 2])
    a = rand_adapter(0)
    with pytest.raises(ProtocolError, match="client 1"):
        aggregate(s, [(0, {0: a}), (2, {0: a})])
    with pytest.raises(ProtocolError):
        aggregate(s, [(i, {0: a}) for i in range(4)])


def test_aggregate_partial_participation_renormalizes():
    s = server_with([1, 2, 5])
    a, b = rand_adapter(0), rand_adapter(1)
    out = aggregate(s, [(0, {0: a}), (2, {0: b})], participants=[0, 2])
    ref = weighted_mean_oracle([a, b], [1, 5])
    assert np.allclose(out[0].w_down.data, ref[0], atol=1e-12)


# ---------------------------------------------------------------- local training


def _trained_copy(cfg, epochs, lr):
    st_ = prepare_run(cfg, 0, 0)
    register_clients(st_.server, st_.clients)
    broadcast(st_.server, st_.clients, 0)
    c = st_.clients[0]
    before = [p.data.copy() for p in c.model.trainable_parameters()]
    client_local_train(c, epochs, LossConfig(), lr, 16)
    return before, [p.data for p in c.model.trainable_parameters()]


@pytest.mark.parametrize("epochs,lr", [(0, 0.1), (2, 0.0)])
def test_local_train_noop(epochs, lr):
    before, after = _trained_copy(small_cfg(), epochs, lr)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(before, after))


def test_single_sample_step_matches_finite_differences():
    st_ = prepare_run(small_cfg(**{"toggles.mhsa": False}), 0, 0)
    register_clients(st_.server, st_.clients)
    broadcast(st_.server, st_.clients, 0)
    c = st_.clients[0]
    c.data.x, c.data.y = c.data.x[:1], c.data.y[:1]
    c.trunk = c.trunk[:1]
    g = np.random.default_rng(3)
    for p in c.model.trainable_parameters():
        p.data = p.data + g.normal(0, 0.3, size=p.shape)
    c.private_opt = SGD(c.model.private_parameters())
    c.shared_opt = SGD(c.model.shared_parameters())
    params = c.model.trainable_parameters()
    before = [p.data.copy() for p in params]
    trunk = Tensor(c.trunk)
    cfg = LossConfig(alpha=0.0)

    def objective():
        _, zdi = c.model.forward_from_trunk(trunk, use_dw=False)
        _, zdw = c.model.forward_from_trunk(trunk, use_di=False)
        return (cross_entropy(zdi, c.data.y) + cross_entropy(zdw, c.data.y)) * 0.5

    rep = T.grad_check(objective, params)
    assert rep.passed
    # numeric gradient by central differences, then compare the SGD delta
    numeric = []
    for p in params:
        base = p.data.copy()
        gnum = np.zeros(p.shape)
        for idx in np.ndindex(*p.shape):
            p.data = base.copy()
            p.data[idx] += 1e-6
            fp = objective().item()
            p.data = base.copy()
            p.data[idx] -= 1e-6
            fm = objective().item()
            gnum[idx] = (fp - fm) / 2e-6
        p.data = base
        numeric.append(gnum)
    lr = 0.1
    client_local_train(c, 1, cfg, lr, 16)
    for b, p, gn in zip(before, params, numeric):
        assert np.allclose(p.data - b, -lr * gn, atol=1e-8)


def test_empty_client_rejected():
    st_ = prepare_run(small_cfg(), 0, 0)
    c = st_.clients[0]
    c.data.x, c.data.y = c.data.x[:0], c.data.y[:0]
    with pytest.raises(ConfigError):
        client_local_train(c, 1, LossConfig(), 0.1)


def test_lr_step_schedule():
    cfg = LocalTrainConfig(lr=0.001, step_fraction=0.2, gamma=0.1)
    assert [cfg.lr_at(r, 10) for r in (0, 1, 2, 3, 4)] == [0.001, 0.001, 0.001 * 0.1, 0.001 * 0.1, 0.001 * 0.1 ** 2]
    assert LocalTrainConfig(schedule="constant", lr=0.3).lr_at(99, 100) == 0.3


# ---------------------------------------------------------------- run loop


def test_one_round_zero_epochs_fixed_point():
    cfg = small_cfg(rounds=1, local_epochs=0)
    st_ = prepare_run(cfg, 0, 0)
    init = {k: a.flat().copy() for k, a in st_.server.a_di_global.items()}
    art = run_rounds(st_.server, st_.clients, 1, local_config(cfg))
    assert st_.server.round == 1
    assert all(art.global_adapter[k].flat().tobytes() == v.tobytes() for k, v in init.items())


def test_round_counter_increments_by_one():
    cfg = small_cfg(rounds=3)
    st_ = prepare_run(cfg, 0, 0)
    seen = []
    run_rounds(st_.server, st_.clients, 3, local_config(cfg),
               evaluate=lambda r, s, c: seen.append((r, s.round)) or {})
    assert seen == [(0, 0), (1, 1), (2, 2), (3, 3)]


def test_run_deterministic():
    a, b = run_single(small_cfg(), 3, 0, keep_history=True), run_single(small_cfg(), 3, 0, keep_history=True)
    assert a.metrics == b.metrics
    for ha, hb in zip(a.artifacts.history, b.artifacts.history):
        for k in ha:
            assert all(x.tobytes() == y.tobytes() for x, y in zip(ha[k] or [], hb[k] or []))


def test_single_client_equals_centralized_training():
    cfg = small_cfg(clients=1, rounds=3, **{"dataset.n_domains": 2})
    res = run_single(cfg, 0, 0)
    st_ = prepare_run(cfg, 0, 0)
    c = st_.clients[0]
    c.model.set_shared(st_.server.a_di_global)
    c.shared_opt = SGD(c.model.shared_parameters(), c.momentum)
    lc = local_config(cfg)
    for r in range(3):
        # the federated client resets the shared optimizer every round
        c.shared_opt = SGD(c.model.shared_parameters(), c.momentum)
        client_local_train(c, lc.epochs, lc.loss, lc.lr_at(r, 3), lc.batch_size, r * lc.epochs)
    fed = res.artifacts.global_adapter[1].flat()
    assert fed.tobytes() == c.model.a_di[1].flat().tobytes()
    priv = res.setup.clients[0].model.private_parameters()
    assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(priv, c.model.private_parameters()))


def test_client_parallelism_does_not_change_result():
    a = run_single(small_cfg(), 0, 0)
    b = run_single(small_cfg(client_workers=3), 0, 0)
    assert a.artifacts.global_adapter[1].flat().tobytes() == b.artifacts.global_adapter[1].flat().tobytes()
    assert a.metrics == b.metrics


def test_backbone_identical_after_run():
    cfg = small_cfg()
    st_ = prepare_run(cfg, 0, 0)
    before = st_.backbone.snapshot()
    run_rounds(st_.server, st_.clients, 2, local_config(cfg))
    assert all(x.tobytes() == y.tobytes() for x, y in zip(before, st_.backbone.snapshot()))


def fedavg_reference(cfg, seed, target):
    """Plain FedAvg of one bottleneck adapter, written against the primitives only."""
    st_ = prepare_run(cfg, seed, target)
    bb = st_.backbone
    glob = st_.server.a_di_global[1].copy(trainable=False)
    lc = local_config(cfg)
    clients = [(c.data, Tensor(c.trunk), np.random.default_rng(np.random.SeedSequence([seed, 19, c.client_id])))
               for c in st_.clients]
    total = sum(d.n for d, _, _ in clients)
    for r in range(cfg.rounds):
        lr = lc.lr_at(r, cfg.rounds)
        locals_ = []
        for data, trunk, g in clients:
            a = glob.copy(trainable=True)
            vel = [None] * 4
            for _ in range(cfg.local_epochs):
                order = g.permutation(data.n)
                for s in range(0, data.n, cfg.batch_size):
                    idx = order[s:s + cfg.batch_size]
                    h = Tensor(trunk.data[idx])
                    z = head_forward(bb, h + adapter_forward(a, h) * 0.5)
                    loss = cross_entropy(z, data.y[idx])
                    for p in a.parameters():
                        p.grad = None
                    T.backward(loss)
                    for i, p in enumerate(a.parameters()):
                        vel[i] = p.grad if vel[i] is None else lc.momentum * vel[i] + p.grad
                        p.data = p.data - lr * vel[i]
            locals_.append((data.n, a))
        new = []
        for i in range(4):
            acc = np.zeros_like(glob.parameters()[i].data)
            for n, a in locals_:
                acc = acc + (n / total) * a.parameters()[i].data
            new.append(Tensor(acc))
        glob = AdapterParams(*new)
    return glob


def test_fedavg_degeneracy_matches_reference():
    cfg = small_cfg(rounds=3, **{"toggles.bkd": False, "toggles.mhsa": False, "toggles.a_dw": False})
    res = run_single(cfg, 2, 1)
    ref = fedavg_reference(cfg, 2, 1)
    assert np.max(np.abs(res.artifacts.global_adapter[1].flat() - ref.flat())) < 1e-10


# ---------------------------------------------------------------- messages and transcript


def test_message_round_trip_and_errors():
    m = Message(CLIENT_TO_SERVER, "upload_A_di", 3, 7, b"abc")
    back, end = Message.from_bytes(m.to_bytes())
    assert back == m and end == m.byte_length == MSG_HEADER_SIZE + 3
    raw = m.to_bytes()
    with pytest.raises(ParseError):
        Message.from_bytes(raw[:-1])
    with pytest.raises(ParseError):
        Message.from_bytes(b"XXXX" + raw[4:])


def test_transcript_file_round_trip(tmp_path):
    res = run_single(small_cfg(), 0, 0)
    write_transcript(res.artifacts.transcript, tmp_path / "t.bin", tmp_path / "t.txt")
    back = read_transcript(tmp_path / "t.bin")
    assert back == res.artifacts.transcript
    assert len((tmp_path / "t.txt").read_text().splitlines()) == len(back)


# ---------------------------------------------------------------- accounting


def test_comm_cost_matches_byte_sum():
    res = run_single(small_cfg(), 0, 0)
    tr = res.artifacts.transcript
    rep = comm_cost_report(tr)
    assert rep.total_bytes == rep.transcript_bytes == sum(len(m.to_bytes()) for m in tr)
    per = adapter_nbytes(8, 2) + MSG_HEADER_SIZE
    assert all(r["down_bytes"] == r["up_bytes"] == per and r["logits_bytes"] == 0 for r in rep.rows)
    assert rep.reference_mb == {"dual-adapter": 2.270, "FedCLIP": 2.010, "FedAvg": 13.650, "logits": 0.003}


def test_comm_cost_d64_r8():
    per = 8 * 1096 + 16
    assert adapter_nbytes(64, 8) == per
    payload = serialize_adapters({0: AdapterParams.init(64, 8, np.random.default_rng())})
    msgs = [Message(SERVER_TO_CLIENT, "broadcast_A_di", 0, 0, payload),
            Message(CLIENT_TO_SERVER, "upload_A_di", 0, 0, payload)]
    rep = comm_cost_report(msgs)
    assert rep.rows[0]["down_bytes"] + rep.rows[0]["up_bytes"] == 2 * (per + MSG_HEADER_SIZE)


def test_comm_cost_float32_and_logits():
    res = run_single(small_cfg(), 0, 0)
    tr = res.artifacts.transcript
    rep = comm_cost_report(tr, CommCostModel(bytes_per_param=4, include_logits=True, n_classes=3,
                                             batch_size=16, local_epochs=1))
    n_params = 8 * 2 * 2 + 2 + 8
    assert rep.rows[0]["up_bytes"] == MSG_HEADER_SIZE + 16 + 4 * n_params
    n0 = res.setup.clients[0].n_k
    assert rep.rows[0]["logits_bytes"] == -(-n0 // 16) * 1 * 3 * 4


def test_logits_share_sweep():
    rows = logits_share_sweep([10 ** p for p in range(2, 8)], 3 * 25 * 5, 4)
    for r in rows:
        if r["adapter_params"] >= 10 ** 5:
            assert r["logits_share"] < 0.01
    assert [r["logits_share"] for r in rows] == sorted((r["logits_share"] for r in rows), reverse=True)


# ---------------------------------------------------------------- audit


def test_audit_passes_standard_run():
    res = run_single(small_cfg(), 0, 0)
    rep = audit_transcript(res.artifacts.transcript, (1,), 8, 2, res.artifacts.private_fingerprints)
    assert rep.passed and rep.n_messages == len(res.artifacts.transcript)
    kinds = {m.kind for m in res.artifacts.transcript}
    assert kinds == {"register_n_k", "broadcast_A_di", "upload_A_di"}


def test_audit_flags_private_adapter_bytes():
    res = run_single(small_cfg(), 0, 0)
    c = res.setup.clients[0]
    leak = serialize_adapters(c.model.a_dw)
    tr = list(res.artifacts.transcript)
    fp = res.artifacts.private_fingerprints | c.private_fingerprints()
    for bad in (Message(CLIENT_TO_SERVER, "upload_A_dw", 1, 0, leak),
                Message(CLIENT_TO_SERVER, "upload_A_di", 1, 0, leak)):
        rep = audit_transcript(tr + [bad], (1,), 8, 2, fp)
        assert not rep.passed
        assert rep.offending[0][0] == len(tr)


def test_audit_flags_raw_samples_and_bad_direction():
    res = run_single(small_cfg(), 0, 0)
    tr = list(res.artifacts.transcript)
    raw = res.setup.clients[0].data.x[:4].tobytes()
    rep = audit_transcript(tr + [Message(CLIENT_TO_SERVER, "raw_samples", 1, 0, raw)])
    assert not rep.passed and "raw_samples" in rep.offending[0][1]
    rep = audit_transcript(tr + [Message(CLIENT_TO_SERVER, "upload_A_di", 1, 0, raw)])
    assert not rep.passed
    rep = audit_transcript(tr + [Message(SERVER_TO_CLIENT, "upload_A_di", 1, 0, tr[-1].payload)])
    assert not rep.passed


def test_message_kinds_never_carry_private_state():
    res = run_single(small_cfg(), 1, 2)
    fps = res.artifacts.private_fingerprints
    assert fps
    for m in res.artifacts.transcript:
        for f in fps:
            assert f not in m.payload.hex()
