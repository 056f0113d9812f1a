import io

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from fedcox.errors import (
    InvalidArgument,
    PrivacyViolation,
    RoundFailure,
    TruncatedFrame,
    UnknownMessageType,
    VersionMismatch,
)
from fedcox.federation import (
    CenterNode,
    FederatedCohort,
    InProcessTransport,
    Message,
    StreamTransport,
    aggregate_gradient,
    baseline_estimators,
    decode_json,
    decode_message,
    encode_json,
    encode_message,
    gel_iterate,
    gradient_round,
    partition,
)
from fedcox.federation.protocol import check_payload, read_frame
from fedcox.lasso import fit_l1_cox, kkt_residual
from fedcox.survival import SurvivalDataset, gradient
from fedcox.tuning import Tuning

from conftest import make_data

floats = st.floats(allow_nan=True, allow_infinity=True, width=64)
arrays = hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4), elements=floats)
# JSON keeps every non-NaN bit pattern; NaN payloads collapse to the canonical NaN
json_arrays = hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                         elements=st.floats(allow_nan=False, width=64))


@given(st.sampled_from(["grad_request", "grad_reply", "omega_reply", "hazard_reply"]),
       st.integers(0, 2**32 - 1), st.lists(arrays, max_size=4))
def test_binary_round_trip_is_bit_exact(mtype, rnd, arrs):
    msg = Message(mtype, rnd, arrs)
    assert decode_message(encode_message(msg)) == msg


@given(st.lists(json_arrays, max_size=3), st.text(max_size=20))
def test_json_round_trip_is_bit_exact(arrs, text):
    msg = Message("scalar_reply", 3, arrs)
    assert decode_json(encode_json(msg)) == msg
    err = Message("error", 1, text=text)
    assert decode_json(encode_json(err)) == err
    assert decode_message(encode_message(err)) == err


def test_json_nan_survives():
    back = decode_json(encode_json(Message("scalar_reply", 0, [np.array([np.nan, 1.0])])))
    assert np.isnan(back.arrays[0][0]) and back.arrays[0][1] == 1.0


def test_frame_errors():
    frame = encode_message(Message("grad_reply", 1, [np.ones(3)]))
    with pytest.raises(TruncatedFrame):
        decode_message(frame[:-1])
    with pytest.raises(TruncatedFrame):
        decode_message(frame[:3])
    with pytest.raises(VersionMismatch):
        decode_message(encode_message(Message("grad_reply", 1, [np.ones(3)]), version=9))
    bad = bytearray(frame)
    bad[5] = 99
    with pytest.raises(UnknownMessageType):
        decode_message(bytes(bad))
    with pytest.raises(UnknownMessageType):
        Message("gossip")
    stream = io.BytesIO(frame + frame)
    assert read_frame(stream) == frame and read_frame(stream) == frame
    with pytest.raises(TruncatedFrame):
        read_frame(io.BytesIO(frame[:-2]))


def test_payload_guard():
    check_payload(Message("grad_reply", 0, [np.zeros((3, 10))]), m=50, p=10)
    with pytest.raises(PrivacyViolation):
        check_payload(Message("grad_reply", 0, [np.zeros((50, 10))]), m=50, p=10)
    with pytest.raises(PrivacyViolation):
        check_payload(Message("grad_reply", 0, [np.zeros(500)]), m=50, p=10)


def test_partition_is_seeded_and_exhaustive():
    data = make_data(60, 3, 1)
    a, b = partition(data, 3, seed=5), partition(data, 3, seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a.indices, b.indices))
    assert np.array_equal(np.sort(np.concatenate(a.indices)), np.arange(60))
    assert (a.K, a.m, a.n, a.p) == (3, 20, 60, 3)
    with pytest.raises(InvalidArgument, match="remainder 4"):
        partition(data, 7)
    with pytest.raises(InvalidArgument):
        FederatedCohort([make_data(10, 3), make_data(12, 3)])


def test_aggregate_gradient_is_mean_of_local(sim_cohort_data):
    with partition(sim_cohort_data, 4, seed=0) as co:
        beta = np.linspace(-0.2, 0.2, co.p)
        direct = np.mean([gradient(c.data, beta) for c in co.centers], axis=0)
        assert np.array_equal(aggregate_gradient(co, beta), direct)
        G = gradient_round(co, beta, 2 * beta)
        assert G.shape == (4, 2, co.p)


def test_gel_rounds_are_local_and_certified(sim_cohort_data):
    with partition(sim_cohort_data, 4, seed=1) as co:
        tr = gel_iterate(co, T=4)
        assert tr.T == 4 and tr.error is None
        for t in range(1, tr.T + 1):
            beta_prev = tr.iterates[t - 1]
            local = co.principal_data
            shift = gradient(local, beta_prev) - tr.global_grads[t - 1]
            grad = gradient(local, tr.iterates[t]) - shift
            assert kkt_residual(grad, tr.iterates[t], tr.lambdas[t]) <= 1e-7
        assert all(k <= 1e-7 for k in tr.kkt)


def test_comm_ledger_counts_gradients(sim_cohort_data):
    T = 5
    with partition(sim_cohort_data, 4, seed=2) as co:
        tr = gel_iterate(co, T=T)
        snap = co.comm_log.snapshot()
        assert snap["by_type"]["grad_reply"] == T * co.K * co.p
        assert snap["by_type"]["grad_request"] == T * co.p
        assert snap["floats"]["up"] == T * co.K * co.p
        assert tr.comm == [co.K * co.p + co.p] * T


def test_single_center_gel_is_the_lasso(sim_cohort_data):
    with partition(sim_cohort_data, 1) as co:
        tr = gel_iterate(co, T=3, tuning=Tuning(schedule="constant"))
        lam = tr.lambdas[1]
        # zero correction: every round re-solves the pooled lasso from a warm start
        chain = [tr.iterates[0]]
        for _ in range(3):
            chain.append(fit_l1_cox(co.principal_data, lam, init=chain[-1]).beta)
        assert all(np.array_equal(a, b) for a, b in zip(tr.iterates, chain))


@pytest.mark.parametrize("codec", ["binary", "jsonl"])
def test_stream_transport_is_bit_identical(sim_cohort_data, codec):
    with partition(sim_cohort_data, 4, seed=3) as a:
        tr_a = gel_iterate(a, T=3)
        comm_a = a.comm_log.snapshot()
    datasets = [sim_cohort_data.subset(idx) for idx in partition(sim_cohort_data, 4, seed=3).indices]
    with FederatedCohort(datasets, transport="stream", codec=codec) as b:
        tr_b = gel_iterate(b, T=3)
        comm_b = b.comm_log.snapshot()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(tr_a.iterates, tr_b.iterates))
    assert comm_a == comm_b


class _Leaky(CenterNode):
    def handle(self, msg):
        return Message("grad_reply", msg.round, [self.data.covariates])


class _Broken(CenterNode):
    def handle(self, msg):
        return Message("error", msg.round, text="disk on fire")


@pytest.mark.parametrize("transport", [InProcessTransport, StreamTransport])
def test_privacy_contract_enforced_on_the_wire(transport):
    data = make_data(40, 6, 2)
    centers = [CenterNode(0, data.subset(np.arange(20))), _Leaky(1, data.subset(np.arange(20, 40)))]
    t = transport(centers)
    try:
        with pytest.raises(PrivacyViolation):
            t.exchange([Message("grad_request", 1, [np.zeros((1, 6))])] * 2)
    finally:
        t.close()


@pytest.mark.parametrize("transport", [InProcessTransport, StreamTransport])
def test_center_error_becomes_round_failure(transport):
    data = make_data(40, 3, 2)
    centers = [CenterNode(0, data.subset(np.arange(20))), _Broken(1, data.subset(np.arange(20, 40)))]
    t = transport(centers)
    try:
        with pytest.raises(RoundFailure, match="disk on fire") as info:
            t.exchange([Message("grad_request", 1, [np.zeros((1, 3))])] * 2)
        assert info.value.center == 1
    finally:
        t.close()


def test_center_rejects_unknown_request():
    node = CenterNode(0, make_data(20, 3))
    reply = node.handle(Message("grad_reply", 4, [np.zeros(3)]))
    assert reply.type == "error" and reply.round == 4


def test_baselines(sim_cohort_data):
    with partition(sim_cohort_data, 2, seed=4) as co:
        one = baseline_estimators(co, "one_center")
        avg = baseline_estimators(co, "average")
        deb = baseline_estimators(co, "average_debiased")
        assert one.shape == avg.shape == deb.shape == (co.p,)
        assert co.comm_log.total_floats == 0
        with pytest.raises(InvalidArgument):
            baseline_estimators(co, "median")


def test_local_centering_leaves_gradients_unchanged():
    data = make_data(120, 6, seed=11)
    beta = np.linspace(-0.3, 0.3, 6)
    with partition(data, 3, seed=1) as a, partition(data, 3, seed=1, centering="local") as b:
        for ca, cb in zip(a.centers, b.centers):
            assert np.allclose(cb.data.covariates.mean(axis=0), 0.0, atol=1e-12)
            assert np.allclose(gradient(ca.data, beta), gradient(cb.data, beta), atol=1e-12)
    with pytest.raises(InvalidArgument):
        partition(data, 3, centering="pooled")
