import math

import numpy as np
import pytest

import ldpmean.protocol as proto
from ldpmean.privunitg import optimize_params, privacy_audit
from ldpmean.rng import derive_seed, seed_digest
from ldpmean.transforms import EncodingMode, decode_transform, realize
from ldpmean.protocol import (ClientMessage, CorrelatedConfig, DegenerateProjectionError,
                              MessageVariant, ProtocolError, bit_cost,
                              complete_norm, completion_constant, correlated_client,
                              correlated_server, default_bias_delta, deserialize,
                              direct_privunitg_client, nearly_unbiased_client,
                              nearly_unbiased_server, projunit_client,
                              projunit_server, serialize, unbiased_rotation_client,
                              unbiased_rotation_scale)

SEED = b"protocol-tests!!"


def unit(d, seed=0):
    v = np.random.default_rng(seed).standard_normal(d)
    return v / np.linalg.norm(v)


def make_config(label="shared", groups=1):
    return CorrelatedConfig(derive_seed(SEED, label), groups=groups)


# --- client basics -----------------------------------------------------------

def test_client_rejects_non_unit_input():
    with pytest.raises(ProtocolError):
        projunit_client(np.ones(16), 4, 4.0, SEED)


def test_full_rank_rotation_payload_is_randomizer_output():
    # k = d keeps the norm, so u = Wv exactly (up to float32 payload)
    d = 16
    v = unit(d, 1)
    msg = projunit_client(v, d, 4.0, SEED, ensemble="rotation", noiseless=True)
    W = realize(decode_transform(msg.transform_encoding))
    np.testing.assert_allclose(msg.payload, W.apply(v).astype(np.float32), atol=1e-6)


@pytest.mark.parametrize("ensemble", ["rotation", "srht", "gaussian"])
def test_noiseless_reconstruction_matches_dense_oracle(ensemble):
    # server output equals (1/n) sum W_i^T W_i v_i / ||W_i v_i|| from dense math
    d, k, n = 16, 4, 8
    inputs = [unit(d, i) for i in range(n)]
    msgs = [projunit_client(inputs[i], k, 4.0, derive_seed(SEED, ensemble, i),
                            ensemble=ensemble, noiseless=True) for i in range(n)]
    est = projunit_server(msgs)
    acc = np.zeros(d)
    for msg in msgs:
        M = realize(decode_transform(msg.transform_encoding)).as_dense()
        acc += M.T @ msg.payload.astype(np.float64)
    np.testing.assert_allclose(est.mu_hat, acc / n, atol=1e-9)


def test_server_single_message_norm():
    d = 16
    v = unit(d, 2)
    msg = projunit_client(v, d, 8.0, SEED, ensemble="srht")
    est = projunit_server([msg])
    assert abs(np.linalg.norm(est.mu_hat) -
               np.linalg.norm(msg.payload.astype(np.float64))) < 1e-9
    assert est.n == 1 and est.total_bits == bit_cost(msg)


def test_server_linearity():
    d, k = 16, 4
    msgs = [projunit_client(unit(d, i), k, 4.0, derive_seed(SEED, "lin", i))
            for i in range(6)]
    whole = projunit_server(msgs).mu_hat * 6
    parts = projunit_server(msgs[:2]).mu_hat * 2 + projunit_server(msgs[2:]).mu_hat * 4
    np.testing.assert_allclose(whole, parts, rtol=1e-12, atol=1e-15)


def test_server_rejects_mixed_dimensions():
    a = projunit_client(unit(16, 0), 4, 4.0, SEED)
    b = projunit_client(unit(32, 1), 4, 4.0, SEED)
    with pytest.raises(ProtocolError):
        projunit_server([a, b])


def test_server_rejects_undecodable_transform():
    msg = projunit_client(unit(16, 0), 4, 4.0, SEED)
    msg.transform_encoding = b"\x00" * len(msg.transform_encoding)
    msg.realized = None
    with pytest.raises(Exception):
        projunit_server([msg])


def test_degenerate_projection_resample_then_error():
    # e_1 projected by SRHT with k = 1 keeps a single +-1/sqrt(d) entry, so a
    # zero projection cannot occur; force the degenerate path via monkeypatch
    calls = []

    def zero_sample(_):
        class Z:
            spec = None

            def apply(self, v):
                calls.append(1)
                return np.zeros(1)
        return Z()

    with pytest.raises(DegenerateProjectionError):
        proto._project_normalized(zero_sample, unit(8), SEED)
    assert len(calls) == 2  # one resample before failing


def test_dense_path_matches_wire_path():
    # in-process attachment and decode-from-wire realize identical transforms
    d, k = 64, 8
    msg = projunit_client(unit(d, 3), k, 4.0, SEED, ensemble="rotation")
    via_wire = realize(decode_transform(msg.transform_encoding))
    np.testing.assert_array_equal(msg.realized.matrix, via_wire.matrix)
    est_cached = projunit_server([msg])
    msg.realized = None
    est_decoded = projunit_server([msg])
    np.testing.assert_array_equal(est_cached.mu_hat, est_decoded.mu_hat)


# --- correlated variant --------------------------------------------------------

def test_correlated_clients_share_diagonal():
    config = make_config()
    m1 = correlated_client(unit(64, 0), 8, 4.0, config, derive_seed(SEED, "c1"))
    m2 = correlated_client(unit(64, 1), 8, 4.0, config, derive_seed(SEED, "c2"))
    s1 = realize(decode_transform(m1.transform_encoding), config.shared_seed).signs
    s2 = realize(decode_transform(m2.transform_encoding), config.shared_seed).signs
    np.testing.assert_array_equal(s1, s2)


def test_correlated_message_saves_exactly_one_seed():
    d, k, eps = 256, 16, 4.0
    config = make_config()
    corr = correlated_client(unit(d, 0), k, eps, config, SEED)
    plain = projunit_client(unit(d, 0), k, eps, SEED, ensemble="srht",
                            mode=EncodingMode.EXPLICIT)
    assert bit_cost(plain) - bit_cost(corr) == 128
    # header + packed index bits + 32-bit floats
    idx_bytes = (k * 8 + 7) // 8
    assert bit_cost(corr) == 8 * (21 + 13 + idx_bytes + 4 * k)


def test_correlated_equivalence_with_naive_aggregation():
    # the scatter-then-single-adjoint server equals per-client adjoints
    d, k, n = 1024, 64, 32
    config = make_config("equiv")
    inputs = [unit(d, i) for i in range(n)]
    msgs = [correlated_client(inputs[i], k, 8.0, config, derive_seed(SEED, "eq", i))
            for i in range(n)]
    est = correlated_server(msgs, config)
    acc = np.zeros(d)
    for msg in msgs:
        W = realize(decode_transform(msg.transform_encoding), config.shared_seed)
        acc += W.apply_adjoint(msg.payload.astype(np.float64))
    np.testing.assert_allclose(est.mu_hat, acc / n, atol=1e-9)


def test_correlated_noiseless_dense_oracle():
    d, k = 16, 4
    config = make_config("noiseless")
    msg = correlated_client(unit(d, 5), k, 4.0, config, SEED, noiseless=True)
    est = correlated_server([msg], config)
    W = realize(decode_transform(msg.transform_encoding), config.shared_seed)
    np.testing.assert_allclose(est.mu_hat,
                               W.as_dense().T @ msg.payload.astype(np.float64),
                               atol=1e-12)


def test_correlated_server_rejects_wrong_seed():
    config = make_config("right")
    msg = correlated_client(unit(64, 0), 8, 4.0, config, SEED)
    with pytest.raises(ProtocolError):
        correlated_server([msg], make_config("wrong"))


def test_correlated_groups_mechanical():
    d, k, n = 64, 8, 6
    config = make_config("groups", groups=2)
    msgs = [correlated_client(unit(d, i), k, 4.0, config, derive_seed(SEED, "g", i),
                              group=i % 2) for i in range(n)]
    est = correlated_server(msgs, config)
    acc = np.zeros(d)
    for i, msg in enumerate(msgs):
        shared = config.group_seed(i % 2)
        assert msg.seed_digest == seed_digest(shared)
        W = realize(decode_transform(msg.transform_encoding), shared)
        acc += W.apply_adjoint(msg.payload.astype(np.float64))
    np.testing.assert_allclose(est.mu_hat, acc / n, atol=1e-12)


# --- unbiased rotation -----------------------------------------------------------

def test_unbiased_scale_identity_at_full_rank():
    for d in (1, 2, 7, 64):
        assert unbiased_rotation_scale(d, d) == 1.0


def test_unbiased_scale_hand_value():
    assert unbiased_rotation_scale(2, 1) == pytest.approx(math.pi / (2 * math.sqrt(2)),
                                                          abs=1e-9)


def test_unbiased_rotation_light_bias_check():
    # light version of the acceptance unbiasedness suite
    d, k, eps, total = 64, 8, 8.0, 20_000
    v = unit(d, 11)
    acc = np.zeros(d)
    sq = np.zeros(d)
    for t in range(total):
        msg = unbiased_rotation_client(v, k, eps, derive_seed(SEED, "ub", t))
        est = projunit_server([msg])
        acc += est.mu_hat
        sq += est.mu_hat**2
    mean = acc / total
    var = sq / total - mean**2
    stderr_norm = math.sqrt(float(var.sum()) / total)
    assert np.linalg.norm(mean - v) <= 4 * stderr_norm


# --- nearly unbiased SRHT ----------------------------------------------------------

def test_complete_norm_unit_in_both_branches():
    rng = np.random.default_rng(13)
    for _ in range(100):
        v_p = rng.standard_normal(8) * rng.uniform(0.1, 3.0)
        u = complete_norm(v_p, 2.0)
        assert u.shape == (9,)
        assert abs(np.linalg.norm(u) - 1.0) < 1e-12


def test_complete_norm_branch1_identity():
    v_p = np.array([0.3, -0.4, 0.1])
    c = 1.7
    u = complete_norm(v_p, c)
    np.testing.assert_allclose(math.sqrt(c) * u[:3], v_p, atol=1e-15)


def test_complete_norm_branch2_renormalizes():
    v_p = np.array([3.0, 4.0])
    u = complete_norm(v_p, 1.5)
    np.testing.assert_allclose(u, [0.6, 0.8, 0.0], atol=1e-15)


def test_completion_constant_properties():
    c = completion_constant(64, 0.01)
    assert c == pytest.approx(1 + 2 * math.log(6400) / 8, rel=1e-12)
    assert completion_constant(64, 0.5) >= 1.0
    with pytest.raises(ValueError):
        completion_constant(64, 0.0)
    assert 0 < default_bias_delta(1024, 64, 10) == 64 / (100 * 1024) < 1


def test_branch2_rare_at_calibrated_constant():
    # P(||Wv||^2 > C) at d=1024, k=64, delta=0.01 over 10^4 seeds: <= 2%
    from ldpmean.transforms import sample_srht
    d, k, delta, trials = 1024, 64, 0.01, 10_000
    c = completion_constant(k, delta)
    v = unit(d, 17)
    hits = 0
    for t in range(trials):
        W = sample_srht(d, k, derive_seed(SEED, "b2", t))
        hits += float(np.linalg.norm(W.apply(v)) ** 2) > c
    assert hits / trials <= 0.02


def test_nearly_unbiased_noiseless_single_message():
    # branch 1, noiseless: mu_hat = W^T W v up to wire float32 rounding
    d, k = 16, 4
    config = make_config("nu")
    v = unit(d, 19)
    delta = default_bias_delta(d, k, 1)
    msg = nearly_unbiased_client(v, k, 8.0, delta, config, SEED, noiseless=True)
    est = nearly_unbiased_server([msg], config)
    W = realize(decode_transform(msg.transform_encoding), config.shared_seed)
    np.testing.assert_allclose(est.mu_hat, W.as_dense().T @ (W.as_dense() @ v),
                               atol=1e-5)


def test_nearly_unbiased_dense_oracle_exact():
    # fast reconstruction equals the dense oracle on the same decoded message
    d, k, n = 16, 4, 6
    config = make_config("nud")
    delta = default_bias_delta(d, k, n)
    msgs = [nearly_unbiased_client(unit(d, i), k, 8.0, delta, config,
                                   derive_seed(SEED, "nu", i)) for i in range(n)]
    est = nearly_unbiased_server(msgs, config)
    acc = np.zeros(d)
    for msg in msgs:
        M = realize(decode_transform(msg.transform_encoding), config.shared_seed).as_dense()
        acc += math.sqrt(msg.c_value) * (M.T @ msg.payload[:k].astype(np.float64))
    np.testing.assert_allclose(est.mu_hat, acc / n, atol=1e-12)


def test_nearly_unbiased_rejects_inconsistent_c():
    d, k = 16, 4
    config = make_config("nuc")
    a = nearly_unbiased_client(unit(d, 0), k, 8.0, 0.1, config, derive_seed(SEED, "x"))
    b = nearly_unbiased_client(unit(d, 1), k, 8.0, 0.2, config, derive_seed(SEED, "y"))
    with pytest.raises(ProtocolError):
        nearly_unbiased_server([a, b], config)


def test_nearly_unbiased_empirical_bias():
    # d=512, k=64, eps=8: mean over repetitions of n=100 aggregates ~ v
    d, k, eps, n, reps = 512, 64, 8.0, 100, 40
    config = make_config("nubias")
    delta = default_bias_delta(d, k, n)
    v = unit(d, 23)
    estimates = []
    for r in range(reps):
        msgs = [nearly_unbiased_client(v, k, eps, delta, config,
                                       derive_seed(SEED, "nb", r, i))
                for i in range(n)]
        estimates.append(nearly_unbiased_server(msgs, config).mu_hat)
    estimates = np.stack(estimates)
    mean = estimates.mean(axis=0)
    total = reps * n  # independent randomizer draws
    stderr_norm = math.sqrt(float(estimates.var(axis=0).sum()) / reps)
    assert np.linalg.norm(mean - v) <= 4 * stderr_norm


# --- direct client and serialization ----------------------------------------------

def test_direct_payload_dimension():
    v = unit(100, 3)
    msg = direct_privunitg_client(v, 4.0, SEED)
    assert msg.payload.shape == (100,)
    assert msg.transform_encoding is None
    est = projunit_server([msg])
    np.testing.assert_allclose(est.mu_hat, msg.payload.astype(np.float64), atol=1e-12)


def test_serialize_roundtrip_every_variant():
    d, k = 64, 8
    config = make_config("ser")
    delta = default_bias_delta(d, k, 4)
    builders = [
        lambda i: projunit_client(unit(d, i), k, 4.0, derive_seed(SEED, "r", i),
                                  ensemble="rotation"),
        lambda i: projunit_client(unit(d, i), k, 4.0, derive_seed(SEED, "s", i),
                                  ensemble="srht"),
        lambda i: projunit_client(unit(d, i), k, 4.0, derive_seed(SEED, "g", i),
                                  ensemble="gaussian"),
        lambda i: projunit_client(unit(d, i), k, 4.0, derive_seed(SEED, "se", i),
                                  ensemble="srht", mode=EncodingMode.EXPLICIT),
        lambda i: correlated_client(unit(d, i), k, 4.0, config, derive_seed(SEED, "c", i)),
        lambda i: unbiased_rotation_client(unit(d, i), k, 4.0, derive_seed(SEED, "u", i)),
        lambda i: nearly_unbiased_client(unit(d, i), k, 4.0, delta, config,
                                         derive_seed(SEED, "n", i)),
        lambda i: direct_privunitg_client(unit(d, i), 4.0, derive_seed(SEED, "d", i)),
    ]
    for builder in builders:
        for i in range(125):
            msg = builder(i)
            data = serialize(msg)
            back = deserialize(data)
            assert back.variant == msg.variant
            assert back.d == msg.d and back.k == msg.k
            assert back.transform_encoding == msg.transform_encoding
            assert back.c_value == msg.c_value
            assert back.seed_digest == msg.seed_digest
            assert back.realized is None
            np.testing.assert_array_equal(back.payload, msg.payload)
            assert bit_cost(msg) == 8 * len(data)


def test_deserialize_rejects_garbage():
    msg = projunit_client(unit(16, 0), 4, 4.0, SEED)
    data = serialize(msg)
    with pytest.raises(Exception):
        deserialize(data[:-2])
    with pytest.raises(Exception):
        deserialize(b"XX" + data[2:])


def test_direct_bit_cost_dominates_seed_mode_variants():
    d, k = 2**15, 1000
    v = unit(d, 1)
    direct = direct_privunitg_client(v, 4.0, SEED, noiseless=True)
    assert bit_cost(direct) == 8 * (21 + 4 * d)
    for ensemble in ("rotation", "srht", "gaussian"):
        msg = projunit_client(v, k, 4.0, SEED, ensemble=ensemble, noiseless=True)
        assert bit_cost(direct) > 25 * bit_cost(msg)


def test_message_validation():
    with pytest.raises(ProtocolError):
        ClientMessage(MessageVariant.PROJUNIT_SRHT, 16, 4, b"x", np.zeros(5, np.float32))
    with pytest.raises(ProtocolError):
        ClientMessage(MessageVariant.PROJUNIT_SRHT, 16, 4, b"x", np.zeros(4, np.float32),
                      c_value=1.5)
    with pytest.raises(ProtocolError):
        ClientMessage(MessageVariant.NEARLY_UNBIASED_SRHT, 16, 4, b"x",
                      np.zeros(5, np.float32), c_value=0.5)


# --- privacy composition -----------------------------------------------------------

def test_every_variant_randomizes_exactly_once_on_unit_vector(monkeypatch):
    calls = []
    real = proto.randomize

    def spy(v, params, seed):
        calls.append((np.linalg.norm(v), params))
        return real(v, params, seed)

    monkeypatch.setattr(proto, "randomize", spy)
    d, k, eps = 64, 8, 4.0
    config = make_config("spy")
    delta = default_bias_delta(d, k, 1)
    v = unit(d, 29)
    jobs = [
        lambda: projunit_client(v, k, eps, SEED, ensemble="rotation"),
        lambda: projunit_client(v, k, eps, SEED, ensemble="srht"),
        lambda: projunit_client(v, k, eps, SEED, ensemble="gaussian"),
        lambda: correlated_client(v, k, eps, config, SEED),
        lambda: unbiased_rotation_client(v, k, eps, SEED),
        lambda: nearly_unbiased_client(v, k, eps, delta, config, SEED),
        lambda: direct_privunitg_client(v, eps, SEED),
    ]
    for job in jobs:
        calls.clear()
        job()
        assert len(calls) == 1
        norm, params = calls[0]
        assert abs(norm - 1.0) < 1e-6
        assert privacy_audit(params) <= eps + 1e-9


def test_mse_monotone_in_n():
    # averaging helps: MSE at n=40 below MSE at n=5, 3 sigma, every variant
    d, k, eps, reps = 64, 16, 8.0, 25
    config = make_config("mono")
    delta = default_bias_delta(d, k, 40)

    def run(variant, n, rep):
        inputs = [unit(d, 1000 + i) for i in range(n)]
        target = np.mean(inputs, axis=0)
        msgs = []
        for i, v in enumerate(inputs):
            s = derive_seed(SEED, "mono", variant, n, rep, i)
            if variant == "rot":
                msgs.append(projunit_client(v, k, eps, s, ensemble="rotation"))
            elif variant == "srht":
                msgs.append(projunit_client(v, k, eps, s, ensemble="srht"))
            elif variant == "gauss":
                msgs.append(projunit_client(v, k, eps, s, ensemble="gaussian"))
            elif variant == "corr":
                msgs.append(correlated_client(v, k, eps, config, s))
            elif variant == "unbrot":
                msgs.append(unbiased_rotation_client(v, k, eps, s))
            elif variant == "nusrht":
                msgs.append(nearly_unbiased_client(v, k, eps, delta, config, s))
            else:
                msgs.append(direct_privunitg_client(v, eps, s))
        if variant == "corr":
            est = correlated_server(msgs, config)
        elif variant == "nusrht":
            est = nearly_unbiased_server(msgs, config)
        else:
            est = projunit_server(msgs)
        return float(np.sum((est.mu_hat - target) ** 2))

    for variant in ("rot", "srht", "gauss", "corr", "unbrot", "nusrht", "direct"):
        small = np.array([run(variant, 5, r) for r in range(reps)])
        large = np.array([run(variant, 40, r) for r in range(reps)])
        gap_sigma = math.hypot(small.std(ddof=1), large.std(ddof=1)) / math.sqrt(reps)
        assert large.mean() < small.mean() + 3 * gap_sigma, variant
