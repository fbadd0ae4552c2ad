import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from relsparse.inference import sandwich_variance
from relsparse.policy import MaskedPolicy, log_prob, log_prob_derivs, prob_treat
from relsparse.relspar import prox_relative_l1
from relsparse.trajectories import Dataset, scale_states, split_dataset, unscale_states
from relsparse.trpo_objective import DerivativeBundle
from relsparse.value import ISRatios, value_weighted

finite = st.floats(-5, 5, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)


@given(n=st.integers(4, 500), seed=st.integers(0, 2**31 - 1))
def test_split_is_a_partition(n, seed):
    s = split_dataset(n, seed)
    parts = [set(s.split1_train), set(s.split1_test), set(s.split2)]
    assert sum(len(p) for p in parts) == n
    assert set().union(*parts) == set(range(n))
    assert all(len(p) >= 1 for p in parts)


@given(beta=vec3, b=vec3, s=vec3, mask=arrays(np.float64, 3, elements=st.sampled_from([0.0, 1.0])))
def test_probabilities_normalise(beta, b, s, mask):
    p = MaskedPolicy(beta, b, mask)
    total = np.exp(log_prob(p, 1, s)) + np.exp(log_prob(p, 0, s))
    assert abs(total - 1.0) < 1e-12
    assert 0.0 <= prob_treat(p, s) <= 1.0


@given(beta=vec3, s=vec3, a=st.sampled_from([0, 1]))
def test_second_derivative_is_symmetric_nsd(beta, s, a):
    H = log_prob_derivs(MaskedPolicy.full(beta), a, s).d2_beta
    np.testing.assert_array_equal(H, H.T)
    assert np.max(np.linalg.eigvalsh(H)) <= 1e-12


@given(
    logs=arrays(np.float64, 6, elements=st.floats(-20, 20)),
    G=arrays(np.float64, 6, elements=st.floats(-100, 100)),
    c=st.floats(-50, 50),
)
def test_weighted_value_is_convex_combination_and_scale_free(logs, G, c):
    v = value_weighted(ISRatios.from_logs(logs, G)).v_weighted
    assert G.min() - 1e-9 <= v <= G.max() + 1e-9
    v2 = value_weighted(ISRatios.from_logs(logs + c, G)).v_weighted
    assert abs(v - v2) <= 1e-9 * (1 + abs(v))


@given(u=vec3, b=vec3, t=arrays(np.float64, 3, elements=st.floats(0, 3)))
def test_prox_satisfies_optimality(u, b, t):
    x = prox_relative_l1(u, b, t)
    for k in range(3):
        if x[k] != b[k]:
            assert abs((u[k] - x[k]) - t[k] * np.sign(x[k] - b[k])) < 1e-9
        else:
            assert abs(u[k] - b[k]) <= t[k] + 1e-12


@settings(max_examples=50)
@given(seed=st.integers(0, 10_000))
def test_sandwich_is_psd(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(12, 3))
    A = rng.normal(size=(3, 3))
    H = -(A @ A.T + 0.5 * np.eye(3))
    var = sandwich_variance(DerivativeBundle(z.mean(0), H, rng.normal(size=(3, 3)), z), rng.normal(size=(12, 3)))
    assert np.min(np.linalg.eigvalsh(var)) >= -1e-10


@settings(max_examples=30)
@given(seed=st.integers(0, 10_000))
def test_scaling_roundtrip(seed):
    rng = np.random.default_rng(seed)
    S = rng.normal(scale=rng.uniform(0.1, 10, size=2), size=(5, 3, 2))
    d = Dataset(S, np.zeros((5, 2)), np.zeros((5, 2)))
    np.testing.assert_allclose(unscale_states(scale_states(d)).states, S, rtol=1e-10, atol=1e-12)
