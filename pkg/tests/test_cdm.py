import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from src.cdm import (
    ConditionalDiscriminator,
    GammaWeights,
    GroupedRepresentations,
    KernelSpec,
    acdm_discriminator_loss,
    acdm_generator_penalty,
    cdm_mmd_penalty,
    gamma_from_batch,
    gamma_weights,
    group_representations,
    kernel_matrix,
    median_pairwise_distance,
    mmd_unbiased,
    resolve_kernel,
)
from src.errors import CdmError
from src.sampler import make_dataset


UNIT = KernelSpec(bandwidths=(1.0,))


def t(values):
    return torch.tensor(values, dtype=torch.float64)


def uniform_discriminator(z, y):
    return torch.full((z.shape[0], 2), 0.5, dtype=torch.float64)


def test_identical_point_masses_give_exact_zero():
    a = [[0.3, -1.2]]
    assert float(mmd_unbiased(a * 2, a * 2, UNIT)) == 0.0
    assert float(mmd_unbiased(a * 2, a * 2, KernelSpec.mkmmd())) == 0.0


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.2, 3.0))
def test_two_point_separated_closed_form(a, b, sigma):
    k = KernelSpec(bandwidths=(sigma,))
    value = float(mmd_unbiased([[a], [a]], [[b], [b]], k))
    expected = 2.0 * (1.0 - math.exp(-(a - b) ** 2 / (2.0 * sigma ** 2)))
    assert value == pytest.approx(expected, abs=1e-12)
    assert value >= -1e-15


def test_paired_estimator_is_zero_on_identical_lists():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(6, 3))
    assert float(mmd_unbiased(p, p.copy(), UNIT, paired=True)) == 0.0
    # 非配对估计在相同的非常数样本上为负
    assert float(mmd_unbiased(p, p.copy(), UNIT)) < 0.0


def test_paired_requires_equal_sizes():
    with pytest.raises(CdmError):
        mmd_unbiased(np.zeros((3, 1)), np.ones((4, 1)), UNIT, paired=True)


@given(st.integers(0, 10_000))
def test_mmd_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(5, 2))
    q = rng.normal(loc=0.5, size=(7, 2))
    for k in (UNIT, KernelSpec.mkmmd()):
        assert float(mmd_unbiased(p, q, k)) == pytest.approx(float(mmd_unbiased(q, p, k)), abs=1e-12)


def test_multi_kernel_is_weighted_sum_of_single_kernels():
    rng = np.random.default_rng(4)
    p = rng.normal(size=(8, 2))
    q = rng.normal(loc=1.0, size=(6, 2))
    k = KernelSpec(bandwidths=(0.5, 1.0, 2.0), weights=(0.2, 0.3, 0.5))
    combined = float(mmd_unbiased(p, q, k))
    parts = sum(w * float(mmd_unbiased(p, q, k.single(i))) for i, w in enumerate(k.resolved_weights))
    assert combined == pytest.approx(parts, abs=1e-12)


def test_mmd_input_checks():
    with pytest.raises(CdmError):
        mmd_unbiased([[0.0]], [[1.0], [2.0]], UNIT)
    with pytest.raises(CdmError):
        mmd_unbiased(np.zeros((3, 2)), np.zeros((3, 3)), UNIT)
    with pytest.raises(CdmError):
        kernel_matrix(t([[0.0]]), t([[1.0]]), KernelSpec.mkmmd())


def test_kernel_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec(bandwidths=(0.0,))
    with pytest.raises(ValueError):
        KernelSpec(bandwidths=(1.0, 2.0), weights=(0.7, 0.7))
    with pytest.raises(ValueError):
        KernelSpec(bandwidths=(1.0, 2.0), weights=(1.0,))
    assert KernelSpec.mkmmd().resolved_weights == pytest.approx((0.2,) * 5)


def test_median_heuristic():
    assert median_pairwise_distance(t([[0.0], [3.0], [4.0]])) == pytest.approx(3.0)
    assert median_pairwise_distance(t([[1.0], [1.0]])) == 1.0
    resolved = resolve_kernel(KernelSpec.mkmmd(), t([[0.0], [3.0], [4.0]]))
    assert not resolved.relative
    assert resolved.bandwidths == pytest.approx((0.75, 1.5, 3.0, 6.0, 12.0))


def test_mmd_gradient_is_finite_on_coincident_points():
    p = t([[0.5, 0.5], [0.5, 0.5]]).requires_grad_(True)
    q = t([[0.5, 0.5], [1.0, 0.0]])
    (grad,) = torch.autograd.grad(mmd_unbiased(p, q, KernelSpec.mkmmd()), [p])
    assert torch.isfinite(grad).all()


@pytest.mark.slow
def test_mmd_is_unbiased_on_same_distribution():
    rng = np.random.default_rng(123)
    values = []
    for _ in range(200):
        p = rng.normal(size=(500, 2))
        q = rng.normal(size=(500, 2))
        values.append(float(mmd_unbiased(p, q, UNIT)))
    mean = np.mean(values)
    stderr = np.std(values, ddof=1) / math.sqrt(len(values))
    assert abs(mean) <= 3 * stderr


def test_group_representations():
    reps = t([[0.0], [1.0], [2.0], [3.0]])
    grouped = group_representations(reps, [0, 1, 0, 1], [1, 1, 2, 2])
    assert sorted(grouped.groups) == [(0, 1), (0, 2), (1, 1), (1, 2)]
    torch.testing.assert_close(grouped.get(1, 2), t([[3.0]]))
    assert grouped.labels == [0, 1] and grouped.env_ids == [1, 2]


def test_grouped_representations_dimension_check():
    with pytest.raises(CdmError):
        GroupedRepresentations({(0, 1): t([[0.0]]), (0, 2): t([[0.0, 1.0]])})


def test_cdm_penalty_two_envs_one_class_counts_pair_twice():
    g1 = t([[0.0], [0.4], [1.0]])
    g2 = t([[1.5], [2.0]])
    grouped = GroupedRepresentations({(1, 1): g1, (1, 2): g2})
    pair = float(mmd_unbiased(g1, g2, UNIT))
    assert float(cdm_mmd_penalty(grouped, UNIT)) == pytest.approx(2 * pair, abs=1e-12)
    assert float(cdm_mmd_penalty(grouped, UNIT, normalized=True)) == pytest.approx(pair, abs=1e-12)


def test_cdm_penalty_identical_point_mass_groups_is_zero():
    same = t([[0.2, 0.1], [0.2, 0.1]])
    grouped = GroupedRepresentations({(y, e): same.clone() for y in (0, 1) for e in (1, 2)})
    assert float(cdm_mmd_penalty(grouped, KernelSpec.mkmmd())) == 0.0


def test_cdm_penalty_single_env_is_zero():
    grouped = GroupedRepresentations({(0, 1): t([[0.0], [1.0]]), (1, 1): t([[2.0], [3.0]])})
    assert float(cdm_mmd_penalty(grouped, UNIT)) == 0.0


def test_cdm_penalty_skips_undersized_groups():
    grouped = GroupedRepresentations({
        (1, 1): t([[0.0], [1.0]]),
        (1, 2): t([[2.0]]),
        (0, 1): t([[0.0], [0.5]]),
        (0, 2): t([[1.0], [1.5]]),
    })
    value = float(cdm_mmd_penalty(grouped, UNIT))
    expected = 2 * float(mmd_unbiased(t([[0.0], [0.5]]), t([[1.0], [1.5]]), UNIT))
    assert value == pytest.approx(expected, abs=1e-12)

    tiny = GroupedRepresentations({(1, 1): t([[0.0]]), (1, 2): t([[2.0]])})
    with pytest.raises(CdmError):
        cdm_mmd_penalty(tiny, UNIT)


def pairwise_penalty(grouped, kernel, normalized=False):
    kernel = resolve_kernel(kernel, grouped.pooled())
    total = 0.0
    for y in grouped.labels:
        envs = [e for e in grouped.env_ids if grouped.get(y, e) is not None]
        for i, e in enumerate(envs):
            for j, other in enumerate(envs):
                if i != j and not (normalized and j < i):
                    total += float(mmd_unbiased(grouped.get(y, e), grouped.get(y, other), kernel))
    return total


@given(st.integers(0, 2 ** 16), st.booleans())
def test_cdm_penalty_matches_pairwise_mmd(seed, normalized):
    rng = np.random.default_rng(seed)
    grouped = GroupedRepresentations({
        (y, e): torch.as_tensor(rng.normal(loc=0.3 * e, size=(int(rng.integers(2, 9)), 3)))
        for y in (0, 1) for e in (1, 2, 3)
    })
    for kernel in (UNIT, KernelSpec.mkmmd()):
        expected = pairwise_penalty(grouped, kernel, normalized)
        assert float(cdm_mmd_penalty(grouped, kernel, normalized)) == pytest.approx(expected, abs=1e-9)


def test_cdm_penalty_group_cap_keeps_leading_rows():
    rng = np.random.default_rng(11)
    g1 = torch.as_tensor(rng.normal(size=(40, 2)))
    g2 = torch.as_tensor(rng.normal(loc=1.0, size=(30, 2)))
    capped = cdm_mmd_penalty(GroupedRepresentations({(1, 1): g1, (1, 2): g2}), UNIT, max_group_size=8)
    truncated = cdm_mmd_penalty(GroupedRepresentations({(1, 1): g1[:8], (1, 2): g2[:8]}), UNIT)
    assert float(capped) == pytest.approx(float(truncated), abs=1e-12)
    with pytest.raises(CdmError):
        cdm_mmd_penalty(GroupedRepresentations({(1, 1): g1, (1, 2): g2}), UNIT, max_group_size=1)


def test_cdm_penalty_gradient_flows_through_stacked_kernel():
    rng = np.random.default_rng(2)
    z = torch.as_tensor(rng.normal(size=(12, 2)), dtype=torch.float64).requires_grad_(True)
    grouped = group_representations(z, [0, 1] * 6, [1] * 6 + [2] * 6)
    cdm_mmd_penalty(grouped, KernelSpec.mkmmd()).backward()
    assert torch.isfinite(z.grad).all()
    assert float(z.grad.abs().sum()) > 0.0


def test_cdm_penalty_permutation_invariant():
    rng = np.random.default_rng(7)
    g1 = torch.as_tensor(rng.normal(size=(6, 2)))
    g2 = torch.as_tensor(rng.normal(size=(5, 2)))
    a = cdm_mmd_penalty(GroupedRepresentations({(1, 1): g1, (1, 2): g2}), KernelSpec.mkmmd())
    b = cdm_mmd_penalty(GroupedRepresentations({(1, 1): g1.flip(0), (1, 2): g2[[3, 1, 4, 0, 2]]}),
                        KernelSpec.mkmmd())
    assert float(a) == pytest.approx(float(b), abs=1e-12)


def test_gamma_from_balanced_batch():
    g = gamma_from_batch([0, 1, 0, 1], [1, 1, 2, 2])
    assert g.table == {(1, 0): 0.25, (1, 1): 0.25, (2, 0): 0.25, (2, 1): 0.25}
    with pytest.raises(CdmError):
        gamma_from_batch([], [])


def test_gamma_weights_on_plus_dataset(plus_09):
    ds = make_dataset(plus_09, n_per_env=20000, seed=5)
    g = gamma_weights(ds)
    assert g.get(1, 1) == pytest.approx(0.45, abs=0.01)
    assert g.get(2, 1) == pytest.approx(0.05, abs=0.01)
    assert g.total() == pytest.approx(1.0)
    assert g.get(3, 1) == 0.0


def test_uniform_discriminator_gives_minus_ln2():
    rng = np.random.default_rng(1)
    grouped = group_representations(torch.as_tensor(rng.normal(size=(8, 3))),
                                    [0, 1] * 4, [1, 1, 2, 2] * 2)
    g = gamma_from_batch([0, 1] * 4, [1, 1, 2, 2] * 2)
    assert float(acdm_discriminator_loss(grouped, uniform_discriminator, g)) == pytest.approx(-math.log(2))
    assert float(acdm_generator_penalty(grouped, uniform_discriminator, g)) == pytest.approx(-math.log(2))


def test_perfect_discriminator_gives_zero():
    grouped = GroupedRepresentations({(1, 1): t([[1.0], [1.0]]), (1, 2): t([[-1.0], [-1.0]])})

    def oracle(z, y):
        first = (z[:, 0] > 0).double()
        return torch.stack([first, 1.0 - first], dim=1)

    g = GammaWeights({(1, 1): 0.5, (2, 1): 0.5})
    assert float(acdm_discriminator_loss(grouped, oracle, g)) == pytest.approx(0.0, abs=1e-12)


def test_bayes_discriminator_on_identical_groups():
    z = t([[0.0], [1.0]])
    grouped = GroupedRepresentations({(y, e): z.clone() for y in (0, 1) for e in (1, 2)})
    g = GammaWeights({(1, 1): 0.45, (1, 0): 0.05, (2, 1): 0.05, (2, 0): 0.45})

    def bayes(z, y):
        p1 = torch.where(y == 1, 0.9, 0.1).double()
        return torch.stack([p1, 1.0 - p1], dim=1)

    expected = 0.9 * math.log(0.9) + 0.1 * math.log(0.1)
    assert float(acdm_discriminator_loss(grouped, bayes, g)) == pytest.approx(expected)


def test_generator_penalty_drops_when_groups_coincide():
    def fixed(z, y):
        p1 = torch.sigmoid(4.0 * z[:, 0])
        return torch.stack([p1, 1.0 - p1], dim=1)

    g = GammaWeights({(1, 1): 0.5, (2, 1): 0.5})
    apart = GroupedRepresentations({(1, 1): t([[1.0], [1.0]]), (1, 2): t([[-1.0], [-1.0]])})
    together = GroupedRepresentations({(1, 1): t([[1.0], [1.0]]), (1, 2): t([[1.0], [1.0]])})
    assert float(acdm_generator_penalty(together, fixed, g)) < float(acdm_generator_penalty(apart, fixed, g))


def test_discriminator_outputs_simplex_and_loss_is_nonpositive():
    gen = torch.Generator().manual_seed(0)
    D = ConditionalDiscriminator(rep_dim=3, n_envs=2, hidden_size=8, generator=gen)
    z = torch.randn(10, 3, generator=gen, dtype=torch.float64)
    y = torch.tensor([0, 1] * 5)
    probs = D(z, y)
    assert probs.shape == (10, 2)
    torch.testing.assert_close(probs.sum(dim=1), torch.ones(10, dtype=torch.float64))
    grouped = group_representations(z, y, [1] * 5 + [2] * 5)
    g = gamma_from_batch(y.numpy(), [1] * 5 + [2] * 5)
    assert float(acdm_discriminator_loss(grouped, D, g)) <= 0.0


def test_discriminator_needs_two_envs():
    with pytest.raises(CdmError):
        ConditionalDiscriminator(rep_dim=2, n_envs=1)
