import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurostate.montage import (
    EmptyMontageError,
    MontageError,
    region_reduce,
    resolve_montage,
    state_prior,
)

# 62-channel ESI cap layout: the 60 template electrodes plus two
# cerebellar reference sites that the template deliberately excludes.
SEED_62 = None  # filled lazily from the template fixture


def seed_layout(template):
    names = list(template.channel_names)
    names.insert(names.index("O1"), "CB1")
    names.append("CB2")
    return names


def test_identity_match(template):
    mm = resolve_montage(list(template.channel_names))
    assert mm.template_indices.tolist() == list(range(60))
    assert mm.dropped == ()
    assert mm.n_regions == 24


def test_62_channel_layout_drops_references(template):
    mm = resolve_montage(seed_layout(template))
    assert mm.n_channels == 60
    assert sorted(mm.dropped) == ["CB1", "CB2"]
    assert sorted(mm.template_indices.tolist()) == list(range(60))


def test_unknown_name_maps_by_coordinates(template):
    # oracle: nearest neighbour over the raw coordinate table
    target = template.coords[7]
    dists = np.linalg.norm(template.coords - target, axis=1)
    assert int(np.argmin(dists)) == 7

    mm = resolve_montage(["XX1"], coords=target[None, :])
    assert mm.template_indices.tolist() == [7]
    assert mm.dropped == ()


def test_far_coordinates_are_dropped(template):
    good = template.coords[3]
    far = np.array([0.0, 0.0, -1.0])  # below the head, nothing within threshold
    with pytest.raises(EmptyMontageError):
        resolve_montage(["XX1"], coords=far[None, :])
    mm = resolve_montage(["XX1", "XX2"], coords=np.stack([good, far]))
    assert mm.dropped == ("XX2",)


def test_collision_closer_wins(template):
    # both inputs nearest to template slot 0; the exact-coordinate one wins
    a = template.coords[0]
    b = a + np.array([0.0, 0.0, 0.05])
    b = b / np.linalg.norm(b)
    mm = resolve_montage(["near", "exact"], coords=np.stack([b, a]))
    assert mm.channel_names == ("exact",)
    assert mm.dropped == ("near",)
    assert mm.template_indices.tolist() == [0]


def test_collision_tie_prefers_earlier_input(template):
    a = template.coords[5]
    mm = resolve_montage(["one", "two"], coords=np.stack([a, a]))
    assert mm.channel_names == ("one",)
    assert mm.dropped == ("two",)


def test_name_match_is_case_insensitive(template):
    mm = resolve_montage(["fp1", "Cz", "OZ"])
    expected = [template.channel_names.index(n) for n in ("FP1", "CZ", "OZ")]
    assert mm.template_indices.tolist() == expected


def test_duplicate_names_rejected():
    with pytest.raises(MontageError):
        resolve_montage(["CZ", "cz"])


def test_empty_input_rejected():
    with pytest.raises(MontageError):
        resolve_montage([])


def test_unmapped_without_coords(template):
    with pytest.raises(EmptyMontageError):
        resolve_montage(["NOPE1", "NOPE2"])


def test_state_prior_identity_gather(template):
    mm = resolve_montage(list(template.channel_names))
    np.testing.assert_array_equal(state_prior("affect", mm), template.state_priors["affect"])


def test_state_prior_motor_on_central_parietal(template):
    names = [
        n for n, r in zip(template.channel_names, template.region_of)
        if template.region_names[r].split("_")[0] in ("FC", "C", "CP", "P")
    ]
    mm = resolve_montage(names)
    assert np.all(state_prior("motor", mm) == 1.0)


def test_state_prior_others_uniform_half(template):
    mm = resolve_montage(["FP1", "CZ", "PO5", "O2"])
    np.testing.assert_array_equal(state_prior("others", mm), 0.5)


def test_state_prior_unknown_state(template):
    mm = resolve_montage(["CZ"])
    with pytest.raises(MontageError):
        state_prior("sleep", mm)


def test_region_reduce_single_member(template):
    mm = resolve_montage(["FT7"])  # sole member of its region
    feats = np.array([[1.5, -2.0, 3.0]])
    np.testing.assert_array_equal(region_reduce(mm, feats), feats)


def test_region_reduce_symmetric_cancellation(template):
    mm = resolve_montage(["O1", "OZ"])  # both in O_L
    a = np.array([2.0, -1.0, 0.5])
    out = region_reduce(mm, np.stack([a, -a]))
    np.testing.assert_array_equal(out, np.zeros((1, 3)))


def test_region_reduce_hand_mean(template):
    mm = resolve_montage(["C1", "C3", "C5"])  # one region, three members
    feats = np.array([[1.0, 2, 3], [3, 4, 5], [5, 6, 7]])
    np.testing.assert_allclose(region_reduce(mm, feats), [[3.0, 4.0, 5.0]])


def test_region_reduce_shape_error(template):
    mm = resolve_montage(["CZ", "PZ"])
    with pytest.raises(MontageError):
        region_reduce(mm, np.zeros((3, 4)))


@settings(max_examples=25, deadline=None)
@given(perm_seed=st.integers(0, 2**32 - 1), n=st.integers(2, 60))
def test_permutation_equivariance(perm_seed, n):
    from neurostate.montage import default_template

    template = default_template()
    rng = np.random.default_rng(perm_seed)
    names = list(rng.choice(template.channel_names, size=n, replace=False))
    feats = rng.normal(size=(n, 5))

    mm = resolve_montage(names)
    perm = rng.permutation(n)
    mm_p = resolve_montage([names[i] for i in perm])

    assert set(mm.template_indices.tolist()) == set(mm_p.template_indices.tolist())
    np.testing.assert_allclose(
        region_reduce(mm, feats),
        region_reduce(mm_p, feats[perm]),
        atol=1e-12,
    )


def test_resolution_is_idempotent(template):
    mm = resolve_montage(seed_layout(template))
    again = resolve_montage(list(mm.channel_names))
    np.testing.assert_array_equal(mm.template_indices, again.template_indices)
    assert again.dropped == ()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_region_reduce_is_linear(seed):
    from neurostate.montage import default_template

    template = default_template()
    rng = np.random.default_rng(seed)
    names = list(rng.choice(template.channel_names, size=12, replace=False))
    mm = resolve_montage(names)
    A = rng.normal(size=(12, 4))
    B = rng.normal(size=(12, 4))
    alpha, beta = rng.normal(size=2)
    np.testing.assert_allclose(
        region_reduce(mm, alpha * A + beta * B),
        alpha * region_reduce(mm, A) + beta * region_reduce(mm, B),
        atol=1e-10,
    )
