import numpy as np
import pytest

from musaudit.embeddings import build_pairs, encode_maud, manifest_json, validate_manifest
from musaudit.errors import ValidationError
from musaudit.synthworld import SUITE_IDS, SimGeneratorSpec, make_three_world_suite, sample_world


def _pairs(spec, n_m, n_n, seed):
    return build_pairs(*sample_world(spec, n_m, n_n, seed))


def _sq_dist(pairs):
    return np.array([np.sum((p.generation.values - p.original.values) ** 2) for p in pairs])


def test_spec_invariants():
    spec = SimGeneratorSpec("g", alignment_gap=1.0, member_noise=0.5)
    assert spec.nonmember_noise == 1.5 >= spec.member_noise
    assert spec.embedding_form == "vector"
    assert SimGeneratorSpec("g", embedding_shape=(3, 4)).embedding_form == "map"
    for bad in (dict(member_noise=0.0), dict(alignment_gap=-0.1), dict(clip_regime="medium")):
        with pytest.raises(ValidationError):
            SimGeneratorSpec("g", **bad)


def test_zero_gap_classes_share_one_distribution():
    spec = SimGeneratorSpec("g", alignment_gap=0.0)
    assert spec.nonmember_noise == spec.member_noise == spec.effective_nonmember_noise
    pairs = _pairs(spec, 2000, 2000, seed=3)
    d = _sq_dist(pairs)
    labels = np.array([p.label for p in pairs])
    m, n = d[labels == 1], d[labels == 0]
    # chi-square sums with the same scale: means agree to sampling error
    se = np.sqrt(m.var() / len(m) + n.var() / len(n))
    assert abs(m.mean() - n.mean()) < 4 * se


def test_same_seed_is_byte_identical():
    spec = SimGeneratorSpec("g", embedding_shape=(3, 5))
    a_man, a_emb = sample_world(spec, 20, 15, seed=9)
    b_man, b_emb = sample_world(spec, 20, 15, seed=9)
    assert manifest_json(a_man) == manifest_json(b_man)
    assert all(a_emb[k].values.tobytes() == b_emb[k].values.tobytes() for k in a_emb)
    _, c_emb = sample_world(spec, 20, 15, seed=10)
    assert any(not np.array_equal(a_emb[k].values, c_emb[k].values) for k in a_emb)


def test_manifest_is_valid_and_shaped():
    man, emb = sample_world(SimGeneratorSpec("g", clip_regime="short", regime_multiplier=3), 4, 3, 0)
    validate_manifest(man)
    assert len(man) == 14 and len(emb) == 14
    assert all(r.duration_s == 10.0 for r in man)
    pairs = build_pairs(man, emb)
    assert [p.label for p in pairs] == [1] * 4 + [0] * 3


def test_distance_threshold_separates_classes():
    pairs = _pairs(SimGeneratorSpec("g", alignment_gap=1.0, member_noise=0.5), 500, 500, seed=1)
    d = _sq_dist(pairs)
    labels = np.array([p.label for p in pairs])
    # sweep every observed distance as the threshold; members sit below it
    best = max(np.mean((d <= t) == (labels == 1)) for t in np.unique(d))
    assert best >= 0.90


@pytest.mark.parametrize("gap", [0.25, 1.0])
def test_member_pairs_are_closer_on_average(gap):
    pairs = _pairs(SimGeneratorSpec("g", alignment_gap=gap), 500, 500, seed=2)
    d = _sq_dist(pairs)
    labels = np.array([p.label for p in pairs])
    assert d[labels == 1].mean() < d[labels == 0].mean()


def test_three_world_suite():
    suite = make_three_world_suite(4, n_pairs_member=50, n_pairs_nonmember=50)
    assert tuple(s.generator_id for s in suite.specs) == SUITE_IDS
    offsets = [s.style_offset for s in suite.specs]
    assert all(not np.array_equal(offsets[i], offsets[j]) for i in range(3) for j in range(i + 1, 3))
    regimes = sorted(s.clip_regime for s in suite.specs)
    assert regimes == ["long", "long", "short"]
    for spec in suite.specs:
        assert spec.alignment_gap == 2 * spec.member_noise


def test_default_suite_pair_counts():
    suite = make_three_world_suite(0)
    for man, emb in suite.datasets.values():
        pairs = build_pairs(man, emb)
        assert len(pairs) == 2000
        assert sum(p.label for p in pairs) == 1000


def test_short_regime_has_larger_within_pair_variance():
    suite = make_three_world_suite(5, n_pairs_member=500, n_pairs_nonmember=500)
    var = {}
    for gid, (man, emb) in suite.datasets.items():
        diffs = np.stack([p.generation.values - p.original.values for p in build_pairs(man, emb)])
        var[gid] = diffs.var()
    short = next(s.generator_id for s in suite.specs if s.clip_regime == "short")
    for gid in var:
        if gid != short:
            assert var[short] / var[gid] > 1


def test_map_form_suite_serializes():
    suite = make_three_world_suite(6, n_pairs_member=3, n_pairs_nonmember=3, embedding_shape=(4, 6))
    man, emb = suite.datasets["gen_a"]
    assert emb[man[0].item_id].shape == (4, 6)
    assert encode_maud(emb[man[0].item_id].values)[:4] == b"MAUD"
