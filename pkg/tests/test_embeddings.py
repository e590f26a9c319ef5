import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from musaudit import embeddings as em
from musaudit.errors import CorruptionError, DimensionError, FormatError, ValidationError

from oracles import count_histogram


def _manifest(n_member, n_nonmember, gid="g"):
    recs = []
    for label, n in (("m", n_member), ("n", n_nonmember)):
        for i in range(n):
            pid = f"{gid}-{label}{i}"
            orig, gen = ("member", "gen_member") if label == "m" else ("nonmember", "gen_nonmember")
            recs.append(em.ManifestRecord(f"{pid}-o", gid, orig, pid, f"/a/{pid}-o.wav", 10.0))
            recs.append(em.ManifestRecord(f"{pid}-g", gid, gen, pid, f"/a/{pid}-g.wav", 10.0))
    return recs


def _embeddings(manifest, shape=(4,), seed=0):
    rng = np.random.default_rng(seed)
    return {r.item_id: em.AggregatedEmbedding(rng.standard_normal(shape), "x") for r in manifest}


# -- MAUD -------------------------------------------------------------------


def test_maud_round_trip_distinct_values(tmp_path):
    a = np.arange(24, dtype=np.float32).reshape(2, 3, 4) / 7
    em.write_maud(tmp_path / "a.maud", a)
    raw = em.read_tensor_file(tmp_path / "a.maud")
    assert raw.kind == "layered_hidden"
    assert raw.payload.shape == (2, 3, 4)
    np.testing.assert_array_equal(raw.payload, a)


def test_maud_header_layout():
    buf = em.encode_maud(np.array([[1, 2, 3]], dtype=np.uint32), vocab_size=1024)
    assert buf[:4] == b"MAUD"
    assert buf[4:8] == bytes([1, 0, 1, 2])  # version 1, dtype u32, ndim 2
    assert buf[8:16] == bytes([1, 0, 0, 0, 3, 0, 0, 0])
    assert buf[-4:] == (1024).to_bytes(4, "little")
    assert len(buf) == 8 + 8 + 12 + 4


def test_truncated_payload_is_corruption_with_counts():
    buf = em.encode_maud(np.ones((3, 5), dtype=np.float32))
    with pytest.raises(CorruptionError, match="expected 76 bytes, got 71"):
        em.decode_maud(buf[:-5])


def test_bad_magic_and_version():
    buf = em.encode_maud(np.ones(3))
    with pytest.raises(FormatError, match="magic"):
        em.decode_maud(b"MAUX" + buf[4:])
    with pytest.raises(FormatError, match="version"):
        em.decode_maud(buf[:4] + b"\x02\x00" + buf[6:])


def test_dim_product_overflow_is_corruption():
    header = b"MAUD" + bytes([1, 0, 0, 4]) + (0xFFFFFFFF).to_bytes(4, "little") * 4
    with pytest.raises(CorruptionError):
        em.decode_maud(header + bytes(16))


def test_codes_file_is_codebook_kind(tmp_path):
    codes = np.random.default_rng(0).integers(0, 1024, size=(9, 50)).astype(np.uint32)
    em.write_maud(tmp_path / "c.maud", codes, vocab_size=1024)
    raw = em.read_tensor_file(tmp_path / "c.maud")
    assert raw.kind == "codebook_codes" and raw.vocab_size == 1024


def test_invalid_codes_are_rejected_on_read(tmp_path):
    codes = np.zeros((2, 4), dtype=np.uint32)
    codes[1, 3] = 8
    em.write_maud(tmp_path / "c.maud", codes, vocab_size=8)
    with pytest.raises(ValidationError, match=r"code 8 at codebook q=1, t=3"):
        em.read_tensor_file(tmp_path / "c.maud")


def test_float_2d_is_not_a_raw_output(tmp_path):
    em.write_maud(tmp_path / "m.maud", np.ones((2, 2)))
    with pytest.raises(FormatError):
        em.read_tensor_file(tmp_path / "m.maud")


@settings(max_examples=60, deadline=None)
@given(
    shape=st.lists(st.integers(1, 5), min_size=1, max_size=4),
    codes=st.booleans(),
    seed=st.integers(0, 2**32 - 1),
)
def test_maud_bytes_round_trip(shape, codes, seed):
    rng = np.random.default_rng(seed)
    if codes:
        vocab = int(rng.integers(1, 5000))
        a = rng.integers(0, vocab, size=shape).astype(np.uint32)
    else:
        vocab = None
        a = rng.standard_normal(shape).astype(np.float32)
    buf = em.encode_maud(a, vocab)
    back, v = em.decode_maud(buf)
    assert v == vocab
    assert em.encode_maud(back, v) == buf


def test_write_tensor_file_reproduces_bytes(tmp_path):
    src = tmp_path / "a.maud"
    em.write_maud(src, np.random.default_rng(1).standard_normal((2, 7, 3)))
    em.write_tensor_file(tmp_path / "b.maud", em.read_tensor_file(src))
    assert (tmp_path / "b.maud").read_bytes() == src.read_bytes()


# -- aggregation ------------------------------------------------------------


def test_mean_over_time_constant_series():
    payload = np.tile(np.array([1.0, 2.0, 3.0])[None, :, None], (2, 1, 4))
    out = em.aggregate_mean_over_time(em.RawEncoderOutput("layered_hidden", payload))
    assert out.shape == (2, 4) and np.all(out.values == 2.0)


def test_mean_over_time_single_frame_is_identity():
    payload = np.random.default_rng(2).standard_normal((3, 1, 5))
    out = em.aggregate_mean_over_time(em.RawEncoderOutput("layered_hidden", payload))
    np.testing.assert_array_equal(out.values, payload[:, 0, :])


def test_mean_over_time_matches_direct_mean():
    payload = np.random.default_rng(3).standard_normal((2, 5, 3))
    out = em.aggregate_mean_over_time(em.RawEncoderOutput("layered_hidden", payload)).values
    for l in range(2):
        for d in range(3):
            assert abs(out[l, d] - sum(payload[l, t, d] for t in range(5)) / 5) < 1e-12


@settings(max_examples=40, deadline=None)
@given(l=st.integers(1, 4), t=st.integers(1, 20), d=st.integers(1, 6), seed=st.integers(0, 2**32 - 1))
def test_mean_over_time_permutation_and_scaling(l, t, d, seed):
    rng = np.random.default_rng(seed)
    payload = rng.standard_normal((l, t, d))
    base = em.aggregate_mean_over_time(em.RawEncoderOutput("layered_hidden", payload)).values
    perm = payload[:, rng.permutation(t), :]
    np.testing.assert_allclose(em.aggregate_mean_over_time(em.RawEncoderOutput("layered_hidden", perm)).values, base, atol=1e-12)
    scaled = em.aggregate_mean_over_time(em.RawEncoderOutput("layered_hidden", 3.5 * payload)).values
    np.testing.assert_allclose(scaled, 3.5 * base, atol=1e-12)


def test_histogram_counting_example():
    raw = em.RawEncoderOutput("codebook_codes", np.array([[0, 1, 1, 3]]), 4)
    assert em.aggregate_codebook_histogram(raw).values.tolist() == [0.25, 0.5, 0.0, 0.25]


def test_histogram_constant_codes_are_one_hot():
    raw = em.RawEncoderOutput("codebook_codes", np.full((3, 9), 5), 8)
    out = em.aggregate_codebook_histogram(raw).values.reshape(3, 8)
    assert np.all(out[:, 5] == 1.0) and out.sum() == 3.0


def test_histogram_matches_brute_force_counting():
    codes = np.random.default_rng(4).integers(0, 8, size=(2, 37))
    out = em.aggregate_codebook_histogram(em.RawEncoderOutput("codebook_codes", codes, 8)).values
    assert np.array_equal(out, count_histogram(codes.tolist(), 8))


@settings(max_examples=40, deadline=None)
@given(n_q=st.integers(1, 6), t=st.integers(1, 60), vocab=st.integers(1, 40), seed=st.integers(0, 2**32 - 1))
def test_histogram_blocks_and_permutation(n_q, t, vocab, seed):
    rng = np.random.default_rng(seed)
    codes = rng.integers(0, vocab, size=(n_q, t))
    out = em.aggregate_codebook_histogram(em.RawEncoderOutput("codebook_codes", codes, vocab)).values
    assert np.array_equal(out, count_histogram(codes.tolist(), vocab))
    assert np.all(np.abs(out.reshape(n_q, vocab).sum(axis=1) - 1.0) <= 1e-12)
    shuffled = codes[:, rng.permutation(t)]
    again = em.aggregate_codebook_histogram(em.RawEncoderOutput("codebook_codes", shuffled, vocab)).values
    assert np.array_equal(out, again)


def test_identity_passes_values_and_rejects_nan():
    v = np.random.default_rng(5).standard_normal(512)
    out = em.aggregate_identity(em.RawEncoderOutput("global_vector", v))
    np.testing.assert_array_equal(out.values, v)
    assert out.form == "vector" and out.shape == (512,)
    bad = v.copy()
    bad[17] = np.nan
    with pytest.raises(ValidationError, match=r"\(17,\)"):
        em.aggregate_identity(em.RawEncoderOutput("global_vector", bad))


def test_aggregate_dispatch_and_kind_checks():
    raw = em.RawEncoderOutput("global_vector", np.ones(3))
    assert em.aggregate(raw, "identity", "clap").encoder_id == "clap"
    with pytest.raises(ValidationError):
        em.aggregate(raw, "mean_over_time", "x")
    with pytest.raises(ValidationError):
        em.aggregate(raw, "max_pool", "x")
    with pytest.raises(DimensionError):
        em.RawEncoderOutput("layered_hidden", np.ones((2, 2)))


# -- manifest and pairs -----------------------------------------------------


def test_build_pairs_labels_and_order():
    man = _manifest(2, 2)
    pairs = em.build_pairs(man, _embeddings(man))
    assert [p.label for p in pairs] == [1, 1, 0, 0]
    emb = _embeddings(man)
    p = em.build_pairs(man, emb)[0]
    assert p.original is emb["g-m0-o"] and p.generation is emb["g-m0-g"]


def test_generation_listed_first_still_pairs_in_order():
    man = _manifest(1, 1)
    man = [man[1], man[0], man[3], man[2]]
    emb = _embeddings(man)
    p = em.build_pairs(man, emb)[0]
    assert p.original is emb["g-m0-o"]


def test_orphan_item_is_rejected():
    man = _manifest(2, 1)[:-1]
    with pytest.raises(ValidationError, match="g-n0"):
        em.build_pairs(man, _embeddings(man))


def test_role_disagreement_is_rejected():
    man = _manifest(1, 0)
    man[1] = em.ManifestRecord(man[1].item_id, "g", "gen_nonmember", man[1].pair_id, "", 1.0)
    with pytest.raises(ValidationError, match="disagree"):
        em.validate_manifest(man)


def test_missing_embeddings_are_listed():
    man = _manifest(2, 0)
    emb = _embeddings(man)
    del emb["g-m1-g"], emb["g-m0-o"]
    with pytest.raises(ValidationError, match="g-m0-o.*g-m1-g"):
        em.build_pairs(man, emb)


def test_mixed_forms_are_rejected():
    man = _manifest(1, 1)
    emb = _embeddings(man)
    emb["g-n0-g"] = em.AggregatedEmbedding(np.ones((2, 2)))
    with pytest.raises(ValidationError, match="mixed"):
        em.build_pairs(man, emb)


def test_shadow_dataset_size():
    man = _manifest(995, 995)
    pairs = em.build_pairs(man, _embeddings(man, shape=(2,)))
    assert len(pairs) == 1990
    assert sum(p.label for p in pairs) == 995


@settings(max_examples=20, deadline=None)
@given(n_m=st.integers(0, 12), n_n=st.integers(0, 12))
def test_pair_count_and_member_fraction(n_m, n_n):
    man = _manifest(n_m, n_n)
    pairs = em.build_pairs(man, _embeddings(man))
    assert len(pairs) == len({r.pair_id for r in man})
    originals = [r for r in man if r.role in ("member", "nonmember")]
    assert sum(p.label for p in pairs) == sum(r.role == "member" for r in originals)


def test_manifest_json_round_trip(tmp_path):
    man = _manifest(2, 1)
    man[0].caption = "a slow piano piece"
    em.save_manifest(tmp_path / "m.json", man)
    back = em.load_manifest(tmp_path / "m.json")
    assert back == man
    assert isinstance(json.loads((tmp_path / "m.json").read_text()), list)


def test_store_round_trip(tmp_path):
    man = _manifest(3, 3)
    emb = _embeddings(man, shape=(2, 3))
    meta = em.write_store(tmp_path / "s", man, emb, "enc", "mean_over_time")
    assert meta["form"] == "map" and meta["shape"] == [2, 3] and meta["n_items"] == 12
    meta2, pairs = em.load_store_pairs(tmp_path / "s")
    assert meta2 == meta
    assert len(pairs) == 6
    want = emb["g-m0-o"].values.astype(np.float32).astype(np.float64)
    np.testing.assert_array_equal(pairs[0].original.values, want)
