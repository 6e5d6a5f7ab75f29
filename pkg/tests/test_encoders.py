"""Provider determinism, planted structure, and the TEF1 file format."""

import numpy as np
import pytest

from tema import autodiff as ad
from tema.encoders import (
    EncoderConfig,
    FeatureBundle,
    SyntheticEncoder,
    encode_image,
    encode_target_pair,
    encode_text,
    load_embedding_file,
    planted_mix,
    project_local,
    write_embedding_file,
)
from tema.errors import BadMagic, CorruptRecord, VersionMismatch

CFG = EncoderConfig(dim=64, local_count=4, seed=3)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(dim=4)
    with pytest.raises(ValueError):
        EncoderConfig(local_count=0)


def test_image_encoding_deterministic_and_unit_norm():
    a = encode_image("img-1", CFG)
    b = encode_image("img-1", CFG)
    np.testing.assert_array_equal(a.global_vec, b.global_vec)
    np.testing.assert_array_equal(a.local, b.local)
    assert abs(np.linalg.norm(a.global_vec) - 1.0) < 1e-12
    np.testing.assert_allclose(np.linalg.norm(a.local, axis=1), np.ones(4), atol=1e-12)


def test_different_seeds_decorrelate():
    cfg_a = EncoderConfig(dim=256, local_count=2, seed=0)
    cfg_b = EncoderConfig(dim=256, local_count=2, seed=1)
    below = 0
    for i in range(1000):
        u = encode_image(f"id{i}", cfg_a).global_vec
        v = encode_image(f"id{i}", cfg_b).global_vec
        if abs((u @ v.T).item()) < 0.5:
            below += 1
    assert below >= 990


def test_text_digest_is_order_insensitive():
    a = encode_text("red dress", CFG)
    b = encode_text("dress red", CFG)
    np.testing.assert_array_equal(a.global_vec, b.global_vec)


def test_text_stopwords_do_not_change_global():
    a = encode_text("shorten the sleeves", CFG)
    b = encode_text("shorten the sleeves please", CFG)
    np.testing.assert_array_equal(a.global_vec, b.global_vec)


def test_text_local_rows_zero_padded():
    bundle = encode_text("sleeves belt", CFG)  # two content tokens, C = 4
    assert np.linalg.norm(bundle.local[0]) > 0
    assert np.linalg.norm(bundle.local[1]) > 0
    np.testing.assert_array_equal(bundle.local[2:], np.zeros((2, 64)))


def test_planted_mix_closed_form_cosine():
    # orthogonal reference and text directions: cos(target, ref) = 0.6/sqrt(0.52)
    dim = 8
    ref = np.eye(dim)[:1]
    text = np.eye(dim)[1:2]
    target = planted_mix(ref, text)
    assert (target @ ref.T).item() == pytest.approx(0.6 / np.sqrt(0.52), abs=1e-12)


def test_planted_target_leans_toward_reference_and_text():
    cfg = EncoderConfig(dim=256, local_count=2, seed=5, plant_structure=True)
    target = encode_target_pair("ref-1", "shorten the sleeves", cfg)
    ref = encode_image("ref-1", cfg)
    text = encode_text("shorten the sleeves", cfg)
    expected = 0.6 / np.sqrt(0.52)
    assert (target.global_vec @ ref.global_vec.T).item() == pytest.approx(expected, abs=0.05)
    assert (target.global_vec @ text.global_vec.T).item() > 0.3


def test_planted_target_determinism_and_sensitivity():
    cfg = EncoderConfig(dim=64, local_count=2, seed=5, plant_structure=True)
    a = encode_target_pair("ref-1", "shorten the sleeves", cfg)
    b = encode_target_pair("ref-1", "shorten the sleeves", cfg)
    c = encode_target_pair("ref-1", "shorten the collars", cfg)
    np.testing.assert_array_equal(a.global_vec, b.global_vec)
    assert not np.array_equal(a.global_vec, c.global_vec)


def test_planted_targets_beat_random_distractors():
    # each target must be cosine-closer to its own composition than to at
    # least 95% of other targets
    cfg = EncoderConfig(dim=256, local_count=2, seed=9, plant_structure=True)
    n = 1000
    texts = [f"shorten the sleeves variant {i} belt collar" for i in range(n)]
    targets = np.vstack(
        [encode_target_pair(f"r{i}", texts[i], cfg).global_vec for i in range(n)]
    )
    wins = 0
    own = np.ones(n)  # cosine to own composition is 1 by construction
    for i in range(0, n, 25):
        distractors = targets @ targets[i]
        distractors[i] = -np.inf
        if (distractors < own[i]).mean() >= 0.95:
            wins += 1
    assert wins == len(range(0, n, 25))


def test_synthetic_encoder_routes_planted_ids():
    cfg = EncoderConfig(dim=64, local_count=2, seed=1, plant_structure=True)
    enc = SyntheticEncoder(cfg, planted={"tgt-1": ("ref-1", "shorten the sleeves")})
    direct = encode_target_pair("ref-1", "shorten the sleeves", cfg)
    np.testing.assert_array_equal(enc.encode_image("tgt-1").global_vec, direct.global_vec)
    plain = enc.encode_image("other")
    np.testing.assert_array_equal(plain.global_vec, encode_image("other", cfg).global_vec)


def test_fixed_embeddings_provider(tmp_path):
    from tema.encoders import FixedEmbeddings
    from tema.errors import ProviderFailure

    path = tmp_path / "emb.tef1"
    write_embedding_file(path, _bundles())
    provider = FixedEmbeddings(images=load_embedding_file(path))
    assert provider.encode_image("id0").dim == 64
    with pytest.raises(ProviderFailure):
        provider.encode_image("missing")
    with pytest.raises(ProviderFailure):
        provider.encode_text("no texts were loaded")


def test_project_local_identity_zero_and_gradient():
    rng = np.random.default_rng(0)
    local = ad.constant(rng.standard_normal((3, 4)))
    w_id = ad.constant(np.eye(4))
    zero_b = ad.constant(np.zeros((1, 4)))
    np.testing.assert_array_equal(project_local(local, w_id, zero_b).value, local.value)

    bias = ad.parameter(rng.standard_normal((1, 4)))
    zeros = ad.constant(np.zeros((2, 4)))
    np.testing.assert_array_equal(
        project_local(zeros, w_id, bias).value, np.broadcast_to(bias.value, (2, 4))
    )

    w = ad.parameter(rng.standard_normal((4, 5)))
    b = ad.parameter(rng.standard_normal((1, 5)))
    probe = ad.constant(rng.standard_normal((3, 5)))
    x = ad.parameter(rng.standard_normal((3, 4)))
    report = ad.finite_difference_check(
        lambda: ad.sum_all(ad.mul(project_local(x, w, b), probe)), [x, w, b], tol=1e-6
    )
    assert report.passed, report.format()


# ------------------------------------------------------------------- TEF1


def _bundles(cfg=CFG, n=3):
    return {f"id{i}": encode_image(f"id{i}", cfg) for i in range(n)}


def test_tef1_file_bytes_roundtrip(tmp_path):
    path = tmp_path / "emb.tef1"
    bundles = _bundles()
    write_embedding_file(path, bundles)
    first = path.read_bytes()
    loaded = load_embedding_file(path)
    write_embedding_file(path, loaded)
    assert path.read_bytes() == first


def test_tef1_loaded_values_are_exact_widened_f32(tmp_path):
    path = tmp_path / "emb.tef1"
    bundles = _bundles()
    write_embedding_file(path, bundles)
    loaded = load_embedding_file(path)
    assert sorted(loaded) == sorted(bundles)
    for key, bundle in bundles.items():
        np.testing.assert_array_equal(
            loaded[key].global_vec, bundle.global_vec.astype(np.float32).astype(np.float64)
        )
        np.testing.assert_array_equal(
            loaded[key].local, bundle.local.astype(np.float32).astype(np.float64)
        )


def test_tef1_f32_exact_bundles_roundtrip_equal(tmp_path):
    # values already on the f32 grid survive write -> load unchanged
    path = tmp_path / "emb.tef1"
    rng = np.random.default_rng(2)
    bundles = {
        f"id{i}": FeatureBundle(
            global_vec=rng.standard_normal((1, 8)).astype(np.float32).astype(np.float64),
            local=rng.standard_normal((2, 8)).astype(np.float32).astype(np.float64),
        )
        for i in range(3)
    }
    write_embedding_file(path, bundles)
    loaded = load_embedding_file(path)
    for key in bundles:
        np.testing.assert_array_equal(loaded[key].global_vec, bundles[key].global_vec)
        np.testing.assert_array_equal(loaded[key].local, bundles[key].local)


def test_tef1_truncated_file(tmp_path):
    path = tmp_path / "emb.tef1"
    write_embedding_file(path, _bundles())
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 7])
    with pytest.raises(CorruptRecord):
        load_embedding_file(path)


def test_tef1_bad_magic(tmp_path):
    path = tmp_path / "emb.tef1"
    write_embedding_file(path, _bundles())
    data = path.read_bytes()
    path.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(BadMagic):
        load_embedding_file(path)


def test_tef1_version_mismatch(tmp_path):
    path = tmp_path / "emb.tef1"
    write_embedding_file(path, _bundles())
    data = bytearray(path.read_bytes())
    data[4] = 99
    path.write_bytes(bytes(data))
    with pytest.raises(VersionMismatch):
        load_embedding_file(path)


def test_tef1_trailing_garbage(tmp_path):
    path = tmp_path / "emb.tef1"
    write_embedding_file(path, _bundles())
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(CorruptRecord):
        load_embedding_file(path)
