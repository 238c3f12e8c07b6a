"""Stub embedding, BTXE files, FiLM modulation and the fusion gate."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avbev import autodiff as ad
from avbev.autodiff import Tensor, grad_check
from avbev.geometry import BevGrid, BevGridSpec
from avbev.textfusion import (BtxeFormatError, FilmMlp, FilmParams, FusionGate,
                              TextEmbedding, load_embeddings, modulate,
                              stub_embed, tokenize, weighted_fuse,
                              write_embeddings)

SPEC = BevGridSpec(extent=8.0, resolution=0.5)   # 16x16


def _grid(seed, channels=4):
    rng = np.random.default_rng(seed)
    n = SPEC.cells_per_side
    return BevGrid(Tensor(rng.standard_normal((channels, n, n))), SPEC)


# ---------------------------------------------------------------------------
# stub embedder
# ---------------------------------------------------------------------------

def test_stub_deterministic():
    a = stub_embed("two vehicles ahead; light is red")
    b = stub_embed("two vehicles ahead; light is red")
    assert np.array_equal(a.vector, b.vector)


def test_stub_unit_norm():
    # the canonical vector is float32-valued so a BTXE round trip is
    # bit-exact; norm error is then bounded by f32 rounding, not 1e-9
    v = stub_embed("ego going straight").vector
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-6)
    assert np.array_equal(v, v.astype(np.float32).astype(np.float64))


def test_stub_rejects_empty():
    with pytest.raises(ValueError):
        stub_embed("")
    with pytest.raises(ValueError):
        stub_embed("!!! ...")


def test_stub_token_multiset_sensitivity():
    assert not np.array_equal(stub_embed("red light").vector,
                              stub_embed("green light").vector)
    # order-insensitive by construction (token multiset)
    assert np.array_equal(stub_embed("red light").vector,
                          stub_embed("light red").vector)


def test_stub_truncates_at_77_tokens():
    long = " ".join(f"tok{i}" for i in range(120))
    short = " ".join(f"tok{i}" for i in range(77))
    assert np.array_equal(stub_embed(long).vector, stub_embed(short).vector)


def test_overlapping_tokens_more_similar_monte_carlo():
    # Monte Carlo over the stub's construction: shared-token pairs must be
    # more aligned on average than disjoint-token pairs
    rng = np.random.default_rng(0)
    vocab = [f"word{i}" for i in range(60)]
    overlap, disjoint = [], []
    for _ in range(100):
        words = rng.choice(vocab, size=9, replace=False)
        a = " ".join(words[:6])
        b_overlap = " ".join(np.concatenate([words[:3], words[6:9]]))
        b_disjoint = " ".join(words[3:9][3:])   # words 6..8 only
        b_disjoint = " ".join(words[6:9])
        va = stub_embed(a).vector
        overlap.append(float(va @ stub_embed(b_overlap).vector))
        disjoint.append(float(va @ stub_embed(b_disjoint).vector))
    assert np.mean(overlap) > np.mean(disjoint)


def test_tokenize_lowercases_and_strips():
    assert tokenize("Ego going STRAIGHT; 3 vehicles!") == \
        ["ego", "going", "straight", "3", "vehicles"]


# ---------------------------------------------------------------------------
# BTXE files
# ---------------------------------------------------------------------------

def _random_table(rng, count=5, dim=16):
    out = {}
    for i in range(count):
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        v = v.astype(np.float32).astype(np.float64)
        out[f"frame{i:03d}"] = TextEmbedding(v, frame_id=f"frame{i:03d}")
    return out


def test_btxe_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    table = _random_table(rng)
    path = tmp_path / "e.btxe"
    write_embeddings(path, table)
    loaded = load_embeddings(path)
    assert len(loaded) == len(table)
    assert loaded.renormalized == 0
    for fid, emb in table.items():
        got = loaded.get(fid)
        assert got is not None
        assert np.array_equal(got.vector, emb.vector)   # bit-exact via f32


def test_btxe_count(tmp_path):
    rng = np.random.default_rng(2)
    write_embeddings(tmp_path / "two.btxe", _random_table(rng, count=2, dim=512))
    assert len(load_embeddings(tmp_path / "two.btxe")) == 2


def test_btxe_empty_file_ok(tmp_path):
    write_embeddings(tmp_path / "none.btxe", {})
    assert len(load_embeddings(tmp_path / "none.btxe")) == 0


def test_btxe_bad_magic(tmp_path):
    p = tmp_path / "bad.btxe"
    p.write_bytes(b"NOPE" + b"\x00" * 12)
    with pytest.raises(BtxeFormatError, match="byte 0"):
        load_embeddings(p)


def test_btxe_truncation_names_offset(tmp_path):
    rng = np.random.default_rng(3)
    p = tmp_path / "t.btxe"
    write_embeddings(p, _random_table(rng, count=3))
    blob = p.read_bytes()
    p.write_bytes(blob[:len(blob) - 10])
    with pytest.raises(BtxeFormatError, match="byte"):
        load_embeddings(p)


def test_btxe_duplicate_ids(tmp_path):
    import struct
    v = (np.ones(4) / 2.0).astype("<f4").tobytes()
    rec = struct.pack("<H", 2) + b"aa" + v
    blob = b"BTXE" + struct.pack("<III", 1, 2, 4) + rec + rec
    p = tmp_path / "dup.btxe"
    p.write_bytes(blob)
    with pytest.raises(BtxeFormatError, match="duplicate"):
        load_embeddings(p)


def test_btxe_norm_policies(tmp_path):
    import struct

    def file_with_norm(norm):
        v = np.zeros(4)
        v[0] = norm
        rec = struct.pack("<H", 1) + b"a" + v.astype("<f4").tobytes()
        blob = b"BTXE" + struct.pack("<III", 1, 1, 4) + rec
        p = tmp_path / f"n{norm}.btxe"
        p.write_bytes(blob)
        return p

    # within 1e-3: renormalized with a warning counted
    table = load_embeddings(file_with_norm(1.0005))
    assert table.renormalized == 1
    assert np.linalg.norm(table.get("a").vector) == pytest.approx(1.0)
    # beyond 1e-3: error
    with pytest.raises(BtxeFormatError, match="deviates"):
        load_embeddings(file_with_norm(1.01))


# ---------------------------------------------------------------------------
# FiLM
# ---------------------------------------------------------------------------

def test_film_zero_init_outputs_zero():
    rng = np.random.default_rng(4)
    film = FilmMlp(rng, embed_dim=8, channels=4)
    p = film(stub_embed("anything at all", dim=8))
    assert np.all(p.gamma.data == 0.0)
    assert np.all(p.beta.data == 0.0)


def test_film_deterministic():
    rng = np.random.default_rng(5)
    film = FilmMlp(rng, embed_dim=8, channels=4)
    film.mlp.fc2.w.data[...] = 0.1
    e = stub_embed("same text", dim=8)
    p1, p2 = film(e), film(e)
    assert np.array_equal(p1.gamma.data, p2.gamma.data)
    assert np.array_equal(p1.beta.data, p2.beta.data)


def test_film_dimension_mismatch():
    rng = np.random.default_rng(6)
    film = FilmMlp(rng, embed_dim=8, channels=4)
    with pytest.raises(ad.ShapeMismatchError, match="dim"):
        film(stub_embed("text", dim=16))


def test_film_jacobian_grad_check():
    rng = np.random.default_rng(7)
    film = FilmMlp(rng, embed_dim=6, channels=3)
    film.mlp.fc2.w.data[...] = rng.standard_normal(film.mlp.fc2.w.shape) * 0.2
    film.mlp.fc2.b.data[...] = rng.standard_normal(3 * 2) * 0.2
    v = rng.standard_normal(6)
    emb = Tensor(v / np.linalg.norm(v))
    w1 = rng.standard_normal(3)
    w2 = rng.standard_normal(3)

    def fn(p):
        fp = film(p[0])
        return ad.add(ad.sum_(ad.mul(fp.gamma, ad.constant(w1))),
                      ad.sum_(ad.mul(fp.beta, ad.constant(w2))))

    points = [emb] + [film.parameters()[k] for k in sorted(film.parameters())]
    assert grad_check(fn, points) <= 1e-4


def test_modulate_identity_with_zero_params():
    g = _grid(8)
    p = FilmParams(Tensor(np.zeros(4)), Tensor(np.zeros(4)))
    out = modulate(g, p)
    np.testing.assert_allclose(out.features.data, g.features.data, atol=1e-12)


def test_modulate_arithmetic():
    n = SPEC.cells_per_side
    g = BevGrid(Tensor(np.full((1, n, n), 2.0)), SPEC)
    p = FilmParams(Tensor([0.5]), Tensor([1.0]))
    assert np.all(modulate(g, p).features.data == 4.0)


def test_modulate_gamma_minus_one_suppresses_signal():
    g = _grid(9, channels=2)
    p = FilmParams(Tensor([-1.0, -1.0]), Tensor([0.7, -0.3]))
    out = modulate(g, p).features.data
    np.testing.assert_allclose(out[0], 0.7, atol=1e-12)
    np.testing.assert_allclose(out[1], -0.3, atol=1e-12)


def test_modulate_channel_mismatch():
    g = _grid(10, channels=3)
    with pytest.raises(ad.ShapeMismatchError):
        modulate(g, FilmParams(Tensor(np.zeros(5)), Tensor(np.zeros(5))))


# ---------------------------------------------------------------------------
# fusion gate
# ---------------------------------------------------------------------------

def test_gate_closed_limit():
    raw, mod = _grid(11), _grid(12)
    gate = FusionGate(4)
    gate.logits.data[...] = -50.0
    out = weighted_fuse(raw, mod, gate)
    np.testing.assert_allclose(out.features.data, raw.features.data,
                               atol=1e-12)


def test_gate_midpoint():
    raw, mod = _grid(13), _grid(14)
    gate = FusionGate(4)
    out = weighted_fuse(raw, mod, gate)
    np.testing.assert_allclose(
        out.features.data, 0.5 * (raw.features.data + mod.features.data),
        atol=1e-12)


def test_gate_fixed_point():
    raw = _grid(15)
    gate = FusionGate(4)
    gate.logits.data[...] = np.random.default_rng(0).standard_normal(4)
    out = weighted_fuse(raw, BevGrid(Tensor(raw.features.data.copy()), SPEC),
                        gate)
    np.testing.assert_allclose(out.features.data, raw.features.data,
                               atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_fuse_is_convex_combination(seed):
    rng = np.random.default_rng(seed)
    n = SPEC.cells_per_side
    raw = BevGrid(Tensor(rng.standard_normal((2, n, n))), SPEC)
    mod = BevGrid(Tensor(rng.standard_normal((2, n, n))), SPEC)
    gate = FusionGate(2)
    gate.logits.data[...] = rng.standard_normal(2) * 4
    out = weighted_fuse(raw, mod, gate).features.data
    lo = np.minimum(raw.features.data, mod.features.data)
    hi = np.maximum(raw.features.data, mod.features.data)
    assert np.all(out >= lo - 1e-12)
    assert np.all(out <= hi + 1e-12)


def test_end_to_end_text_gradient():
    # gradient flows from a loss on the fused grid back into the embedding
    rng = np.random.default_rng(16)
    film = FilmMlp(rng, embed_dim=6, channels=3)
    film.mlp.fc2.w.data[...] = rng.standard_normal(film.mlp.fc2.w.shape) * 0.2
    gate = FusionGate(3)
    n = SPEC.cells_per_side
    raw = BevGrid(Tensor(rng.standard_normal((3, n, n))), SPEC)
    target = rng.standard_normal((3, n, n))
    v = rng.standard_normal(6)
    emb = Tensor(v / np.linalg.norm(v))

    def fn(p):
        fused = weighted_fuse(raw, modulate(raw, film(p[0])), gate)
        return ad.mse_loss(fused.features, target)

    assert grad_check(fn, [emb]) <= 1e-4


def test_identical_vector_same_output():
    rng = np.random.default_rng(17)
    film = FilmMlp(rng, embed_dim=8, channels=4)
    film.mlp.fc2.w.data[...] = 0.3
    gate = FusionGate(4)
    raw = _grid(18)
    v = stub_embed("a thing", dim=8).vector
    e1 = TextEmbedding(v.copy(), source_tag="stub")
    e2 = TextEmbedding(v.copy(), source_tag="clip-file")
    o1 = weighted_fuse(raw, modulate(raw, film(e1)), gate).features.data
    o2 = weighted_fuse(raw, modulate(raw, film(e2)), gate).features.data
    assert np.array_equal(o1, o2)
