import numpy as np
import pytest

from promptmil import autodiff as ad
from promptmil.dataio import write_matrix
from promptmil.textenc import (FrozenTextEncoder, encode_pack,
                               init_context_vectors, load_embedding_bundle)

DIM = 24


@pytest.fixture
def encoder():
    return FrozenTextEncoder(DIM, seed=3, dtype=np.float64)


@pytest.fixture
def context(rng):
    return ad.parameter(0.02 * rng.standard_normal((4, DIM)), dtype=np.float64)


def test_tokenize_embed_deterministic(encoder):
    a = encoder.tokenize_embed("large nucleoli")
    b = encoder.tokenize_embed("large nucleoli")
    assert a.shape == (2, DIM)
    np.testing.assert_array_equal(a, b)


def test_repeated_token_gives_identical_rows(encoder):
    m = encoder.tokenize_embed("nucleoli nucleoli")
    np.testing.assert_array_equal(m[0], m[1])


def test_tokenize_rejects_empty(encoder):
    with pytest.raises(ValueError):
        encoder.tokenize_embed("   ")


def test_token_norm_statistics():
    enc = FrozenTextEncoder(256, seed=0, dtype=np.float64)
    norms = [np.linalg.norm(enc.token_vector(f"tok{i}")) for i in range(1000)]
    norms = np.asarray(norms)
    assert np.all(np.abs(norms - 1.0) < 0.15)
    assert abs(norms.mean() - 1.0) < 0.01


def test_encode_prompt_closed_form_single_context_single_token(encoder):
    v = ad.parameter(np.full(DIM, 0.17), dtype=np.float64)
    tok = encoder.tokenize_embed("gland")
    got = encoder.encode_prompt(ad.Tensor(v.value.reshape(1, -1), requires_grad=True),
                                tok).value
    pooled = (v.value + tok[0]) / 2.0
    h = pooled @ encoder._w_pool.value
    m, var = h.mean(), h.var()
    ln = (h - m) / np.sqrt(var + 1e-5)
    expected = ln / np.linalg.norm(ln)
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_encoding_is_order_free_bag_of_tokens(encoder, context):
    a = encoder.encode_text(context, "dense collagen stroma").value
    b = encoder.encode_text(context, "stroma dense collagen").value
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_gradient_reaches_context_only(encoder, context):
    probe = np.random.default_rng(0).standard_normal(DIM)

    def f():
        return ad.dot(encoder.encode_text(context, "keratin pearls"),
                      ad.Tensor(probe))

    assert ad.grad_check(f, [context]) <= 1e-6
    snapshot = encoder.snapshot()
    with ad.Tape() as tape:
        out = f()
    tape.backward(out)
    assert encoder._w_pool.grad is None
    assert encoder.snapshot() == snapshot


def test_outputs_unit_norm_and_cosine_equals_dot(encoder, context, rng):
    a = encoder.encode_text(context, "mitotic figures everywhere")
    b = encoder.encode_text(context, "sparse stroma bands")
    assert np.linalg.norm(a.value) == pytest.approx(1.0, abs=1e-6)
    cos = ad.cosine_similarity(a, b).item()
    assert cos == pytest.approx(float(a.value @ b.value), abs=1e-7)


def test_context_perturbation_changes_output_boundedly(encoder, rng):
    # regression guard, not a theorem: small context changes move the
    # embedding proportionally
    base = ad.Tensor(0.02 * rng.standard_normal((4, DIM)))
    out0 = encoder.encode_prompt(base, encoder.tokenize_embed("gland lumen")).value
    ratios = []
    for scale in (1e-4, 1e-3, 1e-2):
        delta = rng.standard_normal((4, DIM)) * scale
        pert = ad.Tensor(base.value + delta)
        out1 = encoder.encode_prompt(pert, encoder.tokenize_embed("gland lumen")).value
        ratios.append(np.linalg.norm(out1 - out0) / np.linalg.norm(delta))
    assert max(ratios) < 50.0


def test_encode_pack_shapes_and_counts(four_class_pack):
    enc = FrozenTextEncoder(DIM, seed=1, dtype=np.float64)
    ctx = init_context_vectors(DIM, 4, np.random.default_rng(0), dtype=np.float64)
    embeds = encode_pack(four_class_pack, enc, ctx)
    assert embeds.subtypes == ["alpha", "beta", "gamma", "delta"]
    for s in ("low", "high"):
        se = embeds.scales[s]
        assert se.generic.shape == (3, DIM)
        assert len(se.attributes) == 3
        assert all(a.shape == (4, DIM) for a in se.attributes)
        assert se.slide.shape == (4, DIM)
        assert se.region.shape == (DIM,)
        for row in se.generic.value:
            assert np.linalg.norm(row) == pytest.approx(1.0, abs=1e-6)
        assert np.linalg.norm(se.region) == pytest.approx(1.0, abs=1e-6)


def test_separate_slide_context(four_class_pack, rng):
    enc = FrozenTextEncoder(DIM, seed=1, dtype=np.float64)
    ctx_e = init_context_vectors(DIM, 4, np.random.default_rng(1), dtype=np.float64)
    ctx_s = init_context_vectors(DIM, 4, np.random.default_rng(2), dtype=np.float64)
    shared = encode_pack(four_class_pack, enc, ctx_e)
    split = encode_pack(four_class_pack, enc, ctx_e, ctx_s)
    np.testing.assert_array_equal(shared.scales["low"].generic.value,
                                  split.scales["low"].generic.value)
    assert not np.allclose(shared.scales["low"].slide.value,
                           split.scales["low"].slide.value)


def test_bundle_ingestion_matches_stub_encoding(tmp_path, four_class_pack):
    """Precomputed embeddings with identical values drive the pipeline to the
    same results as the stub path."""
    import json

    enc = FrozenTextEncoder(DIM, seed=5, dtype=np.float64)
    ctx = init_context_vectors(DIM, 4, np.random.default_rng(3), dtype=np.float64)
    embeds = encode_pack(four_class_pack, enc, ctx)

    emb_dir = tmp_path / "emb"
    emb_dir.mkdir()
    index = {"dim": DIM, "subtypes": embeds.subtypes, "scales": {}}
    for s, se in embeds.scales.items():
        write_matrix(emb_dir / f"{s}_g.mapf", se.generic.value)
        attrs = np.concatenate([a.value for a in se.attributes], axis=0)
        write_matrix(emb_dir / f"{s}_a.mapf", attrs)
        write_matrix(emb_dir / f"{s}_s.mapf", se.slide.value)
        write_matrix(emb_dir / f"{s}_r.mapf", se.region.reshape(1, -1))
        index["scales"][s] = {"entities": se.entities, "generic": f"{s}_g.mapf",
                              "attributes": f"{s}_a.mapf", "slide": f"{s}_s.mapf",
                              "region": f"{s}_r.mapf"}
    with open(emb_dir / "index.json", "w") as fh:
        json.dump(index, fh)

    bundle = load_embedding_bundle(emb_dir / "index.json", dtype=np.float64)
    for s in ("low", "high"):
        # float32 storage then renormalization: equal to within storage precision
        np.testing.assert_allclose(bundle.scales[s].generic.value,
                                   embeds.scales[s].generic.value, atol=1e-6)
        np.testing.assert_allclose(bundle.scales[s].slide.value,
                                   embeds.scales[s].slide.value, atol=1e-6)
        np.testing.assert_allclose(bundle.scales[s].region,
                                   embeds.scales[s].region, atol=1e-6)
        assert not bundle.scales[s].generic.requires_grad


def test_frozen_params_unchanged_by_updates(encoder, context):
    before = encoder.snapshot()
    for _ in range(3):
        ad.zero_grads([context])
        with ad.Tape() as tape:
            out = ad.sum_vec(encoder.encode_text(context, "papillary fronds"))
        tape.backward(out)
        context.value -= 0.01 * context.grad
    assert encoder.snapshot() == before
