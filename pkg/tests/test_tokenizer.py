import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdit.engine import Tensor
from pdit.tokenizer import (
    HybridObs,
    ImageObs,
    ProprioObs,
    TokenizerConfigError,
    TokenizerParams,
    embed_and_assemble,
    embed_patches,
    image_patch_count,
    patchify_image,
    patchify_proprio,
    tokenize,
    tokenize_hybrid,
)


def params(rng, width, n, d=8, vocab=0):
    return TokenizerParams(
        proj=Tensor(rng.normal(size=(width, d))),
        integration=Tensor(rng.normal(size=(d,))),
        pos=Tensor(rng.normal(size=(1 + n, d))),
        words=Tensor(rng.normal(size=(vocab, d))) if vocab else None,
    )


def unpatchify(patches, h, w, c, p):
    gh, gw = h // p, w // p
    x = patches.reshape(gh, gw, p, p, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(h, w, c)


def test_whole_image_patch_is_flattened_image(rng):
    img = rng.normal(size=(4, 4, 1))
    patches = patchify_image(ImageObs(img), 4)
    assert patches.shape == (1, 16)
    np.testing.assert_array_equal(patches[0], img.reshape(-1))


def test_patch_count_matches_grid():
    assert image_patch_count(12, 12, 6) == 4
    assert image_patch_count(12, 12, 4) == 9
    assert patchify_image(np.zeros((12, 12, 3)), 4).shape == (9, 48)


def test_patches_run_row_major():
    img = np.zeros((4, 4, 1))
    img[0:2, 2:4] = 1.0  # top-right patch
    patches = patchify_image(img, 2)
    assert patches.sum(axis=1).tolist() == [0.0, 4.0, 0.0, 0.0]


def test_patch_size_must_divide_image():
    with pytest.raises(TokenizerConfigError):
        patchify_image(np.zeros((12, 12, 1)), 5)
    with pytest.raises(TokenizerConfigError):
        ImageObs(np.zeros((4, 4)))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([1, 2, 3, 4, 6, 12]), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_patches_reassemble_bit_exactly(p, c, seed):
    img = np.random.default_rng(seed).normal(size=(12, 12, c))
    np.testing.assert_array_equal(unpatchify(patchify_image(img, p), 12, 12, c, p), img)


def test_batched_patchify_matches_single(rng):
    imgs = rng.normal(size=(3, 2, 12, 12, 1))
    batched = patchify_image(imgs, 6)
    assert batched.shape == (3, 2, 4, 36)
    np.testing.assert_array_equal(batched[1, 0], patchify_image(imgs[1, 0], 6))


def test_proprio_patches_one_per_entry():
    patches = patchify_proprio(ProprioObs(np.array([0.3, -1.2])))
    np.testing.assert_array_equal(patches, [[0.3], [-1.2]])
    np.testing.assert_array_equal(patches[:, 0], [0.3, -1.2])
    with pytest.raises(TokenizerConfigError):
        patchify_proprio(np.zeros(0))


def test_embed_rejects_wrong_width(rng):
    with pytest.raises(TokenizerConfigError, match="patch width"):
        embed_patches(np.zeros((4, 5)), Tensor(rng.normal(size=(6, 8))))


def test_zero_everything_leaves_integration_token(f64, rng):
    p = params(rng, 16, 4)
    p.pos = Tensor(np.zeros((5, 8)))
    seq = embed_and_assemble(embed_patches(np.zeros((4, 16)), p.proj), p)
    np.testing.assert_array_equal(seq.rows.data[0], p.integration.data)
    np.testing.assert_array_equal(seq.rows.data[1:], 0.0)
    assert seq.n_patches == 4


def test_assembled_rows(f64, rng):
    p = params(rng, 36, 4)
    img = rng.normal(size=(12, 12, 1))
    seq = tokenize(ImageObs(img), 6, p)
    expected = np.vstack([p.integration.data, patchify_image(img, 6) @ p.proj.data]) + p.pos.data
    np.testing.assert_allclose(seq.rows.data, expected, rtol=1e-12)


def test_positional_encoding_must_fit(rng):
    p = params(rng, 16, 3)
    with pytest.raises(TokenizerConfigError, match="positional"):
        embed_and_assemble(embed_patches(np.zeros((4, 16)), p.proj), p)


def test_permuting_patches_permutes_rows_without_pos(f64, rng):
    p = params(rng, 4, 9)
    p.pos = Tensor(np.zeros((10, 8)))
    patches = rng.normal(size=(9, 4))
    perm = rng.permutation(9)
    a = embed_and_assemble(embed_patches(patches, p.proj), p).rows.data
    b = embed_and_assemble(embed_patches(patches[perm], p.proj), p).rows.data
    np.testing.assert_array_equal(b[1:], a[1:][perm])
    np.testing.assert_array_equal(b[0], a[0])


def test_tokenization_is_deterministic(rng):
    p = params(rng, 1, 4)
    obs = ProprioObs(rng.normal(size=4))
    np.testing.assert_array_equal(tokenize(obs, 1, p).rows.data, tokenize(obs, 1, p).rows.data)


def test_hybrid_rows_are_patches_then_words(f64, rng):
    p = params(rng, 108, 4 + 3, vocab=10)
    img = rng.normal(size=(12, 12, 3))
    rows = tokenize_hybrid(img, [1, 2, 4], 6, p).data
    assert rows.shape == (7, 8)
    np.testing.assert_array_equal(rows[4:], p.words.data[[1, 2, 4]])


def test_swapping_words_swaps_their_rows(f64, rng):
    p = params(rng, 108, 7, vocab=10)
    img = rng.normal(size=(12, 12, 3))
    a = tokenize_hybrid(img, [1, 2, 4], 6, p).data
    b = tokenize_hybrid(img, [1, 4, 2], 6, p).data
    np.testing.assert_array_equal(a[:5], b[:5])
    np.testing.assert_array_equal(a[5], b[6])
    np.testing.assert_array_equal(a[6], b[5])


def test_hybrid_word_out_of_vocabulary(rng):
    p = params(rng, 108, 7, vocab=10)
    obs = HybridObs(ImageObs(np.zeros((12, 12, 3))), np.array([1, 2, 10]))
    with pytest.raises(IndexError, match="10"):
        tokenize(obs, 6, p)


def test_hybrid_needs_word_table(rng):
    p = params(rng, 108, 7)
    with pytest.raises(TokenizerConfigError):
        tokenize_hybrid(np.zeros((12, 12, 3)), [1], 6, p)
