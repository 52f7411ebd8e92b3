import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from biprompt.attention import AttentionMap
from biprompt.core import DegenerateCollapseError, ImageView, InvalidInputError, InvalidTaskError
from biprompt.debias import (
    PromptSet,
    load_prompt_state,
    logit,
    normalize_prompts,
    random_erase,
    reset,
    save_prompt_state,
    split_views,
)

from conftest import random_pixels


def _base(C, d, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.nn.functional.normalize(torch.randn(C, d, generator=g, dtype=torch.float64), dim=1)


def _mean_pairwise_cos(P):
    G = P @ P.T
    C = P.shape[0]
    return float((G.sum() - G.diagonal().sum()) / (C * (C - 1)))


def test_split_views_all_ones_and_half():
    img = ImageView(random_pixels(0))
    fg, bg = split_views(img, AttentionMap(torch.ones(16, 16)))
    assert torch.equal(fg.pixels, img.pixels) and torch.equal(bg.pixels, torch.zeros(3, 16, 16, dtype=torch.float64))
    assert (fg.tag, bg.tag) == ("foreground", "background")
    fg, bg = split_views(img, AttentionMap(torch.full((16, 16), 0.5)))
    assert torch.equal(fg.pixels, img.pixels / 2) and torch.equal(bg.pixels, img.pixels / 2)


@given(st.integers(0, 2**31 - 1))
def test_split_views_reconstruct(seed):
    img = ImageView(random_pixels(seed))
    g = torch.Generator().manual_seed(seed + 1)
    fg, bg = split_views(img, AttentionMap(torch.rand(16, 16, generator=g, dtype=torch.float64)))
    assert float((fg.pixels + bg.pixels - img.pixels).abs().max()) <= 1e-7


def test_split_views_shape_mismatch():
    with pytest.raises(InvalidInputError):
        split_views(ImageView(random_pixels(0)), AttentionMap(torch.ones(8, 8)))


def test_alpha_one_is_identity():
    base = _base(5, 12, 0)
    out = normalize_prompts(PromptSet.with_alpha(base, 1.0))
    assert float((out - base).abs().max()) <= 1e-12


def test_alpha_zero_collapses_to_centroid():
    base = _base(4, 6, 1)
    out = normalize_prompts(PromptSet.with_alpha(base, 0.0))
    centroid = base.mean(0) / base.mean(0).norm()
    assert float((out @ out.T - 1.0).abs().max()) <= 1e-9
    assert torch.allclose(out, centroid.expand_as(out), atol=1e-12)


def test_two_dimensional_hand_example():
    base = torch.eye(2, dtype=torch.float64)
    out = normalize_prompts(PromptSet.with_alpha(base, 0.5))
    pre = np.array([[0.75, 0.25], [0.25, 0.75]])
    expected = pre / np.linalg.norm(pre, axis=1, keepdims=True)
    assert np.allclose(out.numpy(), expected, atol=1e-15)
    # dot 0.375 over squared norm 0.625
    assert float(out[0] @ out[1]) == pytest.approx(0.6, abs=1e-15)


def test_collapse_error_when_centroid_vanishes():
    f = torch.tensor([0.6, 0.8], dtype=torch.float64)
    with pytest.raises(DegenerateCollapseError):
        normalize_prompts(PromptSet.with_alpha(torch.stack([f, -f]), 0.0))


@given(st.integers(2, 6), st.integers(2, 10), st.integers(0, 2**31 - 1))
def test_pairwise_cosine_grows_as_alpha_shrinks(C, d, seed):
    base = _base(C, d, seed)
    if float(base.mean(0).norm()) < 1e-3:
        return
    alphas = np.linspace(1.0, 0.0, 11)
    cos = [_mean_pairwise_cos(normalize_prompts(PromptSet.with_alpha(base, a))) for a in alphas]
    assert all(b >= a - 1e-12 for a, b in zip(cos, cos[1:]))
    assert cos[-1] == pytest.approx(1.0, abs=1e-9)


def test_prompt_set_validation():
    with pytest.raises(InvalidTaskError):
        PromptSet(_base(1, 4, 0))
    with pytest.raises(InvalidInputError):
        PromptSet(2 * _base(2, 4, 0))
    with pytest.raises(InvalidInputError):
        PromptSet(_base(2, 4, 0), scale=torch.tensor([1.0, 1.0, 0.0, 1.0]))
    ps = PromptSet(_base(2, 4, 0))
    assert ps.alpha == pytest.approx(0.9, abs=1e-15)
    assert float(ps.alpha_raw) == pytest.approx(logit(0.9))


def test_reset_semantics():
    ps = PromptSet(_base(3, 5, 2))
    fresh = PromptSet(_base(3, 5, 2))
    adapted = PromptSet(ps.base_embeddings, torch.tensor(-1.0), torch.full((5,), 2.0))
    assert reset(adapted).state_equal(fresh)
    assert reset(reset(adapted)).state_equal(reset(adapted))
    assert reset(fresh).state_equal(fresh)
    assert torch.equal(reset(adapted).base_embeddings, adapted.base_embeddings)


def test_random_erase_extremes():
    img = ImageView(random_pixels(0, 32))
    assert torch.equal(random_erase(img, 8, 0, rng_seed=1).pixels, img.pixels)
    assert torch.equal(random_erase(img, 8, 64, rng_seed=1).pixels, torch.zeros(3, 32, 32, dtype=torch.float64))


@given(st.integers(0, 2**31 - 1))
def test_random_erase_counts_and_reproducibility(seed):
    img = ImageView(0.1 + 0.9 * random_pixels(seed % 97, 32))
    out = random_erase(img, 8, 4, rng_seed=seed)
    zeroed = int((out.pixels == 0).all(dim=0).sum())
    assert zeroed == 4 * (32 // 8) * (32 // 8)
    assert out.tag == "random-erased"
    assert torch.equal(out.pixels, random_erase(img, 8, 4, rng_seed=seed).pixels)
    untouched = (out.pixels != 0).all(dim=0)
    assert torch.equal(out.pixels[:, untouched], img.pixels[:, untouched])


def test_random_erase_center_crops():
    img = ImageView(random_pixels(0, 35))
    out = random_erase(img, 8, 1, rng_seed=0)
    assert out.pixels.shape == (3, 32, 32)


def test_random_erase_corners():
    img = ImageView(0.5 + 0.5 * random_pixels(0, 32))
    out = random_erase(img, 8, 4, placement="corners")
    for r, c in [(0, 0), (0, 28), (28, 0), (28, 28)]:
        assert (out.pixels[:, r:r + 4, c:c + 4] == 0).all()
    assert int((out.pixels == 0).all(dim=0).sum()) == 64


def test_random_erase_errors():
    img = ImageView(random_pixels(0, 32))
    with pytest.raises(InvalidInputError):
        random_erase(img, 8, 65)
    with pytest.raises(InvalidInputError):
        random_erase(img, 8, 1, placement="centre")


def test_state_file_round_trip(tmp_path):
    base = _base(3, 7, 4)
    ps = PromptSet(base, torch.tensor(0.25), torch.linspace(0.5, 2.0, 7, dtype=torch.float64))
    path = tmp_path / "state.bpps"
    save_prompt_state(ps, path)
    data = path.read_bytes()
    assert data[:4] == b"BPPS" and len(data) == 4 + 2 + 4 + 4 + 32 + 8 + 8 + 7 * 8
    assert load_prompt_state(path, base).state_equal(ps)
    with pytest.raises(InvalidInputError):
        load_prompt_state(path, _base(3, 7, 5))
    path.write_bytes(data[:20])
    with pytest.raises(InvalidInputError):
        load_prompt_state(path, base)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(InvalidInputError):
        load_prompt_state(path, base)
