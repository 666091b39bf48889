import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from arbor import InvalidArgument
from arbor.imaging import Image, Mask, curate, sharpness_score, silhouette_iou


def brute_sharpness(v: np.ndarray, patch: int) -> float:
    """Per-pixel loops over each patch interior; independent of the vectorised version."""
    ny, nx = v.shape[0] // patch, v.shape[1] // patch
    variances = []
    for py in range(ny):
        for px in range(nx):
            vals = []
            for y in range(py * patch + 1, (py + 1) * patch - 1):
                for x in range(px * patch + 1, (px + 1) * patch - 1):
                    vals.append(v[y - 1, x] + v[y + 1, x] + v[y, x - 1] + v[y, x + 1] - 4 * v[y, x])
            vals = np.array(vals)
            variances.append(np.mean((vals - vals.mean()) ** 2))
    return float(np.mean(variances))


def checker(n, period=2, shift=0):
    yy, xx = np.mgrid[0:n, 0:n]
    return (((xx + shift) // (period // 2) + (yy + shift) // (period // 2)) % 2).astype(np.float64)


def test_constant_image_scores_zero():
    assert sharpness_score(Image(np.full((16, 16), 0.3)), 8) == 0.0


def test_alternating_columns_matches_stencil_oracle():
    v = np.tile([0.0, 1.0], (8, 4))
    got = sharpness_score(Image(v), 8)
    assert got == pytest.approx(brute_sharpness(v, 8), rel=1e-12)
    # interior columns give Laplacian +2 / -2 alternately, variance 4
    assert got == pytest.approx(4.0, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(3, 9), st.integers(9, 25), st.integers(9, 25))
def test_random_images_match_oracle(seed, patch, h, w):
    v = np.random.default_rng(seed).random((h, w))
    assert sharpness_score(Image(v), patch) == pytest.approx(brute_sharpness(v, patch), rel=1e-10, abs=1e-14)


def test_blur_lowers_score():
    v = checker(32, period=4)
    blurred = ndimage.uniform_filter(v, size=3, mode="reflect")
    assert sharpness_score(Image(v), 16) > sharpness_score(Image(blurred), 16)


# patch borders are excluded, so exact invariance needs the period to divide the
# patch interior (patch - 2) as well as the patch itself
@pytest.mark.parametrize("period,patch", [(2, 8), (2, 16), (4, 10), (4, 18)])
@pytest.mark.parametrize("shift", [1, 2, 3])
def test_translation_invariance_on_periodic_pattern(period, patch, shift):
    n = 4 * patch
    base = sharpness_score(Image(checker(n, period)), patch)
    assert sharpness_score(Image(checker(n, period, shift)), patch) == pytest.approx(base, rel=1e-12)


def test_partial_patches_dropped():
    v = np.random.default_rng(0).random((20, 20))
    assert sharpness_score(Image(v), 8) == pytest.approx(sharpness_score(Image(v[:16, :16]), 8))


@pytest.mark.parametrize("patch", [2, 17])
def test_bad_patch_size(patch):
    with pytest.raises(InvalidArgument):
        sharpness_score(Image(np.zeros((16, 16))), patch)


def test_colour_image_rejected_by_score():
    with pytest.raises(InvalidArgument):
        sharpness_score(Image(np.zeros((8, 8, 3))), 4)


def test_curate_examples():
    const, sharp = Image(np.full((16, 16), 0.5)), Image(checker(16))
    assert curate([const, sharp], 1e-9, 8) == ([1], [0])
    assert curate([const, sharp], 0.0, 8) == ([0, 1], [])
    assert curate([], 1.0, 8) == ([], [])


def test_curate_partition_is_disjoint_cover():
    gen = np.random.default_rng(3)
    imgs = [Image(gen.random((16, 16)) * s) for s in np.linspace(0, 1, 7)]
    kept, rejected = curate(imgs, 0.05, 8)
    assert sorted(kept + rejected) == list(range(7))
    assert not set(kept) & set(rejected)


def test_iou_examples():
    a = Mask(np.array([[1.0, 1.0]]))
    b = Mask(np.array([[1.0, 0.0]]))
    assert silhouette_iou(a, b) == 0.5
    assert silhouette_iou(a, a) == 1.0
    assert silhouette_iou(Mask(np.array([[1.0, 0.0]])), Mask(np.array([[0.0, 1.0]]))) == 0.0


def test_iou_shape_mismatch():
    with pytest.raises(InvalidArgument):
        silhouette_iou(Mask(np.zeros((2, 2))), Mask(np.zeros((2, 3))))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_iou_symmetric_and_one_iff_equal(seed):
    gen = np.random.default_rng(seed)
    a, b = Mask(gen.random((6, 6))), Mask(gen.random((6, 6)))
    assert silhouette_iou(a, b) == silhouette_iou(b, a)
    same = np.array_equal(a.binarize(), b.binarize())
    assert (silhouette_iou(a, b) == 1.0) == same


def test_image_validation():
    with pytest.raises(InvalidArgument):
        Image(np.full((4, 4), 1.5))
    with pytest.raises(InvalidArgument):
        Mask(np.zeros((4, 4, 3)))


@pytest.mark.parametrize("suffix", [".pgm", ".png"])
def test_mask_roundtrip(tmp_path, suffix):
    m = Mask((np.random.default_rng(1).random((9, 7)) > 0.5).astype(float))
    m.write(tmp_path / f"m{suffix}")
    assert np.array_equal(Mask.read(tmp_path / f"m{suffix}").values, m.values)
