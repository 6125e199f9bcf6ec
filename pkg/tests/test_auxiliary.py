import numpy as np
import pytest
from scipy import stats

from seraser.augment import ALL_OPS, IDENTITY, AugmentPolicy
from seraser.auxiliary import (
    AuxiliaryImageSet,
    ForegroundMask,
    box_union,
    build_auxiliary,
    corner_patches,
    extract_background,
    extract_foreground,
    random_patches,
    rank_by_similarity,
    select_reference_images,
    shuffle_patches,
)
from seraser.errors import EmptyBackground, InvalidArgument, NoForeground, StrategyUnavailable
from seraser.seeding import derive_seed


def random_image(rng, h=64, w=64):
    return rng.integers(0, 256, size=(h, w, 3)) / 255.0


def random_mask(rng, h=64, w=64):
    bits = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        r, c = rng.integers(0, h - 4), rng.integers(0, w - 4)
        bits[r : r + rng.integers(1, 20), c : c + rng.integers(1, 20)] = True
    return bits


class TestBoxUnion:
    def test_l_shape_fills_its_box(self):
        bits = np.zeros((10, 10), dtype=bool)
        bits[2:6, 2] = True
        bits[5, 2:7] = True
        boxes = box_union(bits)
        assert boxes[2:6, 2:7].all() and boxes.sum() == 4 * 5

    def test_separate_regions_keep_separate_boxes(self):
        bits = np.zeros((10, 10), dtype=bool)
        bits[0, 0] = bits[9, 9] = True
        assert box_union(bits).sum() == 2


class TestExtractBackground:
    def test_empty_mask_is_identity(self, rng):
        x = random_image(rng)
        out = extract_background(x, np.zeros((64, 64), bool))
        np.testing.assert_array_equal(out.images[0], x)
        assert out.strategy == "annotation-background"

    def test_full_mask_rejected(self, rng):
        with pytest.raises(EmptyBackground):
            extract_background(random_image(rng), np.ones((64, 64), bool))

    def test_toy_glyph_box_zeroed(self, world):
        s = world.samples[0]
        out = extract_background(s.image, ForegroundMask(s.mask, "toy-exact")).images[0]
        boxes = box_union(s.mask)
        assert np.all(out[boxes] == 0.0)
        np.testing.assert_array_equal(out[~boxes], s.image[~boxes])

    def test_mask_shape_mismatch(self, rng):
        with pytest.raises(InvalidArgument):
            extract_background(random_image(rng), np.zeros((32, 32), bool))


class TestExtractForeground:
    def test_full_mask_is_identity(self, rng):
        x = random_image(rng)
        np.testing.assert_array_equal(extract_foreground(x, np.ones((64, 64), bool)), x)

    def test_empty_mask_rejected(self, rng):
        with pytest.raises(NoForeground):
            extract_foreground(random_image(rng), np.zeros((64, 64), bool))

    def test_toy_glyph_only(self, world):
        s = world.samples[3]
        out = extract_foreground(s.image, s.mask)
        nonzero = out.any(axis=2)
        assert not nonzero[~box_union(s.mask)].any()

    def test_complementary_on_random_cases(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            x = random_image(rng)
            bits = random_mask(rng)
            bg = extract_background(x, bits).images[0]
            fg = extract_foreground(x, bits)
            boxes = box_union(bits)
            np.testing.assert_array_equal(bg + fg, x)
            assert np.all(bg[boxes] == 0) and np.all(fg[~boxes] == 0)


class TestCornerPatches:
    def test_offsets(self, rng):
        out = corner_patches(random_image(rng))
        assert out.offsets == ((0, 0), (0, 56), (56, 0), (56, 56))
        assert len(out) == 4 and out.strategy == "corner-patches"

    def test_tiles_match_source(self, rng):
        x = random_image(rng)
        out = corner_patches(x, out_size=(8, 8))
        for img, (r, c) in zip(out.images, out.offsets):
            np.testing.assert_array_equal(img, x[r : r + 8, c : c + 8])

    def test_upsampled_to_input_size(self, rng):
        x = random_image(rng)
        img = corner_patches(x).images[3]
        assert img.shape == x.shape
        np.testing.assert_array_equal(img[::8, ::8], x[56:, 56:])
        assert len(np.unique(img.reshape(-1, 3), axis=0)) <= 64

    def test_constant_image(self):
        x = np.full((64, 64, 3), 0.4)
        imgs = corner_patches(x).images
        assert all(np.array_equal(imgs[0], im) for im in imgs)

    def test_indivisible(self):
        with pytest.raises(InvalidArgument):
            corner_patches(np.zeros((60, 64, 3)))


class TestRandomPatches:
    def test_deterministic(self, rng):
        x = random_image(rng)
        assert random_patches(x, 6, 3).offsets == random_patches(x, 6, 3).offsets

    def test_without_replacement_covers_grid(self, rng):
        out = random_patches(random_image(rng), 64, 0, replace=False, out_size=(8, 8))
        assert len(set(out.offsets)) == 64

    def test_uniform_tile_choice(self):
        x = np.zeros((64, 64, 3))
        out = random_patches(x, 10_000, 7, out_size=(8, 8))
        idx = [(r // 8) * 8 + c // 8 for r, c in out.offsets]
        counts = np.bincount(idx, minlength=64)
        assert stats.chisquare(counts).pvalue > 0.01

    def test_n_must_be_positive(self, rng):
        with pytest.raises(InvalidArgument):
            random_patches(random_image(rng), 0, 0)


class TestShufflePatches:
    def test_pixel_multiset(self, rng):
        x = random_image(rng)
        out = shuffle_patches(x, 11).images[0]
        np.testing.assert_array_equal(np.sort(out, axis=None), np.sort(x, axis=None))
        for ch in range(3):
            np.testing.assert_array_equal(np.sort(out[..., ch], axis=None), np.sort(x[..., ch], axis=None))
        assert not np.array_equal(out, x)

    def test_tiles_move_whole(self, rng):
        x = random_image(rng)
        out = shuffle_patches(x, 2).images[0]
        src = {x[r : r + 4, c : c + 4].tobytes() for r in range(0, 64, 4) for c in range(0, 64, 4)}
        dst = {out[r : r + 4, c : c + 4].tobytes() for r in range(0, 64, 4) for c in range(0, 64, 4)}
        assert src == dst

    def test_single_tile(self, rng):
        x = random_image(rng, 4, 4)
        np.testing.assert_array_equal(shuffle_patches(x, 0).images[0], x)

    def test_indivisible(self):
        with pytest.raises(InvalidArgument):
            shuffle_patches(np.zeros((6, 8, 3)), 0)


class TestReferenceImages:
    def test_duplicate_ranks_first(self, small_world):
        x = small_world.samples[0].image
        pool = list(small_world.reference_pool) + [x.copy()]
        out = select_reference_images(small_world.model, x, pool, n=1)
        np.testing.assert_array_equal(out.images[0], x)
        assert out.strategy == "reference"

    def test_matches_brute_force(self, world):
        m = world.model
        x = world.samples[17].image
        pool = world.reference_pool
        assert len(pool) == 20
        q = m.encode_image(x)
        sims = [float(np.dot(m.encode_image(p), q)) for p in pool]
        expected = sorted(range(len(pool)), key=lambda i: (-sims[i], i))
        out = select_reference_images(m, x, pool, n=len(pool))
        for img, i in zip(out.images, expected):
            np.testing.assert_array_equal(img, pool[i])

    def test_ties_by_index(self):
        order = rank_by_similarity(np.array([1.0, 0.0]), np.array([[0.5, 0.0], [0.9, 0.0], [0.5, 0.0]]))
        assert order.tolist() == [1, 0, 2]

    def test_bad_pool(self, small_world):
        x = small_world.samples[0].image
        with pytest.raises(InvalidArgument):
            select_reference_images(small_world.model, x, [], 1)
        with pytest.raises(InvalidArgument):
            select_reference_images(small_world.model, x, [x], 2)


class TestBuildAuxiliary:
    def test_union_of_strategies(self, small_world):
        s = small_world.samples[0]
        out = build_auxiliary(
            ("annotation-background", "corner-patches", "reference"),
            s.image,
            mask=s.mask,
            model=small_world.model,
            reference_pool=small_world.reference_pool,
            sample_id=s.id,
        )
        assert out.strategy == "union" and len(out) == 1 + 4 + 1

    def test_mask_required(self, small_world):
        with pytest.raises(StrategyUnavailable, match="mask"):
            build_auxiliary(("annotation-background",), small_world.samples[0].image, sample_id="s1")

    def test_reference_pool_required(self, small_world):
        with pytest.raises(StrategyUnavailable, match="reference_pool"):
            build_auxiliary(("reference",), small_world.samples[0].image, model=small_world.model)

    def test_seeds_depend_on_sample(self, rng):
        x = random_image(rng)
        a = build_auxiliary(("random-patches",), x, seed=0, sample_id="a")
        b = build_auxiliary(("random-patches",), x, seed=0, sample_id="a")
        c = build_auxiliary(("random-patches",), x, seed=0, sample_id="b")
        assert a.offsets == b.offsets and a.offsets != c.offsets

    def test_empty_set_rejected(self):
        with pytest.raises(InvalidArgument):
            AuxiliaryImageSet((), "shuffle")


class TestAugmentPolicy:
    def test_view_zero_is_identity(self, rng):
        x = random_image(rng)
        np.testing.assert_array_equal(AugmentPolicy().view(x, 5, 0), x)

    def test_deterministic_per_index(self, rng):
        x = random_image(rng)
        p = AugmentPolicy()
        np.testing.assert_array_equal(p.view(x, 5, 3), p.view(x, 5, 3))
        np.testing.assert_array_equal(p.views(x, 5, 6)[4], p.view(x, 5, 4))

    def test_views_stay_in_range(self, rng):
        x = random_image(rng)
        for v in AugmentPolicy(ops_per_view=3, magnitude=30).views(x, 1, 20):
            assert v.shape == x.shape and v.min() >= 0.0 and v.max() <= 1.0

    @pytest.mark.parametrize("op", ALL_OPS)
    def test_single_op(self, rng, op):
        x = random_image(rng)
        v = AugmentPolicy(ops_per_view=1, magnitude=9, ops=(op,)).view(x, 0, 1)
        assert v.shape == x.shape and not np.array_equal(v, x)

    def test_identity_policy(self, rng):
        x = random_image(rng)
        np.testing.assert_array_equal(IDENTITY.view(x, 0, 7), x)

    @pytest.mark.parametrize("kwargs", [{"magnitude": 31}, {"ops_per_view": -1}, {"ops": ("blur",)}])
    def test_validation(self, kwargs):
        with pytest.raises(InvalidArgument):
            AugmentPolicy(**kwargs)


class TestDeriveSeed:
    def test_stable(self):
        assert derive_seed(0, "a", "keep") == derive_seed(0, "a", "keep")
        assert derive_seed(0, "a", "keep") != derive_seed(0, "b", "keep")
        assert 0 <= derive_seed("x") < 2**63
