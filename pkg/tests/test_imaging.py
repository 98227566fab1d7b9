import math
import warnings

import numpy as np
import pytest

from dmsparse.imaging import (
    GrayImage,
    PGMError,
    UnsupportedFormatError,
    difference_image,
    dm_code,
    hard_threshold_columns,
    learn_dictionary,
    mod_update,
    parse_pgm,
    read_dictionary,
    read_pgm,
    reconstruct_image,
    reconstruct_patch,
    refit_codes,
    sample_patches,
    tile,
    untile,
    write_dictionary,
    write_pgm,
)
from dmsparse.linalg import Dictionary, ShapeError
from dmsparse.probgen import ProblemSpec, gen_dictionary
from dmsparse.projections import SparsitySet, hard_threshold
from dmsparse.solvers import SolverConfig, Snapshot, SolverTrace


@pytest.fixture(autouse=True)
def _quiet_rank_warning():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


def pgm_bytes(width, height, payload, maxval=255):
    return f"P5\n{width} {height}\n{maxval}\n".encode() + bytes(payload)


def random_image(rng, h, w):
    return GrayImage(rng.integers(0, 256, size=(h, w)) / 255.0)


# -- PGM --------------------------------------------------------------------


def test_pgm_pixel_mapping():
    img = parse_pgm(pgm_bytes(2, 2, [0, 255, 128, 64]))
    assert img.width == 2 and img.height == 2
    assert np.array_equal(img.pixels.ravel(), [0, 1, 128 / 255, 64 / 255])


def test_pgm_header_comments_and_whitespace():
    data = b"P5 # magic\n# a comment line\n3\t1\n255\r" + bytes([1, 2, 3])
    assert np.array_equal(parse_pgm(data).pixels.ravel() * 255, [1, 2, 3])


def test_pgm_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for k in range(5):
        raw = rng.integers(0, 256, size=(int(rng.integers(1, 30)), int(rng.integers(1, 30))), dtype=np.uint8)
        path = tmp_path / f"r{k}.pgm"
        write_pgm(GrayImage(raw / 255.0), path)
        back = read_pgm(path)
        assert np.array_equal(np.rint(back.pixels * 255).astype(np.uint8), raw)
        write_pgm(back, tmp_path / "again.pgm")
        assert (tmp_path / "again.pgm").read_bytes() == path.read_bytes()


def test_pgm_rejects_other_maxval_and_magic():
    with pytest.raises(UnsupportedFormatError):
        parse_pgm(pgm_bytes(1, 1, [0, 0], maxval=65535))
    with pytest.raises(UnsupportedFormatError):
        parse_pgm(b"P2\n1 1\n255\n0\n")


def test_pgm_errors_carry_byte_offsets():
    with pytest.raises(PGMError) as info:
        parse_pgm(pgm_bytes(3, 3, [1, 2, 3]))
    assert info.value.offset == len(b"P5\n3 3\n255\n") + 3
    with pytest.raises(PGMError) as info:
        parse_pgm(b"P5\n3")
    assert info.value.offset is not None
    with pytest.raises(PGMError) as info:
        parse_pgm(b"P5\nx 3\n255\n")
    assert info.value.offset == 3
    with pytest.raises(PGMError):
        parse_pgm(pgm_bytes(0, 3, []))


def test_read_pgm_reports_path(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(PGMError, match="bad.pgm"):
        read_pgm(path)
    with pytest.raises(OSError, match="missing.pgm"):
        read_pgm(tmp_path / "missing.pgm")


def test_gray_image_validation():
    with pytest.raises(ValueError):
        GrayImage(np.array([[1.5]]))
    with pytest.raises(ShapeError):
        GrayImage(np.zeros(4))
    img = GrayImage(np.zeros((2, 3)))
    assert img.width == 3 and img.height == 2
    with pytest.raises(ValueError):
        img.pixels[0, 0] = 1.0


# -- tiling -----------------------------------------------------------------


def test_tile_counts_on_dog_sized_image():
    grid = tile(GrayImage(np.full((240, 320), 0.5)), 20)
    assert (grid.cols_of_patches, grid.rows_of_patches) == (16, 12)
    assert len(grid) == 192 and grid.patches.shape == (192, 400)
    assert not grid.padded.any()


def test_tile_constant_image():
    grid = tile(GrayImage(np.full((40, 40), 0.3)), 20)
    assert len(grid) == 4
    assert np.array_equal(grid.patches, np.zeros((4, 400)))
    assert np.array_equal(grid.means, np.full(4, 0.3))


def test_tile_is_row_major():
    px = np.arange(16, dtype=float).reshape(4, 4) / 15
    grid = tile(GrayImage(px), 2, subtract_mean=False)
    assert np.array_equal(grid.patches[1], px[0:2, 2:4].ravel())
    assert np.array_equal(grid.patches[2], px[2:4, 0:2].ravel())


def test_untile_tile_is_identity_on_divisible_sizes():
    rng = np.random.default_rng(1)
    img = random_image(rng, 24, 32)
    grid = tile(img, 8)
    assert np.array_equal(untile(grid).pixels, img.pixels)
    # re-adding the means is exact only up to rounding
    assert np.allclose(untile(grid, grid.patches).pixels, img.pixels, rtol=0, atol=1e-15)


def test_edge_tiles_are_replicated_and_cropped():
    rng = np.random.default_rng(2)
    img = random_image(rng, 10, 13)
    grid = tile(img, 4)
    assert (grid.rows_of_patches, grid.cols_of_patches) == (3, 4)
    assert grid.padded.reshape(3, 4)[:, -1].all() and grid.padded.reshape(3, 4)[-1].all()
    assert not grid.padded.reshape(3, 4)[:2, :3].any()
    # last column of the bottom-right tile repeats the image's last pixel
    corner = grid.raw[-1].reshape(4, 4)
    assert corner[-1, -1] == img.pixels[-1, -1]
    assert np.array_equal(untile(grid).pixels, img.pixels)


def test_tile_rejects_oversized_patch():
    with pytest.raises(ValueError):
        tile(GrayImage(np.zeros((5, 6))), 7)
    assert len(tile(GrayImage(np.zeros((5, 9))), 7)) == 2
    with pytest.raises(ValueError):
        tile(GrayImage(np.zeros((5, 6))), 0)


def test_untile_checks_patch_shape():
    grid = tile(GrayImage(np.zeros((4, 4))), 2)
    with pytest.raises(ShapeError):
        untile(grid, np.zeros((3, 4)))


# -- reconstruction ---------------------------------------------------------


def make_trace(estimates, times):
    trace = SolverTrace("dm")
    for k, (x, t) in enumerate(zip(estimates, times)):
        trace.snapshots.append(Snapshot(t, k, np.asarray(x, float), None, 0.0))
    return trace


def test_reconstruct_patch_uses_last_snapshot_before_t():
    D = Dictionary(np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 1.0]]))
    A = SparsitySet(1, 3)
    trace = make_trace([[5.0, 0.0, 0.0], [0.1, 0.0, 3.0]], [0.01, 0.05])
    assert np.array_equal(reconstruct_patch(trace, A, D, 0.02), [5.0, 0.0])
    assert np.array_equal(reconstruct_patch(trace, A, D, 1.0, mean=0.5), [6.5, 3.5])
    with pytest.raises(LookupError):
        reconstruct_patch(trace, A, D, 0.001)


def test_reconstruct_patch_sparse_estimate_untouched():
    D = Dictionary(np.random.default_rng(3).standard_normal((3, 6)))
    x = np.array([0.0, 2.0, 0.0, 0.0, -1.0, 0.0])
    trace = make_trace([x], [0.0])
    assert np.array_equal(reconstruct_patch(trace, SparsitySet(4, 6), D, 1.0), D.matrix @ x)
    zero = make_trace([np.zeros(6)], [0.0])
    assert np.array_equal(reconstruct_patch(zero, SparsitySet(2, 6), D, 1.0, mean=0.25), np.full(3, 0.25))


def synthetic_image(D, s, tiles, rng, scale=0.05):
    """Image whose centered tiles are exact s-sparse combinations of atoms of D."""
    d, K = D.shape
    w = math.isqrt(d)
    rows, cols = tiles
    px = np.zeros((rows * w, cols * w))
    for r in range(rows):
        for c in range(cols):
            x = np.zeros(K)
            x[rng.choice(K, s, replace=False)] = rng.uniform(0.5, 1.0, s) * rng.choice([-1, 1], s)
            patch = D.matrix @ x
            patch *= scale / np.abs(patch).max()
            px[r * w : (r + 1) * w, c * w : (c + 1) * w] = (0.5 + patch).reshape(w, w)
    return GrayImage(px)


def test_reconstruct_image_exact_on_synthetic_image():
    D = gen_dictionary(ProblemSpec(16, 40, 2, seed=4))
    img = synthetic_image(D, 2, (3, 4), np.random.default_rng(5))
    cfg = SolverConfig(time_budget=0.5, snapshot_period=1)
    rec = reconstruct_image(img, D, "dm", cfg, s=2)
    assert rec.overall_snr_db >= 40
    assert len(rec.per_patch_snr) == 12
    assert rec.image.pixels.shape == img.pixels.shape


def test_reconstruct_image_order_independent_of_workers():
    D = gen_dictionary(ProblemSpec(16, 40, 3, seed=6))
    img = random_image(np.random.default_rng(7), 12, 16)
    cfg = SolverConfig(time_budget=1.0, max_iters=50, snapshot_period=1)
    one = reconstruct_image(img, D, "omp", cfg, s=3)
    many = reconstruct_image(img, D, "omp", cfg, s=3, workers=4)
    assert np.array_equal(one.image.pixels, many.image.pixels)
    assert one.per_patch_snr == many.per_patch_snr


def test_reconstruct_image_output_is_clamped():
    D = gen_dictionary(ProblemSpec(16, 40, 3, seed=8))
    img = random_image(np.random.default_rng(9), 8, 8)
    rec = reconstruct_image(img, D, "niht", SolverConfig(time_budget=0.2, max_iters=20), s=3)
    assert rec.image.pixels.min() >= 0 and rec.image.pixels.max() <= 1


def test_reconstruct_image_preconditions():
    D = gen_dictionary(ProblemSpec(15, 40, 3, seed=8))
    img = GrayImage(np.zeros((8, 8)))
    with pytest.raises(ShapeError):
        reconstruct_image(img, D, "dm", SolverConfig(), s=3)
    D16 = gen_dictionary(ProblemSpec(16, 40, 3, seed=8))
    with pytest.raises(ValueError):
        reconstruct_image(img, D16, "dm", SolverConfig(amortize_precompute=False), s=3)


def test_difference_image_examples():
    base = GrayImage(np.array([[0.5, 0.5, 0.9]]))
    assert np.array_equal(difference_image(base, base).pixels, np.full((1, 3), 0.5))
    recon = GrayImage(np.array([[0.8, 0.1, 0.9]]))
    out = difference_image(base, recon).pixels
    assert np.isclose(out[0, 0], 1.0) and out[0, 1] == 0.0
    with pytest.raises(ShapeError):
        difference_image(base, GrayImage(np.zeros((3, 1))))


def test_difference_image_inverts_within_quantization(tmp_path):
    rng = np.random.default_rng(10)
    a = random_image(rng, 6, 6)
    b = GrayImage(np.clip(a.pixels + rng.uniform(-0.29, 0.29, a.pixels.shape), 0, 1))
    write_pgm(difference_image(a, b), tmp_path / "d.pgm")
    q = read_pgm(tmp_path / "d.pgm").pixels
    assert np.max(np.abs(q * 0.6 - 0.3 - (b.pixels - a.pixels))) <= 0.6 / 510 + 1e-12


# -- batched coding and dictionary learning ---------------------------------


def test_hard_threshold_columns_matches_vector_version():
    rng = np.random.default_rng(11)
    X = np.round(rng.standard_normal((9, 40)), 1)
    for s in (1, 3, 9):
        out = hard_threshold_columns(X, s)
        for j in range(X.shape[1]):
            assert np.array_equal(out[:, j], hard_threshold(X[:, j], s))


def test_dm_code_recovers_noise_free_codes():
    D = gen_dictionary(ProblemSpec(40, 100, 5, seed=12))
    rng = np.random.default_rng(13)
    X = np.zeros((100, 30))
    for j in range(30):
        X[rng.choice(100, 5, replace=False), j] = rng.standard_normal(5)
    codes, converged = dm_code(D, D.matrix @ X, 5, max_iters=3000, monitor_tol=1e-10)
    assert converged.mean() >= 0.8
    assert np.all(np.count_nonzero(codes, axis=0) <= 5)
    good = converged
    assert np.max(np.abs(codes[:, good] - X[:, good])) <= 1e-6


def test_dm_code_shape_check():
    D = gen_dictionary(ProblemSpec(10, 20, 2, seed=1))
    with pytest.raises(ShapeError):
        dm_code(D, np.zeros((9, 3)), 2)


def test_mod_update_is_least_squares():
    rng = np.random.default_rng(14)
    Y = rng.standard_normal((6, 50))
    X = rng.standard_normal((10, 50))
    Phi = mod_update(Y, X)
    ref = np.linalg.lstsq(X.T, Y.T, rcond=None)[0].T
    assert np.allclose(Phi, ref, atol=1e-10)


def test_refit_codes_keeps_support_and_is_optimal():
    rng = np.random.default_rng(15)
    Phi = rng.standard_normal((8, 20))
    Y = rng.standard_normal((8, 5))
    X = rng.standard_normal((20, 5))
    out = refit_codes(Phi, Y, X, 3)
    for j in range(5):
        supp = np.flatnonzero(hard_threshold(X[:, j], 3))
        assert np.array_equal(np.flatnonzero(out[:, j]), np.sort(supp))
        ref = np.linalg.lstsq(Phi[:, supp], Y[:, j], rcond=None)[0]
        assert np.allclose(out[supp, j], ref, atol=1e-8)


def test_learn_dictionary_complete_basis():
    # K = patch length: an orthonormal start with full sparsity fits exactly
    rng = np.random.default_rng(16)
    Y = rng.standard_normal((30, 4))
    learned = learn_dictionary_square(Y)
    assert learned.history[0] <= 1e-10


def learn_dictionary_square(patches):
    """The learner insists on K > d, so pad patches with a zero coordinate."""
    padded = np.hstack([patches, np.zeros((patches.shape[0], 1))])
    return learn_dictionary(padded, patches.shape[1] + 2, patches.shape[1], iters=1, seed=0)


def test_learn_dictionary_small_synthetic_problem():
    rng = np.random.default_rng(17)
    D = rng.standard_normal((16, 24))
    D /= np.linalg.norm(D, axis=0)
    X = np.zeros((24, 800))
    for j in range(800):
        X[rng.choice(24, 3, replace=False), j] = rng.standard_normal(3)
    learned = learn_dictionary((D @ X).T, 24, 3, iters=15, seed=1)
    hist = learned.history
    assert len(hist) == 15
    assert all(b <= a + 1e-6 for a, b in zip(hist, hist[1:]))
    assert hist[-1] < 0.1
    assert np.max(np.abs(learned.atom_norms - 1.0)) <= 1e-10
    assert learned.rel_error == hist[-1] and learned.patch_w == 4
    assert learned.dictionary.meta["num_patches"] == 800


def test_learn_dictionary_is_deterministic():
    Y = np.random.default_rng(18).standard_normal((200, 9))
    a = learn_dictionary(Y, 12, 2, iters=3, seed=4)
    b = learn_dictionary(Y, 12, 2, iters=3, seed=4)
    assert np.array_equal(a.dictionary.matrix, b.dictionary.matrix)
    assert a.history == b.history


def test_learn_dictionary_preconditions():
    Y = np.random.default_rng(19).standard_normal((50, 9))
    with pytest.raises(ValueError):
        learn_dictionary(Y, 9, 2)
    with pytest.raises(ValueError):
        learn_dictionary(Y[:10], 12, 2)
    with pytest.raises(ValueError):
        learn_dictionary(np.zeros((50, 9)), 12, 2)


def test_sample_patches():
    imgs = [random_image(np.random.default_rng(20), 12, 15)]
    P = sample_patches(imgs, 4, 30, seed=2)
    assert P.shape == (30, 16)
    assert np.allclose(P.mean(axis=1), 0, atol=1e-12)
    assert np.array_equal(P, sample_patches(imgs, 4, 30, seed=2))


def test_dictionary_file_round_trip(tmp_path):
    D = gen_dictionary(ProblemSpec(16, 40, 2, seed=21))
    write_dictionary(D, tmp_path / "d.mat")
    assert (tmp_path / "d.mat").read_text().startswith("# atoms 40x16 patch_w=4")
    back = read_dictionary(tmp_path / "d.mat")
    assert np.array_equal(back.matrix, D.matrix)
    assert back.meta["patch_w"] == 4


def test_dictionary_file_requires_header(tmp_path):
    (tmp_path / "d.mat").write_text("1 2\n3 4\n")
    with pytest.raises(ValueError, match="header"):
        read_dictionary(tmp_path / "d.mat")
    (tmp_path / "e.mat").write_text("# atoms 3x4 patch_w=2\n1 2\n3 4\n")
    with pytest.raises(ValueError):
        read_dictionary(tmp_path / "e.mat")
