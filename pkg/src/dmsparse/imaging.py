"""Patch-based sparse-coding image reconstruction and dictionary learning."""

from __future__ import annotations

import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import Dictionary, ShapeError, _rank_revealing_gram_solve, read_matrix, write_matrix
from .probgen import snr_db, stream_rng
from .projections import DEFAULT_BETA, SparsitySet, check_beta, hard_threshold
from .solvers import RecoveryProblem, SolverConfig, solve

#: half-width of the signed range shown by :func:`difference_image`
DIFF_RANGE = 0.3


class PGMError(ValueError):
    """Malformed or unsupported PGM data; ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte {offset})"
        super().__init__(message)


class UnsupportedFormatError(PGMError):
    pass


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Grayscale image, pixels in [0, 1], shape ``(height, width)``."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise ShapeError(f"image must be a non-empty 2-D array, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixels must lie in [0, 1]")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]


# -- PGM I/O ----------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_fields(data):
    pos = 0
    fields = []
    for _ in range(4):
        match = _TOKEN.match(data, pos)
        if match is None:
            raise PGMError("truncated header", len(data))
        fields.append((match.group(1), match.start(1)))
        pos = match.end(1)
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise PGMError("missing whitespace after maxval", pos)
    return fields, pos + 1


def parse_pgm(data):
    fields, start = _header_fields(data)
    magic, off = fields[0]
    if magic != b"P5":
        raise UnsupportedFormatError(f"expected binary PGM magic 'P5', got {magic!r}", off)
    values = []
    for token, off in fields[1:]:
        if not token.isdigit():
            raise PGMError(f"bad header field {token!r}", off)
        values.append(int(token))
    width, height, maxval = values
    if width == 0 or height == 0:
        raise PGMError("zero image dimension", fields[1][1])
    if maxval != 255:
        raise UnsupportedFormatError(f"only maxval 255 is supported, got {maxval}", fields[3][1])
    need = width * height
    payload = data[start : start + need]
    if len(payload) < need:
        raise PGMError(f"truncated payload: expected {need} bytes, got {len(payload)}", start + len(payload))
    px = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return GrayImage(px / 255.0)


def read_pgm(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    try:
        return parse_pgm(data)
    except PGMError as exc:
        raise type(exc)(f"{path}: {exc.args[0]}") from None


def to_bytes(img):
    return np.rint(np.clip(img.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(img, path):
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    try:
        Path(path).write_bytes(header + to_bytes(img).tobytes())
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


# -- tiling -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PatchGrid:
    """Non-overlapping ``w x w`` tiles of an image, in row-major tile order.

    ``patches`` holds one flattened tile per row (mean removed when
    ``centered``), ``raw`` the tiles as cut, ``padded`` flags tiles that
    needed edge replication.
    """

    patch_w: int
    rows_of_patches: int
    cols_of_patches: int
    patches: np.ndarray
    means: np.ndarray
    raw: np.ndarray
    padded: np.ndarray
    height: int
    width: int
    centered: bool = True

    def __len__(self):
        return self.patches.shape[0]


def tile(img, w, subtract_mean=True):
    w = int(w)
    if w < 1:
        raise ValueError("patch width must be positive")
    H, W = img.height, img.width
    if w > H and w > W:
        raise ValueError(f"patch width {w} exceeds both image dimensions {W}x{H}")
    rows = -(-H // w)
    cols = -(-W // w)
    px = np.pad(img.pixels, ((0, rows * w - H), (0, cols * w - W)), mode="edge")
    raw = px.reshape(rows, w, cols, w).transpose(0, 2, 1, 3).reshape(rows * cols, w * w)
    padded = np.zeros((rows, cols), dtype=bool)
    if rows * w > H:
        padded[-1, :] = True
    if cols * w > W:
        padded[:, -1] = True
    if subtract_mean:
        means = raw.mean(axis=1)
        # the float mean of a flat tile can miss its value by an ulp
        flat = raw.min(axis=1) == raw.max(axis=1)
        means[flat] = raw[flat, 0]
        patches = raw - means[:, None]
    else:
        means = np.zeros(raw.shape[0])
        patches = raw.copy()
    return PatchGrid(w, rows, cols, patches, means, raw, padded.ravel(), H, W, subtract_mean)


def untile(grid, patches=None):
    """Reassemble an image from a grid.

    Without ``patches`` the tiles as cut are reused, which is exact. Given
    coded ``patches`` (mean removed, same layout), the stored means are
    added back. The result is cropped to the original size and clamped.
    """
    if patches is None:
        full = grid.raw
    else:
        patches = np.asarray(patches, dtype=np.float64)
        if patches.shape != grid.patches.shape:
            raise ShapeError(f"expected patches of shape {grid.patches.shape}, got {patches.shape}")
        full = patches + grid.means[:, None]
    w = grid.patch_w
    px = full.reshape(grid.rows_of_patches, grid.cols_of_patches, w, w).transpose(0, 2, 1, 3)
    px = px.reshape(grid.rows_of_patches * w, grid.cols_of_patches * w)[: grid.height, : grid.width]
    return GrayImage(np.clip(px, 0.0, 1.0))


# -- reconstruction ---------------------------------------------------------


def reconstruct_patch(trace, A, dictionary, t, mean=0.0):
    """``Phi @ H_s(x_t) + mean`` for the last snapshot ``x_t`` at or before ``t``.

    Raises ``LookupError`` when the trace has no snapshot that early.
    """
    snap = trace.at(t)
    x = hard_threshold(snap.estimate, A.s)
    return dictionary.matrix @ x + mean


@dataclass(eq=False)
class ImageReconstruction:
    image: GrayImage
    per_patch_snr: list
    overall_snr_db: float
    precompute_seconds: float
    wall_seconds: float
    solver: str


def reconstruct_image(img, dictionary, solver="dm", cfg=SolverConfig(), s=None, subtract_mean=True, workers=1):
    """Code every tile of ``img`` independently and reassemble it.

    Each tile gets ``cfg.time_budget`` seconds and is read out at that time.
    The dictionary's pseudo-inverse is computed once up front and shared by
    all tiles, so ``cfg.amortize_precompute`` must be set. Results are
    ordered by tile index whatever the number of ``workers``.
    """
    if not cfg.amortize_precompute:
        raise ValueError("image reconstruction shares one pseudo-inverse; set amortize_precompute")
    d, K = dictionary.shape
    w = math.isqrt(d)
    if w * w != d:
        raise ShapeError(f"dictionary rows ({d}) are not a square patch size")
    s = K if s is None else int(s)
    A = SparsitySet(s, K)
    start = time.perf_counter()
    pre = dictionary.pinv.seconds if solver in ("dm", "am") else 0.0
    grid = tile(img, w, subtract_mean)

    def code(i):
        problem = RecoveryProblem(dictionary, grid.patches[i], A)
        trace = solve(solver, problem, cfg)
        return reconstruct_patch(trace, A, dictionary, cfg.time_budget, grid.means[i])

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            coded = list(pool.map(code, range(len(grid))))
    else:
        coded = [code(i) for i in range(len(grid))]
    coded = np.clip(np.array(coded), 0.0, 1.0)
    per_patch = [snr_db(grid.raw[i], coded[i]) for i in range(len(grid))]
    out = untile(grid, coded - grid.means[:, None])
    overall = snr_db(img.pixels.ravel(), out.pixels.ravel())
    return ImageReconstruction(out, per_patch, overall, pre, time.perf_counter() - start, solver)


def difference_image(original, recon):
    """Signed error mapped to gray: 0.5 is exact, +/-0.3 saturate to white/black."""
    if original.pixels.shape != recon.pixels.shape:
        raise ShapeError(f"image sizes differ: {original.pixels.shape} vs {recon.pixels.shape}")
    diff = recon.pixels - original.pixels
    return GrayImage(np.clip((diff + DIFF_RANGE) / (2 * DIFF_RANGE), 0.0, 1.0))


# -- batched DM coding ------------------------------------------------------


def hard_threshold_columns(X, s):
    """Column-wise :func:`hard_threshold` with the same lower-index tie rule."""
    n = X.shape[0]
    if s >= n:
        return X.copy()
    mag = np.abs(X)
    cutoff = np.partition(mag, n - s, axis=0)[n - s]
    above = mag > cutoff
    short = s - above.sum(axis=0)
    at = mag == cutoff
    keep = above | (at & (np.cumsum(at, axis=0) <= short))
    return np.where(keep, X, 0.0)


def dm_code(dictionary, Y, s, beta=DEFAULT_BETA, max_iters=500, monitor_tol=None, time_budget=None):
    """Difference Map sparse codes for the columns of ``Y`` in one batch.

    Same update and readout as :func:`~dmsparse.solvers.dm_solve` with the
    fidelity set first: a column that reaches the monitor tolerance keeps
    its fixed-point estimate, the others report the hard-thresholded
    weighted mean of ``P_B(f_A(x))``. Returns ``(codes, converged_mask)``.
    """
    beta = -check_beta(beta)
    Phi = dictionary.matrix
    pinv = dictionary.pinv.matrix
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] != Phi.shape[0]:
        raise ShapeError(f"expected signals as columns with {Phi.shape[0]} rows, got {Y.shape}")
    n = Phi.shape[1]
    N = Y.shape[1]
    tol = 1e-7 * math.sqrt(n) if monitor_tol is None else monitor_tol
    inv_beta = 1.0 / beta
    deadline = None if time_budget is None else time.perf_counter() + time_budget

    codes = np.zeros((n, N))
    converged = np.zeros(N, dtype=bool)
    active = np.arange(N)
    Ya = Y
    X = pinv @ Y
    acc = np.zeros_like(X)
    weight = 0.0
    for it in range(1, max_iters + 1):
        pa = hard_threshold_columns(X, s)
        Phix = Phi @ X
        Phi_pa = Phi @ pa
        corr_x = pinv @ (Phix - Ya)
        corr_fa = pinv @ ((1.0 - inv_beta) * Phi_pa + inv_beta * Phix - Ya)
        f_a = pa - (pa - X) * inv_beta
        pa_fb = hard_threshold_columns(X - (1.0 + inv_beta) * corr_x, s)
        pb_fa = f_a - corr_fa
        diff = pa_fb - pb_fa
        weight += it
        acc += it * pb_fa
        done = np.linalg.norm(diff, axis=0) <= tol
        if np.any(done):
            codes[:, active[done]] = pa_fb[:, done]
            converged[active[done]] = True
            keep = ~done
            active, Ya, X, acc = active[keep], Ya[:, keep], X[:, keep], acc[:, keep]
            diff = diff[:, keep]
            if active.size == 0:
                break
        X = X + beta * diff
        if deadline is not None and time.perf_counter() >= deadline:
            break
    if active.size:
        codes[:, active] = hard_threshold_columns(acc / weight, s)
    return codes, converged


# -- dictionary learning ----------------------------------------------------


@dataclass(eq=False)
class LearnedDictionary:
    dictionary: Dictionary
    num_patches: int
    iterations: int
    avg_nonzeros: float
    rel_error: float
    history: list = field(default_factory=list)

    @property
    def atom_norms(self):
        return self.dictionary.column_norms

    @property
    def patch_w(self):
        return math.isqrt(self.dictionary.rows)


def mod_update(Y, X):
    """Least-squares dictionary for fixed codes: ``Y X^T (X X^T)^+``."""
    G = X @ X.T
    D_T, _ = _rank_revealing_gram_solve(0.5 * (G + G.T), X @ Y.T)
    return D_T.T


def refit_codes(Phi, Y, X, s):
    """Least-squares coefficients on the ``s`` largest entries of each code column."""
    K, N = X.shape
    s = min(s, K)
    supp = np.argsort(-np.abs(X), axis=0, kind="stable")[:s].T
    A = Phi[:, supp].transpose(1, 0, 2)
    G = np.einsum("nds,ndt->nst", A, A) + 1e-12 * np.eye(s)
    b = np.einsum("nds,dn->ns", A, Y)
    coef = np.linalg.solve(G, b[..., None])[..., 0]
    out = np.zeros((N, K))
    np.put_along_axis(out, supp, coef, axis=1)
    return out.T


def _normalize(Phi, X):
    """Unit-norm atoms with codes rescaled inversely; zero atoms are flagged dead."""
    scale = np.linalg.norm(Phi, axis=0)
    live = scale > 1e-12
    Phi = Phi.copy()
    X = X.copy()
    Phi[:, live] /= scale[live]
    X[live] *= scale[live, None]
    X[~live] = 0.0
    return Phi, X, live


def _two_directions(E):
    """Split the columns of ``E`` into two sign-free clusters; unit direction of each."""
    U, _, _ = np.linalg.svd(E, full_matrices=False)
    Z = U[:, :2].T @ E
    theta = np.arctan2(Z[1], Z[0])
    weight = Z[0] ** 2 + Z[1] ** 2
    # lines through the origin: cluster on the doubled angle
    v = np.stack([np.cos(2 * theta), np.sin(2 * theta)])
    centres = np.array([[1.0, -1.0], [0.0, 0.0]])
    label = np.zeros(E.shape[1], dtype=int)
    for _ in range(30):
        label = np.argmax(centres.T @ v, axis=0)
        for k in range(2):
            m = (v[:, label == k] * weight[label == k]).sum(axis=1)
            if np.linalg.norm(m) > 0:
                centres[:, k] = m / np.linalg.norm(m)
    out = []
    for k in range(2):
        part = E[:, label == k]
        if part.shape[1] == 0:
            return None
        out.append(np.linalg.svd(part, full_matrices=False)[0][:, 0])
    return np.stack(out, axis=1)


def _split_candidate(Y, Phi, X):
    """Split the atom whose patches fit worst, overwriting the least useful atom.

    Such an atom usually straddles two true atoms; its users' error matrix
    (residual plus the atom's own contribution) then falls into two line
    clusters, one per underlying atom. Returns ``None`` when nothing splits.
    """
    R = Y - Phi @ X
    counts = np.count_nonzero(X, axis=1)
    worst, worst_score = -1, -np.inf
    for i in np.flatnonzero(counts >= 4):
        users = np.flatnonzero(X[i])
        score = np.sum(R[:, users] ** 2) / users.size
        if score > worst_score:
            worst, worst_score = int(i), score
    if worst < 0:
        return None
    users = np.flatnonzero(X[worst])
    E = R[:, users] + np.outer(Phi[:, worst], X[worst, users])
    dirs = _two_directions(E)
    if dirs is None:
        return None
    utility = np.sum(X**2, axis=1)
    utility[worst] = np.inf
    spare = int(np.argmin(utility))
    Phi = Phi.copy()
    X = X.copy()
    Phi[:, worst], Phi[:, spare] = dirs[:, 0], dirs[:, 1]
    X[[worst, spare]] = 0.0
    return Phi, X


def learn_dictionary(patches, n_atoms, s_train, iters=20, seed=0, coder_iters=60, beta=DEFAULT_BETA,
                     extrapolate=1.0, split=True, callback=None):
    """Alternate DM sparse coding with method-of-optimal-directions updates.

    ``patches`` has one training vector per row. Each alternation codes
    every patch with DM (coefficients refit by least squares on the DM
    support), applies the MOD update and renormalizes the atoms. Two
    safeguarded moves speed it up: splitting an atom that serves two
    directions, and an over-relaxed step along the last dictionary change.
    Each is kept only if it lowers the error. If fresh codes would raise
    the error, each patch keeps whichever code fits better, so the
    recorded training error never increases. Unused atoms are re-seeded
    from the residuals of the worst-fit patches.
    """
    Y = np.asarray(patches, dtype=np.float64).T
    d, N = Y.shape
    K = int(n_atoms)
    if K <= d:
        raise ValueError(f"need an overcomplete dictionary (atoms {K} > patch length {d})")
    if N < K:
        raise ValueError(f"need at least as many patches ({N}) as atoms ({K})")
    if not (0 < s_train <= d):
        raise ValueError(f"s_train must be in 1..{d}")
    norm_y = float(np.linalg.norm(Y))
    if norm_y == 0.0:
        raise ValueError("training patches are all zero")

    rng = stream_rng(seed, 0)
    Phi = Y[:, rng.choice(N, size=K, replace=False)].copy()
    dead = np.linalg.norm(Phi, axis=0) < 1e-12
    Phi[:, dead] = rng.standard_normal((d, int(dead.sum())))
    Phi /= np.linalg.norm(Phi, axis=0)

    def rel(P, C):
        return float(np.linalg.norm(Y - P @ C)) / norm_y


    def alternate(P, C_old, last):
        C = refit_codes(P, Y, dm_code(Dictionary(P), Y, s_train, beta=beta, max_iters=coder_iters)[0], s_train)
        result = _mod_step(P, C)
        if result[2] > last:
            keep = np.sum((Y - P @ C) ** 2, axis=0) >= np.sum((Y - P @ C_old) ** 2, axis=0)
            C[:, keep] = C_old[:, keep]
            result = _mod_step(P, C)
        return result

    def _mod_step(P, C):
        used = np.any(C != 0, axis=1)
        P_new = P.copy()
        if used.any():
            P_new[:, used] = mod_update(Y, C[used])
        P_new, C, live = _normalize(P_new, C)
        dead = np.flatnonzero(~(used & live))
        if dead.size:
            resid = Y - P_new @ C
            worst = np.argsort(-np.sum(resid**2, axis=0), kind="stable")[: dead.size]
            seeds = resid[:, worst]
            fresh = np.linalg.norm(seeds, axis=0) < 1e-12
            seeds[:, fresh] = rng.standard_normal((d, int(fresh.sum())))
            P_new[:, dead] = seeds / np.linalg.norm(seeds, axis=0)
            C[dead] = 0.0
        return P_new, C, rel(P_new, C)

    X = np.zeros((K, N))
    last = math.inf
    history = []
    for it in range(iters):
        Phi_new, X_new, err = alternate(Phi, X, last)
        moved = False
        if split and it > 0:
            cand = _split_candidate(Y, Phi, X)
            if cand is not None:
                P_c, X_c, err_c = alternate(cand[0], cand[1], last)
                if err_c < err:
                    Phi_new, X_new, err, moved = P_c, X_c, err_c, True
        if extrapolate and it > 0 and not moved:
            for gamma in (extrapolate, extrapolate / 2):
                P_c = Phi_new + gamma * (Phi_new - Phi)
                P_c, X_c, live = _normalize(P_c, X_new)
                if not live.all():
                    continue
                X_c = refit_codes(P_c, Y, X_c, s_train)
                err_c = rel(P_c, X_c)
                if err_c <= last:
                    Phi_new, X_new, err = P_c, X_c, err_c
                    break
        Phi, X, last = Phi_new, X_new, err
        history.append(err)
        if callback is not None:
            callback(len(history), err)
    avg_nnz = float(np.count_nonzero(X) / N)
    final = history[-1] if history else math.nan
    meta = {"num_patches": N, "iterations": iters, "avg_nonzeros": avg_nnz, "rel_error": final}
    return LearnedDictionary(Dictionary(Phi, meta=meta), N, iters, avg_nnz, final, history)


def sample_patches(images, w, count, seed=0, subtract_mean=True):
    """Random ``w x w`` training patches (rows) drawn from a list of images."""
    rng = stream_rng(seed, 3)
    picks = rng.integers(len(images), size=count)
    out = np.empty((count, w * w))
    for k, i in enumerate(picks):
        px = images[i].pixels
        r = rng.integers(px.shape[0] - w + 1)
        c = rng.integers(px.shape[1] - w + 1)
        patch = px[r : r + w, c : c + w].ravel()
        out[k] = patch - patch.mean() if subtract_mean else patch
    return out


# -- dictionary file ---------------------------------------------------------


def write_dictionary(dictionary, path):
    d, K = dictionary.shape
    w = math.isqrt(d)
    write_matrix(dictionary.matrix, path, header=f"atoms {K}x{d} patch_w={w}")


def read_dictionary(path):
    data, comments = read_matrix(path)
    for line in comments:
        match = re.match(r"atoms\s+(\d+)x(\d+)\s+patch_w=(\d+)", line)
        if match:
            K, d, w = (int(g) for g in match.groups())
            if data.shape != (d, K) or w * w != d:
                raise ValueError(f"{path}: header says {K} atoms of {d}={w}x{w}, matrix is {data.shape}")
            break
    else:
        raise ValueError(f"{path}: missing '# atoms KxD patch_w=...' header")
    return Dictionary(data, meta={"patch_w": w})
