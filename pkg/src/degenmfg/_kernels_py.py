"""Pure numpy versions of the compiled kernels (used when the extension is absent)."""

import numpy as np


def w2_sq_sorted_1d(a, b):
    a = np.ascontiguousarray(a, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    na, nb = a.size, b.size
    # integer breakpoints on the grid of step 1/(na*nb)
    cuts = np.union1d(np.arange(1, na + 1) * nb, np.arange(1, nb + 1) * na)
    starts = np.concatenate(([0], cuts[:-1]))
    ia = starts // nb
    ib = starts // na
    return float(np.sum((a[ia] - b[ib]) ** 2 * (cuts - starts)) / (na * nb))


def poly_design(y, exps):
    y = np.asarray(y, dtype=float)
    exps = np.asarray(exps)
    return np.prod(y[:, None, :] ** exps[None, :, :], axis=2)
