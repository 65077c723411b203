"""Hot inner loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``L2L_USE_NUMBA`` is not set to ``0``. Both paths compute the same
quantities; summation order can differ, so results agree to rounding only.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba = None


def _numba_requested():
    return os.environ.get("L2L_USE_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = numba is not None and _numba_requested()


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def im2col_np(xp, kh, kw, stride, ho, wo):
    """Patches of a padded NHWC batch -> (B, ho, wo, kh*kw*C)."""
    b, _, _, c = xp.shape
    sb, sh, sw, sc = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, ho, wo, kh, kw, c),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return view.reshape(b, ho, wo, kh * kw * c)


def col2im_np(cols, hp, wp, c, kh, kw, stride):
    b, ho, wo, _ = cols.shape
    out = np.zeros((b, hp, wp, c))
    patches = cols.reshape(b, ho, wo, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += patches[:, :, :, i, j, :]
    return out


def scatter_add_rows_np(table_shape, ids, src):
    out = np.zeros(table_shape)
    np.add.at(out, ids, src)
    return out


def bayes_posterior_np(visible, observed, attr_map, n_factors, flip_eps, prior):
    """P(y_j = 1 | visible labels) by enumerating all 2**K latent settings."""
    n, m = visible.shape
    configs = (np.arange(2 ** n_factors)[:, None] >> np.arange(n_factors)[None, :]) & 1
    zc = configs[:, attr_map]  # (2**K, M) latent value seen by each attribute
    log_prior = np.where(configs == 1, np.log(prior), np.log1p(-prior)).sum(axis=1)
    agree = np.log1p(-flip_eps) if flip_eps < 1 else -np.inf
    disagree = np.log(flip_eps) if flip_eps > 0 else -np.inf
    # (N, 2**K, M) per-attribute likelihood of the observed value
    match = observed[:, None, :] == zc[None, :, :]
    ll = np.where(match, agree, disagree)
    ll = np.where(visible[:, None, :], ll, 0.0).sum(axis=2) + log_prior[None, :]
    ll -= ll.max(axis=1, keepdims=True)
    wz = np.exp(ll)
    wz /= wz.sum(axis=1, keepdims=True)
    p_one_given_z = np.where(zc == 1, 1.0 - flip_eps, flip_eps)  # (2**K, M)
    q = wz @ p_one_given_z
    return np.where(visible, observed.astype(np.float64), q)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if numba is not None:

    @numba.njit(cache=True)
    def _im2col_nb(xp, kh, kw, stride, ho, wo):
        b, _, _, c = xp.shape
        out = np.empty((b, ho, wo, kh * kw * c))
        for n in range(b):
            for oy in range(ho):
                for ox in range(wo):
                    col = 0
                    for i in range(kh):
                        for j in range(kw):
                            for ch in range(c):
                                out[n, oy, ox, col] = xp[n, oy * stride + i, ox * stride + j, ch]
                                col += 1
        return out

    @numba.njit(cache=True)
    def _col2im_nb(cols, hp, wp, c, kh, kw, stride):
        b, ho, wo, _ = cols.shape
        out = np.zeros((b, hp, wp, c))
        for n in range(b):
            for oy in range(ho):
                for ox in range(wo):
                    col = 0
                    for i in range(kh):
                        for j in range(kw):
                            for ch in range(c):
                                out[n, oy * stride + i, ox * stride + j, ch] += cols[n, oy, ox, col]
                                col += 1
        return out

    @numba.njit(cache=True)
    def _scatter_add_rows_nb(n_rows, ids, src):
        out = np.zeros((n_rows, src.shape[1]))
        for r in range(ids.shape[0]):
            row = ids[r]
            for k in range(src.shape[1]):
                out[row, k] += src[r, k]
        return out

    @numba.njit(cache=True)
    def _bayes_posterior_nb(visible, observed, attr_map, n_factors, flip_eps, prior):
        n, m = visible.shape
        n_cfg = 1 << n_factors
        log_p1 = np.log(prior)
        log_p0 = np.log1p(-prior)
        agree = np.log1p(-flip_eps) if flip_eps < 1.0 else -np.inf
        disagree = np.log(flip_eps) if flip_eps > 0.0 else -np.inf
        q = np.empty((n, m))
        ll = np.empty(n_cfg)
        for s in range(n):
            best = -np.inf
            for cfg in range(n_cfg):
                acc = 0.0
                for k in range(n_factors):
                    acc += log_p1 if (cfg >> k) & 1 else log_p0
                for j in range(m):
                    if visible[s, j]:
                        z = (cfg >> attr_map[j]) & 1
                        acc += agree if observed[s, j] == z else disagree
                ll[cfg] = acc
                if acc > best:
                    best = acc
            total = 0.0
            for cfg in range(n_cfg):
                ll[cfg] = np.exp(ll[cfg] - best)
                total += ll[cfg]
            for j in range(m):
                if visible[s, j]:
                    q[s, j] = float(observed[s, j])
                else:
                    acc = 0.0
                    for cfg in range(n_cfg):
                        z = (cfg >> attr_map[j]) & 1
                        acc += ll[cfg] * ((1.0 - flip_eps) if z == 1 else flip_eps)
                    q[s, j] = acc / total
        return q


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def im2col(xp, kh, kw, stride, ho, wo):
    # the strided-view copy beats the compiled loop (see benchmarks/), so both modes use it
    return im2col_np(xp, kh, kw, stride, ho, wo)


def col2im(cols, hp, wp, c, kh, kw, stride):
    if USE_NUMBA:
        return _col2im_nb(np.ascontiguousarray(cols), hp, wp, c, kh, kw, stride)
    return col2im_np(cols, hp, wp, c, kh, kw, stride)


def scatter_add_rows(n_rows, ids, src):
    """Sum ``src`` rows into an (n_rows, d) zero table at ``ids`` (repeats accumulate)."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    src = np.asarray(src, dtype=np.float64).reshape(ids.shape[0], -1)
    if USE_NUMBA:
        return _scatter_add_rows_nb(n_rows, ids, np.ascontiguousarray(src))
    return scatter_add_rows_np((n_rows, src.shape[1]), ids, src)


def bayes_posterior(visible, observed, attr_map, n_factors, flip_eps, prior=0.5):
    visible = np.asarray(visible, dtype=np.bool_)
    observed = np.asarray(observed, dtype=np.int64)
    attr_map = np.asarray(attr_map, dtype=np.int64)
    if USE_NUMBA:
        return _bayes_posterior_nb(visible, observed, attr_map, int(n_factors), float(flip_eps), float(prior))
    return bayes_posterior_np(visible, observed, attr_map, int(n_factors), float(flip_eps), float(prior))
