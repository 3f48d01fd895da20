"""Binary-Poisson measurement likelihood and its derivatives.

A jot with threshold q fires (b = 1) when its Poisson(lam) photoelectron
count reaches q, so the "on" probability is the upper tail

    p(q, lam) = P(N >= q),  N ~ Poisson(lam).

The negative log-likelihood of a frame stack is the sum over jots and
frames of -b*log(p) - (1-b)*log(1-p).  Everything here is evaluated in
a cancellation-free way across the full dynamic range (lam from 1e-6 up
to ~1e5, q from 1 to a few thousand):

  * the lower tail log(1-p) is a log-sum-exp over the q head terms of
    the Poisson pmf (never a 1-p subtraction),
  * the upper tail uses the direct pmf series when lam < q/2 (all terms
    positive, geometric decay) and -expm1(log(1-p)) otherwise,
  * derivatives use the identity d/dlam P(N >= q) = pmf(q-1; lam), so
    gradient and Hessian reduce to ratios of pmf to tail masses that are
    formed in log space.

Per-measurement work is shared across frames by grouping each jot's K
bits into on/off counts (identical (q, b) pairs are counted, not
re-evaluated).
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammainc, gammaincc, gammaln

from .errors import DimensionMismatchError

# Rates are clamped to this floor before likelihood evaluation so that
# -log p stays finite when b = 1 and the iterate approaches zero.
EPS_LAMBDA = 1e-6

# Largest threshold handled by the explicit pmf recurrence; beyond it the
# regularized incomplete-gamma path takes over.
_RECURRENCE_QMAX = 32

_LOG_TINY = -745.0  # log of the smallest positive normal double, roughly


def _tail_quantities(q, lam):
    """Return (p, log_p, log_cdf, log_pmf_qm1) elementwise.

    p        = P(N >= q)
    log_cdf  = log P(N <= q-1)      (the b = 0 mass)
    log_pmf_qm1 = log pmf(q-1; lam) (the derivative of p w.r.t. lam)

    Requires q >= 1 elementwise; lam may be 0 (then p = 0 exactly).
    """
    q = np.asarray(q)
    lam = np.asarray(lam, dtype=np.float64)
    if not np.issubdtype(q.dtype, np.integer):
        qi = np.asarray(q, dtype=np.int64)
        if not np.array_equal(qi, q):
            raise ValueError("thresholds must be integers")
        q = qi
    if np.any(q < 1):
        raise ValueError("thresholds must satisfy q >= 1")
    if np.any(lam < 0):
        raise ValueError("rates must be nonnegative")

    q_b, lam_b = np.broadcast_arrays(q, lam)
    shape = q_b.shape
    qf = q_b.reshape(-1).astype(np.int64)
    lf = lam_b.reshape(-1).astype(np.float64)

    p = np.empty(qf.shape)
    log_p = np.empty(qf.shape)
    log_cdf = np.empty(qf.shape)
    log_pmf_qm1 = np.empty(qf.shape)

    zero = lf == 0.0
    work = ~zero
    if np.any(zero):
        # Poisson(0) puts all mass at 0: never reaches q >= 1.
        p[zero] = 0.0
        log_p[zero] = -np.inf
        log_cdf[zero] = 0.0
        log_pmf_qm1[zero] = np.where(qf[zero] == 1, 0.0, -np.inf)

    if np.any(work):
        qw, lw = qf[work], lf[work]
        small = qw <= _RECURRENCE_QMAX
        pw = np.empty(qw.shape)
        lpw = np.empty(qw.shape)
        lcw = np.empty(qw.shape)
        lqm1 = np.empty(qw.shape)
        if np.any(small):
            r = _tail_recurrence(qw[small], lw[small])
            pw[small], lpw[small], lcw[small], lqm1[small] = r
        if np.any(~small):
            r = _tail_gamma(qw[~small], lw[~small])
            pw[~small], lpw[~small], lcw[~small], lqm1[~small] = r
        p[work], log_p[work], log_cdf[work], log_pmf_qm1[work] = pw, lpw, lcw, lqm1

    return (p.reshape(shape), log_p.reshape(shape),
            log_cdf.reshape(shape), log_pmf_qm1.reshape(shape))


def _tail_recurrence(q, lam):
    """Tail masses via the explicit pmf recurrence (q <= 32, lam > 0).

    Lanes are bucketed by their exact threshold so each bucket runs a
    fixed-length recurrence with no per-lane masking; the head sum runs
    in linear space (all terms positive, no transcendentals) for rates
    up to 300 and falls back to a log-sum-exp chain above that.
    """
    p = np.empty_like(lam)
    log_p = np.empty_like(lam)
    log_cdf = np.empty_like(lam)
    log_pmf_qm1 = np.empty_like(lam)
    for qv in np.unique(q):
        sel = np.where(q == qv)[0]
        r = _tail_bucket(int(qv), lam[sel])
        p[sel], log_p[sel], log_cdf[sel], log_pmf_qm1[sel] = r
    return p, log_p, log_cdf, log_pmf_qm1


def _tail_bucket(qv, lam):
    """Tail masses for one fixed threshold value."""
    log_l = np.log(lam)
    lpmf_qm1 = -lam + (qv - 1) * log_l - gammaln(qv)
    # Head mass: S = sum_{n<q} lam^n/n! by a plain positive recurrence.
    # S <= e^lam stays in range for lam <= ~700; beyond 300 the final
    # -lam + log(S) subtraction starts costing absolute precision, so
    # those (rare) lanes redo the sum as a log-sum-exp chain.
    S = np.ones_like(lam)
    term = np.ones_like(lam)
    for n in range(1, qv):
        term = term * lam / n
        S = S + term
    log_cdf = -lam + np.log(S)
    big = lam > 300.0
    if np.any(big):
        lb = lam[big]
        log_term = -lb
        acc = log_term.copy()
        for n in range(1, qv):
            log_term = log_term + np.log(lb) - np.log(n)
            acc = np.logaddexp(acc, log_term)
        log_cdf[big] = acc

    lpmf_q = lpmf_qm1 + log_l - np.log(qv)
    direct = lam < 0.5 * qv
    with np.errstate(divide="ignore", invalid="ignore"):
        if np.any(direct):
            series = _tail_series_subset(qv, lam, direct)
            p_direct = np.exp(lpmf_q) * series
            log_p_direct = lpmf_q + np.log(series)
        cdf_head = np.exp(log_cdf)
        log_p = np.log1p(-cdf_head)
        p = -np.expm1(log_cdf)
        if np.any(direct):
            p[direct] = p_direct[direct]
            log_p[direct] = log_p_direct[direct]
            if qv > 1:
                # for q = 1 the single-term head -lam is already exact
                log_cdf[direct] = np.log1p(-p_direct[direct])
    if qv == 1:
        # closed form 1 - exp(-lam), exact to machine precision
        p = -np.expm1(-lam)
    return p, log_p, log_cdf, lpmf_qm1


def _tail_series_subset(qv, lam, mask, rtol=1e-18, max_terms=128):
    """S = 1 + lam/(q+1) + ... on masked lanes, compacting as they
    converge (terms shrink at least 2x per step on this branch)."""
    out = np.ones_like(lam)
    idx = np.where(mask)[0]
    l_act = lam[idx]
    term = np.ones(idx.size)
    total = np.ones(idx.size)
    for j in range(1, max_terms):
        term = term * l_act / (qv + j)
        total = total + term
        live = term > rtol * total
        if not live.all():
            done = ~live
            out[idx[done]] = total[done]
            idx, l_act = idx[live], l_act[live]
            term, total = term[live], total[live]
            if idx.size == 0:
                break
    if idx.size:
        out[idx] = total
    return out


def _tail_series(q, lam, mask, rtol=1e-18, max_terms=128):
    """S = 1 + lam/(q+1) + lam^2/((q+1)(q+2)) + ... on masked lanes."""
    series = np.ones_like(lam)
    term = np.ones_like(lam)
    ratio_den = q.astype(np.float64)
    for j in range(1, max_terms):
        term = term * lam / (ratio_den + j)
        series = series + term
        active = mask & (term > rtol * series)
        if not np.any(active):
            break
    return series


def _tail_gamma(q, lam):
    """Tail masses for q > 32 via regularized incomplete gamma functions."""
    qd = q.astype(np.float64)
    # P(N >= q) = P(Gamma(q, 1) <= lam).
    p = gammainc(qd, lam)
    cdf = gammaincc(qd, lam)
    log_pmf_qm1 = -lam + (qd - 1.0) * np.log(lam) - gammaln(qd)
    log_pmf_q = log_pmf_qm1 + np.log(lam) - np.log(qd)

    # Take the log of whichever mass is the small (relatively precise) one.
    with np.errstate(divide="ignore"):
        log_p = np.where(p <= 0.5, np.log(p), np.log1p(-cdf))
        log_cdf = np.where(cdf <= 0.5, np.log(cdf), np.log1p(-p))

    # p underflowed: only possible for lam << q, where the direct series
    # converges in a couple of terms.
    under_p = log_p < _LOG_TINY
    if np.any(under_p):
        series = _tail_series(q, lam, under_p)
        log_p = np.where(under_p, log_pmf_q + np.log(series), log_p)
    # cdf underflowed: only possible for lam >> q, where the descending
    # factorial series for the head converges geometrically.
    under_c = log_cdf < _LOG_TINY
    if np.any(under_c):
        idx = np.where(under_c)[0]
        lam_u = lam[idx]
        fac = qd[idx] - 1.0
        head = np.ones(idx.size)
        term = np.ones(idx.size)
        for _ in range(256):
            # the descending factorial series is finite: it ends at fac=0
            term = term * np.maximum(fac, 0.0) / lam_u
            head = head + term
            fac = fac - 1.0
            if not np.any(term > 1e-18 * head):
                break
        log_cdf[idx] = log_pmf_qm1[idx] + np.log(head)
    return p, log_p, log_cdf, log_pmf_qm1


def tail_prob(q, lam):
    """P(Poisson(lam) >= q), the "on" probability of a jot.

    Accepts scalars or arrays (broadcast together).  q must be a positive
    integer; lam any nonnegative rate.
    """
    p, _, _, _ = _tail_quantities(q, lam)
    if np.isscalar(lam) and np.isscalar(q):
        return float(p)
    return p


def _clamp(lam):
    return np.maximum(np.asarray(lam, dtype=np.float64), EPS_LAMBDA)


def nll_terms(lam, q, n_on, n_off):
    """Elementwise -n_on*log(p) - n_off*log(1-p) at clamped rates."""
    lam = _clamp(lam)
    _, log_p, log_cdf, _ = _tail_quantities(q, lam)
    n_on = np.asarray(n_on)
    n_off = np.asarray(n_off)
    # Zero counts must contribute exactly 0 even if the log is -inf.
    lp = np.where(n_on > 0, log_p, 0.0)
    lc = np.where(n_off > 0, log_cdf, 0.0)
    return -(n_on * lp + n_off * lc)


def grad_terms(lam, q, n_on, n_off):
    """Elementwise d/dlam of nll_terms at clamped rates.

    Per on-bit the contribution is -pmf(q-1)/p; per off-bit +pmf(q-1)/(1-p).
    """
    lam = _clamp(lam)
    _, log_p, log_cdf, log_pmf_qm1 = _tail_quantities(q, lam)
    r_on = np.exp(log_pmf_qm1 - log_p)
    r_off = np.exp(log_pmf_qm1 - log_cdf)
    return np.asarray(n_off) * r_off - np.asarray(n_on) * r_on


def measurement_terms(lam, q, n_on, n_off):
    """Fused elementwise (nll, grad, hess) from one tail evaluation.

    Exactly nll_terms / grad_terms / hess_terms, but the shared tail
    masses are computed once; this is the hot path of the patch solvers.
    """
    lam = _clamp(lam)
    q = np.asarray(q)
    n_on = np.asarray(n_on)
    n_off = np.asarray(n_off)
    _, log_p, log_cdf, log_pmf_qm1 = _tail_quantities(q, lam)
    lp = np.where(n_on > 0, log_p, 0.0)
    lc = np.where(n_off > 0, log_cdf, 0.0)
    nll = -(n_on * lp + n_off * lc)
    r_on = np.exp(log_pmf_qm1 - log_p)
    r_off = np.exp(log_pmf_qm1 - log_cdf)
    grad = n_off * r_off - n_on * r_on
    c = (q - 1.0) / lam - 1.0
    hess = n_on * (r_on * (r_on - c)) + n_off * (r_off * (r_off + c))
    return nll, grad, hess


def hess_terms(lam, q, n_on, n_off):
    """Elementwise d^2/dlam^2 of nll_terms at clamped rates.

    With r = pmf(q-1)/mass and c = (q-1)/lam - 1 (from the pmf ratio
    pmf(q-2)/pmf(q-1) = (q-1)/lam):

        b = 1:  r1^2 - c*r1
        b = 0:  r0^2 + c*r0

    Both are nonnegative (the tail and head masses are log-concave in lam).
    """
    lam = _clamp(lam)
    q = np.asarray(q)
    _, log_p, log_cdf, log_pmf_qm1 = _tail_quantities(q, lam)
    r_on = np.exp(log_pmf_qm1 - log_p)
    r_off = np.exp(log_pmf_qm1 - log_cdf)
    c = (q - 1.0) / lam - 1.0
    h_on = r_on * (r_on - c)
    h_off = r_off * (r_off + c)
    return np.asarray(n_on) * h_on + np.asarray(n_off) * h_off


def _counts(stack):
    frames = stack.frames
    n_on = frames.sum(axis=0, dtype=np.int64)
    return n_on, stack.num_frames - n_on


def _check_field(lam, stack):
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape != stack.thresholds.shape:
        raise DimensionMismatchError(
            f"rate field {lam.shape} does not match jot grid "
            f"{stack.thresholds.shape}")
    return lam


def neg_log_likelihood(lam, stack):
    """Negative log-likelihood of a frame stack at jot rates lam.

    The additive constant of the measurement model is dropped; the value
    is a plain sum over jots and frames.
    """
    lam = _check_field(lam, stack)
    n_on, n_off = _counts(stack)
    return float(np.sum(nll_terms(lam, stack.thresholds, n_on, n_off)))


def grad_lambda(lam, stack):
    """Gradient of neg_log_likelihood w.r.t. each jot rate (same shape)."""
    lam = _check_field(lam, stack)
    n_on, n_off = _counts(stack)
    return grad_terms(lam, stack.thresholds, n_on, n_off)


def hess_lambda(lam, stack):
    """Diagonal Hessian of neg_log_likelihood w.r.t. the jot rates."""
    lam = _check_field(lam, stack)
    n_on, n_off = _counts(stack)
    return hess_terms(lam, stack.thresholds, n_on, n_off)


def lipschitz_bound(stack, lam_max, lam_min=EPS_LAMBDA, grid_points=512):
    """Safe upper bound on the curvature of the per-jot likelihood.

    Evaluates the per-measurement second derivative for every (q, b)
    combination present in the stack on a dense log grid over
    [lam_min, lam_max], takes the max, applies a 2x safety factor, and
    scales by the frame count (curvature adds over frames).  A tiny floor
    keeps the bound positive for curvature-free stacks (e.g. q=1, b=0).
    """
    if lam_max <= lam_min:
        raise ValueError("lam_max must exceed lam_min")
    n_on, _ = _counts(stack)
    qs_on = np.unique(stack.thresholds[n_on > 0])
    qs_off = np.unique(stack.thresholds[n_on < stack.num_frames])
    grid = np.geomspace(max(lam_min, EPS_LAMBDA), lam_max, grid_points)
    worst = 0.0
    if qs_on.size:
        h = hess_terms(grid[None, :], qs_on[:, None], 1, 0)
        worst = max(worst, float(h.max()))
    if qs_off.size:
        h = hess_terms(grid[None, :], qs_off[:, None], 0, 1)
        worst = max(worst, float(h.max()))
    return 2.0 * stack.num_frames * max(worst, 1e-12)
