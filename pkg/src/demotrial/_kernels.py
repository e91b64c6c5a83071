"""Compiled samplers and survival quadrature.

These kernels implement the same adaptive Metropolis-within-Gibbs scheme
as sampler.run_chain but specialized per model so the inner loops compile
to machine code. All randomness is pre-drawn by the calling wrapper
(one proposal normal per parameter per iteration, one acceptance uniform
per block per iteration), so a kernel is a pure deterministic function of
(data, priors, init, scales, random arrays) — replaying with the same
seed reproduces draws bit for bit, jitted or not.

Parameters live on an unconstrained scale z; positive parameters enter
as exp(z) with the prior expressed directly on z (for Gamma(a, b) priors
on x = e^z the density with Jacobian is a*z - b*e^z up to constants).
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

ADAPT_DECAY = 0.6


def predraw(seed, n_iter, n_params, n_blocks):
    """Pre-draw all proposal normals and acceptance uniforms for a kernel.

    seed may be an int or a numpy SeedSequence; the stream is Philox, so
    draws are reproducible across platforms and processes.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    return (rng.standard_normal((n_iter, n_params)),
            rng.random((n_iter, n_blocks)))


@njit(cache=True)
def _log1pexp(x):
    if x > 35.0:
        return x
    if x < -35.0:
        return math.exp(x)
    return math.log1p(math.exp(x))


@njit(cache=True)
def _rm_gain(it):
    return (1.0 + it) ** -ADAPT_DECAY


@njit(cache=True)
def _accept_prob(delta):
    # A proposal whose density is undefined (NaN from inf*0 in some
    # likelihood term) is rejected outright; returning NaN here would
    # poison the scale adaptation.
    if math.isnan(delta):
        return 0.0
    if delta >= 0.0:
        return 1.0
    return math.exp(delta)


# ---------------------------------------------------------------------------
# Generic Bernoulli-logistic chain (stage-1 toxicity; biomarker-free
# comparator models). Coefficient k is positive (exp-transformed, normal
# prior on the log) when flags[k] == 1, otherwise real with normal prior.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _logistic_ll(X, y, w):
    ll = 0.0
    n, K = X.shape
    for i in range(n):
        lin = 0.0
        for k in range(K):
            lin += X[i, k] * w[k]
        ll += y[i] * lin - _log1pexp(lin)
    return ll


@njit(cache=True)
def logistic_chain(X, y, flags, pm, pv, z0, s0, n_burn, n_keep, thin,
                   target, normals, uniforms):
    K = z0.shape[0]
    n_iter = n_burn + n_keep * thin
    z = z0.copy()
    log_s = np.log(s0)
    w = np.empty(K)
    for k in range(K):
        w[k] = math.exp(z[k]) if flags[k] == 1 else z[k]
    ll_cur = _logistic_ll(X, y, w)
    draws = np.empty((n_keep, K))
    accepts = np.zeros(K)
    kept = 0
    for it in range(n_iter):
        for k in range(K):
            zn = z[k] + math.exp(log_s[k]) * normals[it, k]
            w_old = w[k]
            w[k] = math.exp(zn) if flags[k] == 1 else zn
            ll_new = _logistic_ll(X, y, w)
            dpr = (-(zn - pm[k]) ** 2 + (z[k] - pm[k]) ** 2) / (2.0 * pv[k])
            delta = ll_new - ll_cur + dpr
            alpha = _accept_prob(delta)
            if uniforms[it, k] < alpha:
                z[k] = zn
                ll_cur = ll_new
                accepts[k] += 1.0
            else:
                w[k] = w_old
            if it < n_burn:
                log_s[k] += _rm_gain(it) * (alpha - target)
        if it >= n_burn and (it - n_burn) % thin == thin - 1:
            for k in range(K):
                draws[kept, k] = z[k]
            kept += 1
    return draws, accepts / n_iter, np.exp(log_s)


# ---------------------------------------------------------------------------
# Joint biomarker/toxicity/response chain.
#
# z layout (12): 0 gamma0, 1 log gamma1, 2 log gamma2, 3 log gamma3,
# 4 log zetaB (biomarker precision), 5 alpha0, 6 beta0, 7 log alpha1,
# 8 log alpha2, 9 beta1, 10 beta2, 11 beta3.
# Blocks (11): params 0..4 scalar, (5,6) paired, 7..11 scalar.
#
# prior layout (25): 0 m_g0, 1 v_g0, 2 a_g1, 3 b_g1, 4 a_g2, 5 b_g2,
# 6 a_g3, 7 b_g3, 8 a_z, 9 b_z, 10 m_a0, 11 v_a0, 12 m_b0, 13 v_b0,
# 14 rho0, 15 m_la1, 16 v_la1, 17 m_la2, 18 v_la2, 19 m_b1, 20 v_b1,
# 21 m_b2, 22 v_b2, 23 m_b3, 24 v_b3.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _emax(d, g0, g1, lg2, g3):
    # saturating fraction d^g3 / (g2^g3 + d^g3) evaluated on the log
    # scale as a logistic in g3*(log d - log g2); the direct power form
    # hits 0/0 when both terms underflow (tiny g2 or huge g3)
    if d <= 0.0:
        return g0
    t = g3 * (math.log(d) - lg2)
    if t > 0.0:
        f = 1.0 / (1.0 + math.exp(-t))
    else:
        et = math.exp(t)
        f = et / (1.0 + et)
    return g0 + g1 * f


@njit(cache=True)
def _f_bio(bd, by, z):
    g0 = z[0]
    g1 = math.exp(z[1])
    lg2 = z[2]
    g3 = math.exp(z[3])
    zeta = math.exp(z[4])
    lz = z[4]
    ll = 0.0
    for i in range(bd.shape[0]):
        r = by[i] - _emax(bd[i], g0, g1, lg2, g3)
        ll += 0.5 * lz - 0.5 * zeta * r * r
    return ll


@njit(cache=True)
def _f_tox(td, tb, ty, z):
    a0 = z[5]
    a1 = math.exp(z[7])
    a2 = math.exp(z[8])
    ll = 0.0
    for i in range(td.shape[0]):
        lin = a0 + a1 * td[i] + a2 * tb[i]
        ll += ty[i] * lin - _log1pexp(lin)
    return ll


@njit(cache=True)
def _f_resp(rd, rb, ry, z):
    b0 = z[6]
    b1 = z[9]
    b2 = z[10]
    b3 = z[11]
    ll = 0.0
    for i in range(rd.shape[0]):
        lin = b0 + b1 * rd[i] + b2 * rd[i] * rd[i] + b3 * rb[i]
        ll += ry[i] * lin - _log1pexp(lin)
    return ll


@njit(cache=True)
def _joint_prior_scalar(k, zk, prior):
    # log prior density for scalar parameter slot k evaluated at z-value zk
    if k == 0:
        return -((zk - prior[0]) ** 2) / (2.0 * prior[1])
    if k == 1:
        return prior[2] * zk - prior[3] * math.exp(zk)
    if k == 2:
        return prior[4] * zk - prior[5] * math.exp(zk)
    if k == 3:
        return prior[6] * zk - prior[7] * math.exp(zk)
    if k == 4:
        return prior[8] * zk - prior[9] * math.exp(zk)
    if k == 7:
        return -((zk - prior[15]) ** 2) / (2.0 * prior[16])
    if k == 8:
        return -((zk - prior[17]) ** 2) / (2.0 * prior[18])
    if k == 9:
        return -((zk - prior[19]) ** 2) / (2.0 * prior[20])
    if k == 10:
        return -((zk - prior[21]) ** 2) / (2.0 * prior[22])
    return -((zk - prior[23]) ** 2) / (2.0 * prior[24])


@njit(cache=True)
def _intercept_prior(a0, b0, prior):
    u = (a0 - prior[10]) / math.sqrt(prior[11])
    v = (b0 - prior[12]) / math.sqrt(prior[13])
    r = prior[14]
    return -(u * u - 2.0 * r * u * v + v * v) / (2.0 * (1.0 - r * r))


@njit(cache=True)
def joint_chain(bd, by, td, tb, ty, rd, rb, ry, prior, z0, s0,
                n_burn, n_keep, thin, target, normals, uniforms):
    n_iter = n_burn + n_keep * thin
    z = z0.copy()
    log_s = np.log(s0)  # 11 block scales
    fB = _f_bio(bd, by, z)
    fT = _f_tox(td, tb, ty, z)
    fR = _f_resp(rd, rb, ry, z)
    draws = np.empty((n_keep, 12))
    accepts = np.zeros(11)
    kept = 0
    for it in range(n_iter):
        # blocks 0..4: biomarker factor
        for blk in range(5):
            k = blk
            zn = z[k] + math.exp(log_s[blk]) * normals[it, k]
            zo = z[k]
            z[k] = zn
            fB_new = _f_bio(bd, by, z)
            delta = (fB_new - fB
                     + _joint_prior_scalar(k, zn, prior)
                     - _joint_prior_scalar(k, zo, prior))
            alpha = _accept_prob(delta)
            if uniforms[it, blk] < alpha:
                fB = fB_new
                accepts[blk] += 1.0
            else:
                z[k] = zo
            if it < n_burn:
                log_s[blk] += _rm_gain(it) * (alpha - target)
        # block 5: (alpha0, beta0) jointly — touches both logistic factors
        s5 = math.exp(log_s[5])
        a0o, b0o = z[5], z[6]
        z[5] = a0o + s5 * normals[it, 5]
        z[6] = b0o + s5 * normals[it, 6]
        fT_new = _f_tox(td, tb, ty, z)
        fR_new = _f_resp(rd, rb, ry, z)
        delta = (fT_new + fR_new - fT - fR
                 + _intercept_prior(z[5], z[6], prior)
                 - _intercept_prior(a0o, b0o, prior))
        alpha = _accept_prob(delta)
        if uniforms[it, 5] < alpha:
            fT = fT_new
            fR = fR_new
            accepts[5] += 1.0
        else:
            z[5] = a0o
            z[6] = b0o
        if it < n_burn:
            log_s[5] += _rm_gain(it) * (alpha - target)
        # blocks 6,7: toxicity slopes; blocks 8..10: response coefficients
        for blk in range(6, 11):
            k = blk + 1
            zn = z[k] + math.exp(log_s[blk]) * normals[it, k]
            zo = z[k]
            z[k] = zn
            if blk < 8:
                f_new = _f_tox(td, tb, ty, z)
                f_cur = fT
            else:
                f_new = _f_resp(rd, rb, ry, z)
                f_cur = fR
            delta = (f_new - f_cur
                     + _joint_prior_scalar(k, zn, prior)
                     - _joint_prior_scalar(k, zo, prior))
            alpha = _accept_prob(delta)
            if uniforms[it, blk] < alpha:
                if blk < 8:
                    fT = f_new
                else:
                    fR = f_new
                accepts[blk] += 1.0
            else:
                z[k] = zo
            if it < n_burn:
                log_s[blk] += _rm_gain(it) * (alpha - target)
        if it >= n_burn and (it - n_burn) % thin == thin - 1:
            for k in range(12):
                draws[kept, k] = z[k]
            kept += 1
    return draws, accepts / n_iter, np.exp(log_s)


# ---------------------------------------------------------------------------
# Weibull survival chain with per-dose scales.
#
# z layout (1 + J + n_eta): 0 log rho, 1..J log lambda_j, then eta1, eta2
# (and eta3 when use_b). All blocks scalar.
# prior layout (4): 0 a_rho, 1 b_rho, 2 v_loglambda, 3 v_eta.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _f_surv(sj, sb, su, sv, st, se, use_b, z, J):
    rho = math.exp(z[0])
    lrho = z[0]
    n_eta = 3 if use_b == 1 else 2
    e1 = z[1 + J]
    e2 = z[2 + J]
    e3 = z[3 + J] if n_eta == 3 else 0.0
    ll = 0.0
    for i in range(sj.shape[0]):
        j = sj[i]
        llam = z[1 + j]
        lin = e1 * su[i] + e2 * sv[i]
        if use_b == 1:
            lin += e3 * sb[i]
        cum = math.exp(llam + lin) * math.pow(st[i], rho)
        ll -= cum
        if se[i] == 1:
            ll += llam + lrho + (rho - 1.0) * math.log(st[i]) + lin
    return ll


@njit(cache=True)
def _surv_prior_scalar(k, zk, prior, J):
    if k == 0:
        return prior[0] * zk - prior[1] * math.exp(zk)
    if k <= J:
        return -(zk * zk) / (2.0 * prior[2])
    return -(zk * zk) / (2.0 * prior[3])


@njit(cache=True)
def surv_chain(sj, sb, su, sv, st, se, J, use_b, prior, z0, s0,
               n_burn, n_keep, thin, target, normals, uniforms):
    P = z0.shape[0]
    n_iter = n_burn + n_keep * thin
    z = z0.copy()
    log_s = np.log(s0)
    fS = _f_surv(sj, sb, su, sv, st, se, use_b, z, J)
    draws = np.empty((n_keep, P))
    accepts = np.zeros(P)
    kept = 0
    for it in range(n_iter):
        for k in range(P):
            zn = z[k] + math.exp(log_s[k]) * normals[it, k]
            zo = z[k]
            z[k] = zn
            fS_new = _f_surv(sj, sb, su, sv, st, se, use_b, z, J)
            delta = (fS_new - fS
                     + _surv_prior_scalar(k, zn, prior, J)
                     - _surv_prior_scalar(k, zo, prior, J))
            alpha = _accept_prob(delta)
            if uniforms[it, k] < alpha:
                fS = fS_new
                accepts[k] += 1.0
            else:
                z[k] = zo
            if it < n_burn:
                log_s[k] += _rm_gain(it) * (alpha - target)
        if it >= n_burn and (it - n_burn) % thin == thin - 1:
            for k in range(P):
                draws[kept, k] = z[k]
            kept += 1
    return draws, accepts / n_iter, np.exp(log_s)


# ---------------------------------------------------------------------------
# Restricted-mean integral: integral_0^t exp(-Lam * y^rho) dy by adaptive
# Simpson (iterative, absolute tolerance, depth-capped).
# ---------------------------------------------------------------------------


@njit(cache=True)
def _wexp(lam_eff, rho, y):
    return math.exp(-lam_eff * math.pow(y, rho))


@njit(cache=True)
def rmst_integral(lam_eff, rho, t_s, tol, max_depth):
    if t_s <= 0.0:
        return 0.0
    cap = 64
    st_a = np.empty(cap)
    st_fa = np.empty(cap)
    st_m = np.empty(cap)
    st_fm = np.empty(cap)
    st_b = np.empty(cap)
    st_fb = np.empty(cap)
    st_s = np.empty(cap)
    st_tol = np.empty(cap)
    st_d = np.empty(cap, dtype=np.int64)
    a = 0.0
    b = t_s
    fa = 1.0
    fb = _wexp(lam_eff, rho, b)
    m = 0.5 * (a + b)
    fm = _wexp(lam_eff, rho, m)
    st_a[0] = a
    st_fa[0] = fa
    st_m[0] = m
    st_fm[0] = fm
    st_b[0] = b
    st_fb[0] = fb
    st_s[0] = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    st_tol[0] = tol
    st_d[0] = 0
    top = 1
    total = 0.0
    while top > 0:
        top -= 1
        a = st_a[top]
        fa = st_fa[top]
        m = st_m[top]
        fm = st_fm[top]
        b = st_b[top]
        fb = st_fb[top]
        s_whole = st_s[top]
        tl = st_tol[top]
        d = st_d[top]
        lm = 0.5 * (a + m)
        flm = _wexp(lam_eff, rho, lm)
        rm = 0.5 * (m + b)
        frm = _wexp(lam_eff, rho, rm)
        s1 = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        s2 = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        err = s1 + s2 - s_whole
        if abs(err) <= 15.0 * tl or d >= max_depth or top + 2 > cap:
            total += s1 + s2 + err / 15.0
        else:
            st_a[top] = a
            st_fa[top] = fa
            st_m[top] = lm
            st_fm[top] = flm
            st_b[top] = m
            st_fb[top] = fm
            st_s[top] = s1
            st_tol[top] = 0.5 * tl
            st_d[top] = d + 1
            top += 1
            st_a[top] = m
            st_fa[top] = fm
            st_m[top] = rm
            st_fm[top] = frm
            st_b[top] = b
            st_fb[top] = fb
            st_s[top] = s2
            st_tol[top] = 0.5 * tl
            st_d[top] = d + 1
            top += 1
    return total


@njit(cache=True)
def rmst_for_draws(lam, rho, eta1, eta2, eta3, b_hat, pi_cells, t_s, tol,
                   max_depth):
    """Per-draw restricted mean over the four (y_T, y_R) outcome cells.

    pi_cells is indexed 2*u + v for (u, v) = (y_T, y_R); lam is the
    per-draw scale of one dose; eta3/b_hat enter only via their product.
    """
    n = lam.shape[0]
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for u in range(2):
            for v in range(2):
                w = pi_cells[2 * u + v]
                if w == 0.0:
                    continue
                lam_eff = lam[i] * math.exp(
                    eta1[i] * u + eta2[i] * v + eta3[i] * b_hat)
                acc += w * rmst_integral(lam_eff, rho[i], t_s, tol, max_depth)
        out[i] = acc
    return out
