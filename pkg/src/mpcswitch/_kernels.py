"""Forward-mode evaluation kernels for the tree and robust NLPs.

Each kernel evaluates an objective, its exact gradient, the inequality
constraints, and their Jacobian in one pass over the scenario tree, carrying
per-node derivative rows with respect to the ego input variables. Everything
the solver sees is C^1: the interaction-distance switch uses a logistic
blend, input clamping uses a softplus-based smooth clamp, path corners use a
softplus blend, and distances carry a small regularizer under the root.

The formulas here deliberately mirror the closed-form expressions in
`belief` and `opponent`; the smooth variants coincide with the exact ones
away from the switch/clamp/corner neighborhoods.
"""

import math

import numpy as np
from numba import njit

# selector codes for the tree kernel
GAIN_NONE = 0
GAIN_FIXED = 1
GAIN_PROPAGATED = 2


@njit(cache=True, inline="always")
def _softplus(z):
    if z > 30.0:
        return z
    if z < -30.0:
        return math.exp(z)
    return math.log1p(math.exp(z))


@njit(cache=True, inline="always")
def _sigmoid(z):
    if z >= 0.0:
        e = math.exp(-z)
        return 1.0 / (1.0 + e)
    e = math.exp(z)
    return e / (1.0 + e)


@njit(cache=True, inline="always")
def _smooth_clamp(x, lo, hi, w):
    """C-infinity clamp of x into [lo, hi]; returns (value, dvalue/dx)."""
    val = x - w * _softplus((x - hi) / w) + w * _softplus((lo - x) / w)
    der = 1.0 - _sigmoid((x - hi) / w) - _sigmoid((lo - x) / w)
    return val, der


@njit(cache=True, inline="always")
def _path_point(p0, dirs, corners, w, s):
    """Smooth polyline map: returns (x, y, dx/ds, dy/ds)."""
    x = p0[0] + dirs[0, 0] * s
    y = p0[1] + dirs[0, 1] * s
    dx = dirs[0, 0]
    dy = dirs[0, 1]
    for j in range(corners.shape[0]):
        z = (s - corners[j]) / w
        sp = w * _softplus(z)
        sg = _sigmoid(z)
        ax = dirs[j + 1, 0] - dirs[j, 0]
        ay = dirs[j + 1, 1] - dirs[j, 1]
        x += ax * sp
        y += ay * sp
        dx += ax * sg
        dy += ay * sg
    return x, y, dx, dy


@njit(cache=True)
def eval_tree(x, parent, var_of, child_ptr, child_idx, tsel,
              dnoise, uhat, reactive, use_belief, use_weights, gain_mode,
              se0, ve0, so0, vo0, bc0,
              e_p0, e_dirs, e_cor, o_p0, o_dirs, o_cor,
              dt, kg, th0, th1, dv, dint, vstar, sigma, blend, cornw, clampw,
              vfw, uo_lo, uo_hi, eps_d,
              qv, ru, qf, vref, dsafe_eff, margin_growth, gain_ce, gain_w):
    """Evaluate one tree formulation at input vector x.

    Returns (f, fg, g, J, wts, bc, se, ve, so, vo). g holds one safety
    constraint per non-root node (smooth distance minus effective safety
    radius, >= 0 feasible); the radius grows by margin_growth per second of
    depth to price the open-loop spread of the opponent prediction.
    wts/bc are the node reach weights and cautious beliefs actually used
    (fill values when the feature is off).
    """
    n_nodes = parent.shape[0]
    nvar = x.shape[0]
    dt2 = dt * dt
    sig2 = sigma * sigma

    se = np.zeros(n_nodes)
    ve = np.zeros(n_nodes)
    so = np.zeros(n_nodes)
    vo = np.zeros(n_nodes)
    seg = np.zeros((n_nodes, nvar))
    veg = np.zeros((n_nodes, nvar))
    sog = np.zeros((n_nodes, nvar))
    vog = np.zeros((n_nodes, nvar))
    dist = np.zeros(n_nodes)
    distg = np.zeros((n_nodes, nvar))
    # mu_theta evaluated at each node's own states (both hypotheses)
    muc = np.zeros(n_nodes)
    mua = np.zeros(n_nodes)
    mucg = np.zeros((n_nodes, nvar))
    muag = np.zeros((n_nodes, nvar))
    bc = np.full(n_nodes, bc0)
    bcg = np.zeros((n_nodes, nvar))
    lrho = np.zeros(n_nodes)
    lrhog = np.zeros((n_nodes, nvar))
    wts = np.ones(n_nodes)
    wtsg = np.zeros((n_nodes, nvar))

    g = np.zeros(n_nodes - 1)
    jac = np.zeros((n_nodes - 1, nvar))
    depth = np.zeros(n_nodes)

    se[0] = se0
    ve[0] = ve0
    so[0] = so0
    vo[0] = vo0

    for n in range(n_nodes):
        if n > 0:
            p = parent[n]
            depth[n] = depth[p] + 1.0
            iu = var_of[p]
            u_e = x[iu]
            se[n] = se[p] + ve[p] * dt + 0.5 * u_e * dt2
            ve[n] = ve[p] + u_e * dt
            for j in range(nvar):
                seg[n, j] = seg[p, j] + dt * veg[p, j]
                veg[n, j] = veg[p, j]
            seg[n, iu] += 0.5 * dt2
            veg[n, iu] += dt

            # opponent input on the edge p -> n
            if reactive:
                # mu_{theta_n} at parent states, smooth-clamped, plus noise
                if tsel[n] > 0.0:
                    mu_r = mua[p]
                else:
                    mu_r = muc[p]
                mu_cl, dcl = _smooth_clamp(mu_r, uo_lo, uo_hi, clampw)
                u_o = mu_cl + dnoise[n]
                for j in range(nvar):
                    if tsel[n] > 0.0:
                        mg = muag[p, j]
                    else:
                        mg = mucg[p, j]
                    vog[n, j] = vog[p, j] + dt * dcl * mg
                    sog[n, j] = sog[p, j] + dt * vog[p, j] + 0.5 * dt2 * dcl * mg
                so[n] = so[p] + vo[p] * dt + 0.5 * u_o * dt2
                vo[n] = vo[p] + u_o * dt
            else:
                # constant-estimate rollout, speed floored at standstill the
                # way the true opponent is (no ego dependence: zero gradient)
                v_raw = vo[p] + uhat[n] * dt
                vo[n] = vfw * _softplus(v_raw / vfw)
                so[n] = so[p] + 0.5 * dt * (vo[p] + vo[n])

        # positions, distance, distance gradient at node n
        ex, ey, edx, edy = _path_point(e_p0, e_dirs, e_cor, cornw, se[n])
        ox, oy, odx, ody = _path_point(o_p0, o_dirs, o_cor, cornw, so[n])
        ddx = ex - ox
        ddy = ey - oy
        dd = math.sqrt(ddx * ddx + ddy * ddy + eps_d * eps_d)
        dist[n] = dd
        for j in range(nvar):
            distg[n, j] = (ddx * (edx * seg[n, j] - odx * sog[n, j])
                           + ddy * (edy * seg[n, j] - ody * sog[n, j])) / dd
        if n > 0:
            g[n - 1] = dd - (dsafe_eff + margin_growth * depth[n] * dt)
            for j in range(nvar):
                jac[n - 1, j] = distg[n, j]

        # mu_theta at node-n states (used by children and by the belief /
        # weight densities, which evaluate at node states by construction)
        lam = _sigmoid((dint - dd) / blend)
        dlam = lam * (1.0 - lam) / blend  # d lam / d (-dd) -> chain with -distg
        far = kg * (vstar - vo[n])
        # speed targets floored at standstill (smooth max via softplus)
        zc = ve[n] + th0 * dv
        za = ve[n] + th1 * dv
        tc = vfw * _softplus(zc / vfw)
        ta = vfw * _softplus(za / vfw)
        stc = _sigmoid(zc / vfw)
        sta = _sigmoid(za / vfw)
        nc = kg * (tc - vo[n])
        na = kg * (ta - vo[n])
        muc[n] = lam * nc + (1.0 - lam) * far
        mua[n] = lam * na + (1.0 - lam) * far
        for j in range(nvar):
            farg = -kg * vog[n, j]
            ncg = kg * (stc * veg[n, j] - vog[n, j])
            nag = kg * (sta * veg[n, j] - vog[n, j])
            lamg = -dlam * distg[n, j]
            mucg[n, j] = lamg * (nc - far) + lam * ncg + (1.0 - lam) * farg
            muag[n, j] = lamg * (na - far) + lam * nag + (1.0 - lam) * farg

        if n > 0 and (use_belief or use_weights):
            p = parent[n]
            mc, dmc = _smooth_clamp(muc[n], uo_lo, uo_hi, clampw)
            ma, dma = _smooth_clamp(mua[n], uo_lo, uo_hi, clampw)
            # resolved input on the edge (recompute; cheap scalars)
            if reactive:
                if tsel[n] > 0.0:
                    mu_r = mua[p]
                else:
                    mu_r = muc[p]
                mu_cl, dcl = _smooth_clamp(mu_r, uo_lo, uo_hi, clampw)
                u_o = mu_cl + dnoise[n]
            else:
                u_o = uhat[n]
            rc = u_o - mc
            ra = u_o - ma
            llc = -0.5 * rc * rc / sig2
            lla = -0.5 * ra * ra / sig2
            bp = bc[p]
            if llc >= lla:
                ec = 1.0
                ea = math.exp(lla - llc)
            else:
                ec = math.exp(llc - lla)
                ea = 1.0
            numb = bp * ec
            den = numb + (1.0 - bp) * ea
            bc[n] = numb / den
            # marginal log-density for the reach weights
            mmax = llc if llc >= lla else lla
            lrho[n] = mmax + math.log(den)
            for j in range(nvar):
                if reactive:
                    if tsel[n] > 0.0:
                        mg = muag[p, j]
                    else:
                        mg = mucg[p, j]
                    uog = dcl * mg
                else:
                    uog = 0.0
                llcg = -(rc / sig2) * (uog - dmc * mucg[n, j])
                llag = -(ra / sig2) * (uog - dma * muag[n, j])
                mmaxg = llcg if llc >= lla else llag
                ecg = ec * (llcg - mmaxg)
                eag = ea * (llag - mmaxg)
                numbg = bcg[p, j] * ec + bp * ecg
                deng = numbg - bcg[p, j] * ea + (1.0 - bp) * eag
                bcg[n, j] = (numbg * den - numb * deng) / (den * den)
                lrhog[n, j] = mmaxg + deng / den

    # reach weights: transitions normalize sibling densities
    if use_weights:
        for p in range(n_nodes):
            lo = child_ptr[p]
            hi = child_ptr[p + 1]
            nch = hi - lo
            if nch == 0:
                continue
            if nch == 1:
                c = child_idx[lo]
                wts[c] = wts[p]
                for j in range(nvar):
                    wtsg[c, j] = wtsg[p, j]
                continue
            mmax = -1e300
            for k in range(lo, hi):
                if lrho[child_idx[k]] > mmax:
                    mmax = lrho[child_idx[k]]
            zsum = 0.0
            for k in range(lo, hi):
                zsum += math.exp(lrho[child_idx[k]] - mmax)
            for k in range(lo, hi):
                c = child_idx[k]
                t = math.exp(lrho[c] - mmax) / zsum
                wts[c] = wts[p] * t
                for j in range(nvar):
                    # d t = t * (dlrho_c - sum_k t_k dlrho_k)
                    acc = 0.0
                    for k2 in range(lo, hi):
                        c2 = child_idx[k2]
                        acc += math.exp(lrho[c2] - mmax) / zsum * lrhog[c2, j]
                    tg = t * (lrhog[c, j] - acc)
                    wtsg[c, j] = wtsg[p, j] * t + wts[p] * tg

    # objective
    f = 0.0
    fg = np.zeros(nvar)
    for n in range(n_nodes):
        iv = var_of[n]
        if iv >= 0:
            dve = ve[n] - vref
            c = qv * dve * dve + ru * x[iv] * x[iv]
        else:
            dve = ve[n] - vref
            c = qf * dve * dve
        wn = wts[n] if use_weights else 1.0
        f += wn * c
        for j in range(nvar):
            cg = (qv if iv >= 0 else qf) * 2.0 * dve * veg[n, j]
            fg[j] += wn * cg
            if use_weights:
                fg[j] += wtsg[n, j] * c
        if iv >= 0:
            fg[iv] += wn * ru * 2.0 * x[iv]
        if gain_mode != GAIN_NONE and n > 0:
            # the exploration reward is gated by a wide logistic in the
            # distance: informative observations only exist near d_int, so
            # approaching a far-away opponent must not pay anything
            d2 = dist[n] * dist[n]
            zg = (dist[n] - dint) / gain_w
            gate = 0.0 if zg > 60.0 else 1.0 / (1.0 + math.exp(zg))
            gterm = gate * (d2 - dint * dint)
            dterm = (-gate * (1.0 - gate) / gain_w) * (d2 - dint * dint) \
                + gate * 2.0 * dist[n]
            if gain_mode == GAIN_FIXED:
                coef = gain_ce
                f += coef * gterm
                for j in range(nvar):
                    fg[j] += coef * dterm * distg[n, j]
            else:
                coef = gain_ce * bc[n] * (1.0 - bc[n])
                f += coef * gterm
                for j in range(nvar):
                    coefg = gain_ce * (1.0 - 2.0 * bc[n]) * bcg[n, j]
                    fg[j] += coef * dterm * distg[n, j] + coefg * gterm

    return f, fg, g, jac, wts, bc, se, ve, so, vo


@njit(cache=True)
def eval_robust(x, se0, ve0,
                e_p0, e_dirs, e_cor,
                o_p0, o_dir0, o_cum0,
                opp_lo, opp_hi,
                dt, cornw, clampw, eps_d,
                qv, ru, qf, vref, dsafe_eff):
    """Evaluate the robust chain formulation at input vector x.

    The opponent is reduced to its reachable arc bracket [opp_lo_k, opp_hi_k]
    per step (precomputed outside from the extreme constant inputs). Three
    constraints per step: distance to each bracket endpoint and to the
    worst-case opponent arc, the closest point to the ego clamped into the
    bracket (exact for a straight opponent path, smooth at the interval
    edges). Returns (f, fg, g, J, se, ve).
    """
    hor = x.shape[0]
    dt2 = dt * dt
    se = np.zeros(hor + 1)
    ve = np.zeros(hor + 1)
    seg = np.zeros((hor + 1, hor))
    veg = np.zeros((hor + 1, hor))
    se[0] = se0
    ve[0] = ve0

    g = np.zeros(3 * hor)
    jac = np.zeros((3 * hor, hor))
    f = 0.0
    fg = np.zeros(hor)

    for k in range(1, hor + 1):
        u = x[k - 1]
        se[k] = se[k - 1] + ve[k - 1] * dt + 0.5 * u * dt2
        ve[k] = ve[k - 1] + u * dt
        for j in range(hor):
            seg[k, j] = seg[k - 1, j] + dt * veg[k - 1, j]
            veg[k, j] = veg[k - 1, j]
        seg[k, k - 1] += 0.5 * dt2
        veg[k, k - 1] += dt

        ex, ey, edx, edy = _path_point(e_p0, e_dirs, e_cor, cornw, se[k])

        # worst-case opponent arc: closest arc on the straight opponent path
        # to the ego position, clamped into the reachable bracket
        sbar = (ex - o_p0[0]) * o_dir0[0] + (ey - o_p0[1]) * o_dir0[1] + o_cum0
        sw, dsw = _smooth_clamp(sbar, opp_lo[k - 1], opp_hi[k - 1], clampw)
        for m in range(3):
            if m == 0:
                so_k = opp_lo[k - 1]
            elif m == 1:
                so_k = opp_hi[k - 1]
            else:
                so_k = sw
            ox = o_p0[0] + o_dir0[0] * (so_k - o_cum0)
            oy = o_p0[1] + o_dir0[1] * (so_k - o_cum0)
            ddx = ex - ox
            ddy = ey - oy
            dd = math.sqrt(ddx * ddx + ddy * ddy + eps_d * eps_d)
            row = 3 * (k - 1) + m
            g[row] = dd - dsafe_eff
            for j in range(hor):
                pgx = edx * seg[k, j]
                pgy = edy * seg[k, j]
                if m == 2:
                    # opponent point moves with the ego through the projection
                    sbg = (pgx * o_dir0[0] + pgy * o_dir0[1]) * dsw
                    ogx = o_dir0[0] * sbg
                    ogy = o_dir0[1] * sbg
                else:
                    ogx = 0.0
                    ogy = 0.0
                jac[row, j] = (ddx * (pgx - ogx) + ddy * (pgy - ogy)) / dd

    # stage cost at every state with an input, terminal cost at the last
    for k in range(hor):
        dve = ve[k] - vref
        f += qv * dve * dve + ru * x[k] * x[k]
        for j in range(hor):
            fg[j] += qv * 2.0 * dve * veg[k, j]
        fg[k] += ru * 2.0 * x[k]
    dve = ve[hor] - vref
    f += qf * dve * dve
    for j in range(hor):
        fg[j] += qf * 2.0 * dve * veg[hor, j]
    return f, fg, g, jac, se, ve
