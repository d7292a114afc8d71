"""Batched control-step kernel: numba loop version and numpy fallback.

Both implement the same per-substep contact law; ``step_batch`` picks one
according to ``modmbrl._env.USE_JIT``. State rows are laid out as
``[x, z, pitch, vx, vz, pitch_rate, q(J), qd(J), pending(J)]``.

Limb arrays: ``kinds`` (0 leg, 1 wheel), ``attach`` (body-frame x),
``jstart`` (first joint index). ``jkind`` per joint: 0 hip, 1 knee, 2 wheel.
"""

from __future__ import annotations

import math

import numpy as np

from .. import _env
from .constants import (ALPHA, CONTACT_TOL, DT, FAIL_DEPTH, FAIL_PITCH, GRAVITY, HF_DX,
                        HF_X0, HIP_LIMIT, KNEE_LIMIT, LEG_CLIMB, PITCH_MAX, PITCH_RATE, RISER_SCAN,
                        SHANK, SUBSTEPS, THIGH, TIP_MARGIN, TIP_RATE, TORQUE_GAIN, VMAX, WHEEL_CLIMB,
                        WHEEL_RADIUS, WHEEL_STRUT)

_PUSH_EPS = 1e-9


# ---------------------------------------------------------------------------
# scalar kernel (numba)


def _cell(x, n):
    k = int(math.floor((x - HF_X0) / HF_DX))
    if k < 0:
        return 0
    if k > n - 1:
        return n - 1
    return k


def _endpoints(q, kinds, attach, jstart, relx, relz):
    for i in range(kinds.shape[0]):
        if kinds[i] == 0:
            j = jstart[i]
            length = (THIGH + SHANK) * math.cos(0.5 * q[j + 1])
            relx[i] = attach[i] + length * math.sin(q[j])
            relz[i] = -length * math.cos(q[j])
        else:
            relx[i] = attach[i]
            relz[i] = -WHEEL_STRUT


def _world(x, z, cp, sp, kinds, relx, relz, xw, zw):
    for i in range(kinds.shape[0]):
        xw[i] = x + cp * relx[i] - sp * relz[i]
        zw[i] = z + sp * relx[i] + cp * relz[i]
        if kinds[i] == 1:
            zw[i] -= WHEEL_RADIUS


def _riser_push(hts, xw, zw, climb):
    n = hts.shape[0]
    k = _cell(xw, n)
    for m in range(1, RISER_SCAN + 1):
        kk = k - m
        if kk < 0:
            return 0.0
        if hts[kk] <= zw + climb:
            xr = HF_X0 + (kk + 1) * HF_DX
            return xw - xr + _PUSH_EPS
    return 0.0


def _step_one(s, a, kinds, attach, jstart, jkind, hts, out, tau):
    nj = a.shape[0]
    nl = kinds.shape[0]
    n = hts.shape[0]
    x = s[0]
    z = s[1]
    p = s[2]
    vx = s[3]
    vz = s[4]
    q = s[6:6 + nj].copy()
    qd = s[6 + nj:6 + 2 * nj].copy()
    u = s[6 + 2 * nj:6 + 3 * nj]
    relx0 = np.empty(nl)
    relz0 = np.empty(nl)
    relx = np.empty(nl)
    relz = np.empty(nl)
    xw = np.empty(nl)
    zw = np.empty(nl)
    zprev = np.empty(nl)
    gap = np.empty(nl)
    incon = np.empty(nl, dtype=np.bool_)
    for j in range(nj):
        tau[j] = 0.0
    p_start = p
    for _sub in range(SUBSTEPS):
        _endpoints(q, kinds, attach, jstart, relx0, relz0)
        cp = math.cos(p)
        sp = math.sin(p)
        _world(x, z, cp, sp, kinds, relx0, relz0, xw, zprev)
        # joint velocity tracking
        for j in range(nj):
            err = u[j] - qd[j]
            tau[j] += TORQUE_GAIN * err
            v = qd[j] + ALPHA * err
            if v > VMAX:
                v = VMAX
            elif v < -VMAX:
                v = -VMAX
            qn = q[j] + v * DT
            if jkind[j] != 2:
                lim = HIP_LIMIT if jkind[j] == 0 else KNEE_LIMIT
                if qn > lim:
                    qn = lim
                    if v > 0.0:
                        v = 0.0
                elif qn < -lim:
                    qn = -lim
                    if v < 0.0:
                        v = 0.0
            q[j] = qn
            qd[j] = v
        _endpoints(q, kinds, attach, jstart, relx, relz)
        _world(x, z, cp, sp, kinds, relx, relz, xw, zw)
        # contact set
        ncon = 0
        drive = 0.0
        ilo = -1
        ihi = -1
        hlo = 0.0
        hhi = 0.0
        imin = -1
        imax = -1
        for i in range(nl):
            h = hts[_cell(xw[i], n)]
            gap[i] = zw[i] - h
            incon[i] = False
            climb = LEG_CLIMB if kinds[i] == 0 else WHEEL_CLIMB
            pen = h - zw[i]
            if pen > climb and h - zprev[i] > climb:
                continue
            if pen >= -CONTACT_TOL:
                ncon += 1
                incon[i] = True
                if imin < 0 or xw[i] < xw[imin]:
                    imin = i
                if imax < 0 or xw[i] > xw[imax]:
                    imax = i
                if kinds[i] == 0:
                    drive -= (cp * (relx[i] - relx0[i]) - sp * (relz[i] - relz0[i])) / DT
                else:
                    drive += qd[jstart[i]] * WHEEL_RADIUS
                if ilo < 0 or h < hlo:
                    ilo = i
                    hlo = h
                if ihi < 0 or h > hhi:
                    ihi = i
                    hhi = h
        x_old = x
        if ncon > 0:
            # centre of mass outside the support span: tip about the nearest contact
            piv = -1
            if x < xw[imin] - TIP_MARGIN:
                piv = imin
            elif x > xw[imax] + TIP_MARGIN:
                piv = imax
            x += drive / ncon * DT
            if piv >= 0:
                best = 1e300
                for i in range(nl):
                    arm = xw[i] - xw[piv]
                    if incon[i] or gap[i] <= 0.0 or arm * (x_old - xw[piv]) <= 0.0:
                        continue
                    d = gap[i] / abs(arm)
                    if d < best:
                        best = d
                if best < 1e299:
                    # a fraction of the rotation that brings the limb down
                    if x_old < xw[piv]:
                        p += TIP_RATE * DT * math.atan(best)
                    else:
                        p -= TIP_RATE * DT * math.atan(best)
            else:
                target = 0.0
                if ncon > 1 and ilo != ihi:
                    dxc = xw[ihi] - xw[ilo]
                    if abs(dxc) > 1e-6:
                        target = math.atan((hhi - hlo) / dxc)
                p += PITCH_RATE * DT * (target - p)
            vz = 0.0
        else:
            vz -= GRAVITY * DT
            z += vz * DT
            x += vx * DT
        p = min(max(p, -PITCH_MAX), PITCH_MAX)
        cp = math.cos(p)
        sp = math.sin(p)
        _world(x, z, cp, sp, kinds, relx, relz, xw, zw)
        # blocked endpoints push the body back off the riser face
        push = 0.0
        for i in range(nl):
            h = hts[_cell(xw[i], n)]
            climb = LEG_CLIMB if kinds[i] == 0 else WHEEL_CLIMB
            if h - zw[i] > climb and h - zprev[i] > climb:
                d = _riser_push(hts, xw[i], zw[i], climb)
                if d > push:
                    push = d
        # the push is a position correction; it does not add velocity
        vx = (x - x_old) / DT
        if push > 0.0:
            x -= push
            if vx > 0.0:
                vx = 0.0
            _world(x, z, cp, sp, kinds, relx, relz, xw, zw)
        penmax = -1e300
        for i in range(nl):
            pen = hts[_cell(xw[i], n)] - zw[i]
            if pen > penmax:
                penmax = pen
        if ncon > 0 or penmax > 0.0:
            z += penmax
            vz = 0.0
    out[0] = x
    out[1] = z
    out[2] = p
    out[3] = vx
    out[4] = vz
    out[5] = (p - p_start) / (SUBSTEPS * DT)
    for j in range(nj):
        out[6 + j] = q[j]
        out[6 + nj + j] = qd[j]
        c = a[j]
        if c > VMAX:
            c = VMAX
        elif c < -VMAX:
            c = -VMAX
        out[6 + 2 * nj + j] = c
        tau[j] /= SUBSTEPS
    failed = abs(p) > FAIL_PITCH or z < hts[_cell(x, n)] - FAIL_DEPTH
    return failed


def _step_batch_loop(state, act, kinds, attach, jstart, jkind, heights, env_idx):
    b = state.shape[0]
    out = np.empty_like(state)
    tau = np.empty_like(act)
    fail = np.zeros(b, dtype=np.bool_)
    for i in range(b):
        fail[i] = _step_one(state[i], act[i], kinds, attach, jstart, jkind,
                            heights[env_idx[i]], out[i], tau[i])
    return out, tau, fail


# ---------------------------------------------------------------------------
# numpy fallback, vectorised over the batch


def _np_cells(x, n):
    return np.clip(np.floor((x - HF_X0) / HF_DX).astype(np.int64), 0, n - 1)


def _np_endpoints(q, kinds, attach, jstart):
    b = q.shape[0]
    nl = kinds.shape[0]
    relx = np.empty((b, nl))
    relz = np.empty((b, nl))
    for i in range(nl):
        if kinds[i] == 0:
            j = jstart[i]
            length = (THIGH + SHANK) * np.cos(0.5 * q[:, j + 1])
            relx[:, i] = attach[i] + length * np.sin(q[:, j])
            relz[:, i] = -length * np.cos(q[:, j])
        else:
            relx[:, i] = attach[i]
            relz[:, i] = -WHEEL_STRUT
    return relx, relz


def _np_world(x, z, cp, sp, wheel, relx, relz):
    xw = x[:, None] + cp[:, None] * relx - sp[:, None] * relz
    zw = z[:, None] + sp[:, None] * relx + cp[:, None] * relz - wheel[None, :] * WHEEL_RADIUS
    return xw, zw


def _np_height(heights, env_idx, xw):
    n = heights.shape[1]
    return heights[env_idx[:, None], _np_cells(xw, n)]


def _np_riser_push(heights, env_idx, xw, zw, climb, mask):
    n = heights.shape[1]
    k = _np_cells(xw, n)
    push = np.zeros_like(xw)
    todo = mask.copy()
    for m in range(1, RISER_SCAN + 1):
        kk = k - m
        valid = todo & (kk >= 0)
        todo &= kk >= 0
        hk = heights[env_idx[:, None], np.maximum(kk, 0)]
        hit = valid & (hk <= zw + climb)
        xr = HF_X0 + (kk + 1) * HF_DX
        push = np.where(hit, xw - xr + _PUSH_EPS, push)
        todo &= ~hit
    return push


def _step_batch_numpy(state, act, kinds, attach, jstart, jkind, heights, env_idx):
    nj = act.shape[1]
    nl = kinds.shape[0]
    b = state.shape[0]
    x = state[:, 0].copy()
    z = state[:, 1].copy()
    p = state[:, 2].copy()
    vx = state[:, 3].copy()
    vz = state[:, 4].copy()
    q = state[:, 6:6 + nj].copy()
    qd = state[:, 6 + nj:6 + 2 * nj].copy()
    u = state[:, 6 + 2 * nj:6 + 3 * nj]
    wheel = (kinds == 1).astype(np.float64)
    climb = np.where(kinds == 0, LEG_CLIMB, WHEEL_CLIMB)[None, :]
    lim = np.where(jkind == 0, HIP_LIMIT, np.where(jkind == 1, KNEE_LIMIT, np.inf))[None, :]
    tau = np.zeros((b, nj))
    p_start = p.copy()
    rows = np.arange(b)
    for _sub in range(SUBSTEPS):
        relx0, relz0 = _np_endpoints(q, kinds, attach, jstart)
        cp, sp = np.cos(p), np.sin(p)
        _, zprev = _np_world(x, z, cp, sp, wheel, relx0, relz0)
        err = u - qd
        tau += TORQUE_GAIN * err
        v = np.clip(qd + ALPHA * err, -VMAX, VMAX)
        qn = q + v * DT
        hi = qn > lim
        lo = qn < -lim
        qn = np.where(hi, lim, np.where(lo, -lim, qn))
        v = np.where((hi & (v > 0)) | (lo & (v < 0)), 0.0, v)
        q, qd = qn, v
        relx, relz = _np_endpoints(q, kinds, attach, jstart)
        xw, zw = _np_world(x, z, cp, sp, wheel, relx, relz)
        h = _np_height(heights, env_idx, xw)
        pen = h - zw
        blocked = (pen > climb) & (h - zprev > climb)
        con = (pen >= -CONTACT_TOL) & ~blocked
        ncon = con.sum(axis=1)
        legdrive = -(cp[:, None] * (relx - relx0) - sp[:, None] * (relz - relz0)) / DT
        wdrive = np.zeros((b, nl))
        for i in range(nl):
            if kinds[i] == 1:
                wdrive[:, i] = qd[:, jstart[i]] * WHEEL_RADIUS
        drive = np.where(kinds[None, :] == 0, legdrive, wdrive)
        drive = np.where(con, drive, 0.0).sum(axis=1)
        # lowest / highest contact, first index on ties (matches the loop kernel)
        hlo_m = np.where(con, h, np.inf)
        hhi_m = np.where(con, h, -np.inf)
        ilo = np.argmin(hlo_m, axis=1)
        ihi = np.argmax(hhi_m, axis=1)
        hlo = hlo_m[rows, ilo]
        hhi = hhi_m[rows, ihi]
        dxc = xw[rows, ihi] - xw[rows, ilo]
        ok = (ncon > 1) & (ilo != ihi) & (np.abs(dxc) > 1e-6)
        safe = np.where(ok, dxc, 1.0)
        target = np.where(ok, np.arctan(np.where(ok, hhi - hlo, 0.0) / safe), 0.0)
        incon = ncon > 0
        x_old = x
        # tipping about the nearest contact when the centre of mass leaves the span
        imin = np.argmin(np.where(con, xw, np.inf), axis=1)
        imax = np.argmax(np.where(con, xw, -np.inf), axis=1)
        behind = incon & (x_old < xw[rows, imin] - TIP_MARGIN)
        ahead = incon & ~behind & (x_old > xw[rows, imax] + TIP_MARGIN)
        xpiv = np.where(behind, xw[rows, imin], xw[rows, imax])
        arm = xw - xpiv[:, None]
        gap = zw - h
        cand = ~con & (gap > 0.0) & (arm * (x_old - xpiv)[:, None] > 0.0)
        best = np.where(cand, gap / np.where(cand, np.abs(arm), 1.0), np.inf).min(axis=1)
        tip = (behind | ahead) & np.isfinite(best)
        dtip = np.where(tip, np.where(behind, 1.0, -1.0) * TIP_RATE * DT * np.arctan(np.where(tip, best, 0.0)), 0.0)
        vz_air = vz - GRAVITY * DT
        x = np.where(incon, x + drive / np.maximum(ncon, 1) * DT, x + vx * DT)
        z = np.where(incon, z, z + vz_air * DT)
        p = np.where(behind | ahead, p + dtip, np.where(incon, p + PITCH_RATE * DT * (target - p), p))
        p = np.clip(p, -PITCH_MAX, PITCH_MAX)
        vz = np.where(incon, 0.0, vz_air)
        cp, sp = np.cos(p), np.sin(p)
        xw, zw = _np_world(x, z, cp, sp, wheel, relx, relz)
        h = _np_height(heights, env_idx, xw)
        blocked = (h - zw > climb) & (h - zprev > climb)
        vx = (x - x_old) / DT
        if blocked.any():
            pushes = np.zeros((b, nl))
            for i in range(nl):
                pushes[:, i] = _np_riser_push(heights, env_idx, xw[:, i:i + 1], zw[:, i:i + 1],
                                              climb[0, i], blocked[:, i:i + 1])[:, 0]
            push = np.maximum(pushes.max(axis=1), 0.0)
            x = x - push
            vx = np.where(push > 0.0, np.minimum(vx, 0.0), vx)
            xw, zw = _np_world(x, z, cp, sp, wheel, relx, relz)
            h = _np_height(heights, env_idx, xw)
        penmax = (h - zw).max(axis=1)
        land = incon | (penmax > 0.0)
        z = np.where(land, z + penmax, z)
        vz = np.where(land, 0.0, vz)
    out = np.empty_like(state)
    out[:, 0] = x
    out[:, 1] = z
    out[:, 2] = p
    out[:, 3] = vx
    out[:, 4] = vz
    out[:, 5] = (p - p_start) / (SUBSTEPS * DT)
    out[:, 6:6 + nj] = q
    out[:, 6 + nj:6 + 2 * nj] = qd
    out[:, 6 + 2 * nj:] = np.clip(act, -VMAX, VMAX)
    n = heights.shape[1]
    ground = heights[env_idx, _np_cells(x, n)]
    fail = (np.abs(p) > FAIL_PITCH) | (z < ground - FAIL_DEPTH)
    return out, tau / SUBSTEPS, fail


# ---------------------------------------------------------------------------

if _env.HAVE_NUMBA:
    from numba import njit

    _opts = dict(cache=True, nogil=True, fastmath=False, error_model="numpy")
    _cell = njit(**_opts)(_cell)
    _endpoints = njit(**_opts)(_endpoints)
    _world = njit(**_opts)(_world)
    _riser_push = njit(**_opts)(_riser_push)
    _step_one = njit(**_opts)(_step_one)
    _step_batch_jit = njit(**_opts)(_step_batch_loop)
else:  # pragma: no cover
    _step_batch_jit = None


def step_batch(state, act, kinds, attach, jstart, jkind, heights, env_idx, use_jit=None):
    """Advance every row one control step. Returns (state, torque, failed)."""
    use_jit = _env.USE_JIT if use_jit is None else use_jit
    state = np.ascontiguousarray(state, dtype=np.float64)
    act = np.ascontiguousarray(act, dtype=np.float64)
    heights = np.ascontiguousarray(heights, dtype=np.float64)
    env_idx = np.ascontiguousarray(env_idx, dtype=np.int64)
    if use_jit and _step_batch_jit is not None:
        return _step_batch_jit(state, act, kinds, attach, jstart, jkind, heights, env_idx)
    return _step_batch_numpy(state, act, kinds, attach, jstart, jkind, heights, env_idx)
