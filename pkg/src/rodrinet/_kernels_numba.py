"""Numba implementations of the hot kernels.

The operator kernels run on batch-innermost transposed copies of their
arguments so that every inner loop is a contiguous vector operation across
the batch; the public wrappers keep the standard (batch-first) layout.

Work is partitioned so every output element is written by exactly one
iteration: (joint x output channel) for the forward, input channel within a
serial joint loop for feature gradients, (joint x channel pair) for weight
gradients. No atomics or cross-thread reductions, so results are
bit-deterministic for any thread count.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, inline="always")
def _mat4_mul(a, b, out):
    for i in range(4):
        for j in range(4):
            acc = 0.0
            for k in range(4):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc


@njit(cache=True, inline="always")
def _joint_transform(origin, axis, theta, out):
    # origin @ homogeneous(rodrigues(axis, theta))
    s = np.sin(theta)
    c = np.cos(theta)
    x, y, z = axis[0], axis[1], axis[2]
    t = 1.0 - c
    r00 = c + t * x * x
    r01 = t * x * y - s * z
    r02 = t * x * z + s * y
    r10 = t * x * y + s * z
    r11 = c + t * y * y
    r12 = t * y * z - s * x
    r20 = t * x * z - s * y
    r21 = t * y * z + s * x
    r22 = c + t * z * z
    for i in range(4):
        o0, o1, o2 = origin[i, 0], origin[i, 1], origin[i, 2]
        out[i, 0] = o0 * r00 + o1 * r10 + o2 * r20
        out[i, 1] = o0 * r01 + o1 * r11 + o2 * r21
        out[i, 2] = o0 * r02 + o1 * r12 + o2 * r22
        out[i, 3] = origin[i, 3]


@njit(cache=True)
def _fk_single(origins, axes, parent, child, root, thetas, poses):
    dof = origins.shape[0]
    poses[0] = root
    tmp = np.empty((4, 4), dtype=poses.dtype)
    for j in range(dof):
        _joint_transform(origins[j], axes[j], thetas[j], tmp)
        _mat4_mul(poses[parent[j]], tmp, poses[child[j]])


@njit(cache=True, parallel=True)
def fk_batch(origins, axes, parent, child, root, thetas):
    n = thetas.shape[0]
    nlinks = origins.shape[0] + 1
    out = np.empty((n, nlinks, 4, 4), dtype=thetas.dtype)
    for i in prange(n):
        _fk_single(origins, axes, parent, child, root[i], thetas[i], out[i])
    return out


@njit(cache=True, inline="always")
def _rotation_vector(rot, out):
    tr = rot[0, 0] + rot[1, 1] + rot[2, 2]
    c = (tr - 1.0) / 2.0
    if c > 1.0:
        c = 1.0
    elif c < -1.0:
        c = -1.0
    angle = np.arccos(c)
    o0 = rot[2, 1] - rot[1, 2]
    o1 = rot[0, 2] - rot[2, 0]
    o2 = rot[1, 0] - rot[0, 1]
    if angle < 1e-10:
        out[0] = 0.5 * o0
        out[1] = 0.5 * o1
        out[2] = 0.5 * o2
        return
    if np.pi - angle < 1e-6:
        idx = 0
        if rot[1, 1] > rot[idx, idx]:
            idx = 1
        if rot[2, 2] > rot[idx, idx]:
            idx = 2
        a = np.zeros(3)
        v = (rot[idx, idx] + 1.0) / 2.0
        if v < 0.0:
            v = 0.0
        a[idx] = np.sqrt(v)
        for j in range(3):
            if j != idx:
                a[j] = (rot[idx, j] + rot[j, idx]) / (4.0 * a[idx])
        norm = np.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])
        a /= norm
        if a[0] * o0 + a[1] * o1 + a[2] * o2 < 0.0:
            a = -a
        out[0] = angle * a[0]
        out[1] = angle * a[1]
        out[2] = angle * a[2]
        return
    scale = angle / (2.0 * np.sin(angle))
    out[0] = scale * o0
    out[1] = scale * o1
    out[2] = scale * o2


@njit(cache=True)
def ik_solve(
    origins,
    axes,
    parent,
    child,
    lo,
    hi,
    target,
    seed,
    ee,
    on_path,
    limits_on,
    damping,
    tol,
    max_iters,
):
    dof = origins.shape[0]
    nlinks = dof + 1
    theta = seed.copy()
    poses = np.empty((nlinks, 4, 4), dtype=np.float64)
    root = np.eye(4)
    err = np.empty(6, dtype=np.float64)
    erot = np.empty(3, dtype=np.float64)
    rel = np.empty((3, 3), dtype=np.float64)
    jac = np.zeros((6, dof), dtype=np.float64)
    jtmp = np.empty((4, 4), dtype=np.float64)
    resid = np.inf
    iters = 0
    for it in range(max_iters + 1):
        iters = it
        _fk_single(origins, axes, parent, child, root, theta, poses)
        for i in range(3):
            err[i] = target[i, 3] - poses[ee][i, 3]
        # relative rotation target @ current^T
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for k in range(3):
                    acc += target[i, k] * poses[ee][j, k]
                rel[i, j] = acc
        _rotation_vector(rel, erot)
        err[3] = erot[0]
        err[4] = erot[1]
        err[5] = erot[2]
        resid = np.sqrt(
            err[0] ** 2 + err[1] ** 2 + err[2] ** 2 + err[3] ** 2 + err[4] ** 2 + err[5] ** 2
        )
        if resid < tol:
            return theta, resid, iters, True
        if it == max_iters:
            break
        # geometric jacobian, world frame, zero columns off the root->ee path
        for j in range(dof):
            if not on_path[j]:
                for r in range(6):
                    jac[r, j] = 0.0
                continue
            _mat4_mul(poses[parent[j]], origins[j], jtmp)
            ax = axes[j]
            awx = jtmp[0, 0] * ax[0] + jtmp[0, 1] * ax[1] + jtmp[0, 2] * ax[2]
            awy = jtmp[1, 0] * ax[0] + jtmp[1, 1] * ax[1] + jtmp[1, 2] * ax[2]
            awz = jtmp[2, 0] * ax[0] + jtmp[2, 1] * ax[1] + jtmp[2, 2] * ax[2]
            rx = poses[ee][0, 3] - jtmp[0, 3]
            ry = poses[ee][1, 3] - jtmp[1, 3]
            rz = poses[ee][2, 3] - jtmp[2, 3]
            jac[0, j] = awy * rz - awz * ry
            jac[1, j] = awz * rx - awx * rz
            jac[2, j] = awx * ry - awy * rx
            jac[3, j] = awx
            jac[4, j] = awy
            jac[5, j] = awz
        # damped least squares step
        a = np.empty((dof, dof), dtype=np.float64)
        g = np.empty(dof, dtype=np.float64)
        for r in range(dof):
            for cc in range(r, dof):
                acc = 0.0
                for k in range(6):
                    acc += jac[k, r] * jac[k, cc]
                a[r, cc] = acc
                a[cc, r] = acc
            a[r, r] += damping * damping
            acc = 0.0
            for k in range(6):
                acc += jac[k, r] * err[k]
            g[r] = acc
        delta = np.linalg.solve(a, g)
        for j in range(dof):
            theta[j] += delta[j]
            if limits_on:
                if theta[j] < lo[j]:
                    theta[j] = lo[j]
                elif theta[j] > hi[j]:
                    theta[j] = hi[j]
    return theta, resid, iters, False


# --- multi-channel operator, batch-innermost layout --------------------------


@njit(cache=True, inline="always")
def _combine_t(wbv, wcv, wsv, cos_d, sin_d, u_t):
    """u_t[(r,s), b] = wbv[(r,s)] + sum_c wcv[c,(r,s)] cos_d[c, b] + sin term."""
    cj, n = cos_d.shape
    for t in range(16):
        w0 = wbv[t // 4, t % 4]
        row = u_t[t]
        for b in range(n):
            row[b] = w0
    for c in range(cj):
        cos_b = cos_d[c]
        sin_b = sin_d[c]
        for t in range(16):
            wcc = wcv[c, t // 4, t % 4]
            wss = wsv[c, t // 4, t % 4]
            row = u_t[t]
            for b in range(n):
                row[b] += wcc * cos_b[b] + wss * sin_b[b]


@njit(cache=True, parallel=True, fastmath=True)
def _fwd_t(feats_t, cos_t, sin_t, wb, wc, ws, wbb, wcb, wsb, parent):
    # feats_t (L, ci, 16, n); cos_t/sin_t (dof, cj, n) -> out (dof, co, 16, n)
    ci, n = feats_t.shape[1], feats_t.shape[3]
    dof, co = cos_t.shape[0], wb.shape[2]
    dtype = feats_t.dtype
    out = np.zeros((dof, co, 16, n), dtype=dtype)
    for idx in prange(dof * co):
        d = idx // co
        o = idx % co
        u_t = np.empty((16, n), dtype=dtype)
        ub_t = np.empty((16, n), dtype=dtype)
        p = parent[d]
        acc = out[d, o]
        for i in range(ci):
            _combine_t(wb[d, i, o], wc[d, i, o], ws[d, i, o], cos_t[d], sin_t[d], u_t)
            _combine_t(wbb[d, i, o], wcb[d, i, o], wsb[d, i, o], cos_t[d], sin_t[d], ub_t)
            f_t = feats_t[p, i]
            for r in range(4):
                for s in range(4):
                    acc_row = acc[r * 4 + s]
                    for k in range(4):
                        f_rk = f_t[r * 4 + k]
                        u_ks = u_t[k * 4 + s]
                        ub_rk = ub_t[r * 4 + k]
                        f_ks = f_t[k * 4 + s]
                        for b in range(n):
                            acc_row[b] += f_rk[b] * u_ks[b] + ub_rk[b] * f_ks[b]
    return out


@njit(cache=True, parallel=True, fastmath=True)
def _bwd_t(grad_t, feats_t, cos_t, sin_t, wb, wc, ws, wbb, wcb, wsb, parent):
    # grad_t (dof, co, 16, n); feats_t (L, ci, 16, n)
    nlinks, ci, n = feats_t.shape[0], feats_t.shape[1], feats_t.shape[3]
    dof, co, cj = cos_t.shape[0], wb.shape[2], cos_t.shape[1]
    dtype = feats_t.dtype
    dfeats_t = np.zeros((nlinks, ci, 16, n), dtype=dtype)
    dtheta_t = np.zeros((dof, cj, n), dtype=dtype)
    du_all = np.empty((dof, ci, co, 16, n), dtype=dtype)
    dub_all = np.empty((dof, ci, co, 16, n), dtype=dtype)
    dwb = np.zeros(wb.shape, dtype=dtype)
    dwc = np.zeros(wc.shape, dtype=dtype)
    dws = np.zeros(ws.shape, dtype=dtype)
    dwbb = np.zeros(wbb.shape, dtype=dtype)
    dwcb = np.zeros(wcb.shape, dtype=dtype)
    dwsb = np.zeros(wsb.shape, dtype=dtype)

    # Pass 1: feature and joint-feature gradients plus the per-pair local
    # gradients dU = F^T G and dUb = G F^T reused by pass 2. Joints run
    # serially (they may share a parent link); input channels run parallel,
    # each owning its dfeats/du rows. Joint-feature gradients accumulate into
    # per-channel partials to keep a single writer per element.
    dth_part = np.zeros((ci, cj, n), dtype=dtype)
    for d in range(dof):
        p = parent[d]
        cos_d = cos_t[d]
        sin_d = sin_t[d]
        for i in prange(ci):
            u_t = np.empty((16, n), dtype=dtype)
            ub_t = np.empty((16, n), dtype=dtype)
            f_t = feats_t[p, i]
            df_t = dfeats_t[p, i]
            dth_i = dth_part[i]
            for o in range(co):
                g_t = grad_t[d, o]
                du_t = du_all[d, i, o]
                dub_t = dub_all[d, i, o]
                _combine_t(wb[d, i, o], wc[d, i, o], ws[d, i, o], cos_d, sin_d, u_t)
                _combine_t(wbb[d, i, o], wcb[d, i, o], wsb[d, i, o], cos_d, sin_d, ub_t)
                # dF += G @ U^T + Ub^T @ G ; dU = F^T @ G ; dUb = G @ F^T
                for r in range(4):
                    for s in range(4):
                        df_row = df_t[r * 4 + s]
                        du_row = du_t[r * 4 + s]
                        dub_row = dub_t[r * 4 + s]
                        for b in range(n):
                            du_row[b] = 0.0
                            dub_row[b] = 0.0
                        for k in range(4):
                            g_rk = g_t[r * 4 + k]
                            u_sk = u_t[s * 4 + k]
                            ub_kr = ub_t[k * 4 + r]
                            g_ks = g_t[k * 4 + s]
                            f_kr = f_t[k * 4 + r]
                            f_sk = f_t[s * 4 + k]
                            for b in range(n):
                                df_row[b] += g_rk[b] * u_sk[b] + ub_kr[b] * g_ks[b]
                                du_row[b] += f_kr[b] * g_ks[b]
                                dub_row[b] += g_rk[b] * f_sk[b]
                wcv = wc[d, i, o]
                wsv = ws[d, i, o]
                wcbv = wcb[d, i, o]
                wsbv = wsb[d, i, o]
                for c in range(cj):
                    cos_b = cos_d[c]
                    sin_b = sin_d[c]
                    dth_row = dth_i[c]
                    for t in range(16):
                        wss = wsv[c, t // 4, t % 4]
                        wcc = wcv[c, t // 4, t % 4]
                        wssb = wsbv[c, t // 4, t % 4]
                        wccb = wcbv[c, t // 4, t % 4]
                        du_row = du_t[t]
                        dub_row = dub_t[t]
                        for b in range(n):
                            dth_row[b] += (du_row[b] * wss + dub_row[b] * wssb) * cos_b[b]
                            dth_row[b] -= (du_row[b] * wcc + dub_row[b] * wccb) * sin_b[b]
        # reduce per-channel partials for this joint, then clear for the next
        for c in range(cj):
            out_row = dtheta_t[d, c]
            for i2 in range(ci):
                part = dth_part[i2, c]
                for b in range(n):
                    out_row[b] += part[b]
        for i2 in range(ci):
            for c in range(cj):
                row = dth_part[i2, c]
                for b in range(n):
                    row[b] = 0.0

    # Pass 2: weight gradients; every (joint, in, out) triple owns its weight
    # slices and reduces over the contiguous batch axis.
    for idx in prange(dof * ci * co):
        d = idx // (ci * co)
        rem = idx % (ci * co)
        i = rem // co
        o = rem % co
        du_t = du_all[d, i, o]
        dub_t = dub_all[d, i, o]
        cos_d = cos_t[d]
        sin_d = sin_t[d]
        for t in range(16):
            du_row = du_t[t]
            dub_row = dub_t[t]
            acc_b = 0.0
            acc_bb = 0.0
            for b in range(n):
                acc_b += du_row[b]
                acc_bb += dub_row[b]
            dwb[d, i, o, t // 4, t % 4] = acc_b
            dwbb[d, i, o, t // 4, t % 4] = acc_bb
            for c in range(cj):
                cos_b = cos_d[c]
                sin_b = sin_d[c]
                acc_c = 0.0
                acc_s = 0.0
                acc_cb = 0.0
                acc_sb = 0.0
                for b in range(n):
                    acc_c += du_row[b] * cos_b[b]
                    acc_s += du_row[b] * sin_b[b]
                    acc_cb += dub_row[b] * cos_b[b]
                    acc_sb += dub_row[b] * sin_b[b]
                dwc[d, i, o, c, t // 4, t % 4] = acc_c
                dws[d, i, o, c, t // 4, t % 4] = acc_s
                dwcb[d, i, o, c, t // 4, t % 4] = acc_cb
                dwsb[d, i, o, c, t // 4, t % 4] = acc_sb
    return dfeats_t, dtheta_t, dwb, dwc, dws, dwbb, dwcb, dwsb


def _to_batch_inner(feats):
    n, nlinks, ci = feats.shape[0], feats.shape[1], feats.shape[2]
    return np.ascontiguousarray(feats.reshape(n, nlinks, ci, 16).transpose(1, 2, 3, 0))


def rodrigues_fwd(feats, theta, wb, wc, ws, wbb, wcb, wsb, parent):
    n, dof, co = feats.shape[0], theta.shape[1], wb.shape[2]
    theta_t = np.ascontiguousarray(theta.transpose(1, 2, 0))
    out_t = _fwd_t(
        _to_batch_inner(feats),
        np.cos(theta_t),
        np.sin(theta_t),
        wb,
        wc,
        ws,
        wbb,
        wcb,
        wsb,
        parent,
    )
    return np.ascontiguousarray(out_t.transpose(3, 0, 1, 2)).reshape(n, dof, co, 4, 4)


def rodrigues_bwd(grad, feats, theta, wb, wc, ws, wbb, wcb, wsb, parent):
    n, nlinks, ci = feats.shape[0], feats.shape[1], feats.shape[2]
    dof, co, cj = theta.shape[1], wb.shape[2], theta.shape[2]
    theta_t = np.ascontiguousarray(theta.transpose(1, 2, 0))
    grad_t = np.ascontiguousarray(grad.reshape(n, dof, co, 16).transpose(1, 2, 3, 0))
    dfeats_t, dtheta_t, dwb, dwc, dws, dwbb, dwcb, dwsb = _bwd_t(
        grad_t,
        _to_batch_inner(feats),
        np.cos(theta_t),
        np.sin(theta_t),
        wb,
        wc,
        ws,
        wbb,
        wcb,
        wsb,
        parent,
    )
    dfeats = np.ascontiguousarray(dfeats_t.transpose(3, 0, 1, 2)).reshape(
        n, nlinks, ci, 4, 4
    )
    dtheta = np.ascontiguousarray(dtheta_t.transpose(2, 0, 1))
    return dfeats, dtheta, dwb, dwc, dws, dwbb, dwcb, dwsb
