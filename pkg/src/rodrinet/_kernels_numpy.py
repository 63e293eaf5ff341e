"""Pure-numpy fallbacks for the hot kernels (see _accel).

Semantically identical to the numba versions; the operator loops stay
joint-by-joint and channel-by-channel so the full (batch, C_in, C_out, 4, 4)
combination tensor is never materialized at once.
"""

import numpy as np


def _rotation_batch(axis, theta):
    """Homogeneous rotation matrices about one axis, shape (n, 4, 4)."""
    n = theta.shape[0]
    s, c = np.sin(theta), np.cos(theta)
    t = 1.0 - c
    x, y, z = axis
    out = np.zeros((n, 4, 4), dtype=theta.dtype)
    out[:, 0, 0] = c + t * x * x
    out[:, 0, 1] = t * x * y - s * z
    out[:, 0, 2] = t * x * z + s * y
    out[:, 1, 0] = t * x * y + s * z
    out[:, 1, 1] = c + t * y * y
    out[:, 1, 2] = t * y * z - s * x
    out[:, 2, 0] = t * x * z - s * y
    out[:, 2, 1] = t * y * z + s * x
    out[:, 2, 2] = c + t * z * z
    out[:, 3, 3] = 1.0
    return out


def fk_batch(origins, axes, parent, child, root, thetas):
    n = thetas.shape[0]
    nlinks = origins.shape[0] + 1
    out = np.empty((n, nlinks, 4, 4), dtype=thetas.dtype)
    out[:, 0] = root
    for j in range(origins.shape[0]):
        local = np.matmul(origins[j].astype(thetas.dtype), _rotation_batch(axes[j], thetas[:, j]))
        out[:, child[j]] = np.matmul(out[:, parent[j]], local)
    return out


def _rotation_vector(rot):
    c = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(c)
    off = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    if angle < 1e-10:
        return 0.5 * off
    if np.pi - angle < 1e-6:
        diag = np.diag(rot)
        idx = int(np.argmax(diag))
        a = np.zeros(3)
        a[idx] = np.sqrt(max(0.0, (diag[idx] + 1.0) / 2.0))
        for j in range(3):
            if j != idx:
                a[j] = (rot[idx, j] + rot[j, idx]) / (4.0 * a[idx])
        a /= np.linalg.norm(a)
        if np.dot(a, off) < 0.0:
            a = -a
        return angle * a
    return (angle / (2.0 * np.sin(angle))) * off


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
    theta = seed.copy()
    root = np.eye(4)[None]
    resid = np.inf
    iters = 0
    for it in range(max_iters + 1):
        iters = it
        poses = fk_batch(origins, axes, parent, child, root, theta[None])[0]
        ee_pose = poses[ee]
        err = np.empty(6)
        err[:3] = target[:3, 3] - ee_pose[:3, 3]
        err[3:] = _rotation_vector(target[:3, :3] @ ee_pose[:3, :3].T)
        resid = float(np.linalg.norm(err))
        if resid < tol:
            return theta, resid, iters, True
        if it == max_iters:
            break
        jac = np.zeros((6, dof))
        for j in range(dof):
            if not on_path[j]:
                continue
            joint_pose = poses[parent[j]] @ origins[j]
            axis_w = joint_pose[:3, :3] @ axes[j]
            lever = ee_pose[:3, 3] - joint_pose[:3, 3]
            jac[:3, j] = np.cross(axis_w, lever)
            jac[3:, j] = axis_w
        a = jac.T @ jac + (damping * damping) * np.eye(dof)
        delta = np.linalg.solve(a, jac.T @ err)
        theta = theta + delta
        if limits_on:
            theta = np.clip(theta, lo, hi)
    return theta, resid, iters, False


def rodrigues_fwd(feats, theta, wb, wc, ws, wbb, wcb, wsb, parent):
    n = feats.shape[0]
    dof, co = theta.shape[1], wb.shape[2]
    out = np.empty((n, dof, co, 4, 4), dtype=feats.dtype)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    for d in range(dof):
        f = feats[:, parent[d]]
        for o in range(co):
            u = (
                wb[d, :, o]
                + np.einsum("nc,icab->niab", cos_t[:, d], wc[d, :, o])
                + np.einsum("nc,icab->niab", sin_t[:, d], ws[d, :, o])
            )
            ub = (
                wbb[d, :, o]
                + np.einsum("nc,icab->niab", cos_t[:, d], wcb[d, :, o])
                + np.einsum("nc,icab->niab", sin_t[:, d], wsb[d, :, o])
            )
            out[:, d, o] = np.einsum("niab,nibc->nac", f, u) + np.einsum(
                "niab,nibc->nac", ub, f
            )
    return out


def rodrigues_bwd(grad, feats, theta, wb, wc, ws, wbb, wcb, wsb, parent):
    n, nlinks, ci = feats.shape[0], feats.shape[1], feats.shape[2]
    dof, cj = theta.shape[1], theta.shape[2]
    dtype = feats.dtype
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    dfeats = np.zeros((n, nlinks, ci, 4, 4), dtype=dtype)
    dtheta = np.zeros((n, dof, cj), dtype=dtype)
    dwb = np.zeros(wb.shape, dtype=dtype)
    dwc = np.zeros(wc.shape, dtype=dtype)
    dws = np.zeros(ws.shape, dtype=dtype)
    dwbb = np.zeros(wbb.shape, dtype=dtype)
    dwcb = np.zeros(wcb.shape, dtype=dtype)
    dwsb = np.zeros(wsb.shape, dtype=dtype)
    for d in range(dof):
        f = feats[:, parent[d]]
        g = grad[:, d]
        ct, st = cos_t[:, d], sin_t[:, d]
        u = (
            wb[d][None]
            + np.einsum("nc,iocab->nioab", ct, wc[d])
            + np.einsum("nc,iocab->nioab", st, ws[d])
        )
        ub = (
            wbb[d][None]
            + np.einsum("nc,iocab->nioab", ct, wcb[d])
            + np.einsum("nc,iocab->nioab", st, wsb[d])
        )
        du = np.einsum("niab,noac->niobc", f, g)
        dub = np.einsum("noac,nibc->nioab", g, f)
        dfeats[:, parent[d]] += np.einsum("noac,niobc->niab", g, u) + np.einsum(
            "nioab,noac->nibc", ub, g
        )
        dwb[d] += du.sum(axis=0)
        dwbb[d] += dub.sum(axis=0)
        dwc[d] += np.einsum("nioab,nc->iocab", du, ct)
        dws[d] += np.einsum("nioab,nc->iocab", du, st)
        dwcb[d] += np.einsum("nioab,nc->iocab", dub, ct)
        dwsb[d] += np.einsum("nioab,nc->iocab", dub, st)
        dtheta[:, d] = (
            np.einsum("nioab,iocab->nc", du, ws[d]) * ct
            - np.einsum("nioab,iocab->nc", du, wc[d]) * st
            + np.einsum("nioab,iocab->nc", dub, wsb[d]) * ct
            - np.einsum("nioab,iocab->nc", dub, wcb[d]) * st
        )
    return dfeats, dtheta, dwb, dwc, dws, dwbb, dwcb, dwsb
