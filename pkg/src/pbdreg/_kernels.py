"""Numba kernels for the Gauss-Seidel constraint sweep.

All kernels mutate ``x`` in place and never touch particles whose inverse
mass is zero.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _norm3(a0, a1, a2):
    return math.sqrt(a0 * a0 + a1 * a1 + a2 * a2)


@njit(cache=True)
def distance_residual(x, i, j, d0):
    dx = x[i, 0] - x[j, 0]
    dy = x[i, 1] - x[j, 1]
    dz = x[i, 2] - x[j, 2]
    return _norm3(dx, dy, dz) - d0


@njit(cache=True)
def signed_volume(x, a, b, c, d):
    e1x = x[b, 0] - x[a, 0]
    e1y = x[b, 1] - x[a, 1]
    e1z = x[b, 2] - x[a, 2]
    e2x = x[c, 0] - x[a, 0]
    e2y = x[c, 1] - x[a, 1]
    e2z = x[c, 2] - x[a, 2]
    e3x = x[d, 0] - x[a, 0]
    e3y = x[d, 1] - x[a, 1]
    e3z = x[d, 2] - x[a, 2]
    cx = e1y * e2z - e1z * e2y
    cy = e1z * e2x - e1x * e2z
    cz = e1x * e2y - e1y * e2x
    return (cx * e3x + cy * e3y + cz * e3z) / 6.0


@njit(cache=True)
def project_distances(x, w, pairs, rest, stiffness, eps):
    max_corr = 0.0
    n_degenerate = 0
    for c in range(pairs.shape[0]):
        i = pairs[c, 0]
        j = pairs[c, 1]
        wsum = w[i] + w[j]
        if wsum == 0.0:
            continue
        dx = x[i, 0] - x[j, 0]
        dy = x[i, 1] - x[j, 1]
        dz = x[i, 2] - x[j, 2]
        length = _norm3(dx, dy, dz)
        if length < eps:
            n_degenerate += 1
            continue
        s = stiffness[c] * (length - rest[c]) / (wsum * length)
        x[i, 0] -= w[i] * s * dx
        x[i, 1] -= w[i] * s * dy
        x[i, 2] -= w[i] * s * dz
        x[j, 0] += w[j] * s * dx
        x[j, 1] += w[j] * s * dy
        x[j, 2] += w[j] * s * dz
        corr = abs(s) * length * max(w[i], w[j])
        if corr > max_corr:
            max_corr = corr
    return max_corr, n_degenerate


@njit(cache=True)
def project_volumes(x, w, tets, rest, stiffness, eps):
    max_corr = 0.0
    n_degenerate = 0
    grad = np.empty((4, 3))
    for c in range(tets.shape[0]):
        a = tets[c, 0]
        b = tets[c, 1]
        cc = tets[c, 2]
        d = tets[c, 3]
        if w[a] + w[b] + w[cc] + w[d] == 0.0:
            continue
        ax, ay, az = x[a, 0], x[a, 1], x[a, 2]
        e1x, e1y, e1z = x[b, 0] - ax, x[b, 1] - ay, x[b, 2] - az
        e2x, e2y, e2z = x[cc, 0] - ax, x[cc, 1] - ay, x[cc, 2] - az
        e3x, e3y, e3z = x[d, 0] - ax, x[d, 1] - ay, x[d, 2] - az
        grad[1, 0] = (e2y * e3z - e2z * e3y) / 6.0
        grad[1, 1] = (e2z * e3x - e2x * e3z) / 6.0
        grad[1, 2] = (e2x * e3y - e2y * e3x) / 6.0
        grad[2, 0] = (e3y * e1z - e3z * e1y) / 6.0
        grad[2, 1] = (e3z * e1x - e3x * e1z) / 6.0
        grad[2, 2] = (e3x * e1y - e3y * e1x) / 6.0
        grad[3, 0] = (e1y * e2z - e1z * e2y) / 6.0
        grad[3, 1] = (e1z * e2x - e1x * e2z) / 6.0
        grad[3, 2] = (e1x * e2y - e1y * e2x) / 6.0
        for k in range(3):
            grad[0, k] = -(grad[1, k] + grad[2, k] + grad[3, k])
        gnorm2 = 0.0
        denom = 0.0
        ids = (a, b, cc, d)
        for m in range(4):
            g2 = grad[m, 0] ** 2 + grad[m, 1] ** 2 + grad[m, 2] ** 2
            gnorm2 += g2
            denom += w[ids[m]] * g2
        if math.sqrt(gnorm2) < eps:
            n_degenerate += 1
            continue
        if denom == 0.0:
            continue
        value = signed_volume(x, a, b, cc, d) - rest[c]
        s = stiffness[c] * value / denom
        for m in range(4):
            p = ids[m]
            if w[p] == 0.0:
                continue
            for k in range(3):
                delta = -s * w[p] * grad[m, k]
                x[p, k] += delta
                if abs(delta) > max_corr:
                    max_corr = abs(delta)
    return max_corr, n_degenerate


@njit(cache=True)
def _quat_to_mat(q, R):
    w, x, y, z = q[0], q[1], q[2], q[3]
    R[0, 0] = 1 - 2 * (y * y + z * z)
    R[0, 1] = 2 * (x * y - w * z)
    R[0, 2] = 2 * (x * z + w * y)
    R[1, 0] = 2 * (x * y + w * z)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (y * z - w * x)
    R[2, 0] = 2 * (x * z - w * y)
    R[2, 1] = 2 * (y * z + w * x)
    R[2, 2] = 1 - 2 * (x * x + y * y)


@njit(cache=True)
def extract_rotation(A, q, max_iter, R):
    """Rotation maximising trace(R^T A), by iterative quaternion updates.

    ``q`` (w, x, y, z) is the warm start and is overwritten with the result.
    """
    scale = 0.0
    for r in range(3):
        for c in range(3):
            scale += A[r, c] * A[r, c]
    scale = math.sqrt(scale)
    for _ in range(max_iter):
        _quat_to_mat(q, R)
        ox = oy = oz = 0.0
        tr = 0.0
        for c in range(3):
            rx, ry, rz = R[0, c], R[1, c], R[2, c]
            ax, ay, az = A[0, c], A[1, c], A[2, c]
            ox += ry * az - rz * ay
            oy += rz * ax - rx * az
            oz += rx * ay - ry * ax
            tr += rx * ax + ry * ay + rz * az
        inv = 1.0 / (abs(tr) + 1e-12 * scale + 1e-300)
        ox *= inv
        oy *= inv
        oz *= inv
        angle = _norm3(ox, oy, oz)
        if angle < 1e-11:
            break
        h = 0.5 * angle
        sh = math.sin(h) / angle
        dw, dx, dy, dz = math.cos(h), ox * sh, oy * sh, oz * sh
        w0, x0, y0, z0 = q[0], q[1], q[2], q[3]
        q[0] = dw * w0 - dx * x0 - dy * y0 - dz * z0
        q[1] = dw * x0 + dx * w0 + dy * z0 - dz * y0
        q[2] = dw * y0 - dx * z0 + dy * w0 + dz * x0
        q[3] = dw * z0 + dx * y0 - dy * x0 + dz * w0
        qn = math.sqrt(q[0] ** 2 + q[1] ** 2 + q[2] ** 2 + q[3] ** 2)
        for k in range(4):
            q[k] /= qn
    _quat_to_mat(q, R)


@njit(cache=True)
def _det3(M):
    return (M[0, 0] * (M[1, 1] * M[2, 2] - M[1, 2] * M[2, 1])
            - M[0, 1] * (M[1, 0] * M[2, 2] - M[1, 2] * M[2, 0])
            + M[0, 2] * (M[1, 0] * M[2, 1] - M[1, 1] * M[2, 0]))


@njit(cache=True)
def polar_rotation(A, R, q):
    """Rotation factor of A.

    Scaled Newton iteration on the polar decomposition when det(A) > 0
    (quadratic convergence); the quaternion iteration otherwise, which
    always yields a proper rotation.
    """
    det = _det3(A)
    fro = 0.0
    for r in range(3):
        for c in range(3):
            fro += A[r, c] * A[r, c]
    if det <= 1e-9 * fro ** 1.5:
        q[0] = 1.0
        q[1] = q[2] = q[3] = 0.0
        extract_rotation(A, q, 100, R)
        return
    C = np.empty((3, 3))
    for r in range(3):
        for c in range(3):
            R[r, c] = A[r, c]
    for _ in range(40):
        d = _det3(R)
        # cofactor matrix = det * inverse transpose
        C[0, 0] = R[1, 1] * R[2, 2] - R[1, 2] * R[2, 1]
        C[0, 1] = R[1, 2] * R[2, 0] - R[1, 0] * R[2, 2]
        C[0, 2] = R[1, 0] * R[2, 1] - R[1, 1] * R[2, 0]
        C[1, 0] = R[0, 2] * R[2, 1] - R[0, 1] * R[2, 2]
        C[1, 1] = R[0, 0] * R[2, 2] - R[0, 2] * R[2, 0]
        C[1, 2] = R[0, 1] * R[2, 0] - R[0, 0] * R[2, 1]
        C[2, 0] = R[0, 1] * R[1, 2] - R[0, 2] * R[1, 1]
        C[2, 1] = R[0, 2] * R[1, 0] - R[0, 0] * R[1, 2]
        C[2, 2] = R[0, 0] * R[1, 1] - R[0, 1] * R[1, 0]
        nx = 0.0
        ni = 0.0
        for r in range(3):
            for c in range(3):
                C[r, c] /= d
                nx += R[r, c] * R[r, c]
                ni += C[r, c] * C[r, c]
        g = math.sqrt(math.sqrt(ni / nx))
        change = 0.0
        for r in range(3):
            for c in range(3):
                v = 0.5 * (g * R[r, c] + C[r, c] / g)
                change += (v - R[r, c]) ** 2
                R[r, c] = v
        if change < 1e-26:
            break


@njit(cache=True)
def project_shapes(x, w, ptr, members, rest_centered, stiffness, eps):
    max_corr = 0.0
    n_degenerate = 0
    A = np.empty((3, 3))
    R = np.empty((3, 3))
    t = np.empty(3)
    q = np.empty(4)
    for c in range(ptr.shape[0] - 1):
        lo = ptr[c]
        hi = ptr[c + 1]
        n = hi - lo
        any_free = False
        for r in range(3):
            t[r] = 0.0
        for m in range(lo, hi):
            p = members[m]
            if w[p] > 0.0:
                any_free = True
            for r in range(3):
                t[r] += x[p, r]
        if not any_free:
            continue
        for r in range(3):
            t[r] /= n
        for r in range(3):
            for ss in range(3):
                A[r, ss] = 0.0
        for m in range(lo, hi):
            p = members[m]
            for r in range(3):
                xr = x[p, r] - t[r]
                for s in range(3):
                    A[r, s] += xr * rest_centered[m, s]
        fro = 0.0
        for r in range(3):
            for s in range(3):
                fro += A[r, s] * A[r, s]
        if math.sqrt(fro) < eps * eps:
            n_degenerate += 1
            continue
        polar_rotation(A, R, q)
        k = stiffness[c]
        for m in range(lo, hi):
            p = members[m]
            if w[p] == 0.0:
                continue
            for r in range(3):
                goal = t[r]
                for s in range(3):
                    goal += R[r, s] * rest_centered[m, s]
                delta = k * (goal - x[p, r])
                x[p, r] += delta
                if abs(delta) > max_corr:
                    max_corr = abs(delta)
    return max_corr, n_degenerate


@njit(cache=True)
def max_residuals(x, pairs, dist_rest, tets, vol_rest):
    dmax = 0.0
    for c in range(pairs.shape[0]):
        r = abs(distance_residual(x, pairs[c, 0], pairs[c, 1], dist_rest[c]))
        if r > dmax:
            dmax = r
    vmax = 0.0
    for c in range(tets.shape[0]):
        r = abs(signed_volume(x, tets[c, 0], tets[c, 1], tets[c, 2], tets[c, 3]) - vol_rest[c])
        if r > vmax:
            vmax = r
    return dmax, vmax


@njit(cache=True)
def rest_lengths(x, pairs):
    out = np.empty(pairs.shape[0])
    for c in range(pairs.shape[0]):
        out[c] = distance_residual(x, pairs[c, 0], pairs[c, 1], 0.0)
    return out


@njit(cache=True)
def rest_volumes(x, tets):
    out = np.empty(tets.shape[0])
    for c in range(tets.shape[0]):
        out[c] = signed_volume(x, tets[c, 0], tets[c, 1], tets[c, 2], tets[c, 3])
    return out
