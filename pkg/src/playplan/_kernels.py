"""Compiled inner loops for the push-T and chain contact models."""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _clip(v, lo, hi):
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


@njit(cache=True)
def _disc_rect(qx, qy, r, x0, x1, y0, y1):
    cx = x0 if qx < x0 else (x1 if qx > x1 else qx)
    cy = y0 if qy < y0 else (y1 if qy > y1 else qy)
    dx = cx - qx
    dy = cy - qy
    d2 = dx * dx + dy * dy
    if d2 > 0.0:
        if d2 >= r * r:
            return 0.0, 0.0, 0.0, cx, cy
        d = math.sqrt(d2)
        return r - d, dx / d, dy / d, cx, cy
    dl = qx - x0
    dr = x1 - qx
    db = qy - y0
    dt = y1 - qy
    m = min(dl, dr, db, dt)
    if m == dl:
        return r + dl, 1.0, 0.0, x0, qy
    if m == dr:
        return r + dr, -1.0, 0.0, x1, qy
    if m == db:
        return r + db, 0.0, 1.0, qx, y0
    return r + dt, 0.0, -1.0, qx, y1


@njit(cache=True)
def tee_penetration(px, py, tx, ty, th, rects, r):
    """Deepest disc penetration into the T; ``(depth, nx, ny, cx, cy)`` in world frame."""
    c = math.cos(th)
    s = math.sin(th)
    dx = px - tx
    dy = py - ty
    qx = c * dx + s * dy
    qy = -s * dx + c * dy
    bd, bnx, bny, bcx, bcy = -1e300, 0.0, 0.0, 0.0, 0.0
    for k in range(rects.shape[0]):
        d, nx, ny, lx, ly = _disc_rect(qx, qy, r, rects[k, 0], rects[k, 1], rects[k, 2], rects[k, 3])
        if d > bd:
            bd, bnx, bny, bcx, bcy = d, nx, ny, lx, ly
    return (bd, c * bnx - s * bny, s * bnx + c * bny,
            tx + c * bcx - s * bcy, ty + s * bcx + c * bcy)


@njit(cache=True)
def pusht_step(px0, py0, tx, ty, th, vx, vy, rects, prm):
    """One quasi-static push-T step.

    ``prm`` = (radius, kappa, dt, a_max, substep, rotation_iters, object_lo,
    object_hi, pusher_lo, pusher_hi, bound_radius). Returns the new
    ``(px, py, tx, ty, th)`` and whether the T moved; ``th`` is not wrapped.
    """
    r, kappa, dt, a_max, substep = prm[0], prm[1], prm[2], prm[3], prm[4]
    rot_iters = int(prm[5])
    olo, ohi, plo, phi, reach = prm[6], prm[7], prm[8], prm[9], prm[10] + prm[0]
    n = math.hypot(vx, vy)
    if n > a_max:
        vx *= a_max / n
        vy *= a_max / n
    px1 = _clip(px0 + vx * dt, plo, phi)
    py1 = _clip(py0 + vy * dt, plo, phi)
    ex = px1 - px0
    ey = py1 - py0
    L2 = ex * ex + ey * ey
    u = 0.0
    if L2 > 0.0:
        u = _clip(((tx - px0) * ex + (ty - py0) * ey) / L2, 0.0, 1.0)
    if math.hypot(px0 + u * ex - tx, py0 + u * ey - ty) > reach:
        return px1, py1, tx, ty, th, False
    n_sub = max(1, int(math.ceil(math.sqrt(L2) / substep)))
    moved = False
    for k in range(1, n_sub + 1):
        qx = px0 + ex * k / n_sub
        qy = py0 + ey * k / n_sub
        if tee_penetration(qx, qy, tx, ty, th, rects, r)[0] > 0.0:
            moved = True
            for it in range(rot_iters + 8):
                depth, nx, ny, cx, cy = tee_penetration(qx, qy, tx, ty, th, rects, r)
                if depth <= 1e-12:
                    break
                if it < rot_iters and kappa > 0.0:
                    th = th + kappa * ((cx - tx) * ny - (cy - ty) * nx) * depth
                tx += nx * depth
                ty += ny * depth
    if not moved:
        return px1, py1, tx, ty, th, False
    cx = _clip(tx, olo, ohi)
    cy = _clip(ty, olo, ohi)
    if cx != tx or cy != ty:
        # object stopped by the rim: the pusher is pushed back out instead
        tx = cx
        ty = cy
        for _ in range(8):
            depth, nx, ny, _a, _b = tee_penetration(px1, py1, tx, ty, th, rects, r)
            if depth <= 0.0:
                break
            px1 -= nx * depth
            py1 -= ny * depth
    return px1, py1, tx, ty, th, True


@njit(cache=True)
def pusht_run(px, py, tx, ty, th, actions, noise, sig_pos, sig_rot, rects, prm):
    """Roll a chunk; ``noise`` is ``(h, 3)`` standard normals applied when the T moves."""
    h = actions.shape[0]
    out = np.empty((h, 5))
    for i in range(h):
        px, py, tx, ty, th, moved = pusht_step(px, py, tx, ty, th, actions[i, 0], actions[i, 1], rects, prm)
        if moved:
            tx += sig_pos * noise[i, 0]
            ty += sig_pos * noise[i, 1]
            th += sig_rot * noise[i, 2]
        out[i, 0] = px
        out[i, 1] = py
        out[i, 2] = tx
        out[i, 3] = ty
        out[i, 4] = th
    return out


@njit(cache=True)
def _spacing_ok(links, rest, tol):
    for i in range(links.shape[0] - 1):
        L = math.hypot(links[i + 1, 0] - links[i, 0], links[i + 1, 1] - links[i, 1]) / rest
        if L < 1.0 - tol or L > 1.0 + tol:
            return False
    return True


@njit(cache=True)
def _constrain(links, rest, delta):
    n = links.shape[0]
    for i in range(n):
        delta[i, 0] = 0.0
        delta[i, 1] = 0.0
    for i in range(n - 1):
        dx = links[i + 1, 0] - links[i, 0]
        dy = links[i + 1, 1] - links[i, 1]
        L = math.hypot(dx, dy)
        if L <= 0.0:
            L = 1e-12
        f = (L - rest) / L * 0.5
        delta[i, 0] += dx * f
        delta[i, 1] += dy * f
        delta[i + 1, 0] -= dx * f
        delta[i + 1, 1] -= dy * f
    for i in range(n):
        links[i, 0] += delta[i, 0]
        links[i, 1] += delta[i, 1]


@njit(cache=True)
def _push_out(px, py, links, rr):
    hit = False
    for i in range(links.shape[0]):
        dx = links[i, 0] - px
        dy = links[i, 1] - py
        d = math.hypot(dx, dy)
        if d < rr:
            if d > 0.0:
                links[i, 0] = px + dx / d * rr
                links[i, 1] = py + dy / d * rr
            else:
                links[i, 0] = px + rr
                links[i, 1] = py
            hit = True
    return hit


@njit(cache=True)
def chain_step(px0, py0, links, vx, vy, prm):
    """One chain step, ``links`` updated in place.

    ``prm`` = (rest, iters, pusher_r, link_r, dt, a_max, substep, spacing_tol,
    max_extra, object_lo, object_hi, pusher_lo, pusher_hi). Returns
    ``(px, py, moved)``.
    """
    rest, iters, rr = prm[0], int(prm[1]), prm[2] + prm[3]
    dt, a_max, substep, tol, max_extra = prm[4], prm[5], prm[6], prm[7], int(prm[8])
    olo, ohi, plo, phi = prm[9], prm[10], prm[11], prm[12]
    n = math.hypot(vx, vy)
    if n > a_max:
        vx *= a_max / n
        vy *= a_max / n
    px1 = _clip(px0 + vx * dt, plo, phi)
    py1 = _clip(py0 + vy * dt, plo, phi)
    ex = px1 - px0
    ey = py1 - py0
    L2 = ex * ex + ey * ey
    near = False
    for i in range(links.shape[0]):
        rx = links[i, 0] - px0
        ry = links[i, 1] - py0
        u = 0.0
        if L2 > 0.0:
            u = _clip((rx * ex + ry * ey) / L2, 0.0, 1.0)
        if math.hypot(rx - u * ex, ry - u * ey) < rr:
            near = True
            break
    if not near:
        return px1, py1, False
    delta = np.empty_like(links)
    n_sub = max(1, int(math.ceil(math.sqrt(L2) / substep)))
    moved = False
    for k in range(1, n_sub + 1):
        if _push_out(px0 + ex * k / n_sub, py0 + ey * k / n_sub, links, rr):
            moved = True
            for _ in range(iters):
                _constrain(links, rest, delta)
    if not moved:
        return px1, py1, False
    extra = 0
    while not _spacing_ok(links, rest, tol) and extra < max_extra:
        _constrain(links, rest, delta)
        extra += 1
    for i in range(links.shape[0]):
        links[i, 0] = _clip(links[i, 0], olo, ohi)
        links[i, 1] = _clip(links[i, 1], olo, ohi)
    return px1, py1, True


@njit(cache=True)
def splat(frames, xy, wc, obj_ch, n_ch, res):
    """Bilinear splat of rigidly placed template points into occupancy grids, clipped to 1.

    ``frames`` is ``(n, k, 3)`` object poses ``(x, y, theta)``, ``xy`` the
    ``(Q, 2)`` template points with weights ``wc`` and ``obj_ch`` the channel of
    each of the ``k`` objects. The result is ``(n, n_ch * res * res)`` laid out
    as channel, row (y), column (x).
    """
    n, k = frames.shape[0], frames.shape[1]
    Q = xy.shape[0]
    size = n_ch * res * res
    out = np.zeros((n, size))
    for s in range(n):
        for o in range(k):
            c = math.cos(frames[s, o, 2])
            sn = math.sin(frames[s, o, 2])
            ox = frames[s, o, 0]
            oy = frames[s, o, 1]
            base = obj_ch[o] * res * res
            for q in range(Q):
                u = (ox + c * xy[q, 0] - sn * xy[q, 1]) * res - 0.5
                v = (oy + sn * xy[q, 0] + c * xy[q, 1]) * res - 0.5
                i0 = int(math.floor(u))
                j0 = int(math.floor(v))
                fu = u - i0
                fv = v - j0
                w = wc[q]
                for dj in range(2):
                    jj = j0 + dj
                    if jj < 0 or jj >= res:
                        continue
                    wy = fv if dj else 1.0 - fv
                    for di in range(2):
                        ii = i0 + di
                        if ii < 0 or ii >= res:
                            continue
                        wx = fu if di else 1.0 - fu
                        out[s, base + jj * res + ii] += w * wx * wy
        for m in range(size):
            if out[s, m] > 1.0:
                out[s, m] = 1.0
    return out
