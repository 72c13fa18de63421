"""JIT-compiled compositing loops.

One forward kernel and one backward kernel, both per pixel tile and both
strictly sequential over the depth-sorted splat list, so results are
deterministic; parallelism happens outside, across tiles (the kernels drop
the GIL). The backward walks the cached alpha/transmittance buffers
back-to-front with a "scene behind this splat" accumulator, avoiding any
division by (1 - alpha).
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def composite_tile(mean2d, conic, colors, alphas, rects, offsets, entry_splat,
                   tile_r0, tile_c0, bg, early_out, mahal2, alpha_min,
                   color_out, T_out, counts_out, want_cache, ah_buf, tb_buf):
    """Front-to-back compositing over one tile.

    `rects` are tile-clipped footprints (sr0, sr1, sc0, sc1) per entry,
    `offsets` index the flat cache buffers. early_out <= 0 disables the
    transmittance cutoff. Returns the number of entries processed (the rest
    were skipped because every pixel saturated).
    """
    h, w = T_out.shape
    live = h * w
    use_early = early_out > 0.0
    processed = 0
    for e in range(len(entry_splat)):
        if use_early and live == 0:
            break
        m = entry_splat[e]
        sr0, sr1, sc0, sc1 = rects[e, 0], rects[e, 1], rects[e, 2], rects[e, 3]
        off = offsets[e]
        a, b, c = conic[m, 0], conic[m, 1], conic[m, 2]
        mx, my = mean2d[m, 0], mean2d[m, 1]
        am = alphas[m]
        cr, cg, cb = colors[m, 0], colors[m, 1], colors[m, 2]
        k = 0
        for i in range(sr0, sr1):
            dy = i - my
            ti = i - tile_r0
            for j in range(sc0, sc1):
                dx = j - mx
                tj = j - tile_c0
                m2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                ah = 0.0
                if m2 <= mahal2:
                    ah = am * np.exp(-0.5 * m2)
                    if ah < alpha_min:
                        ah = 0.0
                Tb = T_out[ti, tj]
                if use_early and Tb < early_out:
                    ah = 0.0
                if want_cache:
                    ah_buf[off + k] = ah
                    tb_buf[off + k] = Tb
                k += 1
                if ah > 0.0:
                    wgt = ah * Tb
                    color_out[ti, tj, 0] += wgt * cr
                    color_out[ti, tj, 1] += wgt * cg
                    color_out[ti, tj, 2] += wgt * cb
                    counts_out[ti, tj] += 1
                    Tn = Tb * (1.0 - ah)
                    T_out[ti, tj] = Tn
                    if use_early and Tn < early_out:
                        live -= 1
        processed = e + 1
    for ti in range(h):
        for tj in range(w):
            t = T_out[ti, tj]
            color_out[ti, tj, 0] += t * bg[0]
            color_out[ti, tj, 1] += t * bg[1]
            color_out[ti, tj, 2] += t * bg[2]
    return processed


@njit(cache=True, nogil=True)
def backward_tile(mean2d, conic, colors, alphas, rects, offsets, entry_splat,
                  processed, tile_r0, tile_c0, tile_h, tile_w, bg, loss_grad,
                  ah_buf, tb_buf, d_mean2d, d_conic, d_alpha, d_color):
    """Back-to-front gradient accumulation using the forward kernel's cache."""
    U = np.empty((tile_h, tile_w, 3))
    for ti in range(tile_h):
        for tj in range(tile_w):
            U[ti, tj, 0] = bg[0]
            U[ti, tj, 1] = bg[1]
            U[ti, tj, 2] = bg[2]
    for e in range(processed - 1, -1, -1):
        m = entry_splat[e]
        sr0, sr1, sc0, sc1 = rects[e, 0], rects[e, 1], rects[e, 2], rects[e, 3]
        off = offsets[e]
        a, b, c = conic[m, 0], conic[m, 1], conic[m, 2]
        mx, my = mean2d[m, 0], mean2d[m, 1]
        am = alphas[m]
        cr, cg, cb = colors[m, 0], colors[m, 1], colors[m, 2]
        s_alpha = 0.0
        k = 0
        for i in range(sr0, sr1):
            ti = i - tile_r0
            dy = i - my
            for j in range(sc0, sc1):
                tj = j - tile_c0
                ah = ah_buf[off + k]
                Tb = tb_buf[off + k]
                k += 1
                if ah <= 0.0:
                    continue
                g0 = loss_grad[i, j, 0]
                g1 = loss_grad[i, j, 1]
                g2 = loss_grad[i, j, 2]
                wgt = ah * Tb
                d_color[m, 0] += g0 * wgt
                d_color[m, 1] += g1 * wgt
                d_color[m, 2] += g2 * wgt
                u0, u1, u2 = U[ti, tj, 0], U[ti, tj, 1], U[ti, tj, 2]
                dA = Tb * (g0 * (cr - u0) + g1 * (cg - u1) + g2 * (cb - u2))
                U[ti, tj, 0] = ah * cr + (1.0 - ah) * u0
                U[ti, tj, 1] = ah * cg + (1.0 - ah) * u1
                U[ti, tj, 2] = ah * cb + (1.0 - ah) * u2
                s_alpha += dA * ah
                dm2v = -0.5 * dA * ah
                dx = j - mx
                gx = a * dx + b * dy
                gy = b * dx + c * dy
                d_mean2d[m, 0] += -2.0 * dm2v * gx
                d_mean2d[m, 1] += -2.0 * dm2v * gy
                d_conic[m, 0] += dm2v * dx * dx
                d_conic[m, 1] += dm2v * dx * dy
                d_conic[m, 2] += dm2v * dy * dy
        d_alpha[m] += s_alpha / am
