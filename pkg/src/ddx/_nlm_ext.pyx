# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled non-local means kernel.

Operates on a reflect-padded float64 image. Accumulation order per output
pixel is fixed (offsets visited in raster order), so results do not depend
on the thread count.
"""
import numpy as np

cimport cython
from cython.parallel cimport prange
from libc.math cimport exp


def nlm_padded(double[:, :, ::1] padded, int height, int width,
               int patch_radius, int search_radius, double h, int num_threads=1):
    cdef int r = patch_radius
    cdef int s = search_radius
    cdef int nch = padded.shape[2]
    cdef int ext_h = height + 2 * r
    cdef int ext_w = width + 2 * r
    cdef int psize = 2 * r + 1
    cdef double norm = 1.0 / (nch * psize * psize)
    cdef double inv_h2 = 1.0 / (h * h)

    out_np = np.zeros((height, width, nch), dtype=np.float64)
    den_np = np.zeros((height, width), dtype=np.float64)
    dist_np = np.empty((ext_h, ext_w), dtype=np.float64)
    rows_np = np.empty((ext_h, width), dtype=np.float64)
    cdef double[:, :, ::1] out = out_np
    cdef double[:, ::1] den = den_np
    cdef double[:, ::1] dist = dist_np
    cdef double[:, ::1] rows = rows_np

    cdef int dy, dx, u, v, y, x, c, a
    cdef double acc, diff, wgt
    if num_threads < 1:
        num_threads = 1

    for dy in range(-s, s + 1):
        for dx in range(-s, s + 1):
            # squared differences between the two shifted copies, summed over channels
            for u in prange(ext_h, nogil=True, schedule="static", num_threads=num_threads):
                for v in range(ext_w):
                    acc = 0.0
                    for c in range(nch):
                        diff = padded[u + s, v + s, c] - padded[u + s + dy, v + s + dx, c]
                        acc = acc + diff * diff
                    dist[u, v] = acc
            # horizontal box sums
            for u in prange(ext_h, nogil=True, schedule="static", num_threads=num_threads):
                for x in range(width):
                    acc = 0.0
                    for a in range(psize):
                        acc = acc + dist[u, x + a]
                    rows[u, x] = acc
            # vertical box sums, weights and accumulation
            for y in prange(height, nogil=True, schedule="static", num_threads=num_threads):
                for x in range(width):
                    acc = 0.0
                    for a in range(psize):
                        acc = acc + rows[y + a, x]
                    wgt = exp(-(acc * norm) * inv_h2)
                    den[y, x] = den[y, x] + wgt
                    for c in range(nch):
                        out[y, x, c] = out[y, x, c] + wgt * padded[y + r + s + dy, x + r + s + dx, c]

    for y in range(height):
        for x in range(width):
            for c in range(nch):
                out[y, x, c] = out[y, x, c] / den[y, x]
    return out_np
