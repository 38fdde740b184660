# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled recurrent loops for the LSTM sequence kernels.

Only the time-stepped part lives here; the callers hoist the big
input-projection matmuls out of the loop.  Gate math is plain C and the
per-step recurrent products go through BLAS dgemm.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, tanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _sigmoid(double v) nogil:
    return 1.0 / (1.0 + exp(-v))


def loop_forward(double[:, :, ::1] ax, double[:, ::1] wr,
                 double[:, :, ::1] y, double[:, :, ::1] f,
                 double[:, :, ::1] i_, double[:, :, ::1] g,
                 double[:, :, ::1] o, double[:, :, ::1] c,
                 double[:, :, ::1] tc):
    """Fill gate/state buffers in place; ax already holds Wx@x + b and is
    consumed as scratch for the full pre-activations."""
    cdef int n_steps = ax.shape[0]
    cdef int batch = ax.shape[1]
    cdef int h4 = ax.shape[2]
    cdef int h = h4 // 4
    cdef int t, bi, j
    cdef double cp, ct
    cdef double alpha = 1.0, beta = 1.0
    cdef char trans_t = b'T', trans_n = b'N'
    cdef double *a_ptr
    with nogil:
        for t in range(n_steps):
            a_ptr = &ax[t, 0, 0]
            if t > 0:
                # ax[t] += y[t-1] @ wr.T, expressed column-major as
                # ax[t]^T += wr @ y[t-1]^T.
                dgemm(&trans_t, &trans_n, &h4, &batch, &h, &alpha,
                      &wr[0, 0], &h, &y[t - 1, 0, 0], &h, &beta, a_ptr, &h4)
            for bi in range(batch):
                for j in range(h):
                    f[t, bi, j] = _sigmoid(ax[t, bi, j])
                    i_[t, bi, j] = _sigmoid(ax[t, bi, h + j])
                    g[t, bi, j] = tanh(ax[t, bi, 2 * h + j])
                    o[t, bi, j] = _sigmoid(ax[t, bi, 3 * h + j])
                    cp = c[t - 1, bi, j] if t > 0 else 0.0
                    ct = f[t, bi, j] * cp + i_[t, bi, j] * g[t, bi, j]
                    c[t, bi, j] = ct
                    tc[t, bi, j] = tanh(ct)
                    y[t, bi, j] = o[t, bi, j] * tc[t, bi, j]


def loop_backward(double[:, :, ::1] dy_out, double[:, ::1] wr,
                  double[:, :, ::1] f, double[:, :, ::1] i_,
                  double[:, :, ::1] g, double[:, :, ::1] o,
                  double[:, :, ::1] c, double[:, :, ::1] tc,
                  double[:, :, ::1] da):
    """Fill da:(T,B,4H) with pre-activation gradients, walking time backwards."""
    cdef int n_steps = dy_out.shape[0]
    cdef int batch = dy_out.shape[1]
    cdef int h = dy_out.shape[2]
    cdef int h4 = 4 * h
    cdef int t, bi, j
    cdef double dy, dc, cp, fv, iv, gv, ov, tv
    cdef double alpha = 1.0, beta = 0.0
    cdef char trans_n = b'N'
    dy_rec_arr = np.zeros((batch, h))
    dc_rec_arr = np.zeros((batch, h))
    cdef double[:, ::1] dy_rec = dy_rec_arr
    cdef double[:, ::1] dc_rec = dc_rec_arr
    with nogil:
        for t in range(n_steps - 1, -1, -1):
            for bi in range(batch):
                for j in range(h):
                    fv = f[t, bi, j]
                    iv = i_[t, bi, j]
                    gv = g[t, bi, j]
                    ov = o[t, bi, j]
                    tv = tc[t, bi, j]
                    dy = dy_out[t, bi, j] + dy_rec[bi, j]
                    dc = dc_rec[bi, j] + dy * ov * (1.0 - tv * tv)
                    cp = c[t - 1, bi, j] if t > 0 else 0.0
                    da[t, bi, j] = dc * cp * fv * (1.0 - fv)
                    da[t, bi, h + j] = dc * gv * iv * (1.0 - iv)
                    da[t, bi, 2 * h + j] = dc * iv * (1.0 - gv * gv)
                    da[t, bi, 3 * h + j] = dy * tv * ov * (1.0 - ov)
                    dc_rec[bi, j] = dc * fv
            # dy_rec = da[t] @ wr, i.e. dy_rec^T = wr^T @ da[t]^T.
            dgemm(&trans_n, &trans_n, &h, &batch, &h4, &alpha,
                  &wr[0, 0], &h, &da[t, 0, 0], &h4, &beta, &dy_rec[0, 0], &h)
