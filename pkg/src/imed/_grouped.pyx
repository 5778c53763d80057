# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Batched per-instance grouped matrix products.

Shapes: ``x`` is (B, G, K), ``w`` is (B, G, K, M), output is (B, G, M).
``w`` may carry zero strides (expanded views) so shared or owned weights
need no copy.
"""

ctypedef fused real:
    float
    double


def grouped_forward(const real[:, :, ::1] x, const real[:, :, :, :] w, real[:, :, ::1] out):
    cdef Py_ssize_t B = x.shape[0]
    cdef Py_ssize_t G = x.shape[1]
    cdef Py_ssize_t K = x.shape[2]
    cdef Py_ssize_t M = w.shape[3]
    cdef Py_ssize_t b, g, k, m
    cdef real xv
    with nogil:
        for b in range(B):
            for g in range(G):
                for m in range(M):
                    out[b, g, m] = 0
                for k in range(K):
                    xv = x[b, g, k]
                    if xv == 0:
                        continue
                    for m in range(M):
                        out[b, g, m] += xv * w[b, g, k, m]


def grouped_backward_input(const real[:, :, :, :] w, const real[:, :, ::1] grad_out, real[:, :, ::1] grad_x):
    cdef Py_ssize_t B = grad_out.shape[0]
    cdef Py_ssize_t G = grad_out.shape[1]
    cdef Py_ssize_t M = grad_out.shape[2]
    cdef Py_ssize_t K = w.shape[2]
    cdef Py_ssize_t b, g, k, m
    cdef real acc
    with nogil:
        for b in range(B):
            for g in range(G):
                for k in range(K):
                    acc = 0
                    for m in range(M):
                        acc = acc + w[b, g, k, m] * grad_out[b, g, m]
                    grad_x[b, g, k] = acc


def grouped_backward_weight(const real[:, :, ::1] x, const real[:, :, ::1] grad_out, real[:, :, :, ::1] grad_w):
    cdef Py_ssize_t B = x.shape[0]
    cdef Py_ssize_t G = x.shape[1]
    cdef Py_ssize_t K = x.shape[2]
    cdef Py_ssize_t M = grad_out.shape[2]
    cdef Py_ssize_t b, g, k, m
    cdef real xv
    with nogil:
        for b in range(B):
            for g in range(G):
                for k in range(K):
                    xv = x[b, g, k]
                    for m in range(M):
                        grad_w[b, g, k, m] = xv * grad_out[b, g, m]
