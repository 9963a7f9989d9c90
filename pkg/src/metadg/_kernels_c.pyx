# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and max-pool kernels.

Convolutions are im2col in C followed by BLAS dgemm over chunks of samples
sized so the column buffer stays bounded. Signatures and results mirror
``metadg._kernels_py``; the pooling argmax convention (first maximum in
row-major window order) is identical so both backends agree bitwise there.
"""

import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void gemm_rm(char ta, char tb, int M, int N, int K, double alpha,
                         double* A, int lda, double* B, int ldb,
                         double beta, double* C, int ldc) noexcept nogil:
    # row-major C = op(A) @ op(B) expressed as column-major C^T = op(B)^T op(A)^T
    dgemm(&tb, &ta, &N, &M, &K, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)


cdef inline void _valid_cols(int Wo, int W, int kw, int stride, int pad, int* lo, int* hi) noexcept nogil:
    # output columns j with 0 <= j*stride + kw - pad < W
    cdef int l = 0, h = Wo
    while l < Wo and l * stride + kw - pad < 0:
        l += 1
    while h > l and (h - 1) * stride + kw - pad >= W:
        h -= 1
    lo[0] = l
    hi[0] = h


cdef void im2col(double* x, int C, int H, int W, int K, int stride, int pad,
                 int Ho, int Wo, double* cols, int ld) noexcept nogil:
    cdef int c, kh, kw, i, j, ii, row, jlo, jhi, off
    cdef double* dst
    cdef double* src
    cdef double* d
    cdef double* s
    for c in range(C):
        src = x + c * H * W
        for kh in range(K):
            for kw in range(K):
                row = (c * K + kh) * K + kw
                dst = cols + row * ld
                _valid_cols(Wo, W, kw, stride, pad, &jlo, &jhi)
                off = kw - pad
                for i in range(Ho):
                    d = dst + i * Wo
                    ii = i * stride + kh - pad
                    if ii < 0 or ii >= H:
                        for j in range(Wo):
                            d[j] = 0.0
                        continue
                    s = src + ii * W + off
                    for j in range(jlo):
                        d[j] = 0.0
                    if stride == 1:
                        for j in range(jlo, jhi):
                            d[j] = s[j]
                    else:
                        for j in range(jlo, jhi):
                            d[j] = s[j * stride]
                    for j in range(jhi, Wo):
                        d[j] = 0.0


cdef void col2im_add(double* cols, int C, int H, int W, int K, int stride, int pad,
                     int Ho, int Wo, double* x, int ld) noexcept nogil:
    cdef int c, kh, kw, i, j, ii, row, jlo, jhi, off
    cdef double* src
    cdef double* dst
    cdef double* d
    cdef double* s
    for c in range(C):
        dst = x + c * H * W
        for kh in range(K):
            for kw in range(K):
                row = (c * K + kh) * K + kw
                src = cols + row * ld
                _valid_cols(Wo, W, kw, stride, pad, &jlo, &jhi)
                off = kw - pad
                for i in range(Ho):
                    ii = i * stride + kh - pad
                    if ii < 0 or ii >= H:
                        continue
                    s = src + i * Wo
                    d = dst + ii * W + off
                    if stride == 1:
                        for j in range(jlo, jhi):
                            d[j] += s[j]
                    else:
                        for j in range(jlo, jhi):
                            d[j * stride] += s[j]


def conv_out_size(Py_ssize_t n, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    return (n + 2 * pad - k) // stride + 1


# samples per gemm are chosen so one column buffer holds at most this many doubles
DEF COL_BUDGET = 1 << 21


cdef int _chunk(int B, int CKK, int P) noexcept nogil:
    cdef long per = <long>CKK * P
    cdef long nb = COL_BUDGET // per if per > 0 else B
    if nb < 1:
        nb = 1
    if nb > B:
        nb = B
    return <int>nb


cdef void _gather_g(double* g, int nb, int O, int P, double* dst) noexcept nogil:
    # (nb, O, P) -> (O, nb*P)
    cdef int b, o, p
    for b in range(nb):
        for o in range(O):
            for p in range(P):
                dst[o * nb * P + b * P + p] = g[(b * O + o) * P + p]


def conv2d_forward(x, w, int stride, int pad):
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef int B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    cdef int O = wv.shape[0], K = wv.shape[2]
    cdef int Ho = (H + 2 * pad - K) // stride + 1
    cdef int Wo = (W + 2 * pad - K) // stride + 1
    cdef int P = Ho * Wo, CKK = C * K * K
    out = np.empty((B, O, Ho, Wo))
    if B == 0 or O == 0 or P == 0:
        return out
    cdef double[:, :, :, ::1] ov = out
    cdef int nb = _chunk(B, CKK, P)
    cdef double[::1] cols = np.empty(CKK * P * nb)
    cdef double[::1] tmp = np.empty(O * P * nb)
    cdef int b0, b, n, o, p
    cdef double* op = &ov[0, 0, 0, 0]
    with nogil:
        b0 = 0
        while b0 < B:
            n = nb if b0 + nb <= B else B - b0
            for b in range(n):
                im2col(&xv[b0 + b, 0, 0, 0], C, H, W, K, stride, pad, Ho, Wo, &cols[b * P], n * P)
            gemm_rm(b'N', b'N', O, n * P, CKK, 1.0, &wv[0, 0, 0, 0], CKK,
                    &cols[0], n * P, 0.0, &tmp[0], n * P)
            for b in range(n):
                for o in range(O):
                    for p in range(P):
                        op[((b0 + b) * O + o) * P + p] = tmp[o * n * P + b * P + p]
            b0 += n
    return out


def conv2d_backward_input(g, w, x_shape, int stride, int pad):
    cdef const double[:, :, :, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef const double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef int B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef int O = wv.shape[0], K = wv.shape[2]
    cdef int Ho = gv.shape[2], Wo = gv.shape[3]
    cdef int P = Ho * Wo, CKK = C * K * K
    out = np.zeros((B, C, H, W))
    if B == 0 or C == 0 or P == 0:
        return out
    cdef double[:, :, :, ::1] dv = out
    cdef int nb = _chunk(B, CKK, P)
    cdef double[::1] cols = np.empty(CKK * P * nb)
    cdef double[::1] gt = np.empty(O * P * nb)
    cdef int b0, b, n
    with nogil:
        b0 = 0
        while b0 < B:
            n = nb if b0 + nb <= B else B - b0
            _gather_g(&gv[b0, 0, 0, 0], n, O, P, &gt[0])
            gemm_rm(b'T', b'N', CKK, n * P, O, 1.0, &wv[0, 0, 0, 0], CKK,
                    &gt[0], n * P, 0.0, &cols[0], n * P)
            for b in range(n):
                col2im_add(&cols[b * P], C, H, W, K, stride, pad, Ho, Wo, &dv[b0 + b, 0, 0, 0], n * P)
            b0 += n
    return out


def conv2d_backward_weight(x, g, w_shape, int stride, int pad):
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, :, :, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef int B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    cdef int O = w_shape[0], K = w_shape[2]
    cdef int Ho = gv.shape[2], Wo = gv.shape[3]
    cdef int P = Ho * Wo, CKK = C * K * K
    out = np.zeros((O, C, K, K))
    if B == 0 or O == 0 or CKK == 0 or P == 0:
        return out
    cdef double[:, :, :, ::1] dv = out
    cdef int nb = _chunk(B, CKK, P)
    cdef double[::1] cols = np.empty(CKK * P * nb)
    cdef double[::1] gt = np.empty(O * P * nb)
    cdef int b0, b, n
    with nogil:
        b0 = 0
        while b0 < B:
            n = nb if b0 + nb <= B else B - b0
            for b in range(n):
                im2col(&xv[b0 + b, 0, 0, 0], C, H, W, K, stride, pad, Ho, Wo, &cols[b * P], n * P)
            _gather_g(&gv[b0, 0, 0, 0], n, O, P, &gt[0])
            gemm_rm(b'N', b'T', O, CKK, n * P, 1.0, &gt[0], n * P,
                    &cols[0], n * P, 1.0, &dv[0, 0, 0, 0], CKK)
            b0 += n
    return out


def maxpool2_forward(x):
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2] // 2, W = xv.shape[3] // 2
    out = np.empty((B, C, H, W))
    idx = np.empty((B, C, H, W), dtype=np.int8)
    cdef double[:, :, :, ::1] ov = out
    cdef cnp.int8_t[:, :, :, ::1] iv = idx
    cdef Py_ssize_t b, c, i, j
    cdef double best, v
    cdef cnp.int8_t k
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(H):
                    for j in range(W):
                        best = xv[b, c, 2 * i, 2 * j]
                        k = 0
                        v = xv[b, c, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = xv[b, c, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            k = 2
                        v = xv[b, c, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            k = 3
                        ov[b, c, i, j] = best
                        iv[b, c, i, j] = k
    return out, idx


def pool_gather(x, idx):
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const cnp.int8_t[:, :, :, ::1] iv = np.ascontiguousarray(idx, dtype=np.int8)
    cdef Py_ssize_t B = iv.shape[0], C = iv.shape[1], H = iv.shape[2], W = iv.shape[3]
    out = np.empty((B, C, H, W))
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, c, i, j
    cdef int k
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(H):
                    for j in range(W):
                        k = iv[b, c, i, j]
                        ov[b, c, i, j] = xv[b, c, 2 * i + k // 2, 2 * j + k % 2]
    return out


def pool_scatter(g, idx, in_shape):
    cdef const double[:, :, :, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef const cnp.int8_t[:, :, :, ::1] iv = np.ascontiguousarray(idx, dtype=np.int8)
    cdef Py_ssize_t B = iv.shape[0], C = iv.shape[1], H = iv.shape[2], W = iv.shape[3]
    out = np.zeros(tuple(in_shape))
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, c, i, j
    cdef int k
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(H):
                    for j in range(W):
                        k = iv[b, c, i, j]
                        ov[b, c, 2 * i + k // 2, 2 * j + k % 2] = gv[b, c, i, j]
    return out


def standardize_forward(x, scale, shift, double eps):
    """Per-channel batch standardization; returns (out, xhat, inv) with inv shaped (C,)."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef const double[:, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64).reshape(B, C, -1)
    cdef const double[::1] sa = np.ascontiguousarray(scale, dtype=np.float64)
    cdef const double[::1] ba = np.ascontiguousarray(shift, dtype=np.float64)
    cdef Py_ssize_t P = xv.shape[2]
    out = np.empty((B, C, P))
    xhat = np.empty((B, C, P))
    inv = np.empty(C)
    cdef double[:, :, ::1] ov = out
    cdef double[:, :, ::1] hv = xhat
    cdef double[::1] iv = inv
    cdef Py_ssize_t b, c, p
    cdef double mu, var, d, k, n = B * P
    if B == 0 or P == 0:
        raise ValueError("standardize: empty batch")
    with nogil:
        for c in range(C):
            mu = 0.0
            for b in range(B):
                for p in range(P):
                    mu += xv[b, c, p]
            mu /= n
            var = 0.0
            for b in range(B):
                for p in range(P):
                    d = xv[b, c, p] - mu
                    var += d * d
            var /= n
            k = 1.0 / (var + eps) ** 0.5
            iv[c] = k
            for b in range(B):
                for p in range(P):
                    d = (xv[b, c, p] - mu) * k
                    hv[b, c, p] = d
                    ov[b, c, p] = d * sa[c] + ba[c]
    return out.reshape(x.shape), xhat.reshape(x.shape), inv


def standardize_backward(g, xhat, inv, scale):
    """Adjoints (gx, gscale, gshift) of standardize_forward."""
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1]
    cdef const double[:, :, ::1] gv = np.ascontiguousarray(g, dtype=np.float64).reshape(B, C, -1)
    cdef const double[:, :, ::1] hv = np.ascontiguousarray(xhat, dtype=np.float64).reshape(B, C, -1)
    cdef const double[::1] iva = np.ascontiguousarray(inv, dtype=np.float64)
    cdef const double[::1] sa = np.ascontiguousarray(scale, dtype=np.float64)
    cdef Py_ssize_t P = gv.shape[2]
    gx = np.empty((B, C, P))
    gs = np.empty(C)
    gb = np.empty(C)
    cdef double[:, :, ::1] xv = gx
    cdef double[::1] gsv = gs
    cdef double[::1] gbv = gb
    cdef Py_ssize_t b, c, p
    cdef double sg, sgh, k, n = B * P
    with nogil:
        for c in range(C):
            sg = 0.0
            sgh = 0.0
            for b in range(B):
                for p in range(P):
                    sg += gv[b, c, p]
                    sgh += gv[b, c, p] * hv[b, c, p]
            gsv[c] = sgh
            gbv[c] = sg
            k = sa[c] * iva[c]
            sg /= n
            sgh /= n
            for b in range(B):
                for p in range(P):
                    xv[b, c, p] = k * (gv[b, c, p] - sg - hv[b, c, p] * sgh)
    return gx.reshape(g.shape), gs, gb
