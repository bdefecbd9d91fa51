"""Pure numpy im2col / col2im for 3D volumes (2D is depth 1).

Column layout is (N, C*kd*kh*kw, od*oh*ow), channel-major then kernel
offset, matching a (out_ch, in_ch, kd, kh, kw) kernel reshaped to 2D.
"""
import numpy as np


def out_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def vol2col(x, ksize, stride, pad):
    N, C, D, H, W = x.shape
    kd, kh, kw = ksize
    sd, sh, sw = stride
    pd, ph, pw = pad
    od, oh, ow = out_extent(D, kd, sd, pd), out_extent(H, kh, sh, ph), out_extent(W, kw, sw, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    cols = np.empty((N, C, kd, kh, kw, od, oh, ow), dtype=x.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                cols[:, :, a, b, c] = xp[:, :,
                                         a:a + sd * (od - 1) + 1:sd,
                                         b:b + sh * (oh - 1) + 1:sh,
                                         c:c + sw * (ow - 1) + 1:sw]
    return cols.reshape(N, C * kd * kh * kw, od * oh * ow)


def col2vol(cols, shape, ksize, stride, pad):
    N, C, D, H, W = shape
    kd, kh, kw = ksize
    sd, sh, sw = stride
    pd, ph, pw = pad
    od, oh, ow = out_extent(D, kd, sd, pd), out_extent(H, kh, sh, ph), out_extent(W, kw, sw, pw)
    cols = cols.reshape(N, C, kd, kh, kw, od, oh, ow)
    # extra margin so slices past the far edge (output_pad case) stay in bounds
    xp = np.zeros((N, C, D + 2 * pd + sd, H + 2 * ph + sh, W + 2 * pw + sw), dtype=cols.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                xp[:, :,
                   a:a + sd * (od - 1) + 1:sd,
                   b:b + sh * (oh - 1) + 1:sh,
                   c:c + sw * (ow - 1) + 1:sw] += cols[:, :, a, b, c]
    return np.ascontiguousarray(xp[:, :, pd:pd + D, ph:ph + H, pw:pw + W])
