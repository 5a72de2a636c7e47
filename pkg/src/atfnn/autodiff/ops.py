"""Fused network ops with hand-derived backward passes.

Each op here could be built from the primitives in ``tensor``, but these
fused versions save exactly the intermediates the gradient needs and push
all heavy lifting through large GEMMs. They participate in the same graph
as the primitives.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .tensor import Tensor, _as_tensor, concat, reshape


def linear(x, w, b=None) -> Tensor:
    """Affine map over the last axis: y = x @ w + b."""
    x, w = _as_tensor(x), _as_tensor(w)
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    out = Tensor(y)

    def backward(g):
        gflat = g.reshape(-1, w.shape[1])
        xflat = x.data.reshape(-1, w.shape[0])
        if w.requires_grad:
            w.accumulate_grad(xflat.T @ gflat)
        if b is not None and b.requires_grad:
            b.accumulate_grad(gflat.sum(axis=0))
        if x.requires_grad:
            x.accumulate_grad((gflat @ w.data.T).reshape(x.shape))

    parents = (x, w) if b is None else (x, w, b)
    return out._trace(parents, backward)


def conv2d(x, kernel, bias=None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation, NCHW layout.

    x: (B, C_in, H, W), kernel: (C_out, C_in, kH, kW). Implemented as
    im2col + GEMM; the input gradient scatters window columns back with
    one strided add per kernel offset.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    sh, sw = stride
    ph, pw = padding
    B, C, H, W = x.shape
    c_out, c_in, kh, kw = kernel.shape
    if c_in != C:
        raise ValueError(f"kernel expects {c_in} input channels, got {C}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if (hp - kh) % sh or (wp - kw) % sw:
        raise ValueError(f"stride {stride} does not evenly tile a {hp}x{wp} input with kernel {kh}x{kw}")
    h_out = (hp - kh) // sh + 1
    w_out = (wp - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * h_out * w_out, C * kh * kw)
    wmat = kernel.data.reshape(c_out, C * kh * kw)
    y = cols @ wmat.T
    if bias is not None:
        y = y + bias.data
    out = Tensor(np.ascontiguousarray(y.reshape(B, h_out, w_out, c_out).transpose(0, 3, 1, 2)))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * h_out * w_out, c_out)
        if kernel.requires_grad:
            kernel.accumulate_grad((gmat.T @ cols).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(gmat.sum(axis=0))
        if x.requires_grad:
            dcols = gmat @ wmat
            dwin = dcols.reshape(B, h_out, w_out, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros((B, C, hp, wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + h_out * sh:sh, j:j + w_out * sw:sw] += dwin[:, :, :, :, i, j]
            x.accumulate_grad(np.ascontiguousarray(dxp[:, :, ph:hp - ph, pw:wp - pw]))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return out._trace(parents, backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gain.data * xhat + bias.data)
    reduce_axes = tuple(range(x.ndim - 1))

    def backward(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).sum(axis=reduce_axes))
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=reduce_axes))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad((dxhat - m1 - xhat * m2) * inv)

    return out._trace((x, gain, bias), backward)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return out._trace((x,), backward)


def multi_head_self_attention(x, wq, wk, wv, wo, num_heads: int) -> Tensor:
    """Scaled dot-product self-attention over (B, N, D) sequences.

    Projection matrices are (D, D), bias-free. Heads split D evenly; the
    softmax matrix is the only large intermediate kept for backward.
    """
    x = _as_tensor(x)
    B, N, D = x.shape
    h = num_heads
    if D % h:
        raise ValueError(f"model dim {D} not divisible by {h} heads")
    dh = D // h
    scale = 1.0 / math.sqrt(dh)
    xflat = x.data.reshape(B * N, D)

    def split(m):
        return np.ascontiguousarray((xflat @ m).reshape(B, N, h, dh).transpose(0, 2, 1, 3))

    q, k, v = split(wq.data), split(wk.data), split(wv.data)
    s = (q @ k.swapaxes(-1, -2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    merged = np.ascontiguousarray((p @ v).transpose(0, 2, 1, 3)).reshape(B * N, D)
    out = Tensor((merged @ wo.data).reshape(B, N, D))

    def backward(g):
        gflat = g.reshape(B * N, D)
        if wo.requires_grad:
            wo.accumulate_grad(merged.T @ gflat)
        dy = np.ascontiguousarray((gflat @ wo.data.T).reshape(B, N, h, dh).transpose(0, 2, 1, 3))
        dp = dy @ v.swapaxes(-1, -2)
        dv = p.swapaxes(-1, -2) @ dy
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        ds *= scale
        dq = ds @ k
        dk = ds.swapaxes(-1, -2) @ q

        def unsplit(m):
            return np.ascontiguousarray(m.transpose(0, 2, 1, 3)).reshape(B * N, D)

        dqf, dkf, dvf = unsplit(dq), unsplit(dk), unsplit(dv)
        if wq.requires_grad:
            wq.accumulate_grad(xflat.T @ dqf)
        if wk.requires_grad:
            wk.accumulate_grad(xflat.T @ dkf)
        if wv.requires_grad:
            wv.accumulate_grad(xflat.T @ dvf)
        if x.requires_grad:
            dx = dqf @ wq.data.T
            dx += dkf @ wk.data.T
            dx += dvf @ wv.data.T
            x.accumulate_grad(dx.reshape(B, N, D))

    return out._trace((x, wq, wk, wv, wo), backward)


def lstm_direction(x, wx, wh, b, reverse: bool = False) -> Tensor:
    """One LSTM direction over (B, T, D) input; returns all hidden states.

    Gate layout along the 4H axis is input, forget, cell candidate,
    output. Input projections for every step run as a single GEMM; the
    recurrence keeps per-step gate activations stacked for a fused BPTT
    whose weight gradients are again single GEMMs. ``reverse`` flips the
    time axis on the way in and out.
    """
    x = _as_tensor(x)
    B, T, D = x.shape
    H = wh.shape[0]
    xd = x.data[:, ::-1] if reverse else x.data
    xflat = np.ascontiguousarray(xd).reshape(B * T, D)
    aproj = (xflat @ wx.data + b.data).reshape(B, T, 4 * H)
    dt = x.dtype
    gi = np.empty((B, T, H), dtype=dt)
    gf = np.empty((B, T, H), dtype=dt)
    gg = np.empty((B, T, H), dtype=dt)
    go = np.empty((B, T, H), dtype=dt)
    cs = np.empty((B, T, H), dtype=dt)
    tc = np.empty((B, T, H), dtype=dt)
    hs = np.empty((B, T, H), dtype=dt)
    h = np.zeros((B, H), dtype=dt)
    c = np.zeros((B, H), dtype=dt)
    for t in range(T):
        a = aproj[:, t] + h @ wh.data
        i = expit(a[:, :H])
        f = expit(a[:, H:2 * H])
        g_ = np.tanh(a[:, 2 * H:3 * H])
        o = expit(a[:, 3 * H:])
        c = f * c + i * g_
        t_c = np.tanh(c)
        h = o * t_c
        gi[:, t], gf[:, t], gg[:, t], go[:, t] = i, f, g_, o
        cs[:, t], tc[:, t], hs[:, t] = c, t_c, h
    out = Tensor(np.ascontiguousarray(hs[:, ::-1]) if reverse else hs.copy())

    def backward(g):
        gs = g[:, ::-1] if reverse else g
        da = np.empty((B, T, 4 * H), dtype=dt)
        dh_next = np.zeros((B, H), dtype=dt)
        dc_next = np.zeros((B, H), dtype=dt)
        for t in range(T - 1, -1, -1):
            dh = gs[:, t] + dh_next
            i, f, g_, o = gi[:, t], gf[:, t], gg[:, t], go[:, t]
            t_c = tc[:, t]
            do = dh * t_c
            dc = dc_next + dh * o * (1.0 - t_c * t_c)
            da[:, t, :H] = (dc * g_) * i * (1.0 - i)
            if t > 0:
                da[:, t, H:2 * H] = (dc * cs[:, t - 1]) * f * (1.0 - f)
            else:
                da[:, t, H:2 * H] = 0.0
            da[:, t, 2 * H:3 * H] = (dc * i) * (1.0 - g_ * g_)
            da[:, t, 3 * H:] = do * o * (1.0 - o)
            dc_next = dc * f
            dh_next = da[:, t] @ wh.data.T
        daf = da.reshape(B * T, 4 * H)
        if wx.requires_grad:
            wx.accumulate_grad(xflat.T @ daf)
        if wh.requires_grad:
            hprev = np.concatenate([np.zeros((B, 1, H), dtype=dt), hs[:, :-1]], axis=1)
            wh.accumulate_grad(hprev.reshape(B * T, H).T @ daf)
        if b.requires_grad:
            b.accumulate_grad(daf.sum(axis=0))
        if x.requires_grad:
            dx = (daf @ wx.data.T).reshape(B, T, D)
            x.accumulate_grad(np.ascontiguousarray(dx[:, ::-1]) if reverse else dx)

    return out._trace((x, wx, wh, b), backward)


def bilstm(seq, layer_params, hidden: int) -> tuple[Tensor, Tensor]:
    """Stacked bidirectional LSTM.

    ``layer_params`` is a list of {"fw": (wx, wh, b), "bw": (wx, wh, b)}
    dicts, one per layer; layers beyond the first consume the 2*hidden
    concatenated outputs of the previous one. Returns (outputs, final)
    where outputs stacks both directions per step and final concatenates
    the forward direction's last hidden state with the backward
    direction's. Accepts (T, D) or (B, T, D); the unbatched form returns
    unbatched results.
    """
    x = _as_tensor(seq)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.shape[1] < 1:
        raise ValueError("empty sequence")
    for lp in layer_params:
        fw = lstm_direction(x, *lp["fw"], reverse=False)
        bw = lstm_direction(x, *lp["bw"], reverse=True)
        x = concat([fw, bw], axis=2)
    h = hidden
    last_fw = x[(slice(None), -1, slice(0, h))]
    first_bw = x[(slice(None), 0, slice(h, 2 * h))]
    final = concat([last_fw, first_bw], axis=1)
    if squeeze:
        return reshape(x, x.shape[1:]), reshape(final, (2 * h,))
    return x, final


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy between logit rows and integer labels.

    Stable log-sum-exp formulation; the gradient is the usual
    (softmax - one_hot) / batch_size.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    B = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = Tensor(np.mean(-logp[np.arange(B), labels]))

    def backward(g):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(B), labels] -= 1.0
            logits.accumulate_grad(p * (g / B))

    return out._trace((logits,), backward)
