"""Layer kernels: forward passes with caches, and exact backward passes.

Shapes are batch-first: sequences are (batch, time, channels). All math is
float64 so finite-difference gradient checks are meaningful.

LSTM cells use the standard gate formulation: input/forget/output gates with
a logistic sigmoid, a tanh candidate, no peephole connections. Gate blocks
are stored in the order (i, f, g, o) inside the fused weight matrices.
"""

import numpy as np


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _apply_act(z: np.ndarray, act: str) -> np.ndarray:
    if act == "linear":
        return z
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {act!r}")


def _act_grad(dy: np.ndarray, z: np.ndarray, y: np.ndarray, act: str) -> np.ndarray:
    if act == "linear":
        return dy
    if act == "relu":
        return dy * (z > 0.0)
    if act == "tanh":
        return dy * (1.0 - y * y)
    raise ValueError(f"unknown activation {act!r}")


def dense_forward(x, W, b, act: str = "linear"):
    """y = act(x @ W + b) for x of shape (B, D_in)."""
    z = x @ W + b
    y = _apply_act(z, act)
    return y, (x, z, y, act)


def dense_backward(dy, cache, W):
    x, z, y, act = cache
    dz = _act_grad(dy, z, y, act)
    dW = x.T @ dz
    db = dz.sum(axis=0)
    dx = dz @ W.T
    return dx, dW, db


def lstm_forward(x, Wx, Wh, b):
    """Run an LSTM over x (B, T, C); returns the full hidden sequence (B, T, H).

    Initial hidden and cell states are zero. The cache keeps every gate
    activation for backpropagation through time.
    """
    B, T, _ = x.shape
    H = Wh.shape[0]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    h_seq = np.empty((B, T, H))
    steps = []
    for t in range(T):
        z = x[:, t, :] @ Wx + h @ Wh + b
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H : 2 * H])
        g = np.tanh(z[:, 2 * H : 3 * H])
        o = sigmoid(z[:, 3 * H :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        steps.append((h, c, i, f, g, o, tc))
        h, c = h_new, c_new
        h_seq[:, t, :] = h
    return h_seq, (x, steps, Wx, Wh)


def lstm_backward(dh_seq, cache):
    """BPTT given upstream gradients for every hidden step (B, T, H)."""
    x, steps, Wx, Wh = cache
    B, T, C = x.shape
    H = Wh.shape[0]
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(4 * H)
    dx = np.empty_like(x)
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        h_prev, c_prev, i, f, g, o, tc = steps[t]
        dh = dh_seq[:, t, :] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        di = dc * g
        df = dc * c_prev
        dg = dc * i
        dc_next = dc * f
        dz = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ],
            axis=1,
        )
        dWx += x[:, t, :].T @ dz
        dWh += h_prev.T @ dz
        db += dz.sum(axis=0)
        dx[:, t, :] = dz @ Wx.T
        dh_next = dz @ Wh.T
    return dx, dWx, dWh, db


def conv1d_forward(x, K, b, act: str = "linear"):
    """Valid 1-D convolution, stride 1: x (B, T, C) -> y (B, T-k+1, O)."""
    k = K.shape[0]
    T_out = x.shape[1] - k + 1
    if T_out < 1:
        raise ValueError(f"sequence of length {x.shape[1]} shorter than kernel {k}")
    z = np.zeros((x.shape[0], T_out, K.shape[2]))
    for j in range(k):
        z += x[:, j : j + T_out, :] @ K[j]
    z += b
    y = _apply_act(z, act)
    return y, (x, z, y, act, K)


def conv1d_backward(dy, cache):
    x, z, y, act, K = cache
    dz = _act_grad(dy, z, y, act)
    k = K.shape[0]
    T_out = dz.shape[1]
    dK = np.zeros_like(K)
    dx = np.zeros_like(x)
    for j in range(k):
        xs = x[:, j : j + T_out, :]
        dK[j] = np.einsum("btc,bto->co", xs, dz)
        dx[:, j : j + T_out, :] += dz @ K[j].T
    db = dz.sum(axis=(0, 1))
    return dx, dK, db


def repeat_forward(x, times: int):
    """Tile a vector (B, D) into a constant sequence (B, times, D)."""
    return np.repeat(x[:, None, :], times, axis=1), times


def repeat_backward(dy):
    return dy.sum(axis=1)
