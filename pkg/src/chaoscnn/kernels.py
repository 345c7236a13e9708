"""Compiled layer kernels operating on flat, per-layer-contiguous buffers.

Every network is described by an int64 layout table with one row per layer
(see the ``COL_*`` constants). Neuron buffers (``x`` pre-activation, ``y``
activation, ``delta`` = dE/dx) and the weight buffer are flat arrays; a
layer's slice starts at its ``COL_NOFS`` / ``COL_WOFS`` offset.

Weight layout per layer: convolution ``[out_map][in_map][ky][kx]`` then one
bias per output map; dense ``[out][in]`` then one bias per output neuron.
Inner loops run over the kernel column / input neuron index so they are unit
stride.

All kernels are ``nogil``; the only cross-thread writes are the atomic adds
in :func:`publish_layer` and the work-claim counters.
"""

import math

from numba import njit

from ._atomics import atomic_add, monotonic_ns

KIND_INPUT = 0
KIND_CONV = 1
KIND_POOL = 2
KIND_FC = 3
KIND_OUTPUT = 4

ACT_SIGMOID = 0
ACT_TANH = 1
ACT_IDENTITY = 2
ACT_SOFTMAX = 3

COL_KIND = 0
COL_MAPS = 1
COL_W = 2
COL_H = 3
COL_KW = 4
COL_KH = 5
COL_STRIDE = 6
COL_N = 7
COL_NOFS = 8
COL_WOFS = 9
COL_NW = 10
COL_ACT = 11
NCOLS = 12

# stats slots written by the phase workers
ST_LOSS = 0
ST_COUNT = 1
ST_ERRORS = 2
ST_DIVERGED = 3
ST_BAD_INDEX = 4
NSTATS = 5

# Reassociation lets LLVM vectorize the reductions; NaN/Inf semantics stay strict
# so divergence detection keeps working.
_OPTS = dict(nogil=True, cache=True, fastmath={"reassoc", "contract", "nsz"})


@njit(**_OPTS)
def activate_inplace(x, y, start, n, act):
    if act == ACT_SIGMOID:
        for j in range(start, start + n):
            y[j] = 1.0 / (1.0 + math.exp(-x[j]))
    elif act == ACT_TANH:
        for j in range(start, start + n):
            y[j] = math.tanh(x[j])
    else:
        for j in range(start, start + n):
            y[j] = x[j]


@njit(**_OPTS)
def scale_by_derivative(delta, y, start, n, act):
    """delta *= act'(x), expressed through the activation output y."""
    if act == ACT_SIGMOID:
        for j in range(start, start + n):
            delta[j] *= y[j] * (1.0 - y[j])
    elif act == ACT_TANH:
        for j in range(start, start + n):
            delta[j] *= 1.0 - y[j] * y[j]


@njit(**_OPTS)
def map_view(buf, T, l):
    """Layer l's slice of a neuron buffer as (maps, rows, cols)."""
    start = T[l, COL_NOFS]
    return buf[start:start + T[l, COL_N]].reshape((T[l, COL_MAPS], T[l, COL_H], T[l, COL_W]))


@njit(**_OPTS)
def kernel_view(buf, T, l, start):
    p = l - 1
    n = T[l, COL_MAPS] * T[p, COL_MAPS] * T[l, COL_KH] * T[l, COL_KW]
    return buf[start:start + n].reshape((T[l, COL_MAPS], T[p, COL_MAPS], T[l, COL_KH], T[l, COL_KW]))


@njit(**_OPTS)
def conv_forward(T, l, W, x, y):
    p = l - 1
    m_in = T[p, COL_MAPS]
    m = T[l, COL_MAPS]
    ow = T[l, COL_W]
    oh = T[l, COL_H]
    kw = T[l, COL_KW]
    kh = T[l, COL_KH]
    wo = T[l, COL_WOFS]
    bo = wo + m * m_in * kh * kw
    Wk = kernel_view(W, T, l, wo)
    Y = map_view(y, T, p)
    X = map_view(x, T, l)
    for o in range(m):
        b = W[bo + o]
        for oy in range(oh):
            for ox in range(ow):
                X[o, oy, ox] = b
        for i in range(m_in):
            for ky in range(kh):
                for kx in range(kw):
                    wv = Wk[o, i, ky, kx]
                    for oy in range(oh):
                        for ox in range(ow):
                            X[o, oy, ox] += wv * Y[i, oy + ky, ox + kx]
    activate_inplace(x, y, T[l, COL_NOFS], T[l, COL_N], T[l, COL_ACT])


@njit(**_OPTS)
def pool_forward(T, l, x, y, argmax):
    p = l - 1
    iw = T[p, COL_W]
    ih = T[p, COL_H]
    io = T[p, COL_NOFS]
    m = T[l, COL_MAPS]
    ow = T[l, COL_W]
    oh = T[l, COL_H]
    kw = T[l, COL_KW]
    kh = T[l, COL_KH]
    s = T[l, COL_STRIDE]
    no = T[l, COL_NOFS]
    Y = map_view(y, T, p)
    for c in range(m):
        for oy in range(oh):
            for ox in range(ow):
                by = oy * s
                bx = ox * s
                best = Y[c, by, bx]
                for ky in range(kh):
                    for kx in range(kw):
                        # strict '>' keeps the lowest flat index on ties
                        if Y[c, oy * s + ky, ox * s + kx] > best:
                            best = Y[c, oy * s + ky, ox * s + kx]
                            by = oy * s + ky
                            bx = ox * s + kx
                j = no + (c * oh + oy) * ow + ox
                x[j] = best
                y[j] = best
                argmax[j] = io + (c * ih + by) * iw + bx


@njit(**_OPTS)
def dense_forward(T, l, W, x, y):
    p = l - 1
    n_in = T[p, COL_N]
    io = T[p, COL_NOFS]
    n = T[l, COL_N]
    no = T[l, COL_NOFS]
    wo = T[l, COL_WOFS]
    bo = wo + n * n_in
    Wm = W[wo:wo + n * n_in].reshape((n, n_in))
    Yp = y[io:io + n_in]
    for o in range(n):
        acc = W[bo + o]
        for j in range(n_in):
            acc += Wm[o, j] * Yp[j]
        x[no + o] = acc
    act = T[l, COL_ACT]
    if act == ACT_SOFTMAX:
        mx = x[no]
        for o in range(1, n):
            if x[no + o] > mx:
                mx = x[no + o]
        total = 0.0
        for o in range(n):
            e = math.exp(x[no + o] - mx)
            y[no + o] = e
            total += e
        for o in range(n):
            y[no + o] /= total
    else:
        activate_inplace(x, y, no, n, act)


@njit(**_OPTS)
def forward_layer(T, l, W, x, y, argmax):
    kind = T[l, COL_KIND]
    if kind == KIND_CONV:
        conv_forward(T, l, W, x, y)
    elif kind == KIND_POOL:
        pool_forward(T, l, x, y, argmax)
    elif kind == KIND_FC or kind == KIND_OUTPUT:
        dense_forward(T, l, W, x, y)


@njit(**_OPTS)
def load_input(T, y, image):
    n = T[0, COL_N]
    for j in range(n):
        y[j] = image[j]


@njit(**_OPTS)
def forward_all(T, W, x, y, argmax, timing):
    for l in range(1, T.shape[0]):
        t0 = monotonic_ns()
        forward_layer(T, l, W, x, y, argmax)
        timing[l, 0] += monotonic_ns() - t0


@njit(**_OPTS)
def output_loss_and_delta(T, x, y, delta, label):
    """Cross-entropy of the softmax output; fills delta = p - onehot(label)."""
    l = T.shape[0] - 1
    n = T[l, COL_N]
    no = T[l, COL_NOFS]
    mx = x[no]
    for o in range(1, n):
        if x[no + o] > mx:
            mx = x[no + o]
    total = 0.0
    for o in range(n):
        total += math.exp(float(x[no + o]) - mx)
    loss = math.log(total) + mx - float(x[no + label])
    for o in range(n):
        delta[no + o] = y[no + o]
    delta[no + label] -= 1.0
    return loss


@njit(**_OPTS)
def predicted_class(T, y):
    l = T.shape[0] - 1
    n = T[l, COL_N]
    no = T[l, COL_NOFS]
    best = 0
    for o in range(1, n):
        if y[no + o] > y[no + best]:
            best = o
    return best


@njit(**_OPTS)
def _finish_prev_delta(T, p, y, delta):
    scale_by_derivative(delta, y, T[p, COL_NOFS], T[p, COL_N], T[p, COL_ACT])


@njit(**_OPTS)
def conv_backward(T, l, W, y, delta, g):
    p = l - 1
    m_in = T[p, COL_MAPS]
    m = T[l, COL_MAPS]
    ow = T[l, COL_W]
    oh = T[l, COL_H]
    kw = T[l, COL_KW]
    kh = T[l, COL_KH]
    D = map_view(delta, T, l)
    Y = map_view(y, T, p)
    if T[p, COL_KIND] != KIND_INPUT:
        Wk = kernel_view(W, T, l, T[l, COL_WOFS])
        Dp = map_view(delta, T, p)
        for i in range(m_in):
            for iy in range(T[p, COL_H]):
                for ix in range(T[p, COL_W]):
                    Dp[i, iy, ix] = 0.0
        for o in range(m):
            for i in range(m_in):
                for ky in range(kh):
                    for kx in range(kw):
                        wv = Wk[o, i, ky, kx]
                        for oy in range(oh):
                            for ox in range(ow):
                                Dp[i, oy + ky, ox + kx] += wv * D[o, oy, ox]
        _finish_prev_delta(T, p, y, delta)
    G = kernel_view(g, T, l, 0)
    gb = m * m_in * kh * kw
    for o in range(m):
        bsum = 0.0
        for oy in range(oh):
            for ox in range(ow):
                bsum += D[o, oy, ox]
        g[gb + o] = bsum
        for i in range(m_in):
            for ky in range(kh):
                for kx in range(kw):
                    acc = 0.0
                    for oy in range(oh):
                        for ox in range(ow):
                            acc += D[o, oy, ox] * Y[i, oy + ky, ox + kx]
                    G[o, i, ky, kx] = acc


@njit(**_OPTS)
def pool_backward(T, l, y, delta, argmax):
    p = l - 1
    io = T[p, COL_NOFS]
    for j in range(io, io + T[p, COL_N]):
        delta[j] = 0.0
    no = T[l, COL_NOFS]
    for j in range(no, no + T[l, COL_N]):
        delta[argmax[j]] += delta[j]
    _finish_prev_delta(T, p, y, delta)


@njit(**_OPTS)
def dense_backward(T, l, W, y, delta, g):
    p = l - 1
    n_in = T[p, COL_N]
    io = T[p, COL_NOFS]
    n = T[l, COL_N]
    no = T[l, COL_NOFS]
    wo = T[l, COL_WOFS]
    Yp = y[io:io + n_in]
    if T[p, COL_KIND] != KIND_INPUT:
        Wm = W[wo:wo + n * n_in].reshape((n, n_in))
        Dp = delta[io:io + n_in]
        for j in range(n_in):
            Dp[j] = 0.0
        for o in range(n):
            d = delta[no + o]
            for j in range(n_in):
                Dp[j] += Wm[o, j] * d
        _finish_prev_delta(T, p, y, delta)
    G = g[:n * n_in].reshape((n, n_in))
    for o in range(n):
        d = delta[no + o]
        for j in range(n_in):
            G[o, j] = d * Yp[j]
        g[n * n_in + o] = d


@njit(**_OPTS)
def backward_layer(T, l, W, y, delta, argmax, g):
    """Propagate delta of layer l to layer l-1 (reading W) and fill g."""
    kind = T[l, COL_KIND]
    if kind == KIND_CONV:
        conv_backward(T, l, W, y, delta, g)
    elif kind == KIND_POOL:
        pool_backward(T, l, y, delta, argmax)
    elif kind == KIND_FC or kind == KIND_OUTPUT:
        dense_backward(T, l, W, y, delta, g)


@njit(**_OPTS)
def publish_layer(T, l, W, g, eta):
    """Element-wise atomic W += -eta * g over layer l's weights and biases."""
    wo = T[l, COL_WOFS]
    step = -eta
    for j in range(T[l, COL_NW]):
        atomic_add(W, wo + j, step * g[j])


@njit(**_OPTS)
def chaos_backprop(T, W, y, delta, argmax, g, eta, timing):
    for l in range(T.shape[0] - 1, 0, -1):
        t0 = monotonic_ns()
        backward_layer(T, l, W, y, delta, argmax, g)
        if T[l, COL_NW] > 0:
            publish_layer(T, l, W, g, eta)
        timing[l, 1] += monotonic_ns() - t0


@njit(**_OPTS)
def train_worker(T, W, x, y, delta, argmax, g, images, labels, order,
                 counter, hits, owner, worker, eta, abort, timing, stats):
    """Claim images from ``order`` via ``counter`` until exhausted.

    Per image: forward, loss, then per-layer backward with publication.
    """
    n = order.shape[0]
    loss_sum = 0.0
    count = 0
    while abort[0] == 0:
        k = atomic_add(counter, 0, 1)
        if k >= n:
            break
        idx = order[k]
        atomic_add(hits, k, 1)
        owner[k] = worker
        load_input(T, y, images[idx])
        forward_all(T, W, x, y, argmax, timing)
        loss = output_loss_and_delta(T, x, y, delta, labels[idx])
        if not math.isfinite(loss):
            stats[ST_DIVERGED] = 1.0
            stats[ST_BAD_INDEX] = idx
            abort[0] = 1
            break
        loss_sum += loss
        count += 1
        chaos_backprop(T, W, y, delta, argmax, g, eta, timing)
    stats[ST_LOSS] = loss_sum
    stats[ST_COUNT] = count


@njit(**_OPTS)
def eval_worker(T, W, x, y, delta, argmax, images, labels, order, counter, hits, timing, stats):
    n = order.shape[0]
    loss_sum = 0.0
    count = 0
    errors = 0
    while True:
        k = atomic_add(counter, 0, 1)
        if k >= n:
            break
        idx = order[k]
        atomic_add(hits, k, 1)
        load_input(T, y, images[idx])
        forward_all(T, W, x, y, argmax, timing)
        label = labels[idx]
        loss_sum += output_loss_and_delta(T, x, y, delta, label)
        if predicted_class(T, y) != label:
            errors += 1
        count += 1
    stats[ST_LOSS] = loss_sum
    stats[ST_COUNT] = count
    stats[ST_ERRORS] = errors


@njit(**_OPTS)
def contention_worker(W, offsets, sizes, g, repetitions, eta):
    """Replay the per-layer publication pattern ``repetitions`` times."""
    for _ in range(repetitions):
        for l in range(offsets.shape[0]):
            wo = offsets[l]
            for j in range(sizes[l]):
                atomic_add(W, wo + j, -eta * g[j])
