"""Independent reference implementations used as test oracles.

None of these import the code under test beyond plain data types; each one
recomputes a quantity the slow, obvious way.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np


# -- search space ----------------------------------------------------------


def brute_force_genome_count(backbone) -> int:
    """Count genomes by literally walking every combination."""
    sites = [list(itertools.product(s.kernel_choices, s.expansion_choices, s.activation_choices))
             for s in backbone.layers]
    ges = backbone.global_expansion_choices or (None,)
    n = 0
    for _depth in range(backbone.min_depth, backbone.max_depth + 1):
        for _g in ges:
            for _combo in itertools.product(*sites):
                n += 1
    return n


def brute_force_network_count(backbone) -> int:
    """Distinct deployed networks: genomes deduplicated on their active prefix."""
    sites = [list(itertools.product(s.kernel_choices, s.expansion_choices, s.activation_choices))
             for s in backbone.layers]
    ges = backbone.global_expansion_choices or (None,)
    seen = set()
    for depth in range(backbone.min_depth, backbone.max_depth + 1):
        active = depth * backbone.layers_per_unit
        for g in ges:
            for combo in itertools.product(*sites):
                seen.add((depth, g, combo[:active]))
    return len(seen)


# -- cost model --------------------------------------------------------------


def _half_up(x: Fraction) -> int:
    return int(math.floor(x + Fraction(1, 2)))


def channels(site, e, g=None) -> int:
    scale = Fraction(e) * (Fraction(g) if g is not None else 1)
    return max(1, _half_up(site.base_channels * scale))


def spatial_chain(h: int, strides) -> list[int]:
    """Same-padded convs followed by ceil-mode pools: h, ceil(h/s1), ..."""
    out = [h]
    for s in strides:
        out.append(-(-out[-1] // s))
    return out


def reference_costs(arch) -> tuple[int, int]:
    """Params and MACs of ``arch`` under the shipped conventions, layer by layer.

    conv: weights + bias + 2 norm params per output channel; MACs are
    counted per conv output element before the pool.  Residual blocks add a
    1x1 projection with the same bias/norm terms, evaluated at block output
    resolution.  The head is an adaptive pool to n x n then a linear layer.
    """
    b = arch.backbone
    conv = b.conventions
    c, h, w = b.input_shape
    params = macs = 0
    unit = b.layers_per_unit
    block_c = c
    for i in range(arch.n_active):
        site = b.layers[i]
        k, e, _ = arch.per_layer[i]
        if i % unit == 0:
            block_c = c
        oc = channels(site, e, arch.global_expansion)
        if conv.padding == "same":
            ch, cw = h, w
        else:
            ch, cw = h - k + 1, w - k + 1
        params += c * oc * k * k + (oc if conv.conv_bias else 0) + conv.norm_params_per_channel * oc
        for _y in range(ch):
            macs += cw * c * oc * k * k
        h, w = -(-ch // site.stride), -(-cw // site.stride)
        c = oc
        if b.residual and i % unit == unit - 1:
            params += block_c * c + (c if conv.conv_bias else 0) + conv.norm_params_per_channel * c
            macs += h * w * block_c * c
    n = b.head_pool
    params += n * n * c * b.classes + b.classes
    macs += n * n * c * b.classes
    return params, macs


# -- unique layer configs ------------------------------------------------------


def per_position_layer_keys(backbone) -> set[tuple]:
    """Every (op, in_c, out_c, k, stride, h, w, act) reachable, from an exhaustive
    per-site product of (previous site's expansion) x (this site's choices).

    Channels feeding site i depend only on site i-1's expansion (or the input),
    spatial size only on the position, so this product covers every
    configuration without walking whole genomes.
    """
    c0, h0, _ = backbone.input_shape
    unit = backbone.layers_per_unit
    ges = backbone.global_expansion_choices or (None,)
    hs = spatial_chain(h0, [s.stride for s in backbone.layers])
    layers = backbone.layers
    keys = set()
    n_sites = backbone.max_depth * unit
    for g in ges:
        def in_channel_options(i):
            if i == 0:
                return {c0}
            return {channels(layers[i - 1], e, g) for e in layers[i - 1].expansion_choices}

        for i in range(n_sites):
            site = layers[i]
            for cin in in_channel_options(i):
                for k, e, a in itertools.product(site.kernel_choices, site.expansion_choices, site.activation_choices):
                    keys.add(("conv", cin, channels(site, e, g), k, site.stride, hs[i], hs[i], a))
            if backbone.residual and i % unit == unit - 1:
                start = i - unit + 1
                stride = math.prod(layers[j].stride for j in range(start, i + 1))
                for bc in in_channel_options(start):
                    for e in site.expansion_choices:
                        keys.add(("shortcut", bc, channels(site, e, g), 1, stride, hs[start], hs[start], "identity"))
            if (i + 1) % unit == 0 and backbone.min_depth <= (i + 1) // unit <= backbone.max_depth:
                n = backbone.head_pool
                for e in site.expansion_choices:
                    oc = channels(site, e, g)
                    keys.add(("pool", oc, oc, n, 1, hs[i + 1], hs[i + 1], "identity"))
                    keys.add(("linear", n * n * oc, backbone.classes, 1, 1, 1, 1, "identity"))
    return keys


# -- systolic array --------------------------------------------------------------


def event_driven_gemm(X: np.ndarray, W: np.ndarray, rows: int, cols: int):
    """Cycle-by-cycle weight-stationary array computing X @ W.

    X is (T, K), W is (K, N).  K is cut into row folds and N into column
    folds.  Within a fold the weight tile sits in the PEs; input vector t
    enters row r at cycle t + r (skewed), moves one PE right per cycle, and
    partial sums move one PE down per cycle, leaving the bottom of column j.
    The fold ends when its last partial sum has left the array.  All folds
    are simulated together as a batch; they run back to back, so the total
    is the per-fold cycle count times the number of folds.

    Returns (output, total_cycles, cycles_per_fold).
    """
    T, K = X.shape
    N = W.shape[1]
    fr, fc = -(-K // rows), -(-N // cols)
    F = fr * fc
    w_tiles = np.zeros((F, rows, cols), dtype=np.int64)
    x_tiles = np.zeros((F, T, rows), dtype=np.int64)
    for a in range(fr):
        for b in range(fc):
            f = a * fc + b
            kt = W[a * rows:(a + 1) * rows, b * cols:(b + 1) * cols]
            w_tiles[f, : kt.shape[0], : kt.shape[1]] = kt
            xt = X[:, a * rows:(a + 1) * rows]
            x_tiles[f, :, : xt.shape[1]] = xt

    x_reg = np.zeros((F, rows, cols), dtype=np.int64)
    x_tag = np.full((rows, cols), -1)  # which input vector each PE holds
    p_reg = np.zeros((F, rows, cols), dtype=np.int64)
    p_tag = np.full((rows, cols), -1)
    out = np.zeros((F, T, cols), dtype=np.int64)
    done = np.zeros((T, cols), dtype=bool)
    cycle = 0
    while not done.all():
        # inputs shift right; column 0 takes the skewed feed
        x_reg[:, :, 1:] = x_reg[:, :, :-1]
        x_tag[:, 1:] = x_tag[:, :-1]
        for r in range(rows):
            t = cycle - r
            if 0 <= t < T:
                x_reg[:, r, 0] = x_tiles[:, t, r]
                x_tag[r, 0] = t
            else:
                x_reg[:, r, 0] = 0
                x_tag[r, 0] = -1
        # partial sums shift down and accumulate
        incoming = np.zeros_like(p_reg)
        incoming[:, 1:, :] = p_reg[:, :-1, :]
        in_tag = np.full_like(p_tag, -1)
        in_tag[1:, :] = p_tag[:-1, :]
        in_tag[0, :] = x_tag[0, :]
        p_reg = incoming + w_tiles * x_reg
        p_tag = np.where(x_tag >= 0, x_tag, -1)
        assert np.all((in_tag == p_tag) | (p_tag < 0) | (np.arange(rows)[:, None] == 0))
        # the bottom row emits finished dot products
        for j in range(cols):
            t = p_tag[rows - 1, j]
            if t >= 0:
                out[:, t, j] = p_reg[:, rows - 1, j]
                done[t, j] = True
        cycle += 1

    result = np.zeros((T, N), dtype=np.int64)
    for a in range(fr):
        for b in range(fc):
            f = a * fc + b
            width = min(cols, N - b * cols)
            result[:, b * cols:b * cols + width] += out[f, :, :width]
    return result, cycle * F, cycle
