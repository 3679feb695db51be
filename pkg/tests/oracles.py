"""Scalar reference implementations used as independent test oracles.

Everything here is pure Python over floats (lists of lists), deliberately
avoiding the tensor code paths under test. The network oracle doubles as a
multiply-accumulate counter: it counts exactly one MAC per scalar multiply
it performs inside matrix products.
"""

import math


def scalar_sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def scalar_leaky(x, slope=0.2):
    return x if x >= 0 else slope * x


def scalar_grid(height, width, extent):
    """Pixel-center grid points, row-major list of (x, y)."""
    x_min, x_max, y_min, y_max = extent
    pts = []
    for i in range(height):
        y = y_min + (i + 0.5) / height * (y_max - y_min)
        for j in range(width):
            x = x_min + (j + 0.5) / width * (x_max - x_min)
            pts.append((x, y))
    return pts


def scalar_fourier_embed(points, u_rows, gamma=1.0, mode="sincos"):
    """Entrywise sin/cos embedding; returns rows of floats."""
    out = []
    for (x, y) in points:
        phases = [gamma * (r[0] * x + r[1] * y) for r in u_rows]
        if mode == "sincos":
            out.append([math.sin(p) for p in phases] + [math.cos(p) for p in phases])
        else:
            out.append([math.sin(p) for p in phases])
    return out


def scalar_modulate(shared, a, b, activation="sigmoid"):
    """Triple-loop sigma(A @ B) * W_s."""
    n_out, rank, n_in = len(a), len(a[0]), len(b[0])
    w = [[0.0] * n_in for _ in range(n_out)]
    for i in range(n_out):
        for j in range(n_in):
            h = sum(a[i][k] * b[k][j] for k in range(rank))
            m = scalar_sigmoid(h) if activation == "sigmoid" else h
            w[i][j] = shared[i][j] * m
    return w


def scalar_affine(weight, bias, rows):
    """Per-row W @ x + b."""
    out = []
    for x in rows:
        out.append([sum(wi[j] * x[j] for j in range(len(x))) + bi
                    for wi, bi in zip(weight, bias)])
    return out


def nearest_index(src, dst, d):
    """Pixel-center nearest source index for target index d."""
    return min(src - 1, (2 * d + 1) * src // (2 * dst))


def scalar_resize_nearest(grid_rows, src, dst):
    """grid_rows: src*src list of feature lists -> dst*dst list."""
    out = []
    for i in range(dst):
        si = nearest_index(src, dst, i)
        for j in range(dst):
            sj = nearest_index(src, dst, j)
            out.append(list(grid_rows[si * src + sj]))
    return out


def scalar_linear_taps(src, dst):
    taps = []
    for d in range(dst):
        pos = (d + 0.5) * src / dst - 0.5
        lo = math.floor(pos)
        frac = pos - lo
        i0 = min(max(lo, 0), src - 1)
        i1 = min(max(lo + 1, 0), src - 1)
        taps.append((i0, i1, frac))
    return taps


def scalar_resize_bilinear(grid_rows, src, dst):
    """Separable two-pass 1-D interpolation at pixel centers."""
    n_feat = len(grid_rows[0])
    taps = scalar_linear_taps(src, dst)
    # pass 1: rows (interpolate along y), keeping src columns
    mid = [[0.0] * n_feat for _ in range(dst * src)]
    for i, (i0, i1, f) in enumerate(taps):
        for j in range(src):
            a, b = grid_rows[i0 * src + j], grid_rows[i1 * src + j]
            mid[i * src + j] = [av + (bv - av) * f for av, bv in zip(a, b)]
    # pass 2: columns (interpolate along x)
    out = [[0.0] * n_feat for _ in range(dst * dst)]
    for i in range(dst):
        for j, (j0, j1, f) in enumerate(taps):
            a, b = mid[i * src + j0], mid[i * src + j1]
            out[i * dst + j] = [av + (bv - av) * f for av, bv in zip(a, b)]
    return out


class MacCounter:
    def __init__(self):
        self.count = 0


def scalar_network_eval(arch_desc, params, resolutions, extent=(0.0, 1.0, 0.0, 1.0),
                        counter=None):
    """Whole-network loop oracle.

    ``arch_desc`` describes blocks as dicts:
      {"n_f": int, "layers": [{"direct": bool, "activation": str,
                               "shared": rows|None}]}
    plus top-level keys upsample_mode, fourier_mode, gamma, output_activation.
    ``params`` holds per-block {"u": rows, "layers": [{"weight"/"a","b"},
    "bias"]} for ONE sample (no batch dimension). Counts scalar multiplies
    from matrix products into ``counter`` if given.
    """
    gamma = arch_desc.get("gamma", 1.0)
    fmode = arch_desc.get("fourier_mode", "sincos")
    umode = arch_desc.get("upsample_mode", "nearest")
    out_act = arch_desc.get("output_activation", "sigmoid_to_unit")
    blocks = arch_desc["blocks"]
    feats = None
    prev_res = None
    for k, block in enumerate(blocks):
        res = resolutions[k]
        pts = scalar_grid(res, res, extent)
        emb = scalar_fourier_embed(pts, params[k]["u"], gamma, fmode)
        if counter is not None:
            counter.count += len(pts) * len(params[k]["u"]) * 2
        if feats is None:
            x = emb
        else:
            if umode == "nearest":
                up = scalar_resize_nearest(feats, prev_res, res)
            else:
                up = scalar_resize_bilinear(feats, prev_res, res)
            x = [e + u for e, u in zip(emb, up)]
        for i, (lspec, lp) in enumerate(zip(block["layers"], params[k]["layers"])):
            if i > 0:
                x = [xi + [px, py] for xi, (px, py) in zip(x, pts)]
            if lspec["direct"]:
                weight = lp["weight"]
            else:
                weight = scalar_modulate(lspec["shared"], lp["a"], lp["b"],
                                         lspec.get("activation", "sigmoid"))
            if counter is not None:
                counter.count += len(x) * len(weight) * len(weight[0])
            x = scalar_affine(weight, lp["bias"], x)
            last = k == len(blocks) - 1 and i == len(block["layers"]) - 1
            if last:
                if out_act == "sigmoid_to_unit":
                    x = [[scalar_sigmoid(v) for v in row] for row in x]
                else:
                    x = [[min(max(v, 0.0), 1.0) for v in row] for row in x]
            else:
                x = [[scalar_leaky(v) for v in row] for row in x]
        feats = x
        prev_res = res
    return feats


def describe_arch(arch):
    """Convert a torch INRArchitecture into the oracle's plain description."""
    blocks = []
    for block in arch.blocks:
        layers = []
        for layer in block.layers:
            entry = {"direct": layer.direct, "activation": layer.activation}
            if not layer.direct:
                entry["shared"] = [[float(v) for v in row] for row in layer.shared_W.detach()]
            layers.append(entry)
        blocks.append({"n_f": block.fourier_n_f, "layers": layers})
    return {
        "blocks": blocks,
        "gamma": arch.fourier_gamma,
        "fourier_mode": arch.fourier_mode,
        "upsample_mode": arch.upsample_mode,
        "output_activation": arch.output_activation,
    }


def describe_params(params, sample=0):
    """Convert batched INRParams into plain per-sample lists."""
    out = []
    for k, u in enumerate(params.fourier_u):
        entry = {"u": [[float(v) for v in row] for row in u[sample].detach()], "layers": []}
        for lp in params.layers[k]:
            if hasattr(lp, "weight"):
                entry["layers"].append({
                    "weight": [[float(v) for v in row] for row in lp.weight[sample].detach()],
                    "bias": [float(v) for v in lp.bias[sample].detach()],
                })
            else:
                entry["layers"].append({
                    "a": [[float(v) for v in row] for row in lp.a[sample].detach()],
                    "b": [[float(v) for v in row] for row in lp.b[sample].detach()],
                    "bias": [float(v) for v in lp.bias[sample].detach()],
                })
        out.append(entry)
    return out
