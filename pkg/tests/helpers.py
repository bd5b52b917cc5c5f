"""Naive reference implementations shared by the test modules.

Everything here is written as plain per-element python loops over numpy
scalars, deliberately ignoring how the package vectorizes the same
math, so agreement between the two is meaningful.
"""

import numpy as np


def naive_bilinear(feat: np.ndarray, x: float, y: float) -> np.ndarray:
    """Border-clamped 4-corner interpolation of a [C,H,W] map at one point."""
    h, w = feat.shape[1], feat.shape[2]
    x = min(max(float(x), 0.0), w - 1.0)
    y = min(max(float(y), 0.0), h - 1.0)
    x0 = int(min(max(np.floor(x), 0), max(w - 2, 0)))
    y0 = int(min(max(np.floor(y), 0), max(h - 2, 0)))
    fx, fy = x - x0, y - y0
    return (feat[:, y0, x0] * (1 - fx) * (1 - fy)
            + feat[:, y0, x0 + 1] * fx * (1 - fy)
            + feat[:, y0 + 1, x0] * (1 - fx) * fy
            + feat[:, y0 + 1, x0 + 1] * fx * fy)


def naive_deformable_attention(module, queries: np.ndarray,
                               values: list[np.ndarray]) -> np.ndarray:
    """Per-query loop over levels and points; returns [C_out, Hq, Wq]."""
    n_levels, n_points, width = module.n_levels, module.n_points, module.width
    hq, wq = queries.shape[2], queries.shape[3]
    w_off = module.offset_head.weight.data[:, :, 0, 0]
    b_off = module.offset_head.bias.data
    w_wgt = module.weight_head.weight.data[:, :, 0, 0]
    b_wgt = module.weight_head.bias.data
    projected = []
    for l, v in enumerate(values):
        wv = module.value_projs[l].weight.data[:, :, 0, 0]
        bv = module.value_projs[l].bias.data
        projected.append(np.einsum("oc,chw->ohw", wv, v[0]) + bv[:, None, None])
    mixed = np.zeros((width, hq, wq))
    for qy in range(hq):
        for qx in range(wq):
            qvec = queries[0, :, qy, qx]
            off = w_off @ qvec + b_off
            logits = w_wgt @ qvec + b_wgt
            e = np.exp(logits - logits.max())
            attn = e / e.sum()
            acc = np.zeros(width)
            for l in range(n_levels):
                hl, wl = values[l].shape[2], values[l].shape[3]
                rx = (qx + 0.5) / wq * wl - 0.5
                ry = (qy + 0.5) / hq * hl - 0.5
                for pi in range(n_points):
                    dx = off[2 * l * n_points + 2 * pi + 0]
                    dy = off[2 * l * n_points + 2 * pi + 1]
                    val = naive_bilinear(projected[l], rx + dx, ry + dy)
                    acc += attn[l * n_points + pi] * val
            mixed[:, qy, qx] = acc
    w_out = module.out_head.weight.data[:, :, 0, 0]
    b_out = module.out_head.bias.data
    return np.einsum("oc,chw->ohw", w_out, mixed) + b_out[:, None, None]


def naive_propagate(depth: np.ndarray, offsets: np.ndarray, weights: np.ndarray,
                    k: int, normalize: bool = False) -> np.ndarray:
    """One propagation step, pixel by pixel; returns [H,W]."""
    h, w = depth.shape
    r = k // 2
    taps = [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    center = (k * k) // 2
    out = np.zeros_like(depth)
    for y in range(h):
        for x in range(w):
            acc = weights[center, y, x] * depth[y, x]
            wsum = weights[center, y, x]
            side = 0
            for i, (dx, dy) in enumerate(taps):
                if i == center:
                    continue
                ox = offsets[2 * side, y, x]
                oy = offsets[2 * side + 1, y, x]
                val = naive_bilinear(depth[None], x + dx + ox, y + dy + oy)[0]
                acc += weights[i, y, x] * val
                wsum += weights[i, y, x]
                side += 1
            out[y, x] = acc / wsum if normalize else acc
    return out


def naive_refine(d0: np.ndarray, sparse_meters: np.ndarray, sparse_valid: np.ndarray,
                 params, kernels, steps: int, instants: tuple[int, ...],
                 normalize: bool = False) -> np.ndarray:
    """Explicit-intermediate reference for the whole refinement chain."""
    snapshots = {}
    for ki, k in enumerate(kernels):
        d = d0.copy()
        for step in range(1, steps + 1):
            d = naive_propagate(d, params.offsets[k].data, params.weights[k].data,
                                k, normalize=normalize)
            gate = params.anchor[k].data * sparse_valid
            d = (1.0 - gate) * d + gate * sparse_meters
            if step in instants:
                snapshots[(ki, instants.index(step))] = d.copy()
    out = np.zeros_like(d0)
    for (ki, ti), snap in snapshots.items():
        out += snap * params.kernel_mix.data[ki] * params.instant_mix.data[ti]
    return np.maximum(out, 0.0)


def write_dataset(root, seeds, size=(16, 16), sparse_pattern="uniform(0.05)"):
    """Synthesize scenes into a directory and return its loaded manifest."""
    from depthfill.data import (ManifestEntry, encode_depth_png,
                                encode_image_png, load_manifest, synth_scene,
                                write_manifest)
    entries = []
    for seed in seeds:
        s = synth_scene(seed, size=size, sparse_pattern=sparse_pattern)
        names = (f"{s.id}_image.png", f"{s.id}_sparse.png", f"{s.id}_gt.png")
        (root / names[0]).write_bytes(encode_image_png(s.image))
        (root / names[1]).write_bytes(encode_depth_png(s.sparse))
        (root / names[2]).write_bytes(encode_depth_png(s.dense_gt))
        entries.append(ManifestEntry(s.id, *names))
    write_manifest(root / "manifest.tsv", entries)
    return load_manifest(root / "manifest.tsv")
