"""Patch-embedding encoder: image -> twin feature pyramids.

Replaces a CNN backbone at desk scale.  8x8 patches go through one linear
map to a 1/8 grid; average pooling yields 1/16 and 1/32; per-level linear
projections split the shared grid into a semantic and a depth path; a
bilinear 2x upsample plus linear projection produces the 1/4 pixel and
depth embeddings.  Everything is linear up to the (optional) biases, which
keeps the whole thing trainable and easy to reason about.
"""

from __future__ import annotations

import numpy as np

from .blocks import Params, gacc, init_linear, lin_bwd, lin_fwd
from .config import ModelConfig
from .numerics import (avgpool2_bwd, avgpool2_fwd, bilinear_resize_bwd,
                       bilinear_resize_fwd)
from .scene import FeaturePyramid

PATCH = 8
# level index -> downscale factor relative to the input image
LEVEL_STRIDES = (8, 16, 32)


def init_encoder_params(params: Params, cfg: ModelConfig,
                        rng: np.random.Generator) -> None:
    c = cfg.channels
    init_linear(params, "enc.patch", 3 * PATCH * PATCH, c, rng)
    for i in range(3):
        init_linear(params, f"enc.sem{i}", c, c, rng)
        init_linear(params, f"enc.dep{i}", c, c, rng)
    init_linear(params, "enc.epix", c, cfg.embed_channels, rng)
    init_linear(params, "enc.edep", c, cfg.depth_channels, rng)


def _to_patches(image: np.ndarray) -> np.ndarray:
    _, h, w = image.shape
    hp, wp = h // PATCH, w // PATCH
    x = np.moveaxis(image, 0, 2)                       # [H, W, 3]
    x = x.reshape(hp, PATCH, wp, PATCH, 3)
    return x.transpose(0, 2, 1, 3, 4).reshape(hp, wp, 3 * PATCH * PATCH)


def _patches_grad(dpatches: np.ndarray, h: int, w: int) -> np.ndarray:
    hp, wp = h // PATCH, w // PATCH
    x = dpatches.reshape(hp, wp, PATCH, PATCH, 3).transpose(0, 2, 1, 3, 4)
    return np.moveaxis(x.reshape(h, w, 3), 2, 0)


def _cf(x: np.ndarray) -> np.ndarray:
    """[h, w, C] -> channels-first [C, h, w]."""
    return np.ascontiguousarray(np.moveaxis(x, 2, 0))


def _cl(x: np.ndarray) -> np.ndarray:
    """channels-first [C, h, w] -> [h, w, C]."""
    return np.moveaxis(x, 0, 2)


def encode_features_fwd(image: np.ndarray, params: Params, cfg: ModelConfig):
    """Returns (sem_pyramid, depth_pyramid, cache); pyramids are channels-first."""
    _, h, w = image.shape
    if h % 32 or w % 32:
        raise ValueError(f"image dims must be divisible by 32, got {h}x{w}")
    patches = _to_patches(image)
    base8, c_patch = lin_fwd(params, "enc.patch", patches)
    base16, c_p16 = avgpool2_fwd(base8)
    base32, c_p32 = avgpool2_fwd(base16)
    bases = [base8, base16, base32]

    sem_levels, dep_levels, c_sem, c_dep = [], [], [], []
    for i, base in enumerate(bases):
        f, c = lin_fwd(params, f"enc.sem{i}", base)
        sem_levels.append(_cf(f))
        c_sem.append(c)
        f, c = lin_fwd(params, f"enc.dep{i}", base)
        dep_levels.append(_cf(f))
        c_dep.append(c)

    up4, c_up = bilinear_resize_fwd(base8, (h // 4, w // 4))
    epix, c_epix = lin_fwd(params, "enc.epix", up4)
    edep, c_edep = lin_fwd(params, "enc.edep", up4)

    sem = FeaturePyramid(sem_levels, _cf(epix))
    dep = FeaturePyramid(dep_levels, _cf(edep))
    cache = (c_patch, c_p16, c_p32, c_sem, c_dep, c_up, c_epix, c_edep, (h, w))
    return sem, dep, cache


def encode_features(image: np.ndarray, params: Params, cfg: ModelConfig):
    sem, dep, _ = encode_features_fwd(image, params, cfg)
    return sem, dep


def encode_features_bwd(grads: Params, dsem: FeaturePyramid, ddep: FeaturePyramid,
                        cache) -> np.ndarray:
    """Accumulates encoder parameter grads; returns d(image) (rarely needed)."""
    c_patch, c_p16, c_p32, c_sem, c_dep, c_up, c_epix, c_edep, (h, w) = cache

    dup4 = lin_bwd(grads, "enc.epix", _cl(dsem.embedding), c_epix)
    dup4 += lin_bwd(grads, "enc.edep", _cl(ddep.embedding), c_edep)
    dbases = [bilinear_resize_bwd(dup4, c_up), 0.0, 0.0]

    for i in range(3):
        dbases[i] = dbases[i] + lin_bwd(grads, f"enc.sem{i}", _cl(dsem.levels[i]), c_sem[i])
        dbases[i] = dbases[i] + lin_bwd(grads, f"enc.dep{i}", _cl(ddep.levels[i]), c_dep[i])

    dbases[1] = dbases[1] + avgpool2_bwd(dbases[2], c_p32)
    dbase8 = dbases[0] + avgpool2_bwd(dbases[1], c_p16)
    dpatches = lin_bwd(grads, "enc.patch", dbase8, c_patch)
    return _patches_grad(dpatches, h, w)


def zero_pyramid_grads(pyr: FeaturePyramid) -> FeaturePyramid:
    return FeaturePyramid([np.zeros_like(l) for l in pyr.levels],
                          np.zeros_like(pyr.embedding))
