"""Morphological cleanup of predicted central-gland masks and peripheral-zone derivation."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

# 4-connectivity for hole filling and component labelling
CONNECTIVITY = ndimage.generate_binary_structure(2, 1)


def threshold(prob, t=0.5):
    return np.asarray(prob) >= t


def fill_holes(mask):
    """Fill background regions not 4-connected to the frame border."""
    return ndimage.binary_fill_holes(np.asarray(mask, dtype=bool), structure=CONNECTIVITY)


def min_component_size(wg):
    return int(np.count_nonzero(wg)) // 8


def remove_small(mask, wg):
    """Drop 4-connected components smaller than ``floor(|WG| / 8)`` pixels."""
    mask = np.asarray(mask, dtype=bool)
    wg = np.asarray(wg, dtype=bool)
    if mask.shape != wg.shape:
        raise ValueError(f"remove_small: mask shape {mask.shape} != WG shape {wg.shape}")
    if not wg.any():
        return np.zeros_like(mask)
    limit = min_component_size(wg)
    labels, n = ndimage.label(mask, structure=CONNECTIVITY)
    if n == 0:
        return mask.copy()
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = sizes >= limit
    keep[0] = False
    return keep[labels]


def derive_pz(wg, cg):
    """Peripheral zone as the whole gland minus the (clipped) central gland."""
    wg = np.asarray(wg, dtype=bool)
    cg = np.asarray(cg, dtype=bool) & wg
    pz = wg & ~cg
    assert np.array_equal(cg | pz, wg) and not (cg & pz).any()
    return pz


def postprocess_cg(prob, wg, t=0.5):
    """threshold -> clip to WG -> fill holes -> remove small components.

    Returns ``(cg, pz)``.
    """
    wg = np.asarray(wg, dtype=bool)
    cg = threshold(prob, t) & wg
    cg = fill_holes(cg) & wg
    cg = remove_small(cg, wg)
    return cg, derive_pz(wg, cg)
