"""Optimization-geometry and attention instruments.

Loss landscapes and Hessian maps are taken over the trainable parameters
only (prompts, head, and the learnable linear weight when configured);
the frozen backbone is never perturbed. Every instrument snapshots the
parameters it touches and restores them bit for bit before returning.

Random probe directions are filter-normalized at per-tensor granularity:
each direction tensor is rescaled so its norm matches the corresponding
parameter tensor's norm, which makes plots comparable across models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .prompts import PromptedClassifier
from .tensor import Tensor


class ParameterSpace:
    """Flatten/restore helpers over an ordered dict of named tensors."""

    def __init__(self, params):
        self.params = dict(params)
        self.names = sorted(self.params)
        self.sizes = {n: self.params[n].size for n in self.names}
        self.total = sum(self.sizes.values())

    def snapshot(self):
        return {n: self.params[n].data.copy() for n in self.names}

    def restore(self, saved):
        for n in self.names:
            self.params[n].data[...] = saved[n]

    def flat(self):
        return np.concatenate([self.params[n].data.ravel() for n in self.names])

    def load_flat(self, vec):
        lo = 0
        for n in self.names:
            size = self.sizes[n]
            self.params[n].data[...] = vec[lo:lo + size].reshape(self.params[n].shape)
            lo += size

    def flatten_named(self, named):
        return np.concatenate([np.asarray(named[n]).ravel() for n in self.names])

    def set_offset(self, saved, a, dir1, b, dir2):
        """Load saved + a*dir1 + b*dir2; exact zero coefficients add nothing."""
        for n in self.names:
            value = saved[n]
            if a != 0.0:
                value = value + a * dir1[n]
            if b != 0.0:
                value = value + b * dir2[n]
            self.params[n].data[...] = value


class ModelProbe:
    """Loss and gradient of a prompted classifier on a fixed data subset."""

    def __init__(self, model: PromptedClassifier, tokens, labels, subset=512, seed=0):
        pick = np.arange(tokens.shape[0])
        if tokens.shape[0] > subset:
            pick = np.sort(np.random.default_rng((int(seed), 0x5B)).permutation(
                tokens.shape[0])[:subset])
        self.tokens = tokens[pick]
        self.labels = labels[pick]
        self.model = model
        self.space = ParameterSpace(model.trainable())

    def loss(self):
        with T.no_grad():
            logits, _ = self.model.forward_tokens(Tensor(self.tokens))
            return T.crossentropy(logits, self.labels).item()

    def grad(self):
        for t in self.space.params.values():
            t.zero_grad()
        logits, _ = self.model.forward_tokens(Tensor(self.tokens))
        loss = T.crossentropy(logits, self.labels)
        T.backward(loss)
        out = {n: self.space.params[n].grad.copy() for n in self.space.names}
        for t in self.space.params.values():
            t.zero_grad()
        return out


@dataclass
class AnalysisGrid:
    """Cell values over two normalized parameter directions in [-1, 1]^2."""

    a_values: np.ndarray
    b_values: np.ndarray
    values: dict  # column name -> [R, R] array

    def rows(self):
        names = list(self.values)
        for i, a in enumerate(self.a_values):
            for j, b in enumerate(self.b_values):
                yield (a, b) + tuple(self.values[name][i, j] for name in names)

    def header(self):
        return ["a", "b"] + list(self.values)


def random_directions(space: ParameterSpace, seed=0):
    """Two random perturbations, each tensor rescaled to its parameter's norm."""
    rng = np.random.default_rng((int(seed), 0xD1E))
    dirs = []
    for _ in range(2):
        named = {}
        for n in space.names:
            v = rng.standard_normal(space.params[n].shape)
            pnorm = np.linalg.norm(space.params[n].data)
            vnorm = np.linalg.norm(v)
            named[n] = v * (pnorm / vnorm) if vnorm > 0 and pnorm > 0 else np.zeros_like(v)
        dirs.append(named)
    return dirs[0], dirs[1]


def landscape(probe, dir1, dir2, resolution=41, span=1.0):
    """Loss at theta + a*dir1 + b*dir2 over an R x R grid in [-span, span]^2."""
    space = probe.space
    saved = space.snapshot()
    coords = np.linspace(-span, span, resolution)
    center = resolution // 2
    if resolution % 2 == 1:
        coords[center] = 0.0
    loss = np.empty((resolution, resolution))
    try:
        for i, a in enumerate(coords):
            for j, b in enumerate(coords):
                space.set_offset(saved, a, dir1, b, dir2)
                loss[i, j] = probe.loss()
    finally:
        space.restore(saved)
    return AnalysisGrid(coords.copy(), coords.copy(), {"value": loss})


def hvp(probe, v, eps_scale=1e-3):
    """Hessian-vector product by central differences of gradients."""
    space = probe.space
    vec = v if isinstance(v, np.ndarray) else space.flatten_named(v)
    norm = np.linalg.norm(vec)
    if norm == 0:
        return np.zeros_like(vec)
    eps = eps_scale / norm
    saved = space.snapshot()
    base = space.flat()
    try:
        space.load_flat(base + eps * vec)
        g_plus = space.flatten_named(probe.grad())
        space.load_flat(base - eps * vec)
        g_minus = space.flatten_named(probe.grad())
    finally:
        space.restore(saved)
    return (g_plus - g_minus) / (2.0 * eps)


def _power_iteration(apply_fn, dim, rng, tol, maxiter):
    """Dominant eigenvalue by Rayleigh-quotient power iteration."""
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    eig = np.inf
    for _ in range(maxiter):
        w = apply_fn(v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v, True
        new_eig = float(np.dot(v, w))
        v = w / norm
        if np.isfinite(eig) and abs(new_eig - eig) <= tol * max(abs(new_eig), 1e-12):
            return new_eig, v, True
        eig = new_eig
    return eig, v, False


def extreme_eigenvalues(probe, tol=1e-3, maxiter=200, seed=0):
    """(lambda_max, lambda_min) of the Hessian via shifted power iterations.

    Returns (lmax, lmin, converged). The first phase finds the dominant
    eigenvalue by magnitude; the second runs on the spectrum shifted by it
    so both extremes are recovered regardless of sign.
    """
    space = probe.space
    dim = space.total
    rng = np.random.default_rng((int(seed), 0xE16))
    dominant, _, ok1 = _power_iteration(lambda v: hvp(probe, v), dim, rng, tol, maxiter)
    shift = dominant

    def shifted(v):
        return shift * v - hvp(probe, v)

    mu, _, ok2 = _power_iteration(shifted, dim, rng, tol, maxiter)
    other = shift - mu
    lmax, lmin = (dominant, other) if dominant >= other else (other, dominant)
    return lmax, lmin, ok1 and ok2


RATIO_SENTINEL = float("nan")


def convexity_map(probe, dir1, dir2, resolution=11, span=1.0, tau=0.01,
                  tol=1e-3, maxiter=200, seed=0):
    """Per-cell extreme Hessian eigenvalue ratios plus the convex fraction.

    A cell is convex when lambda_min >= -tau * |lambda_max|. Cells whose
    lambda_max is not positive get a sentinel ratio and count as
    non-convex; cells whose eigensolver fails to converge are flagged and
    excluded from the fraction.
    """
    space = probe.space
    saved = space.snapshot()
    coords = np.linspace(-span, span, resolution)
    if resolution % 2 == 1:
        coords[resolution // 2] = 0.0
    shape = (resolution, resolution)
    loss = np.empty(shape)
    lmax = np.empty(shape)
    lmin = np.empty(shape)
    ratio = np.empty(shape)
    convex = np.zeros(shape)
    flagged = np.zeros(shape, dtype=bool)
    try:
        for i, a in enumerate(coords):
            for j, b in enumerate(coords):
                space.set_offset(saved, a, dir1, b, dir2)
                loss[i, j] = probe.loss()
                mx, mn, ok = extreme_eigenvalues(probe, tol=tol, maxiter=maxiter, seed=seed)
                lmax[i, j] = mx
                lmin[i, j] = mn
                if not ok:
                    flagged[i, j] = True
                    ratio[i, j] = RATIO_SENTINEL
                    continue
                if mx <= 0:
                    ratio[i, j] = RATIO_SENTINEL
                else:
                    ratio[i, j] = mn / mx
                    convex[i, j] = float(mn >= -tau * abs(mx))
    finally:
        space.restore(saved)
    valid = ~flagged
    fraction = float(convex[valid].sum() / valid.sum()) if valid.any() else 0.0
    grid = AnalysisGrid(coords.copy(), coords.copy(), {
        "value": loss, "lmax": lmax, "lmin": lmin, "ratio": ratio, "convex": convex,
    })
    return grid, fraction


def attention_export(model: PromptedClassifier, image):
    """Head-averaged last-layer attention with token-segment annotations."""
    with T.no_grad():
        _, attns = model.forward(image)
    last = attns[-1].data
    if last.ndim == 4:
        last = last[0]
    matrix = last.mean(axis=0)
    n_prompts = matrix.shape[0] - 1 - model.backbone.cfg.num_patches
    segments = {
        "class": (0, 1),
        "prompts": (1, 1 + n_prompts),
        "patches": (1 + n_prompts, matrix.shape[0]),
    }
    lo, hi = segments["prompts"]
    prompt_mass = float(matrix[:, lo:hi].sum(axis=1).mean()) if hi > lo else 0.0
    return matrix, segments, prompt_mass
