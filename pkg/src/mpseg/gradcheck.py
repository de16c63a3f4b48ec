"""Central finite-difference checking of reverse-mode gradients.

check_gradient perturbs input coordinates by +/-eps and compares the
resulting slope against the tape's gradient. The error measure is
|analytic - numeric| / max(|analytic|, |numeric|, 1e-3): a true relative
error for gradients above 1e-3 and an absolute error (scaled by 1e3)
below, which keeps finite-difference noise on near-zero gradients from
producing spurious failures.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def check_gradient(f, inputs, eps: float = 1e-5, max_coords: int | None = None,
                   rng: np.random.Generator | None = None) -> float:
    """Return the worst finite-difference error for scalar f over `inputs`.

    f takes the list of Tensors and returns a scalar Tensor. When
    max_coords is set, at most that many coordinates are probed per
    input (uniformly sampled with `rng`); otherwise every coordinate is.
    """
    # C-contiguous copies so the flat perturbation view below aliases the values
    tensors = [Tensor(np.ascontiguousarray(x.values if isinstance(x, Tensor) else x,
                                           dtype=np.float64), requires_grad=True)
               for x in inputs]
    loss = f(tensors)
    loss.backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.values)
        flat = t.values.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        aflat = analytic.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            hi = float(f(tensors).values)
            flat[c] = orig - eps
            lo = float(f(tensors).values)
            flat[c] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(aflat[c] - numeric) / max(abs(aflat[c]), abs(numeric), 1e-3)
            if err > worst:
                worst = err
    return worst


def run_gradient_suite(seed: int = 0):
    """Check every differentiable op plus a small end-to-end decoder loss.

    Returns a list of (name, worst_error, passed) rows; the suite passes
    when every row passes at 1e-4.
    """
    from . import tensor as T

    rng = np.random.default_rng(seed)
    results = []

    def check(name, f, inputs, max_coords=None, tol=1e-4):
        err = check_gradient(f, inputs, max_coords=max_coords, rng=rng)
        results.append((name, err, err < tol))

    u = rng.uniform(-2.0, 2.0, size=(3, 4))
    v = rng.uniform(-2.0, 2.0, size=(4, 2))
    w = rng.uniform(-2.0, 2.0, size=(3, 4))
    check("matmul", lambda xs: (xs[0] @ xs[1]).sum(), [u, v])
    check("add_broadcast", lambda xs: (xs[0] + xs[1]).sum(), [u, rng.uniform(-2, 2, size=(4,))])
    check("mul_broadcast", lambda xs: (xs[0] * xs[1]).mean(), [u, rng.uniform(-2, 2, size=(4,))])
    check("sub", lambda xs: (xs[0] - xs[1]).sum(), [u, w])
    check("div", lambda xs: (xs[0] / xs[1]).sum(), [u, rng.uniform(1.0, 2.0, size=(3, 4))])
    relu_in = rng.uniform(-2.0, 2.0, size=(3, 4))
    relu_in[np.abs(relu_in) < 0.1] = 0.5  # keep probes away from the kink
    check("relu", lambda xs: xs[0].relu().sum(), [relu_in])
    check("sigmoid", lambda xs: xs[0].sigmoid().sum(), [u])
    check("exp", lambda xs: xs[0].exp().sum(), [u])
    check("log", lambda xs: xs[0].log().sum(), [rng.uniform(0.5, 2.0, size=(3, 4))])
    check("softmax", lambda xs: (T.softmax_lastdim(xs[0]) * w).sum(), [u])
    check("logsumexp", lambda xs: T.logsumexp_lastdim(xs[0]).sum(), [u])
    check("layernorm", lambda xs: (T.layernorm_lastdim(xs[0]) * w).sum(), [u])
    block = rng.uniform(size=(3, 4)) < 0.5
    check("masked_fill", lambda xs: T.masked_fill(xs[0], block, -5.0).sum(), [u])
    tgt = (rng.uniform(size=(3, 4)) < 0.5).astype(float)
    check("bce_with_logits", lambda xs: T.bce_with_logits(xs[0], tgt).mean(), [u])
    check("take_rows", lambda xs: xs[0].take_rows([2, 0, 0]).sum(), [u])
    check("gather_cols", lambda xs: xs[0].gather_cols([1, 3, 0]).sum(), [u])
    check("transpose_reshape", lambda xs: (xs[0].T.reshape(2, 6) * 1.5).sum(), [u])
    check("concat_rows", lambda xs: T.concat_rows(xs).mean(), [u, v.T])
    check("sum_lastdim", lambda xs: (xs[0].sum_lastdim() * np.array([1.0, -2.0, 0.5])).sum(), [u])

    name, err, ok = _end_to_end_check(seed)
    results.append((name, err, ok))
    return results


def _end_to_end_check(seed: int, eps: float = 1e-5, coords_per_param: int = 6):
    """Finite-difference check of a full 2-layer decoder loss on an 8x8 scene.

    Every parameter tensor is probed at a random subset of coordinates;
    the forward is the real pipeline (masked attention, heads, matching,
    classification + mask losses).
    """
    from .decoder import full_forward, init_params, named_parameters, plain_spec
    from .losses import LossWeights, layer_losses
    from .synth import SynthConfig, basis_prototypes, generate_scene, synth_features

    protos, bg = basis_prototypes(2, 8)
    cfg = SynthConfig(height=8, width=8, num_categories=2, feat_dim=8,
                      instance_range=(2, 2), size_range=(2, 3),
                      prototypes=protos, background_proto=bg,
                      noise_sigma=0.1, seed=seed)
    scene = generate_scene(cfg, 0)
    pyramid = synth_features(scene, cfg)
    params = init_params(seed=seed + 1, n_queries=3, n_layers=2, dim=8,
                         num_categories=2, ffn_hidden=16)
    pairs = named_parameters(params)
    weights = LossWeights()

    def loss_tensor():
        outputs = full_forward(plain_spec(pyramid, params), params)
        total, _ = layer_losses(outputs, scene, mp_part=None,
                                mode="per-layer-bipartite", weights=weights)
        return total

    for _, p in pairs:
        p.requires_grad = True
        p.grad = None
    loss_tensor().backward()
    grads = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
             for name, p in pairs}
    for _, p in pairs:
        p.requires_grad = False

    rng = np.random.default_rng(seed + 2)
    worst = 0.0
    for name, p in pairs:
        flat = p.values.reshape(-1)
        gflat = grads[name].reshape(-1)
        coords = rng.choice(flat.size, size=min(coords_per_param, flat.size), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            hi = float(loss_tensor().values)
            flat[c] = orig - eps
            lo = float(loss_tensor().values)
            flat[c] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(gflat[c] - numeric) / max(abs(gflat[c]), abs(numeric), 1e-3)
            worst = max(worst, err)
    return "decoder_end_to_end", worst, worst < 1e-4
