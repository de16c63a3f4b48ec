"""Training loop: one scene per step, Adam with decoupled weight decay,
multistep learning-rate drops, deterministic per-step noise seeding.
"""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import RunConfig
from .decoder import (DecoderParams, ForwardSpec, LayerParams, full_forward,
                      init_params, named_parameters, plain_spec)
from .losses import layer_losses
from .metrics import (MetricsReport, compute_matching_vectors, config_hash,
                      extract_predictions, ap_lite, miou_layerwise, util_layerwise)
from .mp import build_mp_part, build_self_block
from .synth import generate_scene, load_dataset, synth_features
from .tensor import Tensor, concat_rows


class NumericError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


class AdamW:
    """Adam with decoupled weight decay; embeddings are decay-exempt."""

    def __init__(self, pairs, lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.05, exempt=("query_embed", "class_embed")):
        self.pairs = pairs
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.exempt = set(exempt)
        self.t = 0
        self.m = {name: np.zeros_like(p.values) for name, p in pairs}
        self.v = {name: np.zeros_like(p.values) for name, p in pairs}

    def zero_grad(self):
        for _, p in self.pairs:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.pairs:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.values)
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and name not in self.exempt:
                update = update + self.weight_decay * p.values
            p.values = p.values - lr * update


def layer_scale_table(height: int, width: int, num_layers: int) -> dict:
    """Layer index (1-based) -> attention extents; scales cycle coarse to fine."""
    scales = [(height // 4, width // 4), (height // 2, width // 2), (height, width)]
    return {i: scales[(i - 1) % 3] for i in range(1, num_layers + 1)}


def detach_params(params: DecoderParams) -> DecoderParams:
    def d(t):
        return Tensor(t.values)

    layers = [LayerParams(**{f.name: d(getattr(lp, f.name))
                             for f in dataclasses.fields(LayerParams)})
              for lp in params.layers]
    return DecoderParams(
        layers=layers, query_embed=d(params.query_embed),
        class_embed=d(params.class_embed),
        mask_w1=d(params.mask_w1), mask_b1=d(params.mask_b1),
        mask_w2=d(params.mask_w2), mask_b2=d(params.mask_b2),
        cls_w=d(params.cls_w), cls_b=d(params.cls_b),
        n_queries=params.n_queries, num_layers=params.num_layers, dim=params.dim,
        num_categories=params.num_categories, ffn_hidden=params.ffn_hidden)


def load_or_generate_scenes(cfg: RunConfig):
    if cfg.dataset_path:
        scenes, synth_cfg = load_dataset(cfg.dataset_path)
    else:
        synth_cfg = cfg.synth
        scenes = [generate_scene(synth_cfg, i) for i in range(cfg.num_scenes)]
    return scenes, synth_cfg


def split_scenes(scenes, holdout_frac: float):
    n_hold = int(round(len(scenes) * holdout_frac))
    if n_hold == 0 or n_hold == len(scenes):
        return scenes, scenes
    return scenes[:-n_hold], scenes[-n_hold:]


def mp_forward_spec(pyramid, scene, params: DecoderParams, mp_cfg, scale_table,
                    seed) -> tuple:
    """(ForwardSpec, MPPart-or-None) with the MP part attached when possible."""
    mp_part = build_mp_part(scene, params.class_embed, mp_cfg, scale_table, seed)
    if mp_part is None:
        return plain_spec(pyramid, params), None
    init_q = concat_rows([params.query_embed, mp_part.queries])
    self_block = build_self_block(params.n_queries, mp_part.group_sizes)
    spec = ForwardSpec(pyramid=pyramid, init_queries=init_q,
                       n_match=params.n_queries, overrides=mp_part.overrides,
                       self_block=self_block)
    return spec, mp_part


def mp_forward(pyramid, scene, params: DecoderParams, mp_cfg, scale_table, seed):
    """Training-style forward with the MP part attached; returns (outputs, mp_part)."""
    spec, mp_part = mp_forward_spec(pyramid, scene, params, mp_cfg, scale_table, seed)
    return full_forward(spec, params), mp_part


def run_training(cfg: RunConfig, log=None):
    """Train per config; returns (params, report, synth_cfg)."""
    scenes, synth_cfg = load_or_generate_scenes(cfg)
    train_scenes, eval_scenes = split_scenes(scenes, cfg.train.holdout_frac)
    pyramids = {s.index: synth_features(s, synth_cfg) for s in train_scenes}

    params = init_params(seed=cfg.seed, n_queries=cfg.model.n_queries,
                         n_layers=cfg.model.num_layers, dim=cfg.model.dim,
                         num_categories=synth_cfg.num_categories,
                         ffn_hidden=cfg.model.ffn_hidden)
    pairs = named_parameters(params)
    opt = AdamW(pairs, lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
    scale_table = layer_scale_table(synth_cfg.height, synth_cfg.width,
                                    cfg.model.num_layers)

    n_train = len(train_scenes)
    epoch_losses = []
    epoch_acc = []
    lr = cfg.train.lr
    for step in range(cfg.train.steps):
        if step in cfg.train.decay_points:
            lr *= cfg.train.decay_factor
        scene = train_scenes[step % n_train]
        pyramid = pyramids[scene.index]
        if cfg.mp.enabled:
            spec, mp_part = mp_forward_spec(pyramid, scene, params, cfg.mp,
                                            scale_table, seed=[cfg.seed, 2, step])
        else:
            spec, mp_part = plain_spec(pyramid, params), None
        outputs = full_forward(spec, params)
        loss, _ = layer_losses(outputs, scene, mp_part, cfg.loss_mode, cfg.loss)
        loss_val = float(loss.values)
        if not np.isfinite(loss_val):
            raise NumericError(step)
        opt.zero_grad()
        loss.backward()
        opt.step(lr)
        epoch_acc.append(loss_val)
        if len(epoch_acc) == n_train or step == cfg.train.steps - 1:
            epoch_losses.append(float(np.mean(epoch_acc)))
            epoch_acc = []
        if log is not None and (step % cfg.train.log_every == 0
                                or step == cfg.train.steps - 1):
            log(f"step {step} loss {loss_val:.4f} lr {lr:.2e}")

    report = evaluate(params, eval_scenes, synth_cfg, cfg.loss)
    report.losses = epoch_losses
    report.config_hash = config_hash(cfg.to_json())
    report.seed = cfg.seed
    return params, report, synth_cfg


def _disabled_mp_forward(pyramid, params):
    return full_forward(plain_spec(pyramid, params), params)


def _eval_one(args):
    params, scene, synth_cfg, weights, forward_fn = args
    pyramid = synth_features(scene, synth_cfg)
    outputs = forward_fn(pyramid, params)
    miou = miou_layerwise(outputs)
    vectors = compute_matching_vectors(outputs, scene, weights)
    util = util_layerwise(vectors, scene.num_instances)
    preds = extract_predictions(outputs)
    return miou, util, preds


def evaluate(params: DecoderParams, scenes, synth_cfg, weights,
             forward_fn=_disabled_mp_forward) -> MetricsReport:
    """MP-free evaluation over scenes; per-scene metrics averaged in order.

    forward_fn defaults to the full decoder entry point with the MP part
    absent; passing decoder.forward_plain instead runs the machinery-free
    twin (the two must agree bitwise).
    """
    if not scenes:
        raise ValueError("empty evaluation scene set")
    frozen = detach_params(params)
    jobs = [(frozen, s, synth_cfg, weights, forward_fn) for s in scenes]
    threads = int(os.environ.get("MPSEG_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_eval_one, jobs))
    else:
        rows = [_eval_one(j) for j in jobs]
    miou = np.mean([r[0] for r in rows], axis=0)
    util = np.mean([r[1] for r in rows], axis=0)
    ap = ap_lite([r[2] for r in rows], scenes)
    return MetricsReport(miou_l=miou, util=util, ap=ap)
