"""Masked-attention transformer decoder.

Each layer runs masked cross-attention over one pyramid scale (coarse to
fine, cycling), self-attention under an optional blocking grid, and a
feed-forward block, each with residual + layer norm. Shared mask and
classification heads produce per-layer predictions, and each layer's
binarized masks become the next layer's cross-attention blocking grids.
Single attention head, no positional encodings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import (NEG_BIG, Tensor, concat_rows, layernorm_lastdim, masked_fill,
                     softmax_lastdim, _sigmoid)

CHECKPOINT_MAGIC = "mpseg-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    sq: Tensor
    sk: Tensor
    sv: Tensor
    so: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ln3_g: Tensor
    ln3_b: Tensor


@dataclass
class DecoderParams:
    layers: list
    query_embed: Tensor   # (N, d) learnable matching queries
    class_embed: Tensor   # (K, d)
    mask_w1: Tensor
    mask_b1: Tensor
    mask_w2: Tensor
    mask_b2: Tensor
    cls_w: Tensor         # (d, K+1); index K is the no-object class
    cls_b: Tensor
    n_queries: int = 20
    num_layers: int = 9
    dim: int = 32
    num_categories: int = 4
    ffn_hidden: int = 64


@dataclass
class LayerOutputs:
    """Predictions for layers 0..L; index 0 is the pre-decoder prediction."""
    mask_logits: list     # each (n_q, H, W) Tensor
    class_logits: list    # each (n_q, K+1) Tensor
    n_match: int


@dataclass
class ForwardSpec:
    pyramid: object                 # FeaturePyramid
    init_queries: Tensor            # (n_match + n_mp, d)
    n_match: int
    overrides: dict = field(default_factory=dict)  # layer -> (n_mp, h*w) bool blocks
    self_block: np.ndarray = None   # (n_q, n_q) bool or None


def init_params(seed: int, n_queries: int = 20, n_layers: int = 9, dim: int = 32,
                num_categories: int = 4, ffn_hidden: int = 64) -> DecoderParams:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))

    def xavier(n_in, n_out):
        limit = np.sqrt(6.0 / (n_in + n_out))
        return Tensor(rng.uniform(-limit, limit, size=(n_in, n_out)), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    layers = []
    for _ in range(n_layers):
        layers.append(LayerParams(
            wq=xavier(dim, dim), wk=xavier(dim, dim), wv=xavier(dim, dim),
            wo=xavier(dim, dim),
            sq=xavier(dim, dim), sk=xavier(dim, dim), sv=xavier(dim, dim),
            so=xavier(dim, dim),
            ffn_w1=xavier(dim, ffn_hidden), ffn_b1=zeros(ffn_hidden),
            ffn_w2=xavier(ffn_hidden, dim), ffn_b2=zeros(dim),
            ln1_g=ones(dim), ln1_b=zeros(dim),
            ln2_g=ones(dim), ln2_b=zeros(dim),
            ln3_g=ones(dim), ln3_b=zeros(dim)))
    return DecoderParams(
        layers=layers,
        query_embed=Tensor(rng.standard_normal((n_queries, dim)) / np.sqrt(dim),
                           requires_grad=True),
        class_embed=Tensor(rng.standard_normal((num_categories, dim)) / np.sqrt(dim),
                           requires_grad=True),
        mask_w1=xavier(dim, dim), mask_b1=zeros(dim),
        mask_w2=xavier(dim, dim), mask_b2=zeros(dim),
        cls_w=xavier(dim, num_categories + 1), cls_b=zeros(num_categories + 1),
        n_queries=n_queries, num_layers=n_layers, dim=dim,
        num_categories=num_categories, ffn_hidden=ffn_hidden)


def named_parameters(params: DecoderParams):
    """Stable (name, Tensor) list; order defines checkpoint layout."""
    pairs = [("query_embed", params.query_embed), ("class_embed", params.class_embed),
             ("mask_w1", params.mask_w1), ("mask_b1", params.mask_b1),
             ("mask_w2", params.mask_w2), ("mask_b2", params.mask_b2),
             ("cls_w", params.cls_w), ("cls_b", params.cls_b)]
    for i, lp in enumerate(params.layers):
        for fname in ("wq", "wk", "wv", "wo", "sq", "sk", "sv", "so",
                      "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
                      "ln1_g", "ln1_b", "ln2_g", "ln2_b", "ln3_g", "ln3_b"):
            pairs.append((f"layer{i}.{fname}", getattr(lp, fname)))
    return pairs


def mask_head(params: DecoderParams, queries: Tensor, embed_grid) -> Tensor:
    """logits[n, y, x] = MLP(query_n) . embed[y, x]."""
    if isinstance(embed_grid, Tensor):
        embed_grid = embed_grid.values
    h, w, d = embed_grid.shape
    if params.mask_w2.values.shape[1] != d:
        raise ValueError(f"mask head output dim {params.mask_w2.values.shape[1]} "
                         f"!= embedding dim {d}")
    e = (queries @ params.mask_w1 + params.mask_b1).relu() @ params.mask_w2 + params.mask_b2
    flat = Tensor(embed_grid.reshape(h * w, d).T)
    return (e @ flat).reshape(-1, h, w)


def class_head(params: DecoderParams, queries: Tensor) -> Tensor:
    return queries @ params.cls_w + params.cls_b


def binarize_masks(mask_logit_values: np.ndarray) -> np.ndarray:
    """sigmoid(logit) > 0.5 per pixel."""
    return _sigmoid(mask_logit_values) > 0.5


def binarize_for_attention(mask_logit_values: np.ndarray, h2: int, w2: int) -> np.ndarray:
    """Per-query blocking grids at the target scale, flattened to (n, h2*w2).

    Queries whose binarized mask is empty after resizing fall back to
    no blocking so their softmax row keeps support.
    """
    bits = binarize_masks(mask_logit_values)
    n, h, w = bits.shape
    if (h, w) != (h2, w2):
        ri = np.minimum((np.arange(h2) + 0.5) * (h / h2), h - 1).astype(np.intp)
        ci = np.minimum((np.arange(w2) + 0.5) * (w / w2), w - 1).astype(np.intp)
        bits = bits[:, ri][:, :, ci]
    block = ~bits
    empty = ~bits.any(axis=(1, 2))
    block[empty] = False
    return block.reshape(n, h2 * w2)


def masked_cross_attention(x: Tensor, feats: Tensor, cross_block: np.ndarray,
                           lp: LayerParams, dim: int) -> Tensor:
    """Pre-residual cross-attention: softmax over unblocked pixels only."""
    q = x @ lp.wq
    k = feats @ lp.wk
    v = feats @ lp.wv
    logits = (q @ k.T) * (1.0 / np.sqrt(dim))
    logits = masked_fill(logits, cross_block, NEG_BIG)
    return softmax_lastdim(logits) @ v @ lp.wo


def masked_self_attention(x: Tensor, self_block, lp: LayerParams, dim: int) -> Tensor:
    """Pre-residual self-attention among queries under an optional block grid."""
    sq = x @ lp.sq
    sk = x @ lp.sk
    sv = x @ lp.sv
    slogits = (sq @ sk.T) * (1.0 / np.sqrt(dim))
    if self_block is not None:
        slogits = masked_fill(slogits, self_block, NEG_BIG)
    return softmax_lastdim(slogits) @ sv @ lp.so


def decoder_layer(x: Tensor, feats: Tensor, cross_block: np.ndarray,
                  self_block, lp: LayerParams, dim: int) -> Tensor:
    """One decoder layer: masked cross-attention, self-attention, FFN,
    each with residual connection and layer normalization."""
    x = layernorm_lastdim(x + masked_cross_attention(x, feats, cross_block, lp, dim)) \
        * lp.ln1_g + lp.ln1_b
    x = layernorm_lastdim(x + masked_self_attention(x, self_block, lp, dim)) \
        * lp.ln2_g + lp.ln2_b
    ffn = (x @ lp.ffn_w1 + lp.ffn_b1).relu() @ lp.ffn_w2 + lp.ffn_b2
    return layernorm_lastdim(x + ffn) * lp.ln3_g + lp.ln3_b


def _require_leakage_grid(self_block: np.ndarray, n_match: int):
    """The partitioned layer is only valid when matching queries attend
    exactly the matching part; anything else would leak."""
    if self_block is None:
        raise ValueError("a query partition requires a self-attention blocking grid")
    if self_block[:n_match, :n_match].any() or not self_block[:n_match, n_match:].all():
        raise ValueError("self block must isolate the matching part "
                         "(top-left free, top-right fully blocked)")


def decoder_layer_partitioned(x_match: Tensor, x_mp: Tensor, feats: Tensor,
                              block_match: np.ndarray, block_mp: np.ndarray,
                              self_block: np.ndarray, lp: LayerParams,
                              dim: int):
    """decoder_layer with the query axis split into matching and MP blocks.

    Under the leakage-blocking self grid the matching rows never read the
    MP rows, so the two blocks can be computed as separate matrices. That
    keeps the matching part's float operations identical to a forward
    with no MP part at all, making the isolation guarantee bitwise, not
    just mathematical.
    """
    n_match = x_match.values.shape[0]
    _require_leakage_grid(self_block, n_match)
    scale = 1.0 / np.sqrt(dim)
    k = feats @ lp.wk
    v = feats @ lp.wv

    def cross(x, block):
        logits = ((x @ lp.wq) @ k.T) * scale
        return softmax_lastdim(masked_fill(logits, block, NEG_BIG)) @ v @ lp.wo

    xm = layernorm_lastdim(x_match + cross(x_match, block_match)) * lp.ln1_g + lp.ln1_b
    xp = layernorm_lastdim(x_mp + cross(x_mp, block_mp)) * lp.ln1_g + lp.ln1_b

    # MP self-attention reads the pre-self-attention context of all queries
    ctx = concat_rows([xm, xp])
    keys = ctx @ lp.sk
    vals = ctx @ lp.sv
    slogits = ((xp @ lp.sq) @ keys.T) * scale
    slogits = masked_fill(slogits, self_block[n_match:, :], NEG_BIG)
    mp_attended = softmax_lastdim(slogits) @ vals @ lp.so
    xp = layernorm_lastdim(xp + mp_attended) * lp.ln2_g + lp.ln2_b

    xm = layernorm_lastdim(xm + masked_self_attention(xm, None, lp, dim)) \
        * lp.ln2_g + lp.ln2_b

    def ffn(x):
        return (x @ lp.ffn_w1 + lp.ffn_b1).relu() @ lp.ffn_w2 + lp.ffn_b2

    xm = layernorm_lastdim(xm + ffn(xm)) * lp.ln3_g + lp.ln3_b
    xp = layernorm_lastdim(xp + ffn(xp)) * lp.ln3_g + lp.ln3_b
    return xm, xp


def _scale_order(pyramid):
    """(h, w, flattened-features Tensor) per scale, coarse to fine."""
    out = []
    for grid in pyramid.scales:
        h, w, d = grid.shape
        out.append((h, w, Tensor(grid.reshape(h * w, d))))
    return out


def full_forward(spec: ForwardSpec, params: DecoderParams) -> LayerOutputs:
    """Run all layers; layer i attends to scale (i-1) mod num_scales.

    Matching-part blocking grids always come from the previous layer's
    own predictions; rows past n_match take the override table's grids
    where a layer has an entry and fall back to their own predictions
    elsewhere. With a partition present the two parts are computed as
    separate blocks so the matching part stays bitwise independent of
    the MP part.
    """
    scales = _scale_order(spec.pyramid)
    embed = spec.pyramid.embed
    n_match = spec.n_match
    n_total = spec.init_queries.values.shape[0]

    if n_total == n_match:
        x = spec.init_queries
        mask_logits = [mask_head(params, x, embed)]
        class_logits = [class_head(params, x)]
        for i in range(1, params.num_layers + 1):
            h, w, feats = scales[(i - 1) % len(scales)]
            cross_block = binarize_for_attention(mask_logits[-1].values, h, w)
            x = decoder_layer(x, feats, cross_block, spec.self_block,
                              params.layers[i - 1], params.dim)
            mask_logits.append(mask_head(params, x, embed))
            class_logits.append(class_head(params, x))
        return LayerOutputs(mask_logits=mask_logits, class_logits=class_logits,
                            n_match=n_match)

    n_mp = n_total - n_match
    xm = spec.init_queries.take_rows(np.arange(n_match))
    xp = spec.init_queries.take_rows(n_match + np.arange(n_mp))
    mask_m = [mask_head(params, xm, embed)]
    mask_p = [mask_head(params, xp, embed)]
    cls_m = [class_head(params, xm)]
    cls_p = [class_head(params, xp)]
    for i in range(1, params.num_layers + 1):
        h, w, feats = scales[(i - 1) % len(scales)]
        block_match = binarize_for_attention(mask_m[-1].values, h, w)
        if i in spec.overrides:
            block_mp = spec.overrides[i]
            if block_mp.shape != (n_mp, h * w):
                raise ValueError(f"override for layer {i} has shape {block_mp.shape}, "
                                 f"expected {(n_mp, h * w)}")
        else:
            block_mp = binarize_for_attention(mask_p[-1].values, h, w)
        xm, xp = decoder_layer_partitioned(xm, xp, feats, block_match, block_mp,
                                           spec.self_block, params.layers[i - 1],
                                           params.dim)
        mask_m.append(mask_head(params, xm, embed))
        mask_p.append(mask_head(params, xp, embed))
        cls_m.append(class_head(params, xm))
        cls_p.append(class_head(params, xp))
    mask_logits = [concat_rows([a, b]) for a, b in zip(mask_m, mask_p)]
    class_logits = [concat_rows([a, b]) for a, b in zip(cls_m, cls_p)]
    return LayerOutputs(mask_logits=mask_logits, class_logits=class_logits,
                        n_match=n_match)


def plain_spec(pyramid, params: DecoderParams) -> ForwardSpec:
    """Matching part only: learnable queries, no overrides, no self blocking."""
    return ForwardSpec(pyramid=pyramid, init_queries=params.query_embed,
                       n_match=params.n_queries, overrides={}, self_block=None)


def forward_plain(pyramid, params: DecoderParams) -> LayerOutputs:
    """Decoder forward with no auxiliary-query machinery at all.

    Kept as an independent code path so inference equality against
    full_forward-with-nothing-enabled can be asserted bitwise.
    """
    scales = _scale_order(pyramid)
    embed = pyramid.embed
    x = params.query_embed
    mask_logits = [mask_head(params, x, embed)]
    class_logits = [class_head(params, x)]
    for i in range(1, params.num_layers + 1):
        h, w, feats = scales[(i - 1) % len(scales)]
        cross_block = binarize_for_attention(mask_logits[-1].values, h, w)
        x = decoder_layer(x, feats, cross_block, None, params.layers[i - 1], params.dim)
        mask_logits.append(mask_head(params, x, embed))
        class_logits.append(class_head(params, x))
    return LayerOutputs(mask_logits=mask_logits, class_logits=class_logits,
                        n_match=params.n_queries)


def save_checkpoint(path, params: DecoderParams, extra_meta: dict | None = None):
    meta = {"version": CHECKPOINT_VERSION,
            "n_queries": params.n_queries, "num_layers": params.num_layers,
            "dim": params.dim, "num_categories": params.num_categories,
            "ffn_hidden": params.ffn_hidden}
    if extra_meta:
        meta.update(extra_meta)
    pairs = named_parameters(params)
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} "
                 f"{json.dumps(meta, sort_keys=True)}\n".encode("ascii"))
        fh.write(f"{len(pairs)}\n".encode("ascii"))
        for name, t in pairs:
            arr = np.ascontiguousarray(t.values, dtype="<f8")
            shape = ",".join(str(s) for s in arr.shape)
            fh.write(f"{name} {shape}\n".encode("ascii"))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Returns (DecoderParams, meta dict)."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").rstrip("\n")
        magic, version, meta_json = header.split(" ", 2)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if int(version) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {version} unsupported")
        meta = json.loads(meta_json)
        count = int(fh.readline().decode("ascii"))
        params = init_params(seed=0, n_queries=meta["n_queries"],
                             n_layers=meta["num_layers"], dim=meta["dim"],
                             num_categories=meta["num_categories"],
                             ffn_hidden=meta["ffn_hidden"])
        pairs = named_parameters(params)
        if count != len(pairs):
            raise ValueError(f"{path}: has {count} arrays, expected {len(pairs)}")
        by_name = dict(pairs)
        for _ in range(count):
            name_shape = fh.readline().decode("ascii").rstrip("\n")
            name, shape_s = name_shape.split(" ")
            shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
            n_bytes = 8 * int(np.prod(shape)) if shape else 8
            raw = fh.read(n_bytes)
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
            if name not in by_name:
                raise ValueError(f"{path}: unknown parameter {name!r}")
            if by_name[name].values.shape != arr.shape:
                raise ValueError(f"{path}: parameter {name!r} shape {arr.shape} != "
                                 f"{by_name[name].values.shape}")
            by_name[name].values = arr
    return params, meta
