"""Desk-scale masked-attention set-prediction segmenter.

Layout follows the usual mask-classification recipe at toy size:

* pixel branch: linear patch embedding plus two pixel self-attention
  layers over the token grid, and a per-pixel colour/position MLP at full
  resolution, summed into the mask features
* decoder: learnable queries; each layer runs masked cross-attention over
  the tokens, self-attention over the queries and a feed-forward block
* heads: linear classifier over C + 1 classes (column 0 is no-object) and
  a dot-product mask head between segment embeddings and pixel features

Attention masks come from the previous prediction, thresholded at 0.5 and
detached, so no gradient flows through the binarization.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NonFiniteInput, ShapeMismatch
from .matching import MatchWeights, hungarian
from .structures import NO_OBJECT, ProposalSet


@dataclass
class ToyModelConfig:
    n_queries: int = 100
    d: int = 32
    layers: int = 3
    num_classes: int = 7
    height: int = 64
    width: int = 64
    patch: int = 4
    pixel_layers: int = 2
    pos_freqs: int = 4
    attn_tau: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_queries < 1 or self.d < 4 or self.layers < 1:
            raise ValueError("need n_queries >= 1, d >= 4 and layers >= 1")
        if self.height % self.patch or self.width % self.patch:
            raise ShapeMismatch(f"image {self.height}x{self.width} not divisible by patch {self.patch}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    def to_json(self) -> dict:
        return asdict(self)


def neg_large(dtype: torch.dtype) -> float:
    """Additive block value; ``exp`` of it (minus any finite row max) is exactly 0."""
    return float(torch.finfo(dtype).min)


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def attention_mask_from_probs(soft_masks, tau: float = 0.5) -> torch.Tensor:
    """0 where prob >= tau, a huge negative value elsewhere; fully blocked rows reset to 0."""
    probs = _as_tensor(soft_masks)
    blocked = probs < tau
    full = blocked.all(dim=-1, keepdim=True)
    blocked = blocked & ~full
    out = torch.zeros_like(probs)
    return out.masked_fill(blocked, neg_large(probs.dtype))


def attention_weights(q, k, mask=None) -> torch.Tensor:
    q, k = _as_tensor(q), _as_tensor(k)
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        logits = logits + _as_tensor(mask, logits.dtype)
    return torch.softmax(logits, dim=-1)


def masked_attention(q, k, v, mask=None) -> torch.Tensor:
    """``softmax(Q K^T / sqrt(d) + M) V`` over the last two dims (leading dims broadcast)."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"Q {tuple(q.shape)}, K {tuple(k.shape)}, V {tuple(v.shape)}")
    if mask is not None:
        mask = _as_tensor(mask, q.dtype)
        if mask.shape[-2:] != (q.shape[-2], k.shape[-2]):
            raise ShapeMismatch(f"mask {tuple(mask.shape)} vs {q.shape[-2]}x{k.shape[-2]}")
    for name, t in (("Q", q), ("K", k), ("V", v)):
        if not torch.isfinite(t).all():
            raise NonFiniteInput(f"{name} has non-finite entries")
    return attention_weights(q, k, mask) @ v


def mask_head(seg, pixel_features) -> torch.Tensor:
    """Mask logits ``seg[q] . pixel_features[p]``; apply a sigmoid for soft masks."""
    seg, pix = _as_tensor(seg), _as_tensor(pixel_features)
    if seg.shape[-1] != pix.shape[-1]:
        raise ShapeMismatch(f"segment width {seg.shape[-1]} vs pixel feature width {pix.shape[-1]}")
    return seg @ pix.transpose(-1, -2)


def fourier_positions(h: int, w: int, freqs: int, dtype=torch.float32) -> torch.Tensor:
    """(h * w, 4 * freqs) sin/cos features of normalized pixel-centre coordinates."""
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    feats = []
    for f in range(freqs):
        s = math.pi * 2.0**f
        feats += [torch.sin(s * yy), torch.cos(s * yy), torch.sin(s * xx), torch.cos(s * xx)]
    return torch.stack(feats, -1).reshape(h * w, -1).to(dtype)


class Attention(nn.Module):
    """Single-head attention with an optional additive mask."""

    def __init__(self, d: int):
        super().__init__()
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, query, key, value, mask=None):
        return self.o(attention_weights(self.q(query), self.k(key), mask) @ self.v(value))


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class PixelLayer(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, 2 * d)

    def forward(self, x, pos):
        h = self.norm1(x)
        x = x + self.attn(h + pos, h + pos, h)
        return x + self.ffn(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.cross = Attention(d)
        self.norm1 = nn.LayerNorm(d)
        self.self_attn = Attention(d)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, 2 * d)
        self.norm3 = nn.LayerNorm(d)

    def forward(self, x, qpos, mem, mpos, attn_mask):
        x = self.norm1(x + self.cross(x + qpos, mem + mpos, mem, attn_mask))
        x = self.norm2(x + self.self_attn(x + qpos, x + qpos, x))
        return self.norm3(x + self.ffn(x))


class ToyMaskModel(nn.Module):
    def __init__(self, cfg: ToyModelConfig):
        super().__init__()
        self.cfg = cfg
        d, p = cfg.d, cfg.patch
        gh, gw = cfg.grid
        npos = 4 * cfg.pos_freqs
        self.patch_embed = nn.Linear(3 * p * p, d)
        self.token_pos = nn.Linear(npos, d)
        self.pixel_layers = nn.ModuleList(PixelLayer(d) for _ in range(cfg.pixel_layers))
        self.pixel_local = nn.Sequential(nn.Linear(3 + npos, 2 * d), nn.GELU(), nn.Linear(2 * d, d))
        self.token_proj = nn.Linear(d, d)
        self.queries = nn.Parameter(torch.zeros(cfg.n_queries, d))
        self.query_pos = nn.Parameter(torch.zeros(cfg.n_queries, d))
        self.decoder = nn.ModuleList(DecoderLayer(d) for _ in range(cfg.layers))
        self.decoder_norm = nn.LayerNorm(d)
        self.class_head = nn.Linear(d, cfg.num_classes + 1)
        self.mask_embed = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        self.register_buffer("pix_pos", fourier_positions(cfg.height, cfg.width, cfg.pos_freqs), persistent=False)
        self.register_buffer("tok_pos", fourier_positions(gh, gw, cfg.pos_freqs), persistent=False)
        self.reset_parameters(cfg.seed)

    def reset_parameters(self, seed: int) -> None:
        """Seeded N(0, 0.02) weights, zero biases, unit LayerNorm gains."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, prm in self.named_parameters():
                if "norm" in name:
                    prm.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    prm.zero_()
                else:
                    prm.copy_(torch.randn(prm.shape, generator=gen, dtype=torch.float64).to(prm.dtype) * 0.02)
            # the per-pixel branch and mask embedding need enough gain to separate pixels early
            for lin in (self.pixel_local[0], self.pixel_local[2], self.mask_embed[0], self.mask_embed[2]):
                lin.weight.mul_(10.0)

    # -- pieces ---------------------------------------------------------------

    def pixel_features(self, images: torch.Tensor):
        """Returns ``(tokens, token_pos, pixel_feats)``; pixel_feats is (B, H*W, d)."""
        cfg = self.cfg
        b = images.shape[0]
        if images.shape[1:] != (3, cfg.height, cfg.width):
            raise ShapeMismatch(f"expected images (B, 3, {cfg.height}, {cfg.width}), got {tuple(images.shape)}")
        p = cfg.patch
        gh, gw = cfg.grid
        patches = images.reshape(b, 3, gh, p, gw, p).permute(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, 3 * p * p)
        tpos = self.token_pos(self.tok_pos)
        tokens = self.patch_embed(patches)
        for layer in self.pixel_layers:
            tokens = layer(tokens, tpos)
        up = self.token_proj(tokens).reshape(b, gh, 1, gw, 1, -1).expand(b, gh, p, gw, p, -1)
        up = up.reshape(b, cfg.height * cfg.width, -1)
        rgb = images.permute(0, 2, 3, 1).reshape(b, cfg.height * cfg.width, 3)
        pos = self.pix_pos.expand(b, -1, -1)
        local = self.pixel_local(torch.cat([rgb, pos], -1))
        return tokens, tpos, up + local

    def heads(self, x: torch.Tensor, pix: torch.Tensor):
        h = self.decoder_norm(x)
        seg = self.mask_embed(h)
        return self.class_head(h), mask_head(seg, pix), seg

    def token_attn_mask(self, mask_logits: torch.Tensor) -> torch.Tensor:
        """Average soft masks over each patch, then threshold (detached)."""
        cfg = self.cfg
        b, n, _ = mask_logits.shape
        gh, gw = cfg.grid
        p = cfg.patch
        probs = torch.sigmoid(mask_logits.detach()).reshape(b, n, gh, p, gw, p).mean(dim=(3, 5))
        return attention_mask_from_probs(probs.reshape(b, n, gh * gw), cfg.attn_tau)

    def forward(self, images: torch.Tensor, attn_masks: Optional[list] = None) -> dict:
        """Batch forward pass.

        Returns per-stage ``logits`` and ``masks`` lists (stage 0 comes from
        the raw queries, stage i from decoder layer i), the final ``seg``
        embeddings and the ``attn_masks`` used. Passing ``attn_masks`` reuses
        them instead of recomputing, which keeps the discrete part fixed.
        """
        b = images.shape[0]
        tokens, tpos, pix = self.pixel_features(images)
        x = self.queries.unsqueeze(0).expand(b, -1, -1)
        qpos = self.query_pos.unsqueeze(0).expand(b, -1, -1)
        logits, masks, used = [], [], []
        cls, mlog, seg = self.heads(x, pix)
        logits.append(cls)
        masks.append(mlog)
        for i, layer in enumerate(self.decoder):
            am = attn_masks[i] if attn_masks is not None else self.token_attn_mask(mlog)
            used.append(am)
            x = layer(x, qpos, tokens, tpos, am)
            cls, mlog, seg = self.heads(x, pix)
            logits.append(cls)
            masks.append(mlog)
        return {"logits": logits, "masks": masks, "seg": seg, "attn_masks": used}

    @torch.no_grad()
    def predict(self, images, frames: Optional[list] = None) -> tuple[list, torch.Tensor]:
        """Final-stage proposals per image plus their segment embeddings (B, N, d)."""
        dtype = next(self.parameters()).dtype
        images = _as_tensor(images, dtype)
        if images.ndim == 3:
            images = images.unsqueeze(0)
        out = self.forward(images)
        probs = torch.softmax(out["logits"][-1], -1).double().numpy()
        soft = torch.sigmoid(out["masks"][-1]).double().numpy()
        h, w = self.cfg.height, self.cfg.width
        sets = []
        for i in range(images.shape[0]):
            fid = frames[i] if frames is not None else str(i)
            sets.append(ProposalSet(fid, probs[i], soft[i].reshape(-1, h, w)))
        return sets, out["seg"]


def build_model(cfg: ToyModelConfig, dtype=torch.float32) -> ToyMaskModel:
    return ToyMaskModel(cfg).to(dtype)


def forward(model: ToyMaskModel, image) -> tuple[ProposalSet, torch.Tensor]:
    """Single-frame forward: ``(ProposalSet, segment embeddings (N, d))``."""
    sets, seg = model.predict(image)
    return sets[0], seg[0]


# training criterion ------------------------------------------------------------


def _batch_costs(logits, mask_logits, classes, gt_masks, w: MatchWeights) -> np.ndarray:
    """N x G matching costs for one image (no grad)."""
    with torch.no_grad():
        prob = torch.softmax(logits, -1)
        p = torch.sigmoid(mask_logits)
        y = gt_masks
        npix = p.shape[-1]
        pos = F.softplus(-mask_logits)  # -log p
        neg = F.softplus(mask_logits)  # -log (1 - p)
        bce = (pos @ y.T + neg @ (1 - y).T) / npix
        dice = 1 - (2 * p @ y.T + 1) / (p.sum(-1)[:, None] + y.sum(-1)[None, :] + 1)
        cost = -w.w_cls * prob[:, classes] + w.w_bce * bce + w.w_dice * dice
    return cost.double().numpy()


def match(logits, mask_logits, classes, gt_masks, w: MatchWeights) -> tuple[list, list]:
    """Hungarian match of one image; returns (proposal indices, gt indices) sorted by gt."""
    if len(classes) == 0:
        return [], []
    cost = _batch_costs(logits, mask_logits, classes, gt_masks, w)
    assign = hungarian(cost)
    gts = sorted(assign)
    return [assign[g] for g in gts], gts


def stage_loss(logits, mask_logits, targets, w: MatchWeights, indices=None):
    """Set criterion for one decoder stage over a batch.

    ``targets`` holds ``(classes LongTensor, masks float (G, H*W))`` per image.
    Returns ``(loss, indices)``; ``indices`` can be fed back to reuse a matching.
    """
    b, n, k = logits.shape
    if indices is None:
        indices = [match(logits[i], mask_logits[i], t[0], t[1], w) for i, t in enumerate(targets)]
    tgt_cls = torch.full((b, n), NO_OBJECT, dtype=torch.long)
    for i, (src, gt) in enumerate(indices):
        if src:
            tgt_cls[i, src] = targets[i][0][gt]
    weight = torch.ones(k, dtype=logits.dtype)
    weight[NO_OBJECT] = w.no_object_weight
    loss_cls = F.cross_entropy(logits.reshape(b * n, k), tgt_cls.reshape(-1), weight=weight)

    src_m = [mask_logits[i, src] for i, (src, _) in enumerate(indices) if src]
    if src_m:
        pred = torch.cat(src_m)
        tgt = torch.cat([targets[i][1][gt] for i, (src, gt) in enumerate(indices) if src])
        loss_bce = F.binary_cross_entropy_with_logits(pred, tgt, reduction="none").mean(-1).mean()
        p = torch.sigmoid(pred)
        dice = 1 - (2 * (p * tgt).sum(-1) + 1) / (p.sum(-1) + tgt.sum(-1) + 1)
        loss_dice = dice.mean()
    else:
        loss_bce = loss_dice = logits.sum() * 0.0
    loss = w.w_cls * loss_cls + w.w_bce * loss_bce + w.w_dice * loss_dice
    return loss, indices


def criterion(out: dict, targets, w: MatchWeights = MatchWeights(), deep_supervision: bool = True, indices=None):
    """Sum of stage losses (only the last stage without deep supervision)."""
    stages = range(len(out["logits"])) if deep_supervision else [len(out["logits"]) - 1]
    total = 0.0
    used = []
    for j, s in enumerate(stages):
        loss, idx = stage_loss(out["logits"][s], out["masks"][s], targets, w, None if indices is None else indices[j])
        total = total + loss
        used.append(idx)
    return total, used


def make_targets(annotations, dtype=torch.float32) -> list:
    out = []
    for ann in annotations:
        cls = torch.tensor(ann.classes, dtype=torch.long)
        if ann.instances:
            m = torch.as_tensor(np.stack([mm.ravel() for mm in ann.masks]), dtype=dtype)
        else:
            m = torch.zeros((0, ann.dims[0] * ann.dims[1]), dtype=dtype)
        out.append((cls, m))
    return out


# checkpoints -------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MATISCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: ToyMaskModel, path, extra: Optional[dict] = None) -> None:
    """Container: magic, u32 version, u64 header length, JSON header, float64 LE blocks."""
    state = model.state_dict()
    index, blobs, offset = [], [], 0
    for name, t in state.items():
        arr = t.detach().cpu().double().numpy().astype("<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format": "matis-toy-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_json(),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "params": index,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint32(CHECKPOINT_VERSION).astype("<u4").tobytes())
        fh.write(np.uint64(len(hbytes)).astype("<u8").tobytes())
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> tuple[dict, dict]:
    from .errors import VersionMismatch

    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise VersionMismatch(f"{path} is not a toy-model checkpoint")
    version = int(np.frombuffer(data[8:12], "<u4")[0])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    hlen = int(np.frombuffer(data[12:20], "<u8")[0])
    header = json.loads(data[20 : 20 + hlen])
    base = 20 + hlen
    arrays = {}
    for entry in header["params"]:
        start = base + entry["offset"]
        arr = np.frombuffer(data[start : start + 8 * entry["count"]], "<f8").reshape(entry["shape"])
        arrays[entry["name"]] = arr
    return header, arrays


def load_checkpoint(path) -> tuple[ToyMaskModel, dict]:
    header, arrays = read_checkpoint(path)
    cfg = ToyModelConfig(**header["config"])
    dtype = getattr(torch, header.get("dtype", "float32"))
    model = build_model(cfg, dtype)
    state = {k: torch.from_numpy(np.array(v)).to(dtype) for k, v in arrays.items()}
    model.load_state_dict(state)
    model.eval()
    return model, header
