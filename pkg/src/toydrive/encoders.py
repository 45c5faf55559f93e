"""Condition encoders: text, camera pose, 3D boxes and the additive BEV map branch.

Every condition ends up as ``d_emb``-wide tokens so they can share one cross-attention
context: ``[h_c, h_t_1..h_t_L, h_b_1..h_b_M]``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import BEVMap, Box3D, CameraPose, box_corners, f_viz, flatten_pose, fourier_embed
from .toyworld import LOCATIONS, OBJECT_CLASSES, TIMES_OF_DAY, WEATHERS

TEMPLATE_WORDS = ("a", "driving", "scene", "image", "at", ".", ",")


class OutOfVocabularyError(KeyError):
    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self):
        return f"word {self.word!r} is not in the vocabulary"


class CapacityError(ValueError):
    """More real box tokens than padding slots."""


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (L, d)
    mask: torch.Tensor  # (L,) bool, True = real token

    def __post_init__(self):
        if self.tokens.shape[0] != self.mask.shape[0]:
            raise ValueError("mask length must equal token count")

    def __len__(self):
        return self.tokens.shape[0]


def default_vocabulary() -> list[str]:
    """Closed toy vocabulary. Index order is part of the checkpoint format; append only."""
    words: list[str] = []
    for group in (TEMPLATE_WORDS, LOCATIONS, WEATHERS, TIMES_OF_DAY, OBJECT_CLASSES):
        for phrase in group:
            for w in phrase.split():
                if w not in words:
                    words.append(w)
    return words


def tokenize(text: str) -> list[str]:
    """Lowercase words; '.' and ',' become their own tokens."""
    return re.findall(r"[a-z0-9_]+|[.,]", text.lower())


class TextVocabulary:
    def __init__(self, words: Sequence[str] | None = None):
        self.words = list(words) if words is not None else default_vocabulary()
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        ids = []
        for w in tokenize(text):
            if w not in self.index:
                raise OutOfVocabularyError(w)
            ids.append(self.index[w])
        return ids


def sinusoidal_table(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return table.float()


def mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.SiLU(), nn.Linear(d_hidden, d_out))


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def pose_features(pose: CameraPose, num_bands: int) -> np.ndarray:
    """Fourier features of the 7 rows of the flattened pose, concatenated (7 * 6L,)."""
    return fourier_embed(flatten_pose(pose), num_bands).reshape(-1)


def box_features(box: Box3D, num_bands: int, coord_scale: float) -> np.ndarray:
    """Fourier features of the 8 scaled corners, concatenated (8 * 6L,)."""
    return fourier_embed(box_corners(box) / coord_scale, num_bands).reshape(-1)


class TextEncoder(nn.Module):
    """Learned word table plus fixed sinusoidal positions."""

    def __init__(self, vocab: TextVocabulary, d_emb: int, max_len: int = 16):
        super().__init__()
        self.vocab = vocab
        self.max_len = max_len
        self.embedding = nn.Embedding(len(vocab), d_emb)
        nn.init.normal_(self.embedding.weight, std=0.5)
        self.register_buffer("positions", sinusoidal_table(max_len, d_emb), persistent=False)

    def ids(self, prompt: str) -> list[int]:
        ids = self.vocab.encode(prompt)
        if len(ids) > self.max_len:
            raise ValueError(f"prompt has {len(ids)} tokens, limit is {self.max_len}")
        return ids

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """(..., L) word ids -> (..., L, d) embeddings."""
        L = ids.shape[-1]
        return self.embedding(ids) + self.positions[:L].to(self.embedding.weight.dtype)


class CameraEncoder(nn.Module):
    def __init__(self, d_emb: int, num_bands: int):
        super().__init__()
        self.num_bands = num_bands
        self.mlp = mlp(7 * 6 * num_bands, d_emb, d_emb)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.mlp(feats)


class BoxEncoder(nn.Module):
    """h_b = MLP_b([class embedding, MLP_p(Fourier(corners))])."""

    def __init__(self, d_emb: int, num_bands: int):
        super().__init__()
        self.mlp_p = mlp(8 * 6 * num_bands, d_emb, d_emb)
        self.mlp_b = mlp(2 * d_emb, d_emb, d_emb)

    def forward(self, class_emb: torch.Tensor, corner_feats: torch.Tensor) -> torch.Tensor:
        return self.mlp_b(torch.cat([class_emb, self.mlp_p(corner_feats)], dim=-1))


class CrossAttention(nn.Module):
    """Multi-head attention from spatial queries to a masked token context."""

    def __init__(self, dim: int, ctx_dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(ctx_dim, dim, bias=False)
        self.to_v = nn.Linear(ctx_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor, ctx_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, _ = x.shape
        h = self.heads
        s = ctx.shape[1]
        q = self.to_q(x).view(b, n, h, -1).transpose(1, 2)
        k = self.to_k(ctx).view(b, s, h, -1).transpose(1, 2)
        v = self.to_v(ctx).view(b, s, h, -1).transpose(1, 2)
        # contexts are a few dozen tokens; an explicit softmax beats the masked SDPA fallback
        logits = (q @ k.transpose(-1, -2)) * (q.shape[-1] ** -0.5)
        if ctx_mask is not None:
            logits = logits.masked_fill(~ctx_mask[:, None, None, :], float("-inf"))
        out = torch.softmax(logits, dim=-1) @ v
        return self.to_out(out.transpose(1, 2).reshape(b, n, -1))


def norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class MapLevel(nn.Module):
    """Conv residual block followed by cross-attention to the scene+box context."""

    def __init__(self, c_in: int, c_out: int, d_emb: int, heads: int):
        super().__init__()
        self.block = nn.Sequential(norm(c_in), nn.SiLU(), nn.Conv2d(c_in, c_out, 3, padding=1),
                                   norm(c_out), nn.SiLU(), nn.Conv2d(c_out, c_out, 3, padding=1))
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        self.attn_norm = nn.LayerNorm(c_out)
        self.attn = CrossAttention(c_out, d_emb, heads)

    def forward(self, x, ctx, ctx_mask):
        x = self.skip(x) + self.block(x)
        b, c, hh, ww = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        tokens = tokens + self.attn(self.attn_norm(tokens), ctx, ctx_mask)
        return tokens.transpose(1, 2).reshape(b, c, hh, ww)


class MapEncoder(nn.Module):
    """Additive BEV branch mirroring the UNet encoder; every output passes a zero-init 1x1 conv.

    No BEV->camera warp: the grid is resized to the image resolution and the per-view camera
    token (inside the context) is what tells the branch which part of the map matters.
    """

    def __init__(self, map_channels: int, channels: Sequence[int], image_hw: tuple[int, int],
                 d_emb: int, heads: int):
        super().__init__()
        self.image_hw = image_hw
        c0 = channels[0]
        self.stem = nn.Sequential(nn.Conv2d(map_channels, 16, 3, padding=1), nn.SiLU(),
                                  nn.Conv2d(16, 16, 3, padding=1), nn.SiLU())
        self.stem_out = nn.Conv2d(16, c0, 3, padding=1)
        self.levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        self.zero_convs = nn.ModuleList()
        prev = c0
        for i, ch in enumerate(channels):
            self.levels.append(MapLevel(prev, ch, d_emb, heads))
            self.zero_convs.append(zero_module(nn.Conv2d(ch, ch, 1)))
            self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1) if i < len(channels) - 1 else nn.Identity())
            prev = ch
        self.mid = MapLevel(prev, prev, d_emb, heads)
        self.mid_zero = zero_module(nn.Conv2d(prev, prev, 1))

    def forward(self, bev: torch.Tensor, ctx: torch.Tensor, ctx_mask: torch.Tensor | None) -> list[torch.Tensor]:
        """bev (N, C, gw, gh) with N = batch*views -> per-level features plus the mid feature."""
        x = self.stem(bev)
        x = F.interpolate(x, size=self.image_hw, mode="bilinear", align_corners=False)
        x = self.stem_out(x)
        outs = []
        for level, zc, down in zip(self.levels, self.zero_convs, self.downs):
            x = level(x, ctx, ctx_mask)
            outs.append(zc(x))
            x = down(x)
        outs.append(self.mid_zero(self.mid(x, ctx, ctx_mask)))
        return outs


def bev_tensor(bev: BEVMap) -> torch.Tensor:
    """(C, gw, gh) float tensor from a BEVMap."""
    return torch.from_numpy(np.ascontiguousarray(bev.data.transpose(2, 0, 1))).float()


class ConditionEncoder(nn.Module):
    """All condition encoders plus the learned null box token.

    The methods named after single conditions (``embed_text``, ``encode_camera``, ...) work on
    one item at a time; the model uses the batched ``forward``-style helpers underneath.
    """

    def __init__(self, d_emb: int = 64, num_bands: int = 4, coord_scale: float = 24.0,
                 max_text_len: int = 16, vocab: TextVocabulary | None = None, use_box_encoder: bool = True):
        super().__init__()
        self.d_emb = d_emb
        self.num_bands = num_bands
        self.coord_scale = coord_scale
        self.text = TextEncoder(vocab or TextVocabulary(), d_emb, max_text_len)
        self.camera = CameraEncoder(d_emb, num_bands)
        self.use_box_encoder = use_box_encoder
        self.box = BoxEncoder(d_emb, num_bands) if use_box_encoder else None
        self.null_token = nn.Parameter(torch.randn(d_emb) * 0.5)
        class_ids = [self.text.ids(name) for name in OBJECT_CLASSES]
        width = max(len(c) for c in class_ids)
        ids = torch.zeros(len(class_ids), width, dtype=torch.long)
        weights = torch.zeros(len(class_ids), width)
        for i, c in enumerate(class_ids):
            ids[i, : len(c)] = torch.tensor(c)
            weights[i, : len(c)] = 1.0 / len(c)
        self.register_buffer("class_token_ids", ids, persistent=False)
        self.register_buffer("class_pool_weights", weights, persistent=False)

    @property
    def dtype(self):
        return self.null_token.dtype

    @property
    def device(self):
        return self.null_token.device

    # -- single-item API -------------------------------------------------
    def embed_text(self, prompt: str) -> TokenSequence:
        ids = torch.tensor(self.text.ids(prompt), dtype=torch.long, device=self.device)
        tokens = self.text(ids)
        return TokenSequence(tokens, torch.ones(len(ids), dtype=torch.bool, device=self.device))

    def encode_camera(self, pose: CameraPose) -> torch.Tensor:
        feats = torch.as_tensor(pose_features(pose, self.num_bands), dtype=self.dtype, device=self.device)
        return self.camera(feats)

    @staticmethod
    def scene_embedding(h_c: torch.Tensor, h_t: TokenSequence) -> TokenSequence:
        tokens = torch.cat([h_c[None, :], h_t.tokens], dim=0)
        return TokenSequence(tokens, torch.ones(tokens.shape[0], dtype=torch.bool, device=tokens.device))

    def class_embeddings(self) -> torch.Tensor:
        """(num_classes, d): mean over each class name's token embeddings (positions included)."""
        emb = self.text(self.class_token_ids)
        return (emb * self.class_pool_weights[..., None].to(emb.dtype)).sum(dim=1)

    def class_embedding(self, class_id: int) -> torch.Tensor:
        return self.class_embeddings()[class_id]

    def encode_box(self, box: Box3D) -> torch.Tensor:
        if self.box is None:
            raise RuntimeError("box encoder disabled for this model")
        feats = torch.as_tensor(box_features(box, self.num_bands, self.coord_scale), dtype=self.dtype,
                                device=self.device)
        return self.box(self.class_embedding(box.class_id), feats)

    def null_box_token(self) -> torch.Tensor:
        return self.null_token

    def encode_boxes_for_view(self, boxes: Sequence[Box3D], pose: CameraPose, max_boxes: int,
                              augment_rate: float = 0.0, rng: np.random.Generator | None = None) -> TokenSequence:
        """Visible boxes (plus sampled invisible ones when augmenting), padded with the null token."""
        chosen = select_boxes_for_view(boxes, pose, augment_rate, rng)
        if len(chosen) > max_boxes:
            raise CapacityError(f"{len(chosen)} boxes selected but max_boxes is {max_boxes}")
        tokens = self.null_token[None, :].repeat(max_boxes, 1)
        mask = torch.zeros(max_boxes, dtype=torch.bool, device=self.device)
        if chosen:
            tokens = tokens.clone()
            tokens[: len(chosen)] = torch.stack([self.encode_box(boxes[i]) for i in chosen])
            mask[: len(chosen)] = True
        return TokenSequence(tokens, mask)

    # -- batched helpers ---------------------------------------------------
    def box_tokens(self, classes: torch.Tensor, corner_feats: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """(..., M) classes, (..., M, F) features, (..., M) mask -> (..., M, d) with null padding."""
        null = self.null_token.expand(*mask.shape, self.d_emb)
        if self.box is None:
            return null
        enc = self.box(self.class_embeddings()[classes], corner_feats)
        return torch.where(mask[..., None], enc, null)


def select_boxes_for_view(boxes: Sequence[Box3D], pose: CameraPose, augment_rate: float = 0.0,
                          rng: np.random.Generator | None = None) -> list[int]:
    """Indices (input order) of boxes passing f_viz, plus each invisible box with prob ``augment_rate``."""
    chosen = []
    for i, b in enumerate(boxes):
        if f_viz(b, pose):
            chosen.append(i)
        elif augment_rate > 0:
            if rng is None:
                raise ValueError("augmentation needs an rng")
            if rng.random() < augment_rate:
                chosen.append(i)
    return chosen
