"""Multi-view denoising UNet.

Each transformer block runs self-attention -> cross-attention over the scene/box tokens ->
cross-view attention to neighbouring cameras -> feed-forward. The BEV branch adds its
zero-initialised features onto the skip connections and the mid block.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import ConditionEncoder, CrossAttention, MapEncoder, TextVocabulary, TokenSequence, norm, zero_module

VIEW_MODES = ("one", "two", "all")


class ShapeError(ValueError):
    """Inconsistent tensor shapes or masks handed to the model."""


@dataclass
class UNetConfig:
    base_channels: int = 64
    channel_mult: tuple[int, ...] = (1, 2, 4)
    attn_levels: tuple[int, ...] = (1, 2)
    num_heads: int = 4
    d_emb: int = 64
    image_h: int = 48
    image_w: int = 80
    num_views: int = 3
    attended_views: str = "two"
    num_bands: int = 4
    coord_scale: float = 24.0
    max_boxes: int = 16
    max_text_len: int = 16
    map_channels: int = 3
    map_grid: tuple[int, int] = (64, 64)
    use_box_encoder: bool = True
    use_fviz: bool = True
    use_cross_view: bool = True
    use_map: bool = True

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        self.attn_levels = tuple(self.attn_levels)
        self.map_grid = tuple(self.map_grid)
        levels = len(self.channel_mult)
        div = 2 ** (levels - 1)
        if self.image_h % div or self.image_w % div:
            raise ValueError(f"image size {self.image_h}x{self.image_w} not divisible by {div}")
        if self.d_emb % self.num_heads:
            raise ValueError("d_emb must be divisible by num_heads")
        if self.attended_views not in VIEW_MODES:
            raise ValueError(f"attended_views must be one of {VIEW_MODES}")
        if any(not 0 <= a < levels for a in self.attn_levels):
            raise ValueError("attention level out of range")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mult]

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("channel_mult", "attn_levels", "map_grid"):
            d[k] = list(d[k])
        return d


def neighbors(view_index: int, num_views: int, mode: str = "two") -> tuple[int, ...]:
    """Indices of the views that ``view_index`` attends to on a circular rig."""
    if not 0 <= view_index < num_views or num_views < 2:
        raise ValueError(f"bad view index {view_index} for {num_views} views")
    left, right = (view_index - 1) % num_views, (view_index + 1) % num_views
    if mode == "two":
        return (left, right)
    if mode == "one":
        return (left,)
    if mode == "all":
        return tuple(i for i in range(num_views) if i != view_index)
    raise ValueError(f"unknown mode {mode!r}")


def neighbor_offsets(num_views: int, mode: str) -> tuple[int, ...]:
    """Relative view offsets equivalent to ``neighbors``; one output projection per offset."""
    if mode == "two":
        return (-1, 1)
    if mode == "one":
        return (-1,)
    return tuple(range(1, num_views))


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) for (..., n, d) queries and (..., m, d) keys."""
    return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)


class CrossViewAttention(nn.Module):
    """h_out = h + sum over neighbours of proj_o(softmax(Q_t K_o^T / sqrt d) V_o).

    Q/K/V projections are shared; each neighbour direction has its own zero-initialised
    output projection, so a fresh module is an exact identity.
    """

    def __init__(self, dim: int, heads: int, num_views: int, mode: str = "two"):
        super().__init__()
        self.heads = heads
        self.num_views = num_views
        self.mode = mode
        self.offsets = neighbor_offsets(num_views, mode)
        self.norm = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.ModuleList([zero_module(nn.Linear(dim, dim)) for _ in self.offsets])

    def neighbor_states(self, h: torch.Tensor, offset: int) -> torch.Tensor:
        """View v receives view (v + offset) mod V; h is (B, V, N, C)."""
        return torch.roll(h, shifts=-offset, dims=1)

    def forward(self, h_target: torch.Tensor) -> torch.Tensor:
        """(B, V, N, C) -> (B, V, N, C)."""
        if h_target.dim() != 4 or h_target.shape[1] != self.num_views:
            raise ShapeError(f"expected (B, {self.num_views}, N, C), got {tuple(h_target.shape)}")
        b, v, n, c = h_target.shape
        x = self.norm(h_target)
        nh = self.heads
        q = self.to_q(x).view(b, v, n, nh, -1).transpose(2, 3)
        k_all = self.to_k(x).view(b, v, n, nh, -1).transpose(2, 3)
        v_all = self.to_v(x).view(b, v, n, nh, -1).transpose(2, 3)
        out = h_target
        for offset, proj in zip(self.offsets, self.to_out):
            k = self.neighbor_states(k_all, offset)
            val = self.neighbor_states(v_all, offset)
            # 4-D inputs keep SDPA on its fused CPU kernel
            att = F.scaled_dot_product_attention(q.flatten(0, 1), k.flatten(0, 1), val.flatten(0, 1))
            out = out + proj(att.view(b, v, nh, n, -1).transpose(2, 3).reshape(b, v, n, c))
        return out


def cross_view_attention(h_target: torch.Tensor, neighbor_states: Sequence[torch.Tensor],
                         projections: Sequence[nn.Module] | None = None, heads: int = 1) -> torch.Tensor:
    """Functional form: queries from ``h_target`` (N, C), keys/values from each neighbour (N, C).

    Without ``projections`` every attention result is dropped (the zero-init state), so the
    function returns ``h_target`` unchanged.
    """
    out = h_target
    n, c = h_target.shape
    for i, nb in enumerate(neighbor_states):
        if nb.shape != h_target.shape:
            raise ShapeError(f"neighbour state {tuple(nb.shape)} does not match target {tuple(h_target.shape)}")
        if projections is None:
            continue
        q = h_target.view(n, heads, -1).transpose(0, 1)
        k = nb.view(n, heads, -1).transpose(0, 1)
        att = (attention_weights(q, k) @ k).transpose(0, 1).reshape(n, c)
        out = out + projections[i](att)
    return out


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int):
        super().__init__()
        self.norm1 = norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, 2 * c_out)
        self.norm2 = norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.temb(F.silu(temb))[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, -1).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.to_out(out.transpose(1, 2).reshape(b, n, c))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, d_emb: int, heads: int, num_views: int, view_mode: str):
        super().__init__()
        self.num_views = num_views
        self.norm_in = norm(dim)
        self.proj_in = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = CrossAttention(dim, d_emb, heads)
        self.cross_view = CrossViewAttention(dim, heads, num_views, view_mode)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.proj_out = nn.Linear(dim, dim)

    def forward(self, x, ctx, ctx_mask, cross_view: bool = True):
        bv, c, hh, ww = x.shape
        h = self.proj_in(self.norm_in(x).flatten(2).transpose(1, 2))
        h = h + self.self_attn(self.norm1(h))
        h = h + self.cross_attn(self.norm2(h), ctx, ctx_mask)
        if cross_view:
            h = self.cross_view(h.view(bv // self.num_views, self.num_views, *h.shape[1:])).view_as(h)
        h = h + self.ff(self.norm3(h))
        h = self.proj_out(h)
        return x + h.transpose(1, 2).reshape(bv, c, hh, ww)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.channels
        c0 = chans[0]
        self.temb_dim = 4 * c0
        self.time_mlp = nn.Sequential(nn.Linear(c0, self.temb_dim), nn.SiLU(), nn.Linear(self.temb_dim, self.temb_dim))
        self.conv_in = nn.Conv2d(3, c0, 3, padding=1)

        def attn(level, ch):
            if level in cfg.attn_levels:
                return TransformerBlock(ch, cfg.d_emb, cfg.num_heads, cfg.num_views, cfg.attended_views)
            return None

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = c0
        for i, ch in enumerate(chans):
            self.down_res.append(ResBlock(prev, ch, self.temb_dim))
            self.down_attn.append(attn(i, ch) or nn.Identity())
            self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1) if i < len(chans) - 1 else nn.Identity())
            prev = ch
        self.mid_res1 = ResBlock(prev, prev, self.temb_dim)
        self.mid_attn = TransformerBlock(prev, cfg.d_emb, cfg.num_heads, cfg.num_views, cfg.attended_views)
        self.mid_res2 = ResBlock(prev, prev, self.temb_dim)
        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(chans))):
            ch = chans[i]
            self.up_res.append(ResBlock(prev + ch, ch, self.temb_dim))
            self.up_attn.append(attn(i, ch) or nn.Identity())
            self.upsample.append(nn.Conv2d(ch, chans[i - 1], 3, padding=1) if i > 0 else nn.Identity())
            prev = chans[i - 1] if i > 0 else ch
        self.norm_out = norm(c0)
        self.conv_out = nn.Conv2d(c0, 3, 3, padding=1)

    def _attn(self, block, h, ctx, ctx_mask, cross_view):
        if isinstance(block, TransformerBlock):
            return block(h, ctx, ctx_mask, cross_view)
        return h

    def forward(self, x, t, ctx, ctx_mask, map_feats: list[torch.Tensor] | None = None, cross_view: bool = True):
        """x (B*V, 3, H, W), t (B*V,), ctx (B*V, S, d), ctx_mask (B*V, S)."""
        temb = self.time_mlp(timestep_embedding(t, self.cfg.channels[0]).to(x.dtype))
        h = self.conv_in(x)
        skips = []
        for i, (res, att, down) in enumerate(zip(self.down_res, self.down_attn, self.downsample)):
            h = self._attn(att, res(h, temb), ctx, ctx_mask, cross_view)
            skip = h if map_feats is None else h + map_feats[i]
            skips.append(skip)
            h = down(h)
        h = self.mid_res1(h, temb)
        h = self.mid_attn(h, ctx, ctx_mask, cross_view)
        h = self.mid_res2(h, temb)
        if map_feats is not None:
            h = h + map_feats[-1]
        for res, att, up in zip(self.up_res, self.up_attn, self.upsample):
            h = res(torch.cat([h, skips.pop()], dim=1), temb)
            h = self._attn(att, h, ctx, ctx_mask, cross_view)
            if not isinstance(up, nn.Identity):
                h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


@dataclass
class Conditions:
    """Batched conditions for B scenes of V views.

    text_ids (B, L); text_mask (B, L); cam_feats (B, V, Fc); box_classes (B, V, M);
    box_feats (B, V, M, Fb); box_mask (B, V, M); bev (B, Cm, gw, gh);
    scene_null (B,) -> zero the scene tokens; box_null (B,) -> all-null box tokens, attended.
    """

    text_ids: torch.Tensor
    text_mask: torch.Tensor
    cam_feats: torch.Tensor
    box_classes: torch.Tensor
    box_feats: torch.Tensor
    box_mask: torch.Tensor
    bev: torch.Tensor
    scene_null: torch.Tensor
    box_null: torch.Tensor

    @property
    def batch_size(self) -> int:
        return self.text_ids.shape[0]

    @property
    def num_views(self) -> int:
        return self.cam_feats.shape[1]

    def fields(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def replace(self, **kw) -> "Conditions":
        d = self.fields()
        d.update(kw)
        return Conditions(**d)

    def index(self, idx) -> "Conditions":
        return Conditions(**{k: v[idx] for k, v in self.fields().items()})

    @staticmethod
    def cat(items: Sequence["Conditions"]) -> "Conditions":
        keys = items[0].fields().keys()
        return Conditions(**{k: torch.cat([getattr(c, k) for c in items], dim=0) for k in keys})

    def null(self, map_null_mode: str = "zero_map") -> "Conditions":
        """Unconditional counterpart: zero scene tokens, all-null boxes, zero or shared map."""
        b = self.batch_size
        bev = torch.zeros_like(self.bev) if map_null_mode == "zero_map" else self.bev
        if map_null_mode not in ("zero_map", "shared_map"):
            raise ValueError(f"unknown map_null_mode {map_null_mode!r}")
        return self.replace(
            scene_null=torch.ones(b, dtype=torch.bool, device=self.bev.device),
            box_null=torch.ones(b, dtype=torch.bool, device=self.bev.device),
            box_mask=torch.zeros_like(self.box_mask),
            bev=bev,
        )


class MultiViewDiffusionModel(nn.Module):
    """Condition encoders + multi-view UNet + BEV map branch, predicting per-view noise."""

    def __init__(self, cfg: UNetConfig, vocab: TextVocabulary | None = None):
        super().__init__()
        self.cfg = cfg
        self.encoders = ConditionEncoder(cfg.d_emb, cfg.num_bands, cfg.coord_scale, cfg.max_text_len, vocab,
                                         use_box_encoder=cfg.use_box_encoder)
        self.unet = UNet(cfg)
        self.map_encoder = (
            MapEncoder(cfg.map_channels, cfg.channels, (cfg.image_h, cfg.image_w), cfg.d_emb, cfg.num_heads)
            if cfg.use_map else None
        )

    @property
    def vocab(self) -> TextVocabulary:
        return self.encoders.text.vocab

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Named groups used by the ablation harness and gradient checks."""
        groups = {
            "text": list(self.encoders.text.parameters()),
            "camera": list(self.encoders.camera.parameters()),
            "box_encoder": list(self.encoders.box.parameters()) if self.encoders.box is not None else [],
            "null_token": [self.encoders.null_token],
            "cross_view": [p for n, p in self.unet.named_parameters() if ".cross_view." in n],
            "map_branch": list(self.map_encoder.parameters()) if self.map_encoder is not None else [],
        }
        seen = {id(p) for ps in groups.values() for p in ps}
        groups["unet_base"] = [p for p in self.unet.parameters() if id(p) not in seen]
        return groups

    def context(self, cond: Conditions) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-view cross-attention tokens [h_c, h_t, h_b] (B*V, 1+L+M, d) and their mask."""
        b, v = cond.batch_size, cond.num_views
        enc = self.encoders
        dt = enc.dtype
        h_t = enc.text(cond.text_ids)  # (B, L, d)
        h_c = enc.camera(cond.cam_feats.to(dt))  # (B, V, d)
        keep = (~cond.scene_null).to(dt)
        h_t = h_t * keep[:, None, None]
        h_c = h_c * keep[:, None, None]
        h_s = torch.cat([h_c[:, :, None, :], h_t[:, None].expand(b, v, *h_t.shape[1:])], dim=2)
        scene_mask = torch.cat(
            [torch.ones(b, v, 1, dtype=torch.bool, device=h_s.device), cond.text_mask[:, None].expand(b, v, -1)], dim=2
        )
        box_real = cond.box_mask & ~cond.box_null[:, None, None]
        h_b = enc.box_tokens(cond.box_classes, cond.box_feats.to(dt), box_real)
        box_attend = torch.where(cond.box_null[:, None, None], torch.ones_like(cond.box_mask), cond.box_mask)
        ctx = torch.cat([h_s, h_b], dim=2).reshape(b * v, -1, enc.d_emb)
        mask = torch.cat([scene_mask, box_attend], dim=2).reshape(b * v, -1)
        return ctx, mask

    def map_encoder_forward(self, bev: torch.Tensor, ctx: torch.Tensor, ctx_mask: torch.Tensor | None) -> list[torch.Tensor]:
        if self.map_encoder is None:
            raise RuntimeError("map branch disabled for this model")
        if bev.shape[1] != self.cfg.map_channels or tuple(bev.shape[2:]) != self.cfg.map_grid:
            raise ShapeError(f"map tensor {tuple(bev.shape)} does not match configured "
                             f"({self.cfg.map_channels}, {self.cfg.map_grid})")
        return self.map_encoder(bev, ctx, ctx_mask)

    def check(self, x: torch.Tensor, t: torch.Tensor, cond: Conditions) -> None:
        cfg = self.cfg
        if x.dim() != 5 or x.shape[2:] != (3, cfg.image_h, cfg.image_w):
            raise ShapeError(f"latents must be (B, V, 3, {cfg.image_h}, {cfg.image_w}), got {tuple(x.shape)}")
        b, v = x.shape[:2]
        if v != cfg.num_views:
            raise ShapeError(f"model built for {cfg.num_views} views, batch has {v}")
        if t.shape != (b,):
            raise ShapeError(f"expected one timestep per scene, got shape {tuple(t.shape)}")
        if cond.batch_size != b or cond.num_views != v:
            raise ShapeError("conditions are not aligned with the latent batch")
        if cond.box_mask.shape != cond.box_classes.shape or cond.box_feats.shape[:3] != cond.box_mask.shape:
            raise ShapeError("box tensors and mask disagree")
        if cond.text_mask.shape != cond.text_ids.shape:
            raise ShapeError("text mask and ids disagree")

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: Conditions,
                cross_view: bool | None = None, use_map: bool | None = None) -> torch.Tensor:
        """Predict noise for latents x (B, V, 3, H, W) at per-scene timesteps t (B,)."""
        self.check(x, t, cond)
        cross_view = self.cfg.use_cross_view if cross_view is None else cross_view
        use_map = (self.map_encoder is not None) if use_map is None else use_map
        b, v = x.shape[:2]
        ctx, mask = self.context(cond)
        map_feats = None
        if use_map:
            bev = cond.bev.to(ctx.dtype).repeat_interleave(v, dim=0)
            map_feats = self.map_encoder_forward(bev, ctx, mask)
        out = self.unet(x.reshape(b * v, *x.shape[2:]), t.repeat_interleave(v), ctx, mask, map_feats, cross_view)
        return out.view_as(x)
