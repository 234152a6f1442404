"""Denoisers, prompt encoder and adapter layers for the DSR augmenter."""

from __future__ import annotations

import math
import re

import torch
import torch.nn as nn
import torch.nn.functional as F

PROMPT_TEMPLATES = (
    "a photo of a {}",
    "a close-up photo of a {}",
    "a cropped photo of the {}",
    "a good photo of a {}",
)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, key_mask: torch.Tensor | None = None):
    """softmax(q k^T / sqrt(d_k)) v over the last two dimensions.

    ``key_mask`` (``(..., m)`` booleans, True = keep) hides padded keys.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"key width {k.shape[-1]} does not match query width {q.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask[..., None, :], float("-inf"))
    return torch.softmax(logits, dim=-1) @ v


class Adapter(nn.Module):
    """Residual bottleneck ``h + up(act(down(h)))``; identity at initialisation."""

    def __init__(self, width: int, bottleneck: int = 16):
        super().__init__()
        self.width = width
        self.down = nn.Linear(width, bottleneck)
        self.up = nn.Linear(bottleneck, width)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, h):
        if h.shape[-1] != self.width:
            raise ValueError(f"adapter width {self.width} does not match input width {h.shape[-1]}")
        return h + self.up(F.gelu(self.down(h)))


def adapter_forward(h, adapter: Adapter):
    return adapter(h)


class CrossAttention(nn.Module):
    def __init__(self, width: int, cond_width: int, heads: int = 1):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(width)
        self.q = nn.Linear(width, width, bias=False)
        self.k = nn.Linear(cond_width, width, bias=False)
        self.v = nn.Linear(cond_width, width, bias=False)
        self.out = nn.Linear(width, width)

    def forward(self, x, cond, cond_mask=None):
        # x: (B, n, width); cond: (B, m, cond_width)
        B, n, c = x.shape
        h = self.heads
        q = self.q(self.norm(x)).reshape(B, n, h, c // h).transpose(1, 2)
        k = self.k(cond).reshape(B, -1, h, c // h).transpose(1, 2)
        v = self.v(cond).reshape(B, -1, h, c // h).transpose(1, 2)
        mask = None if cond_mask is None else cond_mask[:, None, :]
        out = attention(q, k, v, mask).transpose(1, 2).reshape(B, n, c)
        return x + self.out(out)


class CrossAttentionBlock(nn.Module):
    """Cross-attention over conditioning tokens followed by an adapter."""

    def __init__(self, width, cond_width, adapter_width=16, heads=1):
        super().__init__()
        self.attn = CrossAttention(width, cond_width, heads)
        self.adapter = Adapter(width, adapter_width)

    def forward(self, x, cond, cond_mask=None, use_adapter=True):
        spatial = x.ndim == 4
        if spatial:
            B, C, H, W = x.shape
            x = x.flatten(2).transpose(1, 2)
        x = self.attn(x, cond, cond_mask)
        if use_adapter:
            x = self.adapter(x)
        if spatial:
            x = x.transpose(1, 2).reshape(B, C, H, W)
        return x


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, temb_dim, groups=8):
        super().__init__()
        self.norm1 = nn.GroupNorm(math.gcd(groups, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, c_out)
        self.norm2 = nn.GroupNorm(math.gcd(groups, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class UNetDenoiser(nn.Module):
    """Small U-shaped noise predictor with one cross-attention block per resolution."""

    def __init__(self, in_channels=3, widths=(32, 64), cond_width=64, adapter_width=16,
                 time_dim=64, image_size=32, heads=1):
        super().__init__()
        self.image_size = image_size
        self.in_channels = in_channels
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim * 2), nn.SiLU(),
                                      nn.Linear(time_dim * 2, time_dim * 2))
        tdim = time_dim * 2
        # pooled prompt embedding joins the timestep embedding (global conditioning path)
        self.cond_mlp = nn.Sequential(nn.Linear(cond_width, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        c = widths[0]
        skips = []
        for w in widths:
            self.down_blocks.append(ResBlock(c, w, tdim))
            self.down_attn.append(CrossAttentionBlock(w, cond_width, adapter_width, heads))
            skips.append(w)
            c = w
        self.mid = ResBlock(c, c, tdim)
        self.mid_attn = CrossAttentionBlock(c, cond_width, adapter_width, heads)
        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        for w in reversed(skips):
            self.up_blocks.append(ResBlock(c + w, w, tdim))
            self.up_attn.append(CrossAttentionBlock(w, cond_width, adapter_width, heads))
            c = w
        self.out_norm = nn.GroupNorm(math.gcd(8, c), c)
        self.out = nn.Conv2d(c, in_channels, 3, padding=1)

    @property
    def sample_shape(self):
        return (self.in_channels, self.image_size, self.image_size)

    def forward(self, x, t, cond, cond_mask=None, use_adapters=True):
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(x.dtype))
        if cond_mask is None:
            pooled = cond.mean(1)
        else:
            pooled = pool_tokens(cond, cond_mask)
        temb = temb + self.cond_mlp(pooled)
        h = self.stem(x)
        skips = []
        for k, (block, attn) in enumerate(zip(self.down_blocks, self.down_attn)):
            if k > 0:
                h = F.avg_pool2d(h, 2)
            h = attn(block(h, temb), cond, cond_mask, use_adapters)
            skips.append(h)
        h = F.avg_pool2d(h, 2)
        h = self.mid_attn(self.mid(h, temb), cond, cond_mask, use_adapters)
        for block, attn in zip(self.up_blocks, self.up_attn):
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = attn(block(torch.cat([h, skip], dim=1), temb), cond, cond_mask, use_adapters)
        return self.out(F.silu(self.out_norm(h)))


class MLPDenoiser(nn.Module):
    """Noise predictor for flat low-dimensional samples (toy problems)."""

    def __init__(self, dim=2, hidden=128, cond_width=64, adapter_width=16, time_dim=32, tokens=4):
        super().__init__()
        self.dim = dim
        self.time_dim = time_dim
        self.tokens = tokens
        self.hidden = hidden
        self.inp = nn.Linear(dim + time_dim, hidden * tokens)
        self.attn = CrossAttentionBlock(hidden, cond_width, adapter_width)
        self.body = nn.Sequential(nn.SiLU(), nn.Linear(hidden * tokens, hidden), nn.SiLU(),
                                  nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, dim))

    @property
    def sample_shape(self):
        return (self.dim,)

    def forward(self, x, t, cond, cond_mask=None, use_adapters=True):
        temb = timestep_embedding(t, self.time_dim).to(x.dtype)
        h = self.inp(torch.cat([x, temb], dim=1)).reshape(len(x), self.tokens, self.hidden)
        h = self.attn(h, cond, cond_mask, use_adapters)
        return self.body(h.flatten(1))


class PromptTokenizer:
    """Whitespace tokenizer over a fixed vocabulary built from templates and class names."""

    PAD = "<pad>"

    def __init__(self, vocab: list[str]):
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}

    @staticmethod
    def split(text: str) -> list[str]:
        return re.findall(r"[a-z0-9\-']+", text.lower())

    @classmethod
    def build(cls, class_names, templates=PROMPT_TEMPLATES) -> "PromptTokenizer":
        words = set()
        for t in templates:
            words.update(cls.split(t.format("")))
        for name in class_names:
            words.update(cls.split(name))
        return cls([cls.PAD] + sorted(words))

    def encode(self, texts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        ids = []
        for text in texts:
            toks = self.split(text)
            unknown = [w for w in toks if w not in self.index]
            if unknown:
                raise KeyError(f"words not in tokenizer vocabulary: {unknown}")
            ids.append([self.index[w] for w in toks])
        L = max(len(x) for x in ids)
        out = torch.zeros(len(ids), L, dtype=torch.long)
        mask = torch.zeros(len(ids), L, dtype=torch.bool)
        for i, x in enumerate(ids):
            out[i, : len(x)] = torch.tensor(x)
            mask[i, : len(x)] = True
        return out, mask


class TextEncoder(nn.Module):
    """Token embedding, learned positions and one self-attention layer."""

    def __init__(self, vocab_size: int, width: int = 64, max_len: int = 16):
        super().__init__()
        self.width = width
        self.embed = nn.Embedding(vocab_size, width)
        self.pos = nn.Parameter(torch.randn(max_len, width) * 0.02)
        self.norm = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.mlp = nn.Sequential(nn.LayerNorm(width), nn.Linear(width, 2 * width), nn.GELU(),
                                 nn.Linear(2 * width, width))

    def forward(self, ids, mask):
        x = self.embed(ids) + self.pos[: ids.shape[1]]
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=-1)
        x = x + self.proj(attention(q, k, v, mask))
        return x + self.mlp(x)


class LabelEncoder(nn.Module):
    """Prompt encoder followed by an adapter: tokens = adapter(encoder(prompt))."""

    def __init__(self, class_names, width=64, adapter_width=16, templates=PROMPT_TEMPLATES):
        super().__init__()
        self.templates = tuple(templates)
        self.tokenizer = PromptTokenizer.build(class_names, self.templates)
        self.encoder = TextEncoder(len(self.tokenizer.vocab), width)
        self.adapter = Adapter(width, adapter_width)
        self.width = width

    def prompts(self, class_names) -> list[str]:
        return [t.format(c) for c in class_names for t in self.templates]

    def forward(self, class_names, use_adapter=True):
        """Encode every (class, template) pair.

        Returns tokens ``(n_classes, P, L, width)`` and mask ``(n_classes, P, L)``.
        """
        for c in class_names:
            if not str(c).strip():
                raise ValueError("empty class name")
        ids, mask = self.tokenizer.encode(self.prompts(class_names))
        tokens = self.encoder(ids, mask)
        if use_adapter:
            tokens = self.adapter(tokens)
        P = len(self.templates)
        return tokens.reshape(len(class_names), P, *tokens.shape[1:]), mask.reshape(len(class_names), P, -1)


def pool_tokens(tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask.to(tokens.dtype)[..., None]
    return (tokens * m).sum(-2) / m.sum(-2)


def encode_labels(class_names, encoder: LabelEncoder, use_adapter=True):
    return encoder(class_names, use_adapter=use_adapter)


def adapter_parameters(module: nn.Module):
    return [p for n, p in module.named_parameters() if ".adapter." in f".{n}" or n.startswith("adapter.")]
