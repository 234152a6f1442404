"""Few-shot classifier with channel-attention prototypes and external-set reference.

Shapes used throughout: feature maps are ``(B, C, H, W)``, prototypes
``(N, C, H, W)``, representation scores and channel weights ``(N, C)``.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .metric_losses import multi_similarity_loss, cosine_similarity_matrix

PROB_FLOOR = 1e-12
_SOFTPLUS_INV_ONE = math.log(math.e - 1.0)


class ResidualStage(nn.Module):
    def __init__(self, c_in, c_out, pool=True):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.skip = nn.Sequential(nn.Conv2d(c_in, c_out, 1, bias=False), nn.BatchNorm2d(c_out))
        self.pool = nn.MaxPool2d(2) if pool else nn.Identity()

    def forward(self, x):
        out = F.leaky_relu(self.bn1(self.conv1(x)), 0.1)
        out = self.bn2(self.conv2(out))
        return self.pool(F.leaky_relu(out + self.skip(x), 0.1))


class Backbone(nn.Module):
    """Four residual stages; the first ``pooled_stages`` halve the resolution."""

    def __init__(self, in_channels=3, widths=(16, 32, 64, 64), pooled_stages=3, image_size=32,
                 out_scale=1.0):
        super().__init__()
        self.out_scale = out_scale
        stages, c = [], in_channels
        for k, w in enumerate(widths):
            stages.append(ResidualStage(c, w, pool=k < pooled_stages))
            c = w
        self.stages = nn.Sequential(*stages)
        self.image_size = image_size
        self.out_channels = c
        self.out_size = image_size // (2 ** min(pooled_stages, len(widths)))

    @property
    def feature_shape(self):
        return (self.out_channels, self.out_size, self.out_size)

    def forward(self, x):
        out = self.stages(x)
        return out * self.out_scale if self.out_scale != 1.0 else out


def extract_features(images: torch.Tensor, backbone: nn.Module) -> torch.Tensor:
    """Run ``backbone`` on a ``(B, 3, S, S)`` batch, checking the resolution."""
    size = getattr(backbone, "image_size", None)
    if size is not None and tuple(images.shape[-2:]) != (size, size):
        raise ValueError(
            f"image resolution {tuple(images.shape[-2:])} does not match backbone input {size}x{size}"
        )
    return backbone(images)


def compute_prototypes(support: torch.Tensor, K: int) -> torch.Tensor:
    """Per-class mean of support maps.

    ``support`` is either ``(N, K, C, H, W)`` or ``(N*K, C, H, W)`` ordered
    class-major (all K shots of class 0 first).
    """
    if support.ndim == 4:
        if support.shape[0] % K:
            raise ValueError(f"{support.shape[0]} support maps cannot be split into groups of K={K}")
        support = support.reshape(-1, K, *support.shape[1:])
    if support.ndim != 5 or support.shape[1] != K:
        raise ValueError(f"expected exactly K={K} maps per class, got shape {tuple(support.shape)}")
    return support.mean(dim=1)


def intra_scores(prototypes: torch.Tensor) -> torch.Tensor:
    """Mean squared deviation of each channel from the prototype's channel-mean map."""
    mean_map = prototypes.mean(dim=1, keepdim=True)
    return (prototypes - mean_map).pow(2).mean(dim=(2, 3))


def inter_scores(prototypes: torch.Tensor) -> torch.Tensor:
    """For each channel, the smallest mean squared deviation from another class's mean map."""
    n = prototypes.shape[0]
    if n < 2:
        raise ValueError("inter score undefined for a single class")
    mean_maps = prototypes.mean(dim=1)  # (N, H, W)
    # d[i, j, c] = mean_hw (F_i,c - M_j)^2
    d = (prototypes[:, None] - mean_maps[None, :, None]).pow(2).mean(dim=(3, 4))
    eye = torch.eye(n, dtype=torch.bool, device=prototypes.device)
    d = d.masked_fill(eye[:, :, None], float("inf"))
    return d.min(dim=1).values


class AttentionHead(nn.Module):
    """Two-layer FC head mapping C scores to C non-negative channel weights.

    Initialised so the output is exactly one for every input.
    """

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(1, channels // 4)
        self.channels = channels
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.reset_uniform()

    def reset_uniform(self):
        nn.init.zeros_(self.fc2.weight)
        nn.init.constant_(self.fc2.bias, _SOFTPLUS_INV_ONE)

    def forward(self, scores):
        if scores.shape[-1] != self.channels:
            raise ValueError(f"head expects width {self.channels}, got {scores.shape[-1]}")
        return F.softplus(self.fc2(F.relu(self.fc1(scores))))


class ConstantHead(nn.Module):
    """Head that ignores its input and returns a fixed vector (ones by default)."""

    def __init__(self, channels: int, value: float = 1.0):
        super().__init__()
        self.channels = channels
        self.register_buffer("value", torch.full((channels,), float(value)))

    def forward(self, scores):
        if scores.shape[-1] != self.channels:
            raise ValueError(f"head expects width {self.channels}, got {scores.shape[-1]}")
        return self.value.to(scores.dtype).expand_as(scores)


def channel_weights(intra, inter, f_intra: nn.Module, f_inter: nn.Module) -> torch.Tensor:
    return 0.5 * (f_intra(intra) + f_inter(inter))


def weight_features(w: torch.Tensor, prototypes: torch.Tensor, queries: torch.Tensor):
    """Apply class-wise channel weights.

    Returns ``G_S`` of shape ``(N, C, H, W)`` and ``G_Q`` of shape
    ``(N, Q, C, H, W)`` where ``G_Q[i, q]`` is query ``q`` weighted with class
    ``i``'s channel vector.
    """
    if w.shape != prototypes.shape[:2] or queries.shape[1:] != prototypes.shape[1:]:
        raise ValueError(
            f"shape mismatch: w {tuple(w.shape)}, prototypes {tuple(prototypes.shape)}, "
            f"queries {tuple(queries.shape)}"
        )
    wb = w[:, :, None, None]
    return wb * prototypes, wb[:, None] * queries[None]


def episode_distances(g_s: torch.Tensor, g_q: torch.Tensor) -> torch.Tensor:
    """Mean squared Euclidean distance, returned as ``(Q, N)``."""
    return (g_q - g_s[:, None]).pow(2).mean(dim=(2, 3, 4)).T


def classify(g_s: torch.Tensor, g_q: torch.Tensor) -> torch.Tensor:
    """Posterior over the N classes for every query, ``(Q, N)``."""
    d = episode_distances(g_s, g_q)
    if not torch.isfinite(d).all():
        raise FloatingPointError("non-finite distance in classify")
    return torch.softmax(-d, dim=1)


def pooled_embeddings(maps: torch.Tensor) -> torch.Tensor:
    """Global-average-pool ``(B, C, H, W)`` maps and L2-normalise them."""
    return F.normalize(maps.mean(dim=(2, 3)), dim=1, eps=1e-12)


def skr_loss(support_maps, support_labels, external_maps, external_labels, mining=False):
    maps = torch.cat([support_maps, external_maps]) if len(external_maps) else support_maps
    labels = torch.cat([torch.as_tensor(support_labels), torch.as_tensor(external_labels)])
    z = pooled_embeddings(maps)
    return multi_similarity_loss(cosine_similarity_matrix(z), labels.to(z.device), mining=mining)


def classification_loss(
    probs, query_labels, support_maps=None, support_labels=None,
    external_maps=None, external_labels=None, beta: float = 0.0,
):
    """Episodic cross-entropy plus ``beta`` times the reference MS loss.

    Returns ``(total, cross_entropy, skr)``; ``skr`` is ``None`` when
    ``beta == 0``.
    """
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    query_labels = torch.as_tensor(query_labels, device=probs.device)
    true_p = probs.gather(1, query_labels[:, None]).squeeze(1)
    ce = -torch.log(true_p.clamp_min(PROB_FLOOR)).mean()
    if beta == 0:
        return ce, ce, None
    if external_maps is None:
        external_maps = support_maps.new_zeros((0, *support_maps.shape[1:]))
        external_labels = torch.zeros(0, dtype=torch.long)
    skr = skr_loss(support_maps, support_labels, external_maps, external_labels)
    return ce + beta * skr, ce, skr


class SKRClassifier(nn.Module):
    """Backbone plus the intra/inter attention heads."""

    def __init__(self, backbone: nn.Module, channels: int | None = None, hidden: int | None = None):
        super().__init__()
        self.backbone = backbone
        c = channels or backbone.out_channels
        self.f_intra = AttentionHead(c, hidden)
        self.f_inter = AttentionHead(c, hidden)

    def head_parameters(self):
        return list(self.f_intra.parameters()) + list(self.f_inter.parameters())

    def features(self, images):
        return extract_features(images, self.backbone)

    def attend(self, prototypes, queries):
        intra = intra_scores(prototypes)
        inter = inter_scores(prototypes)
        w = channel_weights(intra, inter, self.f_intra, self.f_inter)
        return weight_features(w, prototypes, queries)

    def posterior_from_maps(self, support_maps, query_maps, K):
        protos = compute_prototypes(support_maps, K)
        g_s, g_q = self.attend(protos, query_maps)
        return classify(g_s, g_q)

    def forward(self, support, query, K):
        feats = self.features(torch.cat([support, query]))
        return self.posterior_from_maps(feats[: len(support)], feats[len(support):], K)


def protonet_posterior(support_maps, query_maps, K):
    """Plain prototype classifier with the same distance, for reference."""
    protos = compute_prototypes(support_maps, K)
    d = (query_maps[:, None] - protos[None]).pow(2).mean(dim=(2, 3, 4))
    return torch.softmax(-d, dim=1)
