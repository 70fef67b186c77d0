"""Channel-wise conditional prompts: grouped features, context net, prompt assembly."""

from __future__ import annotations

import torch
import torch.nn as nn

from .encoders import FEATURE_DIM

CONTEXT_HIDDEN = FEATURE_DIM // 16  # 32


class GroupProjector(nn.Module):
    """Split feature maps into T contiguous channel groups and project each to d.

    The flatten of one group has (channels/T)*h*w values, so a single shared
    bias-free linear map brings every group to the common d=512 width.
    """

    def __init__(self, num_groups: int, channels: int = FEATURE_DIM, spatial: int = 4):
        super().__init__()
        if channels % num_groups != 0:
            raise ValueError(f"T={num_groups} does not divide {channels} channels")
        self.num_groups = num_groups
        self.channels = channels
        self.spatial = spatial
        group_size = (channels // num_groups) * spatial * spatial
        self.proj = nn.Linear(group_size, FEATURE_DIM, bias=False)

    def forward(self, feature_maps: torch.Tensor) -> torch.Tensor:
        """(B, C, h, w) -> (B, T, d)."""
        b, c, h, w = feature_maps.shape
        if c != self.channels or h != self.spatial or w != self.spatial:
            raise ValueError(
                f"expected (B, {self.channels}, {self.spatial}, {self.spatial}) maps, "
                f"got {tuple(feature_maps.shape)}"
            )
        grouped = feature_maps.reshape(b, self.num_groups, -1)
        return self.proj(grouped)


class ContextNet(nn.Module):
    """One-hidden-layer MLP mapping each grouped feature vector to a conditional token."""

    def __init__(self, dim: int = FEATURE_DIM, hidden: int = CONTEXT_HIDDEN):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, grouped: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(grouped)))


class PromptBuilder(nn.Module):
    """Learnable context tokens plus per-instance conditional tokens and class tokens.

    The shared tokens l are trainable and image independent; the conditional
    tokens l' come from the context net applied to the grouped features. Each
    class prompt is [l_1+l'_1, ..., l_T+l'_T, class tokens] fed to the text
    encoder.
    """

    def __init__(self, class_names, text_encoder, num_groups: int, dim: int = FEATURE_DIM):
        super().__init__()
        self.class_names = list(class_names)
        self.num_groups = num_groups
        self.context_net = ContextNet(dim=dim)
        self.context_tokens = nn.Parameter(torch.randn(num_groups, dim) * 0.02)
        class_tokens = torch.stack(
            [text_encoder.token_embeddings(name, dtype=torch.float32).mean(dim=0)
             for name in self.class_names]
        )
        # class-name embeddings stay fixed; only l and the context net train
        self.register_buffer("class_tokens", class_tokens)

    def conditional_tokens(self, grouped: torch.Tensor) -> torch.Tensor:
        return self.context_net(grouped)

    def assemble(self, grouped: torch.Tensor, text_encoder=None) -> torch.Tensor:
        """(B, T, d) grouped features -> (B, K, T+1, d) prompt token sequences."""
        if grouped.shape[-2] != self.num_groups:
            raise ValueError(f"expected {self.num_groups} groups, got {grouped.shape[-2]}")
        conditional = self.conditional_tokens(grouped)
        context = self.context_tokens.to(grouped.dtype) + conditional  # (B, T, d)
        k = len(self.class_names)
        b = grouped.shape[0]
        context = context.unsqueeze(1).expand(b, k, self.num_groups, context.shape[-1])
        class_tok = self.class_tokens.to(grouped.dtype).unsqueeze(0).unsqueeze(2)
        class_tok = class_tok.expand(b, k, 1, context.shape[-1])
        prompts = torch.cat([context, class_tok], dim=2)
        if text_encoder is not None and prompts.shape[2] > text_encoder.context_length:
            raise ValueError(
                f"prompt length {prompts.shape[2]} exceeds encoder context "
                f"length {text_encoder.context_length}"
            )
        return prompts

    def class_features(self, grouped: torch.Tensor, text_encoder) -> torch.Tensor:
        """(B, T, d) -> (B, K, d) per-instance class features from the frozen encoder."""
        prompts = self.assemble(grouped, text_encoder)
        return text_encoder(prompts)
