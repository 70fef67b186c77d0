"""Image encoder (ResNet-18, 32-channel stem) and the frozen text-encoder interface."""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .annotations import ATTRIBUTE_NAMES

FEATURE_DIM = 512
STEM_CHANNELS = 32
CACHE_ENV_VAR = "NODULE_ALIGN_CACHE"


class BasicBlock(nn.Module):
    def __init__(self, in_channels, out_channels, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ImageEncoder(nn.Module):
    """ResNet-18 topology with a 32-channel, 3x3 stride-1 stem and no initial pool.

    32x32 inputs come out of the last stage as 512x4x4 maps; `forward` returns
    (feature_maps, pooled, logits).
    """

    def __init__(self, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.stem = nn.Conv2d(STEM_CHANNELS, 64, 3, stride=1, padding=1, bias=False)
        self.bn_stem = nn.BatchNorm2d(64)
        self.layers = nn.Sequential(
            self._stage(64, 64, stride=1),
            self._stage(64, 128, stride=2),
            self._stage(128, 256, stride=2),
            self._stage(256, FEATURE_DIM, stride=2),
        )
        self.head = nn.Linear(FEATURE_DIM, num_classes)

    @staticmethod
    def _stage(in_channels, out_channels, stride):
        return nn.Sequential(
            BasicBlock(in_channels, out_channels, stride=stride),
            BasicBlock(out_channels, out_channels, stride=1),
        )

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != STEM_CHANNELS or x.shape[2:] != (32, 32):
            raise ValueError(f"expected (B, {STEM_CHANNELS}, 32, 32) input, got {tuple(x.shape)}")
        maps = self.layers(F.relu(self.bn_stem(self.stem(x))))
        pooled = maps.mean(dim=(2, 3))
        return maps, pooled, self.head(pooled)


def _string_tokens(text: str, dim: int) -> np.ndarray:
    """Deterministic word-level token embeddings for a string (no learned vocab)."""
    words = text.lower().split()
    tokens = np.empty((len(words), dim), dtype=np.float64)
    for i, word in enumerate(words):
        digest = hashlib.sha256(word.encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        tokens[i] = rng.standard_normal(dim) * 0.02
    return tokens


class StubTextEncoder(nn.Module):
    """Deterministic, differentiable stand-in for the pre-trained text encoder.

    Maps a token sequence to a unit-norm vector via positional mixing and a
    fixed random two-layer projection. All weights are buffers, never trained.
    """

    context_length = 77

    def __init__(self, dim: int = FEATURE_DIM, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(dim)
        self.register_buffer(
            "w1", torch.from_numpy(rng.standard_normal((dim, dim)) * scale)
        )
        self.register_buffer(
            "w2", torch.from_numpy(rng.standard_normal((dim, dim)) * scale)
        )

    @property
    def identity(self) -> str:
        return f"stub-d{self.dim}-seed{self.seed}"

    def token_embeddings(self, text: str, device=None, dtype=torch.float64) -> torch.Tensor:
        return torch.as_tensor(_string_tokens(text, self.dim), device=device, dtype=dtype)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Encode (..., P, d) token sequences to (..., d) unit vectors."""
        if tokens.shape[-1] != self.dim:
            raise ValueError(f"token dim {tokens.shape[-1]} != {self.dim}")
        if tokens.shape[-2] > self.context_length:
            raise ValueError(
                f"sequence length {tokens.shape[-2]} exceeds context length {self.context_length}"
            )
        positions = torch.arange(tokens.shape[-2], device=tokens.device, dtype=tokens.dtype)
        mix = 1.0 + 0.1 * torch.sin(positions + 1.0)
        pooled = (tokens * mix.unsqueeze(-1)).mean(dim=-2)
        w1 = self.w1.to(tokens.dtype)
        w2 = self.w2.to(tokens.dtype)
        hidden = torch.tanh(pooled @ w1.T)
        out = hidden @ w2.T
        return out / out.norm(dim=-1, keepdim=True)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, buf in sorted(self.named_buffers()):
            h.update(name.encode())
            h.update(buf.detach().cpu().double().numpy().tobytes())
        return h.hexdigest()


class PretrainedTextEncoder(nn.Module):
    """Frozen CLIP-style text encoder loaded from a local checkpoint path.

    Kept behind the same interface as the stub so training code never branches.
    """

    def __init__(self, weights_path, dim: int = FEATURE_DIM):
        super().__init__()
        weights_path = Path(weights_path)
        if not weights_path.exists():
            raise FileNotFoundError(
                f"pre-trained text encoder weights not found at {weights_path}; "
                "use encoder=stub for desk-scale runs"
            )
        self.dim = dim
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        self.inner = StubTextEncoder(dim=dim)
        self.inner.load_state_dict(state)
        for p in self.inner.parameters():
            p.requires_grad_(False)
        self._identity = f"pretrained-{hashlib.sha256(weights_path.read_bytes()).hexdigest()[:16]}"

    context_length = 77

    @property
    def identity(self) -> str:
        return self._identity

    def token_embeddings(self, text, device=None, dtype=torch.float64):
        return self.inner.token_embeddings(text, device=device, dtype=dtype)

    def forward(self, tokens):
        return self.inner(tokens)

    def checksum(self) -> str:
        return self.inner.checksum()


def make_text_encoder(kind: str, *, seed: int = 0, weights_path=None):
    if kind == "stub":
        return StubTextEncoder(seed=seed)
    if kind == "pretrained":
        return PretrainedTextEncoder(weights_path)
    raise ValueError(f"unknown text encoder kind {kind!r}")


class AttributeFeatureCache:
    """Write-once cache of the M x d attribute feature matrix.

    The frozen encoder makes attribute features identical for every nodule, so
    they are computed once per encoder identity. Set NODULE_ALIGN_CACHE to also
    persist them on disk.
    """

    def __init__(self, cache_dir=None):
        self._memory: dict[str, torch.Tensor] = {}
        env_dir = os.environ.get(CACHE_ENV_VAR)
        self.cache_dir = Path(cache_dir or env_dir) if (cache_dir or env_dir) else None

    def _key(self, encoder, names) -> str:
        h = hashlib.sha256()
        h.update(encoder.identity.encode())
        for name in names:
            h.update(b"\x00" + name.encode())
        return h.hexdigest()

    def get(self, encoder, names=ATTRIBUTE_NAMES) -> torch.Tensor:
        key = self._key(encoder, names)
        if key in self._memory:
            return self._memory[key]
        if self.cache_dir is not None:
            path = self.cache_dir / f"attributes-{key}.npy"
            if path.exists():
                feats = torch.from_numpy(np.load(path))
                self._memory[key] = feats
                return feats
        with torch.no_grad():
            rows = [encoder(encoder.token_embeddings(name).unsqueeze(0))[0] for name in names]
        feats = torch.stack(rows)
        self._memory[key] = feats
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            np.save(self.cache_dir / f"attributes-{key}.npy", feats.cpu().numpy())
        return feats


def encode_attributes(encoder, names=ATTRIBUTE_NAMES, cache: AttributeFeatureCache | None = None):
    cache = cache or AttributeFeatureCache()
    return cache.get(encoder, names)
