"""The trainable network: backbone, vertex selection, attention GNN, scoring heads."""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .assignment import SoftAssignment, combine_scores, hungarian, sinkhorn
from .autodiff import Tensor
from .errors import ContractError
from .geometry import PermutationMatrix, PolygonSet, decode_permutation
from .nn import MLP, Conv2d, Linear, Module, ResBlock


@dataclass
class BackboneConfig:
    channels: tuple[int, ...] = (16, 32)
    descriptor_dim: int = 64

    @property
    def depth(self) -> int:
        """Number of 2x downsampling stages."""
        return len(self.channels) - 1


@dataclass
class GnnConfig:
    layers: int = 4
    heads: int = 4
    dim: int = 64
    offset_gamma: float = 0.05
    # x + MLP([x || attention]) instead of the bare MLP; the bare stack does
    # not learn to link vertices in practice
    residual: bool = True
    # "vertex": standardize every channel over the vertex set before each layer
    norm: str = "vertex"

    def __post_init__(self) -> None:
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.norm not in ("vertex", "none"):
            raise ContractError(f"unknown gnn norm {self.norm!r}")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    gnn: GnnConfig = field(default_factory=GnnConfig)
    n_vertices: int = 64
    nms_kernel: int = 3
    sinkhorn_iterations: int = 100
    sentinel_bonus: float = 50.0
    use_gnn: bool = True
    # scale every sampled descriptor to unit length before the vertex encoder
    normalize_descriptors: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.backbone.descriptor_dim != self.gnn.dim:
            raise ContractError("descriptor_dim and gnn dim must match")

    # plain-text "key = value" serialization ---------------------------------
    def to_flat(self) -> dict[str, str]:
        flat = {}
        for key, value in asdict(self).items():
            if isinstance(value, dict):
                for sub, v in value.items():
                    flat[f"{key}.{sub}"] = _fmt(v)
            else:
                flat[key] = _fmt(value)
        return flat

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> ModelConfig:
        groups: dict[str, dict[str, str]] = {"": {}, "backbone": {}, "gnn": {}}
        for key, value in flat.items():
            head, _, tail = key.partition(".")
            if tail:
                if head not in groups:
                    raise ContractError(f"unknown config key {key!r}")
                groups[head][tail] = value
            else:
                groups[""][key] = value
        backbone = BackboneConfig(**_parse_into(BackboneConfig, groups["backbone"]))
        gnn = GnnConfig(**_parse_into(GnnConfig, groups["gnn"]))
        top = _parse_into(cls, groups[""], skip=("backbone", "gnn"))
        return cls(backbone=backbone, gnn=gnn, **top)

    def save(self, path: str | Path) -> None:
        parser = configparser.ConfigParser()
        parser["model"] = self.to_flat()
        with open(path, "w", encoding="utf-8") as fh:
            parser.write(fh)

    @classmethod
    def load(cls, path: str | Path) -> ModelConfig:
        parser = configparser.ConfigParser()
        if not parser.read(path, encoding="utf-8"):
            raise FileNotFoundError(path)
        return cls.from_flat(dict(parser["model"]))


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_into(cls, values: dict[str, str], skip: Sequence[str] = ()):
    known = {f.name: f for f in fields(cls) if f.name not in skip}
    out = {}
    for key, raw in values.items():
        if key not in known:
            raise ContractError(f"unknown config key {key!r} for {cls.__name__}")
        default = getattr(cls(), key) if key not in ("backbone", "gnn") else None
        if isinstance(default, bool):
            out[key] = raw.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            out[key] = int(raw)
        elif isinstance(default, float):
            out[key] = float(raw)
        elif isinstance(default, tuple):
            out[key] = tuple(int(v) for v in raw.split(",") if v.strip())
        else:
            out[key] = raw
    return out


@dataclass
class VertexSet:
    """Selected peaks for a batch: arrays carry a leading batch axis."""

    positions: np.ndarray  # (B, N, 2) normalized (x, y)
    confidences: np.ndarray  # (B, N)
    valid: np.ndarray  # (B, N) bool; False marks sentinel padding
    pixels: np.ndarray  # (B, N, 2) integer (row, col)
    descriptors: Tensor | None = None  # (B, N, D)

    @property
    def valid_count(self) -> np.ndarray:
        return self.valid.sum(axis=-1)


@dataclass
class RefinedVertexSet:
    positions: Tensor  # (B, N, 2)
    matching: Tensor  # (B, N, D)
    offsets: Tensor  # (B, N, 2) in [-1, 1]


@dataclass
class ForwardOutput:
    heatmap: Tensor  # (B, H, W)
    features: Tensor  # (B, D, H, W)
    vertices: VertexSet
    refined: RefinedVertexSet
    s_clock: Tensor
    s_count: Tensor
    scores: Tensor
    assignment: SoftAssignment | None = None
    permutations: list[PermutationMatrix] | None = None


def _as_batch_image(image) -> np.ndarray:
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    if img.ndim != 4 or img.shape[-1] != 3:
        raise ContractError(f"expected (H, W, 3) or (B, H, W, 3) image, got {img.shape}")
    return img


class Backbone(Module):
    """Residual encoder-decoder that keeps the input resolution."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        ch = config.channels
        self.stem = Conv2d(3, ch[0], 3, rng)
        self.enc = [ResBlock(ch[0], rng)]
        self.down = []
        for a, b in zip(ch[:-1], ch[1:]):
            self.down.append(Conv2d(a, b, 3, rng))
            self.enc.append(ResBlock(b, rng))
        self.up = [Conv2d(ch[k] + ch[k + 1], ch[k], 3, rng) for k in range(config.depth)]
        self.to_features = Conv2d(ch[0], config.descriptor_dim, 1, rng)
        self.to_heatmap = Conv2d(config.descriptor_dim, 1, 1, rng)
        self.to_heatmap.weight.data *= 0.1
        self.to_heatmap.bias.data[:] = -4.6

    def __call__(self, image) -> tuple[Tensor, Tensor]:
        img = _as_batch_image(image)
        _, H, W, _ = img.shape
        factor = 2**self.config.depth
        if H % factor or W % factor:
            raise ContractError(f"image size {H}x{W} must be divisible by {factor}")
        x = Tensor(img.transpose(0, 3, 1, 2) - 0.5)
        x = self.enc[0](ad.relu(self.stem(x)))
        skips = [x]
        for down, block in zip(self.down, self.enc[1:]):
            x = block(ad.relu(down(ad.max_pool2d(x, 2))))
            skips.append(x)
        for k in reversed(range(self.config.depth)):
            x = ad.concat([ad.upsample_nearest2d(x, 2), skips[k]], axis=1)
            x = ad.relu(self.up[k](x))
        features = self.to_features(x)
        heatmap = ad.sigmoid(self.to_heatmap(features))[:, 0]
        return features, heatmap


def nms_topk(heatmap: np.ndarray, n: int, kernel: int = 3) -> VertexSet:
    """Keep local maxima of ``kernel x kernel`` windows, return the ``n`` strongest.

    Among equal values inside a window only the lexicographically smallest
    ``(row, col)`` survives; pixels at exactly zero never survive. Missing slots become invalid sentinels at ``(0, 0)``
    with zero confidence.
    """
    hm = heatmap.data if isinstance(heatmap, Tensor) else np.asarray(heatmap, dtype=np.float64)
    if hm.ndim == 2:
        return _stack_vertex_sets([nms_topk(hm[None], n, kernel)])
    if kernel % 2 == 0:
        raise ContractError("NMS kernel must be odd")
    B, H, W = hm.shape
    if n > H * W:
        raise ContractError(f"cannot select {n} vertices from {H}x{W} pixels")
    r = kernel // 2
    padded = np.pad(hm, ((0, 0), (r, r), (r, r)), constant_values=-np.inf)
    win = sliding_window_view(padded, (kernel, kernel), axis=(1, 2))  # (B, H, W, k, k)
    # zero-confidence pixels are background, never vertices
    keep = (hm >= win.max(axis=(-2, -1))) & (hm > 0)
    for dr in range(-r, 1):
        for dc in range(-r, r + 1):
            if dr == 0 and dc >= 0:
                break
            keep &= win[..., dr + r, dc + r] != hm
    sets = []
    for b in range(B):
        rows, cols = np.nonzero(keep[b])
        conf = hm[b, rows, cols]
        order = np.lexsort((cols, rows, -conf))[:n]
        rows, cols, conf = rows[order], cols[order], conf[order]
        m = rows.size
        pix = np.zeros((n, 2), dtype=np.int64)
        pix[:m, 0], pix[:m, 1] = rows, cols
        pos = np.zeros((n, 2))
        pos[:m, 0] = (cols + 0.5) / W
        pos[:m, 1] = (rows + 0.5) / H
        confidences = np.zeros(n)
        confidences[:m] = conf
        valid = np.zeros(n, dtype=bool)
        valid[:m] = True
        sets.append(VertexSet(pos[None], confidences[None], valid[None], pix[None]))
    return _stack_vertex_sets(sets)


def _stack_vertex_sets(sets: list[VertexSet]) -> VertexSet:
    return VertexSet(
        np.concatenate([s.positions for s in sets]),
        np.concatenate([s.confidences for s in sets]),
        np.concatenate([s.valid for s in sets]),
        np.concatenate([s.pixels for s in sets]),
    )


def positions_to_pixels(positions: np.ndarray, height: int, width: int) -> np.ndarray:
    """Integer ``(row, col)`` of the pixel containing each normalized position."""
    pos = np.asarray(positions, dtype=np.float64)
    cols = np.floor(pos[..., 0] * width).astype(np.int64)
    rows = np.floor(pos[..., 1] * height).astype(np.int64)
    if np.any((cols < 0) | (cols >= width) | (rows < 0) | (rows >= height)):
        raise ContractError("position outside the image")
    return np.stack([rows, cols], axis=-1)


def sample_descriptors(features, positions: np.ndarray) -> Tensor:
    """Gather feature vectors at the pixels holding ``positions``.

    ``features`` is ``(D, H, W)`` with ``positions`` ``(N, 2)``, or batched
    ``(B, D, H, W)`` with ``(B, N, 2)``. Returns ``(N, D)`` or ``(B, N, D)``.
    """
    f = ad.as_tensor(features)
    pos = np.asarray(positions, dtype=np.float64)
    if f.ndim == 3:
        pix = positions_to_pixels(pos, f.shape[1], f.shape[2])
        return ad.transpose(ad.getitem(f, (slice(None), pix[:, 0], pix[:, 1])), (1, 0))
    pix = positions_to_pixels(pos, f.shape[2], f.shape[3])
    bidx = np.arange(f.shape[0])[:, None]
    return ad.getitem(f, (bidx, slice(None), pix[..., 0], pix[..., 1]))


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.merge = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, N, D = x.shape
        return ad.transpose(x.reshape(B, N, self.heads, D // self.heads), (0, 2, 1, 3))

    def weights(self, x: Tensor) -> Tensor:
        q, k = self._split(self.q(x)), self._split(self.k(x))
        dk = q.shape[-1]
        return ad.softmax(ad.matmul(q, ad.swapaxes(k, -1, -2)) / np.sqrt(dk), axis=-1)

    def __call__(self, x: Tensor) -> Tensor:
        B, N, D = x.shape
        att = self.weights(x)
        msg = ad.matmul(att, self._split(self.v(x)))
        msg = ad.transpose(msg, (0, 2, 1, 3)).reshape(B, N, D)
        return self.merge(msg)


def unit_rows(x, eps: float = 1e-12) -> Tensor:
    """Divide every vector along the last axis by its Euclidean length.

    Raw backbone descriptors vary in length with image contrast, and that
    variation swamps the two position coordinates the encoder also sees.
    """
    x = ad.as_tensor(x)
    return x / ad.sqrt(ad.sum_(x * x, axis=-1, keepdims=True) + eps)


def vertex_norm(x, eps: float = 1e-5) -> Tensor:
    """Zero mean, unit variance per channel across the vertex axis (``-2``).

    Without it the ReLU stacks drift towards a large component shared by all
    vertices; every pair then lands in the same ReLU pattern, the pair scores
    become a sum of a row term and a column term, and Sinkhorn maps any such
    matrix to the uniform assignment, which leaves no gradient to learn from.
    """
    x = ad.as_tensor(x)
    centered = x - ad.mean(x, axis=-2, keepdims=True)
    var = ad.mean(centered * centered, axis=-2, keepdims=True)
    return centered / ad.sqrt(var + eps)


class AttentionGNN(Module):
    """Self-attention layers, then the matching and offset heads."""

    def __init__(self, config: GnnConfig, rng: np.random.Generator):
        self.config = config
        D = config.dim
        self.attn = [MultiHeadSelfAttention(D, config.heads, rng) for _ in range(config.layers)]
        self.update = [MLP([2 * D, 2 * D, D], rng) for _ in range(config.layers)]
        self.match_head = MLP([D, D, D], rng)
        self.offset_head = MLP([D, D, 2], rng)
        self.offset_head.layers[-1].weight.data *= 0.1

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        norm = vertex_norm if self.config.norm == "vertex" else (lambda v: v)
        x = norm(x)
        for attn, update in zip(self.attn, self.update):
            a = attn(x)
            nxt = update(ad.concat([x, a], axis=-1))
            x = norm(x + nxt if self.config.residual else nxt)
        m = self.match_head(x)
        t = ad.hardtanh(self.offset_head(x))
        if squeeze:
            m, t = m.reshape(m.shape[1:]), t.reshape(t.shape[1:])
        return m, t


class PairScorer(Module):
    """``MLP([m_i || m_j])`` for every ordered pair, evaluated without materializing the concat."""

    def __init__(self, dim: int, rng: np.random.Generator):
        first = Linear(2 * dim, dim, rng)
        self.w_i = Tensor(first.weight.data[:dim].copy(), requires_grad=True)
        self.w_j = Tensor(first.weight.data[dim:].copy(), requires_grad=True)
        self.b1 = first.bias
        self.out = Linear(dim, 1, rng)

    def __call__(self, m: Tensor) -> Tensor:
        a = ad.matmul(m, self.w_i)
        b = ad.matmul(m, self.w_j)
        shape = a.shape
        h = ad.relu(
            a.reshape(*shape[:-2], shape[-2], 1, shape[-1])
            + b.reshape(*shape[:-2], 1, shape[-2], shape[-1])
            + self.b1
        )
        return self.out(h).reshape(*shape[:-1], shape[-2])


def apply_offsets(p, t, gamma: float) -> Tensor:
    """``p + gamma * t``."""
    return ad.as_tensor(p) + ad.as_tensor(t) * gamma


class PolygonNet(Module):
    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        rng = np.random.default_rng(self.config.seed)
        D = self.config.gnn.dim
        self.backbone = Backbone(self.config.backbone, rng)
        self.encoder = MLP([D + 2, D, D], rng)
        self.gnn = AttentionGNN(self.config.gnn, rng)
        self.clock = PairScorer(D, rng)
        self.count = PairScorer(D, rng)

    # pieces -------------------------------------------------------------------
    def encode_vertices(self, d, p) -> Tensor:
        d = unit_rows(d) if self.config.normalize_descriptors else ad.as_tensor(d)
        return self.encoder(ad.concat([d, ad.as_tensor(p)], axis=-1))

    def pairwise_scores(self, m) -> tuple[Tensor, Tensor]:
        return self.clock(m), self.count(m)

    def select_vertices(self, heatmap: Tensor) -> VertexSet:
        return nms_topk(heatmap.data, self.config.n_vertices, self.config.nms_kernel)

    def refine(
        self, vertices: VertexSet, use_offsets: bool = True
    ) -> RefinedVertexSet:
        d = vertices.descriptors
        p = Tensor(vertices.positions)
        if self.config.use_gnn:
            m, t = self.gnn(self.encode_vertices(d, p))
        else:
            m = d
            t = Tensor(np.zeros(vertices.positions.shape))
        gamma = self.config.gnn.offset_gamma if use_offsets else 0.0
        return RefinedVertexSet(apply_offsets(p, t, gamma), m, t)

    def score(self, refined: RefinedVertexSet, valid: np.ndarray, score_mode: str = "both"):
        s_clock, s_count = self.pairwise_scores(refined.matching)
        if score_mode == "both":
            s = combine_scores(s_clock, s_count)
        elif score_mode == "clock":
            s = s_clock
        elif score_mode == "count":
            s = ad.swapaxes(s_count, -1, -2)
        else:
            raise ContractError(f"unknown score mode {score_mode!r}")
        n = valid.shape[-1]
        bonus = np.zeros(valid.shape + (n,))
        bonus[..., np.arange(n), np.arange(n)] = np.where(valid, 0.0, self.config.sentinel_bonus)
        return s_clock, s_count, s + bonus

    # full pass ----------------------------------------------------------------
    def __call__(
        self,
        image,
        *,
        vertices: VertexSet | None = None,
        inference: bool = False,
        use_offsets: bool = True,
        score_mode: str = "both",
    ) -> ForwardOutput:
        """Run the whole network on ``(H, W, 3)`` or ``(B, H, W, 3)`` images.

        ``vertices`` overrides peak selection (used for seeded debugging). In
        inference mode the Hungarian assignment replaces Sinkhorn.
        """
        features, heatmap = self.backbone(image)
        if vertices is None:
            vertices = self.select_vertices(heatmap)
        vertices.descriptors = sample_descriptors(features, vertices.positions)
        refined = self.refine(vertices, use_offsets=use_offsets)
        s_clock, s_count, s = self.score(refined, vertices.valid, score_mode)
        out = ForwardOutput(heatmap, features, vertices, refined, s_clock, s_count, s)
        if inference:
            out.permutations = [hungarian(s.data[b]) for b in range(s.shape[0])]
        else:
            out.assignment = sinkhorn(s, self.config.sinkhorn_iterations)
        return out


@dataclass
class Prediction:
    polygons: PolygonSet
    confidences: np.ndarray  # one per polygon
    positions: np.ndarray  # (N, 2) refined vertex positions
    permutation: PermutationMatrix


def predict(
    model: PolygonNet,
    images,
    *,
    use_offsets: bool = True,
    score_mode: str = "both",
    vertices: VertexSet | None = None,
) -> list[Prediction]:
    """Polygons per image using exact assignment; diagonal entries are discarded."""
    with ad.no_grad():
        out = model(
            images,
            vertices=vertices,
            inference=True,
            use_offsets=use_offsets,
            score_mode=score_mode,
        )
    preds = []
    for b, perm in enumerate(out.permutations):
        pos = np.clip(out.refined.positions.data[b], -0.5, 1.5)
        polys = decode_permutation(pos, perm)
        conf = np.array(
            [out.vertices.confidences[b, list(src)].mean() for src in polys.source_indices]
        )
        preds.append(Prediction(polys, conf, pos, perm))
    return preds
