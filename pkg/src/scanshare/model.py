"""Dual-branch scanpath model with a configurable shared pixel-decoder prefix.

Pipeline per branch (``fv`` or ``vs``)::

    image -> pixel encoder (strided convs) -> 4 base maps (1/32 .. 1/4)
          -> pixel decoder: input projections, ``shared_layers`` shared layers,
             then the branch's own remaining layers -> feature pyramid
          -> foveation: foveal tokens sampled from the 1/4 map at past
             fixations, peripheral tokens from the 1/32 map
          -> memory encoder -> query aggregation -> heatmap + termination

Parameters live in one flat ``{name: Tensor}`` dict. The first dotted
component of a name is its partition (``encoder``, ``decoder_shared``,
``decoder_fv``, ``memory_vs`` ...), which is what freezing, checkpoint
loading and cost accounting key on.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, flop_scope, gelu, layer_norm, linear
from .data import CENTER, FREE_VIEWING, VISUAL_SEARCH, Fixation, ImageSample, Scanpath, TaskSpec
from .errors import ConfigurationError, InputError

BRANCHES = (FREE_VIEWING, VISUAL_SEARCH)
PYRAMID_SCALES = (32, 16, 8, 4)  # image size divided by these, coarse to fine
SPLIT_NAMES = {6: "LS", 5: "ES51", 4: "ES42", 3: "ES33", 2: "ES24", 1: "ES15"}

PARTITIONS = (
    "encoder", "decoder_shared", "decoder_fv", "decoder_vs",
    "foveation_fv", "foveation_vs", "memory_fv", "memory_vs",
    "aggregation_fv", "aggregation_vs", "heads_fv", "heads_vs",
)


@dataclass(frozen=True)
class ModelConfig:
    decoder_layers: int = 6
    decoder_heads: int = 8
    decoder_points: int = 4
    memory_layers: int = 3
    memory_heads: int = 4
    aggregation_layers: int = 6
    aggregation_heads: int = 4
    queries_vs: int = 18
    queries_fv: int = 1
    feature_dim: int = 64
    ffn_dim: int | None = None
    max_len_fv: int = 10
    max_len_vs: int = 7

    def __post_init__(self):
        d = self.feature_dim
        for heads in (self.decoder_heads, self.memory_heads, self.aggregation_heads):
            if heads < 1 or d % heads:
                raise ConfigurationError(f"feature_dim {d} is not divisible by {heads} heads")
        if d % 4:
            raise ConfigurationError("feature_dim must be divisible by 4 (sine position features)")
        if min(self.decoder_layers, self.memory_layers, self.aggregation_layers, self.decoder_points) < 1:
            raise ConfigurationError("layer and point counts must be positive")
        if min(self.max_len_fv, self.max_len_vs) < 1:
            raise ConfigurationError("maximum scanpath lengths must be >= 1")

    @property
    def ffn(self) -> int:
        return self.ffn_dim or 2 * self.feature_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def queries(self, branch: str) -> int:
        return self.queries_fv if branch == FREE_VIEWING else self.queries_vs

    def max_len(self, branch: str) -> int:
        return self.max_len_fv if branch == FREE_VIEWING else self.max_len_vs


@dataclass(frozen=True)
class SplitConfig:
    """How many leading pixel-decoder layers the two branches share."""

    shared_layers: int = 6
    total_layers: int = 6

    def __post_init__(self):
        if not 1 <= self.shared_layers <= self.total_layers:
            raise ConfigurationError(
                f"shared_layers must be in [1, {self.total_layers}], got {self.shared_layers}")

    @property
    def task_layers(self) -> int:
        return self.total_layers - self.shared_layers

    @property
    def name(self) -> str:
        if self.total_layers == 6:
            return SPLIT_NAMES[self.shared_layers]
        return "LS" if self.task_layers == 0 else f"ES{self.shared_layers}{self.task_layers}"

    @classmethod
    def from_name(cls, name: str) -> "SplitConfig":
        lookup = {v: k for k, v in SPLIT_NAMES.items()}
        key = name.upper().replace("_", "").replace(",", "")
        if key not in lookup:
            raise ConfigurationError(f"unknown split {name!r}; valid: {', '.join(SPLIT_NAMES.values())}")
        return cls(lookup[key])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeaturePyramid:
    maps: list  # four Tensors [D, h, w], coarse to fine
    tokens: Tensor  # [N, D] all levels concatenated, coarse to fine

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [m.shape[1:] for m in self.maps]

    @property
    def high_res(self) -> Tensor:
        return self.maps[-1]

    @property
    def low_res(self) -> Tensor:
        return self.maps[0]


@dataclass
class MemoryState:
    tokens: Tensor  # [..., N_tokens, D]
    num_peripheral: int
    key_mask: np.ndarray | None = None


@dataclass
class HeatmapPrediction:
    logits: Tensor  # [h, w]
    prob: Tensor  # [h, w], sums to 1
    termination: Tensor  # scalar in (0, 1)


def partition_of(name: str) -> str:
    return name.split(".", 1)[0]


def sine_features(points: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sinusoidal features of normalised (x, y) points, ``dim`` columns."""
    nf = dim // 4
    freqs = (2.0 ** np.arange(nf)) * np.pi
    x = points[:, :1] * freqs
    y = points[:, 1:2] * freqs
    return np.concatenate([np.sin(x), np.cos(x), np.sin(y), np.cos(y)], axis=1)


def cell_centers(h: int, w: int) -> np.ndarray:
    """Normalised (x, y) centres of an h x w grid, row-major."""
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([(xs.ravel() + 0.5) / w, (ys.ravel() + 0.5) / h], axis=1)


def _encoder_channels(d: int) -> list[int]:
    return [max(4, d // 4), max(4, d // 2), max(4, d // 2), d, d]


class ScanpathModel:
    """Two-branch scanpath predictor; see module docstring for the data flow."""

    def __init__(self, cfg: ModelConfig, split: SplitConfig, seed: int = 0):
        if split.total_layers != cfg.decoder_layers:
            split = SplitConfig(split.shared_layers, cfg.decoder_layers)
        self.cfg = cfg
        self.split = split
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self._context_cache: dict = {}
        self._sub_cache: dict = {}
        self._build()

    # ------------------------------------------------------------------
    # parameters

    def _init_rng(self, name: str) -> np.random.Generator:
        # free-viewing-path decoder layers hash the same whether shared or not,
        # so the FV network is initialised identically under every split
        parts = name.split(".")
        if parts[0] in ("decoder_shared", "decoder_fv"):
            parts[0] = "decoder"
        return np.random.default_rng([self.seed, zlib.crc32(".".join(parts).encode())])

    def _add(self, name: str, shape, kind: str = "weight", fan_in: int | None = None, value=None):
        dtype = ad.default_dtype()
        if value is not None:
            arr = np.asarray(value, dtype=dtype).reshape(shape)
        elif kind == "zeros":
            arr = np.zeros(shape, dtype)
        elif kind == "ones":
            arr = np.ones(shape, dtype)
        else:
            fan_in = fan_in or shape[0]
            scale = 1.0 / np.sqrt(fan_in) if kind == "weight" else 0.02
            arr = (self._init_rng(name).standard_normal(shape) * scale).astype(dtype)
        self.params[name] = Tensor(arr, requires_grad=True, name=name)

    def _add_linear(self, prefix: str, n_in: int, n_out: int, scale: float = 1.0):
        self._add(prefix + ".w", (n_in, n_out), fan_in=n_in)
        if scale != 1.0:
            self.params[prefix + ".w"].data *= scale
        self._add(prefix + ".b", (n_out,), "zeros")

    def _add_norm(self, prefix: str, d: int):
        self._add(prefix + ".g", (d,), "ones")
        self._add(prefix + ".b", (d,), "zeros")

    def _add_attention(self, prefix: str, d: int):
        for p in ("q", "k", "v", "o"):
            self._add(f"{prefix}.w{p}", (d, d), fan_in=d)
            self._add(f"{prefix}.b{p}", (d,), "zeros")

    def _add_ffn(self, prefix: str, d: int, hidden: int):
        self._add_linear(prefix + ".ffn1", d, hidden)
        self._add_linear(prefix + ".ffn2", hidden, d)

    def _add_decoder_layer(self, prefix: str):
        cfg = self.cfg
        d, heads, pts = cfg.feature_dim, cfg.decoder_heads, cfg.decoder_points
        levels = len(PYRAMID_SCALES)
        self._add_norm(prefix + ".ln1", d)
        self._add(prefix + ".off.w", (d, heads * levels * pts * 2), fan_in=d)
        self.params[prefix + ".off.w"].data *= 0.05
        # initial sampling pattern: each head looks along its own direction,
        # points spread outward, offsets shrinking with finer levels
        angles = 2 * np.pi * np.arange(heads) / heads
        direction = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
        bias = (direction[:, None, None, :]
                * (np.arange(pts) + 1)[None, None, :, None]
                * (0.5 * 2.0 ** -np.arange(levels))[None, :, None, None])
        self._add(prefix + ".off.b", (heads * levels * pts * 2,), value=bias.reshape(-1))
        self._add_linear(prefix + ".attn", d, heads * levels * pts, scale=0.1)
        self._add_linear(prefix + ".val", d, d)
        self._add_linear(prefix + ".out", d, d)
        self._add_norm(prefix + ".ln2", d)
        self._add_ffn(prefix, d, cfg.ffn)

    def _build(self):
        cfg = self.cfg
        d = cfg.feature_dim
        chans = [3] + _encoder_channels(d)
        for i in range(5):
            self._add(f"encoder.conv{i}.w", (chans[i + 1], chans[i], 3, 3), fan_in=chans[i] * 9)
            self._add(f"encoder.conv{i}.b", (chans[i + 1],), "zeros")
        # base maps per level (coarse to fine) come from conv4, conv3, conv2, conv1
        for lvl, c in enumerate((chans[5], chans[4], chans[3], chans[2])):
            self._add_linear(f"decoder_shared.proj{lvl}", c, d)
        self._add("decoder_shared.level_embed", (len(PYRAMID_SCALES), d), "embed")
        for i in range(cfg.decoder_layers):
            if i < self.split.shared_layers:
                self._add_decoder_layer(f"decoder_shared.layer{i}")
            else:
                for b in BRANCHES:
                    self._add_decoder_layer(f"decoder_{b}.layer{i}")
        for b in BRANCHES:
            self._add_linear(f"foveation_{b}.pos", d, d)
            self._add(f"foveation_{b}.type", (2, d), "embed")
            self._add(f"foveation_{b}.step", (cfg.max_len(b), d), "embed")
            for i in range(cfg.memory_layers):
                p = f"memory_{b}.layer{i}"
                self._add_norm(p + ".ln1", d)
                self._add_attention(p + ".attn", d)
                self._add_norm(p + ".ln2", d)
                self._add_ffn(p, d, cfg.ffn)
            self._add_norm(f"memory_{b}.norm", d)
            self._add(f"aggregation_{b}.queries", (cfg.queries(b), d), "embed")
            self.params[f"aggregation_{b}.queries"].data *= 50.0  # std 1
            for i in range(cfg.aggregation_layers):
                p = f"aggregation_{b}.layer{i}"
                self._add_norm(p + ".ln1", d)
                self._add_attention(p + ".self", d)
                self._add_norm(p + ".ln2", d)
                self._add_attention(p + ".cross", d)
                self._add_norm(p + ".ln3", d)
                self._add_ffn(p, d, cfg.ffn)
            self._add_norm(f"aggregation_{b}.norm", d)
            self._add_linear(f"heads_{b}.mlp1", d, d)
            self._add_linear(f"heads_{b}.mlp2", d, d)
            self._add_linear(f"heads_{b}.term", d, 1)

    def names(self, partitions: Iterable[str] | None = None) -> list[str]:
        if partitions is None:
            return list(self.params)
        partitions = set(partitions)
        unknown = partitions - set(PARTITIONS)
        if unknown:
            raise ConfigurationError(f"unknown partitions {sorted(unknown)}")
        return [n for n in self.params if partition_of(n) in partitions]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def decoder_layer_names(self, branch: str) -> list[str]:
        return [f"decoder_shared.layer{i}" if i < self.split.shared_layers else f"decoder_{branch}.layer{i}"
                for i in range(self.cfg.decoder_layers)]

    def _sub(self, prefix: str) -> dict[str, Tensor]:
        if prefix not in self._sub_cache:
            n = len(prefix) + 1
            self._sub_cache[prefix] = {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}
        return self._sub_cache[prefix]

    # ------------------------------------------------------------------
    # feature extraction

    @staticmethod
    def _as_pixels(image) -> Tensor:
        if isinstance(image, ImageSample):
            image = image.pixels
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=ad.default_dtype()))
        if x.ndim != 3 or x.shape[0] != 3:
            raise InputError(f"expected a [3,H,W] image, got {x.shape}")
        if x.shape[1] % 32 or x.shape[2] % 32:
            raise InputError(f"image height/width {x.shape[1:]} must be divisible by 32")
        return x

    def encode_pixels(self, image) -> list[Tensor]:
        """Base maps at 1/32, 1/16, 1/8, 1/4 of the input resolution."""
        x = self._as_pixels(image)
        p = self.params
        feats = []
        with flop_scope("encoder"):
            for i in range(5):
                x = gelu(ad.conv2d(x, p[f"encoder.conv{i}.w"], p[f"encoder.conv{i}.b"], stride=2, padding=1))
                feats.append(x)
        return [feats[4], feats[3], feats[2], feats[1]]

    def _decoder_context(self, shapes: tuple):
        if shapes not in self._context_cache:
            d = self.cfg.feature_dim
            refs = np.concatenate([cell_centers(h, w) for h, w in shapes])
            level = np.concatenate([np.full(h * w, i) for i, (h, w) in enumerate(shapes)])
            pos = sine_features(refs, d)
            logit = np.log(refs / (1 - refs))
            self._context_cache[shapes] = (pos, level, logit)
        pos, level, logit = self._context_cache[shapes]
        dtype = ad.default_dtype()
        return Tensor(pos.astype(dtype)), level, Tensor(logit.astype(dtype).reshape(-1, 1, 1, 1, 2))

    def decoder_input(self, base_maps: Sequence[Tensor]) -> tuple[Tensor, tuple]:
        shapes = tuple(tuple(m.shape[1:]) for m in base_maps)
        with flop_scope("decoder_shared"):
            tokens = []
            for lvl, m in enumerate(base_maps):
                c, h, w = m.shape
                flat = ad.transpose(ad.reshape(m, (c, h * w)), (1, 0))
                tokens.append(linear(flat, self.params[f"decoder_shared.proj{lvl}.w"],
                                     self.params[f"decoder_shared.proj{lvl}.b"]))
            x = ad.concat(tokens, axis=0)
        return x, shapes

    def decoder_layer(self, prefix: str, x: Tensor, shapes: tuple) -> Tensor:
        cfg = self.cfg
        p = self._sub(prefix)
        n, d = x.shape
        heads, pts, levels = cfg.decoder_heads, cfg.decoder_points, len(shapes)
        dh = d // heads
        pos, level, ref_logit = self._decoder_context(shapes)
        level_embed = ad.getitem(self.params["decoder_shared.level_embed"], level)
        h = layer_norm(x, p["ln1.g"], p["ln1.b"])
        q = h + pos + level_embed
        off = ad.reshape(linear(q, p["off.w"], p["off.b"]), (n, heads, levels, pts, 2))
        points = ad.transpose(ad.sigmoid(off + ref_logit), (1, 0, 2, 3, 4))
        weights = ad.softmax(ad.reshape(linear(q, p["attn.w"], p["attn.b"]), (n, heads, levels * pts)), -1)
        weights = ad.reshape(ad.transpose(weights, (1, 0, 2)), (heads, n, levels, pts, 1))
        values = ad.transpose(ad.reshape(linear(h, p["val.w"], p["val.b"]), (n, heads, dh)), (1, 0, 2))
        sampled = ad.multiscale_sample(values, shapes, points)
        agg = ad.tsum(sampled * weights, axis=(2, 3))
        agg = ad.reshape(ad.transpose(agg, (1, 0, 2)), (n, d))
        x = x + linear(agg, p["out.w"], p["out.b"])
        h2 = layer_norm(x, p["ln2.g"], p["ln2.b"])
        return x + linear(gelu(linear(h2, p["ffn1.w"], p["ffn1.b"])), p["ffn2.w"], p["ffn2.b"])

    def decode_shared(self, base_maps: Sequence[Tensor]) -> tuple[Tensor, tuple]:
        x, shapes = self.decoder_input(base_maps)
        with flop_scope("decoder_shared"):
            for i in range(self.split.shared_layers):
                x = self.decoder_layer(f"decoder_shared.layer{i}", x, shapes)
        return x, shapes

    def decode_suffix(self, tokens: Tensor, shapes: tuple, branch: str) -> FeaturePyramid:
        x = tokens
        with flop_scope(f"decoder_{branch}"):
            for i in range(self.split.shared_layers, self.cfg.decoder_layers):
                x = self.decoder_layer(f"decoder_{branch}.layer{i}", x, shapes)
        return self.to_pyramid(x, shapes)

    def to_pyramid(self, tokens: Tensor, shapes: tuple) -> FeaturePyramid:
        maps, start = [], 0
        d = tokens.shape[1]
        for h, w in shapes:
            part = ad.getitem(tokens, slice(start, start + h * w))
            maps.append(ad.reshape(ad.transpose(part, (1, 0)), (d, h, w)))
            start += h * w
        return FeaturePyramid(maps, tokens)

    def decode_pixels(self, base_maps: Sequence[Tensor], branch: str) -> FeaturePyramid:
        _check_branch(branch)
        tokens, shapes = self.decode_shared(base_maps)
        return self.decode_suffix(tokens, shapes, branch)

    def pyramid(self, image, branch: str) -> FeaturePyramid:
        return self.decode_pixels(self.encode_pixels(image), branch)

    # ------------------------------------------------------------------
    # foveation, memory, aggregation, prediction

    def foveate(self, pyramid: FeaturePyramid, prefix, branch: str) -> tuple[Tensor, Tensor]:
        """(foveal tokens [T, D], peripheral tokens [h32*w32, D])."""
        pts = _prefix_array(prefix)
        p = self._sub(f"foveation_{branch}")
        dtype = ad.default_dtype()
        d = self.cfg.feature_dim
        with flop_scope(f"foveation_{branch}"):
            foveal = ad.bilinear_sample(pyramid.high_res, pts.astype(dtype))
            steps = np.minimum(np.arange(len(pts)), p["step"].shape[0] - 1)
            foveal = (foveal + linear(Tensor(sine_features(pts, d).astype(dtype)), p["pos.w"], p["pos.b"])
                      + ad.getitem(p["type"], 1) + ad.getitem(p["step"], steps))
            low = pyramid.low_res
            _, h, w = low.shape
            periph = ad.transpose(ad.reshape(low, (d, h * w)), (1, 0))
            periph = (periph + linear(Tensor(sine_features(cell_centers(h, w), d).astype(dtype)),
                                      p["pos.w"], p["pos.b"])
                      + ad.getitem(p["type"], 0))
        return foveal, periph

    def encode_memory(self, tokens: Tensor, branch: str, num_peripheral: int,
                      key_mask: np.ndarray | None = None) -> MemoryState:
        """Self-attention memory over [peripheral; foveal] tokens.

        ``key_mask`` ([..., 1, N] or [..., N, N], True = visible) lets a
        batch of prefixes share one token set: each step only sees its own
        foveal tokens.
        """
        if tokens.shape[-2] == 0:
            raise InputError("memory needs at least one token")
        cfg = self.cfg
        x = tokens
        with flop_scope(f"memory_{branch}"):
            for i in range(cfg.memory_layers):
                p = self._sub(f"memory_{branch}.layer{i}")
                h = layer_norm(x, p["ln1.g"], p["ln1.b"])
                x = x + ad.multi_head_attention(h, h, h, cfg.memory_heads, _attn(p, "attn"), mask=key_mask)
                h = layer_norm(x, p["ln2.g"], p["ln2.b"])
                x = x + linear(gelu(linear(h, p["ffn1.w"], p["ffn1.b"])), p["ffn2.w"], p["ffn2.b"])
            x = layer_norm(x, self.params[f"memory_{branch}.norm.g"], self.params[f"memory_{branch}.norm.b"])
        return MemoryState(x, num_peripheral, key_mask)

    def aggregate(self, memory: MemoryState, task: TaskSpec) -> Tensor:
        """Learned task queries cross-attending to memory; [..., Q, D]."""
        branch = task.kind
        if branch == VISUAL_SEARCH and not 1 <= (task.target or 0) <= self.cfg.queries_vs:
            raise InputError(f"target {task.target} outside [1, {self.cfg.queries_vs}]")
        cfg = self.cfg
        q = self.params[f"aggregation_{branch}.queries"]
        mask = memory.key_mask
        if mask is not None:
            mask = mask[..., -1:, :]  # key visibility only
        with flop_scope(f"aggregation_{branch}"):
            for i in range(cfg.aggregation_layers):
                p = self._sub(f"aggregation_{branch}.layer{i}")
                h = layer_norm(q, p["ln1.g"], p["ln1.b"])
                q = q + ad.multi_head_attention(h, h, h, cfg.aggregation_heads, _attn(p, "self"))
                h = layer_norm(q, p["ln2.g"], p["ln2.b"])
                q = q + ad.multi_head_attention(h, memory.tokens, memory.tokens, cfg.aggregation_heads,
                                                _attn(p, "cross"), mask=mask)
                h = layer_norm(q, p["ln3.g"], p["ln3.b"])
                q = q + linear(gelu(linear(h, p["ffn1.w"], p["ffn1.b"])), p["ffn2.w"], p["ffn2.b"])
            q = layer_norm(q, self.params[f"aggregation_{branch}.norm.g"],
                           self.params[f"aggregation_{branch}.norm.b"])
        return q

    @staticmethod
    def query_row(task: TaskSpec) -> int:
        return 0 if task.kind == FREE_VIEWING else task.target - 1

    def predict_logits(self, query: Tensor, pyramid: FeaturePyramid, branch: str) -> tuple[Tensor, Tensor]:
        """Heatmap logits [..., P] over the 1/4 grid and termination probability [...]."""
        p = self._sub(f"heads_{branch}")
        d = self.cfg.feature_dim
        high = pyramid.high_res
        with flop_scope(f"heads_{branch}"):
            emb = linear(gelu(linear(query, p["mlp1.w"], p["mlp1.b"])), p["mlp2.w"], p["mlp2.b"])
            logits = ad.matmul(emb, ad.reshape(high, (d, -1))) * (1.0 / np.sqrt(d))
            term = ad.sigmoid(linear(query, p["term.w"], p["term.b"]))
        return logits, ad.reshape(term, term.shape[:-1])

    def predict_heatmap(self, query: Tensor, pyramid: FeaturePyramid, branch: str) -> HeatmapPrediction:
        logits, term = self.predict_logits(query, pyramid, branch)
        h, w = pyramid.high_res.shape[1:]
        with flop_scope(f"heads_{branch}"):
            prob = ad.softmax(logits, -1)
        return HeatmapPrediction(ad.reshape(logits, (h, w)), ad.reshape(prob, (h, w)), term)

    def predict(self, pyramid: FeaturePyramid, prefix, task: TaskSpec) -> HeatmapPrediction:
        """Next-fixation heatmap given a fixation prefix (memory recomputed from scratch)."""
        foveal, periph = self.foveate(pyramid, prefix, task.kind)
        memory = self.encode_memory(ad.concat([periph, foveal], 0), task.kind, periph.shape[0])
        queries = self.aggregate(memory, task)
        return self.predict_heatmap(ad.getitem(queries, self.query_row(task)), pyramid, task.kind)

    def teacher_forced(self, pyramid: FeaturePyramid, fixations, task: TaskSpec) -> tuple[Tensor, Tensor]:
        """Logits [T, P] and termination [T] for every prefix ``fixations[:t+1]``.

        All prefixes run as one batch; step t masks foveal tokens after t, so
        each row equals :meth:`predict` on that prefix.
        """
        pts = _prefix_array(fixations)
        t = len(pts)
        foveal, periph = self.foveate(pyramid, pts, task.kind)
        n_p = periph.shape[0]
        tokens = ad.concat([periph, foveal], 0)
        visible = np.ones((t, 1, n_p + t), dtype=bool)
        visible[:, 0, n_p:] = np.tril(np.ones((t, t), dtype=bool))
        memory = self.encode_memory(ad.reshape(tokens, (1, n_p + t, -1)), task.kind, n_p, visible)
        queries = self.aggregate(memory, task)  # [T, Q, D]
        rows = ad.getitem(queries, (slice(None), self.query_row(task)))
        return self.predict_logits(rows, pyramid, task.kind)

    # ------------------------------------------------------------------
    # inference

    def rollout(self, image, task: TaskSpec, mode: str = "argmax", seed: int = 0,
                max_len: int | None = None, pyramid: FeaturePyramid | None = None) -> Scanpath:
        """Generate a scanpath from the centre until termination > 0.5 or ``max_len``."""
        max_len = self.cfg.max_len(task.kind) if max_len is None else max_len
        if max_len < 1:
            raise ConfigurationError("max_len must be >= 1")
        if mode not in ("argmax", "sample"):
            raise ConfigurationError(f"unknown rollout mode {mode!r}")
        image_id = image.id if isinstance(image, ImageSample) else "image"
        rng = np.random.default_rng(seed)
        prefix = [Fixation(*CENTER)]
        terminated = False
        with ad.no_grad():
            if pyramid is None:
                pyramid = self.pyramid(image, task.kind)
            h, w = pyramid.high_res.shape[1:]
            while len(prefix) < max_len:
                pred = self.predict(pyramid, prefix, task)
                if float(pred.termination.data) > 0.5:
                    terminated = True
                    break
                prob = pred.prob.data.reshape(-1).astype(np.float64)
                if mode == "argmax":
                    cell = int(np.argmax(prob))
                else:
                    cell = int(rng.choice(prob.size, p=prob / prob.sum()))
                r, c = divmod(cell, w)
                prefix.append(Fixation((c + 0.5) / w, (r + 0.5) / h))
        return Scanpath(image_id, task, prefix, terminated)


def _attn(p: dict, key: str) -> dict:
    n = len(key) + 1
    return {k[n:]: v for k, v in p.items() if k.startswith(key + ".")}


def _check_branch(branch: str) -> None:
    if branch not in BRANCHES:
        raise InputError(f"unknown branch {branch!r}")


def _prefix_array(prefix) -> np.ndarray:
    if isinstance(prefix, Scanpath):
        prefix = prefix.fixations
    if isinstance(prefix, np.ndarray):
        pts = prefix.astype(np.float64).reshape(-1, 2)
    else:
        pts = np.array([[f.x, f.y] if isinstance(f, Fixation) else list(f) for f in prefix], dtype=np.float64)
    if len(pts) == 0:
        raise InputError("prefix must contain at least the centre fixation")
    if np.any(pts < 0) or np.any(pts > 1):
        raise InputError("fixations must lie in the unit square")
    return pts


def build_model(cfg: ModelConfig | None = None, split: SplitConfig | None = None, seed: int = 0) -> ScanpathModel:
    return ScanpathModel(cfg or ModelConfig(), split or SplitConfig(), seed)
