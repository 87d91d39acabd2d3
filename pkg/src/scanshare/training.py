"""Losses, optimiser and the two-stage shared-representation training scheme.

Stage 1 trains the free-viewing branch (encoder, shared decoder prefix, FV
decoder suffix and FV modules). Stage 2 freezes everything the branches
share at its stage-1 values and trains only the visual-search branch. The
end-to-end baseline trains the whole visual-search path except the encoder.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import FREE_VIEWING, VISUAL_SEARCH, ImageSample, Scanpath, group_by_image
from .errors import ConfigurationError, FormatError, InputError, LoadError, UnsupportedVersionError
from .model import BRANCHES, ModelConfig, ScanpathModel, SplitConfig, partition_of

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
CHECKPOINT_MAGIC = b"SCSHCKPT"
CHECKPOINT_VERSION = 1
STAGES = ("fv", "vs_shared", "vs_e2e", "init")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 15
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    focal_gamma: float = 2.0
    focal_alpha: float = 4.0
    gt_sigma_fraction: float = 1 / 32
    termination_weight: float = 1.0
    warm_start_suffix: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("learning_rate, batch_size and epochs must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# losses


def gaussian_target(fixation, shape: tuple[int, int], sigma_fraction: float = 1 / 32) -> np.ndarray:
    """Ground-truth heatmap: a Gaussian peaking at exactly 1 on the fixated cell.

    ``sigma_fraction`` is the standard deviation as a fraction of the image
    width, converted to grid cells.
    """
    h, w = shape
    x, y = (fixation.x, fixation.y) if hasattr(fixation, "x") else fixation
    col = min(int(x * w), w - 1)
    row = min(int(y * h), h - 1)
    sigma = max(sigma_fraction * w, 1e-6)
    yy, xx = np.mgrid[0:h, 0:w]
    g = np.exp(-((xx - col) ** 2 + (yy - row) ** 2) / (2 * sigma * sigma))
    g[row, col] = 1.0
    return g


def focal_loss(pred_prob: Tensor, gt: np.ndarray, gamma: float = 2.0, alpha: float = 4.0) -> Tensor:
    """Penalty-reduced pixelwise focal loss, normalised by the number of peak pixels."""
    gt = np.asarray(gt)
    if gt.shape != pred_prob.shape:
        raise InputError(f"prediction {pred_prob.shape} and target {gt.shape} differ in shape")
    pos = gt == 1
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise InputError("focal loss needs at least one peak pixel (value 1) in the target")
    dtype = pred_prob.dtype
    p = ad.clip(pred_prob, PROB_EPS, 1 - PROB_EPS)
    one_minus = 1.0 - p
    pos_w = Tensor(pos.astype(dtype))
    neg_w = Tensor(np.where(pos, 0.0, (1.0 - gt) ** alpha).astype(dtype))
    pos_term = ad.power(one_minus, gamma) * ad.log(p) * pos_w
    neg_term = ad.power(p, gamma) * ad.log(one_minus) * neg_w
    return -(ad.tsum(pos_term) + ad.tsum(neg_term)) * (1.0 / n_pos)


def termination_loss(pred: Tensor, label) -> Tensor:
    """Binary cross-entropy, mean over entries; predictions clamped to [1e-7, 1-1e-7]."""
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    y = np.asarray(label, dtype=pred.dtype)
    p = ad.clip(pred, PROB_EPS, 1 - PROB_EPS)
    ll = ad.log(p) * Tensor(y) + ad.log(1.0 - p) * Tensor(1.0 - y)
    return -ad.mean(ll)


def scanpath_loss(model: ScanpathModel, pyramid, sp: Scanpath, cfg: TrainConfig) -> Tensor:
    """Teacher-forced loss of one scanpath: focal loss on every next fixation
    plus termination BCE at every prefix (positive only on the final one)."""
    logits, term = model.teacher_forced(pyramid, sp.fixations, sp.task)
    n = len(sp)
    h, w = pyramid.high_res.shape[1:]
    labels = np.zeros(n)
    labels[-1] = 1.0 if sp.terminated else 0.0
    loss = termination_loss(term, labels) * cfg.termination_weight
    if n > 1:
        prob = ad.softmax(ad.getitem(logits, slice(0, n - 1)), -1)
        gt = np.stack([gaussian_target(f, (h, w), cfg.gt_sigma_fraction).reshape(-1)
                       for f in sp.fixations[1:]])
        loss = loss + focal_loss(prob, gt, cfg.focal_gamma, cfg.focal_alpha)
    return loss


# --------------------------------------------------------------------------
# optimiser


class AdamW:
    """Adam with decoupled weight decay over a fixed set of named tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.wd, self.eps = lr, weight_decay, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data *= (1 - self.lr * self.wd)
            p.data -= (self.lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: dict
    split: dict
    stage: str
    train_config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    def build_model(self) -> ScanpathModel:
        model = ScanpathModel(ModelConfig.from_dict(self.model_config),
                              SplitConfig(self.split["shared_layers"], self.split["total_layers"]))
        load_parameters(model, self.params, strict=True)
        return model

    def digest(self, partitions: Sequence[str] | None = None) -> str:
        """SHA-256 over the raw bytes of the selected partitions."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            if partitions is None or partition_of(name) in partitions:
                h.update(name.encode())
                h.update(np.ascontiguousarray(self.params[name], dtype="<f4").tobytes())
        return h.hexdigest()


def make_checkpoint(model: ScanpathModel, stage: str, cfg: TrainConfig | None = None,
                    history=None) -> Checkpoint:
    return Checkpoint(
        params={n: p.data.astype(np.float32) for n, p in model.params.items()},
        model_config=model.cfg.to_dict(),
        split=model.split.to_dict(),
        stage=stage,
        train_config=cfg.to_dict() if cfg else {},
        history=list(history or []),
    )


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.params)
    header = {
        "version": ckpt.version,
        "stage": ckpt.stage,
        "model_config": ckpt.model_config,
        "split": ckpt.split,
        "train_config": ckpt.train_config,
        "history": ckpt.history,
        "tensors": [{"name": n, "shape": list(ckpt.params[n].shape)} for n in names],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", ckpt.version, len(head)))
    buf.write(head)
    for n in names:
        buf.write(np.ascontiguousarray(ckpt.params[n], dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 or not raw.startswith(CHECKPOINT_MAGIC):
        raise FormatError("not a checkpoint file (bad magic or truncated header)")
    off = len(CHECKPOINT_MAGIC)
    version, head_len = struct.unpack_from("<II", raw, off)
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    off += 8
    if off + head_len > len(raw):
        raise FormatError("checkpoint header truncated")
    try:
        header = json.loads(raw[off:off + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    off += head_len
    params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(raw):
            raise FormatError(f"checkpoint truncated inside tensor {entry['name']!r}")
        params[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise FormatError(f"checkpoint has {len(raw) - off} trailing bytes")
    return Checkpoint(params, header["model_config"], header["split"], header["stage"],
                      header.get("train_config", {}), header.get("history", []), version)


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(raw)


def load_parameters(model: ScanpathModel, arrays: dict[str, np.ndarray], names: Sequence[str] | None = None,
                    strict: bool = False, rename: Callable[[str], str] | None = None) -> list[str]:
    """Copy ``arrays`` into model parameters in place; returns the names loaded.

    ``rename`` maps a model parameter name to the key to read. Shape
    mismatches raise :class:`LoadError` naming the first offending tensor.
    """
    targets = list(model.params) if names is None else list(names)
    pairs = []
    for name in targets:
        key = rename(name) if rename else name
        if key not in arrays:
            if strict:
                raise LoadError(f"checkpoint lacks tensor {key!r}")
            continue
        src = arrays[key]
        dst = model.params[name]
        if tuple(src.shape) != dst.shape:
            raise LoadError(f"shape mismatch for tensor {name!r}: checkpoint {tuple(src.shape)}, model {dst.shape}")
        pairs.append((name, src))
    if strict and len(arrays) != len(pairs):
        extra = sorted(set(arrays) - {rename(n) if rename else n for n, _ in pairs})
        raise LoadError(f"checkpoint tensor {extra[0]!r} has no counterpart in the model")
    # everything validated before the first copy, so a failed load changes nothing
    for name, src in pairs:
        model.params[name].data[...] = src
    return [name for name, _ in pairs]


def _fv_path_key(name: str) -> str:
    """Name of the free-viewing-path tensor for the same decoder layer index, split-agnostic."""
    part, rest = name.split(".", 1)
    if part in ("decoder_shared", "decoder_fv", "decoder_vs") and rest.startswith("layer"):
        return "decoder@" + rest
    return name


def _fv_path_arrays(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    out = {}
    for n, a in ckpt.params.items():
        part = partition_of(n)
        if part == "decoder_vs":
            continue
        out[_fv_path_key(n) if part in ("decoder_shared", "decoder_fv") else n] = a
    return out


# --------------------------------------------------------------------------
# training loops


def trainable_names(model: ScanpathModel, stage: str) -> list[str]:
    if stage == "fv":
        parts = ["encoder", "decoder_shared", "decoder_fv", "foveation_fv", "memory_fv",
                 "aggregation_fv", "heads_fv"]
    elif stage == "vs_shared":
        parts = ["decoder_vs", "foveation_vs", "memory_vs", "aggregation_vs", "heads_vs"]
    elif stage == "vs_e2e":
        parts = ["decoder_shared", "decoder_vs", "foveation_vs", "memory_vs", "aggregation_vs", "heads_vs"]
    else:
        raise ConfigurationError(f"unknown stage {stage!r}")
    return model.names(parts)


class _PyramidSource:
    """Builds feature pyramids, caching whatever part of the path is frozen."""

    def __init__(self, model: ScanpathModel, branch: str, trainable: set[str]):
        self.model = model
        self.branch = branch
        self.encoder_frozen = not any(partition_of(n) == "encoder" for n in trainable)
        self.shared_frozen = self.encoder_frozen and not any(
            partition_of(n) == "decoder_shared" for n in trainable)
        self.suffix_frozen = self.shared_frozen and not any(
            partition_of(n) == f"decoder_{branch}" for n in trainable)
        self._cache: dict[str, object] = {}

    def __call__(self, sample: ImageSample):
        m = self.model
        if self.suffix_frozen:
            if sample.id not in self._cache:
                with ad.no_grad():
                    self._cache[sample.id] = m.pyramid(sample, self.branch)
            return self._cache[sample.id]
        if self.shared_frozen:
            if sample.id not in self._cache:
                with ad.no_grad():
                    self._cache[sample.id] = m.decode_shared(m.encode_pixels(sample))
            tokens, shapes = self._cache[sample.id]
            return m.decode_suffix(Tensor(tokens.data), shapes, self.branch)
        if self.encoder_frozen:
            if sample.id not in self._cache:
                with ad.no_grad():
                    self._cache[sample.id] = [Tensor(b.data) for b in m.encode_pixels(sample)]
            return m.decode_pixels(self._cache[sample.id], self.branch)
        return m.pyramid(sample, self.branch)


def fit(model: ScanpathModel, pairs, branch: str, names: Sequence[str], cfg: TrainConfig,
        on_epoch: Callable[[int, float], None] | None = None) -> list[float]:
    """Minimise the teacher-forced loss over ``names`` only; returns mean loss per epoch.

    The optimisation unit is an image with all its scanpaths for ``branch``;
    ``batch_size`` images contribute to each AdamW step.
    """
    units = group_by_image(pairs, branch)
    if not units:
        raise ConfigurationError(f"no {branch} scanpaths to train on")
    names = list(names)
    trainable = {n: model.params[n] for n in names}
    for n, p in model.params.items():
        p.requires_grad = n in trainable
        p.grad = None
    opt = AdamW(trainable, cfg.learning_rate, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    source = _PyramidSource(model, branch, set(names))
    rng = np.random.default_rng(cfg.seed)
    history = []
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(units))
            total, count = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                n_paths = sum(len(units[i][1]) for i in batch)
                for i in batch:
                    sample, scanpaths = units[i]
                    pyramid = source(sample)
                    loss = None
                    for sp in scanpaths:
                        term = scanpath_loss(model, pyramid, sp, cfg)
                        total += float(term.data)
                        count += 1
                        loss = term if loss is None else loss + term
                    (loss * (1.0 / n_paths)).backward()
                opt.step()
                opt.zero_grad()
            history.append(total / max(count, 1))
            log.info("epoch %d/%d loss %.5f", epoch + 1, cfg.epochs, history[-1])
            if on_epoch:
                on_epoch(epoch, history[-1])
    finally:
        for p in model.params.values():
            p.requires_grad = True
            p.grad = None
    return history


def train_stage1_fv(model: ScanpathModel, data, cfg: TrainConfig, on_epoch=None) -> Checkpoint:
    """Train the free-viewing path; every visual-search-only tensor stays untouched."""
    history = fit(model, data, FREE_VIEWING, trainable_names(model, "fv"), cfg, on_epoch)
    return make_checkpoint(model, "fv", cfg, history)


def _require_stage(ckpt: Checkpoint, stage: str) -> None:
    if ckpt.stage != stage:
        raise ConfigurationError(f"expected a {stage!r} checkpoint, got stage {ckpt.stage!r}")


def _check_compatible(model: ScanpathModel, ckpt: Checkpoint) -> None:
    # tensor shapes are checked on load; depth is the one thing shapes cannot reveal
    ours = model.cfg.to_dict()
    for key in ("decoder_layers",):
        if ckpt.model_config.get(key) != ours[key]:
            raise LoadError(f"checkpoint {key}={ckpt.model_config.get(key)} does not match model {ours[key]}")


def load_fv_features(model: ScanpathModel, ckpt: Checkpoint, warm_start_suffix: bool = False) -> list[str]:
    """Load the encoder and the free-viewing decoder path from a stage-1 checkpoint.

    Decoder layers are matched by depth, so a checkpoint trained under one
    split seeds any other split: layers shared by ``model`` and, with
    ``warm_start_suffix``, its visual-search suffix get the FV weights of
    the same depth.
    """
    _check_compatible(model, ckpt)
    arrays = _fv_path_arrays(ckpt)
    names = model.names(["encoder", "decoder_shared"])
    if warm_start_suffix:
        names += model.names(["decoder_vs"])
    return load_parameters(model, arrays, names, rename=_fv_path_key)


def train_stage2_vs_shared(model: ScanpathModel, fv_checkpoint: Checkpoint, data, cfg: TrainConfig,
                           on_epoch=None) -> Checkpoint:
    """Freeze the shared prefix at its free-viewing values and train the VS branch."""
    _require_stage(fv_checkpoint, "fv")
    load_fv_features(model, fv_checkpoint, warm_start_suffix=cfg.warm_start_suffix)
    # the FV branch rides along unchanged so the checkpoint serves both tasks
    load_parameters(model, _fv_path_arrays(fv_checkpoint),
                    model.names(["decoder_fv", "foveation_fv", "memory_fv", "aggregation_fv", "heads_fv"]),
                    rename=_fv_path_key)
    history = fit(model, data, VISUAL_SEARCH, trainable_names(model, "vs_shared"), cfg, on_epoch)
    return make_checkpoint(model, "vs_shared", cfg, history)


def train_end_to_end_vs(model: ScanpathModel, data, cfg: TrainConfig, encoder_checkpoint: Checkpoint | None = None,
                        on_epoch=None) -> Checkpoint:
    """Baseline: train the full VS path (decoder included), only the encoder frozen."""
    if encoder_checkpoint is not None:
        _check_compatible(model, encoder_checkpoint)
        load_parameters(model, encoder_checkpoint.params, model.names(["encoder"]))
    history = fit(model, data, VISUAL_SEARCH, trainable_names(model, "vs_e2e"), cfg, on_epoch)
    return make_checkpoint(model, "vs_e2e", cfg, history)
