"""The five classifiers: Mel-only backbone, two tempogram-only ablations, early and late fusion.

Backbone: ``n_blocks`` residual blocks over a ``[1, n_mels, chunk_len]`` Mel
chunk. Each block is conv-BN-ReLU-conv-BN plus an identity skip (1x1 conv
when the channel count changes), ReLU after the sum, then 2x2 max pooling.
A global max pool turns the last map into a feature vector.

Tempo branch: four parallel 1-D convolutions (kernels 3, 3, 5, 5; strides
2, 3, 3, 5) over a tempogram chunk whose bins are treated as input channels.
Each output is mean-pooled over time to a fixed length, the outputs are
stacked into a ``[channels, n_convs, pooled_len]`` map, passed through one
2-D conv + ReLU and globally max-pooled into the tempo embedding. Early fusion
concatenates the two tempograms along the bin axis before the 1-D convs
(4 convs); late fusion gives each tempogram its own four convs (8 convs) and
stacks all outputs.

Classifier: dense + ReLU + dropout + dense, applied to the backbone features,
the tempo embedding, or their concatenation.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import features as F
from .nn import tensor as T
from .nn.layers import BatchNorm, Conv1d, Conv2d, Dense, Dropout, Module
from .nn.optim import AdamState
from .nn.tensor import Tensor

MODEL_KINDS = ("mel_only", "ftg_only", "actg_only", "early_fusion", "late_fusion")
MODE_ALIASES = {"early": "early_fusion", "late": "late_fusion"}

CKPT_MAGIC = b"TFCK"
CKPT_VERSION = 1
TAG_PARAM = 16
TAG_BUFFER = 17
TAG_ADAM_M = 18
TAG_ADAM_V = 19


class CheckpointError(ValueError):
    """Unreadable, corrupt or inconsistent checkpoint."""


def canonical_kind(kind: str) -> str:
    kind = MODE_ALIASES.get(kind, kind)
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    return kind


@dataclass
class BackboneConfig:
    n_blocks: int = 7
    channels: int = 128
    kernel: int = 3
    pool: int = 2
    hidden: int = 512
    n_classes: int = 30
    dropout: float = 0.5
    n_mels: int = 128
    chunk_len: int = 200

    def __post_init__(self):
        if self.n_blocks < 1 or self.channels < 1 or self.hidden < 1 or self.n_classes < 1:
            raise ValueError(f"invalid backbone config {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        h, w = self.n_mels, self.chunk_len
        for block in range(self.n_blocks):
            h, w = h // self.pool, w // self.pool
            if h < 1 or w < 1:
                raise ValueError(f"{self.n_mels}x{self.chunk_len} input does not survive "
                                 f"{block + 1} poolings of {self.pool}")


@dataclass
class TempoBranchConfig:
    kernels: tuple = (3, 3, 5, 5)
    strides: tuple = (2, 3, 3, 5)
    branch_channels: int = 64
    embed_channels: int = 64
    conv2d_kernel: int = 3
    pooled_len: int = 8
    fusion: str = "early"
    fourier_bins: int = 193
    ac_bins: int = 384

    def __post_init__(self):
        self.kernels, self.strides = tuple(self.kernels), tuple(self.strides)
        if len(self.kernels) != 4 or len(self.strides) != 4:
            raise ValueError("the tempo branch has exactly four parallel 1-D convolutions")
        if self.fusion not in ("early", "late"):
            raise ValueError(f"fusion must be 'early' or 'late', got {self.fusion!r}")
        if min(self.branch_channels, self.embed_channels, self.pooled_len) < 1:
            raise ValueError(f"invalid tempo branch config {self}")


@dataclass
class ModelConfig:
    kind: str = "late_fusion"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    tempo: TempoBranchConfig = field(default_factory=TempoBranchConfig)
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.kind = canonical_kind(self.kind)
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if isinstance(self.tempo, dict):
            self.tempo = TempoBranchConfig(**self.tempo)
        if self.kind in ("early_fusion", "late_fusion"):
            self.tempo.fusion = "early" if self.kind == "early_fusion" else "late"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tempo"]["kernels"] = list(self.tempo.kernels)
        d["tempo"]["strides"] = list(self.tempo.strides)
        return d

    @property
    def uses_mel(self) -> bool:
        return self.kind in ("mel_only", "early_fusion", "late_fusion")

    @property
    def uses_fourier(self) -> bool:
        return self.kind in ("ftg_only", "early_fusion", "late_fusion")

    @property
    def uses_autocorrelation(self) -> bool:
        return self.kind in ("actg_only", "early_fusion", "late_fusion")


# --- building blocks -------------------------------------------------------

class ResidualBlock(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, pool: int, rng, dtype):
        pad = kernel // 2
        # No conv bias before batchnorm: the BN shift makes it redundant.
        self.conv1 = Conv2d(in_ch, out_ch, kernel, rng, padding=pad, bias=False, dtype=dtype)
        self.bn1 = BatchNorm(out_ch, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, kernel, rng, padding=pad, bias=False, dtype=dtype)
        self.bn2 = BatchNorm(out_ch, dtype=dtype)
        self.project = Conv2d(in_ch, out_ch, 1, rng, dtype=dtype) if in_ch != out_ch else None
        self.pool = pool

    def forward(self, x: Tensor) -> Tensor:
        y = T.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        skip = self.project(x) if self.project is not None else x
        return T.maxpool2d(T.relu(y + skip), self.pool)


class Backbone(Module):
    """Residual conv stack over Mel chunks -> ``[N, channels]`` feature vector."""

    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32):
        self.cfg = cfg
        chans = [1] + [cfg.channels] * cfg.n_blocks
        self.blocks = [ResidualBlock(chans[i], chans[i + 1], cfg.kernel, cfg.pool, rng, dtype)
                       for i in range(cfg.n_blocks)]

    @property
    def out_features(self) -> int:
        return self.cfg.channels

    def forward(self, mel: Tensor) -> Tensor:
        if mel.ndim == 3:
            mel = T.reshape(mel, (mel.shape[0], 1) + mel.shape[1:])
        if mel.ndim != 4 or mel.shape[1] != 1:
            raise ValueError(f"backbone expects [N, 1, bins, frames] input, got {mel.shape}")
        h = mel
        for block in self.blocks:
            h = block(h)
        return T.global_maxpool(h)


class Classifier(Module):
    """dense -> ReLU -> dropout -> dense."""

    def __init__(self, in_features: int, hidden: int, n_classes: int, p: float, rng, dtype):
        self.dense1 = Dense(in_features, hidden, rng, dtype=dtype)
        self.dropout = Dropout(p, np.random.default_rng(rng.integers(2 ** 63)))
        self.dense2 = Dense(hidden, n_classes, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.dense2(self.dropout(T.relu(self.dense1(x))))


class TempoBranch(Module):
    """Four parallel strided 1-D convs per input group, then 2-D conv + global max."""

    def __init__(self, cfg: TempoBranchConfig, group_bins: list[int], rng, dtype=np.float32):
        self.cfg = cfg
        self.group_bins = list(group_bins)
        self.convs = [Conv1d(bins, cfg.branch_channels, k, rng, stride=s, dtype=dtype)
                      for bins in self.group_bins
                      for k, s in zip(cfg.kernels, cfg.strides)]
        self.conv2d = Conv2d(cfg.branch_channels, cfg.embed_channels, cfg.conv2d_kernel, rng,
                             padding=cfg.conv2d_kernel // 2, dtype=dtype)

    @property
    def out_features(self) -> int:
        return self.cfg.embed_channels

    def forward(self, groups: list[Tensor]) -> Tensor:
        if len(groups) != len(self.group_bins):
            raise ValueError(f"tempo branch expects {len(self.group_bins)} inputs, got {len(groups)}")
        frames = {g.shape[2] for g in groups}
        if len(frames) != 1:
            raise ValueError(f"tempogram chunks must share their time extent, got {sorted(frames)}")
        stacked = []
        for gi, (g, bins) in enumerate(zip(groups, self.group_bins)):
            if g.ndim != 3 or g.shape[1] != bins:
                raise ValueError(f"tempo input {gi} must be [N, {bins}, frames], got {g.shape}")
            for conv in self.convs[4 * gi:4 * gi + 4]:
                y = T.mean_pool(T.relu(conv(g)), self.cfg.pooled_len)
                stacked.append(T.reshape(y, (y.shape[0], y.shape[1], 1, y.shape[2])))
        fmap = T.concat(stacked, axis=2)  # [N, branch_channels, n_convs, pooled_len]
        return T.global_maxpool(T.relu(self.conv2d(fmap)))


# --- full models ---------------------------------------------------------------

class EDMClassifier(Module):
    """Any of the five model kinds; unused inputs are ignored.

    ``forward`` takes batched chunks ``mel [N, n_mels, T]``,
    ``fourier [N, 193, T]`` and ``autocorrelation [N, 384, T]`` (arrays or
    tensors) and returns ``[N, n_classes]`` logits.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed)
        bb, tc = cfg.backbone, cfg.tempo
        self.backbone = Backbone(bb, rng, dtype) if cfg.uses_mel else None
        if cfg.kind == "ftg_only":
            groups = [tc.fourier_bins]
        elif cfg.kind == "actg_only":
            groups = [tc.ac_bins]
        elif cfg.kind == "early_fusion":
            groups = [tc.fourier_bins + tc.ac_bins]
        elif cfg.kind == "late_fusion":
            groups = [tc.fourier_bins, tc.ac_bins]
        else:
            groups = []
        self.tempo = TempoBranch(tc, groups, rng, dtype) if groups else None
        width = (self.backbone.out_features if self.backbone else 0) + \
                (self.tempo.out_features if self.tempo else 0)
        self.classifier = Classifier(width, bb.hidden, bb.n_classes, bb.dropout, rng, dtype)

    @property
    def kind(self) -> str:
        return self.cfg.kind

    def _as_tensor(self, x, name: str) -> Tensor:
        if x is None:
            raise ValueError(f"{self.kind} model needs the {name} input")
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.dtype))

    def tempo_groups(self, fourier, autocorrelation) -> list[Tensor]:
        kind = self.kind
        if kind == "ftg_only":
            return [self._as_tensor(fourier, "fourier")]
        if kind == "actg_only":
            return [self._as_tensor(autocorrelation, "autocorrelation")]
        ftg = self._as_tensor(fourier, "fourier")
        actg = self._as_tensor(autocorrelation, "autocorrelation")
        if kind == "early_fusion":
            if ftg.shape[2] != actg.shape[2]:
                raise ValueError(f"tempogram time extents differ: {ftg.shape[2]} vs {actg.shape[2]}")
            return [T.concat([ftg, actg], axis=1)]
        return [ftg, actg]

    def features(self, mel=None, fourier=None, autocorrelation=None) -> Tensor:
        """Input to the classifier block (backbone features and/or tempo embedding)."""
        parts = []
        if self.backbone is not None:
            parts.append(self.backbone(self._as_tensor(mel, "mel")))
        if self.tempo is not None:
            parts.append(self.tempo(self.tempo_groups(fourier, autocorrelation)))
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=1)

    def forward(self, mel=None, fourier=None, autocorrelation=None) -> Tensor:
        return self.classifier(self.features(mel, fourier, autocorrelation))

    def predict_proba(self, mel=None, fourier=None, autocorrelation=None) -> np.ndarray:
        return T.softmax(self.forward(mel, fourier, autocorrelation)).data


def build_model(cfg: ModelConfig) -> EDMClassifier:
    return EDMClassifier(cfg)


def build_backbone(cfg: BackboneConfig, seed: int = 0, dtype=np.float32) -> EDMClassifier:
    """Mel-only model: backbone plus classifier block."""
    return EDMClassifier(ModelConfig("mel_only", backbone=cfg, seed=seed, dtype=np.dtype(dtype).name))


def forward_tempo_branch(model: EDMClassifier, ftg_chunk, actg_chunk) -> Tensor:
    if model.tempo is None:
        raise ValueError(f"{model.kind} model has no tempo branch")
    return model.tempo(model.tempo_groups(ftg_chunk, actg_chunk))


def forward_fusion(model: EDMClassifier, mel_chunk, ftg_chunk, actg_chunk) -> Tensor:
    if model.kind not in ("early_fusion", "late_fusion"):
        raise ValueError(f"{model.kind} is not a fusion model")
    return model(mel_chunk, ftg_chunk, actg_chunk)


def forward_tempogram_only(model: EDMClassifier, tg_chunk) -> Tensor:
    if model.kind == "ftg_only":
        return model(fourier=tg_chunk)
    if model.kind == "actg_only":
        return model(autocorrelation=tg_chunk)
    raise ValueError(f"{model.kind} is not a tempogram-only model")


# --- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    model: EDMClassifier
    class_names: list[str]
    stats: dict[str, F.NormalizationStats] = field(default_factory=dict)
    feature_config: F.FeatureConfig = field(default_factory=F.FeatureConfig)
    optimizer: AdamState | None = None
    meta: dict = field(default_factory=dict)


def _as_matrix(a: np.ndarray) -> np.ndarray:
    return a.reshape(1, -1) if a.ndim <= 1 else a.reshape(a.shape[0], -1)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write a checkpoint atomically.

    Layout: ``b"TFCK" | u32 version | u32 len | canonical JSON | u32 n_tensors |
    tensors in the feature-file matrix framing | u32 CRC32``. Tensors are
    stored as float32.
    """
    model = ckpt.model
    if model.dtype != np.float32:
        raise CheckpointError(f"checkpoints store float32 tensors; got a {model.dtype} model")
    if len(ckpt.class_names) != model.cfg.backbone.n_classes:
        raise CheckpointError(f"{len(ckpt.class_names)} class names for "
                              f"{model.cfg.backbone.n_classes} classes")
    tensors: list[tuple[int, str, np.ndarray]] = []
    tensors += [(TAG_PARAM, n, p.data) for n, p in model.named_parameters()]
    tensors += [(TAG_BUFFER, n, b) for n, b in model.named_buffers()]
    stat_kinds = sorted(ckpt.stats)
    tensors += [(F.STATS, k, ckpt.stats[k].to_matrix()) for k in stat_kinds]
    opt = ckpt.optimizer
    if opt is not None and opt.m:
        names = [n for n, _ in model.named_parameters()]
        tensors += [(TAG_ADAM_M, n, m) for n, m in zip(names, opt.m)]
        tensors += [(TAG_ADAM_V, n, v) for n, v in zip(names, opt.v)]
    header = {
        "model": model.cfg.to_dict(),
        "class_names": list(ckpt.class_names),
        "feature_config": ckpt.feature_config.to_dict(),
        "optimizer_step": opt.t if opt is not None and opt.m else None,
        "tensors": [{"tag": tag, "name": name, "shape": list(a.shape)} for tag, name, a in tensors],
        "meta": ckpt.meta,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob
    body += struct.pack("<I", len(tensors))
    body += b"".join(F.encode_matrix(tag, _as_matrix(a)) for tag, _, a in tensors)
    F.atomic_write(path, F.seal(body))


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: unreadable ({exc.strerror})") from exc
    try:
        body = F.unseal(buf, CKPT_MAGIC, os.fspath(path))
    except F.FeatureFileError as exc:
        raise CheckpointError(str(exc)) from exc
    version, blob_len = struct.unpack_from("<II", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    off = 12
    header = json.loads(body[off:off + blob_len].decode("utf-8"))
    off += blob_len
    (count,) = struct.unpack_from("<I", body, off)
    try:
        matrices, end = F.decode_matrices(body, off + 4, count)
    except F.FeatureFileError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if end != len(body) or len(matrices) != len(header["tensors"]):
        raise CheckpointError(f"{path}: tensor table does not match payload")

    cfg = ModelConfig(**header["model"])
    model = build_model(cfg)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    stats, adam_m, adam_v = {}, {}, {}
    for entry, (tag, mat) in zip(header["tensors"], matrices):
        name, shape = entry["name"], tuple(entry["shape"])
        if tag != entry["tag"]:
            raise CheckpointError(f"{path}: tag mismatch for {name}")
        arr = mat.reshape(shape)
        if tag == TAG_PARAM:
            if name not in params or params[name].shape != shape:
                raise CheckpointError(f"{path}: parameter {name} {shape} does not fit the config")
            params[name].data[...] = arr
            params.pop(name)
        elif tag == TAG_BUFFER:
            if name not in buffers or buffers[name].shape != shape:
                raise CheckpointError(f"{path}: buffer {name} {shape} does not fit the config")
            buffers[name][...] = arr
        elif tag == F.STATS:
            try:
                stats[name] = F.NormalizationStats.from_matrix(arr, name)
            except ValueError as exc:
                raise CheckpointError(f"{path}: {exc}") from exc
        elif tag == TAG_ADAM_M:
            adam_m[name] = arr.astype(np.float64)
        elif tag == TAG_ADAM_V:
            adam_v[name] = arr.astype(np.float64)
        else:
            raise CheckpointError(f"{path}: unknown tensor tag {tag}")
    if params:
        raise CheckpointError(f"{path}: missing parameters {sorted(params)}")
    optimizer = None
    if header.get("optimizer_step") is not None:
        names = [n for n, _ in model.named_parameters()]
        optimizer = AdamState([adam_m[n] for n in names], [adam_v[n] for n in names],
                              header["optimizer_step"])
    model.eval()
    return Checkpoint(model, header["class_names"], stats,
                      F.FeatureConfig.from_dict(header["feature_config"]), optimizer,
                      header.get("meta", {}))
