"""CRNN audio tagger / event detector with optional pretrained-feature fusion.

The spectral branch is seven stacks of (conv 3x3, batch norm, ReLU,
dropout, average pool).  The pooling schedule halves time twice and
frequency seven times, so a [B,1,T,128] spectral map comes out as
[B, T/4, 128] convolutional embeddings.  Pretrained auditory/visual
features arrive already at T/4 frames, are projected through a linear
layer + ReLU (+ dropout at train time) and concatenated with the
convolutional embeddings in the fixed order (spectral, audio, visual).
A two-layer BiGRU, a linear layer and a sigmoid produce frame-level
probabilities; self-weighted linear pooling aggregates them per clip.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .layers import AvgPool2d, BatchNorm2d, BiGru, Conv2d, Dropout, Linear, ReLU, Sigmoid
from .tensor import ConfigError, DataError, ShapeError

CONV_CHANNELS = (16, 32, 64, 128, 128, 128, 128)
POOL_SCHEDULE = ((2, 2), (2, 2), (1, 2), (1, 2), (1, 2), (1, 2), (1, 2))
FREQ_BINS = 128          # seven frequency poolings of 2 need exactly 2**7 bins
TIME_REDUCTION = 4       # product of the temporal pooling factors
CONV_EMBED_DIM = CONV_CHANNELS[-1]


@dataclass
class CrnnConfig:
    use_spectral: bool = True
    use_pre_audio: bool = False
    use_pre_visual: bool = False
    n_classes: int = 10
    pre_audio_dim: int = 128
    pre_visual_dim: int = 4096
    emb_audio: Optional[int] = None
    emb_visual: Optional[int] = None
    dropout_rate: float = 0.33
    gru_hidden: int = 128

    def __post_init__(self):
        if not (self.use_spectral or self.use_pre_audio or self.use_pre_visual):
            raise ConfigError("at least one input modality must be enabled")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be positive")
        # embedding sizes tuned jointly with vs. without the spectral branch
        if self.emb_audio is None:
            self.emb_audio = 16 if self.use_spectral else 64
        if self.emb_visual is None:
            self.emb_visual = 4 if self.use_spectral else 16

    @property
    def fused_dim(self) -> int:
        d = 0
        if self.use_spectral:
            d += CONV_EMBED_DIM
        if self.use_pre_audio:
            d += self.emb_audio
        if self.use_pre_visual:
            d += self.emb_visual
        return d


@dataclass
class ModelInput:
    """One forward batch; absent modalities stay None.

    ``valid_frames[b]`` is the number of real (non-padding) output frames
    of clip b; None means every frame is valid.
    """

    spectral: Optional[np.ndarray] = None       # [B, 1, T, 128]
    pre_audio: Optional[np.ndarray] = None      # [B, T/4, Da]
    pre_visual: Optional[np.ndarray] = None     # [B, T/4, Dv]
    valid_frames: Optional[np.ndarray] = None   # [B] ints


def linear_pool(frame_probs):
    """Self-weighted average over time: sum(p^2) / sum(p) per class.

    All-zero columns pool to 0 (the continuous extension of the ratio).
    Input [T, n_classes] -> output [n_classes].
    """
    p = np.asarray(frame_probs)
    s = p.sum(axis=0)
    q = (p * p).sum(axis=0)
    out = np.zeros_like(s)
    np.divide(q, s, out=out, where=s > 0)
    return out


def linear_pool_batch(frame_probs, mask):
    """Masked linear pooling: [B,T,n] with boolean mask [B,T] -> [B,n]."""
    m = mask[:, :, None]
    p = frame_probs * m
    s = p.sum(axis=1)
    q = (p * p).sum(axis=1)
    out = np.zeros_like(s)
    np.divide(q, s, out=out, where=s > 0)
    return out


def linear_pool_batch_backward(frame_probs, mask, clip_probs, d_clip):
    """d(pool)/d(frame) = (2 p_t - pooled) / sum(p), zero off-mask and at 0/0."""
    m = mask[:, :, None]
    p = frame_probs * m
    s = p.sum(axis=1)
    inv = np.zeros_like(s)
    np.divide(1.0, s, out=inv, where=s > 0)
    g = d_clip[:, None, :] * (2.0 * p - clip_probs[:, None, :]) * inv[:, None, :]
    return g * m


def _valid_mask(batch, t_out, valid_frames, dtype):
    if valid_frames is None:
        return np.ones((batch, t_out), dtype=dtype)
    mask = np.zeros((batch, t_out), dtype=dtype)
    for b, n in enumerate(valid_frames):
        mask[b, : int(n)] = 1.0
    return mask


class CrnnModel:
    """Baseline CRNN plus fusion projections, with full backward support."""

    def __init__(self, config: CrnnConfig, rng=None, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.convs = []
        self.bns = []
        self.relus = []
        self.drops = []
        self.pools = []
        if config.use_spectral:
            cin = 1
            for cout, pool in zip(CONV_CHANNELS, POOL_SCHEDULE):
                self.convs.append(Conv2d(cin, cout, rng, dtype))
                self.bns.append(BatchNorm2d(cout, dtype=dtype))
                self.relus.append(ReLU())
                self.drops.append(Dropout(config.dropout_rate))
                self.pools.append(AvgPool2d(*pool))
                cin = cout
        self.proj_audio = self.proj_visual = None
        if config.use_pre_audio:
            self.proj_audio = Linear(config.pre_audio_dim, config.emb_audio, rng, dtype)
            self.proj_audio_relu = ReLU()
            self.proj_audio_drop = Dropout(config.dropout_rate)
        if config.use_pre_visual:
            self.proj_visual = Linear(config.pre_visual_dim, config.emb_visual, rng, dtype)
            self.proj_visual_relu = ReLU()
            self.proj_visual_drop = Dropout(config.dropout_rate)
        self.gru = BiGru(config.fused_dim, config.gru_hidden, num_layers=2, rng=rng, dtype=dtype)
        self.head = Linear(2 * config.gru_hidden, config.n_classes, rng, dtype)
        self.head_sig = Sigmoid()
        self._cache = None

    # ---- parameter bookkeeping -------------------------------------------

    def named_params(self):
        out = {}
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            out[f"conv{i}/weight"] = conv.weight
            out[f"conv{i}/bias"] = conv.bias
            out[f"bn{i}/gamma"] = bn.gamma
            out[f"bn{i}/beta"] = bn.beta
        if self.proj_audio is not None:
            out["proj_audio/weight"] = self.proj_audio.weight
            out["proj_audio/bias"] = self.proj_audio.bias
        if self.proj_visual is not None:
            out["proj_visual/weight"] = self.proj_visual.weight
            out["proj_visual/bias"] = self.proj_visual.bias
        for layer, (fwd, bwd) in enumerate(self.gru.layers):
            for tag, d in (("fw", fwd), ("bw", bwd)):
                out[f"gru/l{layer}{tag}/W"] = d.W
                out[f"gru/l{layer}{tag}/U"] = d.U
                out[f"gru/l{layer}{tag}/bx"] = d.bx
                out[f"gru/l{layer}{tag}/bh"] = d.bh
        out["head/weight"] = self.head.weight
        out["head/bias"] = self.head.bias
        return out

    def named_buffers(self):
        out = {}
        for i, bn in enumerate(self.bns):
            out[f"bn{i}/running_mean"] = bn.running_mean
            out[f"bn{i}/running_var"] = bn.running_var
        return out

    def zero_grads(self):
        for p in self.named_params().values():
            p.zero_grad()

    def copy_weights_from(self, other: "CrnnModel"):
        mine, theirs = self.named_params(), other.named_params()
        if mine.keys() != theirs.keys():
            raise ShapeError("model architectures differ; cannot copy weights")
        for name, p in mine.items():
            p.value[...] = theirs[name].value
        for i, bn in enumerate(self.bns):
            bn.set_buffers(other.bns[i].running_mean, other.bns[i].running_var)

    # ---- forward / backward ----------------------------------------------

    def cnn_encode(self, spectral, train, rng=None, cache=True, track_bn=True):
        """[B,1,T,128] -> [B,T/4,128]; frequency axis collapses to one."""
        x = spectral
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"spectral input must be [B,1,T,F], got {list(x.shape)}")
        if x.shape[3] != FREQ_BINS:
            raise ConfigError(
                f"spectral input needs exactly {FREQ_BINS} frequency bins "
                f"(seven poolings of 2), got {x.shape[3]}")
        if x.shape[2] % TIME_REDUCTION:
            raise ShapeError(
                f"spectral frame count {x.shape[2]} not divisible by {TIME_REDUCTION}")
        for conv, bn, rl, drop, pool in zip(self.convs, self.bns, self.relus,
                                            self.drops, self.pools):
            x = conv.forward(x, cache=cache)
            x = bn.forward(x, train=train, cache=cache, track=track_bn)
            x = rl.forward(x, cache=cache)
            x = drop.forward(x, train=train, rng=rng, cache=cache)
            x = pool.forward(x, cache=cache)
        # [B, 128, T/4, 1] -> [B, T/4, 128]
        return np.ascontiguousarray(x[:, :, :, 0].transpose(0, 2, 1))

    def _cnn_decode_grad(self, grad):
        g = np.ascontiguousarray(grad.transpose(0, 2, 1))[:, :, :, None]
        for conv, bn, rl, drop, pool in zip(reversed(self.convs), reversed(self.bns),
                                            reversed(self.relus), reversed(self.drops),
                                            reversed(self.pools)):
            g = pool.backward(g)
            g = drop.backward(g)
            g = rl.backward(g)
            g = bn.backward(g)
            g = conv.backward(g)
        return g

    def project_pretrained(self, features, which, train, rng=None, cache=True):
        """Linear projection + ReLU (+ dropout at train time) of one
        pretrained stream; output trailing dim is the embedding size."""
        proj = self.proj_audio if which == "audio" else self.proj_visual
        rl = self.proj_audio_relu if which == "audio" else self.proj_visual_relu
        drop = self.proj_audio_drop if which == "audio" else self.proj_visual_drop
        expected = self.config.pre_audio_dim if which == "audio" else self.config.pre_visual_dim
        if features.shape[-1] != expected:
            raise ShapeError(
                f"pretrained {which} features have dim {features.shape[-1]}, "
                f"model expects {expected}")
        x = proj.forward(features, cache=cache)
        x = rl.forward(x, cache=cache)
        return drop.forward(x, train=train, rng=rng, cache=cache)

    def _project_grad(self, grad, which):
        rl = self.proj_audio_relu if which == "audio" else self.proj_visual_relu
        drop = self.proj_audio_drop if which == "audio" else self.proj_visual_drop
        proj = self.proj_audio if which == "audio" else self.proj_visual
        g = drop.backward(grad)
        g = rl.backward(g)
        return proj.backward(g)

    @staticmethod
    def fuse(streams):
        """Concatenate [B,T,.] streams along features; temporal extents must
        already agree (the 4:1 spectral-to-pretrained alignment)."""
        t0 = streams[0].shape[1]
        for s in streams[1:]:
            if s.shape[1] != t0:
                raise ShapeError(
                    f"stream alignment violated: {s.shape[1]} frames vs {t0} "
                    "(pretrained streams must arrive at spectral_frames/4)")
        if len(streams) == 1:
            return streams[0]
        return np.concatenate(streams, axis=-1)

    def forward(self, inp: ModelInput, train=False, rng=None, cache=True, track_bn=True):
        """Run the network; returns (frame_probs [B,T',n], clip_probs [B,n])."""
        cfg = self.config
        streams = []
        dims = []
        if cfg.use_spectral:
            if inp.spectral is None:
                raise DataError("model config enables spectral input but none was given")
            streams.append(self.cnn_encode(inp.spectral, train, rng, cache, track_bn))
            dims.append(CONV_EMBED_DIM)
        if cfg.use_pre_audio:
            if inp.pre_audio is None:
                raise DataError("model config enables pretrained audio but none was given")
            streams.append(self.project_pretrained(inp.pre_audio, "audio", train, rng, cache))
            dims.append(cfg.emb_audio)
        if cfg.use_pre_visual:
            if inp.pre_visual is None:
                raise DataError("model config enables pretrained visual but none was given")
            streams.append(self.project_pretrained(inp.pre_visual, "visual", train, rng, cache))
            dims.append(cfg.emb_visual)
        fused = self.fuse(streams)
        h = self.gru.forward(fused, cache=cache)
        logits = self.head.forward(h, cache=cache)
        frame_probs = self.head_sig.forward(logits, cache=cache)
        b, t_out, _ = frame_probs.shape
        mask = _valid_mask(b, t_out, inp.valid_frames, frame_probs.dtype)
        clip_probs = linear_pool_batch(frame_probs, mask)
        self._cache = (frame_probs, mask, dims) if cache else None
        return frame_probs, clip_probs

    def backward(self, d_frame_probs=None, d_clip_probs=None):
        """Backpropagate loss gradients w.r.t. the two outputs; accumulates
        parameter gradients and returns gradients w.r.t. the inputs."""
        if self._cache is None:
            raise RuntimeError("model backward before forward")
        frame_probs, mask, dims = self._cache
        total = np.zeros_like(frame_probs)
        if d_frame_probs is not None:
            total += d_frame_probs * mask[:, :, None]
        if d_clip_probs is not None:
            clip_probs = linear_pool_batch(frame_probs, mask)
            total += linear_pool_batch_backward(frame_probs, mask, clip_probs, d_clip_probs)
        g = self.head_sig.backward(total)
        g = self.head.backward(g)
        g = self.gru.backward(g)
        grads = {}
        offset = 0
        cfg = self.config
        order = []
        if cfg.use_spectral:
            order.append(("spectral", CONV_EMBED_DIM))
        if cfg.use_pre_audio:
            order.append(("pre_audio", cfg.emb_audio))
        if cfg.use_pre_visual:
            order.append(("pre_visual", cfg.emb_visual))
        for name, dim in order:
            part = np.ascontiguousarray(g[..., offset:offset + dim])
            offset += dim
            if name == "spectral":
                grads[name] = self._cnn_decode_grad(part)
            elif name == "pre_audio":
                grads[name] = self._project_grad(part, "audio")
            else:
                grads[name] = self._project_grad(part, "visual")
        return grads


# ---- checkpoint container ------------------------------------------------

_META_NAME = "meta/config"
_META_VERSION = 1.0


def _encode_config(cfg: CrnnConfig) -> np.ndarray:
    vals = [_META_VERSION, float(cfg.use_spectral), float(cfg.use_pre_audio),
            float(cfg.use_pre_visual), float(cfg.n_classes), float(cfg.pre_audio_dim),
            float(cfg.pre_visual_dim), float(cfg.emb_audio), float(cfg.emb_visual),
            float(cfg.dropout_rate), float(cfg.gru_hidden)]
    return np.asarray(vals, dtype=np.float32)


def _decode_config(vec: np.ndarray) -> CrnnConfig:
    if vec.ndim != 1 or vec.shape[0] != 11 or vec[0] != _META_VERSION:
        raise DataError("unrecognized model checkpoint header")
    return CrnnConfig(
        use_spectral=bool(vec[1]), use_pre_audio=bool(vec[2]), use_pre_visual=bool(vec[3]),
        n_classes=int(vec[4]), pre_audio_dim=int(vec[5]), pre_visual_dim=int(vec[6]),
        emb_audio=int(vec[7]), emb_visual=int(vec[8]),
        dropout_rate=float(vec[9]), gru_hidden=int(vec[10]))


def save_model(path, model: CrnnModel):
    """Write config header, parameters and batch-norm buffers to one
    feature container file."""
    from .dataio import write_feature_file

    tensors = {_META_NAME: _encode_config(model.config)}
    for name, p in model.named_params().items():
        tensors[name] = p.value
    for name, buf in model.named_buffers().items():
        tensors[name] = buf
    write_feature_file(path, tensors)


def load_model(path) -> CrnnModel:
    from .dataio import read_feature_file

    tensors = read_feature_file(path)
    if _META_NAME not in tensors:
        raise DataError(f"{path}: not a model checkpoint (missing {_META_NAME})")
    cfg = _decode_config(tensors[_META_NAME])
    model = CrnnModel(cfg, rng=None, dtype=np.float32)
    for name, p in model.named_params().items():
        if name not in tensors:
            raise DataError(f"{path}: checkpoint is missing parameter '{name}'")
        if tuple(tensors[name].shape) != tuple(p.shape):
            raise ShapeError(
                f"{path}: parameter '{name}' has shape {list(tensors[name].shape)}, "
                f"expected {list(p.shape)}")
        p.value[...] = tensors[name]
    for i, bn in enumerate(model.bns):
        bn.set_buffers(tensors[f"bn{i}/running_mean"], tensors[f"bn{i}/running_var"])
    return model


def clone_model(model: CrnnModel) -> CrnnModel:
    """Deep copy with identical weights, buffers and config."""
    twin = CrnnModel(replace(model.config), rng=None, dtype=model.dtype)
    twin.copy_weights_from(model)
    return twin
