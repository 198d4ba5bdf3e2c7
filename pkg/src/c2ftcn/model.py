"""Encoder / pyramid-pooling bottleneck / decoder segmentation network."""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from pathlib import Path

import numpy as np

from . import seqgrad as sg
from .seqgrad import BatchNormState, ShapeError, Tensor

TIME_MULTIPLE = 64
N_LEVELS = 6


@dataclasses.dataclass
class ModelConfig:
    d_in: int = 2048
    num_classes: int = 48
    num_activities: int = 10
    encoder_widths: tuple[int, ...] = (256, 256, 256, 128, 128, 128, 128)
    decoder_width: int = 128
    tpp_windows: tuple[int, ...] = (2, 3, 5, 6)
    mlp_hidden: int = 256
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.tpp_windows = tuple(int(w) for w in self.tpp_windows)
        if len(self.encoder_widths) != N_LEVELS + 1:
            raise ValueError(f"need {N_LEVELS + 1} encoder widths, got {len(self.encoder_widths)}")
        if not self.tpp_windows or min(self.tpp_windows) < 2:
            raise ValueError("tpp_windows must be nonempty with every window >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_activities < 1:
            raise ValueError("num_activities must be >= 1")

    @property
    def d0(self) -> int:
        return self.encoder_widths[0]

    @property
    def bottleneck_width(self) -> int:
        return self.encoder_widths[-1] + len(self.tpp_windows)

    def decoder_in_widths(self) -> tuple[int, ...]:
        """Channel count entering each decoder double_conv (after the skip concat)."""
        widths = [self.bottleneck_width + self.encoder_widths[N_LEVELS - 1]]
        for i in range(2, N_LEVELS + 1):
            widths.append(self.decoder_width + self.encoder_widths[N_LEVELS - i])
        return tuple(widths)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclasses.dataclass
class LayerOutputs:
    encoder: list[Tensor]          # Φ0..Φ6
    bottleneck: Tensor             # Γ output, T_en x (d_en + #windows)
    probs: list[Tensor]            # p(1)..p(6), coarse to fine
    masks: list[np.ndarray]        # valid-frame masks matching ``probs``

    @property
    def features(self) -> Tensor:
        return self.encoder[-1]


def pad_to_multiple(f: np.ndarray, multiple: int = TIME_MULTIPLE):
    """Replicate the last frame until the length is a multiple of ``multiple`` (at least one multiple).

    Returns the padded array and a boolean mask of the original frames.
    """
    f = np.asarray(f)
    T = f.shape[0]
    if T < 1:
        raise ShapeError("cannot pad an empty sequence")
    t_pad = max(multiple, -(-T // multiple) * multiple)
    mask = np.zeros(t_pad, dtype=bool)
    mask[:T] = True
    if t_pad == T:
        return f.copy(), mask
    tail = np.repeat(f[-1:], t_pad - T, axis=0)
    return np.concatenate([f, tail], axis=0), mask


def level_masks(mask: np.ndarray) -> list[np.ndarray]:
    """Valid-frame masks at input resolution and after each halving (levels 0..6)."""
    mask = np.asarray(mask, dtype=bool)
    lengths = mask.sum(axis=-1)
    t_in = mask.shape[-1]
    out = []
    for lvl in range(N_LEVELS + 1):
        t = t_in >> lvl
        valid = -(-lengths // (1 << lvl))
        out.append(np.arange(t) < np.asarray(valid)[..., None])
    return out


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class C2FTCN:
    """Parameters and forward pass of the coarse-to-fine TCN.

    Inputs are ``(B, T, d)`` arrays with ``T`` a multiple of 64 and a
    ``(B, T)`` valid-frame mask.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        rng = np.random.default_rng(seed)
        cfg = config
        w = cfg.encoder_widths
        self._double_conv("enc0", cfg.d_in, w[0], rng)
        for i in range(1, N_LEVELS + 1):
            self._double_conv(f"enc{i}", w[i - 1], w[i], rng)
        self._conv("tpp.collapse", w[-1], 1, 1, rng)
        self._conv("tpp.conv", cfg.bottleneck_width, cfg.bottleneck_width, 3, rng)
        for i, c_in in enumerate(cfg.decoder_in_widths(), start=1):
            self._double_conv(f"dec{i}", c_in, cfg.decoder_width, rng)
        for i in range(1, N_LEVELS + 1):
            self._conv(f"head{i}", cfg.decoder_width, cfg.num_classes, 1, rng)
        self._linear("rec.fc1", cfg.num_classes, cfg.mlp_hidden, rng)
        self._linear("rec.fc2", cfg.mlp_hidden, cfg.num_activities, rng)

    # -------------------------------------------------------------- construction

    def _conv(self, name, c_in, c_out, k, rng):
        fan_in = c_in * k
        self.params[f"{name}.weight"] = Tensor(_uniform(rng, (c_out, c_in, k), fan_in), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(_uniform(rng, (c_out,), fan_in), requires_grad=True)

    def _linear(self, name, c_in, c_out, rng):
        self.params[f"{name}.weight"] = Tensor(_uniform(rng, (c_out, c_in), c_in), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(_uniform(rng, (c_out,), c_in), requires_grad=True)

    def _double_conv(self, name, c_in, c_out, rng):
        self._conv(f"{name}.conv1", c_in, c_out, 3, rng)
        self._add_bn(f"{name}.bn1", c_out)
        self._conv(f"{name}.conv2", c_out, c_out, 3, rng)
        self._add_bn(f"{name}.bn2", c_out)

    def _add_bn(self, name, channels):
        state = BatchNormState.create(channels, momentum=self.config.bn_momentum)
        self.bn[name] = state
        self.params[f"{name}.gamma"] = state.gamma
        self.params[f"{name}.beta"] = state.beta

    # -------------------------------------------------------------- parameter views

    def segmentation_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if not k.startswith("rec.")}

    def recognition_head_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("rec.")}

    def count_parameters(self, which: str = "all") -> int:
        """Trainable scalar count; ``which`` is one of all, core, heads, recognition."""
        def keep(name):
            if which == "all":
                return True
            if which == "core":
                return not name.startswith(("head", "rec."))
            if which == "heads":
                return name.startswith("head")
            if which == "recognition":
                return name.startswith("rec.")
            raise ValueError(which)
        return sum(t.data.size for k, t in self.params.items() if keep(k))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -------------------------------------------------------------- forward

    def _conv_apply(self, name, x):
        return sg.conv1d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def double_conv(self, name, x, mask, training):
        h = self._conv_apply(f"{name}.conv1", x)
        h = sg.relu(sg.batchnorm(h, self.bn[f"{name}.bn1"], training, mask))
        h = self._conv_apply(f"{name}.conv2", h)
        return sg.relu(sg.batchnorm(h, self.bn[f"{name}.bn2"], training, mask))

    def encoder_forward(self, x, masks, training=True) -> list[Tensor]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        t_in = x.shape[-2]
        if t_in % TIME_MULTIPLE:
            raise ShapeError(f"input length {t_in} is not a multiple of {TIME_MULTIPLE}; pad it first")
        if x.shape[-1] != self.config.d_in:
            raise ShapeError(f"input has {x.shape[-1]} channels, model expects {self.config.d_in}")
        outs = [self.double_conv("enc0", x, masks[0], training)]
        for i in range(1, N_LEVELS + 1):
            h = sg.maxpool1d(outs[-1], 2)
            outs.append(self.double_conv(f"enc{i}", h, masks[i], training))
        return outs

    def bottleneck_forward(self, f_en: Tensor) -> Tensor:
        t_en = f_en.shape[-2]
        wc = self.params["tpp.collapse.weight"]
        bc = self.params["tpp.collapse.bias"]
        branches = []
        for w in self.config.tpp_windows:
            pooled = sg.maxpool1d(f_en, min(w, t_en))
            collapsed = sg.conv1d(pooled, wc, bc)
            branches.append(sg.upsample_linear(collapsed, t_en))
        h = sg.concat(branches + [f_en], axis=-1)
        return self._conv_apply("tpp.conv", h)

    def decoder_forward(self, bottleneck: Tensor, skips: list[Tensor], masks, training=True):
        h = bottleneck
        probs = []
        for i in range(1, N_LEVELS + 1):
            skip = skips[N_LEVELS - i]
            up = sg.upsample_linear(h, 2 * h.shape[-2])
            if up.shape[:-1] != skip.shape[:-1]:
                raise ShapeError(f"decoder {i}: upsampled {up.shape} vs skip {skip.shape}")
            h = self.double_conv(f"dec{i}", sg.concat([up, skip], axis=-1), masks[N_LEVELS - i], training)
            probs.append(sg.softmax_rows(self._conv_apply(f"head{i}", h)))
        return probs

    def forward(self, x, mask=None, training=True) -> LayerOutputs:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if mask is None:
            mask = np.ones(x.shape[:-1], dtype=bool)
        masks = level_masks(mask)
        enc = self.encoder_forward(x, masks, training)
        bott = self.bottleneck_forward(enc[-1])
        probs = self.decoder_forward(bott, enc, masks, training)
        return LayerOutputs(enc, bott, probs, [masks[N_LEVELS - i] for i in range(1, N_LEVELS + 1)])

    def recognition_forward(self, p: Tensor, mask=None) -> Tensor:
        """Activity distribution from the per-class temporal max of log-probabilities."""
        p = p if isinstance(p, Tensor) else Tensor(p)
        pooled = sg.temporal_max(sg.log(p), mask)
        h = sg.relu(sg.linear(pooled, self.params["rec.fc1.weight"], self.params["rec.fc1.bias"]))
        logits = sg.linear(h, self.params["rec.fc2.weight"], self.params["rec.fc2.bias"])
        return sg.softmax_rows(logits)

    # -------------------------------------------------------------- state

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        expected = self.state_arrays()
        missing = set(expected) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
        for k, v in arrays.items():
            if k not in expected:
                raise KeyError(f"unexpected tensor {k!r}")
            if expected[k].shape != v.shape:
                raise ShapeError(f"{k}: shape {v.shape} != {expected[k].shape}")
        for k, t in self.params.items():
            t.data = np.array(arrays[k], dtype=np.float64)
            t.zero_grad()
        for name, st in self.bn.items():
            st.running_mean = np.array(arrays[f"{name}.running_mean"], dtype=np.float64)
            st.running_var = np.array(arrays[f"{name}.running_var"], dtype=np.float64)


# ------------------------------------------------------------------ checkpoints

CKPT_MAGIC = b"C2FC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: C2FTCN, path) -> None:
    """Binary container: magic, version, config JSON, then named float64 tensors."""
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    arrays = model.state_arrays()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<III", CKPT_VERSION, len(cfg), len(arrays)))
        fh.write(cfg)
        for name, arr in arrays.items():
            raw = name.encode()
            fh.write(struct.pack("<HI", len(raw), arr.ndim))
            fh.write(raw)
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> C2FTCN:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, cfg_len, n = struct.unpack_from("<III", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    config = ModelConfig.from_dict(json.loads(buf[off:off + cfg_len]))
    off += cfg_len
    arrays = {}
    try:
        for _ in range(n):
            name_len, ndim = struct.unpack_from("<HI", buf, off)
            off += 6
            name = buf[off:off + name_len].decode()
            off += name_len
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 8
            if off + size > len(buf):
                raise CheckpointError(f"{path}: truncated tensor {name!r} at byte {off}")
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=off).reshape(shape).astype(np.float64)
            off += size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header at byte {off}") from exc
    model = C2FTCN(config)
    model.load_state_arrays(arrays)
    return model
