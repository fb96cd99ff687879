"""TempCNN: three temporal convolution blocks, one fully-connected block and a
softmax output, plus the two-headed (DANN) and prototype-head (MME) variants
used by the comparison methods.

A model is a plain value object: config + :class:`ParamSet` + flags.  Forward
passes are driven by a short layer program (``(kind, name)`` pairs) so the same
tape/backprop code serves every variant.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from .data import NormStats
from .nn import DTYPE, ParamSet, RngStream, ShapeError

FORMAT_VERSION = 1
ARCHES = ("tempcnn", "dann", "mme")


@dataclass(frozen=True)
class TempCNNConfig:
    n_bands: int = 10
    n_timesteps: int = 37
    n_classes: int = 30
    conv_filters: int = 64
    kernel_len: int = 5
    fc_units: int = 256
    dropout_rate: float = 0.5
    bn_momentum: float = 0.1

    def __post_init__(self):
        for name in ("n_bands", "n_timesteps", "n_classes", "conv_filters", "kernel_len", "fc_units"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"TempCNNConfig.{name} must be positive")
        if self.kernel_len % 2 != 1:
            raise ValueError("TempCNNConfig.kernel_len must be odd")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("TempCNNConfig.dropout_rate must be in [0, 1)")


@dataclass
class TempCNNModel:
    config: TempCNNConfig
    params: ParamSet
    bn_frozen: bool = False
    arch: str = "tempcnn"
    temperature: float = 0.05  # prototype head only
    norm_stats: NormStats | None = None

    def copy(self) -> "TempCNNModel":
        return TempCNNModel(self.config, self.params.copy(), self.bn_frozen, self.arch,
                            self.temperature, self.norm_stats)

    def layers(self, part: str) -> list[tuple[str, str]]:
        if part == "trunk":
            prog = []
            for i in (1, 2, 3):
                prog += [("conv", f"conv{i}"), ("bn", f"bn{i}"), ("dropout", ""), ("relu", "")]
            return prog + [("flatten", "")]
        if part == "class":
            out = ("cosine", "proto") if self.arch == "mme" else ("dense", "out")
            return [("dense", "fc"), ("bn", "bn_fc"), ("dropout", ""), ("relu", ""), out]
        if part == "domain" and self.arch == "dann":
            return [("dense", "dom_fc"), ("bn", "bn_dom"), ("dropout", ""), ("relu", ""), ("dense", "dom_out")]
        raise KeyError(f"model arch {self.arch!r} has no part {part!r}")

    @property
    def conv_names(self) -> list[str]:
        """Trainable tensors of the convolutional blocks (conv and its BN)."""
        return [n for n in self.params.names()
                if n.split(".")[0] in ("conv1", "conv2", "conv3", "bn1", "bn2", "bn3")
                and not is_running_stat(n)]


def is_running_stat(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


def _he_uniform(rng: RngStream, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.gen.uniform(-bound, bound, size=shape).astype(DTYPE)


def _add_bn(params: ParamSet, name: str, width: int) -> None:
    params.add(f"{name}.gamma", np.ones(width, DTYPE))
    params.add(f"{name}.beta", np.zeros(width, DTYPE))
    params.add(f"{name}.running_mean", np.zeros(width, DTYPE), trainable=False)
    params.add(f"{name}.running_var", np.ones(width, DTYPE), trainable=False)


def build_tempcnn(config: TempCNNConfig, rng: RngStream, arch: str = "tempcnn",
                  temperature: float = 0.05) -> TempCNNModel:
    """Freshly initialised model: He-uniform weights, zero biases, unit BN."""
    if arch not in ARCHES:
        raise ValueError(f"unknown arch {arch!r}")
    cfg = config
    p = ParamSet()
    c_in = cfg.n_bands
    for i in (1, 2, 3):
        fan_in = c_in * cfg.kernel_len
        p.add(f"conv{i}.weight", _he_uniform(rng, (cfg.conv_filters, c_in, cfg.kernel_len), fan_in))
        p.add(f"conv{i}.bias", np.zeros(cfg.conv_filters, DTYPE))
        _add_bn(p, f"bn{i}", cfg.conv_filters)
        c_in = cfg.conv_filters
    flat = cfg.conv_filters * cfg.n_timesteps
    p.add("fc.weight", _he_uniform(rng, (flat, cfg.fc_units), flat))
    p.add("fc.bias", np.zeros(cfg.fc_units, DTYPE))
    _add_bn(p, "bn_fc", cfg.fc_units)
    if arch == "mme":
        p.add("proto.weight", _he_uniform(rng, (cfg.fc_units, cfg.n_classes), cfg.fc_units))
    else:
        p.add("out.weight", _he_uniform(rng, (cfg.fc_units, cfg.n_classes), cfg.fc_units))
        p.add("out.bias", np.zeros(cfg.n_classes, DTYPE))
    if arch == "dann":
        p.add("dom_fc.weight", _he_uniform(rng, (flat, cfg.fc_units), flat))
        p.add("dom_fc.bias", np.zeros(cfg.fc_units, DTYPE))
        _add_bn(p, "bn_dom", cfg.fc_units)
        p.add("dom_out.weight", _he_uniform(rng, (cfg.fc_units, 2), cfg.fc_units))
        p.add("dom_out.bias", np.zeros(2, DTYPE))
    return TempCNNModel(cfg, p, bn_frozen=False, arch=arch, temperature=temperature)


# ---------------------------------------------------------------------------
# forward / backward


def run_layers(model: TempCNNModel, layers, x: np.ndarray, mode: str,
               rng: RngStream | None = None, tape: list | None = None) -> np.ndarray:
    """Run a layer program.  In train mode with unfrozen BN, running statistics
    in ``model.params`` are updated.  If ``tape`` is given, the inputs needed
    by :func:`backprop` are appended to it."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    p = model.params
    cfg = model.config
    for kind, name in layers:
        inp = x
        extra = None
        if kind == "conv":
            w = p[f"{name}.weight"]
            extra = nn.im2col(x, w.shape)
            x = nn.conv1d(x, w, p[f"{name}.bias"], cols=extra)
        elif kind == "dense":
            x = nn.dense(x, p[f"{name}.weight"], p[f"{name}.bias"])
        elif kind == "cosine":
            x = nn.cosine_logits(x, p[f"{name}.weight"], model.temperature)
        elif kind == "bn":
            extra = "batch" if (mode == "train" and not model.bn_frozen) else "frozen"
            x, rm, rv = nn.batch_norm1d(x, p[f"{name}.gamma"], p[f"{name}.beta"],
                                        p[f"{name}.running_mean"], p[f"{name}.running_var"],
                                        mode=extra, momentum=cfg.bn_momentum)
            if extra == "batch":
                p[f"{name}.running_mean"] = rm
                p[f"{name}.running_var"] = rv
        elif kind == "dropout":
            x, extra = nn.dropout(x, cfg.dropout_rate, mode, rng)
        elif kind == "relu":
            x = nn.relu(x)
        elif kind == "flatten":
            # channel-major, then time
            x = x.reshape(x.shape[0], -1)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        if tape is not None:
            tape.append((kind, name, inp, extra))
    return x


def backprop(model: TempCNNModel, tape: list, g: np.ndarray, grads: dict) -> np.ndarray:
    """Reverse pass over ``tape``; parameter gradients are summed into ``grads``."""
    p = model.params

    def acc(name, value):
        if name in grads:
            grads[name] = grads[name] + value
        else:
            grads[name] = value

    for kind, name, inp, extra in reversed(tape):
        if kind == "conv":
            g, dw, db = nn.conv1d_backward(g, inp, p[f"{name}.weight"], p[f"{name}.bias"], cols=extra)
            acc(f"{name}.weight", dw)
            acc(f"{name}.bias", db)
        elif kind == "dense":
            g, dw, db = nn.dense_backward(g, inp, p[f"{name}.weight"], p[f"{name}.bias"])
            acc(f"{name}.weight", dw)
            acc(f"{name}.bias", db)
        elif kind == "cosine":
            g, dw = nn.cosine_logits_backward(g, inp, p[f"{name}.weight"], model.temperature)
            acc(f"{name}.weight", dw)
        elif kind == "bn":
            # running stats were possibly updated after this input was seen; the
            # batch-mode backward does not read them
            g, dgam, dbet = nn.batch_norm1d_backward(g, inp, p[f"{name}.gamma"], p[f"{name}.beta"],
                                                     p[f"{name}.running_mean"], p[f"{name}.running_var"],
                                                     mode=extra)
            acc(f"{name}.gamma", dgam)
            acc(f"{name}.beta", dbet)
        elif kind == "dropout":
            if extra is not None:
                g = g * extra
        elif kind == "relu":
            g = nn.relu_backward(g, inp)
        elif kind == "flatten":
            g = g.reshape(inp.shape)
    return g


def _check_batch(model: TempCNNModel, x: np.ndarray) -> None:
    cfg = model.config
    if x.ndim != 3 or x.shape[1:] != (cfg.n_bands, cfg.n_timesteps):
        raise ShapeError("forward", f"batch shape {x.shape} does not match "
                                    f"(N, {cfg.n_bands}, {cfg.n_timesteps})")


def forward(model: TempCNNModel, batch: np.ndarray, mode: str = "eval",
            rng: RngStream | None = None) -> np.ndarray:
    """Class logits (N x n_classes)."""
    _check_batch(model, batch)
    h = run_layers(model, model.layers("trunk"), np.asarray(batch, DTYPE), mode, rng)
    return run_layers(model, model.layers("class"), h, mode, rng)


def forward_tape(model: TempCNNModel, batch: np.ndarray, mode: str, rng: RngStream | None,
                 tape: list) -> np.ndarray:
    _check_batch(model, batch)
    h = run_layers(model, model.layers("trunk"), np.asarray(batch, DTYPE), mode, rng, tape)
    return run_layers(model, model.layers("class"), h, mode, rng, tape)


def predict(model: TempCNNModel, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    """Arg-max class predictions from eval-mode forward passes."""
    out = [forward(model, x[i:i + batch_size], "eval").argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, np.int64)


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


def _tensor_entry(name: str, arr: np.ndarray, trainable: bool) -> dict:
    return {"name": name, "shape": list(arr.shape), "dtype": "float32", "trainable": trainable,
            "data": np.ascontiguousarray(arr, dtype="<f4").tobytes().hex()}


def checkpoint_dict(model: TempCNNModel) -> dict:
    ns = model.norm_stats
    return {
        "format_version": FORMAT_VERSION,
        "arch": model.arch,
        "config": asdict(model.config),
        "bn_frozen": model.bn_frozen,
        "temperature": model.temperature,
        "norm_stats": None if ns is None else {"p2": [float(v) for v in ns.p2], "p98": [float(v) for v in ns.p98]},
        "tensors": [_tensor_entry(n, a, model.params.is_trainable(n)) for n, a in model.params.items()],
    }


def save_checkpoint(model: TempCNNModel, path) -> None:
    text = json.dumps(checkpoint_dict(model), indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_checkpoint(path) -> TempCNNModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: not a valid checkpoint manifest ({e})") from None
    return model_from_dict(doc)


def model_from_dict(doc: dict) -> TempCNNModel:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}")
    try:
        cfg = TempCNNConfig(**doc["config"])
        arch = doc["arch"]
        entries = doc["tensors"]
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"malformed checkpoint manifest: {e}") from None
    # rebuild the expected layout, then fill it in
    ref = build_tempcnn(cfg, RngStream(0), arch=arch)
    expected = ref.params.names()
    got = [e.get("name") for e in entries]
    if got != expected:
        raise CheckpointError(f"tensor list mismatch: expected {expected}, got {got}")
    params = ParamSet()
    for e in entries:
        name = e["name"]
        shape = tuple(e["shape"])
        if e.get("dtype") != "float32":
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {e.get('dtype')!r}")
        if shape != ref.params[name].shape:
            raise CheckpointError(f"tensor {name!r}: shape {shape} != expected {ref.params[name].shape}")
        try:
            raw = bytes.fromhex(e["data"])
        except (ValueError, TypeError):
            raise CheckpointError(f"tensor {name!r}: corrupt hex payload") from None
        n_expected = int(np.prod(shape, dtype=np.int64)) * 4
        if len(raw) != n_expected:
            raise CheckpointError(f"tensor {name!r}: payload has {len(raw)} bytes, expected {n_expected}")
        params.add(name, np.frombuffer(raw, dtype="<f4").reshape(shape).astype(DTYPE), bool(e["trainable"]))
    ns = doc.get("norm_stats")
    norm = None if ns is None else NormStats(np.asarray(ns["p2"], np.float64), np.asarray(ns["p98"], np.float64))
    return TempCNNModel(cfg, params, bool(doc["bn_frozen"]), arch, float(doc.get("temperature", 0.05)), norm)
