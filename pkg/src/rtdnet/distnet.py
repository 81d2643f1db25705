"""DistNet: a small fully-connected network predicting all parameters of a
runtime distribution jointly, trained on the NLL of individual observations."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .core import Dataset
from .distributions import Family, RtdParams, mle_fit
from .preprocessing import (
    DEFAULT_CONSTANT_TOL,
    FeaturePipeline,
    RuntimeScaler,
    fit_pipeline,
    fit_scaler,
)

logger = logging.getLogger(__name__)

MODEL_FORMAT = "rtdnet.distnet/1"


@dataclass(frozen=True)
class NetworkConfig:
    hidden_layers: tuple[int, ...] = (16, 16)
    activation: str = "tanh"
    batch_norm: bool = True
    l2: float = 1e-4
    output_activation: str = "exp"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.activation not in K.ACTIVATION_CODES:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation != "exp":
            raise ValueError("the output activation is fixed to 'exp'")
        if any(h < 1 for h in self.hidden_layers):
            raise ValueError("hidden layer widths must be positive")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    max_epochs: int = 1000
    max_wall_seconds: float = 3600.0
    grad_clip_norm: float = 1.0
    shuffle_seed: int = 0
    init_seed: int = 0
    bn_momentum: float = 0.9
    deterministic: bool = False
    constant_tol: float = DEFAULT_CONSTANT_TOL

    def lr_at(self, epoch: int) -> float:
        return self.lr_start * (self.lr_end / self.lr_start) ** (epoch / self.max_epochs)


@dataclass
class _Net:
    """Flat-vector view of the network used by the kernels."""

    sizes: np.ndarray
    batch_norm: bool
    activation: int
    weights: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    def __post_init__(self):
        self.offs, n = K.layer_offsets(self.sizes, self.batch_norm)
        self.soffs, n_state = K.state_offsets(self.sizes)
        if self.weights.shape != (n,):
            raise ValueError(f"expected {n} weights, got {self.weights.shape}")
        if self.running_mean.shape != (n_state,) or self.running_var.shape != (n_state,):
            raise ValueError("running statistics have the wrong size")


@dataclass(frozen=True)
class DistNetModel:
    family: Family
    net_config: NetworkConfig
    train_config: TrainConfig
    sizes: tuple[int, ...]
    weights: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    pipeline: FeaturePipeline | None = None
    scaler: RuntimeScaler | None = None
    training_log: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        for name in ("weights", "running_mean", "running_var"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        sizes = tuple(int(s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if sizes[-1] != self.family.n_params:
            raise ValueError("output width must equal the family's parameter count")
        # validates shapes
        self._net()

    def _net(self, weights=None) -> _Net:
        # kernels take writable buffers; the model's own arrays stay read-only
        return _Net(
            np.asarray(self.sizes, dtype=np.int64),
            self.net_config.batch_norm,
            K.ACTIVATION_CODES[self.net_config.activation],
            np.array(self.weights if weights is None else weights, dtype=np.float64),
            self.running_mean.copy(),
            self.running_var.copy(),
        )

    @property
    def n_inputs(self) -> int:
        return self.sizes[0]

    def layers(self) -> list[dict]:
        """Per-layer views of the flat weight vector."""
        net = self._net()
        out = []
        for l in range(len(self.sizes) - 1):
            d_in, d_out = self.sizes[l], self.sizes[l + 1]
            oW, ob, og, obt = net.offs[l]
            layer = {
                "W": self.weights[oW:oW + d_in * d_out].reshape(d_in, d_out),
                "b": self.weights[ob:ob + d_out],
            }
            if og >= 0:
                layer["gamma"] = self.weights[og:og + d_out]
                layer["beta"] = self.weights[obt:obt + d_out]
                so = net.soffs[l]
                layer["running_mean"] = self.running_mean[so:so + d_out]
                layer["running_var"] = self.running_var[so:so + d_out]
            out.append(layer)
        return out

    def predict(self, raw_fv) -> RtdParams | list[RtdParams]:
        return predict(self, raw_fv)

    def to_dict(self) -> dict:
        layers = [{k: v.tolist() for k, v in layer.items()} for layer in self.layers()]
        return {
            "format": MODEL_FORMAT,
            "model": "distnet",
            "family": self.family.value,
            "sizes": list(self.sizes),
            "network_config": {**asdict(self.net_config), "hidden_layers": list(self.net_config.hidden_layers)},
            "train_config": asdict(self.train_config),
            "layers": layers,
            "pipeline": None if self.pipeline is None else self.pipeline.to_dict(),
            "scaler": None if self.scaler is None else self.scaler.to_dict(),
            "training_log": self.training_log,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DistNetModel":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a DistNet model document (format={d.get('format')!r})")
        net_cfg = NetworkConfig(**d["network_config"])
        sizes = tuple(d["sizes"])
        offs, n = K.layer_offsets(sizes, net_cfg.batch_norm)
        soffs, n_state = K.state_offsets(sizes)
        w = np.empty(n)
        rm = np.zeros(n_state)
        rv = np.ones(n_state)
        for l, layer in enumerate(d["layers"]):
            d_in, d_out = sizes[l], sizes[l + 1]
            oW, ob, og, obt = offs[l]
            w[oW:oW + d_in * d_out] = np.asarray(layer["W"], dtype=float).ravel()
            w[ob:ob + d_out] = layer["b"]
            if og >= 0:
                w[og:og + d_out] = layer["gamma"]
                w[obt:obt + d_out] = layer["beta"]
                rm[soffs[l]:soffs[l] + d_out] = layer["running_mean"]
                rv[soffs[l]:soffs[l] + d_out] = layer["running_var"]
        return cls(
            Family.parse(d["family"]),
            net_cfg,
            TrainConfig(**d["train_config"]),
            sizes,
            w,
            rm,
            rv,
            None if d.get("pipeline") is None else FeaturePipeline.from_dict(d["pipeline"]),
            None if d.get("scaler") is None else RuntimeScaler.from_dict(d["scaler"]),
            d.get("training_log", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "DistNetModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_model(
    n_inputs: int,
    family,
    net_config: NetworkConfig = NetworkConfig(),
    train_config: TrainConfig = TrainConfig(),
    *,
    seed: int | None = None,
    output_bias=None,
) -> DistNetModel:
    """Fresh network: weights ~ U(-sqrt(3/fan_in), +sqrt(3/fan_in)), zero
    biases, unit BN scale. ``output_bias`` sets the log-parameters predicted
    for an all-zero last hidden layer."""
    fam = Family.parse(family)
    sizes = (int(n_inputs), *net_config.hidden_layers, fam.n_params)
    offs, n = K.layer_offsets(sizes, net_config.batch_norm)
    _, n_state = K.state_offsets(sizes)
    rng = np.random.default_rng(train_config.init_seed if seed is None else seed)
    w = np.zeros(n)
    for l in range(len(sizes) - 1):
        d_in, d_out = sizes[l], sizes[l + 1]
        lim = math.sqrt(3.0 / max(d_in, 1))
        w[offs[l, 0]:offs[l, 0] + d_in * d_out] = rng.uniform(-lim, lim, d_in * d_out)
        if offs[l, 2] >= 0:
            w[offs[l, 2]:offs[l, 2] + d_out] = 1.0
    if output_bias is not None:
        ob = offs[-1, 1]
        w[ob:ob + fam.n_params] = output_bias
    return DistNetModel(fam, net_config, train_config, sizes, w, np.zeros(n_state), np.ones(n_state))


def _as_batch(X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    return X.reshape(1, -1) if X.ndim == 1 else X


def _check_mode(mode: str) -> bool:
    if mode not in ("train", "infer"):
        raise ValueError("mode must be 'train' or 'infer'")
    return mode == "train"


def forward_log_params(model: DistNetModel, X, mode: str = "infer") -> np.ndarray:
    """Output-layer pre-activations (log-parameters), shape ``(n, p)``."""
    train = _check_mode(mode)
    X = _as_batch(X)
    if X.shape[1] != model.n_inputs:
        raise ValueError(f"expected {model.n_inputs} preprocessed features, got {X.shape[1]}")
    net = model._net()
    return K.predict_log_params(net.weights, net.offs, net.sizes, net.batch_norm, net.activation,
                                X, train, net.running_mean, net.running_var, net.soffs)


def forward(model: DistNetModel, fv, mode: str = "infer"):
    """Parameters in scaled-time space. A 1-D input gives one ``RtdParams``,
    a 2-D input a list (in ``train`` mode the rows form one batch)."""
    theta = np.exp(forward_log_params(model, fv, mode))
    params = [RtdParams(model.family, tuple(row)) for row in theta]
    return params[0] if np.ndim(fv) == 1 else params


def loss_and_gradient(model: DistNetModel, X, t, *, mode: str = "train", weights=None):
    """Batch loss (mean NLL + L2) and its gradient w.r.t. the flat weight vector."""
    train = _check_mode(mode)
    X = _as_batch(X)
    t = np.ascontiguousarray(t, dtype=np.float64).ravel()
    if X.shape[0] != t.shape[0] or t.size == 0:
        raise ValueError("need a non-empty batch with one runtime per feature row")
    if np.any(t <= 0):
        raise ValueError("runtimes must be positive")
    net = model._net(weights)
    w = net.weights
    grad = np.empty_like(w)
    width = max(net.running_mean.shape[0], 1)
    bmean, bvar = np.empty(width), np.empty(width)
    value = K.loss_grad(w, net.offs, net.sizes, net.batch_norm, net.activation,
                        K.FAMILY_CODES[model.family.value], X, t, model.net_config.l2, train,
                        net.running_mean, net.running_var, net.soffs, grad, bmean, bvar)
    return value, grad


def loss(model: DistNetModel, X, t, *, mode: str = "train", weights=None) -> float:
    return loss_and_gradient(model, X, t, mode=mode, weights=weights)[0]


def gradient(model: DistNetModel, X, t, *, mode: str = "train", weights=None) -> np.ndarray:
    return loss_and_gradient(model, X, t, mode=mode, weights=weights)[1]


def _pooled_output_bias(family: Family, times: np.ndarray) -> np.ndarray:
    params = mle_fit(family, times)
    return np.log(np.asarray(params.theta))


def train(
    dataset: Dataset,
    family,
    net_config: NetworkConfig = NetworkConfig(),
    train_config: TrainConfig = TrainConfig(),
    *,
    callback=None,
) -> DistNetModel:
    """Fit preprocessing on ``dataset`` and train a DistNet on every
    (instance, observation) pair."""
    fam = Family.parse(family)
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    cfg = train_config
    pipeline = fit_pipeline(dataset, cfg.constant_tol, allow_empty=True)
    if pipeline.n_out == 0:
        logger.warning("all features are constant; the network can only learn a shared RTD")
    scaler = fit_scaler(dataset)
    Xinst = np.ascontiguousarray(pipeline.transform(dataset.feature_matrix()))
    inst_of = np.concatenate([np.full(inst.k, i, dtype=np.int64) for i, inst in enumerate(dataset)])
    t = np.concatenate([inst.times for inst in dataset]) / scaler.max_runtime

    bias = _pooled_output_bias(fam, t)
    model = init_model(pipeline.n_out, fam, net_config, cfg, output_bias=bias)
    net = model._net()
    w = net.weights.copy()
    rm = net.running_mean.copy()
    rv = net.running_var.copy()
    code = K.FAMILY_CODES[fam.value]

    shuffle_rng = np.random.default_rng(cfg.shuffle_seed)
    losses: list[float] = []
    stop_reason = "max_epochs"
    started = time.monotonic()
    for epoch in range(cfg.max_epochs):
        if not cfg.deterministic and time.monotonic() - started > cfg.max_wall_seconds:
            stop_reason = "max_wall_seconds"
            break
        perm = shuffle_rng.permutation(t.size)
        epoch_loss = K.sgd_epoch(w, net.offs, net.sizes, net.batch_norm, net.activation, code,
                                 Xinst, inst_of[perm], t[perm], cfg.batch_size, cfg.lr_at(epoch),
                                 net_config.l2, cfg.grad_clip_norm, rm, rv, net.soffs,
                                 cfg.bn_momentum)
        losses.append(float(epoch_loss))
        if callback is not None:
            callback(epoch, epoch_loss)
    log = {
        "epochs": len(losses),
        "train_loss": losses,
        "stop_reason": stop_reason,
        "lr_schedule": "per-epoch exponential decay",
        "n_samples": int(t.size),
        "n_instances": len(dataset),
    }
    if not cfg.deterministic:
        log["wall_seconds"] = time.monotonic() - started
    return DistNetModel(fam, net_config, cfg, model.sizes, w, rm, rv, pipeline, scaler, log)


def predict_scaled(model: DistNetModel, X_pre) -> np.ndarray:
    """Parameter matrix in scaled-time space for preprocessed features."""
    return np.exp(forward_log_params(model, X_pre, "infer"))


def predict(model: DistNetModel, raw_fv):
    """Transform raw features, run inference, map parameters back to seconds."""
    if model.pipeline is None or model.scaler is None:
        raise ValueError("model has no attached preprocessing; was it trained?")
    raw = np.asarray(raw_fv, dtype=float)
    theta = predict_scaled(model, model.pipeline.transform(raw))
    params = [model.scaler.unscale_params(RtdParams(model.family, tuple(row))) for row in theta]
    return params[0] if raw.ndim == 1 else params
