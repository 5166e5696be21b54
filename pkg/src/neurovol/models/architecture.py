"""Encoder/decoder construction and the parameter store they share."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

from ..tensor import RngStream, Tensor, ops
from ..tensor.ops import glorot_uniform

LOG_SIGMA_MIN = -30.0
LOG_SIGMA_MAX = 10.0

ENCODER = "encoder"
DECODER = "decoder"


@dataclass
class ArchitectureConfig:
    input_shape: tuple[int, int, int] = (20, 24, 20)
    channels: tuple[int, ...] = (8, 16)
    dense: tuple[int, ...] = (128,)
    latent_dim: int = 8
    dropout: float = 0.1
    activation: str = "leaky_relu"
    leak: float = 0.2
    kernel: int = 3
    output_activation: str = "sigmoid"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.channels = tuple(int(v) for v in self.channels)
        self.dense = tuple(int(v) for v in self.dense)
        self.validate()

    @classmethod
    def paper(cls, latent_dim: int = 512) -> "ArchitectureConfig":
        """40x48x40 input reduced by three halvings to a 5x6x5x64 grid."""
        return cls(input_shape=(40, 48, 40), channels=(16, 32, 64), dense=(512,), latent_dim=latent_dim)

    @property
    def stages(self) -> int:
        return len(self.channels)

    @property
    def grid(self) -> tuple[int, int, int]:
        f = 2 ** self.stages
        return tuple(e // f for e in self.input_shape)

    @property
    def flat_features(self) -> int:
        return self.channels[-1] * int(np.prod(self.grid))

    def validate(self) -> None:
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must have 3 extents, got {self.input_shape}")
        if not self.channels:
            raise ValueError("need at least one convolutional stage")
        f = 2 ** len(self.channels)
        for axis, e in zip("xyz", self.input_shape):
            if e % f:
                raise ValueError(f"input extent {e} on axis {axis} is not divisible by 2^{len(self.channels)}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd so padding keeps extents")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("input_shape", "channels", "dense"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchitectureConfig":
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class ParameterStore:
    """Named parameter tensors tagged by component, plus batch-norm buffers."""

    params: dict[str, Tensor] = field(default_factory=dict)
    component: dict[str, str] = field(default_factory=dict)
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def add(self, name: str, data: np.ndarray, component: str) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)
        self.params[name] = t
        self.component[name] = component
        return t

    def add_bn(self, prefix: str, width: int, component: str) -> None:
        self.add(f"{prefix}.gamma", np.ones(width), component)
        self.add(f"{prefix}.beta", np.zeros(width), component)
        self.buffers[prefix] = {"mean": np.zeros(width, np.float32), "var": np.ones(width, np.float32)}

    def names(self, component: str | None = None) -> list[str]:
        return [n for n in self.params if component is None or self.component[n] == component]

    def tensors(self, component: str | None = None) -> list[Tensor]:
        return [self.params[n] for n in self.names(component)]

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def snapshot(self, component: str | None = None) -> dict[str, np.ndarray]:
        return {n: self.params[n].data.copy() for n in self.names(component)}

    def restore(self, snap: Mapping[str, np.ndarray]) -> None:
        for n, arr in snap.items():
            self.params[n].data[...] = arr

    def buffer_snapshot(self) -> dict[str, dict[str, np.ndarray]]:
        return {k: {s: a.copy() for s, a in v.items()} for k, v in self.buffers.items()}

    def restore_buffers(self, snap) -> None:
        for k, v in snap.items():
            for s, a in v.items():
                self.buffers[k][s][...] = a

    def view(self, frozen: bool | Mapping[str, np.ndarray] = False) -> Mapping[str, Tensor]:
        """Parameter mapping for a forward pass.

        ``frozen=True`` swaps in constant copies of the current values so no
        gradient reaches the stored parameters; a mapping of arrays swaps in
        those values (a snapshot) as constants.
        """
        if frozen is False:
            return self.params
        if frozen is True:
            return {n: t.detach() for n, t in self.params.items()}
        out = dict(self.params)
        for n, arr in frozen.items():
            out[n] = Tensor(arr)
        return out


Forward = Callable[..., object]


def _act(x: Tensor, cfg: ArchitectureConfig) -> Tensor:
    return ops.activation(x, cfg.activation, cfg.leak)


def build_encoder(config: ArchitectureConfig, store: ParameterStore, rng: RngStream) -> Forward:
    """Register encoder parameters and return its forward function.

    The forward maps ``(N, 1, *input_shape)`` volumes to ``(mu, log_sigma)``,
    each ``(N, latent_dim)``. Each stage is conv -> batch norm -> activation ->
    2x average pooling, followed by dense layers with batch norm and dropout.
    """
    config.validate()
    k = config.kernel
    c_prev = 1
    for i, c in enumerate(config.channels):
        fan_in, fan_out = c_prev * k ** 3, c * k ** 3
        store.add(f"enc.conv{i}.w", glorot_uniform((c, c_prev, k, k, k), fan_in, fan_out, rng), ENCODER)
        store.add(f"enc.conv{i}.b", np.zeros(c), ENCODER)
        store.add_bn(f"enc.bn{i}", c, ENCODER)
        c_prev = c
    width = config.flat_features
    for j, d in enumerate(config.dense):
        store.add(f"enc.dense{j}.w", glorot_uniform((width, d), width, d, rng), ENCODER)
        store.add(f"enc.dense{j}.b", np.zeros(d), ENCODER)
        store.add_bn(f"enc.dbn{j}", d, ENCODER)
        width = d
    two_l = 2 * config.latent_dim
    store.add("enc.head.w", glorot_uniform((width, two_l), width, two_l, rng), ENCODER)
    store.add("enc.head.b", np.zeros(two_l), ENCODER)
    pad = k // 2
    lat = config.latent_dim

    def forward(x: Tensor, params: Mapping[str, Tensor], train: bool = False,
                rng: RngStream | None = None, update_running: bool = True):
        if tuple(x.shape[1:]) != (1,) + config.input_shape:
            raise ValueError(f"encoder expects (N, 1, {config.input_shape}), got {x.shape}")
        h = x
        for i in range(config.stages):
            h = ops.conv3d(h, params[f"enc.conv{i}.w"], params[f"enc.conv{i}.b"], 1, pad)
            h = ops.batch_norm(h, params[f"enc.bn{i}.gamma"], params[f"enc.bn{i}.beta"],
                               store.buffers[f"enc.bn{i}"], train=train, update_running=update_running)
            h = _act(h, config)
            h = ops.avg_pool3d(h, 2)
        h = ops.reshape(h, (h.shape[0], -1))
        for j in range(len(config.dense)):
            h = ops.affine(h, params[f"enc.dense{j}.w"], params[f"enc.dense{j}.b"])
            h = ops.batch_norm(h, params[f"enc.dbn{j}.gamma"], params[f"enc.dbn{j}.beta"],
                               store.buffers[f"enc.dbn{j}"], train=train, update_running=update_running)
            h = _act(h, config)
            h = ops.dropout(h, config.dropout, rng, train)
        h = ops.affine(h, params["enc.head.w"], params["enc.head.b"])
        mu = ops.index(h, (slice(None), slice(0, lat)))
        log_sigma = ops.clamp(ops.index(h, (slice(None), slice(lat, 2 * lat))), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return mu, log_sigma

    return forward


def build_decoder(config: ArchitectureConfig, store: ParameterStore, rng: RngStream) -> Forward:
    """Register decoder parameters (mirror of the encoder) and return its forward.

    The forward maps ``(N, latent_dim)`` codes to ``(N, 1, *input_shape)``
    volumes in (0, 1).
    """
    config.validate()
    k = config.kernel
    width = config.latent_dim
    for j, d in enumerate(reversed(config.dense)):
        store.add(f"dec.dense{j}.w", glorot_uniform((width, d), width, d, rng), DECODER)
        store.add(f"dec.dense{j}.b", np.zeros(d), DECODER)
        store.add_bn(f"dec.dbn{j}", d, DECODER)
        width = d
    flat = config.flat_features
    store.add("dec.grid.w", glorot_uniform((width, flat), width, flat, rng), DECODER)
    store.add("dec.grid.b", np.zeros(flat), DECODER)
    store.add_bn("dec.gbn", config.channels[-1], DECODER)
    outs = (1,) + config.channels[:-1]
    for i in reversed(range(config.stages)):
        c_in, c_out = config.channels[i], outs[i]
        # transpose kernels are stored (F_in, C_out, k, k, k)
        store.add(f"dec.deconv{i}.w", glorot_uniform((c_in, c_out, k, k, k), c_in * k ** 3, c_out * k ** 3, rng),
                  DECODER)
        store.add(f"dec.deconv{i}.b", np.zeros(c_out), DECODER)
        if i > 0:
            store.add_bn(f"dec.bn{i}", c_out, DECODER)
    pad = k // 2
    grid = config.grid
    n_dense = len(config.dense)

    def forward(z: Tensor, params: Mapping[str, Tensor], train: bool = False,
                rng: RngStream | None = None, update_running: bool = True) -> Tensor:
        if z.ndim != 2 or z.shape[1] != config.latent_dim:
            raise ValueError(f"decoder expects (N, {config.latent_dim}) codes, got {z.shape}")
        h = z
        for j in range(n_dense):
            h = ops.affine(h, params[f"dec.dense{j}.w"], params[f"dec.dense{j}.b"])
            h = ops.batch_norm(h, params[f"dec.dbn{j}.gamma"], params[f"dec.dbn{j}.beta"],
                               store.buffers[f"dec.dbn{j}"], train=train, update_running=update_running)
            h = _act(h, config)
            h = ops.dropout(h, config.dropout, rng, train)
        h = ops.affine(h, params["dec.grid.w"], params["dec.grid.b"])
        h = ops.reshape(h, (h.shape[0], config.channels[-1]) + grid)
        h = ops.batch_norm(h, params["dec.gbn.gamma"], params["dec.gbn.beta"], store.buffers["dec.gbn"],
                           train=train, update_running=update_running)
        h = _act(h, config)
        for i in reversed(range(config.stages)):
            h = ops.upsample3d_nearest(h, 2)
            h = ops.conv3d_transpose(h, params[f"dec.deconv{i}.w"], params[f"dec.deconv{i}.b"], 1, pad)
            if i > 0:
                h = ops.batch_norm(h, params[f"dec.bn{i}.gamma"], params[f"dec.bn{i}.beta"],
                                   store.buffers[f"dec.bn{i}"], train=train, update_running=update_running)
                h = _act(h, config)
        return ops.activation(h, config.output_activation)

    return forward


class VAEModel:
    """Encoder/decoder pair over one :class:`ParameterStore`.

    Used for both the plain VAE and the introspective VAE; they differ only in
    how they are trained.
    """

    def __init__(self, config: ArchitectureConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.store = ParameterStore()
        init_rng = RngStream(seed)
        self._encoder = build_encoder(config, self.store, init_rng.child(1))
        self._decoder = build_decoder(config, self.store, init_rng.child(2))

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def encode_stats(self, x, train: bool = False, rng: RngStream | None = None,
                     frozen: bool | Mapping[str, np.ndarray] = False):
        """``(mu, log_sigma)`` for a batch ``(N, *input_shape)`` or ``(N, 1, *input_shape)``."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        if x.ndim == 4:
            x = ops.reshape(x, (x.shape[0], 1) + x.shape[1:])
        params = self.store.view(frozen)
        return self._encoder(x, params, train, rng, update_running=frozen is False)

    def decode(self, z, train: bool = False, rng: RngStream | None = None,
               frozen: bool | Mapping[str, np.ndarray] = False) -> Tensor:
        """Volumes ``(N, 1, *input_shape)`` for codes ``(N, latent_dim)``."""
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
        params = self.store.view(frozen)
        return self._decoder(z, params, train, rng, update_running=frozen is False)
