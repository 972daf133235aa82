"""PPGnet: inception + two conv blocks per 1 s step, a raw-signal LSTM, and a fusing LSTM."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, Tensor

BLOCK_NAMES = ("Inception", "SeqBlock1", "SeqBlock2", "LSTM1", "LSTM2", "Linear")
STATS_BLOCK = "BatchNormStats"
TRANSFER_BLOCKS = frozenset({"LSTM2", "Linear"})


class ConfigError(ValueError):
    """Raised when a model configuration violates its width arithmetic."""


@dataclass
class ModelConfig:
    n_steps: int = 8
    step_samples: int = 125
    inception_kernels: tuple[int, ...] = (5, 20, 40, 60, 80)
    inception_channels: tuple[int, ...] = (4, 3, 3, 3, 3)
    seq1_kernel: int = 40
    seq1_in: int = 16
    seq1_out: int = 32
    seq1_pool: int = 4
    seq2_kernel: int = 60
    seq2_in: int = 32
    seq2_out: int = 32
    seq2_pool: int = 4
    lstm1_input: int = 125
    lstm1_hidden: int = 80
    lstm1_layers: int = 2
    lstm2_input: int = 384
    lstm2_hidden: int = 80
    lstm2_layers: int = 2
    linear_out: int = 1
    dropout: float = 0.1
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.inception_kernels = tuple(int(k) for k in self.inception_kernels)
        self.inception_channels = tuple(int(c) for c in self.inception_channels)

    @property
    def window_samples(self) -> int:
        return self.n_steps * self.step_samples

    @property
    def pooled_length(self) -> int:
        return self.step_samples // self.seq1_pool // self.seq2_pool

    @property
    def cnn_features(self) -> int:
        return self.seq2_out * self.pooled_length

    @property
    def lstm1_features(self) -> int:
        return self.lstm1_layers * self.lstm1_hidden

    def validate(self) -> None:
        if len(self.inception_kernels) != len(self.inception_channels) or not self.inception_kernels:
            raise ConfigError("inception kernels and channels must be non-empty and equally long")
        if min(self.inception_kernels) < 1 or min(self.inception_channels) < 1:
            raise ConfigError("inception kernels and channels must be positive")
        if sum(self.inception_channels) != self.seq1_in:
            raise ConfigError(
                f"inception channels sum to {sum(self.inception_channels)}, "
                f"sequential block 1 expects {self.seq1_in}"
            )
        if self.seq1_out != self.seq2_in:
            raise ConfigError(f"seq1 output {self.seq1_out} != seq2 input {self.seq2_in}")
        if self.lstm1_input != self.step_samples:
            raise ConfigError(f"LSTM1 input {self.lstm1_input} != step length {self.step_samples}")
        if self.pooled_length < 1:
            raise ConfigError("pooling reduces the step to zero length")
        expected = self.cnn_features + self.lstm1_features
        if self.lstm2_input != expected:
            raise ConfigError(
                f"LSTM2 input {self.lstm2_input} != CNN features {self.cnn_features} "
                f"+ LSTM1 features {self.lstm1_features} = {expected}"
            )
        if self.linear_out != 1:
            raise ConfigError("the regression head must output a single value")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.n_steps < 1 or min(self.lstm1_layers, self.lstm2_layers) < 1:
            raise ConfigError("step count and LSTM depth must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inception_kernels"] = list(self.inception_kernels)
        d["inception_channels"] = list(self.inception_channels)
        return d


def _uniform(rng: np.random.Generator, shape, fan_in: int, name: str) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


@dataclass
class PPGNetModel:
    config: ModelConfig
    blocks: dict[str, dict[str, Tensor]]
    bn: dict[str, BatchNormState]
    trainable: dict[str, bool] = field(default_factory=lambda: {b: True for b in BLOCK_NAMES})

    # parameters ---------------------------------------------------------------

    def named_parameters(self, blocks: Iterable[str] | None = None) -> Iterator[tuple[str, str, Tensor]]:
        for block in BLOCK_NAMES if blocks is None else blocks:
            for name, tensor in self.blocks[block].items():
                yield block, name, tensor

    def parameters(self) -> list[Tensor]:
        return [t for _, _, t in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [t for b, _, t in self.named_parameters() if self.trainable[b]]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def freeze_except(self, blocks: Iterable[str]) -> "PPGNetModel":
        """Leave only ``blocks`` trainable; every other block is excluded from updates."""
        keep = set(blocks)
        unknown = keep - set(BLOCK_NAMES)
        if unknown:
            raise KeyError(f"unknown block name(s): {sorted(unknown)}")
        for block in BLOCK_NAMES:
            self.trainable[block] = block in keep
            for tensor in self.blocks[block].values():
                tensor.requires_grad = block in keep
        return self

    def count_parameters(self) -> dict[str, int]:
        counts = {b: int(sum(t.data.size for t in self.blocks[b].values())) for b in BLOCK_NAMES}
        counts["total"] = sum(counts[b] for b in BLOCK_NAMES)
        counts["trainable"] = sum(counts[b] for b in BLOCK_NAMES if self.trainable[b])
        return counts

    def copy(self) -> "PPGNetModel":
        return copy.deepcopy(self)

    # state ----------------------------------------------------------------------

    def state_arrays(self) -> list[tuple[str, str, np.ndarray]]:
        """Every persisted array as ``(block, name, values)`` in a fixed order."""
        out = [(b, n, t.data) for b, n, t in self.named_parameters()]
        for block in ("SeqBlock1", "SeqBlock2"):
            state = self.bn[block]
            out.append((STATS_BLOCK, f"{block}.running_mean", state.running_mean))
            out.append((STATS_BLOCK, f"{block}.running_var", state.running_var))
        return out

    def load_state_arrays(self, arrays: Iterable[tuple[str, str, np.ndarray]]) -> None:
        expected = {(b, n): a.shape for b, n, a in self.state_arrays()}
        incoming = {}
        for block, name, values in arrays:
            if block not in BLOCK_NAMES and block != STATS_BLOCK:
                raise KeyError(f"unknown block name {block!r}")
            key = (block, name)
            if key not in expected:
                raise KeyError(f"unexpected array {block}/{name}")
            if tuple(values.shape) != tuple(expected[key]):
                raise ValueError(
                    f"shape mismatch for {block}/{name}: file {tuple(values.shape)}, "
                    f"model {tuple(expected[key])}"
                )
            incoming[key] = np.array(values, dtype=np.float64)
        missing = set(expected) - set(incoming)
        if missing:
            raise KeyError(f"missing arrays: {sorted('/'.join(k) for k in missing)}")
        for (block, name), values in incoming.items():
            if block == STATS_BLOCK:
                owner, stat = name.split(".", 1)
                setattr(self.bn[owner], stat, values)
            else:
                self.blocks[block][name].data = values

    # forward ------------------------------------------------------------------

    def forward(
        self,
        windows,
        training: bool = False,
        rng: np.random.Generator | None = None,
        trace: dict | None = None,
    ) -> Tensor:
        """Predict BPM for a batch of windows shaped ``(B, n_steps * step_samples)``.

        Returns a ``(B,)`` tensor. ``trace``, when given, receives the
        per-stage shapes for one step.
        """
        cfg = self.config
        x = windows.data if isinstance(windows, Tensor) else np.asarray(windows, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != cfg.window_samples:
            raise ValueError(
                f"expected windows of {cfg.window_samples} samples, got array of shape {x.shape}"
            )
        batch = x.shape[0]
        steps = Tensor(x.reshape(batch, cfg.n_steps, cfg.step_samples))
        drop_rng = rng if training else None

        # CNN path: every 1 s step is an independent sample sharing the weights
        cnn_in = steps.reshape(batch * cfg.n_steps, 1, cfg.step_samples)
        kernel, bias = _inception_kernel(self.blocks["Inception"], cfg.inception_kernels)
        h = ag.conv1d(cnn_in, kernel, bias)
        _record(trace, "inception", h)
        for block, pool in (("SeqBlock1", cfg.seq1_pool), ("SeqBlock2", cfg.seq2_pool)):
            p = self.blocks[block]
            h = ag.conv1d(h, p["conv.weight"], p["conv.bias"])
            # a frozen block keeps its running statistics, so it normalizes with them
            h = ag.batchnorm(h, self.bn[block], training=training and self.trainable[block])
            # relu and maxpool commute exactly (values and gradients); pooling
            # first runs the relu on a quarter of the elements
            h = ag.maxpool1d(h, pool)
            h = ag.relu(h)
            h = ag.dropout(h, cfg.dropout, training, drop_rng)
            _record(trace, block, h)
        cnn_feat = h.reshape(batch, cfg.n_steps, cfg.cnn_features)
        _record(trace, "flatten", cnn_feat)

        hid1, _ = ag.lstm_forward(steps, _lstm_layers(self.blocks["LSTM1"], cfg.lstm1_layers))
        lstm_feat = hid1.reshape(batch, cfg.n_steps, cfg.lstm1_features)
        _record(trace, "LSTM1", lstm_feat)

        fused = ag.concat([cnn_feat, lstm_feat], axis=2)
        _record(trace, "LSTM2_input", fused)
        _, finals = ag.lstm_forward(fused, _lstm_layers(self.blocks["LSTM2"], cfg.lstm2_layers))
        last_hidden = finals[-1][0]
        _record(trace, "head_input", last_hidden)

        lin = self.blocks["Linear"]
        out = ag.linear(last_hidden, lin["weight"], lin["bias"]).reshape(batch)
        _record(trace, "output", out)
        return out

    def predict(self, windows, batch_size: int = 256) -> np.ndarray:
        """Eval-mode predictions without building a graph."""
        x = np.asarray(windows, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        out = np.empty(x.shape[0])
        with ag.no_grad():
            for lo in range(0, x.shape[0], batch_size):
                out[lo:lo + batch_size] = self.forward(x[lo:lo + batch_size]).data
        return out

    def shape_ledger(self) -> dict[str, tuple[int, ...]]:
        """Per-stage output shapes for a single window (batch axis dropped)."""
        trace: dict[str, tuple[int, ...]] = {}
        with ag.no_grad():
            self.forward(np.zeros((1, self.config.window_samples)), trace=trace)
        return trace


def _record(trace: dict | None, key: str, t: Tensor) -> None:
    if trace is None:
        return
    shape = t.shape
    # CNN stages carry batch*steps on axis 0; others carry batch
    trace[key] = tuple(shape[1:]) if len(shape) > 1 else ()


def _inception_kernel(params: dict[str, Tensor], kernels: tuple[int, ...]) -> tuple[Tensor, Tensor]:
    """Embed every branch kernel in one widest kernel with matching same-padding alignment.

    A single convolution with the embedded kernel equals the channel
    concatenation of the per-branch same-padded convolutions.
    """
    widest = max(kernels)
    wide_left, wide_right = ag.same_padding(widest)
    padded = []
    for i, k in enumerate(kernels):
        left, right = ag.same_padding(k)
        padded.append(ag.pad_last(params[f"conv{i}.weight"], wide_left - left, wide_right - right))
    bias = ag.concat([params[f"conv{i}.bias"] for i in range(len(kernels))], axis=0)
    return ag.concat(padded, axis=0), bias


def _lstm_layers(params: dict[str, Tensor], n_layers: int):
    return [(params[f"l{i}.w_ih"], params[f"l{i}.w_hh"], params[f"l{i}.bias"]) for i in range(n_layers)]


def build_model(config: ModelConfig | None = None) -> PPGNetModel:
    """Validate ``config`` and draw seeded uniform(+-1/sqrt(fan_in)) weights."""
    config = ModelConfig() if config is None else config
    config.validate()
    rng = np.random.default_rng(config.seed)
    blocks: dict[str, dict[str, Tensor]] = {b: {} for b in BLOCK_NAMES}

    inc = blocks["Inception"]
    for i, (k, c) in enumerate(zip(config.inception_kernels, config.inception_channels)):
        inc[f"conv{i}.weight"] = _uniform(rng, (c, 1, k), k, f"Inception.conv{i}.weight")
        inc[f"conv{i}.bias"] = _uniform(rng, (c,), k, f"Inception.conv{i}.bias")

    bn = {}
    for block, (cin, cout, k) in (
        ("SeqBlock1", (config.seq1_in, config.seq1_out, config.seq1_kernel)),
        ("SeqBlock2", (config.seq2_in, config.seq2_out, config.seq2_kernel)),
    ):
        p = blocks[block]
        p["conv.weight"] = _uniform(rng, (cout, cin, k), cin * k, f"{block}.conv.weight")
        p["conv.bias"] = _uniform(rng, (cout,), cin * k, f"{block}.conv.bias")
        state = BatchNormState.create(cout, momentum=config.bn_momentum, eps=config.bn_eps)
        state.gamma.name, state.beta.name = f"{block}.bn.gamma", f"{block}.bn.beta"
        p["bn.gamma"], p["bn.beta"] = state.gamma, state.beta
        bn[block] = state

    for block, (din, hidden, layers) in (
        ("LSTM1", (config.lstm1_input, config.lstm1_hidden, config.lstm1_layers)),
        ("LSTM2", (config.lstm2_input, config.lstm2_hidden, config.lstm2_layers)),
    ):
        p = blocks[block]
        for i in range(layers):
            d = din if i == 0 else hidden
            p[f"l{i}.w_ih"] = _uniform(rng, (4 * hidden, d), d, f"{block}.l{i}.w_ih")
            p[f"l{i}.w_hh"] = _uniform(rng, (4 * hidden, hidden), hidden, f"{block}.l{i}.w_hh")
            p[f"l{i}.bias"] = _uniform(rng, (4 * hidden,), hidden, f"{block}.l{i}.bias")

    blocks["Linear"]["weight"] = _uniform(rng, (1, config.lstm2_hidden), config.lstm2_hidden, "Linear.weight")
    blocks["Linear"]["bias"] = _uniform(rng, (1,), config.lstm2_hidden, "Linear.bias")
    return PPGNetModel(config=config, blocks=blocks, bn=bn)


def expected_parameter_counts(config: ModelConfig) -> dict[str, int]:
    """Closed-form parameter counts (single bias vector per LSTM layer)."""
    inc = sum(c * k + c for k, c in zip(config.inception_kernels, config.inception_channels))

    def seq(cin, cout, k):
        return cout * cin * k + cout + 2 * cout

    def lstm(din, hidden, layers):
        return sum(4 * hidden * ((din if i == 0 else hidden) + hidden + 1) for i in range(layers))

    counts = {
        "Inception": inc,
        "SeqBlock1": seq(config.seq1_in, config.seq1_out, config.seq1_kernel),
        "SeqBlock2": seq(config.seq2_in, config.seq2_out, config.seq2_kernel),
        "LSTM1": lstm(config.lstm1_input, config.lstm1_hidden, config.lstm1_layers),
        "LSTM2": lstm(config.lstm2_input, config.lstm2_hidden, config.lstm2_layers),
        "Linear": config.lstm2_hidden * config.linear_out + config.linear_out,
    }
    counts["total"] = sum(counts.values())
    return counts
