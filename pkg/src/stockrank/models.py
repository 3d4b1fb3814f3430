"""The ranking model: sector-embedded 1D CNN, training loop, ensembles.

A model maps an (m, n) standardized feature window plus a sector id to a
probability distribution over five return classes (or a single value for
the MSE variant). Three independently seeded members are combined into an
ensemble whose weights follow each member's recent realized returns.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, NumericError
from .losses import LossKind, batch_loss
from .nn.autograd import (
    BatchNormState,
    Tensor,
    batch_norm,
    conv1d_valid,
    dense,
    dropout,
    embedding_add,
    global_avg_pool,
    leaky_relu,
    softmax,
)
from .nn.optim import AdamOptimizer, EarlyStopping, ReduceOnPlateau

SCORE_VECTOR = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
N_SECTOR_ROWS = 12
DEFAULT_ENSEMBLE_SIZE = 3
MOE_WINDOW = 6


@dataclass(frozen=True)
class ArchConfig:
    """Shape of the network; the time axis must survive the conv stack."""

    m: int = 20
    n: int = 28
    conv: tuple[tuple[int, int], ...] = ((3, 48), (3, 64), (3, 96))
    dense: tuple[int, ...] = (64,)
    dropout: float = 0.35
    leaky_slope: float = 0.01
    loss: str = "return_weighted_ce"

    def __post_init__(self):
        object.__setattr__(self, "conv", tuple(tuple(c) for c in self.conv))
        object.__setattr__(self, "dense", tuple(self.dense))
        if any(k < 1 for k, _ in self.conv):
            raise ConfigError(f"conv kernel sizes must be >= 1: {self.conv}")
        if sum(k - 1 for k, _ in self.conv) >= self.m:
            raise ConfigError(
                f"conv stack consumes the whole time axis: m={self.m}, conv={self.conv}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1): {self.dropout}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky slope must be in (0, 1): {self.leaky_slope}")
        LossKind(self.loss)  # validates

    @property
    def loss_kind(self) -> LossKind:
        return LossKind(self.loss)


@dataclass(frozen=True)
class TrainConfig:
    """Per-loss training schedule."""

    initial_lr: float
    min_lr: float
    dropout: float
    batch_size: int = 256
    max_epochs: int = 200
    plateau_patience: int = 5
    early_stop_patience: int = 20

    @staticmethod
    def for_loss(kind: str, **overrides) -> "TrainConfig":
        base = {
            "return_weighted_ce": TrainConfig(0.01, 0.001, 0.35),
            "mse": TrainConfig(0.01, 0.001, 0.40),
            "ce": TrainConfig(0.005, 0.0005, 0.40),
        }[LossKind(kind).kind]
        return replace(base, **overrides) if overrides else base


class ModelState:
    """Parameters, batch-norm stats, optimizer state, and RNG for one model."""

    def __init__(self, arch: ArchConfig, params: dict[str, Tensor],
                 bn_states: dict[str, BatchNormState], rng: np.random.Generator,
                 seed: int, optimizer: AdamOptimizer | None = None):
        self.arch = arch
        self.params = params
        self.bn_states = bn_states
        self.rng = rng
        self.seed = seed
        self.optimizer = optimizer or AdamOptimizer(
            list(params.values()), lr=TrainConfig.for_loss(arch.loss).initial_lr
        )

    @property
    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def snapshot(self) -> dict:
        return {
            "params": {k: p.data.copy() for k, p in self.params.items()},
            "bn": {k: s.copy() for k, s in self.bn_states.items()},
        }

    def restore(self, snap: dict) -> None:
        for k, p in self.params.items():
            p.data = snap["params"][k].copy()
        for k in self.bn_states:
            self.bn_states[k] = snap["bn"][k].copy()


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    draw = rng.normal(0.0, std, size=shape)
    return np.clip(draw, -2.0 * std, 2.0 * std)


def build_model(arch: ArchConfig, seed: int) -> ModelState:
    """Initialize a model deterministically from the seed.

    Conv and dense weights use scaled init (variance 2 / fan_in, clipped at
    two sigmas); the sector embedding is uniform in [-0.05, 0.05].
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    params: dict[str, Tensor] = {}
    bn_states: dict[str, BatchNormState] = {}

    params["embedding"] = Tensor(
        rng.uniform(-0.05, 0.05, size=(N_SECTOR_ROWS, arch.n)), requires_grad=True
    )
    ch_in = arch.n
    for i, (k, ch_out) in enumerate(arch.conv):
        std = np.sqrt(2.0 / (k * ch_in))
        params[f"conv{i}_w"] = Tensor(_trunc_normal(rng, (k, ch_in, ch_out), std), requires_grad=True)
        params[f"conv{i}_b"] = Tensor(np.zeros(ch_out), requires_grad=True)
        params[f"conv{i}_bn_gamma"] = Tensor(np.ones(ch_out), requires_grad=True)
        params[f"conv{i}_bn_beta"] = Tensor(np.zeros(ch_out), requires_grad=True)
        bn_states[f"conv{i}_bn"] = BatchNormState(ch_out)
        ch_in = ch_out

    d_in = ch_in
    for i, width in enumerate(arch.dense):
        std = np.sqrt(2.0 / d_in)
        params[f"dense{i}_w"] = Tensor(_trunc_normal(rng, (d_in, width), std), requires_grad=True)
        params[f"dense{i}_b"] = Tensor(np.zeros(width), requires_grad=True)
        params[f"dense{i}_bn_gamma"] = Tensor(np.ones(width), requires_grad=True)
        params[f"dense{i}_bn_beta"] = Tensor(np.zeros(width), requires_grad=True)
        bn_states[f"dense{i}_bn"] = BatchNormState(width)
        d_in = width

    arity = arch.loss_kind.output_arity
    std = np.sqrt(2.0 / d_in)
    params["out_w"] = Tensor(_trunc_normal(rng, (d_in, arity), std), requires_grad=True)
    params["out_b"] = Tensor(np.zeros(arity), requires_grad=True)

    state = ModelState(arch, params, bn_states, rng, seed)
    state.optimizer = AdamOptimizer(
        state.param_list(), lr=TrainConfig.for_loss(arch.loss).initial_lr
    )
    return state


def forward(
    state: ModelState,
    windows: np.ndarray,
    sector_ids: np.ndarray,
    train: bool,
    dropout_rate: float | None = None,
    rng: np.random.Generator | None = None,
    update_bn_stats: bool = True,
) -> Tensor:
    """Run the network on a batch of (m, n) windows.

    Stack: embedding add, then conv blocks (conv, batch norm, leaky ReLU,
    dropout), global average pooling over time, dense blocks with the same
    trimmings, and a final dense head (softmax for classification kinds).
    """
    arch = state.arch
    p = state.params
    rate = arch.dropout if dropout_rate is None else dropout_rate
    rng = rng if rng is not None else state.rng

    h = embedding_add(Tensor(windows), p["embedding"], sector_ids)
    for i in range(len(arch.conv)):
        h = conv1d_valid(h, p[f"conv{i}_w"], p[f"conv{i}_b"])
        h = batch_norm(h, p[f"conv{i}_bn_gamma"], p[f"conv{i}_bn_beta"],
                       state.bn_states[f"conv{i}_bn"], train, update_bn_stats)
        h = leaky_relu(h, arch.leaky_slope)
        h = dropout(h, rate, rng, train)
    h = global_avg_pool(h)
    for i in range(len(arch.dense)):
        h = dense(h, p[f"dense{i}_w"], p[f"dense{i}_b"])
        h = batch_norm(h, p[f"dense{i}_bn_gamma"], p[f"dense{i}_bn_beta"],
                       state.bn_states[f"dense{i}_bn"], train, update_bn_stats)
        h = leaky_relu(h, arch.leaky_slope)
        h = dropout(h, rate, rng, train)
    out = dense(h, p["out_w"], p["out_b"])
    if arch.loss_kind.classification:
        out = softmax(out)
    return out


def predict(state: ModelState, window: np.ndarray, sector_id: int) -> np.ndarray:
    """Inference for a single window: probability 5-vector or 1-vector."""
    out = forward(
        state,
        np.asarray(window, dtype=np.float64)[None, :, :],
        np.array([sector_id]),
        train=False,
    )
    return out.data[0]

def predict_batch(state: ModelState, windows: np.ndarray, sector_ids: np.ndarray,
                  chunk: int = 4096) -> np.ndarray:
    outs = []
    for lo in range(0, len(windows), chunk):
        outs.append(
            forward(state, windows[lo : lo + chunk], sector_ids[lo : lo + chunk],
                    train=False).data
        )
    return np.concatenate(outs, axis=0)


def score(p: np.ndarray) -> float:
    """Ranking score: expected class value under [-2, -1, 0, 1, 2]."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (5,):
        raise NumericError(f"score expects a probability 5-vector, got shape {p.shape}")
    return float(p @ SCORE_VECTOR)


def _evaluate(state: ModelState, kind: LossKind, sample_set, chunk: int = 4096) -> float:
    """Mean loss over a SampleSet in infer mode."""
    total = 0.0
    n = len(sample_set)
    for lo in range(0, n, chunk):
        sl = slice(lo, min(lo + chunk, n))
        out = forward(state, sample_set.windows[sl], sample_set.sector_ids[sl], train=False)
        loss = batch_loss(kind, out, sample_set.labels[sl], sample_set.returns[sl],
                          sample_set.weights[sl])
        total += loss.item() * (sl.stop - sl.start)
    return total / n


def train_period(state: ModelState, train_set, val_set, hp: TrainConfig) -> dict:
    """Fit one walk-forward period, warm-starting from the current weights.

    The learning rate is reset to its initial value at the start (the
    retraining rule), then follows plateau halving down to min_lr. Early
    stopping restores the best-validation snapshot.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise NumericError("train_period needs non-empty train and validation sets")
    kind = state.arch.loss_kind
    opt = state.optimizer
    opt.initial_lr = hp.initial_lr
    opt.reset_lr()
    plateau = ReduceOnPlateau(opt, min_lr=hp.min_lr, patience=hp.plateau_patience)
    stopper = EarlyStopping(patience=hp.early_stop_patience)

    history = {"train_loss": [], "val_loss": [], "lr": []}
    n = len(train_set)
    for _epoch in range(hp.max_epochs):
        order = state.rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, hp.batch_size):
            idx = order[lo : lo + hp.batch_size]
            out = forward(state, train_set.windows[idx], train_set.sector_ids[idx],
                          train=True, dropout_rate=hp.dropout)
            loss = batch_loss(kind, out, train_set.labels[idx], train_set.returns[idx],
                              train_set.weights[idx])
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite training loss: {loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(idx)
        val_loss = _evaluate(state, kind, val_set)
        history["train_loss"].append(epoch_loss / n)
        history["val_loss"].append(val_loss)
        history["lr"].append(opt.lr)
        if stopper.check(val_loss, state.snapshot()):
            break
        plateau.step(val_loss)

    if stopper.best_snapshot is not None:
        state.restore(stopper.best_snapshot)
        history["best_val_loss"] = stopper.best
    history["epochs"] = len(history["train_loss"])
    return history


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------


@dataclass
class EnsembleState:
    """Member models plus the trailing per-period returns that weight them."""

    members: list[ModelState]
    trailing_returns: list[list[float]] = field(default_factory=list)
    combine_mode: str = "moe"
    window: int = MOE_WINDOW

    def __post_init__(self):
        if self.combine_mode not in ("moe", "simple_average"):
            raise ConfigError(f"unknown combine mode {self.combine_mode!r}")
        if not self.trailing_returns:
            self.trailing_returns = [[] for _ in self.members]

    def record_period_returns(self, member_returns: list[float]) -> None:
        if len(member_returns) != len(self.members):
            raise NumericError("one period return per member required")
        for hist, r in zip(self.trailing_returns, member_returns):
            hist.append(float(r))
            del hist[: max(0, len(hist) - self.window)]


def moe_weights(trailing_returns: list[list[float]], window: int = MOE_WINDOW) -> np.ndarray:
    """Softmax of each member's compounded return over its trailing window.

    Before any period has been recorded the members are weighted equally.
    """
    k = len(trailing_returns)
    if any(len(h) == 0 for h in trailing_returns):
        return np.full(k, 1.0 / k)
    r = np.array([np.prod(1.0 + np.asarray(h[-window:])) - 1.0 for h in trailing_returns])
    e = np.exp(r - r.max())
    return e / e.sum()


def ensemble_weights(ens: EnsembleState) -> np.ndarray:
    if ens.combine_mode == "simple_average":
        return np.full(len(ens.members), 1.0 / len(ens.members))
    return moe_weights(ens.trailing_returns, ens.window)


def ensemble_predict(ens: EnsembleState, window: np.ndarray, sector_id: int) -> np.ndarray:
    """Weighted average of member outputs; stays on the simplex for
    classification kinds because the weights do."""
    w = ensemble_weights(ens)
    preds = [predict(m, window, sector_id) for m in ens.members]
    return np.tensordot(w, np.stack(preds), axes=1)


def ensemble_predict_batch(ens: EnsembleState, windows: np.ndarray,
                           sector_ids: np.ndarray) -> np.ndarray:
    w = ensemble_weights(ens)
    preds = [predict_batch(m, windows, sector_ids) for m in ens.members]
    return np.tensordot(w, np.stack(preds), axes=1)


# ---------------------------------------------------------------------------
# checkpoints: versioned binary, bit-identical round trip
# ---------------------------------------------------------------------------

_MODEL_MAGIC = b"SRNN"
_ENSEMBLE_MAGIC = b"SREN"
_CKPT_VERSION = 1


def _encode_model(state: ModelState) -> bytes:
    names = list(state.params.keys())
    bn_names = sorted(state.bn_states.keys())
    opt = state.optimizer.state_dict()
    header = {
        "version": _CKPT_VERSION,
        "arch": asdict(state.arch),
        "seed": state.seed,
        "param_names": names,
        "param_shapes": {k: list(state.params[k].data.shape) for k in names},
        "bn_names": bn_names,
        "bn_meta": {k: {"momentum": state.bn_states[k].momentum,
                        "eps": state.bn_states[k].eps,
                        "channels": len(state.bn_states[k].running_mean)}
                    for k in bn_names},
        "optimizer": {k: opt[k] for k in ("lr", "initial_lr", "beta1", "beta2", "eps",
                                          "step_count")},
        "rng_state": state.rng.bit_generator.state,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buffers = []
    for k in names:
        buffers.append(state.params[k].data.astype("<f8").tobytes())
    for arrs in (opt["m"], opt["v"]):
        for a in arrs:
            buffers.append(np.asarray(a).astype("<f8").tobytes())
    for k in bn_names:
        buffers.append(state.bn_states[k].running_mean.astype("<f8").tobytes())
        buffers.append(state.bn_states[k].running_var.astype("<f8").tobytes())
    body = b"".join(buffers)
    return _MODEL_MAGIC + struct.pack("<II", _CKPT_VERSION, len(head)) + head + body


def _decode_model(blob: bytes) -> ModelState:
    if blob[:4] != _MODEL_MAGIC:
        raise NumericError("not a model checkpoint")
    version, head_len = struct.unpack("<II", blob[4:12])
    if version != _CKPT_VERSION:
        raise NumericError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[12 : 12 + head_len].decode())
    offset = 12 + head_len

    def take(shape) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += count * 8
        return arr.astype(np.float64)

    arch = ArchConfig(**header["arch"])
    params = {}
    for k in header["param_names"]:
        params[k] = Tensor(take(header["param_shapes"][k]), requires_grad=True)
    m_list = [take(header["param_shapes"][k]) for k in header["param_names"]]
    v_list = [take(header["param_shapes"][k]) for k in header["param_names"]]
    bn_states = {}
    for k in header["bn_names"]:
        meta = header["bn_meta"][k]
        st = BatchNormState(meta["channels"], meta["momentum"], meta["eps"])
        st.running_mean = take([meta["channels"]])
        st.running_var = take([meta["channels"]])
        bn_states[k] = st

    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = header["rng_state"]
    state = ModelState(arch, params, bn_states, rng, header["seed"])
    opt = AdamOptimizer(state.param_list(), lr=header["optimizer"]["lr"])
    opt.load_state_dict({**header["optimizer"], "m": m_list, "v": v_list})
    state.optimizer = opt
    return state


def save_checkpoint(state: ModelState, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(_encode_model(state))


def load_checkpoint(path: str) -> ModelState:
    with open(path, "rb") as fh:
        return _decode_model(fh.read())


def save_ensemble(ens: EnsembleState, path: str) -> None:
    header = {
        "version": _CKPT_VERSION,
        "combine_mode": ens.combine_mode,
        "window": ens.window,
        "trailing_returns": ens.trailing_returns,
        "n_members": len(ens.members),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blobs = [_encode_model(m) for m in ens.members]
    with open(path, "wb") as fh:
        fh.write(_ENSEMBLE_MAGIC + struct.pack("<II", _CKPT_VERSION, len(head)) + head)
        for blob in blobs:
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)


def load_ensemble(path: str) -> EnsembleState:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _ENSEMBLE_MAGIC:
        raise NumericError("not an ensemble checkpoint")
    _version, head_len = struct.unpack("<II", blob[4:12])
    header = json.loads(blob[12 : 12 + head_len].decode())
    offset = 12 + head_len
    members = []
    for _ in range(header["n_members"]):
        (size,) = struct.unpack("<Q", blob[offset : offset + 8])
        offset += 8
        members.append(_decode_model(blob[offset : offset + size]))
        offset += size
    return EnsembleState(
        members=members,
        trailing_returns=[list(h) for h in header["trailing_returns"]],
        combine_mode=header["combine_mode"],
        window=header["window"],
    )
