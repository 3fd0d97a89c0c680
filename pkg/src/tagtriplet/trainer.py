"""
tagtriplet Trainer
Reference encoder (standardizer -> affine layers with ELU -> optional l2
normalization) with exact backpropagation, the margin triplet loss, optimizers
and the epoch loop with online triplet selection.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

from .artifacts import check_header, fmt_float, fmt_row, header_line, parse_floats
from .config import MiningConfig, TrainerConfig
from .errors import (
    DimensionError,
    FormatVersionError,
    ParameterError,
    StateError,
    TrainingStallError,
)
from .mining import (
    MiniBatch,
    Triplet,
    make_batches,
    mask_stats,
    select_pairs,
    select_triplets,
    squared_distances,
    write_triplet_dump,
)

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12
ELU_ALPHA = 1.0


@dataclass(frozen=True)
class TripletLossConfig:
    margin: float = 0.2
    reduction: str = "mean"

    def __post_init__(self):
        if self.margin < 0:
            raise ParameterError("margin", self.margin, ">= 0")
        if self.reduction not in ("sum", "mean"):
            raise ParameterError("reduction", self.reduction, "sum | mean")


# --- loss ---

def _check_same_dim(*vectors: np.ndarray):
    dims = {np.shape(v) for v in vectors}
    if len(dims) != 1:
        raise DimensionError(f"triplet embeddings differ in shape: {sorted(dims)}")


def triplet_loss(emb_a, emb_p, emb_n, alpha: float) -> float:
    """max(|a - p|^2 - |a - n|^2 + alpha, 0)"""
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (emb_a, emb_p, emb_n))
    _check_same_dim(a, p, n)
    value = np.sum((a - p) ** 2) - np.sum((a - n) ** 2) + alpha
    return float(max(value, 0.0))


def triplet_loss_grad(emb_a, emb_p, emb_n, alpha: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Subgradient of triplet_loss wrt (a, p, n); the flat branch at the hinge boundary"""
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (emb_a, emb_p, emb_n))
    _check_same_dim(a, p, n)
    value = np.sum((a - p) ** 2) - np.sum((a - n) ** 2) + alpha
    if value <= 0.0:
        zero = np.zeros_like(a)
        return zero, zero.copy(), zero.copy()
    return 2.0 * (n - p), 2.0 * (p - a), 2.0 * (a - n)


def batch_triplet_loss(
    embeddings: np.ndarray,
    triplets: Sequence[Triplet],
    config: TripletLossConfig,
) -> Tuple[float, np.ndarray, int]:
    """Reduced loss over the triplets, its gradient wrt every embedding row, and the active count"""
    grad = np.zeros_like(embeddings, dtype=np.float64)
    total = 0.0
    active = 0
    for t in triplets:
        a, p, n = embeddings[t.anchor], embeddings[t.positive], embeddings[t.negative]
        value = triplet_loss(a, p, n, config.margin)
        if value > 0.0:
            active += 1
            total += value
            ga, gp, gn = triplet_loss_grad(a, p, n, config.margin)
            grad[t.anchor] += ga
            grad[t.positive] += gp
            grad[t.negative] += gn
    if config.reduction == "mean" and triplets:
        total /= len(triplets)
        grad /= len(triplets)
    return total, grad, active


# --- encoder ---

def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, ELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, ELU_ALPHA * np.exp(np.minimum(x, 0.0)))


@dataclass
class ForwardCache:
    features: np.ndarray
    version: int
    inputs: List[np.ndarray]       # input of each affine layer
    pre_activations: List[np.ndarray]
    raw_output: np.ndarray          # before l2 normalization
    norms: Optional[np.ndarray]


class EncoderModel:
    """Trainable map from f-dimensional features to d-dimensional embeddings"""

    def __init__(self, kind: str, layer_dims: Sequence[int], output_normalize: bool = True):
        if kind not in ("identity", "linear", "mlp"):
            raise ParameterError("kind", kind, "identity | linear | mlp")
        self.kind = kind
        self.layer_dims = [int(d) for d in layer_dims]
        self.output_normalize = output_normalize
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        self.mean: Optional[np.ndarray] = None
        self.var: Optional[np.ndarray] = None
        self.version = 0
        self._cache: Optional[ForwardCache] = None

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def dim(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> List[np.ndarray]:
        """Weights and biases in fixed order: W0, b0, W1, b1, ..."""
        params = []
        for W, b in zip(self.weights, self.biases):
            params.extend([W, b])
        return params

    def __repr__(self):
        dims = "->".join(str(d) for d in self.layer_dims)
        return f"EncoderModel(kind={self.kind}, dims={dims}, normalize={self.output_normalize})"


def init_encoder(
    kind: str,
    input_dim: int,
    dim: int = 256,
    hidden: Sequence[int] = (),
    seed: int = 0,
    output_normalize: bool = True,
) -> EncoderModel:
    """Seeded Glorot-uniform weights, zero biases"""
    if kind == "identity":
        layer_dims = [input_dim]
    elif kind == "linear":
        layer_dims = [input_dim, dim]
    else:
        layer_dims = [input_dim, *hidden, dim]
    model = EncoderModel(kind, layer_dims, output_normalize)
    rng = np.random.default_rng(seed)
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        model.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        model.biases.append(np.zeros(fan_out))
    return model


def fit_standardizer(model: EncoderModel, features: np.ndarray):
    """Per-feature mean and variance from the training split; zero variance becomes 1"""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise DimensionError(f"features have shape {X.shape}, encoder expects width {model.input_dim}")
    model.mean = X.mean(axis=0)
    var = X.var(axis=0)
    flat = var <= 0.0
    if np.any(flat):
        logger.warning(f"{int(flat.sum())} features have zero variance; using unit scale for them")
        var = np.where(flat, 1.0, var)
    model.var = var
    model._cache = None


def encoder_forward(model: EncoderModel, features: np.ndarray, cache: bool = True) -> np.ndarray:
    """standardize -> affine layers (ELU on hidden ones) -> optional l2 normalization"""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise DimensionError(f"features have width {X.shape[-1]}, encoder expects {model.input_dim}")
    if model.mean is None or model.var is None:
        raise StateError("encoder standardizer has not been fitted")

    h = (X - model.mean) / np.sqrt(model.var)
    inputs, pres = [], []
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        pre = h @ W + b
        pres.append(pre)
        h = elu(pre) if i < last else pre

    norms = None
    out = h
    if model.output_normalize:
        norms = np.linalg.norm(h, axis=1)
        out = h / np.maximum(norms, NORM_EPS)[:, None]

    if cache:
        model._cache = ForwardCache(features, model.version, inputs, pres, h, norms)
    return out


def embed(model: EncoderModel, features: np.ndarray) -> np.ndarray:
    return encoder_forward(model, features, cache=False)


def encoder_backward(
    model: EncoderModel,
    features: np.ndarray,
    upstream: np.ndarray,
) -> List[np.ndarray]:
    """Gradients of the loss wrt every parameter, ordered like model.parameters()"""
    c = model._cache
    if c is None:
        raise StateError("no cached forward pass; call encoder_forward first")
    same_input = c.features is features or (
        np.shape(c.features) == np.shape(features) and np.array_equal(c.features, features)
    )
    if c.version != model.version or not same_input:
        raise StateError("cached forward pass is stale for these features or parameters")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != c.raw_output.shape:
        raise DimensionError(f"upstream gradient has shape {g.shape}, expected {c.raw_output.shape}")

    if model.output_normalize:
        scale = np.maximum(c.norms, NORM_EPS)[:, None]
        y = c.raw_output / scale
        radial = np.sum(y * g, axis=1, keepdims=True)
        g = np.where(c.norms[:, None] > NORM_EPS, (g - y * radial) / scale, g / scale)

    grads: List[np.ndarray] = [None] * (2 * len(model.weights))
    last = len(model.weights) - 1
    for i in range(last, -1, -1):
        if i < last:
            g = g * elu_grad(c.pre_activations[i])
        grads[2 * i] = c.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ model.weights[i].T
    return grads


# --- optimizers ---

class SGD:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]):
        for p, g in zip(params, grads):
            p -= self.learning_rate * g


class Momentum:
    def __init__(self, learning_rate: float, beta: float = 0.9):
        self.learning_rate = learning_rate
        self.beta = beta
        self.velocity: Optional[List[np.ndarray]] = None

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]):
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self.velocity):
            v *= self.beta
            v += g
            p -= self.learning_rate * v


class Adam:
    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Optional[List[np.ndarray]] = None
        self.v: Optional[List[np.ndarray]] = None

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, learning_rate: float):
    if learning_rate < 0:
        raise ParameterError("learning_rate", learning_rate, ">= 0")
    if name == "sgd":
        return SGD(learning_rate)
    if name == "sgd-momentum":
        return Momentum(learning_rate, beta=0.9)
    if name == "adam":
        return Adam(learning_rate)
    raise ParameterError("optimizer", name, "sgd | sgd-momentum | adam")


def optimizer_step(model: EncoderModel, optimizer, grads: List[np.ndarray]):
    optimizer.step(model.parameters(), grads)
    model.version += 1


# --- training loop ---

@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    active_triplets: int
    batches: int
    triplets: int
    validation_loss: Optional[float] = None


@dataclass
class TrainResult:
    model: EncoderModel
    history: List[EpochRecord] = field(default_factory=list)

    @property
    def triplet_counts(self) -> List[int]:
        return [r.triplets for r in self.history]


@dataclass(frozen=True, eq=False)
class HeldOut:
    """Validation tracks: features, relatedness rows and albums aligned on track_ids"""
    track_ids: Tuple[str, ...]
    features: np.ndarray
    relatedness: np.ndarray
    album_ids: Tuple[str, ...]

    def __post_init__(self):
        n = len(self.track_ids)
        if not (self.features.shape[0] == self.relatedness.shape[0] == len(self.album_ids) == n):
            raise DimensionError("validation features, relatedness vectors and album ids are not aligned")


def held_out_loss(
    model: EncoderModel,
    held_out: HeldOut,
    mining_config: MiningConfig,
    loss_cfg: TripletLossConfig,
    seed: int,
) -> Optional[float]:
    """
    Mean batch triplet loss over fixed batches of the held-out tracks, mined
    the same way as in training. No parameter changes. None when no batch
    yields a triplet.
    """
    if len(held_out.track_ids) < 3:
        return None
    losses = []
    for batch_no, idx in enumerate(make_batches(held_out.track_ids, mining_config.batch_size, seed, 0)):
        emb = embed(model, held_out.features[idx])
        batch = MiniBatch(
            track_ids=tuple(held_out.track_ids[i] for i in idx),
            lsi_vectors=held_out.relatedness[idx],
            embeddings=emb,
            album_ids=tuple(held_out.album_ids[i] for i in idx),
        )
        pairs = select_pairs(batch, mining_config.theta_pos, mining_config.theta_neg)
        d2 = squared_distances(emb)
        triplets = select_triplets(batch, pairs, mining_config.strategy, seed=[seed, 0, batch_no], distances=d2)
        if triplets:
            losses.append(batch_triplet_loss(emb, triplets, loss_cfg)[0])
    return float(np.mean(losses)) if losses else None


def train(
    track_ids: Sequence[str],
    features: np.ndarray,
    relatedness: np.ndarray,
    album_ids: Sequence[str],
    trainer_config: TrainerConfig,
    mining_config: MiningConfig,
    triplet_dump: Optional[TextIO] = None,
    validation: Optional[HeldOut] = None,
) -> TrainResult:
    """
    Epoch loop: seeded shuffle -> batches -> embeddings -> candidate pairs ->
    triplets -> loss and gradients -> optimizer step. `relatedness` holds the
    l2-normalized LSI (or overlap) vector of each track, aligned with
    `track_ids`, `features` and `album_ids`. With `validation`, every epoch
    also records the held-out triplet loss.
    """
    X = np.asarray(features, dtype=np.float64)
    n = len(track_ids)
    if n == 0:
        raise StateError("training split is empty")
    if not (X.shape[0] == relatedness.shape[0] == len(album_ids) == n):
        raise DimensionError("features, relatedness vectors and album ids are not aligned on track ids")

    cfg = trainer_config
    model = init_encoder(cfg.encoder, X.shape[1], dim=cfg.dim, hidden=cfg.hidden_dims,
                         seed=cfg.seed, output_normalize=cfg.output_normalize)
    fit_standardizer(model, X)
    optimizer = make_optimizer(cfg.optimizer, cfg.learning_rate)
    loss_cfg = TripletLossConfig(margin=cfg.margin, reduction=cfg.reduction)
    ids = tuple(track_ids)
    albums = tuple(album_ids)
    result = TrainResult(model=model)
    logger.info(f"Training {model!r} on {n} tracks for {cfg.epochs} epochs "
                f"({mining_config.strategy}, batch={mining_config.batch_size})")

    for epoch in range(1, cfg.epochs + 1):
        batches = make_batches(ids, mining_config.batch_size, cfg.seed, epoch)
        losses, active, n_triplets, occupancy = [], 0, 0, []
        for batch_no, idx in enumerate(batches):
            xb = X[idx]
            emb = encoder_forward(model, xb)
            batch = MiniBatch(
                track_ids=tuple(ids[i] for i in idx),
                lsi_vectors=relatedness[idx],
                embeddings=emb,
                album_ids=tuple(albums[i] for i in idx),
            )
            pairs = select_pairs(batch, mining_config.theta_pos, mining_config.theta_neg)
            occupancy.append(mask_stats(pairs))
            d2 = squared_distances(emb)
            triplets = select_triplets(batch, pairs, mining_config.strategy,
                                       seed=[cfg.seed, epoch, batch_no], distances=d2)
            if not triplets:
                continue
            if triplet_dump is not None:
                write_triplet_dump(triplet_dump, epoch, batch_no, batch, pairs, triplets, d2)
            loss, grad_emb, n_active = batch_triplet_loss(emb, triplets, loss_cfg)
            grads = encoder_backward(model, xb, grad_emb)
            optimizer_step(model, optimizer, grads)
            losses.append(loss)
            active += n_active
            n_triplets += len(triplets)

        if n_triplets == 0:
            diagnostics = {
                "positive_rate": float(np.mean([s.positive_rate for s in occupancy])),
                "negative_rate": float(np.mean([s.negative_rate for s in occupancy])),
                "anchors_with_both": float(sum(s.anchors_with_both for s in occupancy)),
                "batches": float(len(batches)),
            }
            raise TrainingStallError(epoch, diagnostics)

        val_loss = None
        if validation is not None:
            val_loss = held_out_loss(model, validation, mining_config, loss_cfg, cfg.seed)
        record = EpochRecord(epoch, float(np.mean(losses)), active, len(batches), n_triplets, val_loss)
        result.history.append(record)
        val_text = "n/a" if val_loss is None else f"{val_loss:.6f}"
        logger.info(f"epoch {epoch}: mean_loss={record.mean_loss:.6f} validation_loss={val_text} "
                    f"active={active}/{n_triplets} batches={len(batches)}")
    return result


# --- persistence ---

def write_loss_history(history: Sequence[EpochRecord], path: Union[str, Path]):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(header_line("loss-history"))
        f.write("epoch\tmean_loss\tactive_triplets\tbatches\tvalidation_loss\n")
        for r in history:
            val = "nan" if r.validation_loss is None else fmt_float(r.validation_loss)
            f.write(f"{r.epoch}\t{fmt_float(r.mean_loss)}\t{r.active_triplets}\t{r.batches}\t{val}\n")


def save_checkpoint(model: EncoderModel, path: Union[str, Path], margin: float, seed: int, epoch: int):
    """Versioned header, then standardizer and parameters in fixed order"""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(header_line("checkpoint"))
        f.write(f"kind\t{model.kind}\n")
        f.write("layer_dims\t" + "\t".join(str(d) for d in model.layer_dims) + "\n")
        f.write(f"output_normalize\t{'true' if model.output_normalize else 'false'}\n")
        f.write(f"margin\t{fmt_float(margin)}\n")
        f.write(f"seed\t{seed}\n")
        f.write(f"epoch\t{epoch}\n")
        f.write("mean\t" + fmt_row(model.mean) + "\n")
        f.write("var\t" + fmt_row(model.var) + "\n")
        for i, (W, b) in enumerate(zip(model.weights, model.biases)):
            f.write(f"W{i}\t{W.shape[0]}\t{W.shape[1]}\n")
            for row in W:
                f.write(fmt_row(row) + "\n")
            f.write(f"b{i}\t" + fmt_row(b) + "\n")
    logger.info(f"Saved checkpoint {path}")


@dataclass
class Checkpoint:
    model: EncoderModel
    margin: float
    seed: int
    epoch: int


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().split("\n")
    check_header(lines[0], "checkpoint", path)
    try:
        meta = {}
        for line in lines[1:9]:
            key, _, value = line.partition("\t")
            meta[key] = value
        layer_dims = [int(x) for x in meta["layer_dims"].split("\t")]
        model = EncoderModel(meta["kind"], layer_dims, meta["output_normalize"] == "true")
        model.mean = parse_floats(meta["mean"])
        model.var = parse_floats(meta["var"])
        pos = 9
        for i in range(len(layer_dims) - 1):
            name, rows, cols = lines[pos].split("\t")
            if name != f"W{i}":
                raise ValueError(f"expected W{i}, found {name}")
            rows, cols = int(rows), int(cols)
            W = np.array([parse_floats(l) for l in lines[pos + 1:pos + 1 + rows]]).reshape(rows, cols)
            name, _, rest = lines[pos + 1 + rows].partition("\t")
            if name != f"b{i}":
                raise ValueError(f"expected b{i}, found {name}")
            model.weights.append(W)
            model.biases.append(parse_floats(rest))
            pos += rows + 2
        return Checkpoint(model, float(meta["margin"]), int(meta["seed"]), int(meta["epoch"]))
    except (KeyError, ValueError) as e:
        raise FormatVersionError(f"{path}: corrupt checkpoint ({e})")
