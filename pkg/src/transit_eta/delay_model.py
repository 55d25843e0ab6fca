"""Graph-convolutional + LSTM traffic delay model, in plain numpy.

The spatial encoder applies two graph convolutions with ReLU to each input
slot independently; an LSTM then runs over the ``H`` encoded slots of every
segment and a linear head maps its final hidden state to the next slot's
dwell time. Gradients are derived by hand and checked against finite
differences in the test suite.

The adjacency fed to the convolutions blends physical connectivity with a
thresholded dwell-time correlation matrix:

    A = alpha * physical + (1 - alpha) * threshold(corr, K)
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ingest import FeatureMatrix

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
PARAM_NAMES = ("w1", "b1", "w2", "b2", "wx", "wh", "bg", "wo", "bo")


class TrainingDiverged(RuntimeError):
    pass


# --- adjacency -------------------------------------------------------------


def correlation_matrix(x: np.ndarray) -> np.ndarray:
    """Pearson correlation between rows; constant rows correlate 0 with others."""
    x = np.asarray(x, dtype=float)
    xc = x - x.mean(axis=1, keepdims=True)
    norm = np.sqrt((xc * xc).sum(axis=1))
    safe = np.where(norm > 0, norm, 1.0)
    z = xc / safe[:, None]
    c = z @ z.T
    c[norm == 0, :] = 0.0
    c[:, norm == 0] = 0.0
    c = np.clip((c + c.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(c, 1.0)
    return c


def threshold_correlation(c: np.ndarray, k: float) -> np.ndarray:
    """Zero every off-diagonal entry below ``k`` (which removes all negatives)."""
    if not 0.0 <= k <= 1.0:
        raise ValueError(f"K must lie in [0, 1], got {k}")
    out = np.where(c >= k, c, 0.0)
    out = np.where(out < 0, 0.0, out)
    np.fill_diagonal(out, np.diag(c))
    return out


@dataclass
class AugmentedAdjacency:
    alpha: float
    k: float | None
    matrix: np.ndarray


def augment_adjacency(
    phys: np.ndarray, corr: np.ndarray, alpha: float, k: float | None = None
) -> AugmentedAdjacency:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    phys = np.asarray(phys, dtype=float)
    corr = np.asarray(corr, dtype=float)
    for name, m in (("physical", phys), ("correlation", corr)):
        if m.shape != (len(m), len(m)) or not np.allclose(m, m.T, rtol=0, atol=1e-12):
            raise ValueError(f"{name} matrix must be square and symmetric")
    if phys.shape != corr.shape:
        raise ValueError("adjacency shapes differ")
    return AugmentedAdjacency(alpha, k, alpha * phys + (1.0 - alpha) * corr)


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """Symmetric renormalisation D^-1/2 (A + I) D^-1/2."""
    a = np.asarray(a, dtype=float)
    a_tilde = a + np.eye(len(a))
    d = a_tilde.sum(axis=1)
    inv = 1.0 / np.sqrt(d)
    return a_tilde * inv[:, None] * inv[None, :]


def build_adjacency(phys: np.ndarray, train_values: np.ndarray, alpha: float, k: float) -> np.ndarray:
    """Normalised augmented adjacency from physical links and training dwell rows."""
    corr = threshold_correlation(correlation_matrix(train_values), k)
    return normalize_adjacency(augment_adjacency(phys, corr, alpha, k).matrix)


# --- parameters and forward pass ------------------------------------------


@dataclass
class DelayModelParams:
    w1: np.ndarray  # (1, G)
    b1: np.ndarray  # (G,)
    w2: np.ndarray  # (G, G)
    b2: np.ndarray  # (G,)
    wx: np.ndarray  # (G, 4R) gates i, f, o, g
    wh: np.ndarray  # (R, 4R)
    bg: np.ndarray  # (4R,)
    wo: np.ndarray  # (R, 1)
    bo: np.ndarray  # (1,)

    @classmethod
    def init(cls, gcn_hidden: int = 16, lstm_hidden: int = 32, seed: int = 0) -> "DelayModelParams":
        rng = np.random.default_rng(seed)

        def glorot(shape):
            lim = math.sqrt(6.0 / (shape[0] + shape[1]))
            return rng.uniform(-lim, lim, size=shape)

        g, r = gcn_hidden, lstm_hidden
        bg = np.zeros(4 * r)
        bg[r : 2 * r] = 1.0  # forget-gate bias
        return cls(
            w1=glorot((1, g)), b1=np.zeros(g),
            w2=glorot((g, g)), b2=np.zeros(g),
            wx=glorot((g, 4 * r)), wh=glorot((r, 4 * r)), bg=bg,
            wo=glorot((r, 1)), bo=np.zeros(1),
        )

    @classmethod
    def zeros_like(cls, other: "DelayModelParams") -> "DelayModelParams":
        return cls(**{n: np.zeros_like(getattr(other, n)) for n in PARAM_NAMES})

    def copy(self) -> "DelayModelParams":
        return DelayModelParams(**{n: getattr(self, n).copy() for n in PARAM_NAMES})

    def items(self):
        return [(n, getattr(self, n)) for n in PARAM_NAMES]

    @property
    def gcn_hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def lstm_hidden(self) -> int:
        return self.wh.shape[0]


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gcn_forward(a_hat: np.ndarray, features: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """ReLU(Â · features · W + b) for features shaped (..., N, F)."""
    if a_hat.shape[1] != features.shape[-2] or features.shape[-1] != w.shape[0]:
        raise ValueError("shape mismatch in graph convolution")
    agg = np.matmul(a_hat, features)
    return np.maximum(agg @ w + b, 0.0)


def _spatial(a_hat, x, p: DelayModelParams):
    """Two graph convolutions applied to every slot. x: (B, N, H) -> (B, H, N, G)."""
    xs = np.moveaxis(x, 2, 1)[..., None]  # (B, H, N, 1)
    a1 = np.matmul(a_hat, xs)
    z1 = a1 @ p.w1 + p.b1
    h1 = np.maximum(z1, 0.0)
    a2 = np.matmul(a_hat, h1)
    z2 = a2 @ p.w2 + p.b2
    h2 = np.maximum(z2, 0.0)
    return h2, (a1, z1, h1, a2, z2)


def recurrent_forward(seq: np.ndarray, p: DelayModelParams, h_steps: int | None = None):
    """LSTM over seq (B, H, N, G); returns (prediction (B, N), cache)."""
    if h_steps is not None and seq.shape[1] != h_steps:
        raise ValueError(f"expected {h_steps} steps, got {seq.shape[1]}")
    b, steps, n, _ = seq.shape
    r = p.lstm_hidden
    h = np.zeros((b, n, r))
    c = np.zeros((b, n, r))
    cache = []
    for t in range(steps):
        gates = seq[:, t] @ p.wx + h @ p.wh + p.bg
        i = _sigmoid(gates[..., :r])
        f = _sigmoid(gates[..., r : 2 * r])
        o = _sigmoid(gates[..., 2 * r : 3 * r])
        g = np.tanh(gates[..., 3 * r :])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        cache.append((i, f, o, g, c_prev, h_prev, tc))
    y = (h @ p.wo)[..., 0] + p.bo[0]
    return y, (cache, h)


def forward(a_hat: np.ndarray, x: np.ndarray, p: DelayModelParams) -> np.ndarray:
    """Standardised prediction (B, N) for standardised inputs x (B, N, H)."""
    h2, _ = _spatial(a_hat, x, p)
    y, _ = recurrent_forward(h2, p)
    return y


def loss_and_grad(
    a_hat: np.ndarray, x: np.ndarray, target: np.ndarray, mask: np.ndarray, p: DelayModelParams
) -> tuple[float, DelayModelParams]:
    """Masked mean squared error and its gradient with respect to every parameter."""
    h2, (a1, z1, h1, a2, z2) = _spatial(a_hat, x, p)
    y, (cache, h_last) = recurrent_forward(h2, p)
    m = mask.astype(float)
    count = max(m.sum(), 1.0)
    err = (y - target) * m
    loss = float((err * err).sum() / count)

    grad = DelayModelParams.zeros_like(p)
    dy = 2.0 * err / count  # (B, N)
    grad.wo = _flat(h_last).T @ dy.reshape(-1, 1)
    grad.bo = np.array([dy.sum()])
    dh = dy[..., None] * p.wo[:, 0]
    dc = np.zeros_like(dh)
    r = p.lstm_hidden
    dseq = np.zeros_like(h2)
    for t in reversed(range(h2.shape[1])):
        i, f, o, g, c_prev, h_prev, tc = cache[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dgates = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=-1
        )
        flat_g = _flat(dgates)
        grad.wx += _flat(h2[:, t]).T @ flat_g
        grad.wh += _flat(h_prev).T @ flat_g
        grad.bg += dgates.sum(axis=(0, 1))
        dseq[:, t] = dgates @ p.wx.T
        dh = dgates @ p.wh.T
        dc = dc * f

    dz2 = dseq * (z2 > 0)
    grad.w2 = _flat(a2).T @ _flat(dz2)
    grad.b2 = dz2.sum(axis=(0, 1, 2))
    dh1 = np.matmul(a_hat.T, dz2 @ p.w2.T)
    dz1 = dh1 * (z1 > 0)
    grad.w1 = _flat(a1).T @ _flat(dz1)
    grad.b1 = dz1.sum(axis=(0, 1, 2))
    return loss, grad


# --- data windows ------------------------------------------------------------


@dataclass
class TrainingWindows:
    """Inputs (B, N, H) and targets (B, N) in seconds, with target mask."""

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return len(self.inputs)


def make_windows(
    values: np.ndarray, mask: np.ndarray, slots_per_day: int, h: int = 4, days: Iterable[int] | None = None
) -> TrainingWindows:
    """All H-slot windows inside each day, targeting the following slot."""
    n, total = values.shape
    n_days = total // slots_per_day
    days = range(n_days) if days is None else list(days)
    xs, ys, ms = [], [], []
    for d in days:
        base = d * slots_per_day
        for s in range(slots_per_day - h):
            xs.append(values[:, base + s : base + s + h])
            ys.append(values[:, base + s + h])
            ms.append(mask[:, base + s + h])
    if not xs:
        return TrainingWindows(np.zeros((0, n, h)), np.zeros((0, n)), np.zeros((0, n), dtype=bool))
    return TrainingWindows(np.stack(xs), np.stack(ys), np.stack(ms).astype(bool))


def split_days(n_days: int, train_fraction: float = 0.75) -> tuple[list[int], list[int]]:
    """Chronological split: earlier days train, later days test."""
    n_train = min(max(1, int(round(n_days * train_fraction))), n_days - 1) if n_days > 1 else 1
    return list(range(n_train)), list(range(n_train, n_days))


# --- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs: int = 500
    seed: int = 0
    gcn_hidden: int = 16
    lstm_hidden: int = 32
    optimizer: str = "adam"  # "adam" or "gd"
    h: int = 4


@dataclass
class DelayModel:
    params: DelayModelParams
    a_hat: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    h: int = 4
    meta: dict = field(default_factory=dict)

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        """Dwell seconds for the next slot from raw inputs (B, N, H) or (N, H)."""
        single = inputs.ndim == 2
        x = inputs[None] if single else inputs
        if x.shape[2] != self.h:
            raise ValueError(f"expected {self.h} input slots, got {x.shape[2]}")
        z = (x - self.mean[None, :, None]) / self.std[None, :, None]
        y = forward(self.a_hat, z, self.params) * self.std[None, :] + self.mean[None, :]
        return y[0] if single else y

    def save(self, path: str | Path) -> None:
        arrays = {n: a for n, a in self.params.items()}
        header = {"format_version": MODEL_FORMAT_VERSION, "h": self.h, "meta": self.meta,
                  "shapes": {n: list(a.shape) for n, a in arrays.items()}}
        with open(path, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), a_hat=self.a_hat,
                     mean=self.mean, std=self.std, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "DelayModel":
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            if header.get("format_version") != MODEL_FORMAT_VERSION:
                raise ValueError(f"unsupported model format {header.get('format_version')}")
            params = DelayModelParams(**{n: z[n] for n in PARAM_NAMES})
            for n, a in params.items():
                if list(a.shape) != header["shapes"][n]:
                    raise ValueError(f"shape mismatch for {n}")
            return cls(params, z["a_hat"], z["mean"], z["std"], header["h"], header["meta"])


def standardization(train_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = train_values.mean(axis=1)
    std = train_values.std(axis=1)
    return mean, np.where(std > 0, std, 1.0)


def train(
    windows: TrainingWindows,
    a_hat: np.ndarray,
    config: TrainConfig = TrainConfig(),
    mean: np.ndarray | None = None,
    std: np.ndarray | None = None,
) -> tuple[DelayModel, list[float]]:
    """Full-batch training on masked MSE in standardised units.

    ``mean``/``std`` default to statistics of the window inputs. Returns the
    model and the per-epoch loss (evaluated before each update).
    """
    if len(windows) == 0:
        raise ValueError("need at least one training window")
    n = windows.inputs.shape[1]
    if mean is None or std is None:
        flat = np.moveaxis(windows.inputs, 1, 0).reshape(n, -1)
        mean, std = standardization(flat)
    x = (windows.inputs - mean[None, :, None]) / std[None, :, None]
    y = (windows.targets - mean[None, :]) / std[None, :]
    params = DelayModelParams.init(config.gcn_hidden, config.lstm_hidden, config.seed)
    history: list[float] = []
    if config.optimizer == "adam":
        m1 = DelayModelParams.zeros_like(params)
        m2 = DelayModelParams.zeros_like(params)
    elif config.optimizer != "gd":
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    b1, b2, eps = 0.9, 0.999, 1e-8
    for epoch in range(config.epochs):
        loss, grad = loss_and_grad(a_hat, x, y, windows.mask, params)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at epoch {epoch}")
        history.append(loss)
        for name, g in grad.items():
            w = getattr(params, name)
            if config.optimizer == "gd":
                w -= config.lr * g
            else:
                mm, vv = getattr(m1, name), getattr(m2, name)
                mm *= b1
                mm += (1 - b1) * g
                vv *= b2
                vv += (1 - b2) * g * g
                mhat = mm / (1 - b1 ** (epoch + 1))
                vhat = vv / (1 - b2 ** (epoch + 1))
                w -= config.lr * mhat / (np.sqrt(vhat) + eps)
    model = DelayModel(params, a_hat, mean, std, config.h, {"train": asdict(config)})
    return model, history


def evaluate_rmse(model: DelayModel, windows: TrainingWindows) -> float:
    """RMSE in seconds over observed (segment, window) targets."""
    if len(windows) == 0 or not windows.mask.any():
        raise ValueError("empty test set")
    pred = model.predict(windows.inputs)
    err = (pred - windows.targets)[windows.mask]
    return float(np.sqrt(np.mean(err * err)))


def rmse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float:
    err = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    if err.size == 0:
        raise ValueError("empty test set")
    return float(np.sqrt(np.mean(err * err)))


# --- experiment helpers ---------------------------------------------------------


@dataclass
class Dataset:
    """Feature matrix split into train/test windows with physical connectivity."""

    phys: np.ndarray
    train_values: np.ndarray
    train: TrainingWindows
    test: TrainingWindows

    @classmethod
    def from_matrix(
        cls, values: np.ndarray, mask: np.ndarray, phys: np.ndarray, slots_per_day: int,
        h: int = 4, train_fraction: float = 0.75,
    ) -> "Dataset":
        n_days = values.shape[1] // slots_per_day
        tr, te = split_days(n_days, train_fraction)
        cols = np.concatenate([np.arange(d * slots_per_day, (d + 1) * slots_per_day) for d in tr])
        return cls(
            np.asarray(phys, dtype=float),
            values[:, cols],
            make_windows(values, mask, slots_per_day, h, tr),
            make_windows(values, mask, slots_per_day, h, te),
        )

    @classmethod
    def from_feature_matrix(cls, fm: FeatureMatrix, phys: np.ndarray, h: int = 4,
                            train_fraction: float = 0.75) -> "Dataset":
        return cls.from_matrix(fm.values, fm.mask, phys, fm.slots_per_day, h, train_fraction)


def fit(dataset: Dataset, alpha: float, k: float, config: TrainConfig = TrainConfig()):
    """Train on the dataset's training split with the (alpha, K) adjacency."""
    a_hat = build_adjacency(dataset.phys, dataset.train_values, alpha, k)
    mean, std = standardization(dataset.train_values)
    model, history = train(dataset.train, a_hat, config, mean, std)
    model.meta.update({"alpha": alpha, "K": k})
    return model, history


@dataclass
class SearchResult:
    table: list[dict]
    best_alpha: float
    best_k: float

    @property
    def best_rmse(self) -> float:
        return min(r["rmse"] for r in self.table)


def pick_best(table: Sequence[dict]) -> tuple[float, float]:
    """Lowest RMSE; ties go to the larger alpha, then the larger K."""
    best = min(table, key=lambda r: (r["rmse"], -r["alpha"], -r["K"]))
    return best["alpha"], best["K"]


def hyperparameter_search(
    alphas: Sequence[float], ks: Sequence[float], dataset: Dataset,
    config: TrainConfig = TrainConfig(), include_baseline: bool = True,
) -> SearchResult:
    """Exhaustive (alpha, K) grid; the alpha=1 baseline is always reported."""
    if not len(alphas) or not len(ks):
        raise ValueError("empty hyperparameter grid")
    alphas = sorted(set(float(a) for a in alphas) | ({1.0} if include_baseline else set()), reverse=True)
    table = []
    memo: dict[bytes, float] = {}
    for a in alphas:
        for k in ks:
            a_hat = build_adjacency(dataset.phys, dataset.train_values, a, float(k))
            key = a_hat.tobytes()
            if key not in memo:
                mean, std = standardization(dataset.train_values)
                model, _ = train(dataset.train, a_hat, config, mean, std)
                memo[key] = evaluate_rmse(model, dataset.test)
            table.append({"alpha": a, "K": float(k), "rmse": memo[key]})
    best_a, best_k = pick_best(table)
    return SearchResult(table, best_a, best_k)
