"""
Consensus training of a one-hidden-layer ReLU network on banknote data.

Each of ``n_agents`` agents holds a shard of the training set and a local
copy ``x_i = [vec(Z); w]`` of the weights, where ``Z`` is ``4 x 2`` stored
column-major and ``w`` has two entries.  Consensus ``x_i = x_bar`` is
enforced through ``A_i = I`` (in the rows of agent ``i``) and a stacked
``B = -I``.
"""

import csv
import logging
import warnings
from dataclasses import dataclass
from importlib import resources

import numpy as np

from ..problem import BlockProblem, ConfigurationError, DimensionError, LocalObjective, Smoothness

__all__ = [
    "N_FEATURES",
    "N_HIDDEN",
    "N_WEIGHTS",
    "DataFormatError",
    "BanknoteSplit",
    "unpack_weights",
    "predict",
    "nn_local_loss",
    "decompose_nn",
    "load_banknote",
    "validation_accuracy",
    "synthetic_banknote",
    "default_banknote_path",
]

logger = logging.getLogger(__name__)

N_FEATURES = 4
N_HIDDEN = 2
N_WEIGHTS = N_HIDDEN * (N_FEATURES + 1)
EXPECTED_ROWS = 1372
N_TRAIN = 1000


class DataFormatError(ValueError):
    """A data file could not be parsed; the message carries the line number."""


@dataclass
class BanknoteSplit:
    partitions: list
    validation: tuple
    n_agents: int

    @property
    def train(self):
        U = np.vstack([p[0] for p in self.partitions])
        y = np.concatenate([p[1] for p in self.partitions])
        return U, y


def unpack_weights(x):
    x = np.asarray(x, dtype=float)
    if x.shape != (N_WEIGHTS,):
        raise DimensionError(f"weight vector must have length {N_WEIGHTS}, got shape {x.shape}")
    Z = x[: N_FEATURES * N_HIDDEN].reshape((N_FEATURES, N_HIDDEN), order="F")
    return Z, x[N_FEATURES * N_HIDDEN:]


def predict(x, U):
    """Network output ``w^T max(0, Z^T u)`` for each row ``u`` of ``U``."""
    Z, w = unpack_weights(x)
    return np.maximum(U @ Z, 0.0) @ w


def nn_local_loss(x, U, y, n_agents=10, reg=0.01):
    """
    ``(1/2N) sum_j (y_j - w^T relu(Z^T u_j))^2 + (reg/2N)(||Z||_F^2 + ||w||^2)``
    with ``N = n_agents``.
    """
    x = np.asarray(x, dtype=float)
    Z, w = unpack_weights(x)
    U = np.asarray(U, dtype=float).reshape(-1, N_FEATURES)
    y = np.asarray(y, dtype=float).reshape(-1)
    resid = y - np.maximum(U @ Z, 0.0) @ w
    return float((resid @ resid + reg * (x @ x)) / (2.0 * n_agents))


def decompose_nn(partitions, reg=0.01):
    """
    Consensus problem over the given ``(U_i, y_i)`` shards.

    All blocks are flagged nonsmooth because of the ReLU.
    """
    n_agents = len(partitions)
    if n_agents < 1:
        raise ConfigurationError("need at least one data partition")
    m = n_agents * N_WEIGHTS
    blocks, A = [], []
    for i, (U, y) in enumerate(partitions):
        U = np.array(U, dtype=float)
        y = np.array(y, dtype=float)

        def f(x, U=U, y=y):
            return nn_local_loss(x, U, y, n_agents, reg)

        blocks.append(LocalObjective(f, N_WEIGHTS, name=f"agent[{i}]"))
        Ai = np.zeros((m, N_WEIGHTS))
        Ai[i * N_WEIGHTS:(i + 1) * N_WEIGHTS] = np.eye(N_WEIGHTS)
        A.append(Ai)
    B = -np.tile(np.eye(N_WEIGHTS), (n_agents, 1))
    return BlockProblem(
        blocks, A, B, np.zeros(m), smoothness=[Smoothness.NONSMOOTH] * n_agents, name="banknote-nn"
    )


def default_banknote_path():
    return resources.files(__package__).joinpath("data", "banknote.csv")


def _read_rows(path):
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != N_FEATURES + 1:
                raise DataFormatError(f"{path}:{lineno}: expected {N_FEATURES + 1} fields, got {len(rec)}")
            try:
                vals = [float(c) for c in rec]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if vals[-1] not in (0.0, 1.0):
                raise DataFormatError(f"{path}:{lineno}: label must be 0 or 1, got {rec[-1]!r}")
            rows.append(vals)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return np.array(rows)


def load_banknote(path=None, seed=0, n_agents=10):
    """
    Shuffle, shard and split the banknote data.

    The first ``1000`` shuffled rows are dealt into ``n_agents`` equal
    partitions and the rest form the validation set.  Files with a row count
    other than 1372 are split in the same proportion after a warning.
    Labels 0/1 are mapped to -1/+1.
    """
    data = _read_rows(default_banknote_path() if path is None else path)
    n = data.shape[0]
    n_train = N_TRAIN
    if n != EXPECTED_ROWS:
        warnings.warn(f"expected {EXPECTED_ROWS} rows, found {n}; splitting proportionally", stacklevel=2)
        n_train = int(round(n * N_TRAIN / EXPECTED_ROWS))
    n_train -= n_train % n_agents
    if n_train < n_agents:
        raise DataFormatError(f"too few rows ({n}) for {n_agents} agents")
    perm = np.random.default_rng(seed).permutation(n)
    U = data[perm, :N_FEATURES]
    y = 2.0 * data[perm, N_FEATURES] - 1.0
    shards = np.split(np.arange(n_train), n_agents)
    partitions = [(U[idx], y[idx]) for idx in shards]
    return BanknoteSplit(partitions, (U[n_train:], y[n_train:]), n_agents)


def validation_accuracy(x, validation):
    """Fraction of samples with ``sign(output) == label``; a zero output counts as +1."""
    U, y = validation
    if len(y) == 0:
        return float("nan")
    pred = np.where(predict(x, np.asarray(U, dtype=float)) >= 0.0, 1.0, -1.0)
    return float(np.mean(pred == np.asarray(y)))


def synthetic_banknote(n_genuine=762, n_forged=610, seed=2024):
    """
    Rows ``(variance, skewness, curtosis, entropy, class)`` drawn from two
    Gaussians whose means and spreads roughly follow the banknote features.
    Class 0 is genuine, class 1 forged, matching the original coding.  The
    spreads are scaled so that a linear separator through the origin reaches
    about 98% accuracy, close to what the real features allow.
    """
    rng = np.random.default_rng(seed)
    scale = 0.6
    genuine = rng.normal([2.28, 4.26, 0.80, -1.15], scale * np.array([2.0, 5.1, 3.2, 2.1]), size=(n_genuine, 4))
    forged = rng.normal([-1.87, -0.99, 2.15, -1.25], scale * np.array([1.9, 5.4, 5.3, 2.1]), size=(n_forged, 4))
    X = np.vstack([genuine, forged])
    y = np.concatenate([np.zeros(n_genuine), np.ones(n_forged)])
    return np.column_stack([X, y])
