"""CTC loss, class-weighted CTC, the collapse function and greedy decoding.

The blank class is always the last index of the extended vocabulary.
All dynamic programming runs in float64 log space.
"""

from __future__ import annotations

import itertools
import string
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleAlignmentError, InvalidArgumentError
from .tensor import Tensor, _accumulate, _result

ALNUM = string.ascii_lowercase + string.ascii_uppercase + string.digits
PRINTED = ALNUM + " .,-$@()/#&'"


@dataclass(frozen=True)
class Vocabulary:
    """Ordered character set plus a blank class placed after the last character."""

    chars: str

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars):
            raise InvalidArgumentError("vocabulary characters must be unique")
        if not self.chars:
            raise InvalidArgumentError("vocabulary is empty")

    @classmethod
    def alnum(cls) -> "Vocabulary":
        """The 62-character case-sensitive alphanumeric set."""
        return cls(ALNUM)

    @classmethod
    def printed(cls) -> "Vocabulary":
        """Alphanumerics plus the punctuation used by the shipped text templates."""
        return cls(PRINTED)

    @classmethod
    def named(cls, spec: str) -> "Vocabulary":
        if spec == "alnum":
            return cls.alnum()
        if spec == "printed":
            return cls.printed()
        return cls(spec)

    @property
    def blank_index(self) -> int:
        return len(self.chars)

    @property
    def num_classes(self) -> int:
        return len(self.chars) + 1

    def __len__(self) -> int:
        return len(self.chars)

    def __contains__(self, ch: str) -> bool:
        return ch in self._index

    @property
    def _index(self) -> dict:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {c: i for i, c in enumerate(self.chars)}
            object.__setattr__(self, "_idx", idx)
        return idx

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[c] for c in text]
        except KeyError as exc:
            raise InvalidArgumentError(f"character {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, indices) -> str:
        return "".join(self.chars[i] for i in indices)

    def missing(self, text: str) -> set[str]:
        return {c for c in text if c not in self._index}


@dataclass
class LogProbLattice:
    """Per-timestep log-probabilities ``[T, |L|+1]``; rows past ``valid_length`` are padding."""

    values: Tensor
    valid_length: int = field(default=-1)

    def __post_init__(self):
        if self.valid_length < 0:
            self.valid_length = self.values.shape[0]
        if self.valid_length > self.values.shape[0]:
            raise InvalidArgumentError("valid_length exceeds the lattice width")

    @property
    def log_probs(self) -> np.ndarray:
        return self.values.data[: self.valid_length]


def collapse(path, blank: int) -> list[int]:
    """Merge consecutive repeats, then drop blanks."""
    return [k for k, _ in itertools.groupby(path) if k != blank]


def min_frames(label) -> int:
    """Shortest lattice that can emit ``label``: one frame per symbol plus a blank between repeats."""
    label = list(label)
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def is_feasible(label, length: int) -> bool:
    return length >= min_frames(label)


def _check(logp: np.ndarray, label, blank: int) -> np.ndarray:
    if logp.shape[0] == 0:
        raise InvalidArgumentError("empty lattice")
    label = np.asarray(label, dtype=np.int64)
    if label.size and (label.min() < 0 or label.max() >= blank):
        raise InvalidArgumentError("label indices must lie in [0, blank)")
    if not is_feasible(label, logp.shape[0]):
        raise InfeasibleAlignmentError(
            f"label of length {label.size} needs {min_frames(label)} frames, lattice has {logp.shape[0]}"
        )
    return label


def _shift(v: np.ndarray, k: int) -> np.ndarray:
    """``out[s] = v[s - k]``, with -inf where the source is out of range."""
    out = np.full_like(v, -np.inf)
    if k > 0 and k < v.size:
        out[k:] = v[:-k]
    elif k < 0 and -k < v.size:
        out[:k] = v[-k:]
    return out


def forward_backward(logp: np.ndarray, label, blank: int) -> tuple[float, np.ndarray]:
    """Return ``(log p(label | lattice), occupancy)``.

    ``occupancy[t, k]`` is the posterior probability, over alignments that
    collapse to ``label``, of emitting class ``k`` at time ``t``; each row sums
    to one. It is also d log p / d logp[t, k].
    """
    logp = np.asarray(logp, dtype=np.float64)
    label = _check(logp, label, blank)
    T, V = logp.shape
    ext = np.full(2 * label.size + 1, blank, dtype=np.int64)
    ext[1::2] = label
    S = ext.size
    emit = logp[:, ext]
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    ninf = -np.inf

    alpha = np.full((T, S), ninf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        one = _shift(prev, 1)
        two = np.where(skip, _shift(prev, 2), ninf)
        alpha[t] = np.logaddexp(prev, np.logaddexp(one, two)) + emit[t]

    beta = np.full((T, S), ninf)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_from = np.zeros(S, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        one = _shift(nxt, -1)
        two = np.where(skip_from, _shift(nxt, -2), ninf)
        beta[t] = np.logaddexp(nxt, np.logaddexp(one, two)) + emit[t]

    loglik = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    post = np.exp(alpha + beta - emit - loglik)
    occ = np.zeros((T, V))
    for s in range(S):
        occ[:, ext[s]] += post[:, s]
    return float(loglik), occ


def class_weights(alpha: float, num_classes: int) -> np.ndarray:
    """``1 - alpha`` for the blank (last) class, ``alpha`` for every character."""
    if not 0.0 < alpha < 1.0:
        raise InvalidArgumentError(f"weighted CTC alpha must be in (0, 1), got {alpha}")
    w = np.full(num_classes, alpha)
    w[-1] = 1.0 - alpha
    return w


def _loss_tensor(lattice: LogProbLattice, value: float, grad_rows: np.ndarray, op: str) -> Tensor:
    values = lattice.values
    n = lattice.valid_length

    def rule(g):
        full = np.zeros(values.shape, dtype=np.float64)
        full[:n] = grad_rows * float(g)
        _accumulate(values, full)

    return _result(np.asarray(value, dtype=np.float64), (values,), rule, op)


def ctc_loss(lattice: LogProbLattice, label) -> Tensor:
    """Negative log-probability of ``label`` summed over all collapsing paths."""
    logp = lattice.log_probs
    loglik, occ = forward_backward(logp, label, logp.shape[1] - 1)
    return _loss_tensor(lattice, -loglik, -occ, "ctc_loss")


def weighted_ctc_loss(lattice: LogProbLattice, label, alpha: float) -> Tensor:
    """Class-weighted CTC.

    The CTC loss decomposes as ``sum_{t,k} occ[t,k] * (-logp[t,k]) - H``, where
    ``occ`` is the alignment posterior and ``H`` its entropy. Each per-class
    term is scaled by its class weight and the entropy by the occupancy-mean
    weight, which makes uniform weights (alpha = 0.5) exactly half the plain
    loss. The gradient is the per-class reweighted CTC gradient
    ``-w_k * occ[t,k]`` with the posterior held fixed; for alpha != 0.5 this
    is a surrogate, not the derivative of the reported value.
    """
    logp = np.asarray(lattice.log_probs, dtype=np.float64)
    loglik, occ = forward_backward(logp, label, logp.shape[1] - 1)
    w = class_weights(alpha, logp.shape[1])
    cross = occ * -np.where(occ > 0, logp, 0.0)
    expected = cross.sum()
    entropy = expected + loglik
    mean_w = (occ * w).sum() / occ.shape[0]
    value = (cross * w).sum() - mean_w * entropy
    return _loss_tensor(lattice, value, -occ * w, "weighted_ctc_loss")


def best_path(log_probs: np.ndarray) -> np.ndarray:
    """Per-timestep argmax; ties go to the lowest class index."""
    return np.asarray(log_probs).argmax(axis=-1)


def greedy_decode(lattice: LogProbLattice | np.ndarray, vocab: Vocabulary) -> str:
    logp = lattice.log_probs if isinstance(lattice, LogProbLattice) else np.asarray(lattice)
    if logp.shape[0] == 0:
        return ""
    return vocab.decode(collapse(best_path(logp).tolist(), vocab.blank_index))
