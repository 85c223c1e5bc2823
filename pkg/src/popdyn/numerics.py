"""Self-contained numerical kernels.

Principal component analysis, exact 1-D total variation denoising, and a
minimal fully-connected autoencoder with ELU activations trained under a
smooth-L1 reconstruction loss.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import StageFailure, ValidationError


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PcaModel:
    """Principal directions of a sample, sorted by explained variance.

    ``components`` rows are orthonormal. For all-constant input there is a
    single all-zero component with ratio 0 (there is no variance to split).
    """

    mean: np.ndarray
    components: np.ndarray
    explained_variance_ratio: np.ndarray

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) @ self.components.T

    def reconstruct(self, scores) -> np.ndarray:
        return np.asarray(scores, dtype=float) @ self.components + self.mean

    def to_json(self) -> str:
        return json.dumps(
            {
                "mean": self.mean.tolist(),
                "components": self.components.tolist(),
                "explained_variance_ratio": self.explained_variance_ratio.tolist(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "PcaModel":
        obj = json.loads(text)
        return cls(
            mean=np.array(obj["mean"], dtype=float),
            components=np.array(obj["components"], dtype=float),
            explained_variance_ratio=np.array(obj["explained_variance_ratio"], dtype=float),
        )


def pca_fit(X) -> PcaModel:
    """Fit principal components through an SVD of the centered data."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValidationError("PCA needs a 2-D array with at least 2 samples")
    mean = X.mean(axis=0)
    centered = X - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    variances = s**2 / (X.shape[0] - 1)
    total = variances.sum()
    if total == 0:
        return PcaModel(
            mean=mean,
            components=np.zeros((1, X.shape[1])),
            explained_variance_ratio=np.zeros(1),
        )
    # deterministic sign: the largest-magnitude entry of each direction is positive
    for row in vt:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return PcaModel(mean=mean, components=vt, explained_variance_ratio=variances / total)


# ---------------------------------------------------------------------------
# 1-D total variation denoising
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TvdProblem:
    """Observed derivative samples plus the variation penalty weight."""

    observed: np.ndarray
    lam: float

    def __post_init__(self):
        obs = np.asarray(self.observed, dtype=float)
        object.__setattr__(self, "observed", obs)
        if obs.ndim != 1 or len(obs) == 0:
            raise ValidationError("observed signal must be a non-empty 1-D array")
        if not np.all(np.isfinite(obs)):
            raise ValidationError("observed signal must be finite")
        if self.lam < 0:
            raise ValidationError("lambda must be non-negative")

    def objective(self, candidate) -> float:
        r = np.asarray(candidate, dtype=float)
        return float(0.5 * np.sum((self.observed - r) ** 2) + self.lam * np.sum(np.abs(np.diff(r))))


def tv_denoise(problem: TvdProblem) -> np.ndarray:
    """Exact minimizer of 0.5*||O - R||^2 + lam*||grad R||_1, piecewise constant.

    Direct non-iterative sweep (Condat's method): grow the current segment
    while its value can stay inside the +-lam tube around the running mean;
    emit the segment and restart whenever a jump becomes unavoidable.
    """
    y = problem.observed
    lam = problem.lam
    n = len(y)
    if lam == 0 or n == 1:
        return y.copy()
    x = np.empty(n)
    k = k0 = kminus = kplus = 0
    vmin = y[0] - lam
    vmax = y[0] + lam
    umin = lam
    umax = -lam
    while True:
        if k == n - 1:  # reached the last sample: resolve the tail
            if umin < 0:  # the lower bound is violated: emit at vmin and restart
                x[k0 : kminus + 1] = vmin
                k = k0 = kminus = kminus + 1
                vmin = y[k]
                umin = lam
                umax = y[k] + lam - vmax
                continue
            if umax > 0:  # symmetric: emit at vmax
                x[k0 : kplus + 1] = vmax
                k = k0 = kplus = kplus + 1
                vmax = y[k]
                umax = -lam
                umin = y[k] - lam - vmin
                continue
            x[k0 : n] = vmin + umin / (k - k0 + 1)
            return x
        if y[k + 1] + umin < vmin - lam:  # negative jump is certain
            x[k0 : kminus + 1] = vmin
            k = k0 = kminus = kplus = kminus + 1
            vmin = y[k]
            vmax = y[k] + 2 * lam
            umin = lam
            umax = -lam
        elif y[k + 1] + umax > vmax + lam:  # positive jump is certain
            x[k0 : kplus + 1] = vmax
            k = k0 = kminus = kplus = kplus + 1
            vmin = y[k] - 2 * lam
            vmax = y[k]
            umin = lam
            umax = -lam
        else:  # keep growing the segment
            k += 1
            umin += y[k] - vmin
            umax += y[k] - vmax
            if umin >= lam:
                vmin += (umin - lam) / (k - k0 + 1)
                umin = lam
                kminus = k
            if umax <= -lam:
                vmax += (umax + lam) / (k - k0 + 1)
                umax = -lam
                kplus = k


def tv_optimality_gap(problem: TvdProblem, candidate) -> float:
    """How far a candidate sits from the exact subgradient conditions.

    The dual variables s_k = cumsum(R - O)/lam must stay in [-1, 1], hit the
    sign of each jump of R exactly, and return to 0 at the far end. Returns
    the largest violation (0 for the exact minimizer, up to float error).
    """
    r = np.asarray(candidate, dtype=float)
    y = problem.observed
    lam = problem.lam
    if lam == 0:
        return float(np.max(np.abs(r - y)))
    s = np.cumsum(r - y) / lam
    gap = max(0.0, float(np.max(np.abs(s))) - 1.0)
    gap = max(gap, abs(s[-1]))
    jumps = np.diff(r)
    for idx in np.nonzero(jumps)[0]:
        target = 1.0 if jumps[idx] > 0 else -1.0
        gap = max(gap, abs(s[idx] - target))
    return gap


# ---------------------------------------------------------------------------
# Autoencoder
# ---------------------------------------------------------------------------

def _elu(x):
    return np.where(x > 0, x, np.expm1(x))


def _elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(x))


def smooth_l1_loss(pred, target) -> float:
    """Mean Huber loss with the transition at 1.0; zero iff exact match."""
    d = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    a = np.abs(d)
    per = np.where(a < 1.0, 0.5 * d * d, a - 0.5)
    return float(np.mean(per))


@dataclass
class AutoencoderModel:
    """Dense autoencoder: input -> hidden -> latent -> hidden -> output.

    ELU on the two hidden layers, identity on latent and output. The encoder
    and decoder mirror each other dimensionally.
    """

    n_input: int
    n_hidden: int
    n_latent: int
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    w4: np.ndarray
    b4: np.ndarray

    def parameters(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3, "w4": self.w4, "b4": self.b4}

    def save_binary(self, path):
        """Dimension header then parameter arrays, little-endian float64."""
        with open(path, "wb") as fh:
            fh.write(struct.pack("<QQQ", self.n_input, self.n_hidden, self.n_latent))
            for name in ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4"):
                fh.write(getattr(self, name).astype("<f8").tobytes(order="C"))

    @classmethod
    def load_binary(cls, path) -> "AutoencoderModel":
        with open(path, "rb") as fh:
            n, h, l = struct.unpack("<QQQ", fh.read(24))
            shapes = [(n, h), (h,), (h, l), (l,), (l, h), (h,), (h, n), (n,)]
            arrays = []
            for shape in shapes:
                count = int(np.prod(shape))
                arrays.append(np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy())
        return cls(n, h, l, *arrays)


def ae_init(n_input: int, seed: int, n_hidden: int = 512, n_latent: int = 4) -> AutoencoderModel:
    """Seeded initialization, weight scale 1/sqrt(fan_in), zero biases."""
    if n_input < n_latent:
        raise ValidationError(f"n_input={n_input} must be at least the latent width {n_latent}")
    rng = np.random.default_rng(seed)

    def w(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))

    return AutoencoderModel(
        n_input=n_input, n_hidden=n_hidden, n_latent=n_latent,
        w1=w(n_input, n_hidden), b1=np.zeros(n_hidden),
        w2=w(n_hidden, n_latent), b2=np.zeros(n_latent),
        w3=w(n_latent, n_hidden), b3=np.zeros(n_hidden),
        w4=w(n_hidden, n_input), b4=np.zeros(n_input),
    )


def _forward_trace(model: AutoencoderModel, X: np.ndarray):
    z1 = X @ model.w1 + model.b1
    h1 = _elu(z1)
    latent = h1 @ model.w2 + model.b2
    z3 = latent @ model.w3 + model.b3
    h2 = _elu(z3)
    out = h2 @ model.w4 + model.b4
    return z1, h1, latent, z3, h2, out


def ae_forward(model: AutoencoderModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Reconstruction and latent code for one input vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n_input,):
        raise ValidationError(f"expected input of length {model.n_input}, got shape {x.shape}")
    _, _, latent, _, _, out = _forward_trace(model, x[None, :])
    return out[0], latent[0]


def ae_encode(model: AutoencoderModel, x) -> np.ndarray:
    """Latent code only."""
    _, latent = ae_forward(model, x)
    return latent


def ae_gradients(model: AutoencoderModel, X) -> tuple[float, dict[str, np.ndarray]]:
    """Smooth-L1 reconstruction loss and its gradients by backpropagation."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.n_input:
        raise ValidationError(f"expected rows of length {model.n_input}")
    z1, h1, latent, z3, h2, out = _forward_trace(model, X)
    d = out - X
    loss = smooth_l1_loss(out, X)
    g_out = np.clip(d, -1.0, 1.0) / d.size

    g_w4 = h2.T @ g_out
    g_b4 = g_out.sum(axis=0)
    g_h2 = g_out @ model.w4.T
    g_z3 = g_h2 * _elu_grad(z3)
    g_w3 = latent.T @ g_z3
    g_b3 = g_z3.sum(axis=0)
    g_latent = g_z3 @ model.w3.T
    g_w2 = h1.T @ g_latent
    g_b2 = g_latent.sum(axis=0)
    g_h1 = g_latent @ model.w2.T
    g_z1 = g_h1 * _elu_grad(z1)
    g_w1 = X.T @ g_z1
    g_b1 = g_z1.sum(axis=0)
    grads = {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2,
             "w3": g_w3, "b3": g_b3, "w4": g_w4, "b4": g_b4}
    return loss, grads


def ae_train(model: AutoencoderModel, X, epochs: int, step_size: float) -> tuple[AutoencoderModel, list[float]]:
    """Full-batch gradient descent; returns the model and the loss trace.

    The trace holds the loss at the start of every epoch plus the final
    post-training loss (length epochs + 1). Non-finite loss aborts.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    trace = []
    for epoch in range(epochs):
        loss, grads = ae_gradients(model, X)
        if not math.isfinite(loss):
            raise StageFailure(f"autoencoder training diverged at epoch {epoch}: loss={loss}")
        trace.append(loss)
        for name, grad in grads.items():
            getattr(model, name)[...] -= step_size * grad
    final_loss, _ = ae_gradients(model, X)
    if not math.isfinite(final_loss):
        raise StageFailure(f"autoencoder training diverged at epoch {epochs}: loss={final_loss}")
    trace.append(final_loss)
    return model, trace
