"""Semi-supervised GAN student: one generator, two peer discriminators.

Discriminators emit K+1 logits; the last one is the "generated" class.
Each loss function here returns the loss value(s) together with gradients
so drivers can step optimizers without any autodiff machinery.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import netcore
from .netcore import LOG_CLAMP, DenseNet, Optimizer, backward, forward, init_dense, softmax


@dataclass
class StudentArch:
    d_hidden: tuple[int, ...] = (64, 64)
    g_hidden: tuple[int, ...] = (64, 64)
    latent_dim: int = 16
    d_activation: str = "leaky_relu"
    g_activation: str = "tanh"


@dataclass
class StudentModel:
    G: DenseNet
    D1: DenseNet
    D2: DenseNet
    n_classes: int
    latent_dim: int
    seed: int | None = None

    def discriminators(self):
        return (self.D1, self.D2)

    def copy(self) -> "StudentModel":
        return StudentModel(self.G.copy(), self.D1.copy(), self.D2.copy(), self.n_classes, self.latent_dim, self.seed)

    def to_json(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "latent_dim": self.latent_dim,
            "seed": self.seed,
            "G": netcore.net_to_dict(self.G),
            "D1": netcore.net_to_dict(self.D1),
            "D2": netcore.net_to_dict(self.D2),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "StudentModel":
        return cls(
            netcore.net_from_dict(doc["G"]),
            netcore.net_from_dict(doc["D1"]),
            netcore.net_from_dict(doc["D2"]),
            int(doc["n_classes"]),
            int(doc["latent_dim"]),
            doc.get("seed"),
        )


def build_student(dim: int, n_classes: int, arch: StudentArch, rng_g, rng_d1, rng_d2, seed=None) -> StudentModel:
    """Fresh student. D1 and D2 share a structure but draw from separate streams."""
    d_sizes = [dim, *arch.d_hidden, n_classes + 1]
    d_acts = [arch.d_activation] * len(arch.d_hidden) + ["identity"]
    g_sizes = [arch.latent_dim, *arch.g_hidden, dim]
    g_acts = [arch.g_activation] * (len(arch.g_hidden) + 1)
    return StudentModel(
        G=init_dense(g_sizes, g_acts, rng_g),
        D1=init_dense(d_sizes, d_acts, rng_d1),
        D2=init_dense(d_sizes, d_acts, rng_d2),
        n_classes=n_classes,
        latent_dim=arch.latent_dim,
        seed=seed,
    )


# -- probability helpers -----------------------------------------------------

def split_probs(logits: np.ndarray):
    """(renormalised real-class probs [B, K], fake prob [B]) from K+1 logits."""
    p = softmax(logits)
    fake = p[:, -1]
    real = p[:, :-1] / np.maximum(1.0 - fake, LOG_CLAMP)[:, None]
    return real, fake


def real_class_probs(D: DenseNet, batch):
    return split_probs(forward(D, batch).logits)


def predict(D: DenseNet, batch) -> np.ndarray:
    """Class prediction over the K real classes (fake logit ignored)."""
    return np.argmax(forward(D, batch).logits[:, :-1], axis=1)


def accuracy(D: DenseNet, x, y) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(D, x) == np.asarray(y)))


# -- logit-level losses ------------------------------------------------------
# Each returns per-row loss values and d(sum of those values)/d(logits).

def supervised_terms(logits: np.ndarray, labels):
    """-log p(y | x, y < K+1) per row and its logit gradient.

    The real-class conditional equals the softmax over the first K logits,
    so the gradient is (q - onehot) on those and 0 on the fake logit.
    """
    y = np.asarray(labels, dtype=np.int64)
    rows = np.arange(len(y))
    real, _ = split_probs(logits)
    losses = -np.log(np.maximum(real[rows, y], LOG_CLAMP))
    q = softmax(logits[:, :-1])
    grad = np.zeros_like(logits)
    grad[:, :-1] = q
    grad[rows, y] -= 1.0
    return losses, grad


def real_terms(logits: np.ndarray):
    """-log(1 - p_fake) per row, i.e. logsumexp(all) - logsumexp(first K)."""
    p = softmax(logits)
    losses = -np.log(np.maximum(1.0 - p[:, -1], LOG_CLAMP))
    grad = p.copy()
    grad[:, :-1] -= softmax(logits[:, :-1])
    return losses, grad


def fake_terms(logits: np.ndarray):
    """-log p_fake per row."""
    p = softmax(logits)
    losses = -np.log(np.maximum(p[:, -1], LOG_CLAMP))
    grad = p.copy()
    grad[:, -1] -= 1.0
    return losses, grad


# -- network-level losses ----------------------------------------------------

def supervised_loss(D: DenseNet, x, y):
    """Per-example supervised losses and grads of their batch mean."""
    trace = forward(D, x)
    losses, g = supervised_terms(trace.logits, y)
    return losses, backward(D, trace, g / len(losses))


def unsupervised_loss(D: DenseNet, x_real, x_gen):
    """Mean -log(1 - p_fake) over real rows plus mean -log p_fake over generated rows."""
    tr = forward(D, x_real)
    tg = forward(D, x_gen)
    lr_, gr = real_terms(tr.logits)
    lg, gg = fake_terms(tg.logits)
    loss = float(lr_.mean() + lg.mean())
    grads = backward(D, tr, gr / len(lr_)) + backward(D, tg, gg / len(lg))
    return loss, grads


def discriminator_grads(D: DenseNet, x_sup, y_sup, x_real, x_gen):
    """Gradient of mean supervised loss on (x_sup, y_sup) + unsupervised loss.

    One forward over the stacked batch. An empty supervised part contributes
    nothing. Returns (grads, supervised mean, unsupervised loss).
    """
    n_s, n_r, n_g = len(y_sup), len(x_real), len(x_gen)
    parts = [np.asarray(x_real), np.asarray(x_gen)]
    if n_s:
        parts.insert(0, np.asarray(x_sup))
    trace = forward(D, np.vstack(parts))
    logits = trace.logits
    g = np.zeros_like(logits)
    sup = 0.0
    if n_s:
        ls, gs = supervised_terms(logits[:n_s], y_sup)
        g[:n_s] = gs / n_s
        sup = float(ls.mean())
    lr_, gr = real_terms(logits[n_s:n_s + n_r])
    lg, gg = fake_terms(logits[n_s + n_r:])
    g[n_s:n_s + n_r] = gr / n_r
    g[n_s + n_r:] = gg / n_g
    return backward(D, trace, g), sup, float(lr_.mean() + lg.mean())


def generate(G: DenseNet, z):
    return forward(G, z)


def feature_matching_loss(G: DenseNet, discriminators, x_real, z):
    """Averaged feature matching over the given discriminators, gradients for G only.

    Features are the penultimate-layer activations. With one discriminator
    this is the usual ||mean f(x) - mean f(G(z))||^2; with two it is half the
    sum of both terms. Discriminator parameters are treated as constants.
    """
    gtrace = forward(G, z)
    x_gen = gtrace.logits
    weight = 1.0 / len(discriminators)
    loss = 0.0
    dx = np.zeros_like(x_gen)
    for D in discriminators:
        f_real = forward(D, x_real).features().mean(axis=0)
        dtrace = forward(D, x_gen)
        f_gen = dtrace.features()
        diff = f_gen.mean(axis=0) - f_real
        loss += weight * float(diff @ diff)
        gf = np.broadcast_to(2.0 * weight * diff / len(f_gen), f_gen.shape)
        dx += backward(D, dtrace, gf, from_layer=-2).inputs
    grads = backward(G, gtrace, dx)
    return loss, grads


# -- training ----------------------------------------------------------------

@dataclass
class StudentOptimizers:
    G: Optimizer
    D1: Optimizer
    D2: Optimizer

    @classmethod
    def for_model(cls, model: StudentModel, kind="adam", lr=0.01) -> "StudentOptimizers":
        return cls(Optimizer(model.G, kind, lr), Optimizer(model.D1, kind, lr), Optimizer(model.D2, kind, lr))


@dataclass
class StepStats:
    sup: float = 0.0
    unsup: float = 0.0
    fm: float = 0.0
    extra: dict = field(default_factory=dict)


def sample_latent(rng, n: int, latent_dim: int) -> np.ndarray:
    return rng.standard_normal((n, latent_dim))


def train_step_plain(model: StudentModel, x_l, y_l, x_u, opts: StudentOptimizers, rng) -> StepStats:
    """Baseline semi-supervised step: D1 only, D2 frozen, G matches D1 features."""
    z = sample_latent(rng, len(x_u), model.latent_dim)
    x_g = generate(model.G, z).logits
    gd, sup, unsup = discriminator_grads(model.D1, x_l, y_l, x_u, x_g)
    opts.D1.step(model.D1, gd)
    fm, gg = feature_matching_loss(model.G, (model.D1,), x_u, z)
    opts.G.step(model.G, gg)
    return StepStats(sup, unsup, fm)
