"""Linear softmax classifier and sign-PGD attacks over the transform families."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from nappure import transforms as T
from nappure.tensor import make_rng


@dataclass
class SoftmaxClassifier:
    W: np.ndarray  # (classes, d)
    b: np.ndarray  # (classes,)

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        # einsum keeps each row independent of the batch it is in
        return np.einsum("nd,kd->nk", x.reshape(-1, self.W.shape[1]), self.W) + self.b

    def predict(self, x) -> np.ndarray:
        # argmax returns the first maximum, i.e. ties go to the lowest class
        return np.argmax(self.logits(x), axis=1)

    def to_dict(self) -> dict:
        return {"W": self.W.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SoftmaxClassifier":
        return cls(np.asarray(d["W"], dtype=np.float64), np.asarray(d["b"], dtype=np.float64))


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def train_classifier(images, labels, epochs: int = 300, lr: float = 0.5, seed: int = 0,
                     init_scale: float = 0.01, n_classes: int | None = None, bias_scale: float = 0.0):
    """Full-batch gradient descent on mean cross-entropy.

    Weights start at ``init_scale * N(0, 1)``, biases at ``bias_scale * N(0, 1)``.
    Returns ``(classifier, train_accuracy)``.
    """
    x = np.asarray(images, dtype=np.float64)
    x = x.reshape(len(x), -1)
    y = np.asarray(labels, dtype=np.int64)
    k = int(n_classes or (y.max() + 1))
    if len(np.unique(y)) < 2:
        raise ValueError("need at least two classes to train a classifier")
    rng = make_rng(seed)
    W = init_scale * rng.standard_normal((k, x.shape[1]))
    b = bias_scale * rng.standard_normal(k)
    onehot = np.eye(k)[y]
    for _ in range(epochs):
        p = _softmax(x @ W.T + b)
        d = (p - onehot) / len(x)
        W = W - lr * (d.T @ x)
        b = b - lr * d.sum(axis=0)
    clf = SoftmaxClassifier(W, b)
    return clf, evaluate(clf, x, y)


def cross_entropy_grad(clf: SoftmaxClassifier, x, label):
    """Cross-entropy of one image (or a batch) and its gradient w.r.t. the input."""
    x = np.asarray(x, dtype=np.float64)
    lab = np.atleast_1d(np.asarray(label, dtype=np.int64))
    single = np.ndim(label) == 0
    z = clf.logits(x)
    if np.any(lab >= clf.n_classes) or np.any(lab < 0):
        raise ValueError("label out of range")
    logp = _log_softmax(z)
    rows = np.arange(len(z))
    loss = -logp[rows, lab]
    d = np.exp(logp)
    d[rows, lab] -= 1.0
    grad = np.einsum("nk,kd->nd", d, clf.W).reshape(x.shape)
    if single:
        return float(loss[0]), grad
    return loss, grad


def evaluate(clf: SoftmaxClassifier, images, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty set")
    images = np.asarray(images, dtype=np.float64).reshape(len(labels), -1)
    return float(np.mean(clf.predict(images) == labels))


@dataclass(frozen=True)
class AttackConfig:
    """Attack family, constraint set and PGD settings.

    ``step_size=None`` uses a tenth of the l-inf radius (0.1 for patch
    patterns); composite attacks always use each child's default.
    """

    spec: T.TransformSpec
    box: T.Box
    steps: int = 40
    step_size: float | None = None
    momentum: float = 0.75
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not T._box_matches(self.spec, self.box):
            raise T.TransformError(f"box {self.box.kind!r} does not fit a {self.spec.kind!r} transform")

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "box": self.box.to_dict(),
            "steps": self.steps,
            "step_size": self.step_size,
            "momentum": self.momentum,
            "random_start": self.random_start,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        spec = T.TransformSpec.from_dict(d.pop("spec"))
        box = T.Box.from_dict(d.pop("box"))
        return cls(spec=spec, box=box, **d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _step_sizes(spec, box, shape, step_size):
    if spec.kind == "composite":
        parts = [np.zeros(len(spec.children))]
        parts += [_step_sizes(ch, bx, shape, None) for ch, bx in zip(spec.children, box.children)]
        return np.concatenate(parts)
    size = T.param_size(spec, shape)
    if step_size is not None:
        out = np.full(size, float(step_size))
    elif spec.kind == "patch":
        out = np.full(size, 0.1)
    else:
        out = np.full(size, box.radius / 10.0)
    if spec.kind == "patch":
        out[-3:] = 0.0
    return out


def smooth_params(spec, e, shape):
    """Apply each flow family's Gaussian smoothing to its slice of ``e``."""
    if spec.kind == "flow" and spec.smooth_kernel:
        return T.gaussian_smooth_flow(e, spec.smooth_kernel, spec.smooth_std, shape)
    if spec.kind == "composite":
        out = e.copy()
        for ch, sl in zip(spec.children, T.child_slices(spec, shape)):
            out[:, sl] = smooth_params(ch, e[:, sl], shape)
        return out
    return e


def smooth_params_vjp(spec, e, shape, g):
    if spec.kind == "flow" and spec.smooth_kernel:
        return T.gaussian_smooth_flow_vjp(e, spec.smooth_kernel, spec.smooth_std, shape, g)
    if spec.kind == "composite":
        out = g.copy()
        for ch, sl in zip(spec.children, T.child_slices(spec, shape)):
            out[:, sl] = smooth_params_vjp(ch, e[:, sl], shape, g[:, sl])
        return out
    return g


def pgd_attack(x, label, clf: SoftmaxClassifier, cfg: AttackConfig, rng: np.random.Generator | None = None,
               history: list | None = None):
    """Sign-gradient PGD with momentum on the cross-entropy of ``clf``.

    Works on one image or a batch.  Returns ``(eps_adv, x_adv)`` where
    ``x_adv`` is the transformed image clamped to [0, 1].  When ``history``
    is a list, the mean batch loss before each step (and after the last) is
    appended to it.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    x4 = x[None] if single else x
    lab = np.atleast_1d(np.asarray(label, dtype=np.int64))
    shape = x4.shape[1:]
    spec, box = cfg.spec, cfg.box
    T._check(spec, shape, None)

    e = T.reference_params(spec, box, x4)
    if cfg.random_start and cfg.steps > 0:
        rng = rng if rng is not None else make_rng(cfg.seed)
        lo = T.project_constraints(spec, np.full_like(e, -np.inf), box, shape)
        hi = T.project_constraints(spec, np.full_like(e, np.inf), box, shape)
        e = T.project_constraints(spec, rng.uniform(lo, hi), box, shape)
    steps = _step_sizes(spec, box, shape, cfg.step_size)
    vel = np.zeros_like(e)

    def forward(e):
        es = smooth_params(spec, e, shape)
        y = T._apply(spec, x4, es, True)
        return es, y

    for _ in range(cfg.steps):
        es, y = forward(e)
        yc = np.clip(y, 0.0, 1.0)
        loss, gy = cross_entropy_grad(clf, yc, lab)
        if history is not None:
            history.append(float(np.mean(loss)))
        gy = gy * ((y > 0.0) & (y < 1.0))
        _, ge = T._vjp(spec, x4, es, gy, True)
        ge = smooth_params_vjp(spec, e, shape, ge)
        vel = cfg.momentum * vel + ge
        e = T.project_constraints(spec, e + steps * np.sign(vel), box, shape)

    _, y = forward(e)
    x_adv = np.clip(y, 0.0, 1.0)
    if history is not None:
        loss, _ = cross_entropy_grad(clf, x_adv, lab)
        history.append(float(np.mean(loss)))
    if single:
        return e[0], x_adv[0]
    return e, x_adv
