"""Fine-tuning heads, evaluation metrics, and the probing harness.

Two task shapes are supported: binary classification (weighted
cross-entropy on a single logit) and 2-target regression (MSE).  The
backbone initializes from the teacher parameters of a pretraining
checkpoint.  Metrics follow the usual confusion-matrix definitions; AUC
is the Mann-Whitney rank statistic with half-credit for ties, which
equals trapezoidal ROC integration.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .model import ModelConfig, clone_params, encode

TASK_KINDS = ("binary_classification", "bp_regression")


@dataclass
class TaskSpec:
    kind: str
    class_weight: float = 3.54
    n_targets: int = 2  # regression only

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")


@dataclass
class FinetuneConfig:
    lr: float = 1e-4
    weight_decay: float = 0.005
    epochs: int = 500
    batch_size: int = 512
    freeze_backbone: bool = False
    seed: int = 0


@dataclass(frozen=True)
class ClassificationReport:
    acc: float
    tpr: float
    tnr: float
    ppv: float
    f1: float
    auc: float | None
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self):
        return {
            "acc": self.acc, "tpr": self.tpr, "tnr": self.tnr, "ppv": self.ppv,
            "f1": self.f1, "auc": self.auc,
            "confusion": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
        }


@dataclass(frozen=True)
class RegressionReport:
    mae: tuple
    me: tuple
    sd: tuple
    mase_percent: tuple

    def to_dict(self):
        return {
            "mae": list(self.mae), "me": list(self.me), "sd": list(self.sd),
            "mase_percent": [m if m is None else float(m) for m in self.mase_percent],
        }


def _safe_div(num, den):
    return num / den if den > 0 else 0.0


def rank_auc(labels, scores):
    """AUC as the normalized Mann-Whitney U statistic (ties half-credit).

    Returns None when only one class is present.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        return None
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    rank = 1.0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (rank + rank + (j - i)) / 2.0
        rank += j - i + 1
        i = j + 1
    u = ranks[labels == 1].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def classify_metrics(labels, scores, threshold=0.5) -> ClassificationReport:
    """Confusion counts at the threshold plus the rank AUC."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if len(labels) != len(scores):
        raise ContractError(f"lengths differ: {len(labels)} vs {len(scores)}")
    if not np.isin(labels, (0, 1)).all():
        raise ContractError("labels must be binary 0/1")
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    tn = int(np.sum(~pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    tpr = _safe_div(tp, tp + fn)
    tnr = _safe_div(tn, tn + fp)
    ppv = _safe_div(tp, tp + fp)
    f1 = _safe_div(2.0 * ppv * tpr, ppv + tpr)
    return ClassificationReport(
        acc=_safe_div(tp + tn, tp + tn + fp + fn),
        tpr=tpr, tnr=tnr, ppv=ppv, f1=f1,
        auc=rank_auc(labels, scores),
        tp=tp, fp=fp, tn=tn, fn=fn,
    )


def regress_metrics(y_true, y_pred, naive_baseline) -> RegressionReport:
    """MAE / ME / SD per target plus MASE against a naive predictor.

    `naive_baseline` is the per-target constant prediction (typically the
    training-set mean).  MASE is None when the naive MAE is zero.
    """
    y_true = np.atleast_2d(np.asarray(y_true, dtype=np.float64))
    y_pred = np.atleast_2d(np.asarray(y_pred, dtype=np.float64))
    if y_true.shape != y_pred.shape:
        raise ContractError(f"shapes differ: {y_true.shape} vs {y_pred.shape}")
    baseline = np.broadcast_to(
        np.asarray(naive_baseline, dtype=np.float64), y_true.shape[1:]
    )
    err = y_pred - y_true
    mae = np.abs(err).mean(axis=0)
    me = err.mean(axis=0)
    sd = err.std(axis=0, ddof=1) if len(err) > 1 else np.zeros(err.shape[1])
    naive_mae = np.abs(baseline - y_true).mean(axis=0)
    mase = tuple(
        None if nm == 0 else float(100.0 * m / nm) for m, nm in zip(mae, naive_mae)
    )
    return RegressionReport(
        mae=tuple(map(float, mae)), me=tuple(map(float, me)),
        sd=tuple(map(float, sd)), mase_percent=mase,
    )


def subject_split(subject_ids, test_fraction=0.2, seed=0):
    """Split sample indices so no subject appears in both sides."""
    subject_ids = list(subject_ids)
    unique = sorted(set(subject_ids))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed)))
    perm = rng.permutation(len(unique))
    n_test = int(round(test_fraction * len(unique)))
    test_subjects = {unique[i] for i in perm[:n_test]}
    train_idx = [i for i, s in enumerate(subject_ids) if s not in test_subjects]
    test_idx = [i for i, s in enumerate(subject_ids) if s in test_subjects]
    return train_idx, test_idx


@dataclass
class FittedModel:
    config: ModelConfig
    backbone: dict
    head_w: Tensor
    head_b: Tensor
    task: TaskSpec

    def predict(self, segments):
        """Scores: sigmoid probabilities (classification) or raw targets."""
        frozen = {k: Tensor(v.data) for k, v in self.backbone.items()}
        feats, _ = encode(frozen, self.config, segments)
        pooled = feats.data.mean(axis=1)
        out = pooled @ self.head_w.data + self.head_b.data
        if self.task.kind == "binary_classification":
            return 1.0 / (1.0 + np.exp(-out[:, 0]))
        return out


def finetune(checkpoint, labeled_segments, labels, task: TaskSpec,
             config: FinetuneConfig | None = None, steps=None):
    """Adapt a pretrained encoder to a downstream task.

    `checkpoint` is (model_config, teacher_params) — the teacher branch of
    a pretraining run.  Classification uses weighted cross-entropy with
    `task.class_weight` on the positive class; regression uses MSE.
    When `config.freeze_backbone` is set, only the head trains.
    """
    config = config or FinetuneConfig()
    model_config, teacher = checkpoint
    X = np.asarray(labeled_segments, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if len(X) != len(y):
        raise ContractError(f"{len(X)} segments vs {len(y)} labels")
    if task.kind == "bp_regression" and (y.ndim != 2 or y.shape[1] != task.n_targets):
        raise ContractError(f"regression labels must be (n, {task.n_targets})")
    if task.kind == "binary_classification" and not np.isin(y, (0, 1)).all():
        raise ContractError("classification labels must be binary 0/1")

    backbone = clone_params(teacher, requires_grad=not config.freeze_backbone)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=config.seed)))
    out_dim = 1 if task.kind == "binary_classification" else task.n_targets
    head_w = Tensor(rng.normal(0, 0.02, size=(model_config.hidden, out_dim)), requires_grad=True)
    head_b = Tensor(np.zeros(out_dim), requires_grad=True)

    trainable = {"head.w": head_w, "head.b": head_b}
    if not config.freeze_backbone:
        trainable.update(backbone)
    opt_m = {k: np.zeros_like(t.data) for k, t in trainable.items()}
    opt_v = {k: np.zeros_like(t.data) for k, t in trainable.items()}

    n = len(X)
    batch = min(config.batch_size, n)
    steps_per_epoch = max(1, n // batch)
    total = steps if steps is not None else config.epochs * steps_per_epoch
    order = rng.permutation(n)
    cursor = 0
    for step in range(total):
        if cursor + batch > n:
            order = rng.permutation(n)
            cursor = 0
        sel = order[cursor : cursor + batch]
        cursor += batch
        feats, _ = encode(backbone, model_config, X[sel])
        pooled = ad.mean(feats, axis=1)
        out = ad.add(ad.matmul(pooled, head_w), head_b)
        if task.kind == "binary_classification":
            yb = y[sel]
            weights = np.where(yb == 1, task.class_weight, 1.0)
            weights = weights / weights.sum()
            z = ad.reshape(out, (len(sel),))
            # weighted BCE-with-logits: softplus(z) - z*y, per-sample weights
            per = ad.add(ad.softplus(z), ad.mul(z, -yb))
            loss = ad.sum_(ad.mul(per, weights))
        else:
            loss = ad.mse(out, y[sel])
        for t in trainable.values():
            t.zero_grad()
        loss.backward()
        t_adam = step + 1
        for name, p in trainable.items():
            g = p.grad
            if g is None:
                continue
            m, v = opt_m[name], opt_v[name]
            m *= 0.9
            m += 0.1 * g
            v *= 0.999
            v += 0.001 * g * g
            m_hat = m / (1 - 0.9**t_adam)
            v_hat = v / (1 - 0.999**t_adam)
            p.data -= config.lr * (
                m_hat / (np.sqrt(v_hat) + 1e-8) + config.weight_decay * p.data
            )
    return FittedModel(config=model_config, backbone=backbone, head_w=head_w,
                       head_b=head_b, task=task)


def evaluate(model: FittedModel, segments, labels, naive_baseline=None,
             predictions_path=None):
    """Score a fitted model on held-out data; returns the matching report.

    Optionally writes per-sample predictions as JSON lines.
    """
    X = np.asarray(segments, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    scores = model.predict(X)
    if predictions_path is not None:
        with open(predictions_path, "w") as fh:
            for i, s in enumerate(scores):
                row = {"index": i, "prediction": np.asarray(s).tolist(),
                       "label": np.asarray(y[i]).tolist()}
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    if model.task.kind == "binary_classification":
        return classify_metrics(y.astype(int), scores)
    baseline = y.mean(axis=0) if naive_baseline is None else naive_baseline
    return regress_metrics(y, scores, baseline)


def fit_linear_probe(features, labels, n_classes, steps=300, lr=0.1, seed=0):
    """Multinomial logistic probe on frozen features; returns (W, b)."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    onehot = np.eye(n_classes)[y]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed)))
    W = Tensor(rng.normal(0, 0.01, size=(X.shape[1], n_classes)), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    mu, sd = X.mean(axis=0), X.std(axis=0) + 1e-8
    Xn = (X - mu) / sd
    m_w = np.zeros_like(W.data); v_w = np.zeros_like(W.data)
    m_b = np.zeros_like(b.data); v_b = np.zeros_like(b.data)
    for step in range(steps):
        logits = ad.add(ad.matmul(Tensor(Xn), W), b)
        logp = ad.log_softmax(logits, axis=-1)
        loss = ad.cross_entropy(onehot, logp, axis=-1, reduction="mean")
        W.zero_grad(); b.zero_grad()
        loss.backward()
        t = step + 1
        for p, m, v in ((W, m_w, v_w), (b, m_b, v_b)):
            m *= 0.9; m += 0.1 * p.grad
            v *= 0.999; v += 0.001 * p.grad * p.grad
            p.data -= lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    return (W.data, b.data, mu, sd)


def probe_accuracy(probe, features, labels):
    """Accuracy of a fitted probe on held-out features."""
    W, b, mu, sd = probe
    X = (np.asarray(features, dtype=np.float64) - mu) / sd
    pred = (X @ W + b).argmax(axis=1)
    return float((pred == np.asarray(labels, dtype=int)).mean())
