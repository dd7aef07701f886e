"""Desk-scale experiment harness: datasets, probes, ablations, checks.

Everything here runs on synthetic corpora in minutes on one CPU.  The
ablation runners sweep the attention window size and the two spectral
loss weights; the probe measures how well a linear classifier on frozen
pooled encoder features recovers the five quality labels.
"""

import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import sqi as sqi_mod
from .autodiff import Tensor
from .downstream import fit_linear_probe, probe_accuracy, subject_split
from .model import (
    ModelConfig,
    banded_attention_forward,
    banded_pwsa_attention,
    encode,
    full_attention_forward,
    init_params,
    pooled_features,
    pwsa_attention,
    window_mask,
)
from .preprocess import segment_corpus
from .sqi import assess, mine_pairs
from .train import PretrainConfig, composite_loss, TrainState, pretrain
from .waveio import generate_noise_graded_corpus


@dataclass
class DeskDataset:
    segments: list
    assessments: list
    pairs: list

    @property
    def labels(self):
        return np.array([int(a.label) for a in self.assessments])

    @property
    def subject_ids(self):
        return [s.subject_id for s in self.segments]

    @property
    def arrays(self):
        return np.stack([s.channels for s in self.segments])


def build_desk_dataset(n_subjects=8, blocks_per_subject=3, block_s=300.0,
                       seed=0, max_pairs=500):
    """Synthetic corpus -> segments -> assessments -> training pairs."""
    records = generate_noise_graded_corpus(
        n_subjects=n_subjects, blocks_per_subject=blocks_per_subject,
        block_s=block_s, seed=seed,
    )
    segments = segment_corpus(records)
    assessments = [assess(s) for s in segments]
    pairs = mine_pairs(list(zip(segments, assessments)))
    if len(pairs) > max_pairs:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed)))
        keep = sorted(rng.choice(len(pairs), size=max_pairs, replace=False))
        pairs = [pairs[i] for i in keep]
    return DeskDataset(segments=segments, assessments=assessments, pairs=pairs)


SMOKE_MODEL = ModelConfig(layers=2, hidden=64, mlp=128, heads=4, window=8, out_dim=64)
SMOKE_TRAIN = PretrainConfig(batch_size=16, seed=0)
N_QUALITY_CLASSES = 5


def quality_probe_accuracy(params, model_config, dataset: DeskDataset,
                           split_seed=0, probe_seed=0, batch=64):
    """Accuracy of a linear probe on pooled features vs quality labels.

    Returns (accuracy, chance) where chance is the majority-class
    frequency of the held-out subjects' labels.
    """
    X = dataset.arrays
    feats = np.concatenate(
        [pooled_features(params, model_config, X[i : i + batch])
         for i in range(0, len(X), batch)]
    )
    labels = dataset.labels
    train_idx, test_idx = subject_split(
        dataset.subject_ids, test_fraction=0.25, seed=split_seed
    )
    probe = fit_linear_probe(
        feats[train_idx], labels[train_idx], N_QUALITY_CLASSES, seed=probe_seed
    )
    acc = probe_accuracy(probe, feats[test_idx], labels[test_idx])
    counts = np.bincount(labels[test_idx], minlength=N_QUALITY_CLASSES)
    chance = float(counts.max() / counts.sum())
    return acc, chance


def pretrain_and_probe(dataset: DeskDataset, model_config=SMOKE_MODEL,
                       train_config=SMOKE_TRAIN, steps=200, split_seed=0):
    """Pretrain on the dataset's pairs, then probe the teacher features.

    Returns a dict with the loss history, probe accuracy, chance level,
    and the probe accuracy of a randomly initialized encoder.
    """
    state, history = pretrain(dataset.pairs, model_config, train_config, steps=steps)
    acc, chance = quality_probe_accuracy(
        state.teacher, model_config, dataset, split_seed=split_seed
    )
    random_params = init_params(model_config, seed=train_config.seed + 991)
    random_acc, _ = quality_probe_accuracy(
        random_params, model_config, dataset, split_seed=split_seed
    )
    return {
        "history": history,
        "probe_accuracy": acc,
        "chance": chance,
        "random_init_accuracy": random_acc,
        "state": state,
    }


def smoothed(values, width=25):
    """Trailing moving average; width capped at the sequence length."""
    values = np.asarray(values, dtype=np.float64)
    width = min(width, len(values))
    return np.convolve(values, np.ones(width) / width, mode="valid")


def run_window_ablation(values=(0, 2, 4, 8, 16), dataset=None, steps=200,
                        model_config=SMOKE_MODEL, train_config=SMOKE_TRAIN):
    """Pretrain+probe once per window size; returns one result row each."""
    if dataset is None:
        dataset = build_desk_dataset()
    rows = []
    for w in values:
        cfg = replace(model_config, window=int(w))
        out = pretrain_and_probe(dataset, cfg, train_config, steps=steps)
        losses = [r["loss_total"] for r in out["history"]]
        rows.append({
            "window": int(w),
            "probe_accuracy": out["probe_accuracy"],
            "chance": out["chance"],
            "final_loss": float(smoothed(losses)[-1]),
        })
    return rows


def run_loss_ablation(dataset=None, steps=200, model_config=SMOKE_MODEL,
                      train_config=SMOKE_TRAIN):
    """2x2 grid over the amplitude/phase loss weights."""
    if dataset is None:
        dataset = build_desk_dataset()
    rows = []
    for lam_pha in (0.0, train_config.lambda_phase):
        for lam_amp in (0.0, train_config.lambda_amp):
            cfg = replace(train_config, lambda_amp=lam_amp, lambda_phase=lam_pha)
            out = pretrain_and_probe(dataset, model_config, cfg, steps=steps)
            losses = [r["loss_distill"] for r in out["history"]]
            rows.append({
                "lambda_phase": lam_pha,
                "lambda_amp": lam_amp,
                "probe_accuracy": out["probe_accuracy"],
                "chance": out["chance"],
                "final_distill_loss": float(smoothed(losses)[-1]),
            })
    return rows


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def gradcheck_suite(threshold_primitive=1e-6, threshold_model=1e-4):
    """Named gradient checks; returns {name: (max_rel_error, threshold)}.

    Covers every differentiable primitive, the windowed attention block
    (both the dense and banded paths), and the composite pretraining loss
    end to end on a tiny configuration.
    """
    rng = np.random.Generator(np.random.PCG64(12345))
    results = {}

    def check(name, fn, tensors, threshold=threshold_primitive, **kw):
        results[name] = (ad.grad_check(fn, tensors, **kw), threshold)

    a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
    check("add", lambda x, y: ad.sum_(ad.add(x, y)), [a, b])
    check("mul", lambda x, y: ad.sum_(ad.mul(x, y)), [a, b])
    check("matmul", lambda x, y: ad.sum_(ad.matmul(x, y)), [_rand(rng, 3, 4), _rand(rng, 4, 2)])
    check("matmul_batched", lambda x, y: ad.sum_(ad.matmul(x, y)),
          [_rand(rng, 2, 3, 4), _rand(rng, 2, 4, 3)])
    check("transpose", lambda x: ad.sum_(ad.mul(ad.transpose(x), ad.transpose(x))), [a])
    check("reshape", lambda x: ad.sum_(ad.mul(ad.reshape(x, (4, 3)), 2.0)), [a])
    check("slice", lambda x: ad.sum_(ad.mul(x[1:, :2], x[1:, :2])), [a])
    check("concat", lambda x, y: ad.sum_(ad.mul(ad.concat([x, y], axis=1), 3.0)), [a, b])
    m1, m2, m3, m4, m5 = (_rand(rng, 3, 4) for _ in range(5))
    check("softmax", lambda x: ad.sum_(ad.mul(ad.softmax(x, axis=-1), m1)), [a])
    check("softmax_temp", lambda x: ad.sum_(ad.mul(ad.softmax(x, axis=-1, temperature=0.3),
                                                   m2)), [a])
    check("log_softmax", lambda x: ad.sum_(ad.mul(ad.log_softmax(x, axis=-1), m3)), [a])
    check("layer_norm", lambda x: ad.sum_(ad.mul(ad.layer_norm(x, axis=-1), m4)), [a])
    g_, b_ = _rand(rng, 4), _rand(rng, 4)
    check("layer_norm_affine",
          lambda x, g, c: ad.sum_(ad.mul(ad.layer_norm(x, axis=-1, gain=g, bias=c),
                                         m5)), [a, g_, b_])
    check("gelu", lambda x: ad.sum_(ad.gelu(x)), [a])
    check("exp", lambda x: ad.sum_(ad.exp(x)), [a * 0.5])
    check("log", lambda x: ad.sum_(ad.log(x)), [np.abs(a) + 1.0])
    check("tanh", lambda x: ad.sum_(ad.tanh(x)), [a])
    check("softplus", lambda x: ad.sum_(ad.softplus(x)), [a])
    check("mse", lambda x: ad.mse(x, b), [a])
    mask = rng.uniform(size=(3, 4)) > 0.4
    check("mse_masked", lambda x: ad.mse(x, b, mask=mask), [a])
    target = np.abs(_rand(rng, 3, 4)) + 0.1
    target /= target.sum(axis=-1, keepdims=True)
    check("cross_entropy",
          lambda x: ad.cross_entropy(target, ad.log_softmax(x, axis=-1)), [a])
    check("masked_fill", lambda x: ad.sum_(ad.mul(ad.masked_fill(x, mask, 0.5), 2.0)), [a])
    m6, m7 = _rand(rng, 4), _rand(rng, 3)
    check("sum_axis", lambda x: ad.sum_(ad.mul(ad.sum_(x, axis=0), m6)), [a])
    check("mean_axis", lambda x: ad.sum_(ad.mul(ad.mean(x, axis=1), m7)), [a])

    # attention paths, both dense and banded
    n, d = 7, 6
    q, k, v = _rand(rng, 2, n, d), _rand(rng, 2, n, d), _rand(rng, 2, n, d)
    mask_w = window_mask(n, 4)
    m_att = _rand(rng, 2, n, d)
    check("attention_dense",
          lambda x, y, z: ad.sum_(ad.mul(pwsa_attention(x, y, z, mask_w), m_att)),
          [q, k, v], threshold=threshold_model)
    check("attention_banded",
          lambda x, y, z: ad.sum_(ad.mul(banded_pwsa_attention(x, y, z, 4), m_att)),
          [q, k, v], threshold=threshold_model)

    # one full encoder block via the composite loss on a tiny config
    tiny = ModelConfig(layers=2, hidden=16, mlp=8, heads=2, window=4,
                       patch_len=4, out_dim=6, input_samples=40)
    params = init_params(tiny, seed=3)
    high = rng.uniform(0, 1, size=(2, 2, 40))
    low = rng.uniform(0, 1, size=(2, 2, 40))
    state = TrainState(config=tiny, student=params,
                       teacher={k2: Tensor(t.data.copy()) for k2, t in params.items()},
                       step=0, total_steps=1)
    tcfg = PretrainConfig(batch_size=2)

    def loss_of_params(*tensors):
        names = list(params)
        patched = dict(zip(names, tensors))
        st = TrainState(config=tiny, student=patched, teacher=state.teacher,
                        step=0, total_steps=1)
        total, _ = composite_loss(high, low, st, tcfg)
        return total

    err = ad.grad_check(loss_of_params, [params[k2] for k2 in params],
                        max_coords=6, seed=11)
    results["composite_loss_end_to_end"] = (err, threshold_model)
    return results


def attention_scaling(ns=(150, 300, 600), w=8, heads=4, d_head=128,
                      trials=20, inner=5, seed=0):
    """Median wall time of windowed vs full attention across lengths.

    Returns {"n": [...], "banded_s": [...], "full_s": [...]}.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    out = {"n": list(ns), "banded_s": [], "full_s": []}
    for n in ns:
        q, k, v = (rng.standard_normal((heads, n, d_head)) for _ in range(3))
        for label, fn in (
            ("banded_s", lambda: banded_attention_forward(q, k, v, w)),
            ("full_s", lambda: full_attention_forward(q, k, v)),
        ):
            fn()  # warm up
            times = []
            for _ in range(trials):
                t0 = time.perf_counter()
                for _ in range(inner):
                    fn()
                times.append((time.perf_counter() - t0) / inner)
            out[label].append(float(np.median(times)))
    return out


def per_doubling_ratios(times):
    times = np.asarray(times, dtype=np.float64)
    return times[1:] / times[:-1]
