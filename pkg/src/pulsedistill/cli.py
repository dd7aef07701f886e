"""Command-line entry point exposing the pipeline stages.

Every command is deterministic given identical inputs, config, and seed
(single-threaded mode): artifacts are byte-identical across repeated
runs.  Structured logs go to JSONL files; progress chatter goes to
stderr so primary outputs stay reproducible.
"""

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import downstream, harness, model, preprocess, sqi, train, waveio
from .errors import ConfigError, ContractError, FormatError


def _log(msg):
    print(msg, file=sys.stderr)


def _load_cfg(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    return config_mod.load_config(getattr(args, "config", None), overrides)


def cmd_gen_synth(args):
    cfg = _load_cfg(args)
    seed = args.seed if args.seed is not None else cfg["seed"]
    if args.subjects:
        records = waveio.generate_noise_graded_corpus(
            n_subjects=args.subjects,
            blocks_per_subject=cfg["gen.blocks_per_subject"],
            block_s=cfg["gen.block_duration"],
            seed=seed,
        )
    else:
        spec = waveio.SyntheticSpec(
            heart_rate_bpm=args.bpm,
            noise_kind=waveio.NoiseKind(args.noise),
            noise_level=args.level,
            duration_s=args.duration,
            seed=seed,
        )
        records = list(waveio.generate_synthetic(spec))
    waveio.write_corpus(records, args.out)
    _log(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_preprocess(args):
    records = waveio.read_corpus(args.in_path)
    segments = preprocess.segment_corpus(records)
    preprocess.write_segments(segments, args.out)
    _log(f"{len(records)} records -> {len(segments)} segments -> {args.out}")
    return 0


def _sqi_component_kwargs(cfg):
    return {
        "ppg_perfusion": {"ref": cfg["sqi.perfusion_ref"]},
        "ppg_entropy": {"bins": cfg["sqi.entropy_bins"]},
        "ecg_noise": {
            "z_threshold": cfg["sqi.energy_z_threshold"],
            "entropy_threshold": cfg["sqi.sample_entropy_threshold"],
        },
    }


def cmd_sqi(args):
    cfg = _load_cfg(args)
    segments = preprocess.read_segments(args.in_path)
    kwargs = _sqi_component_kwargs(cfg)
    weight = cfg["sqi.ppg_weight"]

    def one(seg):
        return sqi.assess(seg, ppg_weight=weight, component_kwargs=kwargs)

    threads = int(cfg["threads"])
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            assessments = list(pool.map(one, segments))
    else:
        assessments = [one(s) for s in segments]
    with open(args.out, "w") as fh:
        fh.write(json.dumps({"segments": str(args.in_path)}, sort_keys=True) + "\n")
        for i, (seg, qa) in enumerate(zip(segments, assessments)):
            row = {
                "index": i,
                "subject": seg.subject_id,
                "t_start_s": seg.t_start_s,
                "components": {k: round(v, 9) for k, v in qa.component_scores.items()},
                "sqi_ppg": round(qa.sqi_ppg, 9),
                "sqi_ecg": round(qa.sqi_ecg, 9),
                "sqi": round(qa.sqi, 9),
                "label": qa.label.name,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    _log(f"assessed {len(segments)} segments -> {args.out}")
    return 0


def _read_manifest(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        rows = [json.loads(line) for line in fh if line.strip()]
    seg_path = Path(header["segments"])
    if not seg_path.is_absolute():
        seg_path = (Path(path).parent / seg_path).resolve()
    return seg_path, rows


def cmd_pairs(args):
    seg_path, rows = _read_manifest(args.in_path)
    segments = preprocess.read_segments(seg_path)
    assessed = []
    index_of = {}
    for row in rows:
        seg = segments[row["index"]]
        qa = sqi.QualityAssessment(
            sqi_ppg=row["sqi_ppg"], sqi_ecg=row["sqi_ecg"], sqi=row["sqi"],
            label=sqi.QualityLabel[row["label"]],
            component_scores=row["components"],
        )
        assessed.append((seg, qa))
        index_of[(seg.subject_id, seg.t_start_s)] = row["index"]
    pairs = sqi.mine_pairs(assessed)
    with open(args.out, "w") as fh:
        fh.write(json.dumps({"segments": str(seg_path)}, sort_keys=True) + "\n")
        for p in pairs:
            row = {
                "subject": p.high.subject_id,
                "high": index_of[(p.high.subject_id, p.high.t_start_s)],
                "low": index_of[(p.low.subject_id, p.low.t_start_s)],
                "t_high_s": p.high.t_start_s,
                "t_low_s": p.low.t_start_s,
                "label_high": p.high_assessment.label.name,
                "label_low": p.low_assessment.label.name,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    _log(f"mined {len(pairs)} pairs -> {args.out}")
    return 0


def _model_config_from(cfg, input_samples=None):
    return model.ModelConfig(
        layers=cfg["model.layers"],
        hidden=cfg["model.hidden"],
        mlp=cfg["model.mlp"],
        heads=cfg["model.heads"],
        window=cfg["model.window"],
        patch_len=cfg["model.patch_len"],
        out_dim=cfg["model.out_dim"],
        input_samples=input_samples or cfg["pretrain.input_length"],
    )


def _pretrain_config_from(cfg):
    return train.PretrainConfig(
        student_temperature=cfg["pretrain.student_temperature"],
        teacher_temperature=cfg["pretrain.teacher_temperature"],
        lambda_amp=cfg["pretrain.lambda_amp"],
        lambda_phase=cfg["pretrain.lambda_phase"],
        lr=cfg["pretrain.lr"],
        weight_decay=cfg["pretrain.weight_decay"],
        beta1=cfg["pretrain.momentum"],
        batch_size=cfg["pretrain.batch_size"],
        epochs=cfg["pretrain.epochs"],
        momentum_start=cfg["pretrain.momentum_start"],
        momentum_end=cfg["pretrain.momentum_end"],
        seed=cfg["seed"],
    )


def cmd_pretrain(args):
    cfg = _load_cfg(args)
    seg_path, rows = _read_manifest(args.pairs)
    segments = preprocess.read_segments(seg_path)
    pairs = [
        (segments[r["high"]].channels, segments[r["low"]].channels) for r in rows
    ]
    model_cfg = _model_config_from(cfg)
    train_cfg = _pretrain_config_from(cfg)
    steps = cfg["pretrain.steps"] or None
    log_rows = []
    state, history = train.pretrain(pairs, model_cfg, train_cfg, steps=steps)
    params = {f"teacher.{k}": v for k, v in state.teacher.items()}
    params.update({f"student.{k}": v for k, v in state.student.items()})
    model.save_checkpoint(
        args.out, model_cfg, params,
        meta={"stage": "pretrain", "steps": state.total_steps, "seed": train_cfg.seed},
    )
    if args.log:
        train.write_history_jsonl(history, args.log)
    _log(f"pretrained {state.total_steps} steps on {len(pairs)} pairs -> {args.out}")
    return 0


def split_checkpoint_params(params, prefix):
    out = {}
    for key, value in params.items():
        if key.startswith(prefix):
            out[key[len(prefix):]] = value
    return out


TASK_BY_NAME = {
    "vtac": downstream.TaskSpec(kind="binary_classification"),
    "af": downstream.TaskSpec(kind="binary_classification"),
    "bp": downstream.TaskSpec(kind="bp_regression"),
}


def _read_labeled(path):
    with open(path) as fh:
        payload = json.load(fh)
    seg_path = Path(payload["segments"])
    if not seg_path.is_absolute():
        seg_path = (Path(path).parent / seg_path).resolve()
    segments = preprocess.read_segments(seg_path)
    X = np.stack([s.channels for s in segments])
    y = np.asarray(payload["labels"], dtype=np.float64)
    subjects = [s.subject_id for s in segments]
    return X, y, subjects


def cmd_finetune(args):
    cfg = _load_cfg(args)
    ckpt_cfg, params, _meta = model.load_checkpoint(args.checkpoint)
    teacher = split_checkpoint_params(params, "teacher.")
    if not teacher:
        raise ContractError(f"{args.checkpoint} carries no teacher parameters")
    task = TASK_BY_NAME[args.task]
    task.class_weight = cfg["finetune.class_weight"]
    X, y, _subjects = _read_labeled(args.data)
    ft_cfg = downstream.FinetuneConfig(
        lr=cfg["finetune.lr"],
        weight_decay=cfg["finetune.weight_decay"],
        epochs=cfg["finetune.epochs"],
        batch_size=cfg["finetune.batch_size"],
        freeze_backbone=cfg["finetune.freeze_backbone"],
        seed=cfg["seed"],
    )
    steps = cfg["finetune.steps"] or None
    fitted = downstream.finetune((ckpt_cfg, teacher), X, y, task, ft_cfg, steps=steps)
    out_params = dict(fitted.backbone)
    out_params["task_head.w"] = fitted.head_w
    out_params["task_head.b"] = fitted.head_b
    model.save_checkpoint(
        args.out, ckpt_cfg, out_params,
        meta={"stage": "finetune", "task": args.task, "kind": task.kind,
              "class_weight": task.class_weight},
    )
    _log(f"fine-tuned {args.task} on {len(X)} samples -> {args.out}")
    return 0


def cmd_eval(args):
    ckpt_cfg, params, meta = model.load_checkpoint(args.model)
    head_w = params.pop("task_head.w")
    head_b = params.pop("task_head.b")
    task = downstream.TaskSpec(kind=meta["kind"],
                               class_weight=meta.get("class_weight", 3.54))
    fitted = downstream.FittedModel(
        config=ckpt_cfg, backbone=params, head_w=head_w, head_b=head_b, task=task
    )
    X, y, _subjects = _read_labeled(args.data)
    report = downstream.evaluate(fitted, X, y, predictions_path=args.predictions)
    payload = report.to_dict()
    with open(args.report, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _log(json.dumps(payload, sort_keys=True))
    return 0


def cmd_gradcheck(args):
    results = harness.gradcheck_suite()
    if args.scope != "all":
        results = {k: v for k, v in results.items() if args.scope in k}
        if not results:
            raise ConfigError(f"no checks match scope {args.scope!r}")
    failed = 0
    for name, (err, threshold) in sorted(results.items()):
        status = "ok" if err <= threshold else "FAIL"
        if err > threshold:
            failed += 1
        print(f"{status:4s} {name:28s} max_rel_err={err:.3e} (threshold {threshold:.0e})")
    return 1 if failed else 0


def cmd_ablate(args):
    cfg = _load_cfg(args)
    dataset = harness.build_desk_dataset(
        n_subjects=cfg["ablate.subjects"],
        blocks_per_subject=cfg["ablate.blocks_per_subject"],
        block_s=cfg["ablate.block_duration"],
        seed=cfg["seed"],
        max_pairs=cfg["ablate.max_pairs"],
    )
    model_cfg = model.ModelConfig(
        layers=cfg["ablate.layers"], hidden=cfg["ablate.hidden"],
        mlp=2 * cfg["ablate.hidden"], heads=cfg["ablate.heads"],
        window=cfg["model.window"], out_dim=cfg["ablate.out_dim"],
    )
    train_cfg = _pretrain_config_from(cfg)
    train_cfg.batch_size = cfg["ablate.batch_size"]
    steps = cfg["ablate.steps"]
    if args.axis == "window":
        values = [int(v) for v in args.values.split(",")] if args.values else [0, 2, 4, 8, 16]
        rows = harness.run_window_ablation(values, dataset, steps, model_cfg, train_cfg)
        columns = ["window", "probe_accuracy", "chance", "final_loss"]
    else:
        rows = harness.run_loss_ablation(dataset, steps, model_cfg, train_cfg)
        columns = ["lambda_phase", "lambda_amp", "probe_accuracy", "chance",
                   "final_distill_loss"]
    header = "\t".join(columns)
    lines = [header]
    for row in rows:
        lines.append("\t".join(_fmt(row[c]) for c in columns))
    table = "\n".join(lines) + "\n"
    print(table, end="")
    if args.out:
        Path(args.out).write_text(table)
    return 0


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def cmd_init_config(args):
    config_mod.write_default_config(args.out)
    _log(f"wrote default config to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pulsedistill",
        description="Quality-aware PPG/ECG pipeline: synthesis, preprocessing, "
        "quality scoring, self-distillation pretraining, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, **kw)
        p.set_defaults(fn=fn)
        p.add_argument("--config", default=None, help="run config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--threads", type=int, default=None, help="worker threads (default 1)")
        return p

    p = add("gen-synth", cmd_gen_synth, help="generate a synthetic corpus")
    p.add_argument("--bpm", type=float, default=62.0)
    p.add_argument("--noise", default="none",
                   choices=[k.value for k in waveio.NoiseKind])
    p.add_argument("--level", type=float, default=0.0)
    p.add_argument("--duration", type=float, default=30.0)
    p.add_argument("--subjects", type=int, default=0,
                   help="if set, build a graded multi-subject corpus instead")
    p.add_argument("--out", required=True)

    p = add("preprocess", cmd_preprocess, help="corpus -> normalized segments")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)

    p = add("sqi", cmd_sqi, help="segments -> quality manifest")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)

    p = add("pairs", cmd_pairs, help="manifest -> quality-contrast pairs")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)

    p = add("pretrain", cmd_pretrain, help="self-distillation pretraining")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="JSONL loss history")

    p = add("finetune", cmd_finetune, help="adapt the teacher encoder to a task")
    p.add_argument("--task", required=True, choices=sorted(TASK_BY_NAME))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="labeled dataset JSON")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, help="evaluate a fine-tuned model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="report JSON path")
    p.add_argument("--predictions", default=None, help="per-sample JSONL")

    p = add("gradcheck", cmd_gradcheck, help="finite-difference gradient checks")
    p.add_argument("--scope", default="all")

    p = add("ablate", cmd_ablate, help="window / loss ablation sweeps")
    p.add_argument("--axis", required=True, choices=["window", "loss"])
    p.add_argument("--values", default=None, help="comma-separated window sizes")
    p.add_argument("--out", default=None, help="write the summary table here")

    p = add("init-config", cmd_init_config, help="write a default config file")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FormatError as exc:
        _log(f"format error: {exc}")
        return 3
    except (ContractError, ConfigError) as exc:
        _log(f"error: {exc}")
        return 2
    except FileNotFoundError as exc:
        _log(f"missing file: {exc.filename}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
