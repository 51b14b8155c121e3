"""Command-line surface: synthetic data generation, feature extraction,
training, per-frame adaptive runs and evaluation reports.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every output file starts with a header recording the version, the seed and a
digest of the effective configuration, so identical invocations produce
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dsl import CONDITION_VOCAB, EnvConditions, load_program
from .extractors import (
    DEFAULT_PARAMS,
    ExtractorKind,
    ParamSet,
    extract,
    save_features,
)
from .evaluation import (
    LATENCY_CSV_HEADER,
    MATCHES_CSV_HEADER,
    SELECTION_CSV_HEADER,
    SceneSpec,
    ate,
    latency_csv_rows,
    load_trajectory,
    measure_latency,
    report_matches,
    synth_sequence,
)
from .fitness import (
    CANDIDATE_ORDER,
    DECISIONS_CSV_HEADER,
    AdjustmentTable,
    Engine,
    EngineConfig,
    ParamMode,
    WeightFunction,
    default_adjustment_table,
    default_weight_function,
    decision_csv_row,
    fitness_theta,
    parse_decision_row,
    tune_theta,
)
from .image import load_image, save_pgm
from .kgraph import compile_from_graph, load_graph, seed_graph
from .metrics import METRICS_CSV_HEADER, metrics_csv_row
from .neural import (
    AlphaClassifierModel,
    Scaler,
    ThetaQualityModel,
    TrainConfig,
    generate_theta_dataset,
    load_model,
    load_theta_dataset,
    save_model,
    save_theta_dataset,
    train_classifier,
    train_mlp,
)
from .svgplot import write_svg_lines


class UsageError(Exception):
    """Bad flags, bad config files, missing inputs: exit code 2."""


def _config_digest(pairs: dict) -> str:
    blob = "\n".join(f"{k}={pairs[k]}" for k in sorted(pairs))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def _header_comment(seed: int, digest: str) -> str:
    return f"nfex {__version__} seed={seed} config={digest}"


def _read_ini(path: Path) -> configparser.ConfigParser:
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from exc
    return parser


# --- synth ---------------------------------------------------------------------

def _scene_from_section(section, seed: int) -> SceneSpec:
    def getf(key, default):
        return section.getfloat(key, fallback=default)

    motion_raw = section.get("motion", fallback=section.get("motion_per_frame", "0,0"))
    try:
        mx, my = (float(v) for v in motion_raw.split(","))
    except ValueError as exc:
        raise UsageError(f"bad motion value {motion_raw!r} (expected 'dx,dy')") from exc
    try:
        return SceneSpec(
            kind=section.get("kind", fallback="checkerboard"),
            brightness=getf("brightness", 0.8),
            contrast=getf("contrast", 0.8),
            blur_sigma=getf("blur_sigma", 0.0),
            reflectance_spots=section.getint("reflectance_spots", fallback=0),
            size=section.getint("size", fallback=128),
            motion_per_frame=(mx, my),
            n_frames=section.getint("n_frames", fallback=1),
            seed=section.getint("seed", fallback=seed),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_synth(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise UsageError(f"scene spec not found: {spec_path}")
    parser = _read_ini(spec_path)
    sections = parser.sections()
    if not sections:
        raise UsageError(f"{spec_path}: no [segment] sections found")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = _config_digest(
        {"spec": spec_path.read_text(encoding="utf-8"), "seed": args.seed}
    )
    comment = _header_comment(args.seed, digest)

    frame_id = 0
    cond_rows = []
    gt_lines = []
    for k, name in enumerate(sections):
        spec = _scene_from_section(parser[name], seed=args.seed + k)
        seq = synth_sequence(spec)
        for local, frame in enumerate(seq.frames):
            save_pgm(frame, out / f"frame_{frame_id:04d}.pgm", comment=comment)
            env = seq.env.as_dict()
            cond_rows.append(
                f"{frame_id}," + ",".join(env[f] for f in CONDITION_VOCAB)
            )
            t = seq.trajectory
            pose = [t.times[local] + frame_id / 30.0 - local / 30.0,
                    *t.positions[local], *t.quaternions[local]]
            gt_lines.append(" ".join(repr(float(v)) for v in pose))
            frame_id += 1
    with open(out / "conditions.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {comment}\n")
        fh.write("frame_id," + ",".join(CONDITION_VOCAB) + "\n")
        fh.write("\n".join(cond_rows) + "\n")
    with open(out / "gt.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {comment}\n")
        fh.write("\n".join(gt_lines) + "\n")
    print(f"wrote {frame_id} frames to {out}")
    return 0


# --- extract -------------------------------------------------------------------

def _list_frames(images_dir: Path) -> list[Path]:
    if images_dir.is_file():
        return [images_dir]
    if not images_dir.exists():
        raise UsageError(f"images path not found: {images_dir}")
    frames = sorted(p for p in images_dir.iterdir() if p.suffix.lower() in (".pgm", ".png"))
    if not frames:
        raise UsageError(f"no .pgm or .png frames in {images_dir}")
    return frames


def _params_from_args(args) -> ParamSet:
    try:
        return ParamSet(
            nf=args.nf if args.nf is not None else DEFAULT_PARAMS.nf,
            sf=args.sf if args.sf is not None else DEFAULT_PARAMS.sf,
            nl=args.nl if args.nl is not None else DEFAULT_PARAMS.nl,
            st=args.st if args.st is not None else DEFAULT_PARAMS.st,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_extract(args) -> int:
    frames = _list_frames(Path(args.images))
    params = _params_from_args(args)
    kind = ExtractorKind(args.kind)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = _config_digest(
        {"kind": kind.value, "params": params, "seed": args.seed}
    )
    comment = _header_comment(args.seed, digest)
    for i, path in enumerate(frames):
        fs = extract(load_image(path), kind, params, frame_id=i)
        save_features(fs, out / (path.stem + ".feat"), extra_comments=(comment,))
    print(f"extracted {len(frames)} frames to {out}")
    return 0


# --- train ---------------------------------------------------------------------

def _scenes_from_spec(path: Path, seed: int) -> list[SceneSpec]:
    parser = _read_ini(path)
    if not parser.sections():
        raise UsageError(f"{path}: no [segment] sections found")
    return [
        _scene_from_section(parser[name], seed=seed + k)
        for k, name in enumerate(parser.sections())
    ]


def _write_loss_curve(path_base: Path, losses, comment: str, label: str) -> None:
    csv_path = path_base.with_suffix(".loss.csv")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {comment}\n")
        fh.write("epoch,loss\n")
        for i, loss in enumerate(losses):
            fh.write(f"{i},{loss!r}\n")
    write_svg_lines(
        path_base.with_suffix(".loss.svg"),
        {label: list(losses)},
        title=f"{label} training loss",
        x_label="epoch",
        y_label="loss",
    )


def _train_theta(args, cfg: TrainConfig, comment: str) -> int:
    if args.dataset:
        dataset = load_theta_dataset(args.dataset)
    elif args.scenes:
        scenes = _scenes_from_spec(Path(args.scenes), cfg.seed)
        dataset = generate_theta_dataset(scenes)
    else:
        raise UsageError("theta training needs --dataset or --scenes")
    if args.save_dataset:
        save_theta_dataset(dataset, args.save_dataset, comments=(comment,))
    scaler = Scaler()
    feats = scaler.fit_transform(dataset.features)
    mlp, losses = train_mlp(feats, dataset.targets, cfg, stop_at_loss=args.stop_loss)
    model = ThetaQualityModel(mlp=mlp, scaler=scaler)
    out = Path(args.out)
    save_model(model, out, comments=(comment,))
    _write_loss_curve(out, losses, comment, "theta-regressor")
    final = losses[-1] if losses else float("nan")
    print(f"trained theta regressor on {len(dataset)} rows, final mse {final:.6g}")
    return 0


def _load_alpha_dataset(dataset_dir: Path):
    labels_path = dataset_dir / "labels.csv"
    if not labels_path.exists():
        raise UsageError(f"alpha dataset needs {labels_path}")
    with open(labels_path, "r", encoding="utf-8") as fh:
        rows = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    header = rows[0].split(",")
    if header[:2] != ["patch", "label"]:
        raise UsageError(f"{labels_path}: header must start with 'patch,label'")
    images, numerics, labels = [], [], []
    from .image import resize_bilinear

    for row in rows[1:]:
        cells = row.split(",")
        img = load_image(dataset_dir / cells[0])
        arr = img.data
        if arr.shape != (64, 64):
            arr = resize_bilinear(arr, 64, 64)
        images.append(arr / 255.0)
        labels.append(int(cells[1]))
        numerics.append([float(v) for v in cells[2:]])
    return np.stack(images), np.array(numerics, dtype=np.float64), np.array(labels)


def _train_alpha(args, cfg: TrainConfig, comment: str) -> int:
    if not args.dataset:
        raise UsageError("alpha training needs --dataset DIR")
    images, numerics, labels = _load_alpha_dataset(Path(args.dataset))
    scaler = Scaler()
    numerics_scaled = scaler.fit_transform(numerics) if numerics.size else numerics
    net, losses, accs = train_classifier(
        images, numerics_scaled, labels, cfg, stop_at_accuracy=args.stop_accuracy
    )
    model = AlphaClassifierModel(net=net, scaler=scaler)
    out = Path(args.out)
    save_model(model, out, comments=(comment,))
    _write_loss_curve(out, losses, comment, "alpha-classifier")
    final = accs[-1] if accs else float("nan")
    print(f"trained alpha classifier on {len(labels)} rows, accuracy {final:.3f}")
    return 0


def cmd_train(args) -> int:
    try:
        cfg = TrainConfig(
            batch_size=args.batch_size,
            learning_rate=args.lr,
            epochs=args.epochs,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    digest = _config_digest(
        {"target": args.target, "dataset": args.dataset, "scenes": args.scenes,
         "cfg": cfg}
    )
    comment = _header_comment(args.seed, digest)
    if args.target == "theta":
        return _train_theta(args, cfg, comment)
    return _train_alpha(args, cfg, comment)


# --- run ------------------------------------------------------------------------

def _load_conditions(path: Path) -> list[EnvConditions]:
    if not path.exists():
        raise UsageError(f"conditions file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        rows = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    header = rows[0].split(",")
    expected = ["frame_id", *CONDITION_VOCAB]
    if header != expected:
        raise UsageError(f"{path}: header must be {','.join(expected)}")
    out = []
    for row in rows[1:]:
        cells = row.split(",")
        try:
            out.append(EnvConditions.from_dict(dict(zip(header[1:], cells[1:]))))
        except ValueError as exc:
            raise UsageError(f"{path}: {exc}") from exc
    return out


def _engine_config_from_ini(args) -> tuple[EngineConfig, dict, ThetaQualityModel | None]:
    raw: dict = {}
    if args.config:
        parser = _read_ini(Path(args.config))
        if parser.has_section("run"):
            raw = dict(parser["run"])
    mode = args.mode or raw.get("mode", "exhaustive")
    window = int(raw.get("window", 5))
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))

    try:
        base = ParamSet(
            nf=args.nf if args.nf is not None else int(raw.get("nf", DEFAULT_PARAMS.nf)),
            sf=args.sf if args.sf is not None else float(raw.get("sf", DEFAULT_PARAMS.sf)),
            nl=args.nl if args.nl is not None else int(raw.get("nl", DEFAULT_PARAMS.nl)),
            st=args.st if args.st is not None else float(raw.get("st", DEFAULT_PARAMS.st)),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    try:
        if raw.get("dsl"):
            program = load_program(raw["dsl"])
        elif raw.get("graph"):
            program = compile_from_graph(load_graph(raw["graph"]))
        else:
            program = compile_from_graph(seed_graph())
        table = (
            AdjustmentTable.load(raw["adjust_table"])
            if raw.get("adjust_table")
            else default_adjustment_table()
        )
        weights = (
            WeightFunction.load(raw["weights"])
            if raw.get("weights")
            else default_weight_function()
        )
        theta_model = None
        if raw.get("theta_model"):
            loaded = load_model(raw["theta_model"])
            if not isinstance(loaded, ThetaQualityModel):
                raise UsageError(f"{raw['theta_model']} is not a theta-regressor model")
            theta_model = loaded
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc

    try:
        config = EngineConfig(
            program=program, table=table, weights=weights,
            base_params=base, mode=mode, window=window,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    meta = {"mode": mode, "window": window, "seed": seed, "base": base,
            "config_file": raw}
    return config, meta, theta_model


def cmd_run(args) -> int:
    frames = _list_frames(Path(args.images))
    conditions = _load_conditions(Path(args.conditions))
    if len(conditions) != len(frames):
        raise UsageError(
            f"{len(frames)} frames but {len(conditions)} condition rows"
        )
    config, meta, theta_model = _engine_config_from_ini(args)
    seed = meta["seed"]
    digest = _config_digest({k: str(v) for k, v in meta.items()})
    comment = _header_comment(seed, digest)

    out = Path(args.out)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    engine = Engine(config)
    decision_rows = []
    metric_rows = []
    fitness_rows = []
    score_trace = []
    selection_trace = []
    for i, path in enumerate(frames):
        img = load_image(path)
        decision, winner = engine.run_frame(img, conditions[i], frame_id=i)
        decision_rows.append(decision_csv_row(decision))
        for mv in engine.metric_log[-len(decision.scores):]:
            metric_rows.append(metrics_csv_row(mv))
        save_features(winner, feat_dir / (path.stem + ".feat"), extra_comments=(comment,))
        score_trace.append(decision.scores[decision.alpha_star])
        selection_trace.append(CANDIDATE_ORDER.index(decision.alpha_star))
        if theta_model is not None:
            f = fitness_theta(
                decision.theta_prime[decision.alpha_star], conditions[i], theta_model
            )
            fitness_rows.append(f"{i},{f!r}")

    with open(out / "decisions.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {comment}\n{DECISIONS_CSV_HEADER}\n")
        fh.write("\n".join(decision_rows) + "\n")
    with open(out / "metrics.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {comment}\n{METRICS_CSV_HEADER}\n")
        fh.write("\n".join(metric_rows) + "\n")
    if fitness_rows:
        with open(out / "fitness.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# {comment}\nframe_id,fitness\n")
            fh.write("\n".join(fitness_rows) + "\n")
    write_svg_lines(
        out / "selection.svg",
        {"candidate index": [float(v) for v in selection_trace]},
        title="selected candidate per frame",
        x_label="frame", y_label="candidate",
    )
    write_svg_lines(
        out / "scores.svg",
        {"winning score": score_trace},
        title="winning selection score per frame",
        x_label="frame", y_label="score",
    )
    n_selected = len(set(selection_trace))
    print(
        f"processed {len(frames)} frames, "
        f"{engine.extraction_calls} extraction calls, "
        f"{n_selected} distinct candidates selected"
    )
    return 0


# --- eval -----------------------------------------------------------------------

def _eval_ate(args) -> int:
    gt = load_trajectory(args.ate[0])
    est = load_trajectory(args.ate[1])
    value = ate(gt, est, align=args.align)
    print(f"ATE {value:.6f}")
    return 0


def _eval_matches(args) -> int:
    frames = [load_image(p) for p in _list_frames(Path(args.images))]
    env = None
    if args.conditions:
        conds = _load_conditions(Path(args.conditions))
        env = conds[0] if conds else None
    table = default_adjustment_table()
    base = DEFAULT_PARAMS
    configs = []
    for cand in CANDIDATE_ORDER:
        if cand.mode is ParamMode.DYNAMIC and env is not None:
            theta = tune_theta(base, env, table)
        else:
            theta = base
        configs.append((cand.name, cand.kind, theta))
    rows = report_matches(frames, configs)
    digest = _config_digest({"images": args.images, "seed": args.seed})
    lines = [f"# {_header_comment(args.seed, digest)}", MATCHES_CSV_HEADER]
    for r in rows:
        lines.append(f"{r.config},{r.avg_features!r},{r.avg_matches!r}")
        print(f"{r.config}: features {r.avg_features:.1f}, matches {r.avg_matches:.1f}")
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def _eval_selection(args) -> int:
    path = Path(args.selection)
    if not path.exists():
        raise UsageError(f"decision log not found: {path}")
    counts = {c.name: 0 for c in CANDIDATE_ORDER}
    total = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("frame_id"):
                continue
            _, name = parse_decision_row(line)
            if name not in counts:
                raise UsageError(f"{path}: unknown candidate {name!r}")
            counts[name] += 1
            total += 1
    digest = _config_digest({"decisions": str(path), "seed": args.seed})
    lines = [f"# {_header_comment(args.seed, digest)}", SELECTION_CSV_HEADER]
    for name, n in counts.items():
        lines.append(f"{name},{n}")
        print(f"{name}: {n} / {total}")
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def _eval_latency(args) -> int:
    rep = measure_latency()
    digest = _config_digest({"latency": True, "seed": args.seed})
    lines = [f"# {_header_comment(args.seed, digest)}", LATENCY_CSV_HEADER]
    lines.extend(latency_csv_rows(rep))
    for row in latency_csv_rows(rep):
        task, med, mad, unit = row.split(",")
        print(f"{task}: median {float(med):.3f} {unit} (mad {float(mad):.3f} {unit})")
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def cmd_eval(args) -> int:
    if args.ate:
        return _eval_ate(args)
    if args.matches:
        return _eval_matches(args)
    if args.selection:
        return _eval_selection(args)
    if args.latency:
        return _eval_latency(args)
    raise UsageError("eval needs one of --ate, --matches, --selection, --latency")


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nfex",
        description="Condition-adaptive feature extraction: synthesize scenes, "
        "train the learned components, run the per-frame decision loop and "
        "evaluate the results.",
    )
    parser.add_argument("--version", action="version", version=f"nfex {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic sequence from a scene spec")
    p.add_argument("--spec", required=True, help="INI file with [segment] sections")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="extract features from frames")
    p.add_argument("--images", required=True, help="directory of .pgm/.png frames")
    p.add_argument("--kind", required=True, choices=[k.value for k in ExtractorKind])
    p.add_argument("--nf", type=int)
    p.add_argument("--sf", type=float)
    p.add_argument("--nl", type=int)
    p.add_argument("--st", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the parameter regressor or the classifier")
    p.add_argument("--target", required=True, choices=["theta", "alpha"])
    p.add_argument("--dataset", help="CSV (theta) or directory with labels.csv (alpha)")
    p.add_argument("--scenes", help="scene spec to generate a theta dataset from")
    p.add_argument("--save-dataset", help="also write the generated dataset here")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--stop-loss", type=float, help="stop early at this training MSE")
    p.add_argument("--stop-accuracy", type=float, help="stop early at this accuracy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model file to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="adaptive per-frame selection over a sequence")
    p.add_argument("--images", required=True)
    p.add_argument("--conditions", required=True, help="per-frame condition CSV")
    p.add_argument("--config", help="INI run configuration ([run] section)")
    p.add_argument("--mode", choices=["exhaustive", "fast"])
    p.add_argument("--nf", type=int)
    p.add_argument("--sf", type=float)
    p.add_argument("--nl", type=int)
    p.add_argument("--st", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="trajectory error, match/selection/latency reports")
    p.add_argument("--ate", nargs=2, metavar=("GT", "EST"))
    p.add_argument("--align", choices=["rigid", "none"], default="rigid")
    p.add_argument("--matches", action="store_true")
    p.add_argument("--images", help="frames for --matches")
    p.add_argument("--conditions", help="condition CSV for --matches dynamic configs")
    p.add_argument("--selection", metavar="DECISIONS_CSV")
    p.add_argument("--latency", action="store_true")
    p.add_argument("--out", help="report CSV path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
