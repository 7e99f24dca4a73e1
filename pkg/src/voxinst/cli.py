"""Command-line surface: dataset generation, training, inference,
evaluation, PLY export, and a finite-difference gradient self-check.

Configuration is a JSON file with five sections (synth, model, loss, train,
cluster) merged with dotted-path `--set` overrides; unknown keys are
rejected, and every data-producing run writes the fully resolved config
next to its outputs.

Exit codes: 0 success, 2 configuration/validation error, 3 I/O or file
format error, 4 numerical divergence during training, 5 gradient check
failure.
"""

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as losseslib
from . import model as modellib
from .errors import (
    BadMagic,
    ConfigError,
    CorruptTensorTable,
    EmptyInput,
    InvalidGeometry,
    NumericalDivergence,
    PlacementError,
    ShapeError,
    VersionMismatch,
)
from .evaluation import ap_summary
from .formats import read_mvox, read_predictions, write_ply, write_predictions
from .grid import InstanceLabeling, PointCloud, SceneSample, voxel_centers
from .losses import LossParams
from .meanshift import MeanShiftParams
from .model import FieldPair, ModelConfig
from .proposals import ScoreWeights, segment
from .report import render_table, write_loss_curves, write_report
from .synthgen import SynthConfig, encode_input, generate_dataset
from .train import TrainConfig, train as run_train
from .util import dataclass_from_dict, dataclass_to_dict


@dataclass
class TrainParams:
    """Loop-only knobs; the model and loss sections are merged in at run
    time (they are shared with inference)."""

    learning_rate: float = 5e-4
    batch_size: int = 2
    epochs: int = 100
    seed: int = 0
    augmentation: bool = True
    checkpoint_every: int = 200
    noise_probability: float = 0.0


@dataclass
class ClusterParams:
    bandwidths: tuple = ()  # empty -> (1, 1.5, 2) x loss.delta_var
    w_fe: float = 1.0
    w_dir: float = 1.0
    w_size: float = 0.5
    nms_threshold: float = 0.3
    use_size_bands: bool = True  # pull per-class bands from the dataset manifest


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossParams = field(default_factory=LossParams)
    train: TrainParams = field(default_factory=TrainParams)
    cluster: ClusterParams = field(default_factory=ClusterParams)


def _apply_override(data, assignment):
    key, _, raw = assignment.partition("=")
    if not _:
        raise ConfigError(f"--set expects KEY.PATH=VALUE, got '{assignment}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings allowed without quotes
    node = data
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: '{p}' is not a section")
    node[parts[-1]] = value


def load_run_config(args):
    data = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: invalid JSON ({e})")
    if getattr(args, "scenes", None) is not None:
        synth = data.setdefault("synth", {})
        synth["num_scenes"] = args.scenes
        synth["train_scenes"] = int(round(args.scenes * 0.9))
    if getattr(args, "seed", None) is not None:
        data.setdefault("synth", {})["seed"] = args.seed
        data.setdefault("train", {})["seed"] = args.seed
    for assignment in getattr(args, "set", None) or []:
        _apply_override(data, assignment)  # --set wins over every other flag
    return dataclass_from_dict(RunConfig, data)


def _echo_config(cfg, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved_config.json", "w") as f:
        json.dump(dataclass_to_dict(cfg), f, indent=1, sort_keys=True)
        f.write("\n")


def _cluster_setup(cfg, manifest=None):
    bands = {}
    if cfg.cluster.use_size_bands and manifest and "size_bands" in manifest:
        bands = {int(c): tuple(b) for c, b in manifest["size_bands"].items()}
    weights = ScoreWeights(
        w_fe=cfg.cluster.w_fe, w_dir=cfg.cluster.w_dir, w_size=cfg.cluster.w_size,
        size_bands=bands,
    )
    if cfg.cluster.bandwidths:
        ms = MeanShiftParams(bandwidths=tuple(cfg.cluster.bandwidths))
    else:
        ms = MeanShiftParams.from_delta_var(cfg.loss.delta_var)
    return ms, weights


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args):
    cfg = load_run_config(args)
    manifest = generate_dataset(cfg.synth, args.out, jobs=args.jobs)
    _echo_config(cfg, args.out)
    print(f"wrote {cfg.synth.num_scenes} scenes to {args.out} "
          f"({len(manifest['train'])} train / {len(manifest['test'])} test)")
    return 0


def cmd_train(args):
    cfg = load_run_config(args)
    tc = TrainConfig(
        learning_rate=cfg.train.learning_rate,
        batch_size=cfg.train.batch_size,
        epochs=cfg.train.epochs,
        seed=cfg.train.seed,
        augmentation=cfg.train.augmentation,
        checkpoint_every=cfg.train.checkpoint_every,
        noise_probability=cfg.train.noise_probability,
        loss_params=cfg.loss,
        model=cfg.model,
    )
    _echo_config(cfg, args.out)
    result = run_train(tc, data_dir=args.data, out_dir=args.out)
    curves = write_loss_curves(result.log_path, Path(args.out) / "loss_curves.png")
    print(f"trained {result.steps} steps; final l_joint "
          f"{result.final_losses.get('l_joint', float('nan')):.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss log:   {result.log_path}")
    print(f"curves:     {curves}")
    return 0


def _load_manifest(data_dir):
    path = Path(data_dir) / "manifest.json"
    with open(path) as f:
        return json.load(f)


def _infer_one(model, grid, cfg, ms, weights):
    x = encode_input(grid, model.config.num_classes)
    with ad.no_grad():
        fields = model.forward(x)
    sem = grid.linear_semantic()
    mask = np.flatnonzero((sem > 0) & ~np.isin(sem, list(cfg.loss.ignore_classes)))
    kept = segment(
        fields, grid, mask, ms, weights, cfg.loss.delta_var,
        cfg.loss.ignore_classes, cfg.cluster.nms_threshold,
    )
    return fields, kept


def cmd_infer(args):
    cfg = load_run_config(args)
    model = modellib.load(args.model)
    grid, num_classes = read_mvox(args.scene)
    if num_classes != model.config.num_classes:
        raise ConfigError(
            f"scene has {num_classes} classes but the model expects "
            f"{model.config.num_classes}"
        )
    manifest = _load_manifest(args.data) if args.data else None
    ms, weights = _cluster_setup(cfg, manifest)
    fields, kept = _infer_one(model, grid, cfg, ms, weights)
    scene_id = Path(args.scene).stem
    write_predictions(args.out, scene_id, grid.dims, kept)
    _echo_config(cfg, Path(args.out).parent)
    if args.embed_dump:
        np.savez_compressed(
            args.embed_dump,
            embedding=fields.embedding.data,
            direction=fields.direction.data,
        )
    print(f"{scene_id}: {len(kept)} instances -> {args.out}")
    return 0


def _gt_for_scene(job):
    path, ignore_classes = job
    grid, _ = read_mvox(path)
    sem = grid.linear_semantic()
    ignore = np.flatnonzero(np.isin(sem, list(ignore_classes)))
    return Path(path).stem, InstanceLabeling.from_grid(grid), ignore


def cmd_eval(args):
    cfg = load_run_config(args)
    pred_path = Path(args.pred)
    pred_files = sorted(pred_path.glob("*.json")) if pred_path.is_dir() else [pred_path]
    pred_files = [p for p in pred_files if p.name != "resolved_config.json"]
    if not pred_files:
        raise ConfigError(f"no prediction files under {args.pred}")
    preds_by_scene = {}
    for p in pred_files:
        scene_id, _, preds = read_predictions(p)
        preds_by_scene[scene_id] = preds
    gt_dir = Path(args.gt)
    jobs = [
        (str(gt_dir / f"{scene_id}.mvox"), cfg.loss.ignore_classes)
        for scene_id in preds_by_scene
    ]
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            loaded = list(pool.map(_gt_for_scene, jobs))
    else:
        loaded = [_gt_for_scene(j) for j in jobs]
    gt_by_scene = {sid: gt for sid, gt, _ in loaded}
    ignore_by_scene = {sid: ign for sid, _, ign in loaded}
    report = ap_summary(
        preds_by_scene, gt_by_scene, cfg.loss.ignore_classes, ignore_by_scene
    )
    paths = write_report(report, args.report)
    if args.log:
        paths["loss_curves"] = write_loss_curves(
            args.log, Path(args.report) / "loss_curves.png"
        )
    _echo_config(cfg, args.report)
    print(render_table(report))
    print("\n".join(f"{k}: {v}" for k, v in paths.items()))
    return 0


def cmd_export_ply(args):
    grid, _ = read_mvox(args.scene)
    sem = grid.linear_semantic()
    inst = grid.linear_instance().astype(np.int64)
    if args.pred:
        _, dims, preds = read_predictions(args.pred)
        if tuple(dims) != grid.dims:
            raise ConfigError(f"prediction dims {dims} != scene dims {grid.dims}")
        inst = np.zeros(sem.size, dtype=np.int64)
        order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
        for rank, pi in enumerate(order, start=1):
            inst[preds[pi][2]] = rank
    occupied = np.flatnonzero(sem > 0)
    colors = np.full((occupied.size, 3), 127, dtype=np.uint8)
    for iid in np.unique(inst[occupied]):
        if iid == 0:
            continue
        palette = np.random.default_rng(int(iid)).integers(48, 256, size=3)
        colors[inst[occupied] == iid] = palette.astype(np.uint8)
    cloud = PointCloud(
        voxel_centers(grid, occupied),
        semantic=sem[occupied],
        instance=inst[occupied].astype(np.uint16),
        color=colors,
    )
    write_ply(cloud, args.out)
    print(f"wrote {len(cloud)} points to {args.out}")
    return 0


# -- gradcheck ---------------------------------------------------------------------


def _numeric_grads(value_fn, arrays, h=1e-5):
    grads = []
    for ai, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = value_fn(arrays)
            flat[i] = keep - h
            down = value_fn(arrays)
            flat[i] = keep
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def _max_rel(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def _check_case(arrays, forward):
    """forward(tensors) -> scalar Tensor; compares reverse-mode grads with
    central differences on f64 copies."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    def value(arrs):
        with ad.no_grad():
            return float(forward([ad.Tensor(a.copy()) for a in arrs]).data)

    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = forward(tensors)
    out.backward()
    analytic = [t.grad for t in tensors]
    numeric = _numeric_grads(value, arrays)
    return _max_rel(analytic, numeric)


def _loss_scene():
    sem = np.zeros((5, 4, 3), dtype=np.uint16)
    inst = np.zeros((5, 4, 3), dtype=np.uint16)
    sem[0:2, 0:2, :], inst[0:2, 0:2, :] = 2, 1
    sem[3:5, 2:4, :], inst[3:5, 2:4, :] = 3, 2
    sem[2, 0, 0] = 1
    from .grid import VoxelGrid

    g = VoxelGrid((5, 4, 3), 0.1, None, sem, inst)
    return SceneSample(g, InstanceLabeling.from_grid(g), 0, {})


def gradcheck_cases(rng):
    """(name, input arrays, forward) triples covering every differentiable
    op plus the composite losses."""
    r = lambda *s: rng.uniform(-1.0, 1.0, size=s)
    proj = lambda t, w: ad.tensor_sum(ad.mul(t, ad.Tensor(w)))
    cases = []

    a, b = r(3, 4), r(3, 4)
    w = r(3, 4)
    cases.append(("add", [a, b], lambda ts: proj(ad.add(ts[0], ts[1]), w)))
    cases.append(("add_broadcast", [r(3, 1), r(3, 4)], lambda ts: proj(ad.add(ts[0], ts[1]), w)))
    cases.append(("mul", [a, b], lambda ts: proj(ad.mul(ts[0], ts[1]), w)))
    cases.append(("scale", [a], lambda ts: proj(ad.scale(ts[0], -1.7), w)))
    relu_in = r(4, 5) + np.sign(r(4, 5)) * 0.2  # keep clear of the kink
    wr = r(4, 5)
    cases.append(("relu", [relu_in], lambda ts: proj(ad.relu(ts[0]), wr)))
    cases.append(("sum", [r(2, 3, 4)], lambda ts: ad.tensor_sum(ts[0])))
    w2 = r(2, 4)
    cases.append(("sum_axis", [r(2, 3, 4)], lambda ts: proj(ad.tensor_sum(ts[0], axis=1), w2)))
    cases.append(("mean", [r(3, 4)], lambda ts: ad.tensor_mean(ts[0])))
    w3 = r(12)
    cases.append(("reshape", [r(3, 4)], lambda ts: proj(ad.reshape(ts[0], (12,)), w3)))
    w4 = r(2, 7)
    cases.append(
        ("concat", [r(2, 3), r(2, 4)], lambda ts: proj(ad.concat(ts, axis=1), w4))
    )
    idx = np.array([0, 2, 2, 1])
    w5 = r(3, 4)
    cases.append(
        ("gather_cols", [r(3, 5)], lambda ts: proj(ad.gather_cols(ts[0], idx), w5))
    )
    norm_in = r(3, 4) + 0.5
    cases.append(("l2norm", [norm_in], lambda ts: ad.tensor_sum(ad.l2norm(ts[0], axis=0))))
    w6 = r(3, 4)
    cases.append(
        ("l2_normalize", [norm_in], lambda ts: proj(ad.l2_normalize(ts[0], axis=0), w6))
    )

    x = r(2, 6, 5, 4)
    cw = r(3, 2, 3, 3, 3) * 0.5
    cb = r(3)
    wc = r(3, 6, 5, 4)
    cases.append(
        (
            "conv3d",
            [x, cw, cb],
            lambda ts: proj(ad.conv3d(ts[0], ts[1], ts[2], padding="same"), wc),
        )
    )
    xd = r(2, 7, 6, 5)
    wd = r(3, 7, 6, 5)
    cases.append(
        (
            "conv3d_dilated",
            [xd, cw, cb],
            lambda ts: proj(ad.conv3d(ts[0], ts[1], ts[2], dilation=2, padding="same"), wd),
        )
    )
    xt = r(2, 3, 2, 2)
    tw = r(2, 3, 2, 2, 2) * 0.5
    tb = r(3)
    wt = r(3, 6, 4, 4)
    cases.append(
        (
            "conv_transpose3d",
            [xt, tw, tb],
            lambda ts: proj(ad.conv_transpose3d(ts[0], ts[1], ts[2], stride=2), wt),
        )
    )
    mp_in = (rng.permutation(2 * 4 * 4 * 4).astype(np.float64) * 0.1).reshape(2, 4, 4, 4)
    wm = r(2, 2, 2, 2)
    cases.append(("maxpool3d", [mp_in], lambda ts: proj(ad.maxpool3d(ts[0]), wm)))
    wp = r(2, 4, 3, 5)
    cases.append(
        ("pad_end3d", [r(2, 3, 3, 4)], lambda ts: proj(ad.pad_end3d(ts[0], (1, 0, 1)), wp))
    )
    wcr = r(2, 2, 2, 2)
    cases.append(("crop3d", [r(2, 4, 3, 4)], lambda ts: proj(ad.crop3d(ts[0], (2, 2, 2)), wcr)))

    sample = _loss_scene()
    dims = sample.grid.dims
    params = LossParams()
    emb = r(3, *dims)
    direction = r(3, *dims) + 0.3

    def joint(ts):
        fields = FieldPair(ts[0], ad.l2_normalize(ts[1], axis=0))
        total, _ = losseslib.l_joint(fields, sample, params)
        return total

    cases.append(("l_joint", [emb, direction], joint))
    stats = losseslib.compute_cluster_stats(sample, params)
    cases.append(("l_fe", [emb], lambda ts: losseslib.l_fe(ts[0], stats, params)))
    return cases


def cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    failures = 0
    for name, arrays, forward in gradcheck_cases(rng):
        err = _check_case(arrays, forward)
        ok = err <= args.tolerance
        failures += 0 if ok else 1
        print(f"{name:>18}  max_rel_err {err:.3e}  {'PASS' if ok else 'FAIL'}")
    if failures:
        print(f"{failures} op(s) exceeded tolerance {args.tolerance}")
        return 5
    print(f"all gradients within {args.tolerance}")
    return 0


# -- argument parsing ----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="voxinst",
        description="Voxel instance segmentation: synthetic data, training, "
        "inference, evaluation, export.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, jobs=False):
        p.add_argument("--config", help="JSON config with synth/model/loss/train/cluster sections")
        p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                       help="dotted-path config override (repeatable)")
        p.add_argument("--seed", type=int, help="override synth.seed and train.seed")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="worker processes")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(p, jobs=True)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--scenes", type=int, help="override synth.num_scenes (90/10 split)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the dual-head model")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory (gen-data output)")
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment one scene with a trained model")
    common(p)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--scene", required=True, help="MVOX scene path")
    p.add_argument("--out", required=True, help="prediction JSON path")
    p.add_argument("--data", help="dataset dir (for per-class size bands)")
    p.add_argument("--embed-dump", help="write embedding/direction fields to .npz")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    common(p, jobs=True)
    p.add_argument("--pred", required=True, help="prediction JSON file or directory")
    p.add_argument("--gt", required=True, help="dataset directory with MVOX scenes")
    p.add_argument("--report", required=True, help="report output directory")
    p.add_argument("--log", help="training loss CSV to render alongside the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-ply", help="export a scene (or predictions) as colored PLY")
    p.add_argument("--scene", required=True, help="MVOX scene path")
    p.add_argument("--pred", help="prediction JSON; colors follow predicted instances")
    p.add_argument("--out", required=True, help="PLY output path")
    p.set_defaults(func=cmd_export_ply)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (InvalidGeometry, EmptyInput, ShapeError, PlacementError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return 2
    except NumericalDivergence as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        if e.last_checkpoint:
            print(f"last good checkpoint: {e.last_checkpoint}", file=sys.stderr)
        return 4
    except (BadMagic, VersionMismatch, CorruptTensorTable) as e:
        print(f"file format error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
