"""Command line entry point: ``tvae {train,eval,demo,convert-idx}``.

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import evaluation as ev
from .augmentation import PixelTransform, apply_transforms, make_triplets
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, apply_flat, load_config, parse_flat
from .datasets import DATASET_NAMES, DatasetError, ImageSet, load_dataset, save_idx, subsample, to_uint8, resize_images
from .figures import save_grid, save_line_plot
from .networks import TVAE
from .objective import NumericalError
from .training import CHECKPOINT_NAME, train

log = logging.getLogger("tvae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# run manifest


def code_hash() -> str:
    """sha256 over the package sources, in sorted path order."""
    h = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode() + b"\0")
        h.update(path.read_bytes())
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """Record of one command: resolved config, code hash, seeds, outputs, timing."""

    def __init__(self, command: str, config: RunConfig, seeds: dict, inputs: dict | None = None):
        self.data = {
            "command": command,
            "config": config.to_flat(),
            "code_sha256": code_hash(),
            "seeds": seeds,
            "inputs": inputs or {},
            "outputs": [],
            "protocol": {},
            "started": _now(),
            "finished": None,
        }

    def add_output(self, path):
        name = Path(path).name
        if name in self.data["outputs"]:
            raise ValueError(f"artifact {name} already recorded")
        self.data["outputs"].append(name)

    def write(self, out_dir) -> Path:
        self.data["finished"] = _now()
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(f"cannot serialise {type(v)}")


# --------------------------------------------------------------------------
# helpers


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError([f"--set {item!r}: expected key=value"])
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def run_name(cfg: RunConfig) -> str:
    t = cfg.train
    variant = t.variant + ("r" if t.residual else "") if t.model == "tvae" else "-"
    return f"{t.model}_{variant}_z{t.z_dim}_{t.dataset}_s{t.seed}".replace("-", "none")


def _load_split(name: str, split: str, root, size, seed: int) -> ImageSet:
    data = load_dataset(name, split, root)
    if size is not None and size < len(data):
        data = subsample(data, size, np.random.default_rng(np.random.SeedSequence([seed, 11])))
    return data


def _write(out_dir: Path, name: str, text: str, manifest: RunManifest) -> Path:
    path = out_dir / name
    path.write_text(text)
    manifest.add_output(path)
    return path


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _checkpoint_config(path, overrides: dict, config_path=None) -> tuple:
    model, snapshot, meta = load_checkpoint(path)
    cfg = RunConfig.from_dict(snapshot) if snapshot else RunConfig()
    if config_path is not None:
        cfg = apply_flat(cfg, parse_flat(Path(config_path).read_text()))
    if overrides:
        cfg = apply_flat(cfg, overrides)
    cfg.validate()
    if cfg.train.z_dim != model.z_dim:
        raise UsageError(f"model.z_dim: config says {cfg.train.z_dim}, checkpoint holds {model.z_dim}")
    return model, cfg, meta


def eval_protocol(cfg: RunConfig, task: str) -> dict:
    """The exact evaluation settings a task will use."""
    e, t = cfg.eval, cfg.train
    if task == "mll":
        return {"importance_samples": e.mll_samples, "dataset": t.dataset, "split": "test",
                "test_size": t.test_size}
    if task in ("knn", "curves"):
        out = {"k": e.knn_k, "metric": e.metric, "embedding": e.embedding, "anchors": e.knn_anchors,
               "queries": e.knn_queries, "anchor_dataset": e.ood_dataset, "anchor_split": "train",
               "query_split": "test", "seed": e.seed}
        if task == "curves":
            out.update(fractions=list(e.curve_fractions), repeats=e.curve_repeats)
        return out
    if task == "report":
        return {"importance_samples": e.mll_samples, "k": e.knn_k, "metric": e.metric,
                "embedding": e.embedding, "anchors": e.knn_anchors, "ood_dataset": e.ood_dataset}
    raise UsageError(f"unknown eval task {task!r}")


def _embed(model, data, cfg):
    gen = torch.Generator().manual_seed(cfg.eval.seed)
    return ev.embed(model, data, mode=cfg.eval.embedding, generator=gen)


def _ood_sets(cfg: RunConfig, root):
    e = cfg.eval
    anchors = _load_split(e.ood_dataset, "train", root, e.knn_anchors, e.seed)
    queries = _load_split(e.ood_dataset, "test", root, e.knn_queries, e.seed + 1)
    return anchors, queries


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args.set))
    root = args.data_root or cfg.train.data_root
    out_dir = Path(args.out or Path("runs") / run_name(cfg))
    t = cfg.train
    train_set = _load_split(t.dataset, "train", root, t.train_size, t.seed)
    test_set = _load_split(t.dataset, "test", root, t.test_size, t.seed + 1)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("train", cfg, {"train": t.seed, "aug": t.aug.seed},
                           {"train_size": len(train_set), "test_size": len(test_set)})
    _write(out_dir, "config.txt", cfg.dumps(), manifest)
    model, metrics = train(cfg, train_set, test_set, out_dir)
    manifest.add_output(out_dir / CHECKPOINT_NAME)
    _write(out_dir, "metrics.csv", metrics.to_csv(), manifest)
    manifest.write(out_dir)
    last = metrics.test[-1] if metrics.test else {}
    print(f"trained {run_name(cfg)}: {len(metrics.epochs)} epochs, test nllx0 "
          f"{last.get('nllx0', float('nan')):.3f}, artifacts in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg, _ = _checkpoint_config(args.checkpoint, _overrides(args.set), args.config)
    protocol = eval_protocol(cfg, args.task)
    t, e = cfg.train, cfg.eval
    root = args.data_root or t.data_root
    out_dir = Path(args.out or Path(args.checkpoint).parent / f"eval_{args.task}")
    manifest = RunManifest(f"eval {args.task}", cfg, {"eval": e.seed}, {"checkpoint": str(args.checkpoint)})
    manifest.data["protocol"] = protocol
    if args.dry_run:
        print(json.dumps(protocol, sort_keys=True))
        return EXIT_OK
    name = run_name(cfg)

    if args.task == "mll":
        test_set = _load_split(t.dataset, "test", root, t.test_size, t.seed + 1)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_px = ev.dataset_marginal_ll(model, test_set, e.mll_samples, e.seed)
        _write(out_dir, f"mll_{name}.csv",
               _csv([(i, repr(float(v))) for i, v in enumerate(log_px)], ["index", "log_px"]), manifest)
        summary = -float(np.mean(log_px))
        _write(out_dir, f"mll_summary_{name}.csv",
               _csv([(name, t.dataset, e.mll_samples, f"{summary:.4f}")], ["run", "dataset", "K", "mll"]), manifest)
        print(f"mll ({t.dataset}, K={e.mll_samples}): {summary:.2f}")

    elif args.task == "knn":
        anchors, queries = _ood_sets(cfg, root)
        out_dir.mkdir(parents=True, exist_ok=True)
        acc = ev.knn_classify(_embed(model, anchors, cfg), _embed(model, queries, cfg), e.knn_k)
        row = (t.model, t.variant if t.model == "tvae" else "-", t.z_dim, t.dataset, e.ood_dataset,
               e.knn_k, len(anchors), len(queries), e.seed, f"{acc:.4f}")
        _write(out_dir, f"knn_{name}.csv", _csv([row], ["model", "r_chi", "zdim", "train_dataset", "eval_dataset",
                                                         "k", "anchors", "queries", "seed", "accuracy"]), manifest)
        print(f"knn accuracy ({t.dataset} -> {e.ood_dataset}, k={e.knn_k}): {acc:.4f}")

    elif args.task == "report":
        train_set = _load_split(t.dataset, "train", root, e.knn_anchors, e.seed)
        test_set = _load_split(t.dataset, "test", root, t.test_size, t.seed + 1)
        ood = None if args.skip_ood else _ood_sets(cfg, root)
        out_dir.mkdir(parents=True, exist_ok=True)
        report = ev.metrics_report(model, t.model, test_set, t.aug, K=e.mll_samples, seed=e.seed,
                                   variant=t.variant, in_sample=(train_set, test_set), out_of_sample=ood,
                                   knn_k=e.knn_k, mll_limit=args.mll_limit)
        _write(out_dir, f"report_{name}.csv", report.to_csv(), manifest)
        _write(out_dir, f"report_{name}.txt", report.to_text(), manifest)
        print(report.to_text(), end="")

    elif args.task == "curves":
        anchors, queries = _ood_sets(cfg, root)
        out_dir.mkdir(parents=True, exist_ok=True)
        curve = ev.sample_efficiency_curve(_embed(model, anchors, cfg), _embed(model, queries, cfg),
                                           e.curve_fractions, e.curve_repeats, e.knn_k, e.seed)
        _write(out_dir, f"curves_{name}.csv", curve.to_csv(), manifest)
        png = save_line_plot({name: (curve.fractions, curve.mean, curve.std)}, out_dir / f"curves_{name}.png",
                             "fraction of anchors", "KNN accuracy")
        manifest.add_output(png)
        print("fraction  mean   std")
        for f, m, s in zip(curve.fractions, curve.mean, curve.std):
            print(f"{f:8.3f}  {m:.4f} {s:.4f}")

    manifest.write(out_dir)
    return EXIT_OK


def _require_tvae(model, task):
    if not isinstance(model, TVAE):
        raise UsageError(f"demo {task}: needs a T-VAE checkpoint, got model kind {model.spec.kind!r}")


def cmd_demo(args) -> int:
    model, cfg, _ = _checkpoint_config(args.checkpoint, _overrides(args.set), args.config)
    t, e = cfg.train, cfg.eval
    if args.task in ("transfer", "repeat", "interpolate"):
        _require_tvae(model, args.task)
    baseline = None
    if args.task == "interpolate":
        if args.baseline is None:
            raise UsageError("demo interpolate: --baseline checkpoint required")
        baseline, _, _ = load_checkpoint(args.baseline)
    root = args.data_root or t.data_root
    test_set = _load_split(t.dataset, "test", root, None, 0)
    out_dir = Path(args.out or Path(args.checkpoint).parent / f"demo_{args.task}")
    name = f"{run_name(cfg)}_seed{e.seed}"
    rng = np.random.default_rng(np.random.SeedSequence([e.seed, 5]))
    manifest = RunManifest(f"demo {args.task}", cfg, {"demo": e.seed}, {"checkpoint": str(args.checkpoint)})
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.task == "transfer":
        if len(test_set) < 1 + e.demo_targets:
            raise DatasetError(f"need {1 + e.demo_targets} test images, have {len(test_set)}")
        tri = make_triplets(test_set.tensor(slice(0, 1)), rng, t.aug)
        grid = ev.transfer_transformation(model, (tri.x0[0], tri.x1[0], tri.x2[0]),
                                          test_set.tensor(slice(1, 1 + e.demo_targets)))
        manifest.data["protocol"] = {"source_index": 0, "source_transform": repr(tri.transform[0])}
        manifest.add_output(save_grid(grid.numpy(), out_dir / f"transfer_{name}.png"))

    elif args.task == "repeat":
        x0 = test_set.tensor(slice(0, 1))
        step = PixelTransform("rotate_crop_zoom", args.step_deg, 1)
        pair = apply_transforms(torch.cat([x0, x0]), [step, PixelTransform("rotate_crop_zoom", args.step_deg, -1)])
        res = ev.repeat_transformation(model, x0, pair[:1], pair[1:], e.repeat_steps)
        rows = [("forward", j, *map(repr, z.tolist())) for j, z in enumerate(res.forward.double())]
        rows += [("backward", j, *map(repr, z.tolist())) for j, z in enumerate(res.backward.double())]
        _write(out_dir, f"repeat_latents_{name}.csv",
               _csv(rows, ["direction", "step", *[f"z{i}" for i in range(model.z_dim)]]), manifest)
        manifest.add_output(save_grid(res.grid.numpy(), out_dir / f"repeat_{name}.png"))

    elif args.task == "interpolate":
        n = min(args.count, len(test_set))
        tri = make_triplets(test_set.tensor(slice(0, n)), rng, t.aug)
        show = min(8, n)
        grid = ev.interpolate_midpoint(model, baseline, tri.x0[:show], tri.x1[:show], tri.x2[:show])
        manifest.add_output(save_grid(grid.numpy(), out_dir / f"interpolate_{name}.png"))
        nll_t = ev.midpoint_nll(model, tri.x0, tri.x1, tri.x2)
        nll_b = ev.midpoint_nll(baseline, tri.x0.to(next(baseline.parameters()).dtype), tri.x1, tri.x2)
        rows = [(i, repr(float(a)), repr(float(b))) for i, (a, b) in enumerate(zip(nll_t, nll_b))]
        _write(out_dir, f"interpolate_nll_{name}.csv", _csv(rows, ["index", "tvae_nll", "baseline_nll"]), manifest)
        print(f"midpoint nll over {n} triplets: T-VAE {float(nll_t.mean()):.2f}, baseline {float(nll_b.mean()):.2f}")

    elif args.task == "distances":
        models = {run_name(cfg): model}
        if args.baseline is not None:
            b_model, b_snap, _ = load_checkpoint(args.baseline)
            b_name = run_name(RunConfig.from_dict(b_snap)) if b_snap else "baseline"
            models[b_name] = b_model
        gen = torch.Generator().manual_seed(e.seed)
        rows, series = [], {}
        for label, m in models.items():
            prof = ev.latent_distance_profile(m, test_set.tensor(slice(0, 1))[0, 0], e.distance_angles,
                                              e.distance_samples, gen)
            rows += [(label, repr(a), int(s), repr(d)) for a, s, d in prof]
            by_angle = prof[:, 2].reshape(len(e.distance_angles), e.distance_samples)
            series[label] = (list(e.distance_angles), by_angle.mean(1), by_angle.std(1))
        _write(out_dir, f"distances_{name}.csv", _csv(rows, ["model", "angle", "sample", "distance"]), manifest)
        manifest.add_output(save_line_plot(series, out_dir / f"distances_{name}.png", "rotation (degrees)",
                                           "latent L2 distance"))
    manifest.write(out_dir)
    print(f"wrote {', '.join(manifest.data['outputs'])} to {out_dir}")
    return EXIT_OK


# --------------------------------------------------------------------------
# convert-idx


def _read_source(path: Path, image_key: str, label_key: str):
    if path.is_dir():
        from PIL import Image

        # each directory holding PNGs directly is one class (alphabet/character trees included)
        classes = sorted({f.parent for f in path.rglob("*.png")})
        if not classes or classes == [path]:
            raise DatasetError(f"{path}: expected one sub-directory of PNGs per class")
        images, labels = [], []
        for label, cdir in enumerate(classes):
            for f in sorted(cdir.glob("*.png")):
                images.append(np.asarray(Image.open(f).convert("L"), dtype=np.float32) / 255.0)
                labels.append(label)
        if not images:
            raise DatasetError(f"{path}: no PNG files found")
        sizes = {im.shape for im in images}
        if len(sizes) > 1:
            raise DatasetError(f"{path}: mixed image sizes {sorted(sizes)}")
        return np.stack(images), np.asarray(labels)
    suffix = path.suffix.lower()
    if suffix == ".npz":
        with np.load(path) as z:
            if image_key not in z:
                raise DatasetError(f"{path}: no array named {image_key!r} (have {', '.join(z.files)})")
            return z[image_key], (z[label_key] if label_key in z else None)
    if suffix == ".npy":
        return np.load(path), None
    if suffix == ".mat":
        from scipy.io import loadmat

        mat = loadmat(path, squeeze_me=True, struct_as_record=False)
        if "affNISTdata" in mat:
            # affNIST layout: flattened 40x40 columns plus integer labels
            d = mat["affNISTdata"]
            imgs = np.asarray(d.image, dtype=np.float32).T.reshape(-1, 40, 40)
            return imgs, np.asarray(d.label_int).reshape(-1)
        if image_key in mat:
            return mat[image_key], mat.get(label_key)
        raise DatasetError(f"{path}: no 'affNISTdata' struct or {image_key!r} array")
    raise DatasetError(f"{path}: unsupported source format {suffix or '(none)'}")


def cmd_convert(args) -> int:
    src = Path(args.source)
    if not src.exists():
        raise DatasetError(f"{src}: no such file or directory")
    images, labels = _read_source(src, args.image_key, args.label_key)
    images = np.asarray(images)
    if images.ndim == 2:
        side = int(round(np.sqrt(images.shape[1])))
        images = images.reshape(len(images), side, side)
    if images.ndim != 3:
        raise DatasetError(f"{src}: expected [N, H, W] images, got shape {images.shape}")
    scaled = images.astype(np.float32)
    if images.dtype == np.uint8 or scaled.max(initial=0) > 1.0:
        scaled = scaled / 255.0
    if args.invert:
        scaled = 1.0 - scaled
    if args.resize:
        scaled = resize_images(scaled)
    out = Path(args.root) / args.name
    out.mkdir(parents=True, exist_ok=True)
    prefix = "train" if args.split == "train" else "t10k"
    save_idx(out / f"{prefix}-images-idx3-ubyte", to_uint8(scaled))
    if labels is not None:
        save_idx(out / f"{prefix}-labels-idx1-ubyte", np.asarray(labels).astype(
            np.uint8 if np.max(labels, initial=0) < 256 else np.int32))
    print(f"wrote {len(images)} images to {out} ({prefix})")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tvae", description="Transformation-aware VAE experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=True):
        if checkpoint:
            sp.add_argument("checkpoint", help="checkpoint file written by 'tvae train'")
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--data-root", help="dataset root (default: $TVAE_DATA_ROOT)")
        sp.add_argument("--out", help="output directory")

    tr = sub.add_parser("train", help="train a model from a config")
    common(tr, checkpoint=False)
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("task", choices=("mll", "knn", "report", "curves"))
    common(e)
    e.add_argument("--dry-run", action="store_true", help="print the resolved protocol and exit")
    e.add_argument("--skip-ood", action="store_true", help="report: leave knn_out empty")
    e.add_argument("--mll-limit", type=int, help="report: cap images used for mll")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("demo", help="render qualitative figures")
    d.add_argument("task", choices=("transfer", "repeat", "interpolate", "distances"))
    common(d)
    d.add_argument("--baseline", help="baseline checkpoint (interpolate, distances)")
    d.add_argument("--step-deg", type=float, default=10.0, help="repeat: rotation of the inferred pair")
    d.add_argument("--count", type=int, default=100, help="interpolate: triplets scored")
    d.set_defaults(func=cmd_demo)

    c = sub.add_parser("convert-idx", help="convert .npz/.npy/.mat or a PNG class tree to IDX files")
    c.add_argument("source")
    c.add_argument("--name", required=True, choices=DATASET_NAMES)
    c.add_argument("--split", required=True, choices=("train", "test"))
    c.add_argument("--root", required=True, help="dataset root to write into")
    c.add_argument("--image-key", default="images")
    c.add_argument("--label-key", default="labels")
    c.add_argument("--resize", action="store_true", help="resize to 28x28")
    c.add_argument("--invert", action="store_true", help="flip intensities (dark strokes on white)")
    c.set_defaults(func=cmd_convert)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print("configuration error:", file=sys.stderr)
        for line in err.errors:
            print(f"  {line}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, CheckpointError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
