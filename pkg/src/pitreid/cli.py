"""Command-line entry points: generate, train, eval, ablate, attention."""
import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, PiTConfig
from .data import DatasetError, ManifestDataset, SyntheticSpec, generate, read_frame
from .estimator import PiTReID
from .retrieval import RetrievalError, evaluate, repeated_trials


class CLIError(Exception):
    pass


def _echo(title, text):
    print(f"# {title}")
    sys.stdout.write(text)
    sys.stdout.flush()


def _parse_overrides(pairs):
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise CLIError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _load_config(path, overrides=None, **flags):
    values = {}
    if path:
        text = Path(path).read_text(encoding="utf-8")
        values.update(PiTConfig.from_text(text).to_dict())
    values.update(_parse_overrides(overrides))
    values.update({k: v for k, v in flags.items() if v is not None})
    return PiTConfig.from_dict(values)


def _videos(dataset, records):
    frames = [dataset.read_frames(r) for r in records]
    ids = np.array([r.pedestrian_id for r in records])
    cams = np.array([r.camera_id for r in records])
    vids = np.array([r.video_id for r in records])
    return frames, ids, cams, vids


def eval_split(dataset):
    """(query records, gallery records): query/gallery if present, else train vs train."""
    query, gallery = dataset.records("query"), dataset.records("gallery")
    if query and gallery:
        return query, gallery
    train = dataset.records("train")
    if not train:
        raise DatasetError("dataset has neither query/gallery nor train records")
    return train, train


def evaluate_estimator(est, dataset):
    query, gallery = eval_split(dataset)
    qf, qi, qc, _ = _videos(dataset, query)
    gf, gi, gc, gv = _videos(dataset, gallery)
    return est.retrieval_report(qf, qi, qc, gf, gi, gc, gallery_vids=gv)


def fit_on_dataset(config, dataset, epoch_callback=None, step_callback=None):
    train = dataset.records("train")
    if not train:
        raise DatasetError("dataset has no train records")
    frames, ids, cams, _ = _videos(dataset, train)
    if cams.max() >= config.num_cameras:
        raise ConfigError(f"dataset uses camera {cams.max()} but num_cameras = {config.num_cameras}")
    est = PiTReID.from_config(config)
    return est.fit(frames, ids, cameras=cams, epoch_callback=epoch_callback, step_callback=step_callback)


# commands ---------------------------------------------------------------------

def cmd_generate(args):
    values = {}
    if args.spec:
        for line in Path(args.spec).read_text(encoding="utf-8").splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                key, value = (s.strip() for s in line.split("=", 1))
                values[key] = value
    for f in fields(SyntheticSpec):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    known = {f.name: f for f in fields(SyntheticSpec)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise CLIError(f"unknown synthetic spec keys: {', '.join(unknown)}")
    typed = {k: known[k].type(v) if isinstance(v, str) else v for k, v in values.items()}
    spec = SyntheticSpec(**typed)
    _echo("synthetic spec", "".join(f"{f.name} = {getattr(spec, f.name)}\n" for f in fields(spec)))
    records = generate(spec, args.out)
    n_frames = sum(len(r.frames) for r in records)
    print(f"wrote {len(records)} videos, {n_frames} frames to {args.out}")


def cmd_train(args):
    config = _load_config(args.config, args.set, epochs=args.epochs, seed=args.seed)
    _echo("config", config.to_text())
    dataset = ManifestDataset.load(args.data)
    out = Path(args.out)
    log_path = out.with_name(out.name + ".log")
    log_fh = open(log_path, "w", encoding="utf-8")
    log_fh.write("epoch step lr loss cls tri\n")

    def on_step(epoch, step, lr, loss, cls, tri):
        log_fh.write(f"{epoch} {step} {lr!r} {loss!r} {cls!r} {tri!r}\n")

    def on_epoch(est, epoch, metrics):
        if config.checkpoint_every and epoch % config.checkpoint_every == 0 and epoch < config.epochs:
            est.save(out.with_name(f"{out.name}.epoch{epoch}"))

    try:
        est = fit_on_dataset(config, dataset, on_epoch, on_step)
    finally:
        log_fh.close()
    report = evaluate_estimator(est, dataset)
    metrics = report.summary()
    est.save(out, extra={"metrics": metrics})
    Path(str(out) + ".report").write_text(report.to_text(config.to_dict()), encoding="utf-8")
    print("final " + " ".join(f"{k}={v!r}" for k, v in metrics.items()))


def _trial_split(ids, cams, test_ids):
    """Query: each test identity's videos on its lowest camera; gallery: the rest."""
    query, gallery = [], []
    for pid in test_ids:
        idx = np.flatnonzero(ids == pid)
        first_cam = cams[idx].min()
        query.extend(idx[cams[idx] == first_cam].tolist())
        gallery.extend(idx[cams[idx] != first_cam].tolist())
    return np.asarray(query), np.asarray(gallery)


def cmd_eval(args):
    est = PiTReID.load(args.checkpoint)
    config = est.get_config()
    _echo("config", config.to_text())
    dataset = ManifestDataset.load(args.data)
    if args.trials:
        records = dataset.records()
        frames, ids, cams, vids = _videos(dataset, records)

        def run_trial(train_ids, test_ids, trial_seed):
            train_idx = np.flatnonzero(np.isin(ids, train_ids))
            trial = PiTReID.from_config(config.replace(seed=trial_seed))
            trial.fit([frames[i] for i in train_idx], ids[train_idx], cameras=cams[train_idx])
            q, g = _trial_split(ids, cams, test_ids)
            return trial.retrieval_report([frames[i] for i in q], ids[q], cams[q],
                                          [frames[i] for i in g], ids[g], cams[g], gallery_vids=vids[g])

        report = repeated_trials(ids, args.trials, config.seed, run_trial)
    else:
        report = evaluate_estimator(est, dataset)
    Path(args.out).write_text(report.to_text(config.to_dict()), encoding="utf-8")
    print("metrics " + " ".join(f"{k}={v!r}" for k, v in report.summary().items()))
    return report


def read_grid(path):
    """Grid file: one division string per line, optional ``seeds = a,b,c``."""
    divisions, seeds = [], None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("seeds"):
            seeds = [int(s) for s in line.split("=", 1)[1].split(",")]
        else:
            divisions.append(line)
    if not divisions:
        raise CLIError(f"{path}: no division strings")
    return divisions, seeds or [0]


def run_ablation(base, dataset, divisions, seeds):
    rows = []
    for division in divisions:
        r1, maps = [], []
        for seed in seeds:
            config = base.replace(division=division, seed=seed)
            est = fit_on_dataset(config, dataset)
            summary = evaluate_estimator(est, dataset).summary()
            r1.append(summary["rank1"])
            maps.append(summary["mAP"])
        entries = config.division_spec().num_entries
        rows.append((division, entries, float(np.mean(r1)), float(np.mean(maps))))
    return rows


def cmd_ablate(args):
    base = _load_config(args.config, args.set)
    divisions, seeds = read_grid(args.grid)
    # validate every division before spending time on training
    for division in divisions:
        base.replace(division=division)
    _echo("config", base.to_text())
    dataset = ManifestDataset.load(args.data)
    rows = run_ablation(base, dataset, divisions, seeds)
    lines = ["division\tentries\trank1\tmAP"]
    lines += [f"{d}\t{e}\t{r!r}\t{m!r}" for d, e, r, m in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def attention_maps(est, image, camera_id=0):
    """Per-branch class-token attention on the token grid, plus image products.

    Attention is read from the last encoder layer of each branch head,
    averaged over attention heads, restricted to patch tokens and
    renormalised to sum to one over the branch's part.
    """
    model = est.model_
    h, w = model.grid_hw
    cfg = model.embed_config
    with T.no_grad():
        _, attns = model.frame_pyramid(image[None], [camera_id], return_attention=True)
    maps = {}
    labels = iter(model.labels)
    for layer, idx, attn in attns:
        a = attn.data[0].mean(axis=1)  # [D, n+1, n+1]
        for part in range(idx.shape[0]):
            row = a[part, 0, 1:]
            grid = np.zeros(h * w)
            grid[idx[part]] = row / row.sum()
            maps[next(labels)] = grid.reshape(h, w)
    # pixel (y, x) takes the value of the last patch starting at or before it
    rows = np.minimum(np.arange(cfg.image_height) // cfg.stride, h - 1)
    cols = np.minimum(np.arange(cfg.image_width) // cfg.stride, w - 1)
    products = {}
    for label, m in maps.items():
        up = m[rows[:, None], cols[None, :]]
        products[label] = image * (up / up.max())[None]
    return maps, products


def cmd_attention(args):
    est = PiTReID.load(args.checkpoint)
    _echo("config", est.get_config().to_text())
    image = read_frame(args.image)
    cfg = est.model_.embed_config
    if image.shape != (cfg.channels_in, cfg.image_height, cfg.image_width):
        raise CLIError(f"image shape {image.shape} does not match the model input "
                       f"({cfg.channels_in}, {cfg.image_height}, {cfg.image_width})")
    maps, products = attention_maps(est, image, args.camera)
    arrays = {"labels": np.array(list(maps))}
    arrays.update({f"map/{k}": v for k, v in maps.items()})
    arrays.update({f"product/{k}": v for k, v in products.items()})
    with open(args.out, "wb") as fh:
        np.savez(fh, **arrays)
    print(f"wrote {len(maps)} attention maps of {est.model_.grid_hw[0]}x{est.model_.grid_hw[1]} to {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(prog="pitreid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--spec", help="key = value file of synthetic dataset settings")
    p.add_argument("--out", required=True, help="output directory")
    for f in fields(SyntheticSpec):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=f.type, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config", help="key = value config file (missing keys take defaults)")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--trials", type=int, default=0,
                   help="retrain on random identity halves this many times and average")
    p.add_argument("--out", required=True, help="report file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate a grid of division strings")
    p.add_argument("--grid", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("attention", help="export per-branch attention maps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PPM/PGM frame")
    p.add_argument("--camera", type=int, default=0)
    p.add_argument("--out", required=True, help="output .npz")
    p.set_defaults(func=cmd_attention)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CLIError, ConfigError, DatasetError, RetrievalError, ValueError, OSError) as exc:
        print(f"pitreid {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
