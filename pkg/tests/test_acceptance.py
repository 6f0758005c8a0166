"""End-to-end acceptance checks, one per criterion.

Each test records one ``[ACCEPT] <criterion>: PASS|FAIL (...)`` line, shown
in the "acceptance criteria" section at the end of the pytest run, and
asserts the criterion at its stated tolerance and time budget.
"""
import time

import numpy as np
import pytest

from _helpers import ACCEPTANCE_LINES, gradient_setup
from _oracle import brute_force
from pitreid import PiTReID, tensor as T
from pitreid.cli import main
from pitreid.config import PiTConfig, toy_config
from pitreid.data import SyntheticSpec, synthesize
from pitreid.gradcheck import numerical_grad, relative_error
from pitreid.model import PiTModel
from pitreid.pyramid import DivisionSpec, _gather, rearrange
from pitreid.retrieval import RetrievalError, evaluate
from pitreid.tensor import Tensor
from pitreid.training import classification_loss, triplet_loss

ABLATION_GRID = ["105x2", "70x3", "42x5", "35x6", "30x7",
                 "2x105", "3x70", "5x42", "6x35", "7x30", "6p", "14p", "15p"]


def report(name, ok, detail):
    line = f"[ACCEPT] {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, f"{name}: {detail}"


def overfit_data():
    samples = synthesize(SyntheticSpec(num_ids=4, videos_per_id=4, frames_per_video=8,
                                       num_cameras=2, noise=0.05, seed=0))
    frames = np.stack([s[4] for s in samples])
    return frames, np.array([s[1] for s in samples]), np.array([s[2] for s in samples])


def train_and_score(config, data):
    frames, ids, cams = data
    est = PiTReID.from_config(config).fit(frames, ids, cameras=cams)
    feats = est.transform_pyramid(frames, cams)
    return est, evaluate(feats, ids, cams, feats, ids, cams)


def test_paper_scale_results():
    line = ("[ACCEPT] paper-scale benchmark numbers: NOT REPRODUCED (needs pretrained ViT-B16 "
            "weights and the MARS / iLIDS-VID benchmarks; replaced by the property checks)")
    ACCEPTANCE_LINES.append(line)
    print(line)
    pytest.skip("paper-scale benchmark numbers are out of scope")


def test_shape_criterion():
    start = time.perf_counter()
    config = PiTConfig()
    model = PiTModel(config, num_classes=2)
    image = np.random.default_rng(0).uniform(0, 1, (1, 3, 256, 128))
    with T.no_grad():
        pyramid = model.frame_pyramid(image, [0])
    elapsed = time.perf_counter() - start
    ok = (pyramid.features.shape == (1, 12, 768) and len(pyramid.labels) == 12
          and model.grid_hw == (21, 10) and elapsed < 10)
    report("shape", ok, f"entries={len(pyramid.labels)} dim={pyramid.features.shape[-1]} "
           f"grid={model.grid_hw[0]}x{model.grid_hw[1]} time={elapsed:.2f}s < 10s")


def test_partition_suite():
    start = time.perf_counter()
    grid = rearrange(Tensor(np.arange(210, dtype=float)[:, None]), 21, 10)
    failures = []
    for text in ["1x210"] + ABLATION_GRID:
        for layer, idx in DivisionSpec.parse(text, 210).resolve(21, 10):
            parts = _gather(grid, idx).data[..., 0].astype(int)
            sizes_ok = parts.shape == (layer.parts, 210 // layer.parts)
            exhaustive = sorted(parts.ravel().tolist()) == list(range(210))
            if not (sizes_ok and exhaustive):
                failures.append(text)
    elapsed = time.perf_counter() - start
    report("division partition", not failures and elapsed < 1,
           f"{len(ABLATION_GRID) + 1} divisions, failures={failures}, time={elapsed:.3f}s < 1s")


def test_gradient_criterion():
    start = time.perf_counter()
    model, loss = gradient_setup(seed=0)
    loss().backward()
    worst, worst_name, count = 0.0, None, 0
    for name, p in model.named_parameters():
        err = relative_error(p.grad, numerical_grad(loss, p))
        count += p.data.size
        if err > worst:
            worst, worst_name = err, name
    elapsed = time.perf_counter() - start
    report("gradient", worst < 1e-4 and elapsed < 120,
           f"{count} parameter entries, worst rel. err {worst:.2e} ({worst_name}) < 1e-4, "
           f"time={elapsed:.1f}s < 120s")


def test_loss_values():
    labels = np.array([0, 0, 1, 1, 2, 2])
    tri = triplet_loss(Tensor(np.full((4, 6, 8), 0.3)), labels).item()
    per_branch = [triplet_loss(Tensor(np.full((1, 6, 8), 0.3)), labels).item() for _ in range(4)]
    logits = np.full((4, 6, 3), -1e4)
    logits[:, np.arange(6), labels] = 1e4
    cls = classification_loss(Tensor(logits), labels).item()
    ln2 = 0.69314718055994530942
    ok = (abs(tri - ln2) <= 1e-12 and all(abs(v - ln2) <= 1e-12 for v in per_branch)
          and abs(cls) <= 1e-12)
    report("loss values", ok, f"triplet={tri!r} (ln2 +- 1e-12), classification={cls!r} (0 +- 1e-12)")


def test_metric_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = compared = 0
    for t in range(1000):
        n_q, n_g = int(rng.integers(1, 7)), int(rng.integers(1, 11))
        q_ids, g_ids = rng.integers(0, 3, n_q), rng.integers(0, 3, n_g)
        q_cams, g_cams = rng.integers(0, 2, n_q), rng.integers(0, 2, n_g)
        dist = rng.integers(0, 4, (n_q, n_g)).astype(float) if t % 2 else rng.uniform(0, 1, (n_q, n_g))
        vids = rng.permutation(50)[:n_g]
        ref = brute_force(dist, q_ids, q_cams, g_ids, g_cams, vids)
        try:
            got = evaluate(None, q_ids, q_cams, None, g_ids, g_cams, gallery_vids=vids, distmat=dist)
        except RetrievalError:
            mismatches += ref is not None
            continue
        compared += 1
        cmc, m_ap, valid = ref
        if (got.cmc.tolist() != [float(c) for c in cmc] or got.mAP != float(m_ap)
                or got.num_valid_queries != valid):
            mismatches += 1
    hand = evaluate(None, [0], [0], None, [0, 1, 0], [1, 1, 1], distmat=np.array([[1.0, 2.0, 3.0]]))
    elapsed = time.perf_counter() - start
    report("metric oracle", mismatches == 0 and hand.mAP == 5 / 6 and elapsed < 30,
           f"1000 instances ({compared} with valid queries), mismatches={mismatches}, "
           f"hand AP={hand.mAP!r} == 5/6, time={elapsed:.1f}s < 30s")


def test_overfit():
    start = time.perf_counter()
    data = overfit_data()
    config = toy_config()
    est, first = train_and_score(config, data)
    steps = est.optim_state_.step_count
    _, second = train_and_score(config, data)
    elapsed = time.perf_counter() - start
    deterministic = first.mAP == second.mAP and np.array_equal(first.cmc, second.cmc)
    ok = (steps == 200 and first.rank(1) >= 0.95 and first.mAP >= 0.90 and deterministic
          and elapsed < 600)
    report("overfit", ok, f"{steps} steps, rank1={first.rank(1):.4f} >= 0.95, mAP={first.mAP:.4f} >= 0.90, "
           f"deterministic={deterministic}, time={elapsed:.0f}s for two runs < 600s")


def test_ablation_direction():
    data = overfit_data()
    scores = {}
    for division in ("1x6_3x2_3x2h_6p", "1x6"):
        scores[division] = [train_and_score(toy_config(division=division, seed=s), data)[1].mAP
                            for s in (0, 1, 2)]
    pyramid, baseline = np.mean(scores["1x6_3x2_3x2h_6p"]), np.mean(scores["1x6"])
    report("ablation direction", pyramid >= baseline,
           f"4-layer mAP {pyramid:.4f} >= global-only {baseline:.4f} over seeds 0,1,2")


def test_determinism(tmp_path):
    data_dir = tmp_path / "data"
    assert main(["generate", "--out", str(data_dir), "--num-ids", "4", "--videos-per-id", "4",
                 "--frames-per-video", "8", "--num-cameras", "2"]) == 0
    args = ["--data", str(data_dir), "--config", "configs/toy.cfg", "--epochs", "20",
            "--set", "checkpoint_every=10"]
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    assert main(["train", *args, "--out", str(a)]) == 0
    assert main(["train", *args, "--out", str(b)]) == 0
    same = a.read_bytes() == b.read_bytes() and \
        (tmp_path / "a.ckpt.epoch10").read_bytes() == (tmp_path / "b.ckpt.epoch10").read_bytes()
    assert main(["eval", "--checkpoint", str(a), "--data", str(data_dir), "--out", str(tmp_path / "r")]) == 0
    reproduced = (tmp_path / "r").read_text() == (tmp_path / "a.ckpt.report").read_text()
    report("determinism", same and reproduced,
           f"byte-identical checkpoints={same}, eval reproduces logged metrics={reproduced}")
