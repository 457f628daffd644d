"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Criterion 11 is a soft, ungated experiment that takes tens of minutes on a
CPU; set ``MOEXDA_RUN_SLOW=1`` to run it.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import oracles
from moexda import cli
from moexda.bias import BackgroundReader, MotionReader, evaluate, vit_predictor
from moexda.data import SyntheticSceneSpec, generate_dataset, load_split, read_metadata
from moexda.edges import EDGE_STATS, compute_corpus_stats, sobel_edges
from moexda.gradcheck import all_moex_configs, check_model, check_moexda, config_name
from moexda.moments import Mode, MoExDAConfig, compute_moments, exchange_moments
from moexda.training import LossWeights, TrainConfig, stream_losses, total_loss, train
from moexda.vit import TwoStreamViT, ViTConfig

RUN_SLOW = os.environ.get("MOEXDA_RUN_SLOW") == "1"


@pytest.fixture
def verdict(capsys):
    def emit(number, title, passed, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {number:>2}] {'PASS' if passed else 'FAIL'} {title}: {detail}")
        assert passed, detail
    return emit


def test_01_moment_transfer(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_mean = worst_std = 0.0
    for _ in range(100):
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 5)),
                 int(rng.choice([5, 10, 17])), int(rng.choice([8, 16, 32])))
        h_src = torch.from_numpy(rng.standard_normal(shape))
        h_tgt = torch.from_numpy(rng.standard_normal(shape) * rng.uniform(0.5, 3) + rng.uniform(-2, 2))
        for mode in Mode:
            m_src, m_tgt = compute_moments(h_src, mode), compute_moments(h_tgt, mode)
            m_out = compute_moments(exchange_moments(h_src, m_src, m_tgt), mode)
            worst_mean = max(worst_mean, float((m_out.mean - m_tgt.mean).abs().max()))
            worst_std = max(worst_std, float(((m_out.std - m_tgt.std).abs() / m_tgt.std).max()))
    elapsed = time.perf_counter() - start
    verdict(1, "moment transfer", worst_mean <= 1e-5 and worst_std <= 1e-3 and elapsed < 10,
            f"max mean err {worst_mean:.2e} (tol 1e-5), max std rel err {worst_std:.2e} (tol 1e-3), {elapsed:.1f}s")


def test_02_exchange_oracle(verdict):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        src, tgt = rng.standard_normal((1, 1, 4, 4)), rng.standard_normal((1, 1, 4, 4)) * 2 + 1
        for mode in ("pono", "in"):
            expected = oracles.exchange(src, oracles.moments(src, mode, 1e-5), oracles.moments(tgt, mode, 1e-5), mode)
            got = exchange_moments(torch.from_numpy(src), compute_moments(torch.from_numpy(src), mode),
                                   compute_moments(torch.from_numpy(tgt), mode)).numpy()
            worst = max(worst, float(np.abs(got - expected).max()))
    verdict(2, "exchange matches loop oracle", worst <= 1e-9, f"max abs err {worst:.2e} (tol 1e-9)")


def test_03_gradient_checks(verdict):
    start = time.perf_counter()
    module = [check_moexda(cfg) for cfg in all_moex_configs()]
    sampled = []
    for cfg in all_moex_configs(layers=(1, 2)):
        sampled += check_model(cfg, max_coords=8)
    full_configs = [
        MoExDAConfig(mode="pono", direction="edge_to_rgb", stop_gradient=False, layers=[1, 2]),
        MoExDAConfig(mode="in", direction="rgb_to_edge", stop_gradient=True, layers=[1, 2]),
        MoExDAConfig(mode="pono", direction="bidirection", stop_gradient=True, layers=[1, 2]),
    ]
    full = []
    for cfg in full_configs:
        full += check_model(cfg)
    elapsed = time.perf_counter() - start
    worst_module = max(r.rel_error for r in module)
    worst_model = max(r.rel_error for r in sampled + full)
    passed = all(r.passed for r in module + sampled + full) and elapsed < 300
    verdict(3, "finite-difference gradient checks", passed,
            f"module max rel err {worst_module:.2e} over {len(module)} configs (tol 1e-4); "
            f"model max rel err {worst_model:.2e} over 12 sampled + "
            f"{', '.join(config_name(c) for c in full_configs)} in full (tol 1e-3); {elapsed:.0f}s")


def _max_grad(model, prefix, moex, weights):
    torch.manual_seed(0)
    clip = torch.rand(2, 2, 3, 16, 16)
    model.zero_grad()
    out_rgb, out_edge = model(clip)
    total_loss(out_rgb.logits, out_edge.logits, torch.tensor([0, 2]), weights).backward()
    return max(float(p.grad.abs().max()) if p.grad is not None else 0.0
               for n, p in model.named_parameters() if n.startswith(prefix))


def test_04_stop_gradient_blocking(verdict):
    cfg = ViTConfig(image_size=16, patch_size=8, embed_dim=16, num_layers=3, num_heads=2)
    cases = [
        ("edge_to_rgb", "edge.", LossWeights(alpha_rgb=0.5, alpha_edge=0.0)),
        ("rgb_to_edge", "rgb.", LossWeights(alpha_rgb=0.0, alpha_edge=1.0)),
    ]
    details, passed = [], True
    for direction, prefix, weights in cases:
        moex = MoExDAConfig(direction=direction, stop_gradient=True, layers=[1, 2, 3])
        torch.manual_seed(1)
        g = _max_grad(TwoStreamViT(cfg, moex), prefix, moex, weights)
        passed &= g == 0.0
        details.append(f"{direction}: max |grad| over {prefix}* = {g:g}")
    verdict(4, "stop-gradient blocking", passed, "; ".join(details))


def test_05_sobel_oracle(verdict):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        img = rng.random((9, 9))
        worst = max(worst, float(np.abs(sobel_edges(torch.from_numpy(img)).numpy() - oracles.sobel(img)).max()))
    verdict(5, "Sobel matches loop oracle", worst <= 1e-12, f"max abs err {worst:.2e} on 50 9x9 images (tol 1e-12)")


def test_06_stats_pipeline(verdict):
    rng = np.random.default_rng(6)
    videos = [rng.random((1, 3, 3, 7, 6)), rng.random((1, 2, 3, 7, 6))]
    edges = [oracles.sobel(oracles.gray(f)).ravel() for v in videos for f in v[0]]
    mean, std = oracles.two_pass_stats(np.concatenate(edges))
    got = compute_corpus_stats([torch.from_numpy(v) for v in videos])
    rel = max(abs(got.mean[0] - mean) / mean, abs(got.std[0] - std) / std)
    const = compute_corpus_stats([torch.full((1, 2, 3, 6, 6), 0.3)])
    shipped = (EDGE_STATS.mean, EDGE_STATS.std) == ((0.026,), (0.037,))
    verdict(6, "edge statistics", rel <= 1e-9 and const.mean == (0.0,) and const.std == (0.0,) and shipped,
            f"rel err vs two-pass {rel:.2e} (tol 1e-9); constant corpus {const.mean + const.std}; "
            f"shipped edge stats {EDGE_STATS.mean + EDGE_STATS.std}")


def test_07_moment_shapes(verdict):
    rng = np.random.default_rng(8)
    ok = True
    for _ in range(10):
        b, t, n1, c = (int(x) for x in rng.integers(1, 9, size=4))
        n1 += 1
        h = torch.randn(b, t, n1, c)
        ok &= compute_moments(h, Mode.PONO).mean.shape == (b, t, n1)
        ok &= compute_moments(h, Mode.PONO).std.shape == (b, t, n1)
        ok &= compute_moments(h, Mode.IN).mean.shape == (b, t, c)
        ok &= compute_moments(h, Mode.IN).std.shape == (b, t, c)
    verdict(7, "moment shapes", ok, "PONO -> B x T x (N+1), IN -> B x T x C on 10 random shapes")


def test_08_loss_contract(verdict):
    g = torch.Generator().manual_seed(9)
    lr, le = torch.randn(5, 4, generator=g, dtype=torch.float64), torch.randn(5, 4, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 3, 1, 1, 2])
    l_rgb, l_edge = stream_losses(lr, le, y)
    w = LossWeights()
    err = abs(total_loss(lr, le, y).item() - (1.0 * l_edge.item() + 0.5 * l_rgb.item()))
    verdict(8, "weighted loss", err <= 1e-12 and (w.alpha_edge, w.alpha_rgb) == (1.0, 0.5),
            f"abs err {err:.1e} (tol 1e-12); defaults alpha_edge={w.alpha_edge}, alpha_rgb={w.alpha_rgb}")


def test_09_decoupling(verdict):
    torch.manual_seed(10)
    model = TwoStreamViT(ViTConfig(image_size=16, patch_size=8, embed_dim=32, num_layers=4, num_heads=4)).eval()
    worst = 0.0
    for seed in range(5):
        clip = torch.rand(2, 3, 3, 16, 16, generator=torch.Generator().manual_seed(seed))
        with torch.no_grad():
            out_rgb, out_edge = model(clip)
            x_rgb, x_edge = model.prepare_inputs(clip)
            worst = max(worst, float((out_rgb.logits - model.rgb(x_rgb).logits).abs().max()),
                        float((out_edge.logits - model.edge(x_edge).logits).abs().max()))
    verdict(9, "decoupled streams", worst <= 1e-6, f"max abs logit diff {worst:.2e} (tol 1e-6)")


def test_10_harness_discrimination(verdict, tmp_path):
    start = time.perf_counter()
    base = dict(num_classes=4, num_videos=200)
    generate_dataset(SyntheticSceneSpec(**{**base, "num_videos": 40}, rho=1.0, seed=100), tmp_path / "train")
    generate_dataset(SyntheticSceneSpec(**base, rho=1.0, seed=101), tmp_path / "test_rho1")
    generate_dataset(SyntheticSceneSpec(**base, rho=0.0, seed=102), tmp_path / "test_rho0")
    meta = read_metadata(tmp_path / "train")
    clips, labels, _ = load_split(tmp_path / "train", 16)
    background = BackgroundReader(meta["texture_palette"], 4).fit(clips, labels)
    motion = MotionReader(meta["class_patterns"])

    bg = evaluate(background, tmp_path / "test_rho1").streams["background"]
    mo1 = evaluate(motion, tmp_path / "test_rho1").streams["motion"]
    mo0 = evaluate(motion, tmp_path / "test_rho0").streams["motion"]
    elapsed = time.perf_counter() - start
    passed = (bg.bor >= bg.hor + 0.3 and mo0.hor >= mo0.bor + 0.3 and mo1.hor >= mo1.bor + 0.3
              and elapsed < 120)
    verdict(10, "bias harness discrimination", passed,
            f"background reader on rho=1 set BOR {bg.bor:.3f} HOR {bg.hor:.3f}; "
            f"motion reader BOR {mo0.bor:.3f} HOR {mo0.hor:.3f} (rho=0), "
            f"BOR {mo1.bor:.3f} HOR {mo1.hor:.3f} (rho=1); {elapsed:.0f}s")


def directional_experiment(workdir, seeds=(0, 1, 2), epochs=100, rho_test=0.0, layers=(1, 2, 3, 4)):
    """Baseline (no exchange) vs exchange run; returns per-seed BORs.

    With no exchange layer the RGB stream never sees the edge stream, so the
    baseline run's RGB stream is an RGB-only model.
    """
    workdir = Path(workdir)
    vit = ViTConfig(embed_dim=64, num_layers=4, num_heads=4)
    out = []
    for seed in seeds:
        train_root, test_root = workdir / f"train{seed}", workdir / f"test{seed}"
        generate_dataset(SyntheticSceneSpec(num_videos=64, rho=0.9, seed=1000 + seed), train_root)
        generate_dataset(SyntheticSceneSpec(num_videos=64, rho=rho_test, seed=2000 + seed), test_root)
        data = load_split(train_root, 16)[:2]
        row = {"seed": seed}
        for name, moex in (("baseline", MoExDAConfig()),
                           ("moexda", MoExDAConfig(mode="pono", direction="edge_to_rgb", layers=list(layers)))):
            torch.manual_seed(seed)
            model = TwoStreamViT(vit, moex)
            train(model, data, TrainConfig(epochs=epochs, seed=seed, checkpoint_path="", metrics_path=""))
            rep = evaluate(vit_predictor(model), test_root)
            row[name] = {s: m.to_dict() for s, m in rep.streams.items()}
        row["edge_bor"] = row["moexda"]["edge"]["bor"]
        row["rgb_only_bor"] = row["baseline"]["rgb"]["bor"]
        out.append(row)
    return out


@pytest.mark.slow
def test_11_directional_experiment(verdict, tmp_path, capsys):
    if not RUN_SLOW:
        with capsys.disabled():
            print("\n[criterion 11] SKIP soft experiment (set MOEXDA_RUN_SLOW=1 to run)")
        pytest.skip("soft criterion; set MOEXDA_RUN_SLOW=1")
    start = time.perf_counter()
    rows = directional_experiment(tmp_path)
    elapsed = time.perf_counter() - start
    wins = sum(r["edge_bor"] < r["rgb_only_bor"] for r in rows)
    detail = "; ".join(f"seed {r['seed']}: edge BOR {r['edge_bor']:.3f} vs RGB-only BOR {r['rgb_only_bor']:.3f}"
                       for r in rows)
    with capsys.disabled():
        print(f"\n[criterion 11] {'PASS' if wins >= 2 and elapsed < 3600 else 'FAIL'} (soft, not gated) "
              f"directional experiment: {detail}; {wins}/3 seeds; {elapsed:.0f}s")
        print(json.dumps(rows))


def test_12_determinism(verdict, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("MOEXDA_SEED", raising=False)
    Path("c.json").write_text(json.dumps({
        "vit": {"image_size": 16, "patch_size": 8, "embed_dim": 16, "num_layers": 2, "num_heads": 2},
        "moex": {"layers": [1], "stop_gradient": True},
        "train": {"epochs": 3, "batch_size": 4, "frames_per_clip": 4, "lr": 1e-3, "seed": 4},
        "data": {"image_size": 16, "frames_per_video": 6, "actor_size": [3, 5], "num_train": 12, "num_test": 4},
    }))
    assert cli.main(["gen-data", "--config", "c.json"]) == 0
    blobs = []
    for name in ("a", "b"):
        assert cli.main(["train", "--config", "c.json", "--set", f"train.metrics_path={name}.jsonl"]) == 0
        blobs.append(Path(f"{name}.jsonl").read_bytes())
    verdict(12, "training determinism", blobs[0] == blobs[1] and len(blobs[0]) > 0,
            f"metrics files {'identical' if blobs[0] == blobs[1] else 'differ'} ({len(blobs[0])} bytes)")
