"""Acceptance suite: one test per headline criterion.

Every test prints a single ``[PASS]`` or ``[FAIL]`` line. The training
benchmark (criteria 10 and 11) is shared through session fixtures and takes
roughly an hour on one CPU core.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from gvsynergy import cli
from gvsynergy.detection import Box3D, eval_map, rotated_iou_3d
from gvsynergy.diffcore import Graph
from gvsynergy.gaussianfield import SH_C0, GaussianSet, render
from gvsynergy.gaussianfield.render import composite, project_footprints, render_camera, sh_basis, sh_colors
from gvsynergy.geometry import BehindCamera, Camera, in_bounds, project_point, unproject_pixel
from gvsynergy.lifting import VoxelGridSpec, bilinear_sample, lift_features, visible_mask
from gvsynergy.pipeline import (TrainState, benchmark_config, benchmark_scenes, default_grid, forward_step,
                                run_benchmark)
from gvsynergy.verify import BLOCK_TOL, PRIMITIVE_TOL, run_gradient_suite
from gvsynergy.voxelfusion import (adaptive_weights, apply_occupancy, encode_gaussian_volume,
                                   gaussian_encoder_shapes, voxelize, weight_net_shapes)

SEEDS = range(5)


@pytest.fixture
def report(capsys):
    def emit(number, title, passed, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {title}: {detail}")
        return passed
    return emit


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# --------------------------------------------------------------------------
# shared training runs

@pytest.fixture(scope="session")
def ablation():
    """Held-out mAP@0.25 after 200 epochs and CPU seconds, per (variant, seed)."""
    out = {}
    for seed in SEEDS:
        for variant in ("baseline", "full"):
            t0 = time.process_time()
            state, _ = run_benchmark(variant, seed)
            out[variant, seed] = (state.history[-1]["mAP@0.25"], time.process_time() - t0, state.history)
    return out


@pytest.fixture(scope="session")
def aux_history():
    state, _ = run_benchmark("aux_loss", 0)
    return state.history


# --------------------------------------------------------------------------
# oracles

def grouping_oracle(positions, feats, grid):
    groups = {}
    for i, p in enumerate(positions):
        idx = tuple(int(math.floor((p[a] - grid.origin[a]) / grid.voxel_size)) for a in range(3))
        if all(0 <= idx[a] < grid.dims[a] for a in range(3)):
            groups.setdefault(idx, []).append(i)
    out = np.zeros((feats.shape[1],) + grid.dims)
    occ = np.zeros(grid.dims)
    for idx, members in groups.items():
        out[(slice(None),) + idx] = feats[members].mean(axis=0)
        occ[idx] = 1.0
    return out, occ


def lift_oracle(maps, cams, grid):
    out = np.zeros((maps.shape[1],) + grid.dims)
    for idx in np.ndindex(*grid.dims):
        p = np.array(grid.origin) + (np.array(idx) + 0.5) * grid.voxel_size
        acc, m = np.zeros(maps.shape[1]), 0
        for fmap, cam in zip(maps, cams):
            try:
                px = project_point(cam, p)
            except BehindCamera:
                continue
            if in_bounds(cam, px.u, px.v):
                acc += bilinear_sample(fmap, px.u, px.v)
                m += 1
        if m:
            out[(slice(None),) + idx] = acc / m
    return out


def monte_carlo_iou(a, b, n, rng):
    local = (rng.uniform(size=(n, 3)) - 0.5) * np.array(a.dims)
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    world = np.column_stack([c * local[:, 0] - s * local[:, 1], s * local[:, 0] + c * local[:, 1],
                             local[:, 2]]) + np.array(a.center)
    inter = b.contains(world).mean() * a.volume
    return inter / (a.volume + b.volume - inter)


def random_box(rng):
    return Box3D(rng.uniform(-1, 1, 3), rng.uniform(0.3, 2.0, 3), rng.uniform(-math.pi, math.pi))


def gaussian_set(positions, opacity, sh, scale, rotation=None):
    n = len(positions)
    rot = np.tile([1.0, 0, 0, 0], (n, 1)) if rotation is None else rotation
    return GaussianSet(positions=np.asarray(positions, float), opacity=np.asarray(opacity, float),
                       weight=np.full(n, 0.5), latent=np.zeros((n, 64)), source_view=np.zeros(n, int),
                       pixel=np.arange(n), depth=np.zeros(n), sh=np.asarray(sh, float), rotation=rot,
                       scale=np.asarray(scale, float))


def pinhole(f=10.0, size=(16, 16)):
    W, H = size
    K = np.array([[f, 0, W / 2, 0], [0, f, H / 2, 0], [0, 0, 1, 0]], dtype=float)
    return Camera(K, np.eye(4), np.eye(3), size)


# --------------------------------------------------------------------------

class TestAcceptance:
    def test_01_voxelize_oracle(self, report):
        grid = default_grid()
        rng = np.random.default_rng(0)
        lo = np.array(grid.origin) - 0.5
        hi = np.array(grid.origin) + np.array(grid.dims) * grid.voxel_size + 0.5
        pos, feats = rng.uniform(lo, hi, (10_000, 3)), rng.normal(size=(10_000, 64))
        res, secs = _timed(lambda: voxelize(pos, feats, grid))
        ref, occ = grouping_oracle(pos, feats, grid)
        err = float(np.max(np.abs(res.volume - ref)))
        same_occ = bool(np.array_equal(res.occupancy.values, occ))
        ok = err <= 1e-12 and same_occ and secs < 5.0
        assert report(1, "voxelize vs grouping oracle", ok,
                      f"max err {err:.2e} (tol 1e-12), occupancy identical={same_occ}, {secs:.3f} s (< 5 s)")

    def test_02_lift_oracle(self, report):
        rng = np.random.default_rng(1)
        grid = VoxelGridSpec((0.0, 0.0, 0.0), 0.25, (8, 8, 4))
        cams = []
        for k in range(3):
            ang = 2 * np.pi * k / 3 + rng.uniform(-0.3, 0.3)
            eye = (1.0 + 2.8 * np.cos(ang), 1.0 + 2.8 * np.sin(ang), rng.uniform(1.0, 2.0))
            cams.append(Camera.look_at(eye, (1.0, 1.0, 0.5), rng.uniform(14, 24), (32, 24)).scaled(0.25))
        maps = rng.normal(size=(3, 4, 6, 8))
        vol, secs = _timed(lambda: lift_features(maps, cams, grid).values)
        err = float(np.max(np.abs(vol - lift_oracle(maps, cams, grid))))
        perm = [2, 0, 1]
        err_perm = float(np.max(np.abs(lift_features(maps[perm], [cams[i] for i in perm], grid).values - vol)))
        dup = lift_features(np.concatenate([maps, maps]), cams * 2, grid).values
        err_dup = float(np.max(np.abs(dup - vol)))
        single = lift_features(maps[:1], cams[:1], grid).values
        err_dup1 = float(np.max(np.abs(lift_features(np.concatenate([maps[:1]] * 2), cams[:1] * 2, grid).values
                                       - single)))
        seen = int(visible_mask(cams, grid).max())
        ok = max(err, err_perm, err_dup, err_dup1) <= 1e-12 and secs < 5.0 and seen == 3
        assert report(2, "lift vs per-voxel oracle", ok,
                      f"oracle {err:.2e}, permutation {err_perm:.2e}, duplication {max(err_dup, err_dup1):.2e} "
                      f"(tol 1e-12), {secs:.3f} s (< 5 s)")

    def test_03_geometry_round_trips(self, report):
        rng = np.random.default_rng(2)
        worst_m = worst_px = 0.0
        for _ in range(1000):
            P = np.eye(4)
            P[:3, :3] = Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()
            P[:3, 3] = rng.normal(0, 2, 3)
            f = rng.uniform(20, 200)
            K = np.array([[f, 0, rng.uniform(10, 60), 0], [0, f, rng.uniform(10, 60), 0], [0, 0, 1, 0]])
            cam = Camera(K, P, np.eye(3), (64, 64))
            p = unproject_pixel(cam, rng.uniform(0, 64), rng.uniform(0, 64), rng.uniform(0.2, 20.0))
            px = project_point(cam, p)
            worst_m = max(worst_m, float(np.max(np.abs(unproject_pixel(cam, px.u, px.v, px.depth) - p))))
            u, v, d = rng.uniform(0, 64), rng.uniform(0, 64), rng.uniform(0.1, 30.0)
            q = project_point(cam, unproject_pixel(cam, u, v, d))
            worst_px = max(worst_px, abs(q.u - u), abs(q.v - v))
        ok = worst_m < 1e-9 and worst_px < 1e-9
        assert report(3, "project/unproject round trips", ok,
                      f"{worst_m:.2e} m, {worst_px:.2e} px over 1000 pairs (tol 1e-9)")

    def test_04_gradient_suite(self, report):
        results, secs = _timed(lambda: run_gradient_suite())
        bad = [r.name for r in results if not r.passed]
        tol_ok = all(r.tolerance == (PRIMITIVE_TOL if r.kind == "primitive" else BLOCK_TOL) for r in results)
        worst_p = max(r.max_error for r in results if r.kind == "primitive")
        worst_b = max(r.max_error for r in results if r.kind == "block")
        ok = not bad and tol_ok and PRIMITIVE_TOL == 1e-5 and BLOCK_TOL == 1e-4 and secs < 600
        assert report(4, "finite-difference gradient suite", ok,
                      f"{len(results)} checks, worst primitive {worst_p:.2e} (< 1e-5), worst block "
                      f"{worst_b:.2e} (< 1e-4), {secs:.1f} s (< 600 s), failures={bad}")

    def test_05_adaptive_weight_law(self, report):
        rng = np.random.default_rng(5)
        worst, inside = 0.0, True
        for _ in range(100):
            g = Graph()
            scale = rng.uniform(0.1, 1.0)
            p = {k: g.constant(rng.normal(0, scale, s)) for k, s in weight_net_shapes(8).items()}
            av, ag = adaptive_weights(g.constant(rng.normal(size=(8, 4, 4, 3))),
                                      g.constant(rng.normal(size=(8, 4, 4, 3))), p)
            worst = max(worst, float(np.max(np.abs(av.data + ag.data - 1.0))))
            inside &= bool(np.all((av.data > 0) & (av.data < 1) & (ag.data > 0) & (ag.data < 1)))
        g = Graph()
        zp = {k: g.constant(np.zeros(s)) for k, s in weight_net_shapes(8).items()}
        av, ag = adaptive_weights(g.constant(rng.normal(size=(8, 2, 2, 2))),
                                  g.constant(rng.normal(size=(8, 2, 2, 2))), zp)
        half = bool(np.all(av.data == 0.5) and np.all(ag.data == 0.5))
        train, _ = benchmark_scenes(0)
        full, direct = benchmark_config("full", 0), benchmark_config("direct_fusion", 0)
        state = TrainState.initial(full)
        for k in ("wnet.w", "wnet.b"):
            state.params[k][...] = 0.0
        a = forward_step(full, train[0], state)
        b = forward_step(direct, train[0], {k: v for k, v in state.params.items() if not k.startswith("wnet.")})
        diff = max(float(np.max(np.abs(np.asarray(getattr(oa, f).data) - np.asarray(getattr(ob, f).data))))
                   for oa, ob in zip(a.outputs, b.outputs) for f in ("centerness", "regression", "class_logits"))
        diff = max(diff, abs(a.losses["L_total"] - b.losses["L_total"]))
        ok = worst <= 1e-12 and inside and half and diff <= 1e-12
        assert report(5, "adaptive weight law", ok,
                      f"|a_v + a_g - 1| {worst:.2e} (tol 1e-12), open interval={inside}, zero net gives 0.5={half}, "
                      f"full vs direct_fusion {diff:.2e} (tol 1e-12)")

    def test_06_occupancy_masking(self, report):
        rng = np.random.default_rng(6)
        grid = default_grid()
        hi = np.array(grid.dims) * grid.voxel_size
        res = voxelize(rng.uniform(0, hi, (400, 3)), rng.normal(size=(400, 64)), grid)
        g = Graph()
        p = {k: g.constant(rng.normal(0, 0.2, s)) for k, s in gaussian_encoder_shapes(16).items()}
        enc = encode_gaussian_volume(g.constant(res.volume), p)
        masked = apply_occupancy(enc, res.occupancy).data
        empty = res.occupancy.values == 0
        exact = bool(np.all(masked[:, empty] == 0.0)) and np.count_nonzero(enc.data[:, empty]) > 0
        again = apply_occupancy(masked, res.occupancy)
        idem = bool(np.array_equal(again, masked))
        ok = exact and idem
        assert report(6, "occupancy masking", ok,
                      f"{int(empty.sum())} empty voxels exactly zero={exact}, idempotent={idem}")

    def test_07_rotated_iou(self, report):
        rng = np.random.default_rng(7)
        worst_mc = 0.0
        for _ in range(100):
            a, b = random_box(rng), random_box(rng)
            worst_mc = max(worst_mc, abs(rotated_iou_3d(a, b) - monte_carlo_iou(a, b, 200_000, rng)))
        box = random_box(rng)
        identical = rotated_iou_3d(box, box)
        third = rotated_iou_3d(Box3D((0, 0, 0), (1, 1, 1)), Box3D((0.5, 0, 0), (1, 1, 1)))
        worst_sym = worst_rot = 0.0
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            iou = rotated_iou_3d(a, b)
            worst_sym = max(worst_sym, abs(iou - rotated_iou_3d(b, a)))
            t = rng.uniform(-math.pi, math.pi)
            c, s = math.cos(t), math.sin(t)

            def turn(x):
                cx, cy, cz = x.center
                return Box3D((c * cx - s * cy, s * cx + c * cy, cz), x.dims, x.yaw + t)

            worst_rot = max(worst_rot, abs(iou - rotated_iou_3d(turn(a), turn(b))))
        ok = worst_mc <= 0.01 and identical == 1.0 and abs(third - 1 / 3) < 1e-12 and max(worst_sym, worst_rot) < 1e-9
        assert report(7, "rotated IoU", ok,
                      f"Monte Carlo {worst_mc:.4f} (tol 0.01), identical {identical}, half offset "
                      f"{abs(third - 1 / 3):.1e} from 1/3, symmetry {worst_sym:.1e}, rotation {worst_rot:.1e} "
                      f"(tol 1e-9)")

    def test_08_map(self, report):
        gts = [Box3D((0, 0, 0), (1, 1, 1)), Box3D((5, 0, 0), (1, 1, 1))]
        preds = [Box3D((0, 0, 0), (1, 1, 1), score=0.9), Box3D((9, 9, 9), (1, 1, 1), score=0.8),
                 Box3D((5, 0, 0), (1, 1, 1), score=0.7)]
        hand = eval_map(preds, gts)
        rng = np.random.default_rng(8)
        scenes = {s: [Box3D(rng.uniform(0, 6, 3), rng.uniform(0.3, 1.5, 3), rng.uniform(-3, 3), k % 3)
                      for k in range(4)] for s in range(5)}
        gt_map = eval_map(scenes, scenes)
        ok = abs(hand - 0.8333333333333334) <= 1e-9 and gt_map == 1.0
        assert report(8, "mAP", ok, f"hand case {hand:.10f} (0.8333 +- 1e-9), ground truth as predictions {gt_map}")

    def test_09_renderer(self, report):
        cam = pinhole()
        empty = render(gaussian_set(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3, 4)), np.zeros((0, 3))),
                       cam, background=(0.1, 0.2, 0.3))
        bg_ok = bool(np.all(empty == np.array([0.1, 0.2, 0.3])[:, None, None]))
        sh = np.zeros((1, 3, 4))
        sh[0, :, 0] = [0.3, -0.2, 0.9]
        one = render(gaussian_set([[-0.1, -0.1, 2.0]], [1.0], sh, [[0.5, 0.5, 0.5]]), cam, background=(0.7,) * 3)
        dc_err = float(np.max(np.abs(one[:, 7, 7] - (0.5 + SH_C0 * sh[0, :, 0]))))
        rng = np.random.default_rng(9)
        n = 60
        q = rng.normal(size=(n, 4))
        gs = gaussian_set(np.c_[rng.uniform(-0.6, 0.6, (n, 2)), rng.uniform(1.5, 4.0, n)], rng.uniform(0, 1, n),
                          rng.normal(0, 0.4, (n, 3, 4)), rng.uniform(0.05, 0.4, (n, 3)),
                          q / np.linalg.norm(q, axis=1, keepdims=True))
        perm = rng.permutation(n)
        gp = gaussian_set(gs.positions[perm], gs.opacity[perm], gs.sh[perm], gs.scale[perm], gs.rotation[perm])
        bit_identical = render(gs, cam).tobytes() == render(gp, cam).tobytes()
        fp = project_footprints(gs.positions, gs.rotation, gs.scale, render_camera(cam, cam.image_size))
        cols = sh_colors(gs.sh, sh_basis(gs.positions, cam.center))
        _, T = composite(fp, gs.opacity, cols, cam.image_size, np.zeros(3))
        t_ok = bool(np.all((T >= 0) & (T <= 1))) and T.min() < 1
        ok = bg_ok and dc_err == 0.0 and bit_identical and t_ok
        assert report(9, "renderer compositing", ok,
                      f"background={bg_ok}, DC colour error {dc_err:.1e} (exact), permutation bit-identical="
                      f"{bit_identical}, T in [{T.min():.3f}, {T.max():.3f}]")

    def test_10_ablation_direction(self, report, ablation):
        full = [ablation["full", s][0] for s in SEEDS]
        base = [ablation["baseline", s][0] for s in SEEDS]
        wins = sum(f >= b for f, b in zip(full, base))
        cpu = max(v[1] for v in ablation.values())
        ok = wins >= 4 and np.mean(full) > np.mean(base) and cpu < 1800
        assert report(10, "ablation full vs baseline", ok,
                      f"full {[round(x, 4) for x in full]} vs baseline {[round(x, 4) for x in base]}, "
                      f"full >= baseline on {wins}/5 seeds (need 4), mean {np.mean(full):.4f} vs "
                      f"{np.mean(base):.4f}, slowest run {cpu / 60:.1f} CPU min (< 30)")

    def test_11_render_loss_efficacy(self, report, aux_history):
        first = next(r for r in aux_history if r["epoch"] == 1)
        last = next(r for r in aux_history if r["epoch"] == 200)
        drop = 1.0 - last["L_render"] / first["L_render"]
        dpsnr = last["PSNR"] - first["PSNR"]
        ok = drop >= 0.5 and dpsnr >= -0.5
        assert report(11, "render loss efficacy (aux_loss, seed 0)", ok,
                      f"L_render {first['L_render']:.5f} -> {last['L_render']:.5f} ({100 * drop:.1f}% drop, need 50%), "
                      f"PSNR {first['PSNR']:.3f} -> {last['PSNR']:.3f} dB (change {dpsnr:+.3f}, floor -0.5)")

    def test_12_determinism(self, report, tmp_path):
        data = tmp_path / "data"
        assert cli.main(["gen", "--seed", "0", "--scenes", "2", "--out", str(data / "train")]) == 0
        assert cli.main(["gen", "--seed", "5", "--scenes", "1", "--out", str(data / "held")]) == 0
        cfg = tmp_path / "config.json"
        cfg.write_text(json.dumps(benchmark_config("full", 0, epochs=2).to_dict()))
        csvs = []
        for run in ("a", "b"):
            argv = ["train", "--config", str(cfg), "--data", str(data / "train"), "--heldout", str(data / "held"),
                    "--out", str(tmp_path / run), "--quiet"]
            assert cli.main(argv) == 0
            csvs.append((tmp_path / run / "metrics.csv").read_bytes())
        same_csv = csvs[0] == csvs[1]
        kernels = {}
        for kernel in ("lift", "voxelize", "render"):
            run_kernel, _, _ = cli._bench_case(kernel, np.random.default_rng(0))
            kernels[kernel] = np.asarray(run_kernel(1)).tobytes() == np.asarray(run_kernel(4)).tobytes()
        ok = same_csv and all(kernels.values())
        assert report(12, "determinism and parallel safety", ok,
                      f"train metrics CSV bit-identical={same_csv}, 1 vs 4 threads bit-identical={kernels}")
