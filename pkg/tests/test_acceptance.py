"""Acceptance suite: one test per criterion, summarized as PASS/FAIL lines at the end of the run.

Criteria 8 to 10 audit the desk-scale runs stored under ``runs/`` (override with TOYDRIVE_RUNS).
Those runs are produced by ``scripts/run_memorization.py`` and ``scripts/run_ablations.py``; the
tests recompute every gated number from the stored images and re-sample a slice from each
checkpoint to confirm that the images really come from it.
"""

import json
import math
import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from toydrive.ablation import config_echo_difference, file_sha256, generate_for_dataset, render_config_of
from toydrive.backbone import MultiViewDiffusionModel
from toydrive.cli import main as cli_main
from toydrive.diffusion import CFGConfig, cfg_predict, ddim_step, make_schedule, q_sample, sample, training_loss
from toydrive.encoders import ConditionEncoder, pose_features, select_boxes_for_view
from toydrive.experiments import desk_unet, tiny_unet
from toydrive.geometry import Box3D, CameraIntrinsics, CameraPose, f_viz
from toydrive.metrics import evaluate, reconstruction_metrics
from toydrive.toyworld import make_rig, read_dataset, scene_to_json
from toydrive.trainloop import TrainConfig, assemble_batch, dataset_features, load_checkpoint, train

from gradcheck import check_entries, check_module_grads
from helpers import random_conditions, randomize_zero_init, tiny_model

REPO = Path(__file__).resolve().parents[1]
RUNS = Path(os.environ.get("TOYDRIVE_RUNS", REPO / "runs"))
SEEDS = (0, 1, 2)


def run_file(*parts) -> Path:
    path = RUNS.joinpath(*parts)
    if not path.exists():
        pytest.fail(f"missing run artifact {path}; see README for the scripts that produce it")
    return path


# 1 ---------------------------------------------------------------------------------------------

def brute_force_visible(box, pose):
    l, w, h = box.size
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    for sx in (-0.5, 0.5):
        for sy in (-0.5, 0.5):
            for sz in (-0.5, 0.5):
                px = box.center[0] + c * sx * l - s * sy * w
                py = box.center[1] + s * sx * l + c * sy * w
                pz = box.center[2] + sz * h
                r, tr = pose.rotation, pose.translation
                if r[2, 0] * px + r[2, 1] * py + r[2, 2] * pz + tr[2] > 0:
                    return True
    return False


@pytest.mark.acceptance(1, "f_viz matches brute-force corner transform on 10,000 pairs in < 10 s")
def test_criterion_01_visibility_oracle():
    rng = np.random.default_rng(2024)
    intr = CameraIntrinsics(50.0, 50.0, 40.0, 24.0, 80, 48)
    pairs = []
    for _ in range(10_000):
        yaw, pitch = rng.uniform(-math.pi, math.pi), rng.uniform(-0.6, 0.6)
        cz, sz, cp, sp = math.cos(yaw), math.sin(yaw), math.cos(pitch), math.sin(pitch)
        rot = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1.0]]) @ np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
        pose = CameraPose(intr, rot, rng.uniform(-10, 10, 3))
        box = Box3D(int(rng.integers(0, 4)), rng.uniform(-25, 25, 3), rng.uniform(0.3, 8, 3),
                    float(rng.uniform(-math.pi, math.pi)))
        pairs.append((box, pose))
    t0 = time.perf_counter()
    got = [f_viz(b, p) for b, p in pairs]
    elapsed = time.perf_counter() - t0
    expected = [brute_force_visible(b, p) for b, p in pairs]
    mismatches = sum(g != e for g, e in zip(got, expected))
    assert mismatches == 0
    assert 0 < sum(expected) < len(pairs)  # both outcomes exercised
    assert elapsed < 10.0


# 2 ---------------------------------------------------------------------------------------------

@pytest.mark.acceptance(2, "fresh full model equals base UNet on 32 inputs, max diff < 1e-5, < 1 min")
def test_criterion_02_zero_init_identity():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    model = MultiViewDiffusionModel(desk_unet()).eval()
    base = MultiViewDiffusionModel(desk_unet(use_cross_view=False, use_map=False)).eval()
    assert not base.load_state_dict(model.state_dict(), strict=False).missing_keys
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    with torch.no_grad():
        for _ in range(8):
            x = torch.randn(4, 3, 3, 48, 80, generator=g)
            t = torch.randint(1, 1001, (4,), generator=g)
            cond = random_conditions(model.cfg, 4, g)
            worst = max(worst, (model(x, t, cond) - base(x, t, cond)).abs().max().item())
    assert worst < 1e-5
    assert time.perf_counter() - t0 < 60


# 3 ---------------------------------------------------------------------------------------------

class BranchStub(torch.nn.Module):
    def __init__(self, eps_c, eps_u):
        super().__init__()
        self.eps_c, self.eps_u = eps_c, eps_u

    def forward(self, x, t, cond):
        null = cond.scene_null.view(-1, 1, 1, 1, 1)
        b = x.shape[0]
        return torch.where(null, self.eps_u[:1].expand(b, -1, -1, -1, -1), self.eps_c[:1].expand(b, -1, -1, -1, -1))


@pytest.mark.acceptance(3, "cfg_predict equals eps_u + s(eps_c - eps_u) exactly; s = 1 is bit-exact")
def test_criterion_03_cfg_algebra():
    g = torch.Generator().manual_seed(3)
    eps_c, eps_u = torch.randn(1, 3, 3, 8, 16, generator=g), torch.randn(1, 3, 3, 8, 16, generator=g)
    cond = random_conditions(tiny_unet(), 1, g)
    x, t = torch.zeros(1, 3, 3, 8, 16), torch.tensor([10])
    stub = BranchStub(eps_c, eps_u)
    for s in (0.0, 1.5, 2.0, 4.0):
        assert torch.equal(cfg_predict(stub, x, t, cond, CFGConfig(s)), eps_u + s * (eps_c - eps_u)), s
    # scale 1 skips the arithmetic, so the conditional branch comes back untouched
    assert torch.equal(cfg_predict(stub, x, t, cond, CFGConfig(1.0)), eps_c)
    assert torch.equal(cfg_predict(stub, x, t, cond, CFGConfig(0.0)), eps_u)
    model = tiny_model().eval()
    x = torch.randn(1, 3, 3, 8, 16, generator=g)
    with torch.no_grad():
        assert torch.equal(cfg_predict(model, x, t, cond, CFGConfig(1.0)), model(x, t, cond))


# 4 ---------------------------------------------------------------------------------------------

@pytest.mark.acceptance(4, "output invariant under real box-token permutations, 20 trials, < 1e-5")
def test_criterion_04_box_permutation_invariance():
    torch.manual_seed(4)
    model = randomize_zero_init(MultiViewDiffusionModel(desk_unet()), seed=4).eval()
    g = torch.Generator().manual_seed(4)
    n_real = 6
    worst = 0.0
    for _ in range(20):
        cond = random_conditions(model.cfg, 1, g, n_real=n_real)
        perm = torch.cat([torch.randperm(n_real, generator=g), torch.arange(n_real, model.cfg.max_boxes)])
        permuted = cond.replace(box_classes=cond.box_classes[..., perm], box_feats=cond.box_feats[..., perm, :],
                                box_mask=cond.box_mask[..., perm])
        x, t = torch.randn(1, 3, 3, 48, 80, generator=g), torch.randint(1, 1001, (1,), generator=g)
        with torch.no_grad():
            worst = max(worst, (model(x, t, cond) - model(x, t, permuted)).abs().max().item())
    assert worst < 1e-5


# 5 ---------------------------------------------------------------------------------------------

@pytest.mark.acceptance(5, "encoder MLP grads < 1e-4 (float64), 16 backbone weights < 1e-3, < 5 min")
def test_criterion_05_gradient_checks():
    t0 = time.perf_counter()
    torch.manual_seed(5)
    enc = ConditionEncoder(d_emb=32, num_bands=3).double()
    feats = torch.as_tensor(pose_features(make_rig().poses[0], 3))
    assert check_module_grads(enc.camera, lambda: enc.camera(feats)) < 1e-4
    box = Box3D(1, (12.0, -3.0, 1.0), (4.5, 2.0, 1.6), 0.4)
    for module in (enc.box.mlp_p, enc.box.mlp_b):
        assert check_module_grads(module, lambda: enc.encode_box(box)) < 1e-4

    model = randomize_zero_init(tiny_model(seed=5), seed=5, std=0.1).double()
    sched = make_schedule()
    g = torch.Generator().manual_seed(5)
    x0 = torch.rand(1, 3, 3, 8, 16, generator=g, dtype=torch.float64) * 2 - 1
    cond = random_conditions(model.cfg, 1, g, n_real=2, dtype=torch.float64)
    params = list(model.parameters())
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    entries = []
    for flat in np.random.default_rng(5).choice(sizes.sum(), size=16, replace=False):
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        entries.append((pi, int(flat - offsets[pi])))

    def loss():
        return training_loss(model, x0, cond, sched, torch.Generator().manual_seed(7), gamma_s=0.0)

    assert check_entries(params, loss, entries) < 1e-3
    assert time.perf_counter() - t0 < 300


# 6 ---------------------------------------------------------------------------------------------

@pytest.mark.acceptance(6, "alpha_bar strictly decreasing, alpha_bar_T < 5e-5, one-step DDIM inversion < 1e-5")
def test_criterion_06_schedule_and_process():
    sched = make_schedule()
    ab = sched.alpha_bars
    assert np.all(np.diff(ab) < 0) and ab[0] < 1
    assert ab[-1] < 5e-5
    g = torch.Generator().manual_seed(6)
    # float64: at t = T the inversion divides by sqrt(alpha_bar_T) ~ 6e-3, which float32 rounding cannot absorb
    x0 = torch.rand(4, 3, 3, 48, 80, generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    for t in (1, 10, 250, 500, 999, 1000):
        x_t = q_sample(x0, np.full(4, t), eps, sched)
        back = ddim_step(x_t, eps, t, 0, sched, eta=0.0)
        assert (back - x0).abs().max().item() < 1e-5, t


# 7 ---------------------------------------------------------------------------------------------

class NoiseEcho(torch.nn.Module):
    def forward(self, x, t, cond):
        self.drop = cond.scene_null.clone()
        return torch.zeros_like(x)


@pytest.mark.acceptance(7, "scene drop rate 0.2 +- 0.012 and invisible-box augmentation 0.10 +- 0.01")
def test_criterion_07_drop_rates():
    n = 10_000
    echo = NoiseEcho()
    cond = random_conditions(tiny_unet(), 1, torch.Generator().manual_seed(7)).index([0] * n)
    x0 = torch.zeros(n, 3, 3, 1, 1)
    _, details = training_loss(echo, x0, cond, make_schedule(), torch.Generator().manual_seed(7), gamma_s=0.2,
                               return_details=True)
    assert torch.equal(echo.drop, details["drop"])
    assert abs(details["drop"].float().mean().item() - 0.2) <= 0.012

    pose = make_rig().poses[1]
    behind = [Box3D(0, (-10.0, 0.0, 1.0), (1.0, 1.0, 1.0), 0.0)] * n
    assert not any(f_viz(b, pose) for b in behind[:1])
    kept = select_boxes_for_view(behind, pose, 0.10, np.random.default_rng(7))
    assert abs(len(kept) / n - 0.10) <= 0.01


# 8 ---------------------------------------------------------------------------------------------

@pytest.mark.acceptance(8, "memorization run (<= 5000 steps, <= 1 h) reproduces its scene at >= 20 dB per view")
def test_criterion_08_memorization():
    report = json.loads(run_file("memorization", "report.json").read_text())
    ckpt = load_checkpoint(run_file("memorization", "ckpt", "final.ckpt"))
    ds = read_dataset(run_file("memorization", "data"))
    cfg = ckpt.train_config
    assert len(ds) == 1 and ds.images[0][0].shape == (48, 80, 3) and len(ds.images[0]) == 3
    assert ckpt.step == cfg.total_steps <= 5000
    assert report["train_seconds"] <= 3600

    model = ckpt.model.eval()
    _, cond = assemble_batch(dataset_features(ds, model.cfg, model.vocab), model.cfg, mode="eval")
    imgs = sample(model, cond, cfg.schedule.build(), steps=report["sample_steps"],
                  cfg=CFGConfig(report["cfg_scale"]), seed=report.get("sample_seed", 0))[0]
    psnr = [reconstruction_metrics(g, o)["psnr"] for g, o in zip(imgs, ds.images[0])]
    assert psnr == pytest.approx(report["psnr_per_view"], abs=1e-9)
    print(f"memorization PSNR per view: {[round(p, 2) for p in psnr]}")
    assert min(psnr) >= 20.0


# 9, 10 -----------------------------------------------------------------------------------------

def audited_report(seed: int, variant: str, heldout, regenerate: int = 8) -> dict:
    """Load one ablation report after checking it against its checkpoint and stored images."""
    run_dir = run_file("ablations", f"seed{seed}", variant)
    report = json.loads((run_dir / "report.json").read_text())
    cfgd = report["config"]
    assert file_sha256(run_dir / "final.ckpt") == cfgd["checkpoint_sha256"]
    images = np.load(run_dir / "samples.npz")["images"]
    assert images.shape[0] == len(heldout) == report["sample_count"]
    again = evaluate(list(images), heldout.scenes, render_config_of(heldout), heldout.images, config=cfgd)
    assert again.to_json() == report

    if regenerate:
        ckpt = load_checkpoint(run_dir / "final.ckpt")
        assert ckpt.step == ckpt.train_config.total_steps
        batch = cfgd["batch"]
        head = heldout.subset(range(max(regenerate, batch) // batch * batch))
        with torch.no_grad():
            fresh = generate_for_dataset(ckpt.model, head, ckpt.train_config.schedule.build(), cfgd["steps"],
                                         CFGConfig(cfgd["cfg_scale"], cfgd["map_null_mode"]), cfgd["seed"], batch,
                                         ckpt.train_config.object_footprints_in_map)
        assert np.array_equal(np.asarray(fresh, dtype=np.uint8), images[:len(head)])
    return report


@pytest.fixture(scope="module")
def heldout():
    ds = read_dataset(run_file("data", "heldout_200"))
    assert len(ds) == 200
    return ds


@pytest.mark.acceptance(9, "controllability on 200 held-out scenes >= 2x the gray-image baseline")
def test_criterion_09_controllability(heldout):
    report = audited_report(0, "full", heldout)
    train_path = Path(TrainConfig.from_json(report["config"]["train_config"]).dataset)
    train_ds = read_dataset(train_path if train_path.is_absolute() else REPO / train_path)
    assert len(train_ds) == 2000
    boxes = lambda ds: {json.dumps(scene_to_json(s)["boxes"]) for s in ds.scenes if s.boxes}  # noqa: E731
    assert not boxes(train_ds) & boxes(heldout)  # held-out annotations never seen in training
    acc, base = report["overall_accuracy"], report["gray_baseline"]
    print(f"controllability {acc:.4f} vs gray baseline {base:.4f} (ratio {acc / base:.2f})")
    assert acc >= 2 * base


@pytest.mark.acceptance(10, "3-seed medians: full >= no_box_encoder controllability; views_two <= views_one "
                            "consistency")
def test_criterion_10_ablation_directionality(heldout):
    reports = {v: [audited_report(s, v, heldout, regenerate=8 if s == 0 else 0) for s in SEEDS]
               for v in ("full", "no_box_encoder", "views_one")}
    for v, reps in reports.items():
        for s, rep in zip(SEEDS, reps):
            tc = rep["config"]["train_config"]
            assert tc["seed"] == s
            axis = config_echo_difference(reports["full"][SEEDS.index(s)]["config"]["train_config"], tc)
            allowed = {"full": set(), "views_one": {"unet.attended_views"},
                       "no_box_encoder": {"unet.use_box_encoder", "unet.map_channels", "object_footprints_in_map"}}
            assert axis == allowed[v], (v, s, axis)
    # the full model attends two neighbours, so it doubles as the views_two variant
    assert all(r["config"]["train_config"]["unet"]["attended_views"] == "two" for r in reports["full"])
    acc = {v: statistics.median(r["overall_accuracy"] for r in reps) for v, reps in reports.items()}
    con = {v: statistics.median(r["consistency"] for r in reps) for v, reps in reports.items()}
    print(f"median controllability: full {acc['full']:.4f}, no_box_encoder {acc['no_box_encoder']:.4f}")
    print(f"median consistency: views_two {con['full']:.4f}, views_one {con['views_one']:.4f}")
    assert acc["full"] >= acc["no_box_encoder"]
    assert con["full"] <= con["views_one"]


# 11 --------------------------------------------------------------------------------------------

def tree_bytes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.acceptance(11, "gendata, train and sample are bit-identical per (config, seed); resume is exact")
def test_criterion_11_determinism(tmp_path):
    scene_cfg = tmp_path / "scene.json"
    scene_cfg.write_text(json.dumps({"image_w": 16, "image_h": 8, "max_boxes": 4}))
    for name in ("a", "b"):
        assert cli_main(["gendata", "--config", str(scene_cfg), "--out", str(tmp_path / f"data_{name}"),
                         "--seed", "11", "--num-scenes", "6"]) == 0
    assert tree_bytes(tmp_path / "data_a") == tree_bytes(tmp_path / "data_b")

    tc = TrainConfig(unet=tiny_unet(), batch_size=2, total_steps=6, warmup_steps=2, checkpoint_every=3,
                     log_every=1, lr=1e-3, seed=11)
    (tmp_path / "train.json").write_text(json.dumps(tc.to_json()))
    for name in ("a", "b"):
        assert cli_main(["train", "--config", str(tmp_path / "train.json"), "--data", str(tmp_path / "data_a"),
                         "--out", str(tmp_path / f"run_{name}")]) == 0
    for ck in ("step_0000003.ckpt", "final.ckpt"):
        assert (tmp_path / "run_a" / ck).read_bytes() == (tmp_path / "run_b" / ck).read_bytes()

    ds = read_dataset(tmp_path / "data_a")
    scene_id = ds.scenes[2].scene_id
    for name in ("a", "b"):
        assert cli_main(["sample", "--ckpt", str(tmp_path / "run_a" / "final.ckpt"), "--data",
                         str(tmp_path / "data_a"), "--scene-id", scene_id, "--steps", "3", "--seed", "5",
                         "--out", str(tmp_path / f"samples_{name}")]) == 0
    assert tree_bytes(tmp_path / "samples_a") == tree_bytes(tmp_path / "samples_b")
    assert len(tree_bytes(tmp_path / "samples_a")) == 3

    full = train(tc, tmp_path / "full", dataset=ds)
    first = train(tc, tmp_path / "part", dataset=ds, stop_at=3)
    rest = train(tc, tmp_path / "part", dataset=ds, resume_from=tmp_path / "part" / "step_0000003.ckpt")
    assert first.losses + rest.losses == full.losses
    assert (tmp_path / "full" / "final.ckpt").read_bytes() == (tmp_path / "part" / "final.ckpt").read_bytes()
