"""
Acceptance checks, one test per criterion. Each test records a PASS/FAIL
line that is printed in the pytest terminal summary (and directly when this
file is run as a script).

Criterion 7 trains two backbones and takes tens of minutes on a CPU.
"""
import hashlib
import math
import time

import numpy as np
import pytest
import torch
from scipy import ndimage

from conftest import TINY_BACKBONE, phantom_case, tiny_model
from hierpaint import cli
from hierpaint.backbone import BackboneConfig, SliceUNet, load_checkpoint
from hierpaint.data import generate_lesion_mask, generate_phantom, transplant_mask
from hierpaint.diffusion import build_linear_schedule, training_loss
from hierpaint.metrics import MetricsReport, ablation_table, masked_mse, mean_fill
from hierpaint.pipeline import CORONAL_REFINED, RESTORED, InpaintRequest, run_hierarchical_inpaint
from hierpaint.resampling import adaptive_downsample_z, restore_z_cubic
from hierpaint.tam import TissueAwareAttention
from hierpaint.data import PairSettings
from hierpaint.training import TrainConfig, train_stage

RESULTS = {}

# overfit run settings
OVERFIT_SHAPES = [(32, 32, 16)] * 3 + [(48, 48, 32)] * 3 + [(64, 64, 48)] * 2
OVERFIT_ITERATIONS = {"axial": 4000, "coronal": 5000}
OVERFIT_LR = 2e-3
OVERFIT_LR_SCHEDULE = "cosine"
OVERFIT_BASE_CHANNELS = 16
OVERFIT_STEPS = 50
# no spacing augmentation: the held-in stacks are never resampled at inference
OVERFIT_FACTOR_RANGE = (1.0, 1.0)


def record(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[number] = line
    print(line)
    assert ok, line


def _randomize(model, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        model.out_conv.weight.copy_(0.1 * torch.randn(model.out_conv.weight.shape, generator=g))
    return model


def test_criterion_01_schedule():
    start = time.perf_counter()
    s = build_linear_schedule(1000, 1e-4, 2e-2)
    elapsed = time.perf_counter() - start
    direct = math.prod(1.0 - float(b) for b in s.beta)
    decreasing = bool(np.all(np.diff(s.alpha_bar) < 0))
    err = abs(s.alpha_bar[-1] - direct)
    ok = decreasing and err <= 1e-9 and elapsed < 1.0 and s.T == 1000
    record(1, ok, f"alpha_bar_T={s.alpha_bar[-1]:.6e} |diff|={err:.1e} decreasing={decreasing} t={elapsed * 1e3:.2f}ms")


def test_criterion_02_two_d_at_init():
    torch.manual_seed(0)
    model = _randomize(SliceUNet(BackboneConfig(**TINY_BACKBONE)))
    g = torch.Generator().manual_seed(1)
    x_t, x_m = torch.randn(8, 1, 32, 32, generator=g), torch.randn(8, 1, 32, 32, generator=g)
    m = (torch.rand(8, 1, 32, 32, generator=g) > 0.5).float()
    t = torch.randint(0, 1000, (8,), generator=g)
    with torch.no_grad():
        stacked = model(x_t, x_m, m, t)
        single = torch.cat([model(x_t[i : i + 1], x_m[i : i + 1], m[i : i + 1], t[i : i + 1]) for i in range(8)])
    diff = (stacked - single).abs().max().item()
    record(2, diff <= 1e-5 and stacked.abs().max() > 0, f"b=8 max|stack - per-slice|={diff:.2e}")


def test_criterion_03_tam():
    torch.manual_seed(2)
    worst_identity = 0.0
    for i in range(100):
        tam = TissueAwareAttention(16, 4)
        x = torch.randn(1 + i % 8, 16, 4 + i % 5, 4 + i % 3)
        with torch.no_grad():
            worst_identity = max(worst_identity, (tam(x) - x).abs().max().item())
    worst_perm = 0.0
    for i in range(20):
        tam = TissueAwareAttention(16, 4).double()
        with torch.no_grad():
            tam.proj.weight.normal_(0, 0.3)
        x = torch.randn(2 + i % 7, 16, 5, 5, dtype=torch.float64)
        perm = torch.randperm(x.shape[0])
        with torch.no_grad():
            worst_perm = max(worst_perm, (tam(x[perm]) - tam(x)[perm]).abs().max().item())
    ok = worst_identity <= 1e-6 and worst_perm <= 1e-6
    record(3, ok, f"identity max err={worst_identity:.1e} (100 inputs), permutation max err={worst_perm:.1e}")


def test_criterion_04_gradient_check():
    torch.manual_seed(3)
    model = _randomize(SliceUNet(BackboneConfig(use_tam=True, **TINY_BACKBONE))).double()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.01 * torch.randn_like(p))
    rng = np.random.default_rng(4)
    x0 = rng.uniform(-1, 1, (3, 16, 16))
    m = (rng.random((3, 16, 16)) > 0.6).astype(np.float64)

    class F64(torch.nn.Module):
        def __init__(self, net):
            super().__init__()
            self.net = net

        def forward(self, *args):
            return self.net(*(a.double() if a.is_floating_point() else a for a in args))

    wrapped = F64(model)

    def loss_fn():
        return training_loss(wrapped, x0, m, "inpaint", build_linear_schedule(), np.random.default_rng(5), t=400)

    # the loss builds its inputs in float32; central differences run on the float64 graph
    params = list(model.parameters())
    grads = torch.autograd.grad(loss_fn(), params)
    h, worst, checked = 1e-6, 0.0, 0
    while checked < 24:
        pi = int(rng.integers(len(params)))
        flat = params[pi].data.view(-1)
        j = int(rng.integers(flat.numel()))
        old = flat[j].item()
        with torch.no_grad():
            flat[j] = old + h
            up = loss_fn().item()
            flat[j] = old - h
            down = loss_fn().item()
            flat[j] = old
        num, ana = (up - down) / (2 * h), grads[pi].view(-1)[j].item()
        scale = max(abs(num), abs(ana))
        if scale < 1e-7:
            continue
        worst = max(worst, abs(num - ana) / scale)
        checked += 1
    record(4, worst <= 1e-3, f"{checked} parameters, worst relative error={worst:.2e}")


def test_criterion_05_mask_preservation():
    ax, cor = tiny_model("axial", 11), tiny_model("coronal", 12)
    bad = 0
    for seed in range(10):
        vol, _, mask = phantom_case(100 + seed, (32, 32 + 8 * (seed % 3), 16 + 8 * (seed % 2)))
        out = run_hierarchical_inpaint(InpaintRequest(vol, mask, ax, cor, steps=3, seed=seed)).volume.array
        bad += int(not np.array_equal(out[mask == 0], vol.array[mask == 0]))
    record(5, bad == 0, f"{10 - bad}/10 phantom/mask pairs bit-exact outside the mask")


def test_criterion_06_resampling_round_trip():
    vol, _ = generate_phantom(0, (48, 48, 60))
    smooth = ndimage.gaussian_filter(vol.array.astype(np.float64), 2.0)
    small, _, rec = adaptive_downsample_z(smooth, np.ones(smooth.shape, np.uint8), 24)
    back = restore_z_cubic(small, rec)
    peak = smooth.max() - smooth.min()
    psnr = 10 * np.log10(peak**2 / np.mean((back - smooth) ** 2))
    ramp = np.broadcast_to(np.linspace(0, 1, 60), (8, 8, 60)).copy()
    small, _, rec = adaptive_downsample_z(ramp, np.ones(ramp.shape, np.uint8), 24)
    ramp_err = np.abs(restore_z_cubic(small, rec) - ramp)[..., 3:-3].max()
    ok = small.shape[2] == 24 and back.shape == smooth.shape and psnr >= 30 and ramp_err <= 1e-3
    record(6, ok, f"60->24->60 PSNR={psnr:.1f} dB, ramp interior max err={ramp_err:.1e}")


@pytest.mark.slow
def test_criterion_07_overfit_end_to_end():
    vols, masks = [], []
    for i, shape in enumerate(OVERFIT_SHAPES):
        v, _ = generate_phantom(100 + i, shape)
        rng = np.random.default_rng(200 + i)
        vols.append(v)
        masks.append(transplant_mask(v, generate_lesion_mask(shape, rng), rng))
    backbone = BackboneConfig(base_channels=OVERFIT_BASE_CHANNELS)
    pairs = PairSettings(factor_range=OVERFIT_FACTOR_RANGE)
    start = time.perf_counter()
    models = {}
    for stage in ("axial", "coronal"):
        cfg = TrainConfig(
            stage=stage,
            iterations=OVERFIT_ITERATIONS[stage],
            learning_rate=OVERFIT_LR,
            lr_schedule=OVERFIT_LR_SCHEDULE,
            seed=1,
            backbone=backbone,
            pairs=pairs,
        )
        models[stage], _ = train_stage(vols, masks, cfg)
    rows = []
    for i, (v, m) in enumerate(zip(vols, masks)):
        res = run_hierarchical_inpaint(
            InpaintRequest(v, m, models["axial"], models["coronal"], steps=OVERFIT_STEPS, seed=i), truth=v
        )
        by_name = {r["name"]: r["masked_mse"] for r in res.report.records}
        rows.append((masked_mse(mean_fill(v.array, m), v.array, m), by_name[RESTORED], by_name[CORONAL_REFINED]))
    rows = np.array(rows)
    elapsed = (time.perf_counter() - start) / 60
    ratio = rows[:, 2].mean() / rows[:, 0].mean()
    wins = int((rows[:, 2] <= rows[:, 1]).sum())
    ok = max(OVERFIT_ITERATIONS.values()) <= 5000 and ratio <= 0.5 and wins >= 6
    record(
        7,
        ok,
        f"mean refined/mean-fill MSE={ratio:.3f} (per-phantom max {np.max(rows[:, 2] / rows[:, 0]):.3f}), "
        f"refined<=restored on {wins}/8, iterations {OVERFIT_ITERATIONS}, {elapsed:.1f} min",
    )


def test_criterion_08_metrics_oracles():
    from test_metrics import brute_dice, brute_mse, brute_ssim
    from hierpaint.metrics import dice, masked_psnr, masked_ssim

    worst = {"mse": 0.0, "psnr": 0.0, "ssim": 0.0, "dice": 0.0}
    for seed in range(3):
        rng = np.random.default_rng(seed)
        t = rng.random((8, 8, 8))
        p = np.clip(t + 0.1 * rng.standard_normal(t.shape), 0, 1)
        m = rng.random(t.shape) > 0.4
        mse = brute_mse(p, t, m)
        worst["mse"] = max(worst["mse"], abs(masked_mse(p, t, m) - mse))
        worst["psnr"] = max(worst["psnr"], abs(masked_psnr(p, t, m) - 10 * math.log10(1 / mse)))
        worst["ssim"] = max(worst["ssim"], abs(masked_ssim(p, t, m) - brute_ssim(p, t, m)))
        a, b = rng.integers(0, 4, t.shape), rng.integers(0, 4, t.shape)
        for c in (1, 2, 3):
            worst["dice"] = max(worst["dice"], abs(dice(a, b, c) - brute_dice(a, b, c)))
    ok = worst["mse"] <= 1e-10 and worst["dice"] <= 1e-10 and worst["psnr"] <= 1e-6 and worst["ssim"] <= 1e-6
    record(8, ok, " ".join(f"{k}={v:.1e}" for k, v in worst.items()))


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    data = root / "data"
    assert cli.main(["phantom", "--out", str(data), "--count", "2", "--shape", "32", "32", "16", "--seed", "4"]) == 0
    common = ["--manifest", str(data / "manifest.json"), "--base-channels", "8", "--lr", "1e-3"]
    assert cli.main(["train", "--stage", "axial", "--iterations", "30", "--out", str(root / "ax.pt"), *common]) == 0
    return root


def test_criterion_09_determinism(cli_workspace):
    data = cli_workspace / "data"
    ax = cli_workspace / "ax.pt"
    cor = cli_workspace / "cor_det.pt"
    assert cli.main(["train", "--stage", "coronal", "--iterations", "5", "--out", str(cor),
                     "--manifest", str(data / "manifest.json"), "--base-channels", "8"]) == 0
    digests = []
    for run in range(2):
        out = cli_workspace / f"det_{run}.nii.gz"
        rc = cli.main(["inpaint", "--input", str(data / "images/phantom_000.nii.gz"),
                       "--mask", str(data / "masks/phantom_000.nii.gz"), "--stage1", str(ax), "--stage2", str(cor),
                       "--out", str(out), "--steps", "10", "--seed", "7"])
        assert rc == 0
        digests.append(hashlib.sha256(out.read_bytes()).hexdigest())
    record(9, digests[0] == digests[1], f"sha256 {digests[0][:16]} vs {digests[1][:16]}")


def test_criterion_10_ablation_harness(cli_workspace):
    root = cli_workspace
    data = root / "data"
    manifest = str(data / "manifest.json")
    reports = {}
    for flag in ("--use-tam", "--no-use-tam"):
        tag = flag.strip("-")
        ckpt = root / f"cor_{tag}.pt"
        assert cli.main(["train", "--stage", "coronal", flag, "--iterations", "30", "--lr", "1e-3", "--seed", "0",
                         "--base-channels", "8", "--manifest", manifest, "--out", str(ckpt)]) == 0
        preds = root / f"pred_{tag}"
        preds.mkdir()
        for i in range(2):
            name = f"phantom_{i:03d}.nii.gz"
            assert cli.main(["inpaint", "--input", str(data / "images" / name), "--mask", str(data / "masks" / name),
                             "--stage1", str(root / "ax.pt"), "--stage2", str(ckpt), "--out", str(preds / name),
                             "--steps", "10", "--seed", str(i)]) == 0
        assert cli.main(["eval", "--pred-dir", str(preds), "--truth-dir", str(data / "images"),
                         "--mask-dir", str(data / "masks"), "--labels-dir", str(data / "labels"),
                         "--report", str(root / f"report_{tag}.json")]) == 0
        reports[tag] = MetricsReport.load(root / f"report_{tag}.json")
    _, with_tam = load_checkpoint(root / "cor_use-tam.pt")
    _, without = load_checkpoint(root / "cor_no-use-tam.pt")
    distinct = with_tam["config"]["use_tam"] and not without["config"]["use_tam"]
    distinct = distinct and set(with_tam["state_dict"]) != set(without["state_dict"])
    table = ablation_table(reports["no-use-tam"], reports["use-tam"])
    complete = all(
        all(f"dice_{t}" in r for t in ("CSF", "GM", "WM")) for rep in reports.values() for r in rep.records
    ) and all(set(table[k]) == {"CSF", "GM", "WM"} for k in ("without", "with", "error_reduction"))
    summary = ", ".join(f"{t} {table['without'][t]:.3f}->{table['with'][t]:.3f}" for t in ("CSF", "GM", "WM"))
    record(10, bool(distinct and complete), f"distinct checkpoints={bool(distinct)}, Dice without->with TAM: {summary}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
