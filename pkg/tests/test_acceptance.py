"""End-to-end acceptance criteria, one test per criterion.

Each test is tagged with ``criterion(n, title)``; the terminal summary prints
one PASS/FAIL line per criterion. Runtime budgets are measured inside the
test body, so cached model training done by fixtures does not count.
"""

from __future__ import annotations

import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from canvas.checkpoint import read_container, save_train_state
from canvas.cli import EXIT_OK, main
from canvas.conditions import NULL_TOKEN, ConditionSet, tokenize
from canvas.datasets import TwoGaussiansSource, catalog_item
from canvas.flow import (
    GaussianField, analytic_gaussian_field, euler_sample, make_schedule, monte_carlo_velocity, timestep_shift,
    timestep_shift_inverse,
)
from canvas.guidance import (
    GuidanceConfig, guide_full_drop, guide_sequential, guide_text_drop, guided_field, rescale_cfg,
)
from canvas.model import (
    PARAM_NAMES, ModelConfig, ModelField, ModelParams, draw_noise, fm_loss, init_params, loss_and_grad,
)
from canvas.pipeline import (
    PipelineConfig, check_eligibility, composite_cutout, harmonize_boundary, prepare_job, run_pipeline, seed_sweep,
)
from canvas.review import (
    Answer, RaterRecord, RaterSpec, RewardConfig, RewardExample, FunctionReward, RewardModel, aggregate_review,
    aggregated_rater_loss, check_rate_consistency, defect_fraction, no_defect_rates, predict, rate_pair,
    reward_features, train_reward,
)
from canvas.rng import stream
from canvas.training import EmaState, TrainSettings, TrainStageConfig, ema_update, train

criterion = pytest.mark.criterion


class Budget:
    """Wall-clock budget for the body of a criterion."""

    def __init__(self, seconds: float):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.1f} s, budget {self.seconds} s"


# -- 1 -------------------------------------------------------------------------

@criterion(1, "timestep shift exactness and inverse identity")
def test_criterion_01_timestep_shift():
    with Budget(1.0):
        f = Fraction(63, 10)
        half = float(f * Fraction(1, 2) / (1 + (f - 1) * Fraction(1, 2)))
        quarter = float(f * Fraction(1, 4) / (1 + (f - 1) * Fraction(1, 4)))
        assert abs(timestep_shift(0.5, 6.30) - half) < 1e-9 and str(half).startswith("0.863013")
        assert abs(timestep_shift(0.25, 6.30) - quarter) < 1e-9 and str(quarter).startswith("0.677419")
        rng = np.random.default_rng(0)
        ts = rng.random(1000)
        fs = rng.uniform(0.1, 10.0, 1000)
        for t, fac in zip(ts, fs):
            assert abs(timestep_shift_inverse(timestep_shift(t, fac), fac) - t) < 1e-12


# -- 2 -------------------------------------------------------------------------

@criterion(2, "guidance algebra and forward-pass accounting")
def test_criterion_02_guidance_algebra():
    with Budget(10.0):
        assert guide_sequential(0.0, 1.0, 3.0, 2.0, 1.5).item() == 5.0
        assert guide_text_drop(1.0, 3.0, 7.0).item() == 15.0
        assert guide_full_drop(0.0, 2.0, 3.0).item() == 6.0

        params = init_params(ModelConfig(hidden=8), 0, zero_out=False)
        ref = np.random.default_rng(1).random((4, 6, 6)).astype(np.float32)
        cond = ConditionSet(text=tokenize("a red box"), images=(ref,))
        z = np.random.default_rng(2).standard_normal((3, 6, 6)).astype(np.float32)
        conditional = ModelField(params).evaluate(z, 0.4, cond)
        for cfg in (GuidanceConfig.sequential(1.0, 1.0), GuidanceConfig.text_drop(1.0),
                    GuidanceConfig.full_drop(1.0)):
            assert guided_field(ModelField(params), cfg).evaluate(z, 0.4, cond).tobytes() == conditional.tobytes()

        counts = {}
        for name, cfg in (("sequential", GuidanceConfig.sequential(1.5, 7.0)),
                          ("text_drop", GuidanceConfig.text_drop(7.0)), ("full_drop", GuidanceConfig.full_drop(3.0))):
            base = ModelField(params)
            euler_sample(guided_field(base, cfg), z, make_schedule(50), cond)
            counts[name] = base.eval_count
        assert counts == {"sequential": 150, "text_drop": 100, "full_drop": 100}
        assert Fraction(counts["text_drop"], counts["sequential"]) == Fraction(2, 3)


# -- 3 -------------------------------------------------------------------------

@criterion(3, "guidance rescale keeps the conditional spread")
def test_criterion_03_rescale():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        shape = (3, int(rng.integers(1, 9)), int(rng.integers(2, 9)))
        x = (rng.standard_normal(shape) * rng.uniform(0.2, 5.0)).astype(np.float32)
        e = rng.standard_normal(shape).astype(np.float32)
        out = rescale_cfg(x, e)
        assert abs(np.std(out, dtype=np.float64) - np.std(e, dtype=np.float64)) < 1e-6
        assert np.array_equal(np.sign(out), np.sign(x))
        assert np.argmax(out) == np.argmax(x)


# -- 4 -------------------------------------------------------------------------

def _ks(steps: int, seed: int, mu0: float = 0.5, sigma0: float = 0.8) -> float:
    z = np.random.default_rng(seed).standard_normal((1, 1, 10_000)).astype(np.float32)
    x = euler_sample(GaussianField(mu0, sigma0), z, make_schedule(steps))
    return stats.kstest(x.ravel().astype(np.float64), "norm", args=(mu0, sigma0)).statistic


@criterion(4, "Euler sampler against the Gaussian oracle")
def test_criterion_04_sampler():
    with Budget(60.0):
        mu0, sigma0 = 0.5, 0.8
        rng = np.random.default_rng(4)
        for t in (0.2, 0.5, 0.8):
            sd = math.sqrt((1 - t) ** 2 * sigma0**2 + t**2)
            zs = (1 - t) * mu0 + sd * np.array([-1.0, 0.0, 1.0])
            edges = np.sort(np.concatenate([zs - 0.02 * sd, zs + 0.02 * sd]))
            centers, means, ses = monte_carlo_velocity(mu0, sigma0, edges, t, 1_000_000, rng)
            for b in (0, 2, 4):
                assert abs(means[b] - analytic_gaussian_field(mu0, sigma0, centers[b], t)) < 3 * ses[b]
        for seed in range(5):
            ks50, ks100 = _ks(50, seed), _ks(100, seed)
            assert ks50 < 0.02
            assert ks100 <= ks50


# -- 5 -------------------------------------------------------------------------

@criterion(5, "analytic gradient against central differences")
def test_criterion_05_gradient():
    with Budget(60.0):
        cfg = ModelConfig(channels=3, embed_dim=4, hidden=8, time_freqs=2)
        p = init_params(cfg, 1, zero_out=False, dtype=np.float64)
        rng = np.random.default_rng(5)
        for k in p.arrays:
            p.arrays[k] = p.arrays[k] + 0.1 * rng.standard_normal(p.arrays[k].shape)
        batch = [
            (rng.standard_normal((3, 4, 4)), ConditionSet(text=tokenize("red box"), images=(rng.random((4, 2, 2)),))),
            (rng.standard_normal((3, 4, 4)), ConditionSet(text=None)),
            (rng.standard_normal((3, 4, 4)), ConditionSet(text=(), images=(rng.random((3, 4, 4)),))),
        ]
        draws = draw_noise(batch, (0,))
        _, g = loss_and_grad(p, batch, draws=draws)
        flat = p.flat()
        assert flat.dtype == np.float64
        gflat = np.concatenate([g[k].ravel() for k in PARAM_NAMES])
        used = sorted({NULL_TOKEN} | set(tokenize("red box")))
        coords = [r * cfg.embed_dim + j for r in used for j in range(cfg.embed_dim)]
        coords += list(range(p.arrays["embed"].size, flat.size))
        worst = 0.0
        for i in stream(5, "fd").choice(coords, 200, replace=False):
            e = np.zeros_like(flat)
            e[i] = 1e-3
            num = (fm_loss(ModelParams.from_flat(cfg, flat + e), batch, draws=draws)
                   - fm_loss(ModelParams.from_flat(cfg, flat - e), batch, draws=draws)) / 2e-3
            worst = max(worst, abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), 1e-8))
        assert worst < 1e-4


# -- 6 -------------------------------------------------------------------------

@criterion(6, "training sanity, EMA closed form and optimizer metadata")
def test_criterion_06_training(tmp_path):
    with Budget(300.0):
        settings = TrainSettings(model=ModelConfig(channels=2, embed_dim=8, hidden=64), seed=0, lr=2e-3)
        res = train([TrainStageConfig("s", (1, 1), 2000, batch_size=32)], TwoGaussiansSource(), settings)
        losses = [r["loss"] for r in res.log]
        assert len(losses) == 2000 and np.mean(losses[-200:]) < 0.5 * np.mean(losses[:200])

        const = res.state.params
        ema = EmaState(const.copy(), 0.999)
        for _ in range(25):
            ema = ema_update(ema, const)
        assert ema.shadow.flat().tobytes() == const.flat().tobytes()
        zeros = ModelParams(const.config, {k: np.zeros_like(v) for k, v in const.arrays.items()})
        ones = ModelParams(const.config, {k: np.ones_like(v) for k, v in const.arrays.items()})
        ema = EmaState(zeros, 0.5)
        for _ in range(12):
            ema = ema_update(ema, ones)
        assert np.all(ema.shadow.flat() == 1.0 - 0.5**12)

        save_train_state(tmp_path / "m.cvck", res.state, {"seed": 0})
        _, meta, _ = read_container(tmp_path / "m.cvck")
        assert meta["optimizer"]["beta2"] == 0.95


# -- 7 -------------------------------------------------------------------------

@criterion(7, "product pixels survive the pipeline bit for bit")
def test_criterion_07_preservation(mixture_model, sr_model):
    config = PipelineConfig()
    rigged = FunctionReward(lambda c: 0.1 + 0.1 * c.prompt_index * (1 if c.seed % 2 else -1) + 0.2)
    with Budget(300.0):
        emitted, item = 0, 0
        while emitted < 500 and item < 1000:
            p = catalog_item(7, item, 16, 16, 3)
            item += 1
            res = run_pipeline(p, "background_outpaint", config, mixture_model, rigged, sr_model)
            if res.image is None:
                continue
            emitted += 1
            job = prepare_job(p, "background_outpaint", config)
            known = job.known == 1
            assert res.base_image[:, known].tobytes() == job.masked_original[:, known].tobytes()
            hp = res.manifest.placement["hires"]
            top, left = hp["dy"], hp["dx"]
            h, w = p.hires.mask.shape
            window = res.image[:, top:top + h, left:left + w]
            m = p.hires.mask == 1
            assert window[:, m].tobytes() == p.hires.product_shot[:, m].tobytes()
        assert emitted == 500
        # ineligible inputs (solid backgrounds) emit nothing, so keep drawing until 500 outputs exist
        aspect, item = 0, 0
        while aspect < 500 and item < 1000:
            p = catalog_item(8, item, 16, 16, 3)
            item += 1
            res = run_pipeline(p, "aspect_ratio_outpaint", config, mixture_model, rigged, sr_model)
            if res.image is None:
                continue
            aspect += 1
            top = res.manifest.placement["hires"]["dy"]
            assert res.image[:, top:top + 48].tobytes() == p.hires.image.tobytes()
            assert res.base_image[:, 4:20].tobytes() == p.image.tobytes()
        assert aspect == 500


# -- 8 -------------------------------------------------------------------------

def _eligible(seed: int, n: int) -> list:
    out, i = [], 0
    while len(out) < n:
        p = catalog_item(seed, i, 16, 16)
        i += 1
        if check_eligibility(p, "background_outpaint").eligible:
            out.append(p)
    return out


@criterion(8, "reward-ranked best of two beats a single candidate")
def test_criterion_08_best_of_n(mixture_model):
    task = "background_outpaint"
    config = PipelineConfig(superres=False, post_filter_threshold=1.0)
    spec = RaterSpec(rho=0.05)
    with Budget(600.0):
        examples = []
        for p in _eligible(11, 400):
            job = prepare_job(p, task, config)
            res = run_pipeline(p, task, config, mixture_model, FunctionReward(lambda c: 0.5))
            for k, c in enumerate(res.candidates):
                recs = rate_pair(job.masked_original, c.image, job.known, "background", spec, 1,
                                 f"{p.sample_id}/{k}")
                examples.append(RewardExample(reward_features(job.masked_original, c.image, job.known),
                                              defect_fraction(recs)))
        reward = RewardModel(train_reward(examples))

        def accepted(job, c, tag):
            recs = rate_pair(job.masked_original, c.image, job.known, "background", spec, 2, tag)
            return not aggregate_review(recs).overall_defective

        top_only = base_only = n_top = n_base = 0
        inputs = _eligible(12, 500)
        for p in inputs:
            job = prepare_job(p, task, config)
            res = run_pipeline(p, task, config, mixture_model, reward)
            sel = res.manifest.selected
            a_top = accepted(job, res.candidates[sel], f"{p.sample_id}/{sel}")
            a_base = accepted(job, res.candidates[0], f"{p.sample_id}/0")
            n_top += a_top
            n_base += a_base
            top_only += a_top and not a_base
            base_only += a_base and not a_top
        # one-sided exact McNemar test on the discordant pairs
        pvalue = stats.binomtest(top_only, top_only + base_only, 0.5, alternative="greater").pvalue
        print(f"best-of-2 acceptance {n_top / len(inputs):.3f} vs single {n_base / len(inputs):.3f}, p={pvalue:.2e}")
        assert n_top > n_base and pvalue < 0.05


# -- 9 -------------------------------------------------------------------------

@criterion(9, "seed sweep ordering matches brute force")
def test_criterion_09_seed_sweep(mixture_model):
    seeds = list(range(64))

    def score(seed: int) -> float:
        return ((seed * 37) % 64) / 64.0  # distinct dyadic values, so means are exact

    inputs = [catalog_item(9, i, 16, 16) for i in range(20)]
    with Budget(300.0):
        report = seed_sweep(inputs, seeds, "background_outpaint", mixture_model,
                            FunctionReward(lambda c: score(c.seed)), PipelineConfig(superres=False))
        assert [e["seed"] for e in report.entries] == sorted(seeds, key=lambda s: (score(s), s))
        assert [e["rank"] for e in report.entries] == list(range(1, 65))
        assert all(e["mean_reward"] == score(e["seed"]) for e in report.entries)


# -- 10 ------------------------------------------------------------------------

@criterion(10, "harmonization removes the seam and keeps known pixels")
def test_criterion_10_harmonization():
    with Budget(1.0):
        known = np.zeros((12, 12), np.uint8)
        known[:, :6] = 1
        original = np.where(known[None] == 1, np.full((3, 12, 12), 0.8, np.float32), 0).astype(np.float32)
        generated = np.full((3, 12, 12), 0.2, np.float32)

        def max_jump(img):
            return max(np.abs(np.diff(img, axis=1)).max(), np.abs(np.diff(img, axis=2)).max())

        before = composite_cutout(generated, original, known)
        after = harmonize_boundary(generated, original, known)
        assert max_jump(after) < max_jump(before)
        assert after[:, known == 1].tobytes() == original[:, known == 1].tobytes()


# -- 11 ------------------------------------------------------------------------

@criterion(11, "review aggregation and no-defect rate arithmetic")
def test_criterion_11_review_arithmetic():
    with Budget(1.0):
        D, N = Answer.DEFECT, Answer.NO_DEFECT

        def rec(i, rater, p, b):
            return RaterRecord(str(i), rater, "background", {"Q_product": p, "Q_background": b})

        outcomes = [aggregate_review([rec(i, "a", p, b), rec(i, "b", N, N)])
                    for i, (p, b) in enumerate([(N, N), (D, N), (N, D), (D, D)])]
        report = no_defect_rates(outcomes)
        assert report.per_question == {"Q_product": 0.5, "Q_background": 0.5} and report.overall == 0.25
        check_rate_consistency({"Q_product": 84.0, "Q_background": 54.9}, 47.2)
        assert 47.2 <= min(84.0, 54.9)


# -- 12 ------------------------------------------------------------------------

@criterion(12, "aggregated rater loss")
def test_criterion_12_reward_loss():
    assert abs(aggregated_rater_loss(0.5, 0.5) - math.log(2)) < 1e-9
    grid = np.linspace(0, 1, 1001)
    for target in (0.0, 0.5, 1.0):
        losses = aggregated_rater_loss(grid, np.full_like(grid, target))
        assert abs(grid[np.argmin(losses)] - target) < 1e-9
    x = np.array([0.3, -1.2])
    ex = [RewardExample(x, 0.0), RewardExample(x, 1.0), RewardExample(np.ones(2), 0.0),
          RewardExample(-np.ones(2), 1.0)]
    p = train_reward(ex, RewardConfig(epochs=2000, weight_decay=0.0))
    assert abs(predict(p, x)[0] - 0.5) < 0.01


# -- 13 ------------------------------------------------------------------------

def _without_timings(obj):
    if isinstance(obj, dict):
        return {k: _without_timings(v) for k, v in obj.items() if k != "timings"}
    if isinstance(obj, list):
        return [_without_timings(v) for v in obj]
    return obj


def _snapshot(out: Path) -> dict:
    snap = {}
    for path in sorted(out.rglob("*")):
        if not path.is_file():
            continue
        name = str(path.relative_to(out))
        if path.suffix == ".json":
            snap[name] = _without_timings(json.loads(path.read_text()))
        elif path.suffix == ".jsonl":
            snap[name] = [_without_timings(json.loads(l)) for l in path.read_text().splitlines() if l.strip()]
        else:
            snap[name] = path.read_bytes()
    return snap


@criterion(13, "every CLI command is deterministic")
def test_criterion_13_cli_determinism(tmp_path):
    tiny = {"channels": 3, "embed_dim": 8, "hidden": 8, "time_freqs": 4}

    def cfg(name, doc):
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(doc))
        return str(path)

    def twice(command, config, name, *extra):
        snaps = []
        for run in ("a", "b"):
            out = tmp_path / f"{name}-{run}"
            assert main([command, "--config", config, "--out", str(out), *extra]) == EXIT_OK
            snaps.append(_snapshot(out))
        assert snaps[0] and snaps[0] == snaps[1], f"{command} is not deterministic"
        return tmp_path / f"{name}-a"

    flow = twice("train-flow", cfg("flow", {
        "model": tiny, "stages": [{"stage_id": "s", "resolution": [16, 16], "steps": 6, "batch_size": 2}],
        "data": {"kind": "mixture", "catalog_size": 16}}), "flow", "--seed", "5")
    ck = str(flow / "checkpoint.cvck")
    data = twice("make-dataset", cfg("data", {"catalog": {"count": 3}}), "data")
    reward = twice("eval-rewards", cfg("rewards", {
        "checkpoint": ck, "catalog": {"count": 6, "start": 50}, "pipeline": {"steps": 3},
        "reward": {"epochs": 40}}), "rewards")
    twice("sample", cfg("sample", {"checkpoint": ck, "prompt": "a blue disc", "size": [8, 8], "steps": 4,
                                   "count": 3}), "sample")
    common = {"checkpoint": ck, "reward_checkpoint": str(reward / "reward.cvck"),
              "inputs": str(data / "inputs.jsonl"), "pipeline": {"steps": 3, "sr_steps": 2,
                                                                  "post_filter_threshold": 1.0}}
    outs = twice("outpaint", cfg("outpaint", common), "outpaint")
    twice("outpaint", cfg("aspect", dict(common, task="aspect")), "aspect")
    twice("seed-sweep", cfg("sweep", {"checkpoint": ck, "reward_checkpoint": str(reward / "reward.cvck"),
                                      "catalog": {"count": 2}, "seeds": [3, 1, 4], "pipeline": {"steps": 2}}),
          "sweep")
    twice("simulate-review", cfg("review", {"outputs": str(outs / "manifest.jsonl"), "rater": {"rho": 0.2}}),
          "review")
    twice("benchmark", cfg("bench", {"model": tiny, "size": [4, 4], "steps": 5}), "bench")
