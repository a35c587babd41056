"""Acceptance suite.

One test per acceptance criterion, each printing a PASS line when it
holds. Tolerances and runtime limits are frozen here; run with ``-s`` to
see the per-criterion lines stream.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import beta as beta_dist

from oovkit.alignment import alignment_loss, alignment_loss_grad, PromptTable
from oovkit.attribution import GradientMapSet, dirichlet_log_density, mine_pseudo_oov
from oovkit.cli import main as cli_main
from oovkit.density import LDPConfig, kde_density, ld_hinge
from oovkit.harness import run_experiment
from oovkit.metrics import ClassSplit, EvalSet, full_report
from oovkit.prompts import ClassGaussianModel, synthesize_oov_prompt
from oovkit.types import RunConfig, seeded_rng

from naive_metrics import naive_report, random_fixture
from test_density import naive_kde
from test_metrics import load_handcheck


def report(criterion: str):
    print(f"ACCEPTANCE {criterion}: PASS")


class TestCriterion1GradientCorrectness:
    def test_gradients_match_finite_differences(self):
        start = time.time()
        rng = seeded_rng(101)
        # low-density hinge gradient at 100 active points
        bank = rng.normal(size=(40, 5), scale=0.6)
        cfg = LDPConfig(h=0.8, tau_hat=1e-5, focal_alpha=2.0)
        checked = 0
        while checked < 100:
            z = rng.normal(size=5, scale=0.8)
            s = float(rng.uniform(0.2, 0.8))
            loss, grad = ld_hinge(z, bank, cfg, s)
            if loss == 0.0:
                continue
            fd = np.zeros(5)
            for j in range(5):
                zp, zm = z.copy(), z.copy()
                zp[j] += 1e-5
                zm[j] -= 1e-5
                fd[j] = (ld_hinge(zp, bank, cfg, s)[0] - ld_hinge(zm, bank, cfg, s)[0]) / 2e-5
            assert np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-300) < 1e-5
            checked += 1

        # alignment loss gradient at 100 random points
        vecs = rng.normal(size=(6, 8))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        table = PromptTable(iv_prompts=vecs[:4], oov_prompt=vecs[4], background_prompt=vecs[5])
        for _ in range(100):
            f = rng.normal(size=8)
            y = int(rng.integers(0, 6))
            tau = 0.5
            _, grad = alignment_loss_grad(f[None, :], [y], table, tau)
            fd = np.zeros(8)
            for j in range(8):
                fp, fm = f.copy(), f.copy()
                fp[j] += 1e-6
                fm[j] -= 1e-6
                fd[j] = (
                    alignment_loss(fp[None, :], [y], table, tau)
                    - alignment_loss(fm[None, :], [y], table, tau)
                ) / 2e-6
            assert np.linalg.norm(grad[0] - fd) / max(np.linalg.norm(fd), 1e-300) < 1e-5
        elapsed = time.time() - start
        assert elapsed < 10.0, f"took {elapsed:.1f}s"
        report("1 (gradient correctness, rel err < 1e-5, < 10 s)")


class TestCriterion2KdeOracle:
    def test_kde_matches_naive_reference(self):
        start = time.time()
        rng = seeded_rng(202)
        for _ in range(1000):
            d = int(rng.integers(1, 17))
            n = int(rng.integers(1, 201))
            bank = rng.normal(size=(n, d))
            z = rng.normal(size=d)
            h = float(rng.uniform(0.2, 2.0))
            assert abs(kde_density(z, bank, h) - naive_kde(z, bank, h)) <= 1e-12
        elapsed = time.time() - start
        assert elapsed < 5.0, f"took {elapsed:.1f}s"
        report("2 (KDE oracle equivalence, 1e-12 over 1000 cases, < 5 s)")


class TestCriterion3DirichletDensity:
    def test_beta_closed_form_and_quadrature(self):
        rng = seeded_rng(303)
        for _ in range(500):
            x = float(rng.uniform(0.02, 0.98))
            a, b = rng.uniform(0.5, 20.0, size=2)
            ours = math.exp(dirichlet_log_density([x, 1.0 - x], [a, b]))
            assert ours == pytest.approx(beta_dist.pdf(x, a, b), abs=1e-9)

        alpha = np.array([2.5, 1.8, 3.2])

        def pdf(x2, x1):
            x3 = 1.0 - x1 - x2
            if min(x1, x2, x3) <= 0.0:
                return 0.0
            return math.exp(dirichlet_log_density([x1, x2, x3], alpha))

        total, _ = integrate.dblquad(pdf, 0.0, 1.0, 0.0, lambda x1: 1.0 - x1)
        assert total == pytest.approx(1.0, abs=1e-3)
        report("3 (Dirichlet density: Beta closed form 1e-9, simplex quadrature 1e-3)")


class TestCriterion4OutlierSynthesis:
    def test_selected_prompt_beats_pool_95th_percentile(self):
        start = time.time()
        rng = seeded_rng(404)
        k, d = 5, 8
        means = rng.normal(scale=3.0, size=(k, d))
        a = rng.normal(size=(d, d))
        cov = 0.05 * (a @ a.T) + 0.02 * np.eye(d)
        model = ClassGaussianModel(means=means, covariance=cov)
        for trial in range(1000):
            _, cands = synthesize_oov_prompt(
                model, 64, seeded_rng(5000 + trial), return_candidates=True
            )
            dists = np.array([c.mahalanobis_sq for c in cands])
            selected = next(c for c in cands if c.selected)
            assert selected.mahalanobis_sq >= np.percentile(dists, 95.0)
        elapsed = time.time() - start
        assert elapsed < 30.0, f"took {elapsed:.1f}s"
        report("4 (outlier synthesis rank rule >= p95 in 1000/1000 trials, < 30 s)")


class TestCriterion5MetricsOracle:
    def test_hand_fixture_and_naive_reference(self):
        es, split = load_handcheck()
        rep = full_report(es, split)
        assert rep.map_iv == pytest.approx(100 * 11 / 12, abs=1e-9)
        assert rep.map_oov == pytest.approx(100.0, abs=1e-9)
        assert rep.map_seen == pytest.approx(100 * 5 / 6, abs=1e-9)
        assert rep.map_unseen == pytest.approx(100.0, abs=1e-9)
        assert rep.r_oov == pytest.approx(100.0, abs=1e-9)
        assert rep.ar_oov == pytest.approx(40.0, abs=1e-9)
        assert rep.wi == pytest.approx(100 / 3, abs=1e-9)
        assert rep.aose == 1

        rng = seeded_rng(505)
        for _ in range(100):
            dets, gts, seen, unseen, oov = random_fixture(rng)
            es = EvalSet(detections=dets, ground_truth=gts)
            got = full_report(es, ClassSplit(seen=seen, unseen=unseen, oov=oov))
            ref = naive_report(dets, gts, seen, unseen, oov)
            assert got.aose == ref["aose"]
            for key in ("map_iv", "map_oov", "map_seen", "map_unseen", "r_oov", "ar_oov", "wi"):
                assert getattr(got, key) == pytest.approx(ref[key], abs=1e-9), key
        report("5 (metrics: hand fixture exact, naive reference on 100 fixtures)")


class TestCriterion6DensitySeparation:
    def test_paired_arms_separate_densities_and_recall(self):
        start = time.time()
        cfg = RunConfig(seed=0, k=6, d=16)
        rep = run_experiment(cfg)
        elapsed = time.time() - start
        ratio = rep.density_ratio
        gain = rep.r_oov_gain
        assert ratio <= 0.7, f"density ratio {ratio:.4f} exceeds 0.7"
        assert gain >= 5.0, f"R_OOV gain {gain:.2f} below 5 points"
        assert elapsed < 300.0, f"took {elapsed:.0f}s"
        report(
            f"6 (density separation: ratio {ratio:.3f} <= 0.7, "
            f"R_OOV gain {gain:+.1f} >= 5, {elapsed:.0f}s < 5 min)"
        )


class TestCriterion7MiningQuotas:
    def graded(self, pid, fg, level):
        maps = np.zeros((2, 4, 4))
        maps[0] = 1.0
        maps[1] = -1.0
        maps[1].ravel()[:level] = 1.0
        return GradientMapSet(proposal_id=pid, maps=maps, is_foreground=fg)

    def test_quota_axes_and_order_invariance(self):
        props = []
        for i in range(12):
            props.append((self.graded(f"fg{i:02d}", True, i), np.full(3, float(i))))
        for i in range(30):
            props.append((self.graded(f"bg{i:02d}", False, i % 16), np.full(3, 100.0 + i)))
        rng = seeded_rng(707)
        for top_k in (1, 3, 5, 10):
            for ratio in ((1, 1), (1, 2), (1, 3)):
                batch = mine_pseudo_oov(props, top_k, ratio)
                assert len(batch.foreground) == top_k
                assert len(batch.background) == top_k * ratio[1]
                shuffled = list(props)
                rng.shuffle(shuffled)
                again = mine_pseudo_oov(shuffled, top_k, ratio)
                assert [p.proposal_id for p in again.foreground] == [
                    p.proposal_id for p in batch.foreground
                ]
                assert [p.proposal_id for p in again.background] == [
                    p.proposal_id for p in batch.background
                ]
        report("7 (mining quotas exact over top-k x ratio grid, order invariant)")


class TestCriterion8Determinism:
    def test_train_toy_byte_identical(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(RunConfig(seed=0).to_dict()))
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert cli_main(["train-toy", "--config", str(cfg_path), "--out", str(out_a)]) == 0
        assert cli_main(["train-toy", "--config", str(cfg_path), "--out", str(out_b)]) == 0
        for name in ("report.json", "losses.csv", "densities.csv", "metrics.csv"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name
        report("8 (train-toy byte-identical reports across two invocations)")
