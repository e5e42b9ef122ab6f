"""Acceptance suite: one test per criterion, each printing its measured values.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary ends with
one PASS/FAIL line per criterion.  Criteria 6 to 9 train models and take
several minutes each.
"""

import filecmp
import os
import time

import numpy as np
import pytest

from orthoflow import autodiff as ad
from orthoflow import cli
from orthoflow.cayley import TimeGrid, dense_cayley, integrate, integrate_factors, low_rank_step
from orthoflow.experiments import ablation, default_config, diagonalization, koopman, ntk, pca1d
from orthoflow.fields import GeneratorParams
from orthoflow.function_space import Domain, IndexPrior, fourier_values, sample_quadrature, uniform_grid
from orthoflow.objectives import ntk_kernel, ntk_terms, quadratic_terms
from orthoflow.training import build_task, stream_rng, train
from orthoflow.universality import random_special_orthogonal, verify_universality

criterion = pytest.mark.criterion


class Timer:
    def __init__(self, cap):
        self.cap = cap
        self.start = time.perf_counter()

    @property
    def elapsed(self):
        return time.perf_counter() - self.start

    def check(self):
        assert self.elapsed < self.cap, f"runtime {self.elapsed:.1f} s exceeds the {self.cap} s cap"


# -- 1 ----------------------------------------------------------------------------------------


@criterion(1, "structure preservation over 20 Cayley steps, rank 10, D=1024")
def test_structure_preservation():
    timer = Timer(10)
    D, n = 1024, 32
    pts = uniform_grid(Domain(1), D)  # reference elements are exactly orthonormal here
    phi = fourier_values(IndexPrior(1).ordered(n), pts, 1)
    G0 = np.einsum("adc,bdc->ab", phi, phi) / D
    worst_norm = worst_inner = 0.0
    # random factors, and a randomly perturbed neural generator
    U, S = ablation.random_factors(10, D, 20, seed=1, scale=4.0)
    out = integrate_factors(ad.Tensor(U), ad.Tensor(S), ad.Tensor(phi[:, :, 0]), D).data
    evolved = [out[:, :, None]]
    params = GeneratorParams(1, 1, rank=10, seed=2, width=64, depth=2)
    rng = np.random.default_rng(3)
    for p in params.parameters():
        p.data = p.data + rng.standard_normal(p.shape) * 0.3
    evolved.append(integrate(params, TimeGrid.random(20, seed=4), pts, ad.Tensor(phi)).data)
    for E in evolved:
        G = np.einsum("adc,bdc->ab", E, E) / D
        worst_norm = max(worst_norm, np.abs(np.diag(G) - 1.0).max())
        worst_inner = max(worst_inner, np.abs(G - G0).max())
    moved = max(np.abs(E - phi).max() for E in evolved)
    print(f"max norm deviation {worst_norm:.2e}, max inner-product change {worst_inner:.2e}, "
          f"max value change {moved:.2f}, {timer.elapsed:.1f} s")
    assert moved > 0.1  # the flows are far from the identity
    assert worst_norm <= 1e-8 and worst_inner <= 1e-8
    timer.check()


# -- 2 ----------------------------------------------------------------------------------------


@criterion(2, "Euler ablation per-step norm factors")
def test_euler_factors():
    timer = Timer(5)
    worst = 0.0
    for sigma, dt in [(1.0, 0.05), (2.5, 0.1), (0.3, 0.5), (4.0, 0.25), (1.0, 1.0)]:
        f = ablation.step_factors(sigma, dt)
        expected = np.sqrt(1.0 + (dt * sigma) ** 2)
        worst = max(worst, abs(f["euler-fwd"] - expected), abs(f["euler-bwd"] - 1.0 / expected))
    print(f"max factor error {worst:.2e}, {timer.elapsed:.2f} s")
    assert worst <= 1e-10
    timer.check()


# -- 3 ----------------------------------------------------------------------------------------


@criterion(3, "Woodbury step equals the dense Cayley matrix")
def test_dense_equivalence():
    timer = Timer(10)
    rng = np.random.default_rng(0)
    worst = 0.0
    for r in (2, 5, 10):
        for _ in range(50):
            D = int(rng.integers(r, 65))
            U = rng.standard_normal((r, D)) * rng.uniform(0.1, 2.0)
            M = rng.standard_normal((r, r))
            S = M - M.T
            phi = rng.standard_normal((int(rng.integers(1, 6)), D))
            fast = low_rank_step(ad.Tensor(U), ad.Tensor(S), ad.Tensor(phi), D).data
            slow = (dense_cayley(U, S, D) @ phi.T).T
            worst = max(worst, np.linalg.norm(fast - slow))
    print(f"max Frobenius difference {worst:.2e} over 150 trials, {timer.elapsed:.2f} s")
    assert worst <= 1e-10
    timer.check()


# -- 4 ----------------------------------------------------------------------------------------


def gradient_errors(task, coords=20, seed=0):
    """Relative errors of reverse-mode against central differences on random coordinates."""
    rng = np.random.default_rng(seed)
    named = {}
    for mname, module in task.modules.items():
        for k, p in module.named_parameters().items():
            p.data = p.data + rng.standard_normal(p.shape) * 0.2  # move off the near-identity start
            named[f"{mname}.{k}"] = p
    points = sample_quadrature(task.domain, task.config["D"], stream_rng(seed, "quadrature", 0))
    grid = TimeGrid.random(5, stream_rng(seed, "grid", 0))

    def evaluate():
        return task.step_loss(points, grid, stream_rng(seed, "index", 0), stream_rng(seed, "data", 0))

    def loss():
        return evaluate()[0]

    def descended(name):
        # the PCA mean field sees the objective through a stop-gradient and descends its own loss
        if name.startswith("psi.") and isinstance(task, pca1d.PCATask):
            return lambda: evaluate()[1]["mean-loss"]
        return lambda: loss().item()

    for module in task.modules.values():
        module.zero_grad()
    loss().backward()
    names = list(named)
    sizes = np.array([named[k].data.size for k in names], dtype=np.float64)
    gmax = max(np.abs(named[k].grad).max() for k in names)
    errors = []
    for _ in range(coords):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        p = named[name]
        idx = tuple(int(rng.integers(0, s)) for s in p.shape)
        fd = ad.central_difference(descended(name), p.data, idx, step=1e-5)
        g = p.grad[idx]
        # coordinates whose gradient is below 1e-8 of the largest entry carry only round-off
        errors.append(abs(fd - g) / max(abs(fd), abs(g), 1e-8 * gmax))
    return np.array(errors)


@criterion(4, "reverse-mode gradients of the PCA, NTK and Koopman objectives through L=5")
def test_gradients():
    timer = Timer(60)
    small = dict(rank=3, steps_L=5, D=32, width=16, depth=2, n_tail=4, tau=1e-2, seed=1)
    tasks = {
        "pca": build_task(default_config("pca", **small)),
        "ntk": build_task(default_config("ntk", snapshot=50, moons=40, **small)),
        "koopman": build_task(default_config("koopman", **small)),
    }
    worst = {name: float(gradient_errors(task, seed=i).max()) for i, (name, task) in enumerate(tasks.items())}
    print("max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {timer.elapsed:.1f} s")
    assert all(v <= 1e-3 for v in worst.values())
    timer.check()


# -- 5 ----------------------------------------------------------------------------------------


@criterion(5, "universality on SO(4) and SO(8) with second-order convergence")
def test_universality():
    timer = Timer(180)
    pts = uniform_grid(Domain(1), 2048)
    rng = np.random.default_rng(2024)
    results = {4: [], 8: []}
    for n, count in ((4, 20), (8, 5)):
        for _ in range(count):
            Q = random_special_orthogonal(n, rng)
            coarse = verify_universality(Q, 200, pts)
            fine = verify_universality(Q, 400, pts)
            order = np.log2(coarse.frobenius_error / fine.frobenius_error)
            results[n].append((coarse.frobenius_error, order, coarse.norm_drift))
    e4 = max(r[0] for r in results[4])
    e8 = max(r[0] for r in results[8])
    order = min(r[1] for rs in results.values() for r in rs)
    drift = max(r[2] for rs in results.values() for r in rs)
    print(f"max error SO(4) {e4:.2e}, SO(8) {e8:.2e}, min order {order:.2f}, drift {drift:.1e}, {timer.elapsed:.0f} s")
    assert e4 <= 1e-3 and e8 <= 5e-3 and order >= 1.8
    timer.check()


# -- 6 ----------------------------------------------------------------------------------------


@criterion(6, "diagonalisation of the rank-5 operator")
def test_diagonalization():
    timer = Timer(600)
    cfg = default_config("diag", eval_every=100)
    assert cfg["budget"] <= 5000
    result = train(cfg)
    evals = [(r["eval-full-objective"], r["eval-bound"]) for r in result.rows if "eval-full-objective" in r]
    excess = max(v - b for v, b in evals)
    rep = diagonalization.diag_report(result.task)
    rel = np.abs(rep.rayleigh - rep.spectrum) / rep.spectrum
    print(f"max objective - bound {excess:.2e} over {len(evals)} evaluations, max Rayleigh error {rel.max():.2%}, "
          f"alignments {np.array2string(rep.alignment[:3], precision=4)}, {timer.elapsed:.0f} s")
    assert excess <= 1e-6
    assert np.all(rel <= 0.05)
    assert np.all(rep.alignment[:3] >= 0.9)
    timer.check()


# -- 7 ----------------------------------------------------------------------------------------


@criterion(7, "1-D PCA against the Fourier baseline")
def test_pca():
    timer = Timer(900)
    cfg = default_config("pca", budget=5000, eval_every=500)
    assert (cfg["rank"], cfg["steps_L"], cfg["D"], cfg["tau"], cfg["n_tail"]) == (30, 20, 64, 1e-3, 16)
    result = train(cfg)
    rep = pca1d.pca_report(result.task)
    at = {c: c - 1 for c in (4, 8, 16, 32, 100)}
    ratio = rep.fourier_error[at[100]] / rep.learned_error[at[100]]
    dominance = {c: rep.learned_energy[at[c]] - rep.fourier_energy[at[c]] for c in (4, 8, 16, 32)}
    print(f"cutoff 100: learned {rep.learned_error[99]:.2e}, Fourier {rep.fourier_error[99]:.2e} (ratio {ratio:.2f}); "
          "energy margins " + ", ".join(f"{c}: {v:+.1e}" for c, v in dominance.items()) + f"; {timer.elapsed:.0f} s")
    assert ratio >= 3.0
    assert all(v > 0 for v in dominance.values())
    timer.check()


# -- 8 ----------------------------------------------------------------------------------------


@criterion(8, "Koopman rollout conserves energy")
def test_koopman():
    timer = Timer(900)
    cfg = default_config("koopman")
    task = build_task(cfg)
    pts = uniform_grid(Domain(2), 32)
    grid = TimeGrid.uniform(cfg["steps_L"])
    before = koopman.stratum_loss(task, pts, grid)
    result = train(cfg, task=task)
    after = koopman.stratum_loss(result.task, pts, grid)
    rep = koopman.koopman_rollout(result.task, steps=20)
    learned, rk1 = rep.relative_drift("learned"), rep.relative_drift("rk1")
    print(f"learned drift {learned:.1e}, RK1 drift {rk1:.1e}, one-step loss {before:.3e} -> {after:.3e} "
          f"({before / after:.1f}x), {timer.elapsed:.0f} s")
    assert learned <= 1e-6
    assert rk1 >= 10 * learned
    assert before / after >= 5.0
    timer.check()


# -- 9 ----------------------------------------------------------------------------------------


@criterion(9, "NTK Fubini identity and grid-eigensolver alignment")
def test_ntk():
    timer = Timer(1200)
    cfg = default_config("ntk")
    assert cfg["snapshot"] == 5000
    result = train(cfg)
    task = result.task
    pts = sample_quadrature(Domain(2), 1024, seed=11)
    q = ad.Tensor(fourier_values(IndexPrior(2).ordered(6), pts, 1))
    direct = ntk_terms(q, task.network.per_sample_grads(pts.points)).data
    double = quadratic_terms(q, ntk_kernel(task.network), pts).data
    fubini = float(np.max(np.abs(direct - double) / np.abs(direct)))
    rep = ntk.ntk_report(task)
    print(f"Fubini relative gap {fubini:.1e}, principal cosines {np.array2string(rep.cosines, precision=3)}, "
          f"classifier accuracy {rep.accuracy:.2f}, {timer.elapsed:.0f} s")
    assert fubini <= 1e-6
    assert np.all(rep.cosines >= 0.8)
    timer.check()


# -- 10 ---------------------------------------------------------------------------------------

TINY = ["--set", "width=16", "--set", "depth=2", "--set", "rank=3", "--set", "steps_L=3", "--set", "budget=3",
        "--set", "eval_every=2", "--set", "plots=false"]


def _runs(tmp, ck):
    yield "selftest", []
    yield "verify-universality", ["--set", "n=3", "--set", "steps=20", "--set", "D=128"]
    yield "ablate-integrators", ["--set", "D=64", "--set", "plots=false"]
    yield "train-pca", TINY + ["--set", "D=16", "--set", "eval_samples=4"]
    yield "train-diag", TINY + ["--set", "D=32"]
    yield "train-koopman", TINY + ["--set", "D=64"]
    yield "train-ntk", TINY + ["--set", "D=64", "--set", "snapshot=20", "--set", "moons=40"]
    yield "rollout", ["--set", f"checkpoint={ck}", "--set", "steps=3", "--set", "side=16", "--set", "plots=false"]
    yield "eval", ["--set", f"checkpoint={ck}", "--set", "plots=false"]


@criterion(10, "every subcommand is byte-reproducible")
def test_determinism(tmp_path):
    ck = tmp_path / "run0" / "train-koopman" / "checkpoint.bin"
    compared = 0
    for command, args in _runs(tmp_path, ck):
        dirs = []
        for rep in ("run0", "run1"):
            out = tmp_path / rep / command
            assert cli.run([command, "--out", str(out), "--seed", "11", "--quiet"] + args) == 0, command
            dirs.append(out)
        files = sorted(f for f in os.listdir(dirs[0]) if f.endswith(".csv") and f != "timing.csv")
        files.append("config.toml")
        assert files[:-1], f"{command} wrote no CSV"
        match, mismatch, errors = filecmp.cmpfiles(dirs[0], dirs[1], files, shallow=False)
        assert not mismatch and not errors, (command, mismatch, errors)
        compared += len(match)
    print(f"{compared} files byte-identical across 9 subcommands")
