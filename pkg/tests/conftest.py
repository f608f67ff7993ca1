import numpy as np
import pytest
import torch

torch.use_deterministic_algorithms(True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference_check(f, x, n_dirs=4, eps=1e-6, seed=0):
    """Largest relative error between autograd and central differences of scalar ``f``.

    Compares directional derivatives along random unit directions in float64.
    Errors are taken relative to the gradient norm, which bounds every unit
    directional derivative; this keeps round-off from dominating directions
    nearly orthogonal to the gradient.
    """
    x = x.detach().clone().double().requires_grad_(True)
    out = f(x)
    (grad,) = torch.autograd.grad(out, x)
    gen = torch.Generator().manual_seed(seed)
    gnorm = float(grad.norm())
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_dirs):
            v = torch.randn(x.shape, generator=gen, dtype=torch.float64)
            v /= v.norm()
            num = (f(x + eps * v) - f(x - eps * v)) / (2 * eps)
            ana = (grad * v).sum()
            denom = max(abs(float(num)), abs(float(ana)), gnorm, 1e-12)
            worst = max(worst, abs(float(num - ana)) / denom)
    return worst


# acceptance bookkeeping ---------------------------------------------------------

ACCEPTANCE = {}


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


# shared toy runs ----------------------------------------------------------------


class ToyRuns:
    """Trains each (ablation, seed) toy run once per session."""

    def __init__(self, root):
        self.root = root
        self.cache = {}
        self._corpora = None

    @property
    def corpora(self):
        if self._corpora is None:
            from physgan.presets import toy_corpora

            self._corpora = toy_corpora()
        return self._corpora

    def get(self, variant="full", seed=0):
        import time

        from physgan.evaluate import ABLATION_VARIANTS, evaluate_samples, physics_residual
        from physgan.presets import toy_train_config
        from physgan.trainer import train

        key = (variant, seed)
        if key not in self.cache:
            ablation = dict(ABLATION_VARIANTS)[variant]
            tr, ev = self.corpora
            run_dir = self.root / f"{variant}_seed{seed}"
            t0 = time.perf_counter()
            trainer = train(toy_train_config(seed=seed, ablation=ablation), run_dir, tr, ev)
            elapsed = time.perf_counter() - t0
            rep = evaluate_samples(trainer.G, ev)
            self.cache[key] = {
                "dir": run_dir,
                "G": trainer.G,
                "steps": trainer.step,
                "seconds": elapsed,
                "psnr": rep.mean_psnr,
                "ssim": rep.mean_ssim,
                "residual": physics_residual(trainer.G, ev),
            }
        return self.cache[key]


@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    return ToyRuns(tmp_path_factory.mktemp("toy_runs"))
