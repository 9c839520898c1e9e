"""Alternating D/T training.

One iteration is one discriminator update followed by ``t_steps`` (default
3) transformation updates on the same batch. Each T update recomputes T(x)
and D's forward pass on it. D is frozen during the T updates, so the
ground-truth features are computed once per iteration; recomputing them
would reproduce the same values because batchnorm runs on batch
statistics.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from panforge import tensor as tc
from panforge.errors import NumericalError
from panforge.losses import LossConfig, loss_D, loss_T, perceptual_distance, pixel_l2
from panforge.networks import DiscrimNet, TransformNet, discrim_forward, transform_forward
from panforge.optim import AdamState, adam_step
from panforge.tensor import Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "J_T", "J_D", "s", "prob_real", "prob_fake")


@dataclass
class IterationReport:
    iteration: int
    J_T: float
    J_D: float
    s: float
    prob_real: float
    prob_fake: float
    hinge: float = math.nan
    pixel: float = math.nan

    def log_line(self):
        vals = (self.J_T, self.J_D, self.s, self.prob_real, self.prob_fake)
        return "\t".join([str(self.iteration)] + [repr(float(v)) for v in vals])


def _scalar(t: Tensor):
    return float(t.data.reshape(-1)[0])


def _check_finite(loss: Tensor, what, iteration, replay=None):
    """Raise NumericalError if ``loss`` is not finite.

    The op named in the error is found by re-running the forward passes
    (``replay``) with per-op checking switched on, which also catches ops
    that ran outside the tape. Without a replay the tape is scanned.
    """
    if np.isfinite(loss.data).all():
        return
    graph = loss._graph
    op = None
    if replay is not None:
        try:
            with tc.no_grad(), tc.debug_mode(), np.errstate(all="ignore"):
                replay()
        except NumericalError as exc:
            op = exc.op
    if op is None and graph is not None:
        node = graph.first_nonfinite()
        op = node.op if node is not None else None
    if graph is not None:
        graph.reset()
    op = op or "unknown"
    raise NumericalError(f"{what} became non-finite at iteration {iteration}; first non-finite op: {op}", op=op)


class Trainer:
    def __init__(self, T: TransformNet, D: DiscrimNet, loss_cfg: LossConfig | None = None,
                 lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8, t_steps=3, batch_size=4, seed=0):
        self.T = T
        self.D = D
        self.loss_cfg = loss_cfg or LossConfig()
        self.t_steps = t_steps
        self.batch_size = batch_size
        self.seed = seed
        hyper = dict(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.adam_T = AdamState.for_params(T.parameters(), **hyper)
        self.adam_D = AdamState.for_params(D.parameters(), **hyper)
        self.iteration = 0
        self.d_updates = 0
        self.t_updates = 0

    # -- data order -------------------------------------------------------

    def batch_indices(self, iteration, n):
        """Indices for ``iteration``: a fresh seeded permutation per epoch.

        Stateless in everything but (seed, iteration), so resuming from a
        checkpoint replays the same batches. Indices are sorted so the batch
        content does not depend on the draw order.
        """
        start = iteration * self.batch_size
        idx = []
        for pos in range(start, start + self.batch_size):
            epoch, offset = divmod(pos, n)
            perm = np.random.default_rng([self.seed, epoch]).permutation(n)
            idx.append(int(perm[offset]))
        return sorted(idx)

    # -- updates ----------------------------------------------------------

    def _replay(self, x: Tensor, y: Tensor):
        """Forward passes and losses of one iteration, for diagnostics only."""
        cfg = self.loss_cfg
        fake = transform_forward(self.T, x, "train")
        p_fake = s = pix = None
        if cfg.uses_discriminator:
            p_real, f_real = discrim_forward(self.D, y, "train")
            p_fake, f_fake = discrim_forward(self.D, fake, "train")
            if cfg.uses_perceptual:
                s = perceptual_distance(f_fake, f_real, cfg.lambdas)
            loss_D(p_real, p_fake, s, cfg.margin, cfg.variant)
        if cfg.uses_pixel:
            pix = pixel_l2(fake, y)
        loss_T(p_fake, s, cfg.variant, pixel_term=pix, pixel_weight=cfg.pixel_weight)

    def _d_update(self, x: Tensor, y: Tensor):
        cfg = self.loss_cfg
        T, D = self.T, self.D
        with tc.no_grad():
            fake = transform_forward(T, x, "train")
        D.set_requires_grad(True)
        D.zero_grad()
        p_real, f_real = discrim_forward(D, y, "train")
        p_fake, f_fake = discrim_forward(D, fake, "train")
        s = perceptual_distance(f_fake, f_real, cfg.lambdas) if cfg.uses_perceptual else None
        jd = loss_D(p_real, p_fake, s, cfg.margin, cfg.variant)
        _check_finite(jd, "J_D", self.iteration, lambda: self._replay(x, y))
        out = dict(J_D=_scalar(jd), prob_real=float(p_real.data.mean()), prob_fake=float(p_fake.data.mean()))
        if s is not None:
            out["hinge"] = max(0.0, cfg.margin - _scalar(s))
        tc.backprop(jd)
        adam_step(D.parameters(), self.adam_D)
        D.zero_grad()
        self.d_updates += 1
        return out

    def _t_updates(self, x: Tensor, y: Tensor):
        cfg = self.loss_cfg
        T, D = self.T, self.D
        f_real = None
        if cfg.uses_discriminator:
            D.set_requires_grad(False)
            if cfg.uses_perceptual:
                with tc.no_grad():
                    _, f_real = discrim_forward(D, y, "train")
        out = {}
        try:
            for _ in range(self.t_steps):
                T.zero_grad()
                fake = transform_forward(T, x, "train")
                p_fake = s = pix = None
                if cfg.uses_discriminator:
                    p_fake, f_fake = discrim_forward(D, fake, "train")
                    if cfg.uses_perceptual:
                        s = perceptual_distance(f_fake, f_real, cfg.lambdas)
                if cfg.uses_pixel:
                    pix = pixel_l2(fake, y)
                jt = loss_T(p_fake, s, cfg.variant, pixel_term=pix, pixel_weight=cfg.pixel_weight)
                _check_finite(jt, "J_T", self.iteration, lambda: self._replay(x, y))
                out = dict(J_T=_scalar(jt), s=_scalar(s) if s is not None else math.nan,
                           pixel=_scalar(pix) if pix is not None else math.nan)
                tc.backprop(jt)
                adam_step(T.parameters(), self.adam_T)
                T.zero_grad()
                self.t_updates += 1
        finally:
            D.set_requires_grad(True)
        return out

    def train_iteration(self, x, y) -> IterationReport:
        """One D update then ``t_steps`` T updates on the batch (x, y)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        y = y if isinstance(y, Tensor) else Tensor(y)
        rep = dict(J_D=math.nan, prob_real=math.nan, prob_fake=math.nan, hinge=math.nan)
        with tc.graph_scope():
            if self.loss_cfg.uses_discriminator:
                rep.update(self._d_update(x, y))
            rep.update(self._t_updates(x, y))
        report = IterationReport(self.iteration, rep["J_T"], rep["J_D"], rep["s"], rep["prob_real"],
                                 rep["prob_fake"], hinge=rep["hinge"], pixel=rep["pixel"])
        self.iteration += 1
        return report

    def fit(self, inputs, targets, iterations, on_report=None, checkpoint_every=0, checkpoint_path=None):
        """Train until ``self.iteration == iterations``.

        ``inputs``/``targets`` are (n, 3, H, W) arrays in [-1, 1].
        """
        n = len(inputs)
        reports = []
        while self.iteration < iterations:
            idx = self.batch_indices(self.iteration, n)
            report = self.train_iteration(inputs[idx], targets[idx])
            reports.append(report)
            if on_report is not None:
                on_report(report)
            if checkpoint_every and checkpoint_path and self.iteration % checkpoint_every == 0:
                from panforge.checkpoint import save_checkpoint
                save_checkpoint(checkpoint_path, self)
                log.info("checkpoint at iteration %d -> %s", self.iteration, checkpoint_path)
        return reports

    def transform(self, inputs, batch_size=None, mode="infer"):
        """Run T over an (n, 3, H, W) array and return the outputs as an array."""
        batch_size = batch_size or self.batch_size
        outs = []
        with tc.no_grad():
            for i in range(0, len(inputs), batch_size):
                outs.append(transform_forward(self.T, Tensor(inputs[i:i + batch_size]), mode).data)
        return np.concatenate(outs, axis=0)
