"""Flow-matching training and conditional sampling.

Training draws tau ~ U[0,1) and noise x0 ~ N(0,I) per element, interpolates
x_tau = (1-tau) x0 + tau x1, asks the network for the clean window, and
scores it with a per-block MSE (generation block and skeleton block each
averaged over their own elements, so the wider block cannot dominate).

Sampling converts the clean prediction into a velocity
    v = (pred - x_tau) / (1 - min(tau, 1 - tau_clamp))
and integrates it with RK4 from 0 to 1 - tau_clamp. Guidance composes the
velocities of up to four condition branches (unconditional, text-only,
skeleton-only, both) with user weights; zero-weight branches are never
evaluated, and a lone branch with coefficient one is returned untouched, so
the degenerate settings are bit-exact.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import NumericsError, Tensor
from .checkpoint import load_arrays, save_arrays
from .features import FeatureLayout, NormStats, build_skeleton_condition, decode_fk
from .kinematics import MotionClip, Skeleton
from .model import ModelConfig, model_forward
from .ode import rk4_integrate
from .synthdata import PAD_ID, DatasetItem, PromptTokens

__all__ = [
    "GuidanceWeights", "ConditionSet", "TrainConfig", "AdamW",
    "interpolate", "pred_to_velocity", "flow_loss", "block_mses",
    "drop_conditions", "cfg_velocity", "guidance_branches", "compose_velocities",
    "sample", "train", "eval_flow_loss",
    "save_checkpoint", "load_checkpoint", "GENERATION_WEIGHTS",
]

TAU_CLAMP = 1e-3


@dataclass(frozen=True)
class GuidanceWeights:
    """Per-branch guidance strengths; any of them may be zero."""

    text: float = 0.0
    skel: float = 0.0
    both: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.text, self.skel, self.both)):
            raise ValueError("guidance weights must be finite")


GENERATION_WEIGHTS = GuidanceWeights(text=0.5, skel=0.0, both=1.0)


@dataclass(frozen=True, eq=False)
class ConditionSet:
    """Batched prompt ids (B, L) plus normalized skeleton descriptors (B, S).

    A dropped prompt is all padding ids; a dropped skeleton descriptor is
    all zeros (the normalized dataset mean pose).
    """

    tokens: np.ndarray
    skel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "tokens", np.asarray(self.tokens, dtype=np.int64))
        object.__setattr__(self, "skel", np.asarray(self.skel, dtype=np.float64))
        if self.tokens.ndim != 2 or self.skel.ndim != 2:
            raise ValueError("tokens and skel must be batched 2-D arrays")
        if self.tokens.shape[0] != self.skel.shape[0]:
            raise ValueError("tokens and skel batch sizes differ")

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @classmethod
    def single(cls, prompt: Union[PromptTokens, np.ndarray, Sequence[int]],
               skel_vec: np.ndarray) -> "ConditionSet":
        ids = prompt.array() if isinstance(prompt, PromptTokens) else np.asarray(prompt)
        return cls(tokens=np.asarray(ids)[None, :], skel=np.asarray(skel_vec)[None, :])

    def without_text(self) -> "ConditionSet":
        return ConditionSet(np.full_like(self.tokens, PAD_ID), self.skel)

    def without_skel(self) -> "ConditionSet":
        return ConditionSet(self.tokens, np.zeros_like(self.skel))

    def without_both(self) -> "ConditionSet":
        return ConditionSet(np.full_like(self.tokens, PAD_ID), np.zeros_like(self.skel))


# -- training objective --------------------------------------------------------------

def interpolate(x0: np.ndarray, x1: np.ndarray, tau) -> np.ndarray:
    """Linear path (1-tau) x0 + tau x1; tau is a scalar or per-sample (B,)."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError("endpoint shapes differ")
    t = _expand_tau(tau, x0.ndim)
    return (1.0 - t) * x0 + t * x1


def pred_to_velocity(pred: np.ndarray, x_tau: np.ndarray, tau,
                     tau_clamp: float = TAU_CLAMP) -> np.ndarray:
    """Clean-prediction to velocity; the denominator is clamped away from
    zero so predictions stay usable arbitrarily close to tau = 1."""
    pred = np.asarray(pred, dtype=np.float64)
    x_tau = np.asarray(x_tau, dtype=np.float64)
    if pred.shape != x_tau.shape:
        raise ValueError("prediction and state shapes differ")
    t = _expand_tau(tau, pred.ndim)
    return (pred - x_tau) / np.maximum(1.0 - t, tau_clamp)


def _expand_tau(tau, ndim: int) -> np.ndarray:
    t = np.asarray(tau, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (ndim - 1))


def block_mses(pred: Tensor, x1: np.ndarray, layout: FeatureLayout) -> Tuple[Tensor, Tensor]:
    """Mean squared error of the generation block and the skeleton block,
    each over its own elements. pred (..., D) Tensor, x1 matching array."""
    x1 = np.asarray(x1, dtype=np.float64)
    if tuple(pred.shape) != x1.shape:
        raise ValueError("prediction and target shapes differ")
    a, b = layout.ranges["ret"]
    target = ad.constant(x1)

    def mse(lo: int, hi: int) -> Tensor:
        d = ad.sub(ad.slice_axis(pred, -1, lo, hi), ad.slice_axis(target, -1, lo, hi))
        return ad.tmean(ad.mul(d, d))

    return mse(0, a), mse(a, b)


def flow_loss(pred: Tensor, x1: np.ndarray, layout: FeatureLayout,
              lam_gen: float = 1.0, lam_ret: float = 1.0) -> Tensor:
    """lam_gen * gen-block MSE + lam_ret * ret-block MSE. A zero lambda
    skips its term entirely, so no gradient ever reaches that block's
    output slice."""
    if lam_gen < 0 or lam_ret < 0:
        raise ValueError("loss weights must be nonnegative")
    gen, ret = block_mses(pred, x1, layout)
    terms = [ad.scale(t, lam) for t, lam in ((gen, lam_gen), (ret, lam_ret)) if lam != 0.0]
    if not terms:
        return ad.constant(np.zeros(()))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def drop_conditions(cond: ConditionSet, rng: np.random.Generator,
                    p_both: float, p_text: float, p_skel: float = 0.0) -> ConditionSet:
    """Two-stage condition dropout, row-wise: with p_both drop prompt and
    skeleton together; otherwise with p_text drop the prompt alone;
    otherwise with p_skel (off by default) drop the skeleton alone. Three
    uniforms are always drawn per row so the rng stream position does not
    depend on outcomes."""
    for p in (p_both, p_text, p_skel):
        if not 0.0 <= p <= 1.0:
            raise ValueError("dropout probabilities must be in [0, 1]")
    B = cond.batch
    u = rng.random((3, B))
    both = u[0] < p_both
    text_only = ~both & (u[1] < p_text)
    skel_only = ~both & ~text_only & (u[2] < p_skel)
    tokens = np.where((both | text_only)[:, None], PAD_ID, cond.tokens)
    skel = np.where((both | skel_only)[:, None], 0.0, cond.skel)
    return ConditionSet(tokens, skel)


# -- guidance ---------------------------------------------------------------------------

def guidance_branches(cond: ConditionSet, w: GuidanceWeights
                      ) -> List[Tuple[float, ConditionSet]]:
    """Fixed-order coefficient list [(1 - sum w, uncond), (w_text, text-only),
    (w_skel, skeleton-only), (w_both, both)] with zero-coefficient entries
    removed; the coefficients of the surviving entries encode
    v_u + w_text (v_text - v_u) + w_skel (v_skel - v_u) + w_both (v_both - v_u)."""
    branches = [
        (1.0 - (w.text + w.skel + w.both), cond.without_both()),
        (w.text, cond.without_skel()),
        (w.skel, cond.without_text()),
        (w.both, cond),
    ]
    return [(c, br) for c, br in branches if c != 0.0]


def compose_velocities(coeffs: Sequence[float], parts: Sequence[np.ndarray]) -> np.ndarray:
    """Weighted sum in listed order; a lone part with coefficient 1.0 is
    returned untouched so the degenerate settings stay bit-exact."""
    if len(coeffs) == 1 and coeffs[0] == 1.0:
        return parts[0]
    out = np.zeros_like(parts[0])
    for c, v in zip(coeffs, parts):
        out += c * v
    return out


def cfg_velocity(params: Dict[str, Tensor], mcfg: ModelConfig, x_tau: np.ndarray,
                 tau, cond: ConditionSet, w: GuidanceWeights,
                 tau_clamp: float = TAU_CLAMP) -> np.ndarray:
    """Guided velocity field: every surviving condition branch runs in one
    stacked forward pass, each prediction converts to a velocity, and the
    velocities combine per guidance_branches/compose_velocities."""
    x_tau = np.asarray(x_tau, dtype=np.float64)
    B = x_tau.shape[0]
    if cond.batch != B:
        raise ValueError("condition batch does not match state batch")
    tau_b = np.asarray(tau, dtype=np.float64)
    if tau_b.ndim == 0:
        tau_b = np.full(B, float(tau_b))
    live = guidance_branches(cond, w)
    tokens = np.concatenate([br.tokens for _, br in live], axis=0)
    skels = np.concatenate([br.skel for _, br in live], axis=0)
    big_x = np.concatenate([x_tau] * len(live), axis=0)
    big_tau = np.concatenate([tau_b] * len(live), axis=0)
    with ad.no_grad():
        pred = model_forward(params, big_x, big_tau, tokens, skels, mcfg).data
    vel = pred_to_velocity(pred, big_x, big_tau, tau_clamp)
    parts = [vel[i * B:(i + 1) * B] for i in range(len(live))]
    return compose_velocities([c for c, _ in live], parts)


def sample(params: Dict[str, Tensor], mcfg: ModelConfig, layout: FeatureLayout,
           norm: NormStats, skel: Skeleton, prompt: Union[PromptTokens, np.ndarray],
           frames: int, weights: GuidanceWeights = GENERATION_WEIGHTS,
           steps: int = 100, seed: int = 0, fps: float = 30.0,
           tau_clamp: float = TAU_CLAMP) -> Tuple[np.ndarray, MotionClip]:
    """Draw noise, integrate the guided field with RK4 to 1 - tau_clamp,
    denormalize, and FK-decode against the conditioning skeleton. Returns
    (raw feature window, clip)."""
    skel_vec = norm.apply_skeleton(build_skeleton_condition(skel, layout), layout)
    cond = ConditionSet.single(prompt, skel_vec)
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((1, frames, layout.total_dim))

    def field(y: np.ndarray, t: float) -> np.ndarray:
        return cfg_velocity(params, mcfg, y, t, cond, weights, tau_clamp)

    x1 = rk4_integrate(field, x0, 0.0, 1.0 - tau_clamp, steps)
    feats = norm.invert(x1[0])
    return feats, decode_fk(feats, skel, layout, fps)


# -- optimizer and training loop ----------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay; beta = (0.9, 0.999), eps = 1e-8.
    Parameters update in sorted-name order (a determinism contract, not a
    numerical one: updates are elementwise)."""

    BETA1, BETA2, EPS = 0.9, 0.999, 1e-8

    def __init__(self, params: Dict[str, Tensor], lr: float, weight_decay: float = 0.0):
        self.params = params
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.BETA1 ** self.t
        c2 = 1.0 - self.BETA2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.BETA1
            m += (1.0 - self.BETA1) * g
            v *= self.BETA2
            v += (1.0 - self.BETA2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.EPS)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; the larger preset lives in configs."""

    lr: float = 1e-3
    weight_decay: float = 5e-3
    batch: int = 16
    epochs: int = 100
    lam_gen: float = 1.0
    lam_ret: float = 1.0
    p_both: float = 0.1
    p_text: float = 0.1
    p_skel: float = 0.0
    seed: int = 0
    tau_clamp: float = TAU_CLAMP
    log_every: int = 20
    ckpt_every: int = 0           # steps; 0 = final checkpoint only

    def __post_init__(self):
        for p in (self.p_both, self.p_text, self.p_skel):
            if not 0.0 <= p <= 1.0:
                raise ValueError("dropout probabilities must be in [0, 1]")
        if self.lam_gen < 0 or self.lam_ret < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 < self.tau_clamp <= 0.1:
            raise ValueError("tau_clamp must be in (0, 0.1]")
        if self.batch < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("invalid optimizer settings")


def _stack_items(items: Sequence[DatasetItem], layout: FeatureLayout,
                 norm: NormStats) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    feats = np.stack([norm.apply(it.features) for it in items])
    tokens = np.stack([it.tokens.array() for it in items])
    skels = np.stack([norm.apply_skeleton(it.skel_cond, layout) for it in items])
    return feats, tokens, skels


def train(params: Dict[str, Tensor], mcfg: ModelConfig, items: Sequence[DatasetItem],
          layout: FeatureLayout, tcfg: TrainConfig, norm: Optional[NormStats] = None,
          out_dir: Optional[Path] = None,
          on_step: Optional[Callable[[int, float, float], None]] = None,
          ) -> Tuple[List[Tuple[int, float, float]], NormStats]:
    """Flow-matching training over encoded windows.

    Returns the loss history [(step, loss_gen, loss_ret)] and the
    normalization in effect. With out_dir set, writes loss.csv, periodic
    checkpoints, and model_final.npz (parameters + normalization). A
    non-finite loss aborts after checkpointing the pre-update parameters.
    """
    if not items:
        raise ValueError("training needs at least one window")
    if norm is None:
        norm = NormStats.fit([it.features for it in items], layout)
    feats, tokens, skels = _stack_items(items, layout, norm)
    n = feats.shape[0]
    rng = np.random.default_rng(tcfg.seed)
    opt = AdamW(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    history: List[Tuple[int, float, float]] = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    step = 0
    for _ in range(tcfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, tcfg.batch):
            idx = order[lo:lo + tcfg.batch]
            x1 = feats[idx]
            B = x1.shape[0]
            cond = drop_conditions(ConditionSet(tokens[idx], skels[idx]), rng,
                                   tcfg.p_both, tcfg.p_text, tcfg.p_skel)
            tau = rng.random(B)
            x0 = rng.standard_normal(x1.shape)
            x_tau = interpolate(x0, x1, tau)
            for p in params.values():
                p.zero_grad()
            try:
                pred = model_forward(params, x_tau, tau, cond.tokens, cond.skel,
                                     mcfg, train=True, rng=rng)
                gen_t, ret_t = block_mses(pred, x1, layout)
                loss_gen = float(gen_t.data)
                loss_ret = float(ret_t.data)
                if not (math.isfinite(loss_gen) and math.isfinite(loss_ret)):
                    raise NumericsError("non-finite loss")
                loss = flow_loss(pred, x1, layout, tcfg.lam_gen, tcfg.lam_ret)
                loss.backward()
            except NumericsError as exc:
                # params have not been touched this step: checkpoint is the
                # last completed update
                if out_dir is not None:
                    save_checkpoint(out_dir / "model_abort.npz", params, norm)
                    _write_loss_csv(out_dir / "loss.csv", history)
                raise NumericsError(f"training diverged at step {step}: {exc}") from exc
            opt.step()
            history.append((step, loss_gen, loss_ret))
            if on_step is not None:
                on_step(step, loss_gen, loss_ret)
            step += 1
            if out_dir is not None and tcfg.ckpt_every and step % tcfg.ckpt_every == 0:
                save_checkpoint(out_dir / f"model_{step:06d}.npz", params, norm)

    if out_dir is not None:
        save_checkpoint(out_dir / "model_final.npz", params, norm)
        _write_loss_csv(out_dir / "loss.csv", history)
    return history, norm


def _write_loss_csv(path: Path, history: Sequence[Tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss_gen", "loss_ret"])
        for row in history:
            writer.writerow([row[0], repr(row[1]), repr(row[2])])


def eval_flow_loss(params: Dict[str, Tensor], mcfg: ModelConfig,
                   items: Sequence[DatasetItem], layout: FeatureLayout,
                   norm: NormStats, seed: int = 0, rounds: int = 4,
                   lam_gen: float = 1.0, lam_ret: float = 1.0) -> Dict[str, float]:
    """Monte Carlo objective estimate with full conditioning and no dropout:
    fresh (tau, x0) per round over every window."""
    feats, tokens, skels = _stack_items(items, layout, norm)
    rng = np.random.default_rng(seed)
    gens, rets = [], []
    for _ in range(rounds):
        tau = rng.random(feats.shape[0])
        x0 = rng.standard_normal(feats.shape)
        x_tau = interpolate(x0, feats, tau)
        with ad.no_grad():
            pred = model_forward(params, x_tau, tau, tokens, skels, mcfg)
            gen_t, ret_t = block_mses(pred, feats, layout)
        gens.append(float(gen_t.data))
        rets.append(float(ret_t.data))
    gen = float(np.mean(gens))
    ret = float(np.mean(rets))
    return {"gen": gen, "ret": ret, "loss": lam_gen * gen + lam_ret * ret}


# -- checkpoints -----------------------------------------------------------------------

def save_checkpoint(path, params: Dict[str, Tensor], norm: NormStats) -> None:
    arrays = {k: p.data for k, p in params.items()}
    arrays["norm.mean"] = norm.mean
    arrays["norm.std"] = norm.std
    save_arrays(path, arrays)


def load_checkpoint(path) -> Tuple[Dict[str, Tensor], NormStats]:
    arrays = load_arrays(path)
    mean = arrays.pop("norm.mean")
    std = arrays.pop("norm.std")
    params = {k: ad.parameter(v, name=k) for k, v in sorted(arrays.items())}
    return params, NormStats(mean=mean, std=std)
