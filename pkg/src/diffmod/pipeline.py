"""Training, evaluation and ablation harnesses."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .assign import AssignConfig, assign, schedule_params
from .diffusion import corrupt_points
from .loss import LevelLoss, LossBreakdown, LossWeights, focal_loss_from_logits, missing_loss, reg_loss, total_loss
from .model import DiffMod, Detection, FrameOutput, ModelConfig, init_points
from .scenegen import SceneSequence

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 1200
    batch_size: int = 2
    window: int = 3
    lr: float = 1e-3
    warmup: int = 40
    decay_at: int = 960
    decay_factor: float = 0.1
    grad_clip: float = 1.0
    weight_decay: float = 1e-4
    seed: int = 0
    schedule_kind: str = "exponential"
    assignment_kind: str = "mink"
    missing_loss_enabled: bool = True
    dtype: str = "float32"
    log_every: int = 10

    def validate(self) -> None:
        if self.iterations < 1 or self.batch_size < 1 or self.window < 1 or self.lr <= 0:
            raise ValueError("iterations, batch_size, window and lr must be positive")
        if self.schedule_kind not in ("exponential", "linear"):
            raise ValueError(f"unknown schedule {self.schedule_kind!r}")
        if self.assignment_kind not in ("mink", "simota"):
            raise ValueError(f"unknown assignment {self.assignment_kind!r}")

    def lr_at(self, it: int) -> float:
        lr = self.lr
        if it < self.warmup:
            lr *= (it + 1) / self.warmup
        if it >= self.decay_at:
            lr *= self.decay_factor
        return lr


class Adam:
    def __init__(self, params: list[nx.Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and p.ndim > 1:
                upd = upd + self.wd * p.data
            p.data -= (lr * upd).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"__adam__.m.{i}"] = m
            out[f"__adam__.v.{i}"] = v
        return out


def clip_gradients(params: list[nx.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if max_norm > 0 and total > max_norm:
        f = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= f
    return total


# ---------------------------------------------------------------------------
# per-frame objective
# ---------------------------------------------------------------------------


def level_losses(out: FrameOutput, gt: np.ndarray, k: int, model: DiffMod, cfg: TrainConfig,
                 weights: LossWeights) -> list[LevelLoss]:
    den = model.cfg.denoise
    levels = []
    for lv in out.levels:
        acfg = AssignConfig(max(k, 1), lv.level, den.N, den.r, cfg.schedule_kind)
        _, r_thre = schedule_params(acfg)
        amat = assign(lv.inputs, gt, acfg, cfg.assignment_kind)
        labels = amat.labels()
        cls = focal_loss_from_logits(lv.logits, labels >= 0, weights.focal_alpha, weights.focal_gamma)
        reg = reg_loss(lv.coords, labels, gt, r_thre)
        if cfg.missing_loss_enabled and gt.shape[0]:
            miss, n_missed = missing_loss(lv.coords, gt, r_thre, weights.miss_gamma, weights.miss_eps)
        else:
            miss, n_missed = nx.Tensor(np.zeros((), dtype=lv.coords.dtype)), 0
        levels.append(LevelLoss(lv.level, cls, reg, miss, r_thre, int(gt.shape[0]), n_missed))
    return levels


def sequence_loss(model: DiffMod, scene: SceneSequence, t0: int, cfg: TrainConfig, weights: LossWeights,
                  rng: np.random.Generator, frozen=None) -> tuple[nx.Tensor, list[LossBreakdown]]:
    """Summed objective over a window of consecutive frames, with the memory carried through."""
    den = model.cfg.denoise
    H, W = scene.config.height, scene.config.width
    state, prev = None, None
    total = None
    breakdowns = []
    for t in range(t0, t0 + cfg.window):
        field = model.field_for(scene.frames, t)
        gt = scene.centers_at(t)
        s = int(rng.integers(1, den.S + 1))
        cps = corrupt_points(gt, den, model.schedule, s, rng.integers(2 ** 32), H, W)
        steps = [s] + model.ladder[1:]
        out = model.forward(field, cps.coords, state, steps, prev, frozen)
        state, prev = out.state, out
        levels = level_losses(out, gt, cps.replicas, model, cfg, weights)
        frame_total = total_loss(levels, weights)
        breakdowns.append(LossBreakdown(levels, frame_total))
        total = frame_total if total is None else nx.add(total, frame_total)
    return total, breakdowns


def _summary(breakdowns: list[LossBreakdown], weights: LossWeights, N: int) -> dict:
    out: dict = {"total": float(np.mean([float(b.total.data) for b in breakdowns]))}
    for n in range(N):
        out[f"l{n + 1}"] = {
            key: float(np.mean([float(getattr(b.levels[n], key).data) for b in breakdowns]))
            for key in ("cls", "reg", "miss")
        }
    return out


def train_step(batch: list[tuple[SceneSequence, int]], model: DiffMod, opt: Adam, cfg: TrainConfig,
               weights: LossWeights, rng: np.random.Generator, it: int) -> dict:
    model.zero_grad()
    breakdowns: list[LossBreakdown] = []
    total_val = 0.0
    norm = 1.0 / (len(batch) * cfg.window)
    for scene, t0 in batch:
        loss, bds = sequence_loss(model, scene, t0, cfg, weights, rng)
        loss = nx.scale(loss, norm)
        val = float(loss.data)
        if not math.isfinite(val):
            raise TrainingDiverged(f"non-finite loss at iteration {it}: {val}")
        loss.backward()
        total_val += val
        breakdowns += bds
    params = model.parameters()
    gnorm = clip_gradients(params, cfg.grad_clip)
    if not math.isfinite(gnorm):
        raise TrainingDiverged(f"non-finite gradient norm at iteration {it}")
    lr = cfg.lr_at(it)
    opt.step(lr)
    rec = {"iteration": it, "loss": total_val, "lr": lr, "grad_norm": gnorm}
    rec.update(_summary(breakdowns, weights, model.cfg.denoise.N))
    rec["total"] = total_val
    return rec


def train(model: DiffMod, scenes: list[SceneSequence], cfg: TrainConfig, weights: LossWeights | None = None,
          log_path=None, time_budget: float | None = None) -> list[dict]:
    """Train in place; returns the per-iteration log records."""
    cfg.validate()
    weights = weights or LossWeights()
    dtype = np.dtype(cfg.dtype).type
    model.astype(dtype)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), weight_decay=cfg.weight_decay)
    records = []
    fh = open(log_path, "w") if log_path else None
    start = time.time()
    try:
        with nx.using_dtype(dtype):
            for it in range(cfg.iterations):
                batch = []
                for _ in range(cfg.batch_size):
                    sc = scenes[int(rng.integers(len(scenes)))]
                    t0 = int(rng.integers(0, max(1, sc.frames.shape[0] - cfg.window + 1)))
                    batch.append((sc, t0))
                try:
                    rec = train_step(batch, model, opt, cfg, weights, rng, it)
                except TrainingDiverged:
                    if log_path:
                        dump = Path(log_path).with_suffix(".diverged.ckpt")
                        model.save(dump, {"iteration": it})
                        log.error("training diverged; parameters dumped to %s", dump)
                    raise
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                if cfg.log_every and it % cfg.log_every == 0:
                    log.info("it %d loss %.4f lr %.2e (%.0fs)", it, rec["loss"], rec["lr"], time.time() - start)
                if time_budget is not None and time.time() - start > time_budget:
                    log.warning("time budget exhausted after %d iterations", it + 1)
                    break
    finally:
        if fh:
            fh.close()
    return records


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: Counts) -> Counts:
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


def match_detections(preds, gts, d_eval: float = 5.0, confidences=None) -> tuple[Counts, list[tuple[int, int]]]:
    """Greedy one-to-one matching by descending confidence within ``d_eval`` px.

    ``preds`` is a list of :class:`Detection` or an n x 2 array (then
    ``confidences`` gives the order). Returns the counts and matched
    (pred_index, gt_index) pairs.
    """
    if d_eval <= 0:
        raise ValueError("d_eval must be positive")
    if len(preds) and isinstance(preds[0], Detection):
        coords = np.array([[p.cx, p.cy] for p in preds])
        conf = np.array([p.confidence for p in preds])
    else:
        coords = np.asarray(preds, dtype=np.float64).reshape(-1, 2)
        conf = np.ones(len(coords)) if confidences is None else np.asarray(confidences)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    # ties in confidence fall back to position so the result does not depend on input order
    order = np.lexsort((coords[:, 1], coords[:, 0], -conf)) if len(coords) else np.array([], dtype=int)
    used = np.zeros(len(gts), dtype=bool)
    pairs = []
    for i in order:
        if not len(gts):
            break
        d = np.hypot(*(gts - coords[i]).T)
        d[used] = np.inf
        j = int(np.argmin(d))
        if d[j] <= d_eval:
            used[j] = True
            pairs.append((int(i), j))
    tp = len(pairs)
    return Counts(tp, len(coords) - tp, len(gts) - tp), pairs


@dataclass
class SequenceMetrics:
    name: str
    counts: Counts
    jitter: float

    def row(self) -> dict:
        c = self.counts
        return {"sequence": self.name, "Re": c.recall, "Pr": c.precision, "F1": c.f1, "jitter": self.jitter,
                "TP": c.tp, "FP": c.fp, "FN": c.fn}


@dataclass
class EvalReport:
    sequences: list[SequenceMetrics] = field(default_factory=list)

    def mean(self, key: str) -> float:
        rows = [s.row() for s in self.sequences]
        return float(np.mean([r[key] for r in rows])) if rows else 0.0

    @property
    def recall(self) -> float:
        return self.mean("Re")

    @property
    def precision(self) -> float:
        return self.mean("Pr")

    @property
    def f1(self) -> float:
        return self.mean("F1")

    @property
    def jitter(self) -> float:
        vals = [s.jitter for s in self.sequences if not math.isnan(s.jitter)]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> dict:
        return {"Re": self.recall, "Pr": self.precision, "F1": self.f1, "jitter": self.jitter}

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["sequence", "Re", "Pr", "F1", "jitter", "TP", "FP", "FN"])
            w.writeheader()
            for s in self.sequences:
                w.writerow(s.row())


def score_sequence(name: str, scene: SceneSequence, dets: list[list[Detection]], d_eval: float) -> SequenceMetrics:
    """Counts over all frames plus jitter: mean frame-to-frame change of the matched localization error."""
    total = Counts()
    errors: list[dict[int, np.ndarray]] = []
    for t, frame_dets in enumerate(dets):
        vis = [tr for tr in scene.tracks if tr.visible[t]]
        gts = np.array([tr.centers[t] for tr in vis]).reshape(-1, 2)
        c, pairs = match_detections(frame_dets, gts, d_eval)
        total = total + c
        errors.append({vis[j].object_id: np.array([frame_dets[i].cx, frame_dets[i].cy]) - gts[j] for i, j in pairs})
    steps = []
    for a, b in zip(errors, errors[1:]):
        for oid in a.keys() & b.keys():
            steps.append(float(np.hypot(*(b[oid] - a[oid]))))
    return SequenceMetrics(name, total, float(np.mean(steps)) if steps else float("nan"))


def evaluate(model: DiffMod, scenes: list[SceneSequence], tau: float | None = None, d_eval: float = 5.0,
             seed: int = 0, names: list[str] | None = None) -> EvalReport:
    if not scenes:
        raise ValueError("empty evaluation set")
    names = names or [f"seq_{i:03d}" for i in range(len(scenes))]
    dtype = model.point_proj.weight.dtype
    report = EvalReport()
    with nx.using_dtype(dtype):
        for i, (name, scene) in enumerate(zip(names, scenes)):
            dets, _ = model.infer(scene.frames, tau=tau, seed=(seed, i))
            report.sequences.append(score_sequence(name, scene, dets, d_eval))
    return report


def contraction_stats(model: DiffMod, scenes: list[SceneSequence], seed: int = 0) -> dict:
    """Per frame, mean distance from assigned points to their targets at each level's output.

    Points are assigned once, on the final level's output with that level's
    (k_min, r_thre); the same points are then followed back through every
    level, so each row traces one fixed set of points.
    """
    den = model.cfg.denoise
    per_frame = []
    dtype = model.point_proj.weight.dtype
    with nx.using_dtype(dtype), nx.no_grad():
        for i, scene in enumerate(scenes):
            state, prev = None, None
            for t in range(scene.frames.shape[0]):
                field = model.field_for(scene.frames, t)
                pts = init_points(den.M, scene.config.height, scene.config.width, seed=(seed, i, t))
                out = model.forward(field, pts, state, prev=prev)
                state, prev = out.state, out
                gt = scene.centers_at(t)
                if not gt.shape[0]:
                    continue
                acfg = AssignConfig(1, den.N, den.N, den.r)
                _, r_thre = schedule_params(acfg)
                final = out.levels[-1].coords.data
                labels = assign(final, gt, acfg).labels()
                rows = np.nonzero(labels >= 0)[0]
                if not rows.size:
                    continue
                dists = [float(np.hypot(*(lv.coords.data[rows] - gt[labels[rows]]).T).mean()) for lv in out.levels]
                per_frame.append(dists)
    arr = np.array(per_frame)
    mono = np.all(np.diff(arr, axis=1) <= 1e-9, axis=1) if arr.size else np.array([], dtype=bool)
    return {"per_frame": arr.tolist(), "fraction_nonincreasing": float(mono.mean()) if mono.size else 0.0,
            "mean_by_level": arr.mean(0).tolist() if arr.size else []}


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATIONS = {
    # kind: (metric the paper reports as improving, (baseline arm, proposed arm))
    "assignment": ("Re", ({"assignment_kind": "simota"}, {"assignment_kind": "mink"})),
    "missing_loss": ("Re", ({"missing_loss_enabled": False}, {"missing_loss_enabled": True})),
    "scheduling": ("F1", ({"schedule_kind": "linear"}, {"schedule_kind": "exponential"})),
    "tpgf": ("Pr", ({"tpgf_enabled": False}, {"tpgf_enabled": True})),
}

ARM_NAMES = {
    "assignment": ("simota", "mink"),
    "missing_loss": ("without", "with"),
    "scheduling": ("linear", "exponential"),
    "tpgf": ("without", "with"),
}


def arm_configs(kind: str, model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int):
    """(model config, train config) for each arm of an ablation, baseline arm first."""
    if kind not in ABLATIONS:
        raise ValueError(f"unknown ablation {kind!r}")
    arms = []
    for overrides in ABLATIONS[kind][1]:
        mc = replace(model_cfg, seed=seed, denoise=replace(model_cfg.denoise), sraa=replace(model_cfg.sraa))
        tc = replace(train_cfg, seed=seed)
        for key, val in overrides.items():
            if key == "tpgf_enabled":
                mc.tpgf_enabled = val
            else:
                setattr(tc, key, val)
        arms.append((mc, tc))
    return arms


def run_ablation(kind: str, model_cfg: ModelConfig, train_cfg: TrainConfig, train_scenes, test_scenes,
                 seeds=(0, 1, 2), d_eval: float = 5.0, runner=None) -> dict:
    """Train and evaluate both arms of one ablation for every seed.

    ``runner(model_cfg, train_cfg) -> summary dict`` may be supplied to reuse
    cached runs; by default each arm is trained from scratch.
    """
    if len(seeds) < 3:
        raise ValueError("ablations need at least 3 seeds")
    metric = ABLATIONS[kind][0]

    def default_runner(mc, tc):
        model = DiffMod(mc)
        train(model, train_scenes, tc)
        rep = evaluate(model, test_scenes, d_eval=d_eval)
        return rep.summary()

    runner = runner or default_runner
    rows = []
    per_arm: dict[str, list[dict]] = {name: [] for name in ARM_NAMES[kind]}
    for seed in seeds:
        for name, (mc, tc) in zip(ARM_NAMES[kind], arm_configs(kind, model_cfg, train_cfg, seed)):
            summ = runner(mc, tc)
            per_arm[name].append(summ)
            for m in ("Re", "Pr", "F1"):
                rows.append({"kind": kind, "arm": name, "seed": seed, "metric": m, "value": summ[m]})
    stats = {}
    for name, runs in per_arm.items():
        stats[name] = {m: {"mean": float(np.mean([r[m] for r in runs])), "std": float(np.std([r[m] for r in runs]))}
                       for m in ("Re", "Pr", "F1", "jitter")}
    base, prop = ARM_NAMES[kind]
    delta = stats[prop][metric]["mean"] - stats[base][metric]["mean"]
    return {"kind": kind, "metric": metric, "rows": rows, "stats": stats, "delta": delta,
            "sign": int(np.sign(delta))}


def config_dict(model_cfg: ModelConfig, train_cfg: TrainConfig, weights: LossWeights | None = None) -> dict:
    return {"model": model_cfg.to_dict(), "train": asdict(train_cfg), "loss": asdict(weights or LossWeights())}
