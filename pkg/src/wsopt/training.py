"""Training orchestration: the three experiment arms, LR-on-plateau +
early-stopping scheduler, and seeded repeated runs.

Arms:
    plain-*     inputs preprocessed once with a fixed window, net only
    wso-*       inputs full-range normalized; trainable windowing layer in
                front of the net, unfrozen throughout
    fnf-*       same, but trained in three stages with the windowing layer
                frozen / unfrozen / frozen; each stage runs its own fresh
                plateau scheduler (counters and best reset; the learning
                rate carries over so the LR trace never increases)

Determinism: every run is a pure function of (dataset bytes, configs, seed).
Epoch shuffles draw from PCG64(SeedSequence(seed, spawn_key=(3, epoch)));
parameter init uses the seed directly. Reported parameters are the ones with
the minimum validation loss seen anywhere in the run (not the last epoch);
FNF stages hand their *final* parameters to the next stage.
"""

from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .husl import read_hu
from .net import ops
from .net.adam import AdamState, adam_step, init_adam
from .net.checkpoint import save_checkpoint
from .net.model import DTYPES, NetworkConfig, backward, forward, init_params
from .phantom import LABEL_COPD, DatasetManifest
from .windowing import EMPHYSEMA, FULL_RANGE, WindowSetting, apply_window
from .wso import WsoParams, clamp_affine, clamp_affine_backward, enforce_w_floor, extract_window, wso_init

_STREAM_EPOCH = 3

ARMS = (
    "plain-full",
    "plain-emphysema",
    "wso-full",
    "wso-emphysema",
    "fnf-full",
    "fnf-emphysema",
)

ARM_WINDOWS = {"full": FULL_RANGE, "emphysema": EMPHYSEMA}

HISTORY_HEADER = ["epoch", "train_loss", "val_loss", "lr", "stage"]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 500
    batch_size: int = 16
    initial_lr: float = 1e-3
    lr_patience: int = 15
    lr_factor: float = 0.1
    stop_patience: int = 50
    precision: str = "f32"
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.lr_patience < self.stop_patience:
            raise ValueError(
                f"need 0 < lr_patience < stop_patience, got "
                f"{self.lr_patience} / {self.stop_patience}"
            )
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError(f"lr_factor must be in (0, 1), got {self.lr_factor}")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}, got {self.precision}")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be >= 1")


@dataclass(frozen=True)
class FnfSchedule:
    stages: tuple = (True, False, True)  # frozen flags, in order

    def validate(self) -> None:
        if self.stages != (True, False, True):
            raise ValueError("the freeze schedule is frozen, unfrozen, frozen")


@dataclass
class SchedulerState:
    lr: float
    best: float | None = None
    lr_wait: int = 0
    stop_wait: int = 0


def scheduler_step(state: SchedulerState, val_loss: float, cfg: TrainConfig) -> str:
    """Plateau scheduler; returns one of continue / reduce_lr / stop.

    An epoch counts as improving only when its loss is strictly below the
    best seen so far; the first epoch has nothing to improve upon, so a
    constant loss reduces the LR at exactly epoch lr_patience and stops at
    exactly epoch stop_patience.
    """
    if state.best is None:
        state.best = val_loss
        improved = False
    elif val_loss < state.best:
        state.best = val_loss
        improved = True
    else:
        improved = False
    if improved:
        state.lr_wait = 0
        state.stop_wait = 0
        return "continue"
    state.lr_wait += 1
    state.stop_wait += 1
    if state.stop_wait >= cfg.stop_patience:
        return "stop"
    if state.lr_wait >= cfg.lr_patience:
        state.lr *= cfg.lr_factor
        state.lr_wait = 0
        return "reduce_lr"
    return "continue"


@dataclass
class RunHistory:
    rows: list = field(default_factory=list)  # (epoch, train, val, lr, stage)
    stop_epoch: int = 0
    stage_bounds: list = field(default_factory=list)  # last epoch of each stage
    wall_time: float = 0.0
    w_floor_events: int = 0

    def write_csv(self, path) -> None:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for epoch, train, val, lr, stage in self.rows:
            writer.writerow([epoch, f"{train:.10g}", f"{val:.10g}", f"{lr:.10g}", stage])
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def read_csv(cls, path) -> "RunHistory":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != HISTORY_HEADER:
            raise ValueError(f"{path}: expected history header {HISTORY_HEADER}")
        hist = cls()
        for epoch, train, val, lr, stage in rows[1:]:
            hist.rows.append((int(epoch), float(train), float(val), float(lr), int(stage)))
        if hist.rows:
            hist.stop_epoch = hist.rows[-1][0]
        return hist


def load_split(manifest: DatasetManifest, split: str, window: WindowSetting, dtype):
    """Load a split as (images (N,1,S,S) windowed to [0,1], labels (N,))."""
    entries = manifest.for_split(split)
    if not entries:
        raise TrainingError(f"split {split!r} is empty or missing")
    images = np.stack([apply_window(read_hu(manifest.abspath(e)), window) for e in entries])
    labels = np.array([1.0 if e.label == LABEL_COPD else 0.0 for e in entries])
    return images[:, None, :, :].astype(dtype), labels.astype(dtype)


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(_STREAM_EPOCH, epoch)))
    )
    return rng.permutation(n)


def _mean_val_loss(params, net_cfg, x, y, wso_arr, batch_size):
    total = 0.0
    for lo in range(0, len(y), batch_size):
        xb = x[lo : lo + batch_size]
        if wso_arr is not None:
            xb = clamp_affine(xb, float(wso_arr[0][0]), float(wso_arr[1][0]), 1.0)
        logits, _ = forward(params, net_cfg, xb)
        losses, _ = ops.bce_with_logits(logits, y[lo : lo + batch_size])
        total += float(losses.sum())
    return total / len(y)


def _snapshot(params):
    return {k: v.copy() for k, v in params.items()}


@dataclass
class _Loop:
    """Mutable state shared across FNF stages."""

    params: dict
    adam: AdamState
    best_val: float = np.inf
    best_params: dict | None = None
    epoch: int = 0


def _run_stage(
    loop: _Loop,
    net_cfg: NetworkConfig,
    train_cfg: TrainConfig,
    data,
    history: RunHistory,
    *,
    stage: int,
    max_epochs: int,
    frozen: bool,
    use_wso: bool,
) -> None:
    x_train, y_train, x_val, y_val = data
    dtype = DTYPES[train_cfg.precision]
    sched = SchedulerState(lr=loop.adam.lr)
    skip = frozenset(("wso/w", "wso/b")) if frozen else frozenset()
    wso_arr = (loop.params["wso/w"], loop.params["wso/b"]) if use_wso else None
    bs = train_cfg.batch_size
    for _ in range(max_epochs):
        loop.epoch += 1
        order = _epoch_order(train_cfg.seed, loop.epoch, len(y_train))
        train_total = 0.0
        for lo in range(0, len(order), bs):
            idx = order[lo : lo + bs]
            xb = x_train[idx]
            yb = y_train[idx]
            if use_wso:
                w = float(loop.params["wso/w"][0])
                b = float(loop.params["wso/b"][0])
                net_in = clamp_affine(xb, w, b, 1.0)
            else:
                net_in = xb
            logits, cache = forward(loop.params, net_cfg, net_in)
            losses, dlogits = ops.bce_with_logits(logits, yb)
            train_total += float(losses.sum())
            grads, dnet_in = backward(loop.params, net_cfg, cache, dlogits / len(yb))
            if use_wso:
                _, dw, db = clamp_affine_backward(xb, w, b, 1.0, dnet_in)
                grads["wso/w"] = np.array([dw], dtype=dtype)
                grads["wso/b"] = np.array([db], dtype=dtype)
            loop.adam.lr = sched.lr
            adam_step(loop.params, grads, loop.adam, skip=skip)
            if use_wso and not frozen:
                floored = enforce_w_floor(float(loop.params["wso/w"][0]))
                if floored != float(loop.params["wso/w"][0]):
                    loop.params["wso/w"][0] = floored
                    history.w_floor_events += 1
        train_loss = train_total / len(y_train)
        val_loss = _mean_val_loss(loop.params, net_cfg, x_val, y_val, wso_arr, bs)
        history.rows.append((loop.epoch, train_loss, val_loss, sched.lr, stage))
        if val_loss < loop.best_val:
            loop.best_val = val_loss
            loop.best_params = _snapshot(loop.params)
        if scheduler_step(sched, val_loss, train_cfg) == "stop":
            break
    loop.adam.lr = sched.lr
    history.stage_bounds.append(loop.epoch)


def _train(manifest, window, net_cfg, train_cfg, *, mode: str):
    net_cfg.validate()
    train_cfg.validate()
    dtype = DTYPES[train_cfg.precision]
    preprocess = window if mode == "plain" else FULL_RANGE
    x_train, y_train = load_split(manifest, "train", preprocess, dtype)
    x_val, y_val = load_split(manifest, "validation", preprocess, dtype)
    if x_train.shape[2] != net_cfg.input_size:
        raise TrainingError(
            f"dataset slices are {x_train.shape[2]}px but network expects {net_cfg.input_size}px"
        )
    data = (x_train, y_train, x_val, y_val)

    started = time.perf_counter()
    params = init_params(net_cfg, train_cfg.seed, dtype)
    use_wso = mode in ("wso", "fnf")
    if use_wso:
        p0 = wso_init(window, FULL_RANGE)
        wso_params = {"wso/w": np.array([p0.w], dtype), "wso/b": np.array([p0.b], dtype)}
        params = {**wso_params, **params}
    loop = _Loop(params=params, adam=init_adam(params, train_cfg.initial_lr))
    history = RunHistory()

    if mode == "fnf":
        budget = max(train_cfg.max_epochs // 3, 1)
        for stage, frozen in enumerate(FnfSchedule().stages, start=1):
            _run_stage(
                loop, net_cfg, train_cfg, data, history,
                stage=stage, max_epochs=budget, frozen=frozen, use_wso=True,
            )
    else:
        _run_stage(
            loop, net_cfg, train_cfg, data, history,
            stage=1, max_epochs=train_cfg.max_epochs, frozen=False, use_wso=use_wso,
        )

    history.stop_epoch = loop.epoch
    history.wall_time = time.perf_counter() - started
    best = loop.best_params if loop.best_params is not None else _snapshot(loop.params)
    if use_wso:
        wso_best = WsoParams(w=float(best["wso/w"][0]), b=float(best["wso/b"][0]))
        return best, wso_best, history
    return best, history


def train_plain(manifest, window: WindowSetting, net_cfg: NetworkConfig, train_cfg: TrainConfig):
    """Fixed-window arm; returns (best params, history)."""
    return _train(manifest, window, net_cfg, train_cfg, mode="plain")


def train_wso(manifest, init_window: WindowSetting, net_cfg: NetworkConfig, train_cfg: TrainConfig):
    """Trainable-window arm; returns (best params, best WsoParams, history)."""
    return _train(manifest, init_window, net_cfg, train_cfg, mode="wso")


def train_fnf(
    manifest,
    init_window: WindowSetting,
    net_cfg: NetworkConfig,
    train_cfg: TrainConfig,
    schedule: FnfSchedule = FnfSchedule(),
):
    """Frozen/unfrozen/frozen arm; returns (best params, best WsoParams, history)."""
    schedule.validate()
    return _train(manifest, init_window, net_cfg, train_cfg, mode="fnf")


def parse_arm(arm: str):
    """Split an arm name into (mode, init/preprocess window)."""
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}; valid arms: {', '.join(ARMS)}")
    mode, window_name = arm.split("-", 1)
    return mode, ARM_WINDOWS[window_name]


def run_dir_for(out_dir, arm: str, seed: int) -> str:
    return os.path.join(out_dir, "runs", arm, str(seed))


def _one_run(arm, manifest_path, net_cfg, train_cfg, out_dir, seed):
    manifest = DatasetManifest.read_csv(manifest_path)
    mode, window = parse_arm(arm)
    cfg = replace(train_cfg, seed=seed)
    rd = run_dir_for(out_dir, arm, seed)
    os.makedirs(rd, exist_ok=True)
    meta = {
        "arm": arm,
        "seed": seed,
        "mode": mode,
        "window_width": window.width,
        "window_level": window.level,
        "precision": cfg.precision,
    }
    if mode == "plain":
        params, history = train_plain(manifest, window, net_cfg, cfg)
    elif mode == "wso":
        params, wso_params, history = train_wso(manifest, window, net_cfg, cfg)
    else:
        params, wso_params, history = train_fnf(manifest, window, net_cfg, cfg)
    save_checkpoint(os.path.join(rd, "checkpoint.bin"), params, net_cfg, meta)
    history.write_csv(os.path.join(rd, "history.csv"))
    if mode in ("wso", "fnf"):
        learned = extract_window(wso_params, FULL_RANGE)
        with open(os.path.join(rd, "learned_window.txt"), "w", encoding="utf-8") as fh:
            fh.write("width_hu,level_hu\n")
            fh.write(f"{learned.width:.3f},{learned.level:.3f}\n")
    return rd


def run_experiment(
    arm: str,
    manifest_path,
    net_cfg: NetworkConfig,
    train_cfg: TrainConfig,
    out_dir,
    *,
    n_runs: int = 7,
    base_seed: int | None = None,
    seed_list=None,
    jobs: int = 1,
):
    """Train `arm` once per seed; returns the list of run directories.

    Seeds are base_seed + i unless an explicit seed_list is given. A failed
    run aborts the experiment; directories of completed runs are kept.
    """
    if seed_list is None:
        base = train_cfg.seed if base_seed is None else base_seed
        seed_list = [base + i for i in range(n_runs)]
    parse_arm(arm)
    if jobs > 1 and len(seed_list) > 1:
        import concurrent.futures as cf

        with cf.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                pool.submit(_one_run, arm, manifest_path, net_cfg, train_cfg, out_dir, s): s
                for s in seed_list
            }
            dirs = {}
            for fut in cf.as_completed(futures):
                seed = futures[fut]
                try:
                    dirs[seed] = fut.result()
                except Exception as exc:
                    raise TrainingError(f"run for seed {seed} failed: {exc}") from exc
        return [dirs[s] for s in seed_list]
    out = []
    for s in seed_list:
        try:
            out.append(_one_run(arm, manifest_path, net_cfg, train_cfg, out_dir, s))
        except TrainingError:
            raise
        except Exception as exc:
            raise TrainingError(f"run for seed {s} failed: {exc}") from exc
    return out
