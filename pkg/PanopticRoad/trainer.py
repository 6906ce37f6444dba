"""
Training of the multi-task model.

Every batch gets a single forward pass through all branches, one summed
loss (detection plus every segmentation task) and exactly one backward
pass. No branch is frozen and tasks are never optimized in turns.

Features:
- SGD (Nesterov) with three parameter groups: decayed conv weights,
  non-decayed normalization weights plus gate scalars, and biases.
- Per-iteration warmup over the first epochs (lr from 0, bias lr from
  warmup_bias_lr, momentum from warmup_momentum), then linear annealing
  from lr0 to lr0 * lrf at the last epoch.
- Early stopping once fitness has not beaten the best value so far for
  'patience' epochs.
- Optional gradient accumulation to a nominal batch size and optional
  weight EMA.
- Run directory with the config snapshot, an append-only metrics CSV,
  last / best checkpoints, the best validation report and curve plots.
- Resume from the last checkpoint, continuing the epoch numbering.

Example:

    with Trainer(load_config(overrides=["optim.epochs_max=5"]), "runs/demo") as trainer:
        result = trainer.train()
"""

from .model import build_model, count_parameters, save_checkpoint
from .config import config_to_dict, resolve_device, save_config
from .dataset import build_dataloader, build_dataset
from .errors import ConfigError, DataError, NumericalError
from .evaluate import evaluate, write_report
from dataclasses import dataclass, field
from .synthetic import resolve_data_root
from typing import Dict, List
from .blocks import AdaptiveConcat
from .losses import MultiTaskLoss
import torch.nn as nn
import numpy as np
import threading
import logging
import random
import shutil
import torch
import copy
import halo
import math
import time
import csv
import os

logger = logging.getLogger("panopticroad")

GROUP_NAMES = ("decay", "no_decay", "bias")
GRAD_CLIP_NORM = 10.0
EMA_DECAY = 0.9999
EMA_TAU = 2000

METRICS_CSV = "metrics.csv"
CONFIG_SNAPSHOT = "config.yaml"
LAST_CHECKPOINT = "last.pt"
BEST_CHECKPOINT = "best.pt"

DEFAULT_FITNESS_WEIGHTS = {"map50": 0.2, "drivable_miou": 0.3, "lane_iou": 0.3, "lane_accuracy": 0.2}


def seed_everything(seed=0):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.backends.cudnn.benchmark = False
    torch.backends.cudnn.deterministic = True


def build_param_groups(model):
    """
    Splits the parameters into the three optimizer groups.

    Returns:
        dict[str, list[torch.nn.Parameter]]: "decay" (conv weights),
            "no_decay" (normalization weights and gate scalars) and "bias".
    """
    groups = {name: [] for name in GROUP_NAMES}
    for module in model.modules():
        for name, p in module.named_parameters(recurse=False):
            if name == "bias":
                groups["bias"].append(p)
            elif isinstance(module, (nn.modules.batchnorm._BatchNorm, AdaptiveConcat)):
                groups["no_decay"].append(p)
            else:
                groups["decay"].append(p)
    return groups


def build_optimizer(model, optim):
    groups = build_param_groups(model)
    optimizer = torch.optim.SGD([
        {"params": groups["decay"], "weight_decay": optim.weight_decay, "name": "decay"},
        {"params": groups["no_decay"], "weight_decay": 0.0, "name": "no_decay"},
        {"params": groups["bias"], "weight_decay": 0.0, "name": "bias"},
    ], lr=optim.lr0, momentum=optim.momentum, nesterov=True)
    logger.debug(f"Optimizer groups: {len(groups['decay'])} decayed weights, {len(groups['no_decay'])} "
                 f"non-decayed weights, {len(groups['bias'])} biases")
    return optimizer


@dataclass
class LRState:
    lr: Dict[str, float]
    momentum: float


def lr_schedule(epoch, iteration, iters_per_epoch, optim):
    """
    Learning rate per group and momentum at one training iteration.

    Args:
        epoch (int): Zero-based epoch.
        iteration (int): Zero-based iteration inside the epoch.
        iters_per_epoch (int): Batches per epoch.
        optim (OptimConfig): lr0, lrf, momentum, warmup_* and epochs_max.

    Returns:
        LRState
    """
    t = epoch + iteration / max(iters_per_epoch, 1)
    warmup = optim.warmup_epochs
    if warmup > 0 and t < warmup:
        f = t / warmup
        lr = {name: f * optim.lr0 for name in GROUP_NAMES}
        lr["bias"] = optim.warmup_bias_lr + f * (optim.lr0 - optim.warmup_bias_lr)
        return LRState(lr, optim.warmup_momentum + f * (optim.momentum - optim.warmup_momentum))
    span = max(optim.epochs_max - warmup, 1e-12)
    progress = min(max((t - warmup) / span, 0.0), 1.0)
    value = optim.lr0 * (1 - progress * (1 - optim.lrf))
    return LRState({name: value for name in GROUP_NAMES}, optim.momentum)


def apply_lr(optimizer, state):
    for group in optimizer.param_groups:
        group["lr"] = state.lr[group.get("name", "decay")]
        if "momentum" in group:
            group["momentum"] = state.momentum


def default_fitness_weights(tasks):
    """
    Composite weights for a task list: mAP50 0.2, drivable mIoU 0.3, lane
    IoU 0.3 and lane balanced accuracy 0.2. Other tasks weigh their IoU 0.3.
    """
    weights = {"map50": DEFAULT_FITNESS_WEIGHTS["map50"]}
    for task in tasks:
        if task == "drivable":
            weights["drivable_miou"] = DEFAULT_FITNESS_WEIGHTS["drivable_miou"]
        elif task == "lane":
            weights["lane_iou"] = DEFAULT_FITNESS_WEIGHTS["lane_iou"]
            weights["lane_accuracy"] = DEFAULT_FITNESS_WEIGHTS["lane_accuracy"]
        else:
            weights[f"{task}_iou"] = 0.3
    return weights


def fitness(metrics, weights=None):
    """
    Weighted sum of validation metrics.

    Raises:
        ConfigError: A weighted metric is missing from metrics.
    """
    weights = DEFAULT_FITNESS_WEIGHTS if weights is None else weights
    missing = [k for k in weights if k not in metrics]
    if missing:
        raise ConfigError(f"Fitness needs metric(s) {missing}, validation produced {sorted(metrics)}")
    return float(sum(w * metrics[k] for k, w in weights.items()))


class EarlyStopping:
    """
    Patience counter against the best fitness so far.

    A fitness counts as an improvement only when it is strictly greater
    than the best one. Training stops once 'patience' epochs have passed
    since the best epoch. patience <= 0 disables stopping.
    """

    def __init__(self, patience=50, best_fitness=-math.inf, best_epoch=0):
        self.patience = patience
        self.best_fitness = best_fitness
        self.best_epoch = best_epoch
        self.improved = False

    def __call__(self, epoch, value):
        self.improved = value > self.best_fitness
        if self.improved:
            self.best_fitness = value
            self.best_epoch = epoch
        stop = self.patience > 0 and epoch - self.best_epoch >= self.patience
        if stop:
            logger.info(f"Stopping early: no improvement for {self.patience} epochs, best fitness "
                        f"{self.best_fitness:.5f} at epoch {self.best_epoch}")
        return stop


@dataclass
class FitResult:
    epochs_run: int
    best_epoch: int
    best_fitness: float
    stopped_early: bool
    history: List[float] = field(default_factory=list)


def fit_loop(train_one, validate, epochs_max, patience=50, start_epoch=0, stopper=None,
             on_epoch_end=None, should_stop=None):
    """
    Epoch loop with validation and early stopping.

    Args:
        train_one (callable): train_one(epoch) trains zero-based epoch.
        validate (callable): validate(epoch) returns the fitness scalar.
        epochs_max (int): Epoch cap.
        patience (int, default=50): Early-stopping patience.
        start_epoch (int, default=0): Epochs already completed (resume).
        stopper (EarlyStopping, default=None): Pre-seeded counter.
        on_epoch_end (callable, default=None): Called with
            (epoch number, fitness, improved) after every epoch.
        should_stop (callable, default=None): Polled before every epoch.

    Returns:
        FitResult: epochs_run is the number of the last completed epoch.
    """
    stopper = stopper or EarlyStopping(patience)
    history = []
    stopped_early = False
    epochs_run = start_epoch
    for epoch in range(start_epoch, epochs_max):
        if should_stop is not None and should_stop():
            break
        train_one(epoch)
        value = validate(epoch)
        history.append(value)
        epochs_run = epoch + 1
        stop = stopper(epochs_run, value)
        if on_epoch_end is not None:
            on_epoch_end(epochs_run, value, stopper.improved)
        if stop:
            stopped_early = True
            break
    return FitResult(epochs_run=epochs_run, best_epoch=stopper.best_epoch, best_fitness=stopper.best_fitness,
                     stopped_early=stopped_early, history=history)


class ModelEMA:
    """Exponential moving average of the model state, with a decay ramp over the first updates."""

    def __init__(self, model, decay=EMA_DECAY, tau=EMA_TAU, updates=0):
        self.ema = copy.deepcopy(model).eval()
        self.updates = updates
        self.decay = lambda x: decay * (1 - math.exp(-x / tau))
        for p in self.ema.parameters():
            p.requires_grad_(False)

    def update(self, model):
        with torch.no_grad():
            self.updates += 1
            d = self.decay(self.updates)
            msd = model.state_dict()
            for k, v in self.ema.state_dict().items():
                if v.dtype.is_floating_point:
                    v *= d
                    v += (1 - d) * msd[k].detach()


@dataclass
class EpochStats:
    batches: int = 0
    forwards: int = 0
    backwards: int = 0
    steps: int = 0
    losses: Dict[str, float] = field(default_factory=dict)


def train_epoch(model, loader, optimizer, criterion, device="cpu", accumulate=1, on_batch_start=None,
                ema=None, epoch=0):
    """
    One pass over the loader.

    Per batch: one forward producing every output, one summed loss and one
    backward. The optimizer steps every 'accumulate' batches and after the
    last batch.

    Returns:
        EpochStats: Counters and the mean of every loss component.

    Raises:
        NumericalError: A loss component became non-finite; the message
            carries the epoch, the batch and the component values.
    """
    model.train()
    stats = EpochStats()
    sums = {}
    n = len(loader)
    optimizer.zero_grad(set_to_none=True)
    for i, (images, targets, masks, _) in enumerate(loader):
        if on_batch_start is not None:
            on_batch_start(i)
        bundle = model(images.to(device, non_blocking=True), mode="train")
        stats.forwards += 1
        try:
            loss, breakdown = criterion(bundle, targets, masks)
        except NumericalError as e:
            raise NumericalError(f"Epoch {epoch + 1}, batch {i + 1}: {e}") from e
        loss.backward()
        stats.backwards += 1
        if (i + 1) % accumulate == 0 or i + 1 == n:
            torch.nn.utils.clip_grad_norm_(model.parameters(), max_norm=GRAD_CLIP_NORM)
            optimizer.step()
            optimizer.zero_grad(set_to_none=True)
            stats.steps += 1
            if ema is not None:
                ema.update(model)
        stats.batches += 1
        for k, v in breakdown.as_dict().items():
            sums[k] = sums.get(k, 0.0) + v
        logger.debug(f"Epoch {epoch + 1} batch {i + 1}/{n}: {breakdown}")
    stats.losses = {k: v / max(stats.batches, 1) for k, v in sums.items()}
    return stats


def read_metrics_csv(path):
    if not os.path.isfile(path):
        return []
    with open(path, "r", newline="") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]


def plot_curves(rows, out_dir):
    """Writes loss_curve.png and fitness_curve.png from metrics CSV rows."""
    if not rows:
        return
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [int(r["epoch"]) for r in rows]
    loss_keys = [k for k in rows[0] if k.startswith("train/")]
    fig, ax = plt.subplots(figsize=(8, 5))
    for key in loss_keys:
        ax.plot(epochs, [r[key] for r in rows], label=key[len("train/"):])
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "loss_curve.png"), dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(8, 5))
    ax.plot(epochs, [r["fitness"] for r in rows], label="fitness")
    for key in (k for k in rows[0] if k.startswith("val/")):
        ax.plot(epochs, [r[key] for r in rows], label=key[len("val/"):], alpha=0.6)
    ax.set_xlabel("epoch")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "fitness_curve.png"), dpi=120)
    plt.close(fig)


class Trainer:
    """
    Runs a full training job into a run directory.

    Args:
        cfg (DictConfig): Merged run config (see config.load_config).
        run_dir (str, default=None): Output directory; defaults to
            cfg.out_dir. Nothing is written outside of it.
        resume (bool, default=False): Continue from <run_dir>/weights/last.pt.
        spinner (bool, default=True): Show a halo spinner with the state.
        device (str, default=None): Overrides cfg.device (the PANROAD_DEVICE
            environment variable still wins).
    """

    def __init__(self, cfg, run_dir=None, resume=False, spinner=True, device=None):
        self.cfg = cfg
        self.run_dir = run_dir or cfg.out_dir
        self.weights_dir = os.path.join(self.run_dir, "weights")
        self.resume = resume
        self.spinner = spinner
        self.device = resolve_device(device or cfg.device)
        self.halo = None
        self.state = "inactive"
        self.shutdown_lock = threading.Lock()
        self.is_shut_down = False
        self.stop_requested = False

        self.model = None
        self.optimizer = None
        self.criterion = None
        self.ema = None
        self.train_set = None
        self.train_loader = None
        self.val_loader = None
        self.stopper = None
        self.start_epoch = 0
        self.accumulate = 1
        self.last_stats = None
        self.last_report = None
        self.epoch_start = 0.0
        self.fitness_weights = (dict(cfg.fitness_weights) if cfg.fitness_weights
                                else default_fitness_weights(cfg.model.seg_tasks))

    def setup(self):
        """Builds data, model, loss and optimizer, and restores the last checkpoint when resuming."""
        self._set_state("loading")
        cfg = self.cfg
        os.makedirs(self.weights_dir, exist_ok=True)
        seed_everything(cfg.seed)

        root = resolve_data_root(cfg, self.run_dir)
        self.train_set = build_dataset(cfg, "train", root)
        val_set = build_dataset(cfg, "val", root, augment_enabled=False)
        self.train_loader = build_dataloader(self.train_set, cfg.optim.batch_size, shuffle=True,
                                             workers=cfg.data.workers, seed=cfg.seed)
        self.val_loader = build_dataloader(val_set, cfg.optim.batch_size, workers=cfg.data.workers, seed=cfg.seed)

        self.model = build_model(cfg).to(self.device)
        self.criterion = MultiTaskLoss(self.model, cfg.loss)
        self.optimizer = build_optimizer(self.model, cfg.optim)
        if cfg.optim.ema:
            self.ema = ModelEMA(self.model)
        nominal = cfg.optim.nominal_batch_size
        self.accumulate = max(round(nominal / cfg.optim.batch_size), 1) if nominal else 1
        self.stopper = EarlyStopping(cfg.optim.patience)

        if self.resume:
            self._restore()
        save_config(cfg, os.path.join(self.run_dir, CONFIG_SNAPSHOT))
        logger.info(f"Training {count_parameters(self.model):,} parameters on {self.device}, "
                    f"{len(self.train_set)} train / {len(val_set)} val images, tasks {list(cfg.model.seg_tasks)}")

    def _restore(self):
        path = os.path.join(self.weights_dir, LAST_CHECKPOINT)
        if not os.path.isfile(path):
            raise DataError(f"Cannot resume: {path} does not exist")
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
        tasks = ckpt["model_config"]["seg_tasks"]
        if list(tasks) != list(self.model.tasks):
            raise ConfigError(f"Task mismatch: checkpoint tasks {list(tasks)}, config tasks {self.model.tasks}")
        self.model.load_state_dict(ckpt["model"])
        if ckpt.get("optimizer"):
            self.optimizer.load_state_dict(ckpt["optimizer"])
        if self.ema is not None and ckpt.get("ema"):
            self.ema.ema.load_state_dict(ckpt["ema"])
            self.ema.updates = ckpt.get("ema_updates", 0)
        self.start_epoch = ckpt["epoch"]
        self.stopper = EarlyStopping(self.cfg.optim.patience, ckpt["best_fitness"],
                                     ckpt.get("best_epoch", ckpt["epoch"]))
        logger.info(f"Resuming from {path} after epoch {self.start_epoch} "
                    f"(best fitness {ckpt['best_fitness']:.5f} at epoch {self.stopper.best_epoch})")

    def train(self):
        """
        Runs the epoch loop.

        Returns:
            FitResult
        """
        if self.model is None:
            self.setup()
        optim = self.cfg.optim
        try:
            result = fit_loop(self._train_one, self._validate, optim.epochs_max, optim.patience,
                              start_epoch=self.start_epoch, stopper=self.stopper,
                              on_epoch_end=self._on_epoch_end, should_stop=lambda: self.stop_requested)
        finally:
            self._set_state("inactive")
        plot_curves(read_metrics_csv(os.path.join(self.run_dir, METRICS_CSV)), self.run_dir)
        logger.info(f"Finished after epoch {result.epochs_run}: best fitness {result.best_fitness:.5f} "
                    f"at epoch {result.best_epoch}")
        return result

    def _train_one(self, epoch):
        optim = self.cfg.optim
        close = self.cfg.augment.close_mosaic
        if close and epoch >= optim.epochs_max - close:
            self.train_set.close_mosaic()
        self.train_set.set_epoch(epoch)
        self._set_state("training")
        self._set_spinner(f"training epoch {epoch + 1}/{optim.epochs_max}")
        self.epoch_start = time.time()
        n = len(self.train_loader)

        def schedule(i):
            apply_lr(self.optimizer, lr_schedule(epoch, i, n, optim))

        self.last_stats = train_epoch(self.model, self.train_loader, self.optimizer, self.criterion,
                                      self.device, self.accumulate, schedule, self.ema, epoch)

    def _validate(self, epoch):
        self._set_state("validating")
        model = self.ema.ema if self.ema is not None else self.model
        thresholds = self.cfg.thresholds.eval
        self.last_report = evaluate(model, self.val_loader, thresholds.conf, thresholds.nms_iou, self.device,
                                    list(self.cfg.data.class_names))
        return fitness(self.last_report.metrics, self.fitness_weights)

    def _on_epoch_end(self, epoch, value, improved):
        self._set_state("saving")
        row = {"epoch": epoch, "lr": self.optimizer.param_groups[0]["lr"]}
        row.update({f"train/{k}": v for k, v in self.last_stats.losses.items()})
        row.update({f"val/{k}": v for k, v in self.last_report.metrics.items()})
        row["fitness"] = value
        row["time"] = time.time() - self.epoch_start
        self._append_row(row)

        last = os.path.join(self.weights_dir, LAST_CHECKPOINT)
        save_checkpoint(last, self.model, config_to_dict(self.cfg), epoch, self.stopper.best_fitness,
                        self.optimizer, self.ema.ema if self.ema is not None else None,
                        extra={"best_epoch": self.stopper.best_epoch,
                               "ema_updates": self.ema.updates if self.ema is not None else 0})
        if improved:
            shutil.copyfile(last, os.path.join(self.weights_dir, BEST_CHECKPOINT))
            write_report(self.last_report, self.run_dir)
        logger.info(f"Epoch {epoch}/{self.cfg.optim.epochs_max}: loss {self.last_stats.losses.get('total', 0.0):.4f}, "
                    f"fitness {value:.5f}{' (best)' if improved else ''}")

    def _append_row(self, row):
        path = os.path.join(self.run_dir, METRICS_CSV)
        new = not os.path.isfile(path)
        fieldnames = list(row)
        if not new:
            with open(path, newline="") as f:
                fieldnames = next(csv.reader(f), fieldnames)
        with open(path, "a", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fieldnames, restval="", extrasaction="ignore")
            if new:
                writer.writeheader()
            writer.writerow({k: f"{v:.6g}" if isinstance(v, float) else v for k, v in row.items()})

    def _set_state(self, new_state):
        """
        Updates the trainer state and the spinner.

        Args:
            new_state (str): "loading", "training", "validating", "saving"
                or "inactive".
        """
        if new_state == self.state:
            return
        old_state = self.state
        self.state = new_state
        logger.info(f"State changed from '{old_state}' to '{new_state}'")

        if new_state == "inactive":
            if self.spinner and self.halo:
                self.halo.stop()
                self.halo = None
        elif new_state != "training":
            self._set_spinner(new_state)

    def _set_spinner(self, text):
        if self.spinner:
            if self.halo is None:
                self.halo = halo.Halo(text=text)
                self.halo.start()
            else:
                self.halo.text = text

    def shutdown(self):
        """
        Stops training after the current epoch has been checkpointed and
        releases the spinner. Safe to call more than once.
        """
        with self.shutdown_lock:
            if self.is_shut_down:
                return
            self.is_shut_down = True
            self.stop_requested = True
            self._set_state("inactive")
            if self.halo is not None:
                self.halo.stop()
                self.halo = None
            logger.debug("Trainer shut down")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        self.shutdown()
