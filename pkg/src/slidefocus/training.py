"""Two-phase optimization: thumbnail warmup until the validation loss
plateaus, then the joint objective with magnified crops. Epoch order is a
pure function of (seed, phase, epoch), so reruns are bit-identical and a
resumed run replays the same stream.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import nn, pipeline
from .config import PipelineConfig, lr_for_name
from .nn import ParamStore
from .slides import SlideSet

JOINT_EPOCH_OFFSET = 100_000  # keeps the joint phase on its own rng stream


def split_train_val(ids, seed: int, fraction: float = 0.2):
    """Deterministic validation split (at least one slide)."""
    ids = list(ids)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5917]))
    perm = rng.permutation(len(ids))
    n_val = max(1, int(round(len(ids) * fraction)))
    val = sorted(ids[i] for i in perm[:n_val])
    train = sorted(ids[i] for i in perm[n_val:])
    if not train:
        raise ValueError("validation split consumed every slide")
    return train, val


def epoch_order(ids, seed: int, epoch: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1 + epoch]))
    return [ids[i] for i in rng.permutation(len(ids))]


def rank_auc(scores, labels) -> float:
    """Mann-Whitney AUC from average ranks; 0.5 when one class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos = int(labels.sum())
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        return 0.5
    ranks = stats.rankdata(scores)
    return float((ranks[labels].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    train_loss: float
    train_terms: dict
    val_loss: float
    val_accuracy: float
    seconds: float

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["train_terms"] = {k: round(v, 6) for k, v in self.train_terms.items()}
        for k in ("train_loss", "val_loss", "val_accuracy", "seconds"):
            d[k] = round(d[k], 6)
        return d


def history_csv(history) -> str:
    """Metrics log: phase, epoch, each loss term, val accuracy, timing."""
    import csv
    import io

    terms = sorted({k for r in history for k in r.train_terms} - {"total"})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["phase", "epoch", "train_loss",
                *[f"train_{t}" for t in terms],
                "val_loss", "val_accuracy", "seconds"])
    for r in history:
        w.writerow([r.phase, r.epoch, f"{r.train_loss:.6f}",
                    *[f"{r.train_terms[t]:.6f}" if t in r.train_terms else ""
                      for t in terms],
                    f"{r.val_loss:.6f}", f"{r.val_accuracy:.6f}",
                    f"{r.seconds:.3f}"])
    return buf.getvalue()


@dataclass
class TrainState:
    """Everything the phase loop needs to pick up where it stopped.

    Epoch order is a pure function of (seed, phase, epoch), so no RNG state
    is stored; the counters and trackers here plus the optimizer velocity
    make a resumed run replay the uninterrupted trajectory bit for bit.
    """
    phase: str = "global"        # "global" -> "joint" -> "done"
    epoch: int = 0               # next epoch index within the current phase
    plateau_loss: float = float("inf")
    plateau_bad: int = 0
    best_val_accuracy: float = -1.0
    best_val_loss: float = float("inf")
    best_epoch: int = -1
    joint_bad: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, d: dict) -> "TrainState":
        return cls(**d)


class DivergenceError(RuntimeError):
    """Training loss stopped being finite; .dump holds the offending terms."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainResult:
    history: list
    best_val_accuracy: float
    best_epoch: int
    train_ids: list
    val_ids: list

    def to_json(self) -> dict:
        return {"history": [r.to_json() for r in self.history],
                "best_val_accuracy": self.best_val_accuracy,
                "best_epoch": self.best_epoch,
                "train_ids": self.train_ids, "val_ids": self.val_ids}


class Trainer:
    """Owns the parameters, optimizer, graph caches, and the phase loop."""

    def __init__(self, cfg: PipelineConfig, dataset: SlideSet, log=None):
        self.cfg = cfg
        self.data = dataset
        self.log = log or (lambda msg: None)
        self.ps = pipeline.build_model(cfg)
        self.opt = nn.SGD(self.ps, lr_for_name(cfg), cfg.momentum,
                          cfg.weight_decay)
        self.thumb_cache: dict = {}
        self.crop_caches: dict = {}
        self.history: list = []
        self.state = TrainState()
        self.best_state: dict | None = None
        self._budget: int | None = None
        self.train_ids, self.val_ids = split_train_val(dataset.train_ids,
                                                       cfg.seed)

    # -- caches ------------------------------------------------------------

    def thumb_graph(self, slide_id: str):
        g = self.thumb_cache.get(slide_id)
        if g is None:
            g = pipeline.thumbnail_graph(self.data.get(slide_id), self.cfg)
            self.thumb_cache[slide_id] = g
        return g

    def crop_cache(self, slide_id: str) -> dict:
        return self.crop_caches.setdefault(slide_id, {})

    # -- epoch loops ---------------------------------------------------------

    def _slide_pass(self, slide_id: str, with_local: bool):
        record = self.data.get(slide_id)
        out = pipeline.run_slide(self.ps, self.cfg, record,
                                 graph=self.thumb_graph(slide_id),
                                 crop_cache=self.crop_cache(slide_id),
                                 with_local=with_local)
        losses = pipeline.slide_losses(self.ps, self.cfg, out,
                                       self.data.label(slide_id))
        if not with_local:
            losses.pop("all", None)   # warmup trains the thumbnail objective only
        return out, losses

    def run_epoch(self, ids, epoch_key: int, with_local: bool,
                  train: bool = True):
        """One pass over ids; returns (mean term values, accuracy)."""
        cfg = self.cfg
        order = epoch_order(ids, cfg.seed, epoch_key) if train else list(ids)
        sums: dict = {}
        correct = 0
        pending = 0
        if train:
            self.opt.zero_grad()
        for slide_id in order:
            out, losses = self._slide_pass(slide_id, with_local)
            total = pipeline.total_loss(cfg, losses)
            if not np.isfinite(float(total.values)):
                raise DivergenceError(
                    f"non-finite loss on slide {slide_id!r}",
                    {"slide": slide_id, "epoch_key": epoch_key,
                     "terms": pipeline.loss_values(losses)})
            for k, v in pipeline.loss_values(losses).items():
                sums[k] = sums.get(k, 0.0) + v
            sums["total"] = sums.get("total", 0.0) + float(total.values)
            pred = out.predicted_class() if with_local \
                else out.gtrace.predicted_class()
            correct += int(pred == self.data.label(slide_id))
            if train:
                total.backward()
                pending += 1
                if pending == cfg.batch_size:
                    nn.clip_grad_norm(self.ps, cfg.grad_clip)
                    self.opt.step()
                    self.opt.zero_grad()
                    pending = 0
        if train and pending:
            nn.clip_grad_norm(self.ps, cfg.grad_clip)
            self.opt.step()
            self.opt.zero_grad()
        means = {k: v / len(order) for k, v in sums.items()}
        return means, correct / len(order)

    # -- phases --------------------------------------------------------------

    def _spend_budget(self) -> bool:
        """True when an epoch may run; counts down an optional epoch budget."""
        if self._budget is None:
            return True
        if self._budget <= 0:
            return False
        self._budget -= 1
        return True

    def phase_global(self) -> None:
        cfg, st = self.cfg, self.state
        while st.phase == "global":
            if st.epoch >= cfg.max_epochs_global:
                st.phase, st.epoch = "joint", 0
                break
            if not self._spend_budget():
                return
            epoch = st.epoch
            t0 = time.perf_counter()
            train_means, _ = self.run_epoch(self.train_ids, epoch,
                                            with_local=False)
            val_means, val_acc = self.run_epoch(self.val_ids, epoch,
                                                with_local=False, train=False)
            rec = EpochRecord("global", epoch, train_means["total"],
                              train_means, val_means["total"], val_acc,
                              time.perf_counter() - t0)
            self.history.append(rec)
            self.log(f"[global {epoch:03d}] train {rec.train_loss:.4f} "
                     f"val {rec.val_loss:.4f} acc {val_acc:.3f}")
            st.epoch += 1
            improved = (not np.isfinite(st.plateau_loss)
                        or st.plateau_loss - rec.val_loss
                        > cfg.convergence_tol * max(abs(st.plateau_loss), 1e-12))
            if improved:
                st.plateau_loss = rec.val_loss
                st.plateau_bad = 0
            else:
                st.plateau_bad += 1
                if st.plateau_bad >= cfg.patience:
                    st.phase, st.epoch = "joint", 0

    def phase_joint(self) -> None:
        cfg, st = self.cfg, self.state
        if self.best_state is None:
            self.best_state = self.ps.export_values()
        while st.phase == "joint":
            if st.epoch >= cfg.max_epochs_joint:
                st.phase = "done"
                break
            if not self._spend_budget():
                return
            epoch = st.epoch
            t0 = time.perf_counter()
            train_means, _ = self.run_epoch(
                self.train_ids, JOINT_EPOCH_OFFSET + epoch,
                with_local=cfg.enable_local)
            val_means, val_acc = self.run_epoch(
                self.val_ids, JOINT_EPOCH_OFFSET + epoch,
                with_local=cfg.enable_local, train=False)
            rec = EpochRecord("joint", epoch, train_means["total"],
                              train_means, val_means["total"], val_acc,
                              time.perf_counter() - t0)
            self.history.append(rec)
            self.log(f"[joint {epoch:03d}] train {rec.train_loss:.4f} "
                     f"val {rec.val_loss:.4f} acc {val_acc:.3f}")
            st.epoch += 1
            improved = (val_acc > st.best_val_accuracy
                        or (val_acc == st.best_val_accuracy
                            and rec.val_loss < st.best_val_loss))
            if improved:
                st.best_val_accuracy = val_acc
                st.best_val_loss = rec.val_loss
                st.best_epoch = len(self.history) - 1
                self.best_state = self.ps.export_values()
                st.joint_bad = 0
            else:
                st.joint_bad += 1
                if st.joint_bad >= cfg.joint_patience:
                    st.phase = "done"
        if st.phase == "done" and self.best_state is not None:
            self.ps.load_values(self.best_state)

    def result(self) -> TrainResult:
        st = self.state
        return TrainResult(self.history, st.best_val_accuracy, st.best_epoch,
                           self.train_ids, self.val_ids)

    def train(self, epoch_budget: int | None = None) -> TrainResult:
        """Run (or continue) both phases; an epoch budget stops mid-phase.

        With a budget the trainer parks wherever the count ran out; save()
        then resume() later continues the identical trajectory.
        """
        self._budget = epoch_budget
        try:
            if self.state.phase == "global":
                self.phase_global()
            if self.state.phase == "joint":
                self.phase_joint()
        finally:
            self._budget = None
        return self.result()

    def save(self, path, extra_meta: dict | None = None) -> None:
        arrays = self.ps.export_values()
        for name, v in self.opt.export_velocity().items():
            arrays[f"opt/{name}"] = v
        if self.best_state is not None:
            for name, v in self.best_state.items():
                arrays[f"best/{name}"] = v
        meta = {"config": self.cfg.to_json(),
                "train_state": self.state.to_json(),
                "history": [r.to_json() for r in self.history],
                "train_ids": self.train_ids, "val_ids": self.val_ids}
        if extra_meta:
            meta.update(extra_meta)
        nn.save_checkpoint(path, arrays, meta)

    @classmethod
    def resume(cls, path, dataset: SlideSet, log=None) -> "Trainer":
        """Rebuild a trainer from a save() checkpoint, mid-phase included."""
        meta, arrays = nn.load_checkpoint(path)
        if "train_state" not in meta:
            raise ValueError("checkpoint carries no training state")
        cfg = PipelineConfig.from_json(meta["config"])
        tr = cls(cfg, dataset, log=log)
        tr.ps.load_values(arrays)
        velocity = {k[len("opt/"):]: v for k, v in arrays.items()
                    if k.startswith("opt/")}
        if velocity:
            tr.opt.load_velocity(velocity)
        best = {k[len("best/"):]: v for k, v in arrays.items()
                if k.startswith("best/")}
        tr.best_state = best or None
        tr.state = TrainState.from_json(meta["train_state"])
        tr.history = [EpochRecord(**r) for r in meta.get("history", [])]
        return tr


def load_model(path, cfg: PipelineConfig | None = None):
    """Rebuild a model from a checkpoint; geometry must match the config.

    When cfg is None the checkpoint's own embedded config is used.
    Returns (ps, cfg, meta).
    """
    meta, arrays = nn.load_checkpoint(path)
    stored = PipelineConfig.from_json(meta["config"]) if "config" in meta else None
    if cfg is None:
        if stored is None:
            raise ValueError("checkpoint carries no config; pass one explicitly")
        cfg = stored
    elif stored is not None:
        if cfg.geometry_signature() != stored.geometry_signature():
            raise ValueError("checkpoint geometry does not match the config")
    ps = pipeline.build_model(cfg)
    ps.load_values(arrays)
    return ps, cfg, meta


def evaluate(ps: ParamStore, cfg: PipelineConfig, dataset: SlideSet, ids,
             with_losses: bool = False) -> dict:
    """Fused-prediction accuracy (and optionally mean loss) over slides."""
    predictions = {}
    correct = 0
    loss_sum = 0.0
    for slide_id in ids:
        record = dataset.get(slide_id)
        out = pipeline.run_slide(ps, cfg, record)
        label = dataset.label(slide_id)
        pred = out.predicted_class()
        correct += int(pred == label)
        row = {"label": label, "predicted": pred,
               "probabilities": [round(float(p), 6)
                                 for p in out.probabilities()],
               "shortfall": out.selection.shortfall}
        if with_losses:
            losses = pipeline.slide_losses(ps, cfg, out, label)
            row["loss"] = round(float(pipeline.total_loss(cfg, losses).values), 6)
            loss_sum += row["loss"]
        predictions[slide_id] = row
    result = {"accuracy": correct / len(ids), "count": len(ids),
              "predictions": predictions}
    if with_losses:
        result["mean_loss"] = loss_sum / len(ids)
    return result
