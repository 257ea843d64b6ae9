"""Pretraining orchestration: batching, per-record reference sampling,
residualization, projection, loss, Adam, checkpointing.

Determinism contract: all randomness is derived counter-style from
(seed, purpose, epoch, step), so a run is bit-reproducible and a resumed run
replays the exact remaining stream.  Checkpoints therefore carry parameters,
Adam moments, the running centers and the epoch counter, but no RNG state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .losses import CenterEstimator, ContrastiveBatch, LossConfig, total_loss
from .projector import ProjectorConfig, ProjectorParams, init_params, project
from .residual import build_bank, residualize, sample_references
from .store import Manifest, read_tagged, write_tagged

CENTER_MODES = ("ema", "epoch")

# defaults used outside TrainConfig, surfaced by the resolved-config audit
SCORING_REFERENCE_COUNT = 8     # few-shot reference samples at scoring time
ALIGN_GRID_SIZE = 5             # refmatch S
ALIGN_CENTERS_PER_CELL = 5      # refmatch N_c


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    learning_rate: float = 1e-4
    seed: int = 42
    k_choices: tuple = (1, 4, 8)
    label_threshold: float = 0.0
    levels: tuple | None = None          # None = all levels
    center_mode: str = "ema"
    loss: LossConfig = field(default_factory=LossConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("train config: batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("train config: epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("train config: learning_rate must be > 0")
        if self.center_mode not in CENTER_MODES:
            raise ValueError(f"train config: center_mode must be one of {CENTER_MODES}")
        self.k_choices = tuple(sorted(int(k) for k in self.k_choices))
        if not self.k_choices or self.k_choices[0] < 1:
            raise ValueError("train config: k_choices must be positive")
        if self.levels is not None:
            self.levels = tuple(int(l) for l in self.levels)


def resolved_config(cfg: TrainConfig) -> dict:
    """Flat key -> value view of every knob, for printing and the defaults audit."""
    out = {
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "learning_rate": cfg.learning_rate,
        "seed": cfg.seed,
        "k_choices": ",".join(str(k) for k in cfg.k_choices),
        "label_threshold": cfg.label_threshold,
        "levels": "all" if cfg.levels is None else ",".join(map(str, cfg.levels)),
        "center_mode": cfg.center_mode,
        "tau": cfg.loss.tau,
        "r": cfg.loss.radius,
        "delta_r": cfg.loss.margin,
        "lambda": cfg.loss.angle_weight,
        "denominator_mode": cfg.loss.denominator_mode,
        "center_momentum": cfg.loss.center_momentum,
        "angle_anchor_cap": "none" if cfg.loss.angle_anchor_cap is None else cfg.loss.angle_anchor_cap,
        "num_layers": cfg.projector.num_layers,
        "n_r": cfg.projector.n_r,
        "n_heads": cfg.projector.n_heads,
        "hidden_width": "auto" if cfg.projector.hidden_width is None else cfg.projector.hidden_width,
        "init_seed": cfg.projector.init_seed,
        "reference_count": SCORING_REFERENCE_COUNT,
        "align_grid_size": ALIGN_GRID_SIZE,
        "align_centers_per_cell": ALIGN_CENTERS_PER_CELL,
    }
    return out


_INT_KEYS = {"batch_size", "epochs", "seed", "num_layers", "n_r", "n_heads", "init_seed"}
_FLOAT_KEYS = {"learning_rate", "label_threshold", "tau", "r", "delta_r", "lambda",
               "center_momentum"}


def parse_config(text: str) -> TrainConfig:
    """Parse the key=value training config (same keys as resolved_config)."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        values[key] = (value, lineno)

    def pop(key, default=None):
        if key in values:
            return values.pop(key)[0]
        return default

    kwargs: dict = {}
    loss_kwargs: dict = {}
    proj_kwargs: dict = {}
    for key in list(values):
        raw, lineno = values[key]
        try:
            if key in ("k_choices",):
                kwargs["k_choices"] = tuple(int(p) for p in raw.split(","))
            elif key == "levels":
                kwargs["levels"] = None if raw == "all" else tuple(int(p) for p in raw.split(","))
            elif key == "center_mode":
                kwargs["center_mode"] = raw
            elif key == "denominator_mode":
                loss_kwargs["denominator_mode"] = raw
            elif key == "angle_anchor_cap":
                loss_kwargs["angle_anchor_cap"] = None if raw == "none" else int(raw)
            elif key == "hidden_width":
                proj_kwargs["hidden_width"] = None if raw == "auto" else int(raw)
            elif key in ("tau",):
                loss_kwargs["tau"] = float(raw)
            elif key == "r":
                loss_kwargs["radius"] = float(raw)
            elif key == "delta_r":
                loss_kwargs["margin"] = float(raw)
            elif key == "lambda":
                loss_kwargs["angle_weight"] = float(raw)
            elif key == "center_momentum":
                loss_kwargs["center_momentum"] = float(raw)
            elif key in ("num_layers", "n_r", "n_heads", "init_seed"):
                proj_kwargs[key] = int(raw)
            elif key in _INT_KEYS:
                kwargs[key] = int(raw)
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(raw)
            else:
                raise ValueError(f"unknown key '{key}'")
        except ValueError as e:
            raise ValueError(f"config line {lineno}: {e}") from e
        values.pop(key)
    return TrainConfig(loss=LossConfig(**loss_kwargs),
                       projector=ProjectorConfig(**proj_kwargs), **kwargs)


@dataclass
class TrainedState:
    """Everything needed to score and to resume training bit-exactly."""

    config: TrainConfig
    levels: tuple                        # level indices that were trained
    widths: dict                         # level -> feature width
    params: dict                         # level -> ProjectorParams
    centers: dict                        # level -> CenterEstimator
    adam: ad.AdamState
    epochs_done: int = 0
    steps_done: int = 0


def _flat_params(state: TrainedState) -> dict:
    flat = {}
    for lvl in state.levels:
        for name, arr in state.params[lvl].arrays.items():
            flat[f"level{lvl}.{name}"] = arr
    return flat


def _unflatten(state: TrainedState, flat: dict) -> None:
    for lvl in state.levels:
        arrays = state.params[lvl].arrays
        for name in arrays:
            arrays[name] = flat[f"level{lvl}.{name}"]


def init_state(config: TrainConfig, level_widths: list[int]) -> TrainedState:
    levels = config.levels if config.levels is not None else tuple(range(len(level_widths)))
    for lvl in levels:
        if lvl < 0 or lvl >= len(level_widths):
            raise ValueError(f"train config: level {lvl} out of range")
    params = {lvl: init_params(config.projector, level_widths[lvl], config.seed + lvl)
              for lvl in levels}
    centers = {lvl: CenterEstimator(momentum=config.loss.center_momentum) for lvl in levels}
    widths = {lvl: level_widths[lvl] for lvl in levels}
    return TrainedState(config, levels, widths, params, centers,
                        ad.AdamState(learning_rate=config.learning_rate))


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------


def save_checkpoint(state: TrainedState, path) -> None:
    cfg = state.config
    fields: dict = {
        "seed": cfg.seed,
        "batch_size": cfg.batch_size,
        "epochs_target": cfg.epochs,
        "epochs_done": state.epochs_done,
        "steps_done": state.steps_done,
        "learning_rate": cfg.learning_rate,
        "label_threshold": cfg.label_threshold,
        "center_mode": cfg.center_mode,
        "k_choices": np.asarray(cfg.k_choices, dtype=np.int64),
        "loss.tau": cfg.loss.tau,
        "loss.r": cfg.loss.radius,
        "loss.delta_r": cfg.loss.margin,
        "loss.lambda": cfg.loss.angle_weight,
        "loss.denominator_mode": cfg.loss.denominator_mode,
        "loss.center_momentum": cfg.loss.center_momentum,
        "loss.angle_anchor_cap": -1 if cfg.loss.angle_anchor_cap is None else cfg.loss.angle_anchor_cap,
        "proj.num_layers": cfg.projector.num_layers,
        "proj.n_r": cfg.projector.n_r,
        "proj.n_heads": cfg.projector.n_heads,
        "proj.init_seed": cfg.projector.init_seed,
        "adam.step": state.adam.step,
        "levels": np.asarray(state.levels, dtype=np.int64),
    }
    for lvl in state.levels:
        fields[f"level{lvl}.width"] = state.widths[lvl]
        est = state.centers[lvl]
        fields[f"level{lvl}.center_init"] = int(est.initialized)
        fields[f"level{lvl}.center"] = (est.center if est.initialized
                                        else np.zeros(state.widths[lvl])).astype(np.float64)
        for name, arr in state.params[lvl].arrays.items():
            fields[f"level{lvl}.param.{name}"] = arr
            key = f"level{lvl}.{name}"
            if key in state.adam.m:
                fields[f"level{lvl}.adam.m.{name}"] = state.adam.m[key]
                fields[f"level{lvl}.adam.v.{name}"] = state.adam.v[key]
    write_tagged(fields, path)


def load_checkpoint(path) -> TrainedState:
    fields = read_tagged(path)
    loss_cfg = LossConfig(
        tau=fields["loss.tau"], radius=fields["loss.r"], margin=fields["loss.delta_r"],
        angle_weight=fields["loss.lambda"], denominator_mode=fields["loss.denominator_mode"],
        center_momentum=fields["loss.center_momentum"],
        angle_anchor_cap=None if fields["loss.angle_anchor_cap"] < 0
        else int(fields["loss.angle_anchor_cap"]))
    proj_cfg = ProjectorConfig(num_layers=int(fields["proj.num_layers"]),
                               n_r=int(fields["proj.n_r"]),
                               n_heads=int(fields["proj.n_heads"]),
                               init_seed=int(fields["proj.init_seed"]))
    levels = tuple(int(l) for l in fields["levels"])
    config = TrainConfig(batch_size=int(fields["batch_size"]),
                         epochs=int(fields["epochs_target"]),
                         learning_rate=fields["learning_rate"],
                         seed=int(fields["seed"]),
                         k_choices=tuple(int(k) for k in fields["k_choices"]),
                         label_threshold=fields["label_threshold"],
                         levels=levels,
                         center_mode=fields["center_mode"],
                         loss=loss_cfg, projector=proj_cfg)
    params, centers, widths = {}, {}, {}
    adam = ad.AdamState(learning_rate=config.learning_rate, step=int(fields["adam.step"]))
    for lvl in levels:
        widths[lvl] = int(fields[f"level{lvl}.width"])
        arrays = {}
        prefix = f"level{lvl}.param."
        for key in fields:
            if key.startswith(prefix):
                arrays[key[len(prefix):]] = fields[key]
        params[lvl] = ProjectorParams(arrays, widths[lvl], proj_cfg.n_r,
                                      proj_cfg.n_heads, proj_cfg.num_layers)
        est = CenterEstimator(momentum=loss_cfg.center_momentum)
        if fields[f"level{lvl}.center_init"]:
            est.center = fields[f"level{lvl}.center"]
        centers[lvl] = est
        for name in arrays:
            mk = f"level{lvl}.adam.m.{name}"
            if mk in fields:
                adam.m[f"level{lvl}.{name}"] = fields[mk]
                adam.v[f"level{lvl}.{name}"] = fields[f"level{lvl}.adam.v.{name}"]
    return TrainedState(config, levels, widths, params, centers, adam,
                        epochs_done=int(fields["epochs_done"]),
                        steps_done=int(fields["steps_done"]))


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


def _load_training_records(manifest: Manifest):
    entries = manifest.split("train")
    if not entries:
        raise ValueError("pretrain: manifest train split is empty")
    records = {}
    for entry in entries:
        rec = manifest.load(entry)
        if rec.augmented_levels is None:
            raise ValueError(f"pretrain: record '{rec.image_id}' has no augmented twin")
        records[entry.record_path] = rec
    shapes = records[entries[0].record_path].level_shapes()
    for entry in entries:
        if records[entry.record_path].level_shapes() != shapes:
            raise ValueError(f"pretrain: record '{entry.record_path}' level dims differ")
    return entries, records, shapes


def _class_pools(entries):
    pools: dict = {}
    for e in entries:
        if e.image_label == 0:
            pools.setdefault(e.class_id, []).append(e)
    return pools


def _batch_features(batch_entries, records, pools, config: TrainConfig, levels,
                    rng: np.random.Generator):
    """Residualize one batch; returns per-level (features 2N x C, labels 2N)."""
    per_level = {lvl: {"orig": [], "aug": [], "labels": []} for lvl in levels}
    for entry in batch_entries:
        rec = records[entry.record_path]
        pool = pools.get(entry.class_id, [])
        refs = sample_references(pool, config.k_choices, rng)
        bank = build_bank([records[e.record_path] for e in refs])
        rr = residualize(rec, bank, config.label_threshold)
        for lvl in levels:
            h, w, c = rr.residuals[lvl].shape
            per_level[lvl]["orig"].append(rr.residuals[lvl].reshape(h * w, c))
            per_level[lvl]["aug"].append(rr.augmented_residuals[lvl].reshape(h * w, c))
            per_level[lvl]["labels"].append(rr.labels[lvl].reshape(h * w))
    out = {}
    for lvl in levels:
        orig = np.concatenate(per_level[lvl]["orig"])
        aug = np.concatenate(per_level[lvl]["aug"])
        labels = np.concatenate(per_level[lvl]["labels"])
        out[lvl] = (np.concatenate([orig, aug]).astype(ad.default_dtype()),
                    np.concatenate([labels, labels]))
    return out


def _recompute_centers(state: TrainedState, entries, records, pools, epoch: int) -> None:
    """Full-recomputation center mode: mean of projected normal features."""
    config = state.config
    rng = np.random.default_rng([config.seed, 3, epoch])
    collected = {lvl: [] for lvl in state.levels}
    for entry in entries:
        rec = records[entry.record_path]
        refs = sample_references(pools.get(entry.class_id, []), config.k_choices, rng)
        bank = build_bank([records[e.record_path] for e in refs])
        rr = residualize(rec, bank, config.label_threshold)
        for lvl in state.levels:
            h, w, c = rr.residuals[lvl].shape
            flat = rr.residuals[lvl].reshape(h * w, c)
            normal = flat[rr.labels[lvl].reshape(h * w) == 0]
            if len(normal):
                out = project(normal.astype(ad.default_dtype()), state.params[lvl])
                collected[lvl].append(np.asarray(out.data))
    for lvl in state.levels:
        if collected[lvl]:
            state.centers[lvl].center = np.concatenate(collected[lvl]).mean(axis=0)


def pretrain(manifest: Manifest, config: TrainConfig, out_path=None,
             resume_from=None, on_epoch_end=None):
    """Train the per-level projectors; returns (TrainedState, loss history).

    ``out_path`` gets a checkpoint after every epoch and at the end.  Passing
    ``resume_from`` continues a run bit-exactly (same manifest order, config
    and seed required).
    """
    entries, records, shapes = _load_training_records(manifest)
    pools = _class_pools(entries)
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        supplied = config if config.levels is not None else replace(config, levels=state.levels)
        stored_view, supplied_view = resolved_config(state.config), resolved_config(supplied)
        stored_view.pop("epochs"), supplied_view.pop("epochs")  # target may be extended
        if stored_view != supplied_view:
            diff = [k for k in stored_view if stored_view[k] != supplied_view.get(k)]
            raise ValueError(f"pretrain: resume config differs on {diff}")
        state.config = supplied
    else:
        state = init_state(config, [s[2] for s in shapes])
    config = state.config

    history: list[dict] = []
    for epoch in range(state.epochs_done, config.epochs):
        if config.center_mode == "epoch":
            _recompute_centers(state, entries, records, pools, epoch)
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(len(entries))
        batch_starts = range(0, len(order), config.batch_size)
        for step_in_epoch, start in enumerate(batch_starts):
            chosen = [entries[i] for i in order[start:start + config.batch_size]]
            if len(chosen) < 2:
                continue  # a trailing single-record batch cannot form pairs
            rng = np.random.default_rng([config.seed, 2, epoch, step_in_epoch])
            features = _batch_features(chosen, records, pools, config, state.levels, rng)
            try:
                with ad.Tape() as tape:
                    leaves = {name: tape.leaf(arr)
                              for name, arr in _flat_params(state).items()}
                    total = None
                    step_stats = {"angle": 0.0, "norm": 0.0, "skipped_anchors": 0}
                    for lvl in state.levels:
                        feats, labels = features[lvl]
                        lvl_tensors = {name: leaves[f"level{lvl}.{name}"]
                                       for name in state.params[lvl].arrays}
                        projected = project(feats, state.params[lvl], lvl_tensors)
                        if config.center_mode == "ema":
                            out_now = np.asarray(projected.data)
                            state.centers[lvl].update(out_now[labels == 0])
                        batch = ContrastiveBatch(projected, labels,
                                                 state.centers[lvl].center)
                        lvl_loss, breakdown = total_loss(batch, config.loss, rng)
                        rows = feats.shape[0]
                        step_stats["angle"] += config.loss.angle_weight * breakdown["angle_sum"] / rows
                        step_stats["norm"] += breakdown["norm_mean"]
                        step_stats["skipped_anchors"] += breakdown["skipped_anchors"]
                        total = lvl_loss if total is None else ad.add(total, lvl_loss)
                grads = tape.gradient(total, list(leaves.values()))
            except ValueError as e:
                raise RuntimeError(f"pretrain: non-finite loss at step {state.steps_done} "
                                   f"(epoch {epoch}): {e}") from e
            grad_dict = dict(zip(leaves.keys(), grads))
            new_flat = ad.adam_step(_flat_params(state), grad_dict, state.adam)
            _unflatten(state, new_flat)
            state.steps_done += 1
            history.append({"epoch": epoch, "step": state.steps_done,
                            "total": float(total.data), **step_stats})
        state.epochs_done = epoch + 1
        if out_path is not None:
            save_checkpoint(state, out_path)
        if on_epoch_end is not None:
            on_epoch_end(state, history)
    if out_path is not None:
        save_checkpoint(state, out_path)
    return state, history


def save_history(history: list[dict], path) -> None:
    Path(path).write_text(json.dumps(history, indent=2))
