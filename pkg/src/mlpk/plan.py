"""TOML plan files describing a multi-phase compression run.

Schema (every key optional unless noted)::

    seed = 42

    [train]                 # optimiser for sparsity induction
    lr = 0.005
    momentum = 0.9
    batch_size = 32
    lr_decay = 0.1
    decay_every = 3

    [retrain]               # optimiser for post-pruning retraining
    lr = 0.001
    decay_every = 0

    [[phase]]
    layers = ["conv1_1", "conv1_2"]   # required, contiguous conv/fc run
    alpha = 0.01                       # omit to search alpha_grid
    alpha_grid = [1e-4, 1e-3, 1e-2]
    eps1 = 2.5
    eps2 = 6.0
    threshold = 0.05                   # omit to search
    s_f = 0.9
    s_f_prime = 0.85
    s_g = 0.95
    l1_epochs = 4
    retrain_epochs = 4                 # default: l1_epochs
    progressive = true
    compare_layerwise = false
    drop_tail_after = "conv4_2"

An empty file is a valid plan with no phases.
"""
from __future__ import annotations

from dataclasses import asdict, fields
from pathlib import Path

import tomli

from .pipeline import Phase, PhasePlan
from .prune import SelectionThresholds
from .train import TrainConfig


class PlanError(ValueError):
    pass


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"epochs", "seed"}
_SELECTION_KEYS = ("s_f", "s_f_prime", "s_g")
_PHASE_KEYS = ({f.name for f in fields(Phase)} - {"selection"}) | set(_SELECTION_KEYS)


def _train_cfg(table: dict, base: TrainConfig, where: str) -> TrainConfig:
    unknown = set(table) - _TRAIN_KEYS
    if unknown:
        raise PlanError(f"unknown keys in [{where}]: {sorted(unknown)}")
    return TrainConfig(**{**asdict(base), **table})


def _phase(table: dict, k: int) -> Phase:
    unknown = set(table) - _PHASE_KEYS
    if unknown:
        raise PlanError(f"unknown keys in phase {k}: {sorted(unknown)}")
    if not table.get("layers"):
        raise PlanError(f"phase {k} needs a non-empty 'layers' list")
    kw = {key: v for key, v in table.items() if key not in _SELECTION_KEYS}
    defaults = SelectionThresholds()
    sel = {key: float(table.get(key, getattr(defaults, key))) for key in _SELECTION_KEYS}
    try:
        kw["selection"] = SelectionThresholds(**sel)
    except ValueError as e:
        raise PlanError(f"phase {k}: {e}") from e
    if "alpha_grid" in kw:
        kw["alpha_grid"] = tuple(float(a) for a in kw["alpha_grid"])
    kw["layers"] = [str(n) for n in kw["layers"]]
    return Phase(**kw)


def parse_plan(text: str) -> PhasePlan:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise PlanError(f"plan is not valid TOML: {e}") from e
    unknown = set(doc) - {"seed", "train", "retrain", "phase"}
    if unknown:
        raise PlanError(f"unknown top-level keys: {sorted(unknown)}")
    plan = PhasePlan()
    train = _train_cfg(doc.get("train", {}), plan.train, "train")
    retrain = _train_cfg(doc.get("retrain", {}), plan.retrain, "retrain")
    phases = [_phase(t, k) for k, t in enumerate(doc.get("phase", []))]
    return PhasePlan(phases, int(doc.get("seed", plan.seed)), train, retrain)


PLANS_DIR = Path(__file__).parent / "plans"


def builtin_plans() -> list[str]:
    return sorted(p.stem for p in PLANS_DIR.glob("*.toml"))


def load_plan(path) -> PhasePlan:
    """Parse a plan file; a bare builtin name such as ``desk`` loads the bundled plan."""
    path = Path(path)
    if not path.exists() and str(path) in builtin_plans():
        path = PLANS_DIR / f"{path}.toml"
    return parse_plan(path.read_text())
