"""Model / loss / run configuration with the ``paper`` and ``toy`` presets.

A run config file is flat JSON whose keys are exactly the field names of
:class:`RunConfig`, :class:`ModelConfig`, :class:`LossConfig` and
:class:`~scnet.optim.OptimConfig`. ``tau`` and ``alpha_semantic`` must
always be given explicitly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .optim import OptimConfig

PHOC_DIM = 604


@dataclass
class ModelConfig:
    d: int = 768
    num_heads: int = 12
    sct_layers: int = 2
    plain_layers: int = 2
    max_q: int = 20
    max_ocr: int = 50
    max_obj: int = 100
    max_decode: int = 12
    n_vocab: int = 5000
    d_ft: int = 300
    d_fr: int = 2048
    d_phoc: int = PHOC_DIM
    q_layers: int = 3
    ffn_mult: int = 4
    icsp_hidden: int = 768
    icsp_activation: str = "none"  # "none" (affine-affine) or "gelu"
    alpha_init: float = 0.5
    alpha_se_init: float = 0.1
    init_seed: int = 0
    use_sct: bool = True
    use_icsp: bool = True

    def __post_init__(self):
        if self.d % self.num_heads:
            raise ValueError(f"d={self.d} not divisible by num_heads={self.num_heads}")
        if self.icsp_activation not in ("none", "gelu"):
            raise ValueError(f"unknown icsp_activation {self.icsp_activation!r}")
        if self.d_phoc != PHOC_DIM:
            raise ValueError(f"PHOC encodings are {PHOC_DIM}-dimensional")


@dataclass
class LossConfig:
    alpha_semantic: float = 0.1
    tau: float = 0.1
    contrastive_variant: str = "eq8_verbatim"  # or "denominator_all"
    reduction: str = "mean_over_steps_and_batch"
    similarity: str = "dot"  # or "cosine"
    ls_floor: float = -20.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.contrastive_variant not in ("eq8_verbatim", "denominator_all"):
            raise ValueError(f"unknown contrastive_variant {self.contrastive_variant!r}")
        if self.reduction != "mean_over_steps_and_batch":
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.similarity not in ("dot", "cosine"):
            raise ValueError(f"unknown similarity {self.similarity!r}")


@dataclass
class RunConfig:
    preset: str = "toy"
    train_path: str | None = None
    eval_path: str | None = None
    word_vectors_path: str | None = None
    out_dir: str = "runs/default"
    seed: int = 0
    eval_interval: int = 200
    checkpoint_interval: int = 1000
    log_interval: int = 50
    gradcheck_tol: float = 1e-3
    gradcheck_instances: int = 1
    gradcheck_per_param: int = 12
    anls_threshold: float | None = None
    topk: int = 0
    # synthetic-data knobs (used by the ``synth`` and ``ablate`` verbs)
    n_instances: int = 32
    n_eval_instances: int = 0
    ocr_error_rate: float = 0.0
    bias_strength: float = 0.0
    feature_noise_sigma: float = 0.3
    ablation_seeds: list[int] = field(default_factory=lambda: [0])
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def flat(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("model", "optim", "loss")}
        for sub in (self.model, self.optim, self.loss):
            out.update(asdict(sub))
        return out

    def to_json(self) -> str:
        return json.dumps(self.flat(), indent=2, sort_keys=True)

    def hash(self) -> str:
        # where outputs go does not change results, so it stays out of the hash
        flat = {k: v for k, v in self.flat().items() if k != "out_dir"}
        blob = json.dumps(flat, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def paper_preset() -> dict:
    return {}


def toy_preset() -> dict:
    return {
        "d": 64, "num_heads": 4, "sct_layers": 2, "plain_layers": 2,
        "max_q": 8, "max_ocr": 10, "max_obj": 16, "max_decode": 4,
        "n_vocab": 100, "d_ft": 16, "d_fr": 32, "icsp_hidden": 64,
        "base_lr": 1e-3, "warmup_iters": 100, "warmup_factor": 0.2,
        "batch_size": 32, "max_iters": 2000, "decay_steps": [1500],
        "lr_decay": 0.1,
    }


PRESETS = {"paper": paper_preset, "toy": toy_preset}

REQUIRED_KEYS = ("tau", "alpha_semantic")


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def resolve_config(overrides: dict, preset: str | None = None,
                   require_explicit: bool = True) -> RunConfig:
    """Build a RunConfig from a preset plus flat overrides.

    Unknown keys are rejected so typos never silently fall back to defaults.
    """
    overrides = dict(overrides)
    preset = preset or overrides.get("preset", "toy")
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    if require_explicit:
        missing = [k for k in REQUIRED_KEYS if k not in overrides]
        if missing:
            raise ValueError(f"config must set {missing} explicitly")
    values = PRESETS[preset]()
    values.update(overrides)
    values["preset"] = preset
    groups = {
        "model": _field_names(ModelConfig),
        "optim": _field_names(OptimConfig),
        "loss": _field_names(LossConfig),
    }
    run_keys = _field_names(RunConfig) - set(groups)
    known = run_keys.union(*groups.values())
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    sub = {g: {k: v for k, v in values.items() if k in names} for g, names in groups.items()}
    run = {k: v for k, v in values.items() if k in run_keys}
    return RunConfig(
        model=ModelConfig(**sub["model"]),
        optim=OptimConfig(**sub["optim"]),
        loss=LossConfig(**sub["loss"]),
        **run,
    )


def load_config(path, **cli_overrides) -> RunConfig:
    with open(path) as fh:
        values = json.load(fh)
    if not isinstance(values, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    values.update({k: v for k, v in cli_overrides.items() if v is not None})
    return resolve_config(values)


def replace(cfg: RunConfig, **flat_overrides) -> RunConfig:
    values = cfg.flat()
    values.update(flat_overrides)
    return resolve_config(values, require_explicit=False)

