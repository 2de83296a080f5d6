"""Experiment configuration: JSON schema validation and object builders.

Configs are flat JSON documents mirroring the module configs; unknown
keys are rejected everywhere so typos fail fast.
"""

from __future__ import annotations

import copy
import json

import jsonschema

from .datagen import GENERATOR_KINDS, GeneratorSpec, generate
from .exceptions import ConfigError
from .gp import DOMAIN_TAGS, KernelSpec, MultiOutputPrior, read_dataset_csv
from .likelihoods import make_likelihood
from .outer import OuterConfig
from .solver import InnerConfig

KERNEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["family", "lengthscale", "outputscale"],
    "properties": {
        "family": {"enum": ["rbf", "matern32"]},
        "lengthscale": {"type": "number", "exclusiveMinimum": 0},
        "outputscale": {"type": "number", "exclusiveMinimum": 0},
    },
}

GENERATOR_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": list(GENERATOR_KINDS)},
        "seed": {"type": "integer", "minimum": 0},
        "n": {"type": "integer", "minimum": 1},
        "n_per_class": {"type": "integer", "minimum": 1},
        "num_classes": {"type": "integer", "minimum": 2},
        "kernel": KERNEL_SCHEMA,
        "draw_seed": {"type": "integer", "minimum": 0},
    },
}

TEST_SOURCE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "generator": GENERATOR_SCHEMA,
        "csv": {"type": "string"},
        # redraw observations from the train generator's process
        "draw_offset": {"type": "integer", "minimum": 1},
    },
}

DATA_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "generator": GENERATOR_SCHEMA,
        "csv": {"type": "string"},
        "domain": {"enum": list(DOMAIN_TAGS)},
        "num_classes": {"type": "integer", "minimum": 2},
        "test": TEST_SOURCE_SCHEMA,
    },
}

FIT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "data", "prior", "likelihood", "method"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "data": DATA_SCHEMA,
        "prior": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "num_outputs": {"type": "integer", "minimum": 1},
                "kernel": KERNEL_SCHEMA,
                "kernels": {"type": "array", "items": KERNEL_SCHEMA,
                            "minItems": 1},
                "mean": {"anyOf": [{"type": "number"},
                                   {"type": "array",
                                    "items": {"type": "number"}}]},
            },
        },
        "likelihood": {
            "type": "object",
            "additionalProperties": False,
            "required": ["family"],
            "properties": {
                "family": {"enum": ["gaussian", "poisson",
                                    "bernoulli_logistic", "softmax"]},
                "noise_variance": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "method": {"enum": ["iterncgp", "sod"]},
        "policy": {"enum": ["unit", "residual"]},
        "outer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "delta": {"type": "number", "exclusiveMinimum": 0},
                "max_newton_steps": {"type": "integer", "minimum": 1},
                "inner_schedule": {
                    "anyOf": [{"type": "integer", "minimum": 1},
                              {"type": "array", "minItems": 1,
                               "items": {"type": "integer", "minimum": 1}}]},
                "recycle": {"type": "boolean"},
                "compression_rank": {
                    "anyOf": [{"type": "null"},
                              {"type": "integer", "minimum": 0}]},
            },
        },
        "inner": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "abs_tol": {"type": "number", "exclusiveMinimum": 0},
                "rel_tol": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "sod": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "subset_size": {"type": "integer", "minimum": 1},
            },
        },
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "cadence": {"enum": ["step", "iter", "never"]},
                "every": {"type": "integer", "minimum": 1},
                "mc_samples": {"type": "integer", "minimum": 1},
            },
        },
        "tile": {"type": "integer", "minimum": 1},
    },
}

BENCHMARK_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["base", "grid"],
    "properties": {
        "base": {"type": "object"},
        "repeats": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string"},
        "grid": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name"],
                "properties": {
                    "name": {"type": "string"},
                    "overrides": {"type": "object"},
                },
            },
        },
    },
}


def load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err


def validate_fit_config(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, FIT_SCHEMA)
    except jsonschema.ValidationError as err:
        raise ConfigError(f"fit config invalid: {err.message} "
                          f"(at {'/'.join(map(str, err.absolute_path))})") from err
    data = cfg["data"]
    if ("generator" in data) == ("csv" in data):
        raise ConfigError("data needs exactly one of 'generator' or 'csv'")
    if "csv" in data and "domain" not in data:
        raise ConfigError("CSV data needs an explicit 'domain' tag")
    if cfg["method"] == "sod" and "subset_size" not in cfg.get("sod", {}):
        raise ConfigError("sod method needs sod.subset_size")
    return cfg


def validate_benchmark_config(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, BENCHMARK_SCHEMA)
    except jsonschema.ValidationError as err:
        raise ConfigError(f"benchmark config invalid: {err.message}") from err
    validate_fit_config(cfg["base"])
    for cell in cfg["grid"]:
        overrides = cell.get("overrides", {})
        if "data" in overrides:
            raise ConfigError(
                f"grid cell {cell['name']!r} overrides 'data'; all cells "
                f"must share the base dataset")
        validate_fit_config(deep_merge(cfg["base"], overrides))
    return cfg


def deep_merge(base: dict, overrides: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _kernel_from_dict(d: dict) -> KernelSpec:
    return KernelSpec(family=d["family"], lengthscale=d["lengthscale"],
                      outputscale=d["outputscale"])


def build_prior(prior_cfg: dict, num_outputs: int) -> MultiOutputPrior:
    """Prior from config; a single 'kernel' entry is shared by all outputs."""
    if "kernels" in prior_cfg:
        kernels = tuple(_kernel_from_dict(k) for k in prior_cfg["kernels"])
        if len(kernels) != num_outputs:
            raise ConfigError(f"{len(kernels)} kernels for {num_outputs} outputs")
    elif "kernel" in prior_cfg:
        kernels = (_kernel_from_dict(prior_cfg["kernel"]),) * num_outputs
    else:
        raise ConfigError("prior needs 'kernel' or 'kernels'")
    mean = prior_cfg.get("mean", 0.0)
    if isinstance(mean, (int, float)):
        mean = (float(mean),) * num_outputs
    else:
        mean = tuple(float(m) for m in mean)
        if len(mean) != num_outputs:
            raise ConfigError(f"{len(mean)} mean entries for {num_outputs} outputs")
    return MultiOutputPrior(kernels=kernels, mean=mean)


def build_generator_spec(gen_cfg: dict, default_seed: int) -> GeneratorSpec:
    kw = dict(gen_cfg)
    if "kernel" in kw:
        kw["kernel"] = _kernel_from_dict(kw["kernel"])
    kw.setdefault("seed", default_seed)
    return GeneratorSpec(**kw)


def resolve_datasets(cfg: dict):
    """Training and optional test datasets from a validated fit config.

    Returns (train, test_or_none, sidecar_or_none, test_sidecar_or_none).
    """
    data = cfg["data"]
    seed = cfg["seed"]
    train_spec = None
    if "generator" in data:
        train_spec = build_generator_spec(data["generator"], seed)
        train, sidecar = generate(train_spec)
    else:
        train = read_dataset_csv(data["csv"], data["domain"],
                                 data.get("num_classes", 0))
        sidecar = None
    test = test_sidecar = None
    test_cfg = data.get("test")
    if test_cfg:
        if "csv" in test_cfg:
            test = read_dataset_csv(test_cfg["csv"],
                                    data.get("domain", train.domain),
                                    data.get("num_classes", train.num_classes))
        elif "generator" in test_cfg:
            spec = build_generator_spec(test_cfg["generator"], seed)
            test, test_sidecar = generate(spec)
        elif "draw_offset" in test_cfg:
            if train_spec is None:
                raise ConfigError("'draw_offset' test data needs generator data")
            spec = train_spec.with_draw_seed(
                train_spec.draw_seed + test_cfg["draw_offset"])
            test, test_sidecar = generate(spec)
    return train, test, sidecar, test_sidecar


def latent_outputs_for(cfg: dict, dataset) -> int:
    """Latent dimension per data point implied by the likelihood family."""
    family = cfg["likelihood"]["family"]
    if family == "softmax":
        k = dataset.num_classes
        if k < 2:
            raise ConfigError("softmax needs class-index data with >= 2 classes")
        return k
    return 1


def build_outer_config(cfg: dict) -> OuterConfig:
    o = cfg.get("outer", {})
    schedule = o.get("inner_schedule", 1)
    if isinstance(schedule, list):
        schedule = tuple(schedule)
    return OuterConfig(
        max_newton_steps=o.get("max_newton_steps", 25),
        delta=o.get("delta", 0.01),
        inner_schedule=schedule,
        recycle=o.get("recycle", True),
        compression_rank=o.get("compression_rank", None),
    )


def build_inner_config(cfg: dict) -> InnerConfig:
    inner = cfg.get("inner", {})
    # max_iters is owned by the outer schedule; this carries the tolerances
    return InnerConfig(max_iters=1,
                       abs_tol=inner.get("abs_tol", 1e-5),
                       rel_tol=inner.get("rel_tol", 1e-5))


def build_likelihood(cfg: dict, dataset):
    from .exceptions import InvalidInput
    try:
        return make_likelihood(cfg["likelihood"]["family"], dataset,
                               cfg["likelihood"].get("noise_variance", 1.0))
    except InvalidInput as err:
        raise ConfigError(f"likelihood does not match the data: {err}") from err
