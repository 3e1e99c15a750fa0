"""Configuration-driven experiment runner.

Subcommands: train, attack, sweep-h, certify, report.  Experiments are
described by a strict INI-style config (unknown sections or keys are
rejected with their line number); ``--set section.key=value`` overrides
individual entries.  Every artifact embeds the resolved config and the root
seed; timestamps live only in the run_meta.json sidecar.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from . import netcore
from .attacks import (
    BoundaryConfig,
    Di2FgsmConfig,
    FgsmConfig,
    PgdConfig,
    attack_dataset,
)
from .models import (
    BlockSpec,
    build_classifier,
    load_checkpoint,
    save_checkpoint,
)
from .reporting import write_report
from .solvers import SolverConfig
from .stabilitylab import certify_bound, step_size_sweep
from .training import (
    AdamConfig,
    SGDConfig,
    TrainConfig,
    history_to_csv,
    load_idx,
    make_two_moons,
    make_xor_blobs,
    train,
)

SUBCOMMANDS = ("train", "attack", "sweep-h", "certify", "report")

_MODEL_KEYS = {
    "name": "str",
    "kind": "str",
    "depth": "int",
    "width": "int",
    "h": "float",
    "columns": "int",
    "time_mode": "str",
    "n_blocks": "int",
    "checkpoint": "str",
    "solver_method": "str",
    "solver_rtol": "float",
    "solver_atol": "float",
    "solver_t0": "float",
    "solver_t1": "float",
    "solver_max_steps": "int",
}

SCHEMA = {
    "run": {"seed": "int", "out": "str"},
    "dataset": {
        "kind": "str",
        "n": "int",
        "noise": "float",
        "seed": "int",
        "test_n": "int",
        "images": "str",
        "labels": "str",
        "limit": "int",
        "scale_lo": "float",
        "scale_hi": "float",
    },
    "model": _MODEL_KEYS,
    "surrogate": _MODEL_KEYS,
    "train": {
        "optimizer": "str",
        "lr": "float",
        "beta1": "float",
        "beta2": "float",
        "eps_hat": "float",
        "epochs": "int",
        "batch_size": "int",
        "lr_halving_period": "int",
    },
    "sweep": {"step_sizes": "floats", "eps_list": "floats", "epochs": "int"},
    "attack.*": {
        "kind": "str",
        "epsilon": "float",
        "step": "float",
        "iters": "int",
        "random_start": "bool",
        "transform_prob": "float",
        "pad_fraction": "float",
        "queries": "int",
        "init_step": "float",
        "orth_step": "float",
        "clip_lo": "float",
        "clip_hi": "float",
        "samples": "int",
    },
    "certify": {
        "field": "str",
        "dim": "int",
        "coefficient": "float",
        "lipschitz": "float",
        "y0": "float",
        "method": "str",
        "h": "float",
        "t0": "float",
        "t1": "float",
        "rtol": "float",
        "atol": "float",
        "eps_norms": "floats",
        "trials": "int",
    },
    "report": {"results_dir": "str"},
}


# ---------------------------------------------------------------------------
# Config parsing (strict, line-aware)
# ---------------------------------------------------------------------------


def _section_schema(section: str):
    if section in SCHEMA:
        return SCHEMA[section]
    if section.startswith("attack.") and len(section) > len("attack."):
        return SCHEMA["attack.*"]
    return None


def _parse_value(kind: str, raw: str, key: str, line: int | None):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "floats":
            return [float(v) for v in raw.split(",") if v.strip() != ""]
        return raw
    except ValueError as exc:
        where = f" (line {line})" if line is not None else ""
        raise ConfigError(
            f"bad value for {key!r}{where}: {exc}", key=key, line=line
        ) from exc


def parse_config_text(text: str) -> dict:
    """Parse the sectioned key-value format; unknown keys are rejected."""
    config: dict[str, dict] = {}
    section = None
    schema = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            schema = _section_schema(section)
            if schema is None:
                raise ConfigError(
                    f"unknown section [{section}] (line {lineno})",
                    key=section,
                    line=lineno,
                )
            config.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(
                f"expected key = value (line {lineno})", line=lineno
            )
        if section is None:
            raise ConfigError(
                f"key outside of any section (line {lineno})", line=lineno
            )
        key, raw_value = (part.strip() for part in line.split("=", 1))
        if key not in schema:
            raise ConfigError(
                f"unknown key {key!r} in section [{section}] (line {lineno})",
                key=key,
                line=lineno,
            )
        config[section][key] = _parse_value(schema[key], raw_value, key, lineno)
    return config


def parse_config_file(path) -> dict:
    with open(path) as fh:
        return parse_config_text(fh.read())


def apply_overrides(config: dict, overrides) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        target, raw_value = item.split("=", 1)
        if "." not in target:
            raise ConfigError(f"override target must be section.key: {target!r}")
        section, key = target.rsplit(".", 1)
        schema = _section_schema(section)
        if schema is None:
            raise ConfigError(f"unknown section [{section}] in override", key=section)
        if key not in schema:
            raise ConfigError(
                f"unknown key {key!r} in section [{section}]", key=key
            )
        config.setdefault(section, {})[key] = _parse_value(
            schema[key], raw_value, key, None
        )
    return config


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def serialize_config(config: dict) -> str:
    out = []
    for section in config:
        out.append(f"[{section}]")
        for key, value in config[section].items():
            out.append(f"{key} = {_format_value(value)}")
        out.append("")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# Seed derivation and atomic output
# ---------------------------------------------------------------------------


def derive_seed(root_seed: int, tag: str) -> int:
    return int(
        np.random.SeedSequence(
            [int(root_seed) & 0xFFFFFFFF, zlib.crc32(tag.encode())]
        ).generate_state(1)[0]
    )


def derive_rng(root_seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root_seed, tag))


def _write_atomic(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_with_provenance(body: str, config: dict, seed: int) -> str:
    echo = json.dumps(config, sort_keys=True, default=str)
    return f"# run_seed: {seed}\n# run_config: {echo}\n{body}"


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _build_dataset(config: dict, root_seed: int):
    sec = config.get("dataset", {})
    kind = sec.get("kind", "moons")
    seed = sec.get("seed", derive_seed(root_seed, "dataset"))
    if kind == "moons":
        data = make_two_moons(sec.get("n", 2000), sec.get("noise", 0.1), seed)
    elif kind == "xor":
        data = make_xor_blobs(sec.get("n", 2000), sec.get("noise", 0.3), seed)
    elif kind == "idx":
        if "images" not in sec or "labels" not in sec:
            raise ConfigError("idx datasets need images and labels paths")
        data = load_idx(
            sec["images"],
            sec["labels"],
            limit=sec.get("limit"),
            scale_to=(sec.get("scale_lo", 0.0), sec.get("scale_hi", 1.0)),
        )
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}", key="kind")
    test_n = sec.get("test_n", 0)
    if test_n < 0 or test_n > len(data):
        raise ConfigError(f"test_n {test_n} out of range", key="test_n")
    if test_n:
        train_data = data.subset(slice(None, len(data) - test_n))
        test_data = data.subset(slice(len(data) - test_n, None))
    else:
        train_data, test_data = data, data
    return train_data, test_data


def _block_specs(sec: dict) -> list[BlockSpec]:
    kind = sec.get("kind", "residual")
    solver = None
    if kind == "neural_ode":
        solver = SolverConfig(
            method=sec.get("solver_method", "dopri5"),
            t0=sec.get("solver_t0", 0.0),
            t1=sec.get("solver_t1", 1.0),
            rtol=sec.get("solver_rtol", 1e-5),
            atol=sec.get("solver_atol", 1e-5),
            max_steps=sec.get("solver_max_steps", 100_000),
        )
    spec = BlockSpec(
        kind=kind,
        depth=sec.get("depth", 1),
        h=sec.get("h", 1.0),
        columns=sec.get("columns", 1),
        width=sec.get("width", 32),
        time_mode=sec.get("time_mode"),
        solver=solver,
    )
    return [spec] * sec.get("n_blocks", 1)


def _build_model(sec: dict, input_dim: int, class_count: int, rng):
    if "checkpoint" in sec:
        model, _ = load_checkpoint(sec["checkpoint"])
        return model
    return build_classifier(input_dim, class_count, _block_specs(sec), rng)


def _train_config(config: dict, seed: int) -> TrainConfig:
    sec = config.get("train", {})
    name = sec.get("optimizer", "adam")
    if name == "adam":
        optimizer = AdamConfig(
            lr=sec.get("lr", 1e-3),
            beta1=sec.get("beta1", 0.9),
            beta2=sec.get("beta2", 0.999),
            eps_hat=sec.get("eps_hat", 1e-8),
        )
    elif name == "sgd":
        optimizer = SGDConfig(lr=sec.get("lr", 1e-2))
    else:
        raise ConfigError(f"unknown optimizer {name!r}", key="optimizer")
    return TrainConfig(
        optimizer=optimizer,
        epochs=sec.get("epochs", 200),
        batch_size=sec.get("batch_size", 32),
        lr_halving_period=sec.get("lr_halving_period", 50),
        seed=seed,
    )


def _attack_config(sec: dict, value_range):
    clip = (sec.get("clip_lo", value_range[0]), sec.get("clip_hi", value_range[1]))
    kind = sec.get("kind")
    if kind == "fgsm":
        return FgsmConfig(epsilon=sec.get("epsilon", 0.1), clip=clip)
    if kind == "pgd":
        return PgdConfig(
            epsilon=sec.get("epsilon", 0.3),
            step=sec.get("step", 0.01),
            iters=sec.get("iters", 40),
            random_start=sec.get("random_start", True),
            clip=clip,
        )
    if kind == "di2_fgsm":
        return Di2FgsmConfig(
            epsilon=sec.get("epsilon", 0.3),
            step=sec.get("step", 0.01),
            iters=sec.get("iters", 40),
            transform_prob=sec.get("transform_prob", 0.5),
            pad_fraction=sec.get("pad_fraction", 0.1),
            clip=clip,
        )
    if kind == "boundary":
        return BoundaryConfig(
            queries=sec.get("queries", 1000),
            init_step=sec.get("init_step", 0.1),
            orth_step=sec.get("orth_step", 0.1),
            clip=clip,
        )
    raise ConfigError(f"unknown attack kind {kind!r}", key="kind")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_train(config, out_dir: Path, seed: int) -> list[str]:
    train_data, test_data = _build_dataset(config, seed)
    class_count = max(train_data.class_count, test_data.class_count, 2)
    model = _build_model(
        config.get("model", {}),
        train_data.inputs.shape[1],
        class_count,
        derive_rng(seed, "model"),
    )
    tc = _train_config(config, derive_seed(seed, "train"))
    eval_data = test_data if len(test_data) else None
    _, history = train(model, train_data, tc, eval_data=eval_data)
    checkpoint_path = out_dir / "checkpoint.json"
    save_checkpoint(model, checkpoint_path, seed)
    buf = io.StringIO()
    history_to_csv(history, buf)
    history_path = out_dir / "history.csv"
    _write_atomic(history_path, _csv_with_provenance(buf.getvalue(), config, seed))
    return [str(checkpoint_path), str(history_path)]


def _cmd_attack(config, out_dir: Path, seed: int) -> list[str]:
    sec = config.get("model", {})
    if "checkpoint" not in sec:
        raise ConfigError("attack needs model.checkpoint", key="checkpoint")
    model, _ = load_checkpoint(sec["checkpoint"])
    model_name = sec.get("name", "model")
    _, test_data = _build_dataset(config, seed)
    attack_sections = sorted(
        s for s in config if s.startswith("attack.") and len(s) > len("attack.")
    )
    if not attack_sections:
        raise ConfigError("no [attack.<label>] sections found")
    written = []
    for section in attack_sections:
        label = section.split(".", 1)[1]
        asec = config[section]
        attack_config = _attack_config(asec, test_data.value_range)
        data = test_data
        if "samples" in asec:
            data = test_data.subset(slice(None, asec["samples"]))
        report = attack_dataset(
            model,
            data,
            attack_config,
            rng=derive_rng(seed, f"attack.{label}"),
            model_label=model_name,
        )
        buf = io.StringIO()
        report.to_csv(buf)
        csv_path = out_dir / f"{label}.csv"
        _write_atomic(csv_path, _csv_with_provenance(buf.getvalue(), config, seed))
        json_path = out_dir / f"{label}.json"
        jbuf = io.StringIO()
        report.to_json(jbuf)
        _write_atomic(json_path, jbuf.getvalue())
        written += [str(csv_path), str(json_path)]
    return written


def _cmd_sweep(config, out_dir: Path, seed: int) -> list[str]:
    sec = config.get("sweep", {})
    if "step_sizes" not in sec:
        raise ConfigError("sweep needs sweep.step_sizes", key="step_sizes")
    if "eps_list" not in sec:
        raise ConfigError("sweep needs sweep.eps_list", key="eps_list")
    train_data, test_data = _build_dataset(config, seed)
    class_count = max(train_data.class_count, test_data.class_count, 2)
    surrogate_sec = config.get(
        "surrogate", {"kind": "residual", "n_blocks": 3, "depth": 1}
    )
    surrogate = _build_model(
        surrogate_sec,
        train_data.inputs.shape[1],
        class_count,
        derive_rng(seed, "surrogate"),
    )
    budget = _train_config(config, derive_seed(seed, "train"))
    if "epochs" in sec:
        budget = TrainConfig(
            optimizer=budget.optimizer,
            epochs=sec["epochs"],
            batch_size=budget.batch_size,
            lr_halving_period=budget.lr_halving_period,
            seed=budget.seed,
        )
    if "checkpoint" not in surrogate_sec:
        train(surrogate, train_data, budget)
    template = _block_specs(config.get("model", {"kind": "residual", "depth": 4}))[0]
    result = step_size_sweep(
        template,
        train_data,
        sec["step_sizes"],
        surrogate,
        sec["eps_list"],
        budget,
        test_data,
        seed=derive_seed(seed, "sweep"),
    )
    buf = io.StringIO()
    result.to_csv(buf)
    sweep_path = out_dir / "sweep.csv"
    _write_atomic(sweep_path, _csv_with_provenance(buf.getvalue(), config, seed))
    return [str(sweep_path)]


def _certify_field(sec: dict):
    kind = sec.get("field", "sin")
    dim = sec.get("dim", 1)
    if kind == "sin":
        field = netcore.CallableField(
            lambda t, y: np.sin(y), dim, lipschitz=sec.get("lipschitz", 1.0),
            name="sin",
        )
        return field, None
    if kind == "linear":
        coeff = sec.get("coefficient", 0.5)
        layer = netcore.DenseLayer(
            weights=coeff * np.eye(dim), bias=np.zeros(dim),
            activation=netcore.IDENTITY,
        )
        field = netcore.VectorField([layer])
        return field, sec.get("lipschitz")
    raise ConfigError(f"unknown certify field {kind!r}", key="field")


def _cmd_certify(config, out_dir: Path, seed: int) -> list[str]:
    sec = config.get("certify", {})
    field, lipschitz = _certify_field(sec)
    dim = sec.get("dim", 1)
    solver = SolverConfig(
        method=sec.get("method", "euler"),
        t0=sec.get("t0", 0.0),
        t1=sec.get("t1", 1.0),
        h=sec.get("h", 1e-3) if sec.get("method", "euler") in ("euler", "heun", "rk4") else None,
        rtol=sec.get("rtol"),
        atol=sec.get("atol"),
    )
    y0 = np.full(dim, sec.get("y0", 1.0))
    eps_norms = sec.get("eps_norms", [1e-2])
    trials = sec.get("trials", 100)
    rows = []
    written = []
    for i, eps in enumerate(eps_norms):
        cert = certify_bound(
            field, solver, y0, eps, trials,
            rng=derive_rng(seed, f"certify.{i}"),
            lipschitz=lipschitz,
        )
        json_path = out_dir / f"certificate_{i}.json"
        jbuf = io.StringIO()
        cert.to_json(jbuf)
        _write_atomic(json_path, jbuf.getvalue())
        written.append(str(json_path))
        rows.append(cert)
    header = (
        "method,t0,t1,lipschitz,field_lipschitz,c,eps_norm,"
        "empirical_max_deviation,fixed_step_bound,holds,trials"
    )
    lines = [header]
    for cert in rows:
        fsb = "" if cert.fixed_step_bound is None else repr(cert.fixed_step_bound)
        lines.append(
            f"{cert.method},{repr(cert.interval[0])},{repr(cert.interval[1])},"
            f"{repr(cert.lipschitz)},{repr(cert.field_lipschitz)},{repr(cert.c)},"
            f"{repr(cert.epsilon_norm)},{repr(cert.empirical_max_deviation)},"
            f"{fsb},{cert.holds},{cert.trials}"
        )
    csv_path = out_dir / "certificates.csv"
    _write_atomic(
        csv_path, _csv_with_provenance("\n".join(lines) + "\n", config, seed)
    )
    written.append(str(csv_path))
    return written


def _cmd_report(config, out_dir: Path, seed: int) -> list[str]:
    results_dir = config.get("report", {}).get("results_dir", str(out_dir))
    return write_report(results_dir, out_dir)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def run(subcommand, config_path, overrides=(), out=None, seed=None) -> list[str]:
    """Execute one subcommand; returns the list of written artifact paths."""
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    config = parse_config_file(config_path)
    apply_overrides(config, overrides)
    run_sec = config.setdefault("run", {})
    if seed is not None:
        run_sec["seed"] = int(seed)
    root_seed = run_sec.setdefault("seed", 0)
    if out is not None:
        run_sec["out"] = str(out)
    out_dir = Path(run_sec.setdefault("out", "results"))
    out_dir.mkdir(parents=True, exist_ok=True)

    start = time.time()
    handler = {
        "train": _cmd_train,
        "attack": _cmd_attack,
        "sweep-h": _cmd_sweep,
        "certify": _cmd_certify,
        "report": _cmd_report,
    }[subcommand]
    written = handler(config, out_dir, root_seed)

    resolved_path = out_dir / "resolved_config.ini"
    _write_atomic(resolved_path, serialize_config(config))
    meta = {
        "subcommand": subcommand,
        "timestamp_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "duration_seconds": round(time.time() - start, 3),
        "written": written,
    }
    _write_atomic(out_dir / "run_meta.json", json.dumps(meta, indent=1) + "\n")
    return written + [str(resolved_path)]


def main(argv=None) -> int:
    threads = os.environ.get("ODESTAB_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)

    parser = argparse.ArgumentParser(
        prog="odestab",
        description="ODE-network stability and robustness experiments",
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="experiment config path")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        dest="overrides",
        metavar="SECTION.KEY=VALUE",
        help="override one config entry (repeatable)",
    )
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="root seed")
    args = parser.parse_args(argv)

    try:
        written = run(args.subcommand, args.config, args.overrides, args.out, args.seed)
    except (ConfigError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
