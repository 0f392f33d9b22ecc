"""Command-line interface: synth, fit, score, eval, ablate-t, diag.

Option values resolve as flags > config file > environment > defaults;
the fully resolved configuration is persisted into each run's meta.json
together with SHA-256 hashes of every input file and the tool version,
so any run can be reproduced bit-exactly. Exit codes: 0 success,
1 runtime/data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__
from . import evaluation, features, scoring, subspace
from .perturbation import PER_SAMPLE, SHARED_SEQUENCE, PerturbationConfig

ENV_PREFIX = "OCS_"
META_FILE = "meta.json"

_SHARING_BY_FLAG = {"shared": SHARED_SEQUENCE, "per-sample": PER_SAMPLE}


class UsageError(Exception):
    """Bad flags/config/environment values; maps to exit code 2."""


# ---------------------------------------------------------------------------
# Option resolution: flags > config file > environment > defaults


def _load_config_file(path: str) -> dict[str, str]:
    cfg_path = Path(path)
    if not cfg_path.is_file():
        raise UsageError(f"config file not found: {cfg_path}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(cfg_path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{cfg_path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip().lower().replace("-", "_")] = value.strip()
    return values


def _resolve(name: str, flag_value, config: dict[str, str], cast, default):
    if flag_value is not None:
        return flag_value
    if name in config:
        try:
            return cast(config[name])
        except ValueError as exc:
            raise UsageError(f"config value for {name!r}: {exc}") from exc
    env_key = ENV_PREFIX + name.upper()
    if env_key in os.environ:
        try:
            return cast(os.environ[env_key])
        except ValueError as exc:
            raise UsageError(f"environment variable {env_key}: {exc}") from exc
    return default


def _cast_choice(allowed):
    def cast(text: str) -> str:
        if text not in allowed:
            raise ValueError(f"must be one of {sorted(allowed)}, got {text!r}")
        return text

    return cast


def _cast_t_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(part) for part in text.split(",") if part.strip() != "")
    except ValueError as exc:
        raise ValueError(f"expected comma-separated integers, got {text!r}") from exc
    return values


def _require_out(resolved_out: str | None) -> Path:
    if resolved_out is None:
        raise UsageError("an output directory is required (--out, config 'out', or OCS_OUT)")
    return Path(resolved_out)


# ---------------------------------------------------------------------------
# meta.json helpers


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _hash_inputs(path: Path) -> dict[str, str]:
    """Hash a file, or every interchange file of a directory."""
    if path.is_file():
        return {path.name: _sha256_file(path)}
    hashes = {}
    for child in sorted(path.iterdir()):
        if child.is_file() and child.suffix in (".npy", ".csv", ".json", ".jsonl"):
            hashes[child.name] = _sha256_file(child)
    return hashes


def _write_meta(out_dir: Path, command: str, params: dict, inputs: dict) -> None:
    payload = {
        "schema_version": 1,
        "tool": "pocs",
        "tool_version": __version__,
        "command": command,
        "params": params,
        "inputs": inputs,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / META_FILE).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _perturbation_params(args, config) -> dict:
    epsilon = _resolve("epsilon", args.epsilon, config, float, 0.1)
    delta = _resolve("delta", args.delta, config, float, 0.1)
    t_steps = _resolve("t", args.t, config, int, 1)
    seed = _resolve("seed", args.seed, config, int, 0)
    sharing_flag = _resolve(
        "sharing", args.sharing, config, _cast_choice(_SHARING_BY_FLAG), "shared"
    )
    if not 0.0 <= epsilon <= 1.0:
        raise UsageError(f"--epsilon must be in [0, 1], got {epsilon}")
    if delta < 0.0:
        raise UsageError(f"--delta must be >= 0, got {delta}")
    if t_steps < 0:
        raise UsageError(f"--t must be >= 0, got {t_steps}")
    return {
        "epsilon": epsilon,
        "delta": delta,
        "t_steps": t_steps,
        "seed": seed,
        "sharing": _SHARING_BY_FLAG[sharing_flag],
    }


# ---------------------------------------------------------------------------
# Commands


def _cmd_synth(args, config) -> int:
    params = {
        "d": _resolve("d", args.d, config, int, 32),
        "k_true": _resolve("k_true", args.k_true, config, int, 4),
        "n_id": _resolve("n_id", args.n_id, config, int, 200),
        "n_ood": _resolve("n_ood", args.n_ood, config, int, 200),
        "noise_sigma": _resolve("noise_sigma", args.noise_sigma, config, float, 0.01),
        "ood_scale": _resolve("ood_scale", args.ood_scale, config, float, 1.0),
        "seed": _resolve("seed", args.seed, config, int, 0),
    }
    out = _require_out(_resolve("out", args.out, config, str, None))
    try:
        spec = features.SyntheticSpec(**params)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    id_features, ood_features = features.generate_synthetic(spec)
    features.save_dataset(id_features, out / "id")
    features.save_dataset(ood_features, out / "ood")
    _write_meta(out, "synth", params, {})
    print(f"wrote {id_features.n_samples} ID rows to {out / 'id'} "
          f"and {ood_features.n_samples} OOD rows to {out / 'ood'}")
    return 0


def _cmd_fit(args, config) -> int:
    k = _resolve("k", args.k, config, int, None)
    variance = _resolve("variance", args.variance, config, float, None)
    if k is not None and variance is not None:
        raise UsageError("--k and --variance are mutually exclusive")
    try:
        if k is not None:
            policy = subspace.RankPolicy.fixed(k)
        else:
            policy = subspace.RankPolicy.variance(variance if variance is not None else 0.95)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _require_out(_resolve("out", args.out, config, str, None))

    data_dir = Path(args.dataset)
    id_features, _ = features.load_dataset(data_dir)
    model = subspace.fit(id_features, policy)
    params = {"policy": policy.to_dict(), "n_train": id_features.n_samples}
    subspace.save_model(
        model,
        out,
        policy=policy,
        extra_meta={
            "command": "fit",
            "params": params,
            "inputs": {"dataset": _hash_inputs(data_dir)},
        },
    )
    print(
        f"fitted subspace on N={id_features.n_samples} d={model.dim}: "
        f"k={model.k}, explained variance at k = {subspace.explained_variance_at(model):.6f}"
    )
    return 0


def _resolve_scorer_inputs(args, config):
    scorer = _resolve("scorer", args.scorer, config, _cast_choice(scoring.SCORERS), "pocs")
    percentile = _resolve("percentile", args.percentile, config, float, 90.0)
    temperature = _resolve("temperature", args.temperature, config, float, 1.0)
    if not 0.0 < percentile <= 100.0:
        raise UsageError(f"--percentile must be in (0, 100], got {percentile}")
    if temperature <= 0.0:
        raise UsageError(f"--temperature must be > 0, got {temperature}")
    return scorer, percentile, temperature


def _cmd_score(args, config) -> int:
    scorer, percentile, temperature = _resolve_scorer_inputs(args, config)
    pert = _perturbation_params(args, config)
    out = _require_out(_resolve("out", args.out, config, str, None))
    train_dir = _resolve("train_dir", args.train_dir, config, str, None)

    model = subspace.load_model(Path(args.model))
    dataset, head = features.load_dataset(Path(args.dataset))
    train_features = None
    if train_dir is not None:
        train_features, _ = features.load_dataset(Path(train_dir))

    cfg = PerturbationConfig(**pert)
    records = scoring.score_batch(
        dataset,
        scorer,
        model=model,
        pert_cfg=cfg,
        head=head,
        train_features=train_features,
        percentile=percentile,
        temperature=temperature,
    )
    out.mkdir(parents=True, exist_ok=True)
    scoring.write_scores_csv(records, out / "scores.csv")
    scoring.write_scores_jsonl(records, out / "scores.jsonl")

    params = {
        "scorer": scorer,
        "percentile": percentile,
        "temperature": temperature,
        "params_digest": records[0].params_digest,
        **pert,
    }
    inputs = {
        "model": _hash_inputs(Path(args.model)),
        "dataset": _hash_inputs(Path(args.dataset)),
    }
    if train_dir is not None:
        inputs["train"] = _hash_inputs(Path(train_dir))
    _write_meta(out, "score", params, inputs)
    print(f"scored {len(records)} samples with {scorer}: {out / 'scores.csv'}")
    return 0


def _cmd_eval(args, config) -> int:
    bins = _resolve("bins", args.bins, config, int, 40)
    if bins < 1:
        raise UsageError(f"--bins must be >= 1, got {bins}")
    out = _require_out(_resolve("out", args.out, config, str, None))

    id_records = scoring.read_scores_csv(Path(args.id_scores))
    ood_records = scoring.read_scores_csv(Path(args.ood_scores))
    report = evaluation.make_report(id_records, ood_records, bins=bins)
    evaluation.write_report(report, out)
    _write_meta(
        out,
        "eval",
        {"bins": bins, "tpr_target": report.tpr_target, "scorer": report.scorer},
        {
            "id_scores": _hash_inputs(Path(args.id_scores)),
            "ood_scores": _hash_inputs(Path(args.ood_scores)),
        },
    )
    print(
        f"{report.scorer}: auroc={report.auroc:.4f} aupr={report.aupr:.4f} "
        f"fpr@{report.tpr_target:.2f}={report.fpr_at_95:.4f} "
        f"(n_id={report.n_id}, n_ood={report.n_ood})"
    )
    return 0


def _cmd_ablate_t(args, config) -> int:
    t_list = _resolve("t_list", args.t_list, config, _cast_t_list, (0, 1, 2, 3))
    if not t_list:
        raise UsageError("--t-list must contain at least one value")
    if any(t < 0 for t in t_list):
        raise UsageError(f"--t-list values must be >= 0, got {list(t_list)}")
    base = _perturbation_params(args, config)
    bins = _resolve("bins", args.bins, config, int, 40)
    if bins < 1:
        raise UsageError(f"--bins must be >= 1, got {bins}")
    out = _require_out(_resolve("out", args.out, config, str, None))

    model = subspace.load_model(Path(args.model))
    id_features, _ = features.load_dataset(Path(args.id_dataset))
    ood_features, _ = features.load_dataset(Path(args.ood_dataset))

    rows = []
    for t in t_list:
        cfg = PerturbationConfig(
            epsilon=base["epsilon"],
            delta=base["delta"],
            t_steps=t,
            seed=base["seed"],
            sharing=base["sharing"],
        )
        id_records = scoring.score_batch(id_features, "pocs", model=model, pert_cfg=cfg)
        ood_records = scoring.score_batch(ood_features, "pocs", model=model, pert_cfg=cfg)
        report = evaluation.make_report(id_records, ood_records, bins=bins)
        rows.append((t, report.auroc, report.aupr, report.fpr_at_95))

    out.mkdir(parents=True, exist_ok=True)
    lines = ["t,auroc,aupr,fpr_at_95"]
    lines += [f"{t},{a:.17g},{p:.17g},{f:.17g}" for t, a, p, f in rows]
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")

    params = {"t_list": list(t_list), "bins": bins, **base}
    params.pop("t_steps")
    _write_meta(
        out,
        "ablate-t",
        params,
        {
            "model": _hash_inputs(Path(args.model)),
            "id_dataset": _hash_inputs(Path(args.id_dataset)),
            "ood_dataset": _hash_inputs(Path(args.ood_dataset)),
        },
    )
    print("T     AUROC    AUPR     FPR@95")
    for t, a, p, f in rows:
        print(f"{t:<5d} {a * 100:7.2f}  {p * 100:7.2f}  {f * 100:7.2f}")
    return 0


def _cmd_diag(args, config) -> int:
    components = _resolve("components", args.components, config, int, 80)
    if components < 1:
        raise UsageError(f"--components must be >= 1, got {components}")
    out = _require_out(_resolve("out", args.out, config, str, None))

    model = subspace.load_model(Path(args.model))
    id_features, _ = features.load_dataset(Path(args.id_dataset))
    ood_features, _ = features.load_dataset(Path(args.ood_dataset))
    paths = subspace.export_diagnostics_csv(model, id_features, ood_features, components, out)
    _write_meta(
        out,
        "diag",
        {"components": components},
        {
            "model": _hash_inputs(Path(args.model)),
            "id_dataset": _hash_inputs(Path(args.id_dataset)),
            "ood_dataset": _hash_inputs(Path(args.ood_dataset)),
        },
    )
    print(f"wrote {paths[0].name} and {paths[1].name} to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pocs",
        description="Principal-subspace fitting and complement-perturbation OOD scoring.",
    )
    parser.add_argument("--version", action="version", version=f"pocs {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (flags take precedence)")
    common.add_argument("--out", help="output directory")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic ID/OOD pair")
    p.add_argument("--d", type=int)
    p.add_argument("--k-true", dest="k_true", type=int)
    p.add_argument("--n-id", dest="n_id", type=int)
    p.add_argument("--n-ood", dest="n_ood", type=int)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--ood-scale", dest="ood_scale", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("fit", parents=[common], help="fit a subspace model on ID features")
    p.add_argument("dataset", help="ID dataset directory")
    p.add_argument("--k", type=int, help="fixed principal dimension")
    p.add_argument("--variance", type=float, help="cumulative explained-variance threshold")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("score", parents=[common], help="score a dataset against a model")
    p.add_argument("model", help="model bundle directory")
    p.add_argument("dataset", help="dataset directory to score")
    p.add_argument("--scorer", choices=scoring.SCORERS)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--t", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--sharing", choices=sorted(_SHARING_BY_FLAG))
    p.add_argument("--percentile", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--train-dir", dest="train_dir",
                   help="ID training dataset (mahalanobis / react_* scorers)")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("eval", parents=[common], help="evaluate ID vs OOD score files")
    p.add_argument("id_scores", help="scores.csv for ID data")
    p.add_argument("ood_scores", help="scores.csv for OOD data")
    p.add_argument("--bins", type=int)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate-t", parents=[common], help="sweep the iteration count T")
    p.add_argument("model", help="model bundle directory")
    p.add_argument("id_dataset", help="ID dataset directory")
    p.add_argument("ood_dataset", help="OOD dataset directory")
    p.add_argument("--t-list", dest="t_list", type=_cast_t_list)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--sharing", choices=sorted(_SHARING_BY_FLAG))
    p.add_argument("--bins", type=int)
    p.set_defaults(func=_cmd_ablate_t, t=None)

    p = sub.add_parser("diag", parents=[common],
                       help="export explained-variance diagnostics CSVs")
    p.add_argument("model", help="model bundle directory")
    p.add_argument("id_dataset", help="ID dataset directory")
    p.add_argument("ood_dataset", help="OOD dataset directory")
    p.add_argument("--components", type=int)
    p.set_defaults(func=_cmd_diag)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else int(exc.code)
    try:
        config = _load_config_file(args.config) if args.config else {}
        return args.func(args, config)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
