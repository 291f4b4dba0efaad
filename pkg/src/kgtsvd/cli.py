"""Command-line entry point.

Every subcommand writes JSON lines: first a run manifest holding the fully
resolved configuration, then one record per result. Settings come from
``--name value`` flags, then a ``key=value`` config file, then defaults.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 missing input
file, 4 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__

EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_INVALID_CONFIG = 4


class InvalidConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# parameter parsing


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).replace(" ", "").split(",") if v]


def _ints(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).replace(" ", "").split(",") if v]


def _strs(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        return [str(v) for v in text]
    return [v for v in str(text).split(",") if v]


def _triples(text) -> list[list[int]]:
    if isinstance(text, (list, tuple)):
        return [list(map(int, t)) for t in text]
    out = []
    for chunk in str(text).split(";"):
        if chunk.strip():
            vals = _ints(chunk)
            if len(vals) != 3:
                raise ValueError(f"triple {chunk!r} needs three ids")
            out.append(vals)
    return out


FIG_P_VALUES = "0.0001,0.001,0.01,0.1,0.5,0.9,1,2,10,100"

TRAIN_PARAMS = {
    "dataset": (str, "kinship", "bundled dataset name or directory with train/valid/test.txt"),
    "model_type": (str, "tsvd", "tsvd or distmult"),
    "rank": (int, 64, "embedding rank R"),
    "learning_rate": (float, 0.1, "SGD step size"),
    "epochs": (int, 300, "training epochs"),
    "batch_size": (int, 128, "minibatch size"),
    "gamma": (float, 0.0007, "orthonormality penalty weight"),
    "p": (float, 0.9, "target rescale probability; positives are trained towards 1/p"),
    "neg_ratio": (int, 5, "corrupted triples per positive"),
    "momentum": (float, 0.9, "SGD momentum"),
    "init_std": (float, 0.3, "standard deviation of the initial embeddings"),
}

COMMANDS: dict[str, dict] = {
    "ingest": {
        "paths": (_strs, "kinship", "dataset directory, 'kinship', or train file followed by valid/test files"),
        "on_unknown": (str, "raise", "raise or skip triples with names unseen in training"),
    },
    "train": {**TRAIN_PARAMS, "model_out": (str, "model.bin", "where to write the trained model")},
    "eval": {
        "model": (str, "model.bin", "trained model file"),
        "dataset": (str, "kinship", "bundled dataset name or directory"),
        "split": (str, "test", "valid or test"),
        "task": (str, "object", "object or po"),
        "hits": (_ints, "", "Hits@n levels (default 1,3,10 for object and 10,50 for po)"),
    },
    "sparsify-verify": {
        "block": (int, 10, "side of each all-ones diagonal block"),
        "n_blocks": (int, 2, "number of disjoint blocks (the tensor rank)"),
        "tensor": (str, "", "optional .npy binary tensor used instead of the block tensor"),
        "r": (int, 2, "truncation rank"),
        "delta": (float, 0.05, "failure probability"),
        "eps_tilde": (float, 1.5, "noise tolerance"),
        "p": (float, 0.0, "sample probability; 0 uses the smallest admissible value"),
        "trials": (int, 100, "subsample-reconstruct trials"),
    },
    "bound-table": {
        "grid": (_floats, "", "explicit x values; empty uses the default table grid"),
        "x_min": (float, math.nan, "start of a regular grid (used with x_max and step)"),
        "x_max": (float, 0.0, "end of a regular grid"),
        "step": (float, 0.01, "regular grid step"),
        "resolution": (float, 1e-4, "bisection resolution on p"),
        "text": (int, 0, "1 also emits the aligned text table"),
    },
    "qsim": {
        "dataset": (str, "", "bundled dataset name or directory (uses the training tensor)"),
        "tensor": (str, "", ".npy tensor file"),
        "triples": (_triples, "", "semicolon-separated s,p,o ids, used with dims"),
        "dims": (_ints, "", "tensor dims for triples, as d1,d2,d3"),
        "subject": (int, 0, "subject id s"),
        "predicate": (int, 0, "predicate id to post-select"),
        "tau": (float, 0.0, "singular value threshold"),
        "shots": (int, 1000, "measurement shots"),
        "dt": (float, 0.0, "clock step; 0 picks a default"),
        "levels": (int, 0, "clock levels; 0 picks a default"),
        "use_clock": (int, 0, "1 thresholds on the clock estimates instead of exact eigenvalues"),
    },
    "qsim-verify": {
        "dim": (int, 4, "density matrix dimension (at most 8 keeps the doubled space small)"),
        "pairs": (int, 20, "random (rho, sigma) pairs for the swap-step check"),
        "dt": (float, 0.01, "step for the swap-step check"),
        "matrices": (int, 10, "random Hermitian matrices for the exponentiation check"),
        "t": (float, 1.0, "simulated time"),
        "n_steps": (int, 8, "base step count; compared against 4x as many"),
    },
    "sweep-p": {
        **TRAIN_PARAMS,
        "p_values": (_floats, FIG_P_VALUES, "rescale probabilities to sweep; values above 1 act as plain target scales"),
        "hits": (_ints, "1,3,10", "Hits@n levels"),
    },
}


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    out = {}
    for n, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"{path}:{n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve_config(command: str, flags: dict, file_values: dict) -> dict:
    """Merge flag, file and default values (in that precedence) and convert types."""
    schema = COMMANDS[command]
    unknown = set(file_values) - set(schema)
    if unknown:
        raise InvalidConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
    cfg = {}
    for name, (conv, default, _) in schema.items():
        if flags.get(name) is not None:
            raw = flags[name]
        elif file_values.get(name) is not None:
            raw = file_values[name]
        else:
            raw = default
        try:
            cfg[name] = conv(raw)
        except (TypeError, ValueError) as exc:
            raise InvalidConfigError(f"bad value for {name}: {raw!r} ({exc})") from exc
    return cfg


# --------------------------------------------------------------------------
# output


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


class Emitter:
    def __init__(self, stream):
        self.stream = stream

    def __call__(self, kind: str, **fields) -> None:
        record = _clean({"record": kind, **fields})
        self.stream.write(json.dumps(record, sort_keys=True) + "\n")
        self.stream.flush()


def make_manifest(command: str, cfg: dict, seed: int, threads: int) -> dict:
    return {
        "command": command,
        "config": _clean(cfg),
        "seed": seed,
        "threads": threads,
        "version": __version__,
        "started": datetime.now(timezone.utc).isoformat(),
    }


# --------------------------------------------------------------------------
# commands


def _load_dataset(name: str):
    from .kg_data import load_dataset, load_kinship

    if name == "kinship":
        return load_kinship()
    path = Path(name)
    if not path.is_dir():
        raise FileNotFoundError(path)
    return load_dataset(path)


def _train_config(cfg: dict, seed: int, p: float | None = None):
    from .tsvd import TrainConfig

    try:
        return TrainConfig(
            rank=cfg["rank"], learning_rate=cfg["learning_rate"], epochs=cfg["epochs"],
            batch_size=cfg["batch_size"], gamma=cfg["gamma"], p=cfg["p"] if p is None else p,
            neg_ratio=cfg["neg_ratio"], seed=seed, momentum=cfg["momentum"], init_std=cfg["init_std"],
        )
    except ValueError as exc:
        raise InvalidConfigError(str(exc)) from exc


def _fit(cfg: dict, dataset, tcfg, emit, deterministic: bool, tag: dict | None = None):
    from .baseline import train_distmult
    from .tsvd import train_tsvd

    trainers = {"tsvd": train_tsvd, "distmult": train_distmult}
    if cfg["model_type"] not in trainers:
        raise InvalidConfigError(f"model_type must be one of {sorted(trainers)}")

    def on_epoch(rec, params):
        fields = asdict(rec)
        if deterministic:
            fields.pop("seconds")
        emit("epoch", **(tag or {}), **fields)

    return trainers[cfg["model_type"]](dataset.train, dataset.dims, tcfg, callback=on_epoch)


def cmd_ingest(cfg, seed, emit, threads):
    """Load triples and report dataset statistics."""
    from .kg_data import dataset_stats, ingest_triples

    paths = cfg["paths"]
    if len(paths) == 1:
        ds = _load_dataset(paths[0])
        emit("stats", dataset=ds.name, **json.loads(dataset_stats(ds).to_json()))
        return
    if cfg["on_unknown"] not in ("raise", "skip"):
        raise InvalidConfigError("on_unknown must be raise or skip")
    tr = ingest_triples(paths[0])
    emit("split", path=paths[0], split="train", triples=len(tr.triples), duplicates=tr.n_duplicates,
         rejected=tr.n_rejected)
    for path, tag in zip(paths[1:], ("valid", "test")):
        res = ingest_triples(path, tr.entities, tr.predicates, frozen=True, split_tag=tag,
                             on_unknown=cfg["on_unknown"])
        emit("split", path=path, split=tag, triples=len(res.triples), duplicates=res.n_duplicates,
             rejected=res.n_rejected)
    emit("vocab", entities=len(tr.entities), predicates=len(tr.predicates))


def cmd_train(cfg, seed, emit, threads):
    """Train a tensor SVD or DistMult model and save it."""
    from .model_io import save_model

    ds = _load_dataset(cfg["dataset"])
    model, log = _fit(cfg, ds, _train_config(cfg, seed), emit, threads == 1)
    save_model(model, cfg["model_out"])
    first, last = log.records[0], log.records[-1]
    emit("model", path=cfg["model_out"], model_type=cfg["model_type"], rank=model.rank,
         initial_penalty=first.penalty, final_penalty=last.penalty, final_loss=last.loss)


def _evaluate(model, ds, split: str, task: str, hits):
    from .evaluation import evaluate_object_prediction, evaluate_po_sampling

    if split not in ("valid", "test"):
        raise InvalidConfigError("split must be valid or test")
    data = getattr(ds, split)
    if task == "object":
        return evaluate_object_prediction(model, data, ds.known_true(), tuple(hits) or (1, 3, 10))
    if task == "po":
        return evaluate_po_sampling(model, data, ds.known_true(), tuple(hits) or (10, 50))
    raise InvalidConfigError("task must be object or po")


def cmd_eval(cfg, seed, emit, threads):
    """Filtered link-prediction metrics for a saved model."""
    from .model_io import load_model

    model = load_model(cfg["model"])
    ds = _load_dataset(cfg["dataset"])
    if model.dims != ds.dims:
        raise InvalidConfigError(f"model dims {model.dims} do not match dataset dims {ds.dims}")
    report = _evaluate(model, ds, cfg["split"], cfg["task"], cfg["hits"])
    emit("metrics", split=cfg["split"], **report.to_dict())


def block_tensor(block: int, n_blocks: int) -> np.ndarray:
    """Binary tensor with ``n_blocks`` disjoint all-ones cubes on the diagonal."""
    n = block * n_blocks
    a = np.zeros((n, n, n))
    for b in range(n_blocks):
        sl = slice(b * block, (b + 1) * block)
        a[sl, sl, sl] = 1.0
    return a


def cmd_sparsify_verify(cfg, seed, emit, threads):
    """Subsample-reconstruct trials against the sampling bound."""
    from .sparsify import SparsifyConfig, bound_report, verify_reconstruction
    from .tensor_core import frobenius_norm
    from .tsvd import TruncationSpec, greedy_tsvd, reconstruct

    if cfg["tensor"]:
        path = Path(cfg["tensor"])
        if not path.is_file():
            raise FileNotFoundError(path)
        a = np.load(path)
    else:
        a = block_tensor(cfg["block"], cfg["n_blocks"])
    norm = frobenius_norm(a)
    eps0 = frobenius_norm(a - reconstruct(greedy_tsvd(a, cfg["r"]))) / norm
    report = bound_report(a.shape, cfg["delta"], cfg["r"], cfg["eps_tilde"], eps0, math.inf, norm)
    emit("bounds", **asdict(report))
    p = cfg["p"] or report.p_min_thm1
    if p > 1:
        emit("skipped", reason="smallest admissible p exceeds 1", p=p)
        return
    rep = verify_reconstruction(a, SparsifyConfig(p, seed), TruncationSpec(rank=cfg["r"]), cfg["trials"],
                                eps_bound=report.eps_total_thm1, workers=max(threads, 1))
    emit("reconstruction", **asdict(rep))


def cmd_bound_table(cfg, seed, emit, threads):
    """Minimal sampling probability per x from the sub-Gaussian condition."""
    from .sparsify import DEFAULT_TABLE_X, format_min_p_table, subgaussian_min_p

    if cfg["grid"]:
        grid = np.array(cfg["grid"])
    elif math.isfinite(cfg["x_min"]):
        n = int(round((cfg["x_max"] - cfg["x_min"]) / cfg["step"]))
        grid = cfg["x_min"] + cfg["step"] * np.arange(n + 1)
    else:
        grid = np.array(DEFAULT_TABLE_X)
    rows = subgaussian_min_p(grid, cfg["resolution"])
    for x, pmin in rows:
        emit("min_p", x=round(float(x), 10), p_min=float(pmin))
    worst = int(np.argmax(rows[:, 1]))
    emit("worst_case", x=float(rows[worst, 0]), p_min=float(rows[worst, 1]))
    if cfg["text"]:
        emit("table_text", text=format_min_p_table(rows))


def _qsim_tensor(cfg) -> np.ndarray:
    if cfg["tensor"]:
        path = Path(cfg["tensor"])
        if not path.is_file():
            raise FileNotFoundError(path)
        return np.load(path)
    if cfg["dataset"]:
        return _load_dataset(cfg["dataset"]).train_tensor().to_dense()
    if cfg["triples"]:
        if len(cfg["dims"]) != 3:
            raise InvalidConfigError("triples need dims d1,d2,d3")
        a = np.zeros(cfg["dims"])
        for s, p, o in cfg["triples"]:
            a[s, p, o] = 1.0
        return a
    raise InvalidConfigError("qsim needs one of tensor, dataset or triples")


def cmd_qsim(cfg, seed, emit, threads):
    """Simulate the quantum sampling algorithm on one subject."""
    from .qsim import ClockConfig, run_algorithm1

    a = _qsim_tensor(cfg)
    clock = ClockConfig(cfg["dt"], cfg["levels"]) if cfg["dt"] and cfg["levels"] else None
    out = run_algorithm1(a, cfg["subject"], cfg["predicate"], cfg["tau"], clock, cfg["shots"], seed,
                         use_clock=bool(cfg["use_clock"]))
    hist = {f"{p},{o}": int(c) for (p, o), c in np.ndenumerate(out.counts) if c}
    post = {str(o): int(c) for o, c in enumerate(out.postselected) if c}
    emit("eigenvalues", table=[e.to_dict() for e in out.eigenpairs])
    emit("sample", subject=cfg["subject"], predicate=cfg["predicate"], shots=out.shots, histogram=hist,
         postselected=post, success_probability=out.success_probability,
         success_probability_squared=out.success_probability_squared,
         predicate_marginal=out.predicate_marginal, notes=out.notes)


def _random_density(dim: int, rng) -> np.ndarray:
    g = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    m = g @ g.conj().T
    return m / np.trace(m).real


def cmd_qsim_verify(cfg, seed, emit, threads):
    """Check swap-step order and density-matrix exponentiation convergence."""
    from .qsim import exact_exponentiation, simulate_exponentiation, trotter_step_check

    rng = np.random.default_rng(seed)
    dim, dt = cfg["dim"], cfg["dt"]
    ratios = []
    for i in range(cfg["pairs"]):
        rho, sigma = _random_density(dim, rng), _random_density(dim, rng)
        e1 = trotter_step_check(rho, sigma, dt)
        e2 = trotter_step_check(rho, sigma, dt / 2)
        ratios.append(e1 / e2)
        emit("swap_step", instance=i, error=e1, error_half=e2, ratio=e1 / e2)
    decreasing = []
    for i in range(cfg["matrices"]):
        g = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
        a = (g + g.conj().T) / 2
        sigma = _random_density(dim, rng)
        exact = exact_exponentiation(a, cfg["t"], sigma)
        errs = [float(np.linalg.norm(simulate_exponentiation(a, cfg["t"], n, sigma).matrix - exact))
                for n in (cfg["n_steps"], 4 * cfg["n_steps"])]
        decreasing.append(errs[1] < errs[0])
        emit("exponentiation", instance=i, n_steps=cfg["n_steps"], error=errs[0], error_4x=errs[1])
    emit("summary", ratio_min=min(ratios, default=math.nan), ratio_max=max(ratios, default=math.nan),
         ratios_in_range=all(3.5 <= r <= 4.5 for r in ratios), errors_decrease=all(decreasing))


def cmd_sweep_p(cfg, seed, emit, threads):
    """Train and evaluate across rescale probabilities."""
    from .tsvd import TrainingDivergedError

    ds = _load_dataset(cfg["dataset"])
    for p in cfg["p_values"]:
        tcfg = _train_config(cfg, seed, p=p)
        try:
            model, _ = _fit(cfg, ds, tcfg, lambda *a, **k: None, threads == 1)
        except TrainingDivergedError as exc:
            emit("metrics", p=p, status="diverged", detail=str(exc))
            continue
        report = _evaluate(model, ds, "test", "object", cfg["hits"])
        emit("metrics", p=p, status="ok", sampling=p <= 1, **report.to_dict())


HANDLERS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "eval": cmd_eval,
    "sparsify-verify": cmd_sparsify_verify,
    "bound-table": cmd_bound_table,
    "qsim": cmd_qsim,
    "qsim-verify": cmd_qsim_verify,
    "sweep-p": cmd_sweep_p,
}


# --------------------------------------------------------------------------
# driver


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--out", help="write JSON lines here instead of stdout")
    common.add_argument("--threads", type=int, default=1, help="1 forces deterministic single-threaded mode")

    parser = argparse.ArgumentParser(prog="kgtsvd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=HANDLERS[name].__doc__)
        for key, (_, default, text) in schema.items():
            sp.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=f"{text} (default {default!r})")
        if name == "ingest":
            sp.add_argument("positional_paths", nargs="*", help="same as --paths")
    rp = sub.add_parser("replay", help="rerun a command from its manifest")
    rp.add_argument("manifest", help="JSON-lines output whose first line is a manifest")
    rp.add_argument("--out")
    return parser


def _run(command: str, cfg: dict, seed: int, threads: int, out) -> None:
    stream = open(out, "w", encoding="utf-8") if out else sys.stdout
    try:
        emit = Emitter(stream)
        emit("manifest", **make_manifest(command, cfg, seed, threads))
        t0 = time.perf_counter()
        HANDLERS[command](cfg, seed, emit, threads)
        if threads != 1:
            emit("timing", seconds=time.perf_counter() - t0)
    finally:
        if out:
            stream.close()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        if args.command == "replay":
            path = Path(args.manifest)
            if not path.is_file():
                raise FileNotFoundError(path)
            first = json.loads(path.read_text(encoding="utf-8").splitlines()[0])
            if first.get("record") != "manifest" or first.get("command") not in HANDLERS:
                raise InvalidConfigError(f"{path}: first line is not a run manifest")
            cfg = resolve_config(first["command"], {}, first["config"])
            _run(first["command"], cfg, first["seed"], first["threads"], args.out)
            return 0
        flags = {k: getattr(args, k) for k in COMMANDS[args.command]}
        if args.command == "ingest" and args.positional_paths:
            flags["paths"] = args.positional_paths
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(args.command, flags, file_values)
        _run(args.command, cfg, args.seed, args.threads, args.out)
        return 0
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except InvalidConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure maps to the generic exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
