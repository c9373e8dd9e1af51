"""Command-line front end: ``jacolip {synth,train,eval,lipbound,dynamics-plot}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

from threadpoolctl import threadpool_limits

from . import __version__
from .graph import (DATASET_FILES, SynthSpec, load_dataset_dir, normalize_adjacency, save_graph, split_nodes,
                    synth_sbm_biased, with_masks)
from .lipschitz import lip_report
from .metrics import metric_report, outcome_similarity, rank_metrics
from .models import forward, load_checkpoint, save_checkpoint
from .plotting import line_chart
from .training import (DynamicsLog, TrainConfig, TrainingDiverged, evaluate, prepare_task, train_jacolip,
                       train_vanilla)

log = logging.getLogger("jacolip")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "JACOLIP_THREADS"
DEFAULT_JACOLIP_U = 0.1
PLOT_COLUMNS = ("ndcg", "utility", "weight_norm", "grad_norm")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- manifest


def fingerprint(paths) -> str:
    """sha256 over (basename, size, bytes) of every input file, in sorted order."""
    h = hashlib.sha256()
    for p in sorted(paths, key=lambda q: (os.path.basename(q), q)):
        with open(p, "rb") as fh:
            data = fh.read()
        h.update(os.path.basename(p).encode() + b"\0" + str(len(data)).encode() + b"\0")
        h.update(data)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    path: str
    command: str
    config: dict
    dataset_fingerprint: str | None
    inputs: list
    code_version: str = __version__
    started_at: str = field(default_factory=_now)
    finished_at: str | None = None
    status: str = "running"
    failed_phase: str | None = None
    error: str | None = None
    timings: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)

    def write(self) -> None:
        body = asdict(self)
        del body["path"]
        with open(self.path, "w", encoding="utf-8") as fh:
            json.dump(body, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")

    @contextlib.contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except BaseException:
            self.failed_phase = name
            raise
        finally:
            self.timings[name] = round(time.perf_counter() - t0, 6)

    def finish(self, status: str, error: str | None = None) -> None:
        self.status = status
        self.error = error
        self.finished_at = _now()
        self.write()


# ---------------------------------------------------------------- arg types


def _int_list(text: str) -> tuple:
    try:
        vals = tuple(int(t) for t in str(text).split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    return vals


def _sim_list(text: str) -> tuple:
    vals = tuple(t.strip().lower() for t in str(text).split(",") if t.strip())
    bad = [v for v in vals if v not in ("feature", "structural")]
    if not vals or bad:
        raise argparse.ArgumentTypeError(f"similarity must be feature and/or structural, got {text!r}")
    return vals


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _lower(text: str) -> str:
    return str(text).lower()


S = argparse.SUPPRESS

GLOBAL_DEFAULTS = {"config": None, "seed": 0, "out": "out", "threads": None, "verbose": False}

DEFAULTS = {
    "synth": {
        "nodes": 300, "blocks": 2, "p_in": 0.1, "p_out": 0.01, "feature_dim": 4, "classes": 2,
        "signal": 3.0, "bias": 0.0, "bias_noise": 0.25, "binary_features": False,
    },
    "train": {
        "data": None, "fair": "none", "arch": "gcn", "task": "node", "u": None, "epochs": 200,
        "pretrain_epochs": 0, "lr": 0.01, "weight_decay": 1e-5, "dropout": 0.0, "hidden": None,
        "sgc_k": 2, "sim": ("feature",), "k": 10,
    },
    "eval": {"data": None, "checkpoint": None, "task": None, "sim": ("feature",), "k": 10, "per_node": None},
    "lipbound": {"data": None, "checkpoint": None, "probes": 0, "eps": 1e-3},
    "dynamics-plot": {"csv": None, "labels": None},
}


def _global_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=S, metavar="PATH", help="flat key=value file; flags win")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", default=S, metavar="DIR", help="output directory (default: out)")
    p.add_argument("--threads", type=int, default=S, help=f"numeric thread cap (fallback: ${THREADS_ENV})")
    p.add_argument("-v", "--verbose", action="store_true", default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jacolip", description="Lipschitz-regularized GNN fairness toolkit.")
    _global_options(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a biased stochastic-block-model dataset")
    _global_options(p)
    p.add_argument("--nodes", type=int, default=S)
    p.add_argument("--blocks", type=int, default=S)
    p.add_argument("--p-in", type=float, default=S)
    p.add_argument("--p-out", type=float, default=S)
    p.add_argument("--feature-dim", type=int, default=S, help="class-informative feature columns")
    p.add_argument("--classes", type=int, default=S)
    p.add_argument("--signal", type=float, default=S, help="norm of each class centre")
    p.add_argument("--bias", type=float, default=S, help="strength of the spurious block channel")
    p.add_argument("--bias-noise", type=float, default=S)
    p.add_argument("--binary-features", action="store_true", default=S)

    p = sub.add_parser("train", help="train a vanilla or JacoLip-regularized model")
    _global_options(p)
    p.add_argument("--data", default=S, metavar="DIR")
    p.add_argument("--fair", type=_lower, choices=("none", "jacolip"), default=S)
    p.add_argument("--arch", type=_lower, choices=("gcn", "sgc", "gae"), default=S)
    p.add_argument("--task", type=_lower, choices=("node", "link"), default=S)
    p.add_argument("--u", type=float, default=S, help=f"regularizer weight (jacolip default {DEFAULT_JACOLIP_U})")
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--pretrain-epochs", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--weight-decay", type=float, default=S)
    p.add_argument("--dropout", type=float, default=S)
    p.add_argument("--hidden", type=_int_list, default=S, help="comma-separated widths")
    p.add_argument("--sgc-k", type=int, default=S)
    p.add_argument("--sim", type=_sim_list, default=S, help="S_G kind used for logged NDCG")
    p.add_argument("--k", type=int, default=S)

    p = sub.add_parser("eval", help="utility and rank-fairness metrics of a checkpoint")
    _global_options(p)
    p.add_argument("--data", default=S, metavar="DIR")
    p.add_argument("--checkpoint", default=S, metavar="PATH")
    p.add_argument("--task", type=_lower, choices=("node", "link"), default=S)
    p.add_argument("--sim", type=_sim_list, default=S, help="feature, structural or both (comma-separated)")
    p.add_argument("--k", type=int, default=S)
    p.add_argument("--per-node", default=S, metavar="PATH", help="write per-node NDCG/ERR CSV")

    p = sub.add_parser("lipbound", help="Lipschitz bounds of a checkpoint")
    _global_options(p)
    p.add_argument("--data", default=S, metavar="DIR")
    p.add_argument("--checkpoint", default=S, metavar="PATH")
    p.add_argument("--probes", type=int, default=S, help="single-node perturbation probes")
    p.add_argument("--eps", type=float, default=S)

    p = sub.add_parser("dynamics-plot", help="SVG charts from dynamics CSVs")
    _global_options(p)
    p.add_argument("csv", nargs="+", default=S)
    p.add_argument("--labels", default=S, help="comma-separated series names")
    return parser


def read_config_file(path: str) -> dict:
    out = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    with fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (t.strip() for t in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _config_types(parser: argparse.ArgumentParser, command: str) -> dict:
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    types = {}
    for action in subparsers.choices[command]._actions:
        if action.dest in ("help", "config"):
            continue
        if isinstance(action, argparse._StoreTrueAction):
            types[action.dest] = (_bool, None)
        else:
            types[action.dest] = (action.type or str, action.choices)
    return types


def resolve_options(parser: argparse.ArgumentParser, argv) -> dict:
    """Merge defaults < config file < command-line flags."""
    ns = vars(parser.parse_args(argv))
    command = ns.pop("command")
    opts = {**GLOBAL_DEFAULTS, **DEFAULTS[command]}
    if ns.get("config"):
        types = _config_types(parser, command)
        for key, raw in read_config_file(ns["config"]).items():
            if key not in types:
                raise UsageError(f"config key {key!r} is not an option of {command}")
            conv, choices = types[key]
            try:
                value = conv(raw)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
            if choices is not None and value not in choices:
                raise UsageError(f"config key {key!r}: {value!r} not in {list(choices)}")
            opts[key] = value
    opts.update(ns)
    opts["command"] = command
    return opts


def _thread_count(opts) -> int | None:
    n = opts.get("threads")
    if n is None and os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError:
            raise UsageError(f"${THREADS_ENV} must be an integer") from None
    if n is not None and n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _require(opts, *names):
    for name in names:
        if opts.get(name) in (None, ()):
            raise UsageError(f"--{name.replace('_', '-')} is required for {opts['command']}")


def _dataset_paths(directory: str) -> list:
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    names = list(DATASET_FILES.values()) + ["features.bin"]
    return [os.path.join(directory, n) for n in names if os.path.exists(os.path.join(directory, n))]


def _snapshot(opts) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in opts.items() if k != "command"}


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- commands


def cmd_synth(opts, man: RunManifest) -> None:
    with man.phase("generate"):
        try:
            spec = SynthSpec(
                n_nodes=opts["nodes"], n_blocks=opts["blocks"], p_in=opts["p_in"], p_out=opts["p_out"],
                feature_dim=opts["feature_dim"], n_classes=opts["classes"], class_signal=opts["signal"],
                bias_strength=opts["bias"], bias_noise=opts["bias_noise"], seed=opts["seed"],
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        g = synth_sbm_biased(spec)
        g = with_masks(g, split_nodes(g, seed=opts["seed"]))
    with man.phase("write"):
        man.outputs.update(save_graph(g, opts["out"], binary_features=opts["binary_features"]))


def _train_config(opts) -> TrainConfig:
    u = opts["u"]
    if opts["fair"] == "none":
        if u not in (None, 0.0):
            raise UsageError("--u only applies with --fair jacolip")
        u = 0.0
    elif u is None:
        u = DEFAULT_JACOLIP_U
    if len(opts["sim"]) != 1:
        raise UsageError("train logs a single similarity kind; pass one --sim value")
    try:
        return TrainConfig(
            arch=opts["arch"], task=opts["task"], epochs=opts["epochs"], pretrain_epochs=opts["pretrain_epochs"],
            learning_rate=opts["lr"], weight_decay=opts["weight_decay"], u=u, k=opts["k"],
            dropout=opts["dropout"], seed=opts["seed"], similarity=opts["sim"][0],
            hidden=opts["hidden"], sgc_power=opts["sgc_k"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _check_k(k: int, n: int) -> None:
    if k >= n:
        raise UsageError(f"--k {k} must be smaller than the node count {n}")


def cmd_train(opts, man: RunManifest) -> None:
    config = opts["train_config"]
    out = opts["out"]
    with man.phase("load"):
        g = load_dataset_dir(opts["data"])
        _check_k(config.k, g.n_nodes)
        data = prepare_task(g, config)
    paths = {
        "checkpoint": os.path.join(out, "model.jlck"),
        "dynamics": os.path.join(out, "dynamics.csv"),
        "metrics": os.path.join(out, "metrics.json"),
    }
    trainer = train_jacolip if opts["fair"] == "jacolip" else train_vanilla
    with man.phase("train"):
        try:
            model, dyn = trainer(g, config, data=data)
        except TrainingDiverged as exc:
            save_checkpoint(exc.last_good, paths["checkpoint"])
            exc.log.write_csv(paths["dynamics"])
            man.outputs.update(checkpoint=paths["checkpoint"], dynamics=paths["dynamics"])
            raise
    with man.phase("evaluate"):
        ev = evaluate(model, data, config.k)
    with man.phase("write"):
        save_checkpoint(model, paths["checkpoint"])
        dyn.write_csv(paths["dynamics"])
        metrics = {
            ev["utility_name"]: ev["utility"],
            f"ndcg@{config.k}": ev["ndcg"],
            f"err@{config.k}": ev["err"],
            "global_lip": ev["global_lip"],
            "argmax_node": ev["argmax_node"],
            "k": config.k,
            "similarity": config.similarity,
        }
        _write_json(paths["metrics"], metrics)
        man.outputs.update(paths)
    print(json.dumps(metrics, sort_keys=True))


def _load_model_and_graph(opts):
    g = load_dataset_dir(opts["data"])
    model = load_checkpoint(opts["checkpoint"])
    if model.layers[0].in_dim != g.n_features:
        raise ValueError(
            f"checkpoint expects {model.layers[0].in_dim} input features, dataset has {g.n_features}"
        )
    return g, model


def _per_node_path(base: str, sim: str, many: bool) -> str:
    if not many:
        return base
    stem, ext = os.path.splitext(base)
    return f"{stem}.{sim}{ext or '.csv'}"


def cmd_eval(opts, man: RunManifest) -> None:
    with man.phase("load"):
        g, model = _load_model_and_graph(opts)
        _check_k(opts["k"], g.n_nodes)
        task = opts["task"] or ("link" if model.arch == "GAE" else "node")
        if task == "node" and g.labels is None:
            raise ValueError("node-classification evaluation needs labels.txt")
        try:
            base = TrainConfig(arch=model.arch, task=task, k=opts["k"], seed=opts["seed"])
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    sims = opts["sim"]
    reports = {}
    with man.phase("evaluate"):
        for sim in sims:
            base.similarity = sim
            data = prepare_task(g, base)
            ev = evaluate(model, data, opts["k"])
            y, _ = forward(model, data.a_hat, g.features)
            rm = rank_metrics(data.s_g, outcome_similarity(y), opts["k"])
            per_node = None
            if opts["per_node"]:
                per_node = _per_node_path(opts["per_node"], sim, len(sims) > 1)
                rm.write_per_node(per_node)
                man.outputs[f"per_node_{sim}"] = per_node
            reports[sim] = metric_report(rm, ev["utility_name"], ev["utility"], per_node)
            reports[sim]["similarity"] = sim
    result = reports[sims[0]] if len(sims) == 1 else reports
    with man.phase("write"):
        path = os.path.join(opts["out"], "eval.json")
        _write_json(path, result)
        man.outputs["metrics"] = path
    print(json.dumps(result, sort_keys=True))


def cmd_lipbound(opts, man: RunManifest) -> None:
    if opts["probes"] < 0 or opts["eps"] <= 0:
        raise UsageError("--probes must be >= 0 and --eps > 0")
    with man.phase("load"):
        g, model = _load_model_and_graph(opts)
    with man.phase("bound"):
        report = lip_report(model, normalize_adjacency(g), g.features, probes=opts["probes"],
                            eps=opts["eps"], seed=opts["seed"])
    with man.phase("write"):
        path = os.path.join(opts["out"], "lipbound.json")
        _write_json(path, report.to_dict())
        man.outputs["report"] = path
    print(json.dumps(report.to_dict(), sort_keys=True))


def _series_names(paths, labels) -> list:
    if labels:
        names = [t.strip() for t in labels.split(",")]
        if len(names) != len(paths):
            raise UsageError(f"--labels has {len(names)} names for {len(paths)} CSV files")
        return names
    stems = [os.path.splitext(os.path.basename(p))[0] for p in paths]
    return stems if len(set(stems)) == len(stems) else list(paths)


def cmd_dynamics_plot(opts, man: RunManifest) -> None:
    names = _series_names(opts["csv"], opts["labels"])
    with man.phase("load"):
        logs = [DynamicsLog.read_csv(p) for p in opts["csv"]]
    with man.phase("write"):
        for col in PLOT_COLUMNS:
            series = [(name, list(d.column("epoch")), list(d.column(col))) for name, d in zip(names, logs)]
            svg = line_chart(col, "epoch", col, series)
            path = os.path.join(opts["out"], f"{col}.svg")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(svg)
            man.outputs[col] = path


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "lipbound": cmd_lipbound,
    "dynamics-plot": cmd_dynamics_plot,
}


def _inputs(opts) -> list:
    cmd = opts["command"]
    if cmd == "synth":
        return []
    if cmd == "dynamics-plot":
        return list(opts["csv"])
    _require(opts, "data")
    paths = _dataset_paths(opts["data"])
    if cmd in ("eval", "lipbound"):
        _require(opts, "checkpoint")
        if not os.path.isfile(opts["checkpoint"]):
            raise FileNotFoundError(f"checkpoint {opts['checkpoint']} does not exist")
        paths.append(opts["checkpoint"])
    return paths


def _usage(exc) -> int:
    print(f"jacolip: error: {exc}", file=sys.stderr)
    return EXIT_USAGE


def run(argv=None) -> int:
    parser = build_parser()
    try:
        opts = resolve_options(parser, argv)
        threads = _thread_count(opts)
        config = _snapshot(opts)
        if opts["command"] == "train":
            opts["train_config"] = _train_config(opts)
            config["train_config"] = _snapshot(opts["train_config"].to_dict())
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _usage(exc)
    logging.basicConfig(level=logging.INFO if opts["verbose"] else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        inputs = _inputs(opts)
        os.makedirs(opts["out"], exist_ok=True)
        man = RunManifest(
            path=os.path.join(opts["out"], "manifest.json"),
            command=opts["command"],
            config=config,
            dataset_fingerprint=fingerprint(inputs) if inputs else None,
            inputs=inputs,
        )
        man.write()
    except UsageError as exc:
        return _usage(exc)
    except OSError as exc:
        print(f"jacolip: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    limits = threadpool_limits(limits=threads) if threads else contextlib.nullcontext()
    try:
        with limits:
            COMMANDS[opts["command"]](opts, man)
    except UsageError as exc:
        man.finish("usage-error", str(exc))
        return _usage(exc)
    except Exception as exc:  # runtime failures become exit code 1, recorded in the manifest
        man.finish("failed", f"{type(exc).__name__}: {exc}")
        where = f" (phase {man.failed_phase})" if man.failed_phase else ""
        print(f"jacolip: error{where}: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME
    man.finish("ok")
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
