"""Experiment configuration, repeated runs and CSV reporting.

A run directory holds, per repetition seed, a round log plus BOLA, server
and training logs, and one summary over all seeds.  Every CSV starts with a
``#`` comment line carrying the config hash and the seed(s); nothing
time-dependent is written, so equal configs give byte-identical files.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from .bola import BolaConfig
from .data_model import (Dataset, DatasetError, SynthSpec, load_dataset, save_dataset,
                         synthesize_clients)
from .encoder import EncoderConfig
from .federation import (ROLES, STRATEGIES, ConfigError, ExperimentConfig, RoundLog,
                         run_experiment)
from .local_opt import TrainConfig

log = logging.getLogger(__name__)

METRICS = ("nmi", "ami", "ari")
MANIFEST = "manifest.json"
_ENCODER_KEYS = tuple(f.name for f in dataclasses.fields(EncoderConfig) if f.name != "d_in")
_TOP_KEYS = ("synth", "data_dir", "strategies", "rounds", "seeds", "encoder", "train",
             "bola", "eval_fanouts", "use_bola", "use_sega", "roles", "poison_rate")


@dataclass
class RunConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    data_dir: Optional[str] = None
    strategies: List[str] = field(default_factory=lambda: list(STRATEGIES))
    rounds: int = 20
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    encoder: Dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    bola: BolaConfig = field(default_factory=BolaConfig)
    eval_fanouts: tuple = (800, 100)
    use_bola: bool = True
    use_sega: bool = True
    roles: Dict[int, str] = field(default_factory=dict)
    poison_rate: float = 0.3
    base_dir: Path = field(default=Path("."), compare=False)

    def to_dict(self) -> dict:
        """Canonical form used for hashing; the config file location is left out."""
        return {
            "synth": dataclasses.asdict(self.synth),
            "data_dir": self.data_dir,
            "strategies": list(self.strategies),
            "rounds": self.rounds,
            "seeds": list(self.seeds),
            "encoder": dict(sorted(self.encoder.items())),
            "train": dataclasses.asdict(self.train),
            "bola": dataclasses.asdict(self.bola),
            "eval_fanouts": list(self.eval_fanouts),
            "use_bola": self.use_bola,
            "use_sega": self.use_sega,
            "roles": {str(k): v for k, v in sorted(self.roles.items())},
            "poison_rate": self.poison_rate,
        }

    def experiment(self, strategy: str, seed: int) -> ExperimentConfig:
        return ExperimentConfig(
            strategy=strategy, rounds=self.rounds, seed=seed, encoder=dict(self.encoder),
            train=self.train, bola=self.bola, eval_fanouts=tuple(self.eval_fanouts),
            use_bola=self.use_bola, use_sega=self.use_sega, roles=dict(self.roles),
            poison_rate=self.poison_rate)

    def resolve_data_dir(self, out: Path) -> Path:
        if self.data_dir is None:
            return Path(out) / "data"
        p = Path(self.data_dir)
        return p if p.is_absolute() else self.base_dir / p


def _hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def config_hash(cfg: RunConfig) -> str:
    return _hash(cfg.to_dict())


def spec_hash(spec: SynthSpec) -> str:
    return _hash(dataclasses.asdict(spec))


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{name}: unknown keys {unknown}")
    kwargs = dict(raw)
    if "fanouts" in kwargs:
        kwargs["fanouts"] = tuple(int(x) for x in kwargs["fanouts"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _fanouts(raw, name) -> tuple:
    try:
        f = tuple(int(x) for x in raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: expected two integers") from exc
    if len(f) != 2 or min(f) < 1:
        raise ConfigError(f"{name}: expected two positive integers")
    return f


def parse_config(raw: Optional[dict], base_dir=".", seed_override: Optional[int] = None,
                 strategy_override: Optional[str] = None) -> RunConfig:
    raw = dict(raw or {})
    unknown = sorted(set(raw) - set(_TOP_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    cfg = RunConfig(base_dir=Path(base_dir))
    synth = _section(SynthSpec, raw.get("synth"), "synth")
    try:
        synth.validate()
    except DatasetError as exc:
        raise ConfigError(f"synth: {exc}") from exc
    cfg.synth = synth
    cfg.train = _section(TrainConfig, raw.get("train"), "train")
    cfg.bola = _section(BolaConfig, raw.get("bola"), "bola")

    encoder = raw.get("encoder") or {}
    if not isinstance(encoder, dict) or set(encoder) - set(_ENCODER_KEYS):
        raise ConfigError(f"encoder: allowed keys are {list(_ENCODER_KEYS)}")
    cfg.encoder = dict(encoder)

    if "data_dir" in raw and raw["data_dir"] is not None:
        cfg.data_dir = str(raw["data_dir"])
    strategies = raw.get("strategies", list(STRATEGIES))
    if strategy_override is not None:
        strategies = [strategy_override]
    if isinstance(strategies, str):
        strategies = [strategies]
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}; choose from {STRATEGIES}")
    # the local baseline is always run: every gain is reported against it
    cfg.strategies = [s for s in STRATEGIES if s in set(strategies) | {"local"}]

    try:
        cfg.rounds = int(raw.get("rounds", cfg.rounds))
        seeds = raw.get("seeds", cfg.seeds)
        seeds = [int(seeds)] if isinstance(seeds, (int, float)) else [int(s) for s in seeds]
        cfg.poison_rate = float(raw.get("poison_rate", cfg.poison_rate))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad scalar value: {exc}") from exc
    if seed_override is not None:
        seeds = [int(seed_override)]
    if not seeds or len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be a non-empty list without repeats")
    cfg.seeds = seeds
    if "eval_fanouts" in raw:
        cfg.eval_fanouts = _fanouts(raw["eval_fanouts"], "eval_fanouts")
    for key in ("use_bola", "use_sega"):
        if key in raw:
            if not isinstance(raw[key], bool):
                raise ConfigError(f"{key}: expected true or false")
            setattr(cfg, key, raw[key])

    roles = raw.get("roles") or {}
    if not isinstance(roles, dict):
        raise ConfigError("roles: expected a mapping client -> role")
    parsed = {}
    for k, role in roles.items():
        try:
            k = int(k)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"roles: client id {k!r} is not an integer") from exc
        if role not in ROLES:
            raise ConfigError(f"roles: client {k}: unknown role {role!r}")
        if k < 0:
            raise ConfigError(f"roles: client {k} out of range")
        parsed[k] = role
    cfg.roles = parsed
    for s in cfg.strategies:
        cfg.experiment(s, cfg.seeds[0]).validate()
    return cfg


def load_config(path, seed_override: Optional[int] = None,
                strategy_override: Optional[str] = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(raw, base_dir=path.parent, seed_override=seed_override,
                        strategy_override=strategy_override)


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.10g}"
    return str(x)


def write_csv(path: Path, header: str, columns: Sequence[str], rows) -> None:
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path: Path):
    """Return (header comment, list of row dicts)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0][2:] if lines and lines[0].startswith("# ") else ""
    body = [ln for ln in lines if not ln.startswith("#")]
    return header, list(csv.DictReader(body))


def parse_header(header: str) -> Dict[str, str]:
    return dict(kv.split("=", 1) for kv in header.split() if "=" in kv)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out) -> Path:
    """Write one record file per client plus a manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    datasets = synthesize_clients(cfg.synth)
    files = []
    for k, ds in enumerate(datasets):
        name = f"client_{k:02d}.jsonl"
        save_dataset(ds, out / name)
        digest = hashlib.sha256((out / name).read_bytes()).hexdigest()
        files.append({"name": name, "split_seed": cfg.synth.seed * 1000 + k,
                      "sha256": digest})
    manifest = {
        "config_hash": config_hash(cfg),
        "seed": cfg.synth.seed,
        "spec_hash": spec_hash(cfg.synth),
        "spec": dataclasses.asdict(cfg.synth),
        "text_dim": cfg.synth.text_dim,
        "files": files,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                encoding="utf-8")
    return out / MANIFEST


def load_client_datasets(data_dir) -> List[Dataset]:
    """Load the client files listed in ``data_dir``'s manifest (or, without a
    manifest, every ``client_*.jsonl`` in name order)."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DatasetError(f"data directory {data_dir} does not exist")
    manifest = data_dir / MANIFEST
    if manifest.exists():
        try:
            meta = json.loads(manifest.read_text(encoding="utf-8"))
            entries = [(data_dir / f["name"], int(f["split_seed"])) for f in meta["files"]]
            text_dim = int(meta["text_dim"])
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetError(f"{manifest}: malformed manifest ({exc})") from exc
    else:
        paths = sorted(data_dir.glob("client_*.jsonl"))
        entries = [(p, k) for k, p in enumerate(paths)]
        text_dim = None
    if not entries:
        raise DatasetError(f"no client datasets in {data_dir}")
    out = []
    for path, seed in entries:
        if text_dim is None:
            first = path.read_text(encoding="utf-8").split("\n", 1)[0]
            try:
                text_dim = len(json.loads(first)["embedding"])
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:1: cannot read embedding width") from exc
        out.append(load_dataset(path, seed=seed, text_dim=text_dim))
    return out


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

ROUND_COLUMNS = ("strategy", "round", "client", "role", *METRICS, "lambda", "partition",
                 "bytes")
BOLA_COLUMNS = ("strategy", "client", "round", "iteration", "acquisition_used", "lambda",
                "score")
SERVER_COLUMNS = ("round", "u", "v", "similarity", "weight", "partition_u")
TRAIN_COLUMNS = ("strategy", "client", "round", "batch", "L_t_local", "L_t_global", "gate",
                 "glecc", "total")


def _round_rows(strategy: str, logs: Sequence[RoundLog], roles: Dict[int, str]):
    for lg in logs:
        where = {k: i for i, part in enumerate(lg.partition) for k in part}
        for k in sorted(lg.metrics):
            m = lg.metrics[k]
            yield (strategy, lg.round, k, roles.get(k, "honest"), *(m[x] for x in METRICS),
                   lg.lambdas.get(k), where.get(k), lg.bytes_per_client.get(k, 0))


def _bola_rows(strategy, logs):
    for lg in logs:
        for k in sorted(lg.bola_traces):
            for row in lg.bola_traces[k]:
                yield (strategy, k, lg.round, row.iteration, row.acquisition, row.lam,
                       row.score)


def _server_rows(logs):
    for lg in logs:
        if lg.similarity is None:
            continue
        where = {k: i for i, part in enumerate(lg.partition) for k in part}
        K = lg.similarity.shape[0]
        for u in range(K):
            for v in range(K):
                yield (lg.round, u, v, lg.similarity[u, v], lg.agg_weights[u, v], where[u])


def _train_rows(strategy, logs):
    for lg in logs:
        for k in sorted(lg.train_logs):
            for b in lg.train_logs[k]:
                yield (strategy, k, lg.round, b.batch, b.loss_local, b.loss_global, b.gate,
                       b.glecc, b.total)


def run_seed(cfg: RunConfig, datasets: Sequence[Dataset], seed: int, out: Path,
             progress: bool = False) -> Dict[str, List[RoundLog]]:
    """Run every configured strategy once with ``seed`` and write its logs."""
    header = f"config_hash={config_hash(cfg)} seed={seed}"
    results = {}
    for strategy in cfg.strategies:
        log.info("seed %d: running %s for %d rounds", seed, strategy, cfg.rounds)
        results[strategy] = run_experiment(cfg.experiment(strategy, seed), datasets,
                                           progress=progress)
        for lg in results[strategy]:
            log.debug("seed %d %s round %d timings %s", seed, strategy, lg.round, lg.timings)
    write_csv(out / f"rounds_seed{seed}.csv", header, ROUND_COLUMNS,
              (r for s, logs in results.items() for r in _round_rows(s, logs, cfg.roles)))
    write_csv(out / f"bola_seed{seed}.csv", header, BOLA_COLUMNS,
              (r for s, logs in results.items() for r in _bola_rows(s, logs)))
    write_csv(out / f"server_seed{seed}.csv", header, SERVER_COLUMNS,
              _server_rows(results.get("dame", [])))
    write_csv(out / f"train_seed{seed}.csv", header, TRAIN_COLUMNS,
              (r for s, logs in results.items() for r in _train_rows(s, logs)))
    return results


def final_metrics(results: Dict[str, List[RoundLog]]) -> Dict[str, Dict[int, Dict[str, float]]]:
    return {s: logs[-1].metrics for s, logs in results.items()}


def summary_rows(strategies: Sequence[str], finals: Sequence[dict], K: int):
    """Per-client mean and standard deviation over seeds, plus an average row.

    ``finals`` holds one ``final_metrics`` result per seed.  Gains are
    differences of means against the local baseline.
    """
    columns = ["client"]
    for s in strategies:
        for m in METRICS:
            columns += [f"{s}_{m}_mean", f"{s}_{m}_std"]
    others = [s for s in strategies if s != "local"]
    for s in others:
        columns += [f"gain_{s}_{m}" for m in METRICS]

    def values(s, m, client):
        if client == "avg":
            return np.array([np.mean([f[s][k][m] for k in range(K)]) for f in finals])
        return np.array([f[s][client][m] for f in finals])

    rows = []
    for client in [*range(K), "avg"]:
        row = [client]
        means = {}
        for s in strategies:
            for m in METRICS:
                v = values(s, m, client)
                means[s, m] = float(v.mean())
                row += [means[s, m], float(v.std())]
        for s in others:
            row += [means[s, m] - means["local", m] for m in METRICS]
        rows.append(row)
    return columns, rows


def cmd_run(cfg: RunConfig, out, progress: bool = False) -> Path:
    out = Path(out)
    data_dir = cfg.resolve_data_dir(out)
    datasets = load_client_datasets(data_dir)
    for k in cfg.roles:
        if k >= len(datasets):
            raise ConfigError(f"roles: client {k} but only {len(datasets)} datasets")
    out.mkdir(parents=True, exist_ok=True)
    finals = []
    for seed in cfg.seeds:
        finals.append(final_metrics(run_seed(cfg, datasets, seed, out, progress)))
    columns, rows = summary_rows(cfg.strategies, finals, len(datasets))
    seeds = ",".join(str(s) for s in cfg.seeds)
    path = out / "summary.csv"
    write_csv(path, f"config_hash={config_hash(cfg)} seeds={seeds} rounds={cfg.rounds}",
              columns, rows)
    return path


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _round_logs(out: Path):
    files = sorted(Path(out).glob("rounds_seed*.csv"),
                   key=lambda p: int(re.findall(r"-?\d+", p.stem)[-1]))
    if not files:
        raise DatasetError(f"no round logs in {out}; run an experiment first")
    hashes, seeds, tables = set(), [], []
    for p in files:
        header, rows = read_csv(p)
        meta = parse_header(header)
        hashes.add(meta.get("config_hash"))
        seeds.append(meta.get("seed", p.stem))
        tables.append(rows)
    if len(hashes) != 1:
        raise DatasetError(f"round logs in {out} come from different configs: {sorted(map(str, hashes))}")
    return hashes.pop(), seeds, tables


def cmd_report(out) -> List[Path]:
    """Convergence curves (seed-mean per round, strategy and client) and a
    final-round comparison table with a DAMe-minus-Local gain column."""
    out = Path(out)
    chash, seeds, tables = _round_logs(out)
    header = f"config_hash={chash} seeds={','.join(seeds)}"
    acc: Dict[tuple, List[List[float]]] = {}
    for rows in tables:
        for r in rows:
            key = (int(r["round"]), r["strategy"], int(r["client"]))
            acc.setdefault(key, []).append([float(r[m]) for m in METRICS])
    strategies = [s for s in STRATEGIES if any(k[1] == s for k in acc)]
    rounds = sorted({k[0] for k in acc})
    clients = sorted({k[2] for k in acc})
    curves = []
    for rd in rounds:
        for s in strategies:
            for c in clients:
                if (rd, s, c) in acc:
                    curves.append((rd, s, c, *np.mean(acc[rd, s, c], axis=0)))
    write_csv(out / "curves.csv", header, ("round", "strategy", "client", *METRICS), curves)

    last = rounds[-1]
    final = {(s, c): np.mean(acc[last, s, c], axis=0) for s in strategies for c in clients
             if (last, s, c) in acc}
    with_gain = "dame" in strategies and "local" in strategies
    columns = ["client", "metric", *strategies] + (["gain"] if with_gain else [])
    table = []
    for c in [*clients, "avg"]:
        for j, m in enumerate(METRICS):
            if c == "avg":
                vals = {s: float(np.mean([final[s, k][j] for k in clients])) for s in strategies}
            else:
                vals = {s: float(final[s, c][j]) for s in strategies}
            row = [c, m, *(vals[s] for s in strategies)]
            if with_gain:
                row.append(vals["dame"] - vals["local"])
            table.append(row)
    write_csv(out / "comparison.csv", header, columns, table)
    return [out / "curves.csv", out / "comparison.csv"]
