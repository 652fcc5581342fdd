"""Command-line front end.

Every command reads an optional strict JSON config, writes a resolved copy of
it next to its outputs, and stamps each output with the tool version, the
SHA-256 of the resolved config and the seed.  Reruns with the same config and
seed produce byte-identical files.

Exit codes: 0 ok, 2 configuration error, 3 numerical error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .channel import FlatProfile, TdlProfile, write_channel_file
from .errors import ConfigError, NumericalError
from .grid import PILOT_SYMBOL, GridConfig, SamplingConvention, oversample, pilot_positions, random_pilots
from .mapping import qam
from .papr import ccdf, collect_alpha, papr_epsilon, peak_power
from .rx import write_llr_file
from .sim import simulate_baseline, transmit_tr
from .spectral import aclr_empirical, cp_sweep, spectral_operators, to_db
from .tr import PeakSolverConfig
from .train import TrainConfig, TrainingDiverged, TxParams, draw_slots, evaluate_params, run_training, batch_normalize

log = logging.getLogger("ofdmwave")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
REPORT_EPSILONS = (1e-2, 1e-3, 1e-4)


# ---------------------------------------------------------------------------
# configuration


def _section(cls, data: dict | None, name: str):
    data = dict(data or {})
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad {name} section: {exc}") from exc


@dataclass(frozen=True)
class ChannelSection:
    kind: str = "tdl"
    num_taps: int = 4
    delay_spread_fraction: float = 0.05
    power_decay: float = 1.0

    def __post_init__(self):
        if self.kind not in ("tdl", "flat", "awgn"):
            raise ConfigError(f"channel.kind must be tdl, flat or awgn, got {self.kind!r}")

    def profile(self):
        if self.kind == "flat":
            return FlatProfile(rayleigh=True)
        if self.kind == "awgn":
            return FlatProfile(rayleigh=False)
        return TdlProfile(self.num_taps, self.delay_spread_fraction, self.power_decay)


@dataclass(frozen=True)
class BaselineSection:
    k: int = 2
    r: int = 6
    snr_db: tuple = (-5.0, 0.0, 5.0, 10.0, 15.0, 20.0)
    slots: int = 100
    epsilon: float = 1e-3
    covariance_samples: int = 20000

    def __post_init__(self):
        object.__setattr__(self, "snr_db", tuple(float(s) for s in self.snr_db))
        if self.k < 1 or self.r < 0 or self.slots < 1:
            raise ConfigError("baseline needs k >= 1, r >= 0 and slots >= 1")
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError("baseline.epsilon must lie in [0, 1)")


@dataclass(frozen=True)
class SpectralSection:
    t_cp_fractions: tuple = (0.0, 0.025, 0.05, 0.075, 0.1)
    draws: int = 100000
    quadrature_tol: float = 1e-9

    def __post_init__(self):
        object.__setattr__(self, "t_cp_fractions", tuple(float(t) for t in self.t_cp_fractions))
        if self.draws < 1:
            raise ConfigError("spectral.draws must be >= 1")


@dataclass(frozen=True)
class PaprSection:
    mode: str = "qam"
    slots: int = 200
    epsilon: float = 1e-3
    threshold_min_db: float = 0.0
    threshold_max_db: float = 14.0
    threshold_step_db: float = 0.1
    params: str | None = None

    def __post_init__(self):
        if self.mode not in ("qam", "tr", "trained"):
            raise ConfigError(f"papr.mode must be qam, tr or trained, got {self.mode!r}")
        if self.slots < 1 or not self.threshold_step_db > 0:
            raise ConfigError("papr.slots must be >= 1 and the threshold step positive")


@dataclass(frozen=True)
class ExperimentConfig:
    grid: GridConfig = field(default_factory=lambda: GridConfig(25))
    channel: ChannelSection = field(default_factory=ChannelSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    spectral: SpectralSection = field(default_factory=SpectralSection)
    papr: PaprSection = field(default_factory=PaprSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    channels_count: int = 10000
    seed: int = 0
    out_dir: str = "out"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        allowed = {"grid", "channel", "baseline", "spectral", "papr", "train", "channels_count", "seed", "out_dir"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            grid=GridConfig.from_dict(d["grid"]) if "grid" in d else GridConfig(25),
            channel=_section(ChannelSection, d.get("channel"), "channel"),
            baseline=_section(BaselineSection, d.get("baseline"), "baseline"),
            spectral=_section(SpectralSection, d.get("spectral"), "spectral"),
            papr=_section(PaprSection, d.get("papr"), "papr"),
            train=TrainConfig.from_dict(d.get("train", {})),
            channels_count=int(d.get("channels_count", 10000)),
            seed=int(d.get("seed", 0)),
            out_dir=str(d.get("out_dir", "out")),
        )

    def to_dict(self) -> dict:
        def plain(obj):
            out = {f.name: getattr(obj, f.name) for f in fields(obj)}
            return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

        return {
            "grid": self.grid.to_dict(),
            "channel": plain(self.channel),
            "baseline": plain(self.baseline),
            "spectral": plain(self.spectral),
            "papr": plain(self.papr),
            "train": self.train.to_dict(),
            "channels_count": self.channels_count,
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    def digest(self) -> str:
        """Hash of everything that affects results (the output location does not)."""
        d = self.to_dict()
        del d["out_dir"]
        return hashlib.sha256(canonical_json(d).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


# ---------------------------------------------------------------------------
# output helpers


def fmt(value, db: bool = False) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if db:
        return f"{round(value, 6):.6f}"
    return repr(value)


class Run:
    """Output directory plus the stamp embedded in every file."""

    def __init__(self, command: str, config: ExperimentConfig):
        self.command = command
        self.config = config
        self.out_dir = Path(config.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.meta = {"tool": "ofdmwave", "version": __version__, "config_sha256": config.digest(), "seed": config.seed}
        self.write_json(f"{command}.config.json", config.to_dict(), stamp=False)

    def path(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() or p.parent != Path(".") else self.out_dir / p

    def write_csv(self, name: str, header, rows, db_columns=()) -> Path:
        buf = io.StringIO()
        buf.write(f"# ofdmwave {__version__} command={self.command} config_sha256={self.meta['config_sha256']} seed={self.config.seed}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v, col in db_columns) for col, v in zip(header, row)])
        path = self.path(name)
        path.write_text(buf.getvalue(), encoding="utf-8")
        return path

    def write_json(self, name: str, payload, stamp: bool = True) -> Path:
        body = {"meta": self.meta, **payload} if stamp else payload
        path = self.path(name)
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# ---------------------------------------------------------------------------
# commands


def cmd_spectral_sweep(cfg: ExperimentConfig, args) -> int:
    run = Run("spectral-sweep", cfg)
    sp = cfg.spectral
    rows = cp_sweep(cfg.grid.n, sp.t_cp_fractions, sp.draws, np.random.default_rng(cfg.seed), sp.quadrature_tol,
                    cache_dir=run.out_dir / "vcache")
    run.write_csv(args.out or "spectral_sweep.csv", ["t_cp_fraction", "mean_in_band_energy", "aclr_db"], rows,
                  db_columns={"aclr_db"})
    return EXIT_OK


def _qam_grids(config: GridConfig, k: int, slots: int, rng) -> np.ndarray:
    bits = rng.integers(0, 2, (slots, config.m, config.n, k), dtype=np.uint8)
    x = qam(k).modulate(bits)
    x[:, PILOT_SYMBOL, pilot_positions(config.n)] = random_pilots(slots * config.num_pilots, rng).reshape(slots, -1)
    return x


def _trained_grids(config: GridConfig, params: TxParams, slots: int, rng) -> np.ndarray:
    batch = draw_slots(config, params.k, slots, FlatProfile(rayleigh=False), rng)
    raw = params.gains * params.constellation[batch.labels]
    raw[:, PILOT_SYMBOL, pilot_positions(config.n)] = batch.pilots
    return batch_normalize(raw)


def load_params(path) -> TxParams:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return TxParams.from_dict(data.get("params", data))


def cmd_papr_ccdf(cfg: ExperimentConfig, args) -> int:
    pc = cfg.papr
    mode = args.mode or pc.mode
    run = Run("papr-ccdf", cfg)
    rng = np.random.default_rng(cfg.seed)
    grid = cfg.grid
    if mode == "qam":
        x = _qam_grids(grid, cfg.baseline.k, pc.slots, rng)
    elif mode == "tr":
        solver = PeakSolverConfig(oversampling=grid.oversampling)
        x = transmit_tr(grid, cfg.baseline.k, cfg.baseline.r, pc.slots, rng, solver).values
    else:
        params_path = args.params or pc.params
        if not params_path:
            raise ConfigError("mode=trained needs a params file (papr.params or --params)")
        if not Path(params_path).exists():
            raise ConfigError(f"params file {params_path} does not exist")
        x = _trained_grids(grid, load_params(params_path), pc.slots, rng)
    symbols = x.reshape(-1, grid.n)
    samples = collect_alpha(symbols, grid.oversampling)
    thresholds_db = np.round(np.arange(pc.threshold_min_db, pc.threshold_max_db + 0.5 * pc.threshold_step_db,
                                       pc.threshold_step_db), 10)
    curve = ccdf(samples, 10.0 ** (thresholds_db / 10.0))
    run.write_csv(args.out or f"papr_ccdf_{mode}.csv", ["threshold_db", "ccdf"], zip(thresholds_db, curve),
                  db_columns={"threshold_db"})
    mean_power = float(np.mean(np.abs(symbols) ** 2))
    nyquist_peak = np.max(np.abs(oversample(symbols, 1, SamplingConvention.UNIT_MEAN_POWER)) ** 2, axis=-1)
    fine_peak = peak_power(symbols, grid.oversampling)
    summary = {
        "mode": mode,
        "symbols": int(symbols.shape[0]),
        "oversampling": grid.oversampling,
        "papr_db": {f"{eps:g}": round(papr_epsilon(samples, eps)[1], 6) for eps in REPORT_EPSILONS},
        "papr_db_configured_epsilon": round(papr_epsilon(samples, pc.epsilon)[1], 6),
        "epsilon": pc.epsilon,
        "max_peak_db_nyquist": round(float(to_db(nyquist_peak.max() / mean_power)), 6),
        "max_peak_db_oversampled": round(float(to_db(fine_peak.max() / mean_power)), 6),
        "aclr_db": round(float(to_db(aclr_empirical(symbols, spectral_operators(grid.n, grid.t_cp_fraction)))), 6),
    }
    run.write_json(f"papr_summary_{mode}.json", summary)
    return EXIT_OK


def cmd_tr_baseline(cfg: ExperimentConfig, args) -> int:
    run = Run("tr-baseline", cfg)
    grid, b = cfg.grid, cfg.baseline
    rng = np.random.default_rng(cfg.seed)
    batch = transmit_tr(grid, b.k, b.r, b.slots, rng, PeakSolverConfig(oversampling=grid.oversampling))
    c = _c_part(batch, grid)
    after = batch.values.reshape(-1, grid.n)
    before = (batch.values - c).reshape(-1, grid.n)
    ops = spectral_operators(grid.n, grid.t_cp_fraction)
    papr_before = papr_epsilon(collect_alpha(before, grid.oversampling), b.epsilon)[1]
    papr_after = papr_epsilon(collect_alpha(after, grid.oversampling), b.epsilon)[1]
    mean_c_energy = float(np.mean(np.sum(np.abs(c) ** 2, axis=-1)))
    row = (papr_before, papr_after, float(to_db(aclr_empirical(after, ops))), mean_c_energy)
    run.write_csv(args.out or "tr_baseline.csv", ["papr_db_before", "papr_db_after", "aclr_db", "mean_c_energy"], [row],
                  db_columns={"papr_db_before", "papr_db_after", "aclr_db"})
    reports = [{"slot": i // grid.m, "symbol": i % grid.m, **r.to_dict()} for i, r in enumerate(batch.reports)]
    run.write_json("tr_reports.json", {"epsilon": b.epsilon, "reports": reports})
    return EXIT_OK


def _pilot_mask_like(values, grid: GridConfig) -> np.ndarray:
    mask = np.zeros(values.shape, dtype=bool)
    mask[..., PILOT_SYMBOL, pilot_positions(grid.n)] = True
    return mask


def _c_part(batch, grid: GridConfig) -> np.ndarray:
    """Peak-reduction signal: whatever is neither data nor pilot."""
    keep = batch.data_mask | _pilot_mask_like(batch.values, grid)
    return np.where(keep, 0, batch.values)


def cmd_gen_channels(cfg: ExperimentConfig, args) -> int:
    run = Run("gen-channels", cfg)
    rng = np.random.default_rng(cfg.seed)
    count = args.count if args.count is not None else cfg.channels_count
    if count < 1:
        raise ConfigError("channel count must be >= 1")
    responses = cfg.channel.profile().sample(count, cfg.grid, rng)
    write_channel_file(run.path(args.out or "channels.bin"), responses)
    run.write_json("channels.meta.json", {"count": count, "n": cfg.grid.n, "profile": cfg.to_dict()["channel"]})
    return EXIT_OK


def cmd_simulate_baseline(cfg: ExperimentConfig, args) -> int:
    run = Run("simulate-baseline", cfg)
    grid, b = cfg.grid, cfg.baseline
    ops = spectral_operators(grid.n, grid.t_cp_fraction)
    sink = {} if args.llr_dir else None
    rows, _ = simulate_baseline(grid, ops, cfg.channel.profile(), b.k, b.r, b.snr_db, b.slots,
                                np.random.default_rng(cfg.seed), b.epsilon, b.covariance_samples,
                                PeakSolverConfig(oversampling=grid.oversampling), llr_sink=sink)
    run.write_csv(args.out or "simulate_baseline.csv", ["snr_db", "ber", "rate_bits_per_re", "papr_db", "aclr_db"], rows,
                  db_columns={"snr_db", "papr_db", "aclr_db"})
    run.write_json("simulate_baseline.json", {
        "papr_epsilon": b.epsilon,
        "covariance_source": "clean-pilots",
        "covariance_samples": b.covariance_samples,
        "band_edge_estimate": "nearest pilot",
    })
    if sink is not None:
        llr_dir = Path(args.llr_dir)
        llr_dir.mkdir(parents=True, exist_ok=True)
        for snr, llrs in sink.items():
            write_llr_file(llr_dir / f"llrs_snr{snr:+.1f}dB.bin", llrs)
    return EXIT_OK


TRACE_COLUMNS = ["iter", "l_c", "l_peak", "l_leak", "lambda_p", "lambda_l", "mu_p", "mu_l", "papr_db", "aclr_db"]


def cmd_train(cfg: ExperimentConfig, args) -> int:
    run = Run("train", cfg)
    grid = cfg.grid
    ops = spectral_operators(grid.n, grid.t_cp_fraction)
    train = replace(cfg.train, seed=cfg.seed)
    try:
        result = run_training(grid, ops, train, cfg.channel.profile())
        trace, status = result.trace, 0
    except TrainingDiverged as exc:
        trace, status, result = exc.trace, EXIT_NUMERICAL, None
    rows = [[t[c] for c in TRACE_COLUMNS] for t in trace]
    run.write_csv(args.trace or "trace.csv", TRACE_COLUMNS, rows, db_columns={"papr_db", "aclr_db"})
    if result is None:
        log.error("training diverged; trace written")
        return status
    run.write_json(args.out or "params.json", {
        "params": result.params.to_dict(),
        "objective": "bit cross-entropy of the fixed LMMSE receiver; the receiver KL term is not included",
        "final_state": {"lambda_p": result.state.lambda_peak, "lambda_l": result.state.lambda_leak,
                        "mu_p": result.state.mu_peak, "mu_l": result.state.mu_leak},
    })
    return EXIT_OK


def cmd_eval_trained(cfg: ExperimentConfig, args) -> int:
    run = Run("eval-trained", cfg)
    grid = cfg.grid
    params_path = args.params or cfg.papr.params
    if not params_path:
        raise ConfigError("eval-trained needs --params")
    params = load_params(params_path)
    ops = spectral_operators(grid.n, grid.t_cp_fraction)
    rows = []
    for snr in cfg.baseline.snr_db:
        train = replace(cfg.train, snr_db=snr, seed=cfg.seed)
        m = evaluate_params(params, grid, ops, train, cfg.channel.profile(), np.random.default_rng(cfg.seed))
        rows.append((snr, m["rate"], m["papr_db"], m["aclr_db"], m["l_peak"]))
    run.write_csv(args.out or "eval_trained.csv", ["snr_db", "rate_bits_per_re", "papr_db", "aclr_db", "l_peak"], rows,
                  db_columns={"snr_db", "papr_db", "aclr_db"})
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON experiment config")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                   help="worker threads (results do not depend on it)")
    p.add_argument("--out-dir", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="ofdmwave", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"ofdmwave {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spectral-sweep", parents=[common], help="in-band energy and ACLR versus CP length")
    p.add_argument("--n", type=int)
    p.add_argument("--draws", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_spectral_sweep)

    p = sub.add_parser("papr-ccdf", parents=[common], help="PAPR CCDF of QAM, TR or trained grids")
    p.add_argument("--mode", choices=["qam", "tr", "trained"])
    p.add_argument("--params")
    p.add_argument("--n", type=int)
    p.add_argument("--oversampling", type=int)
    p.add_argument("--slots", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_papr_ccdf)

    p = sub.add_parser("tr-baseline", parents=[common], help="tone-reservation peak reduction statistics")
    p.add_argument("--n", type=int)
    p.add_argument("--r", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--snr-db", type=float, help="recorded only; TR does not depend on it")
    p.add_argument("--slots", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_tr_baseline)

    p = sub.add_parser("gen-channels", parents=[common], help="write a channel dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--profile", choices=["tdl", "flat", "awgn"])
    p.add_argument("--n", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_channels)

    p = sub.add_parser("simulate-baseline", parents=[common], help="BER and rate of the TR baseline over SNR")
    p.add_argument("--n", type=int)
    p.add_argument("--r", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--slots", type=int)
    p.add_argument("--snr-db", type=float, nargs="+")
    p.add_argument("--profile", choices=["tdl", "flat", "awgn"])
    p.add_argument("--llr-dir", help="dump LLRs for every SNR point here")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate_baseline)

    p = sub.add_parser("train", parents=[common], help="train the transmitter under PAPR and ACLR targets")
    p.add_argument("--n", type=int)
    p.add_argument("--out", help="params JSON")
    p.add_argument("--trace", help="trace CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-trained", parents=[common], help="rate, PAPR and ACLR of trained parameters")
    p.add_argument("--params", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_trained)
    return parser


def resolve(args) -> ExperimentConfig:
    raw = load_config(getattr(args, "config", None))
    cfg = ExperimentConfig.from_dict(raw)
    grid = cfg.grid.to_dict()
    baseline = {}
    if getattr(args, "n", None) is not None:
        grid["n"] = args.n
    if getattr(args, "oversampling", None) is not None:
        grid["oversampling"] = args.oversampling
    for key in ("k", "r", "slots"):
        if getattr(args, key, None) is not None:
            baseline[key] = getattr(args, key)
    snr = getattr(args, "snr_db", None)
    if isinstance(snr, list):
        baseline["snr_db"] = tuple(snr)
    cfg = replace(cfg, grid=GridConfig.from_dict(grid), baseline=replace(cfg.baseline, **baseline))
    if getattr(args, "slots", None) is not None:
        cfg = replace(cfg, papr=replace(cfg.papr, slots=args.slots))
    if getattr(args, "draws", None) is not None:
        cfg = replace(cfg, spectral=replace(cfg.spectral, draws=args.draws))
    if getattr(args, "profile", None) is not None:
        cfg = replace(cfg, channel=replace(cfg.channel, kind=args.profile))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out_dir", None) is not None:
        cfg = replace(cfg, out_dir=args.out_dir)
    threads = getattr(args, "threads", None)
    if threads is not None and threads < 1:
        raise ConfigError("--threads must be >= 1")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return args.func(cfg, args)
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
