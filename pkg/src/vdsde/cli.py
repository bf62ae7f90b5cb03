"""Command line interface: ``vdsde <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 file or data I/O
error, 3 container/model mismatch, 4 selftest failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_MISMATCH, EXIT_SELFTEST = 0, 1, 2, 3, 4

EPILOG = """exit codes:
  0  success
  1  usage or configuration error
  2  missing/unreadable file or malformed data
  3  container written by a different model, or unsupported container version
  4  selftest failure
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- configuration ---------------------------------------------------------

_MODEL_KEYS = ("d_z", "hidden", "embed", "width", "gap_width", "n_substeps", "sigma_obs", "obs",
               "mixture_k", "nu_init", "prune_threshold", "zhat_kind")


def _convert(section: str, key: str, raw: str, kind):
    try:
        if kind is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return kind(raw)
    except ValueError as exc:
        raise UsageError(f"config [{section}] {key}: cannot read {raw!r} as {kind.__name__}") from exc


def load_config(path) -> dict:
    """Read a sectioned key = value file into typed dictionaries."""
    from .model import ModelConfig
    from .train import TrainConfig

    cp = configparser.ConfigParser()
    if path is not None:
        if not Path(path).is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cp.read(path)
    types = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    kinds = {"int": int, "float": float, "str": str}
    out = {"model": {}, "train": {}, "codec": {}, "data": {}}
    if cp.has_section("model"):
        for key, raw in cp.items("model"):
            if key not in _MODEL_KEYS:
                raise UsageError(f"config [model]: unknown key {key!r}")
            out["model"][key] = _convert("model", key, raw, kinds.get(types[key], str))
    train_types = {f.name: f.type for f in dataclasses.fields(TrainConfig) if f.name != "model"}
    if cp.has_section("train"):
        for key, raw in cp.items("train"):
            t = train_types.get(key)
            if t is None:
                raise UsageError(f"config [train]: unknown key {key!r}")
            kind = str if t == "str" else (int if "int" in t else float)
            out["train"][key] = _convert("train", key, raw, kind)
    codec_types = {"precision": int, "mode": str, "times_mode": str, "precisions": str, "prune": bool}
    if cp.has_section("codec"):
        for key, raw in cp.items("codec"):
            if key not in codec_types:
                raise UsageError(f"config [codec]: unknown key {key!r}")
            out["codec"][key] = _convert("codec", key, raw, codec_types[key])
    data_types = {"frame_dt": float, "seq_len": int}
    if cp.has_section("data"):
        for key, raw in cp.items("data"):
            if key not in data_types:
                raise UsageError(f"config [data]: unknown key {key!r}")
            out["data"][key] = _convert("data", key, raw, data_types[key])
    return out


# --- helpers -----------------------------------------------------------------

def _load_model(path):
    from .model import LatentVDSDE

    try:
        return LatentVDSDE.from_bytes(Path(path).read_bytes())
    except ValueError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc


def _load_dataset(path):
    from .data import SequenceDataset

    p = Path(path)
    if p.suffix == ".npz":
        return SequenceDataset.load(p)
    raise UsageError(f"expected a .npz dataset (use `gen-data` or `ingest`), got {path}")


def _norm(model):
    c = model.config
    if c.norm_mean is None:
        return None, None
    return np.asarray(c.norm_mean), np.asarray(c.norm_std)


def _read_sequence(args, model, mode):
    """One input sequence: row ``--index`` of an .npz dataset, or a CSV of frames."""
    p = Path(args.input)
    if p.suffix == ".npz":
        ds = _load_dataset(p)
        if not 0 <= args.index < ds.shape[0]:
            raise UsageError(f"--index {args.index} out of range for {ds.shape[0]} sequences")
        raw = ds.sequences[args.index]
    else:
        if not p.is_file():
            raise FileNotFoundError(f"input not found: {p}")
        raw = np.loadtxt(p, delimiter=",", ndmin=2)
    if mode == "lossless":
        return np.rint(raw).astype(np.int64)
    mean, std = _norm(model)
    return raw if mean is None else (raw - mean) / std


def _parse_precisions(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad precision list {text!r}") from exc


# --- commands ----------------------------------------------------------------

def cmd_gen_data(args, conf):
    from .data import gen_synthetic

    frame_dt = conf["data"].get("frame_dt", 0.1)
    ds = gen_synthetic(args.kind, args.n, args.seq_len, args.dx, args.seed, frame_dt)
    ds.save(args.out)
    print(f"wrote {args.out}: {ds.shape[0]} x {ds.shape[1]} x {ds.shape[2]}")


def cmd_ingest(args, conf):
    from .data import ingest_csv

    frame_dt = conf["data"].get("frame_dt", 0.1)
    T = args.seq_len or conf["data"].get("seq_len", 100)
    ds = ingest_csv(args.csv, T, frame_dt)
    ds.save(args.out)
    print(f"wrote {args.out}: {ds.shape[0]} x {ds.shape[1]} x {ds.shape[2]}")


def cmd_train(args, conf):
    from .train import TrainConfig, train

    ds = _load_dataset(args.data)
    tc = dict(conf["train"])
    if args.seed is not None:
        tc["seed"] = args.seed
    if args.lambda_frac is not None:
        tc["lambda_frac"] = args.lambda_frac
    if args.iters is not None:
        tc["iters"] = args.iters
        tc.pop("stage1_iters", None)
        tc.pop("stage2_iters", None)
    model_opts = dict(conf["model"])
    model_opts.update(norm_mean=ds.mean.tolist(), norm_std=ds.std.tolist())
    try:
        cfg = TrainConfig(**tc, model=model_opts)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    data = ds.normalized()
    if cfg.model.get("obs") == "logistic-mixture":
        from .model import from_levels

        data = from_levels(np.rint(ds.sequences).clip(0, 255)).numpy()
    model, history = train(data, cfg, frame_dt=ds.frame_dt, checkpoint=Path(args.out))
    Path(args.out).write_bytes(model.to_bytes())
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".log.csv")
    with open(log_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(history[0]))
        w.writeheader()
        w.writerows(history)
    last = history[-1]
    print(f"trained {len(history)} iterations: loss {last['loss']:.2f}, M {last['M_mean']:.1f}; "
          f"checkpoint {args.out}, log {log_path}")


def cmd_compress(args, conf):
    from .codec.pipeline import compress

    model = _load_model(args.model)
    codec = conf["codec"]
    mode = args.mode or codec.get("mode", "lossy")
    precision = args.precision or codec.get("precision", 256)
    times_mode = args.times_mode or codec.get("times_mode", "estimate")
    prune = codec.get("prune", True) if args.prune is None else args.prune
    x = _read_sequence(args, model, mode)
    seed = 0 if args.seed is None else args.seed
    try:
        blob, st = compress(x, model, mode=mode, precision=precision, seed=seed,
                            times_mode=times_mode, pruned=prune)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    Path(args.out).write_bytes(blob)
    print(f"wrote {args.out}: {len(blob)} bytes, latents {st.bits_latents:.1f} bits, "
          f"times estimate {st.bits_times_estimate:.1f} bits, M {st.M}")


def cmd_decompress(args, conf):
    from .codec.container import MODE_LOSSLESS, Container
    from .codec.pipeline import decompress, parse_times

    model = _load_model(args.model)
    blob = Path(args.input).read_bytes()
    query = None
    if args.times:
        try:
            query = parse_times(args.times)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    out = decompress(blob, model, query)
    header = Container.from_bytes(blob)
    if header.mode == MODE_LOSSLESS:
        np.savetxt(args.out, out, fmt="%d", delimiter=",")
    else:
        mean, std = _norm(model)
        if mean is not None:
            out = out * std + mean
        np.savetxt(args.out, out, fmt="%.17g", delimiter=",")
    print(f"wrote {args.out}: {out.shape[0]} frames")


def rd_sweep(model, ds, precisions, seed: int = 0, times_mode: str = "estimate", prune: bool = True,
             limit=None) -> list[dict]:
    """Average rate and distortion over the dataset for each precision."""
    from .codec.pipeline import compress, decompress

    x = ds.normalized()
    n = x.shape[0] if limit is None else min(limit, x.shape[0])
    pruned_dims = int(model.ou_params().global_mask.sum()) if prune else 0
    rows = []
    for P in precisions:
        acc = {"bits_total": [], "bits_latents": [], "bits_times_estimate": [], "M": [], "se": [], "ae": []}
        for i in range(n):
            blob, st = compress(x[i], model, precision=P, seed=seed + i, times_mode=times_mode, pruned=prune)
            y = ds.denormalize(decompress(blob, model))
            err = y - ds.sequences[i]
            acc["bits_total"].append(st.bits_total)
            acc["bits_latents"].append(st.bits_latents)
            acc["bits_times_estimate"].append(st.bits_times_estimate)
            acc["M"].append(st.M)
            acc["se"].append(np.mean(err**2))
            acc["ae"].append(np.mean(np.abs(err)))
        rows.append({"precision": P, "bits_total": float(np.mean(acc["bits_total"])),
                     "bits_latents": float(np.mean(acc["bits_latents"])),
                     "bits_times_estimate": float(np.mean(acc["bits_times_estimate"])),
                     "M_mean": float(np.mean(acc["M"])), "pruned_dims": pruned_dims,
                     "mse": float(np.mean(acc["se"])), "mae": float(np.mean(acc["ae"]))})
    return rows


RD_COLUMNS = ["precision", "bits_total", "bits_latents", "bits_times_estimate", "M_mean", "pruned_dims",
              "mse", "mae"]


def cmd_rd_sweep(args, conf):
    model = _load_model(args.model)
    ds = _load_dataset(args.data)
    codec = conf["codec"]
    text = args.precisions or codec.get("precisions", "16,64,256,1024,4096")
    precisions = _parse_precisions(text)
    if not precisions:
        raise UsageError("no precisions given")
    prune = codec.get("prune", True) if args.prune is None else args.prune
    rows = rd_sweep(model, ds, precisions, 0 if args.seed is None else args.seed,
                    args.times_mode or codec.get("times_mode", "estimate"), prune, args.limit)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RD_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {args.out}: {len(rows)} rows")


def cmd_selftest(args, conf):
    from . import acceptance

    results = acceptance.run_all(only=args.only, log=print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    return EXIT_SELFTEST if failed else EXIT_OK


# --- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vdsde", description="Latent SDE sequence codec with learned discretization.",
                epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="sectioned key = value configuration file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset (.npz)")
    g.add_argument("--kind", default="sinusoid-mix", choices=["sinusoid-mix", "bounce-2d", "piecewise-erratic"])
    g.add_argument("--n", type=int, default=64)
    g.add_argument("--seq-len", type=int, default=100)
    g.add_argument("--dx", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("ingest", help="cut a CSV of frames into a dataset (.npz)")
    g.add_argument("csv")
    g.add_argument("--seq-len", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_ingest)

    g = sub.add_parser("train", help="train a model; writes a checkpoint and a CSV log")
    g.add_argument("--data", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--lambda-frac", type=float)
    g.add_argument("--iters", type=int)
    g.add_argument("--log")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_train)

    for name, help_text in (("compress", "compress one sequence into a container"),):
        g = sub.add_parser(name, help=help_text)
        g.add_argument("--model", required=True)
        g.add_argument("input", help=".npz dataset (with --index) or CSV of frames")
        g.add_argument("--index", type=int, default=0)
        g.add_argument("--mode", choices=["lossy", "lossless"])
        g.add_argument("--precision", type=int)
        g.add_argument("--times-mode", choices=["estimate", "astar", "full"])
        g.add_argument("--seed", type=int)
        g.add_argument("--prune", dest="prune", action="store_true", default=None)
        g.add_argument("--no-prune", dest="prune", action="store_false")
        g.add_argument("--out", required=True)
        g.set_defaults(func=cmd_compress)

    g = sub.add_parser("decompress", help="decode a container to CSV")
    g.add_argument("--model", required=True)
    g.add_argument("input")
    g.add_argument("--times", help="query grid a:b:step (default: the frame times)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_decompress)

    g = sub.add_parser("rd-sweep", help="rate-distortion table over quantizer precisions")
    g.add_argument("--model", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--precisions", help="comma separated, e.g. 16,64,256")
    g.add_argument("--times-mode", choices=["estimate", "astar", "full"])
    g.add_argument("--seed", type=int)
    g.add_argument("--limit", type=int, help="use only the first N sequences")
    g.add_argument("--prune", dest="prune", action="store_true", default=None)
    g.add_argument("--no-prune", dest="prune", action="store_false")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_rd_sweep)

    g = sub.add_parser("selftest", help="run the acceptance suite")
    g.add_argument("--only", type=int, action="append", help="criterion number (repeatable)")
    g.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    from .codec.container import ContainerError, ModelMismatch, VersionMismatch
    from .data import DataError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        conf = load_config(args.config)
        code = args.func(args, conf)
    except UsageError as exc:
        print(f"vdsde: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelMismatch, VersionMismatch) as exc:
        print(f"vdsde: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (OSError, DataError, ContainerError) as exc:
        print(f"vdsde: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
