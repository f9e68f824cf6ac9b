"""Command-line front end.

Subcommands: gen-synthetic, inspect-dump, quantize, fidelity, simulate,
sweep. All randomness derives from the mandatory --seed flag through
named sub-streams; outputs are written atomically and are byte-identical
for identical inputs and seed. Exit codes: 0 success, 1 internal
invariant violation, 2 user/config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import warnings
from dataclasses import replace

import numpy as np

from .arch import ModelDims, PimConfig
from .attention import attention_fidelity
from .channelsort import sort_channels
from .errors import CapacityError, ConfigError, FormatError, PqPimError
from .kvstore import KvDump, SyntheticSpec, generate_synthetic_kv, load_kv_dump, write_kv_dump
from .quantizer import (
    PqConfig,
    build_compressed_kv,
    compression_factor,
    quantization_error,
    save_compressed,
)
from .scenarios import Scenario, Workload, reports_to_csv, run_scenario, sweep

FIDELITY_ARMS = ("standard", "no-weighting", "no-presort", "full")


def _atomic_write(path, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path, text: str) -> None:
    _atomic_write(path, text.encode())


def _load_config(path) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        return json.load(fh)


def _sub_seed(seed: int, *tags) -> int:
    parts = [seed & 0xFFFFFFFFFFFFFFFF]
    for t in tags:
        if isinstance(t, str):
            parts.extend(t.encode())
        else:
            parts.append(int(t))
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def _pq_from(cfg: dict, seed: int) -> PqConfig:
    body = dict(cfg.get("pq", {}))
    allowed = set(PqConfig.__dataclass_fields__)
    unknown = set(body) - allowed
    if unknown:
        raise ConfigError(f"unknown pq keys: {sorted(unknown)}")
    body.setdefault("rng_seed", _sub_seed(seed, "pq"))
    return PqConfig(**body)


def _hw_from(cfg: dict) -> PimConfig:
    return PimConfig.from_dict(cfg.get("hw", {}))


def _model_from(body: dict) -> ModelDims:
    allowed = set(ModelDims.__dataclass_fields__)
    unknown = set(body) - allowed
    if unknown:
        raise ConfigError(f"unknown model keys: {sorted(unknown)}")
    return ModelDims(**body)


def _scenarios_from(cfg: dict) -> list:
    docs = cfg.get("scenarios")
    if not docs:
        raise ConfigError("config needs a nonempty 'scenarios' list")
    out = []
    for doc in docs:
        body = dict(doc)
        kind = body.pop("kind", None)
        model = _model_from(body.pop("model", {}))
        wl = Workload(
            seq_in=int(body.pop("seq_in", 4096)),
            seq_out=int(body.pop("seq_out", 256)),
            batch=int(body.pop("batch", 16)),
        )
        if body:
            raise ConfigError(f"unknown scenario keys: {sorted(body)}")
        out.append(Scenario(kind, wl, model))
    return out


# --- subcommands ---------------------------------------------------------


def cmd_gen_synthetic(args) -> int:
    cfg = _load_config(args.config).get("synthetic", {})
    spec = SyntheticSpec(
        n_tokens=int(cfg.get("n_tokens", 1024)),
        head_dim=int(cfg.get("head_dim", 128)),
        n_latent_clusters=int(cfg.get("n_latent_clusters", 64)),
        cluster_spread=float(cfg.get("cluster_spread", 0.2)),
        rng_seed=_sub_seed(args.seed, "synthetic"),
    )
    dump = generate_synthetic_kv(
        spec,
        n_layers=int(cfg.get("n_layers", 1)),
        n_kv_heads=int(cfg.get("n_kv_heads", 1)),
    )
    if cfg.get("uniform_weights", True):
        dump = KvDump(
            keys=dump.keys,
            values=dump.values,
            weights=np.ones(dump.keys.shape[:3], dtype=np.float32),
        )
    path = os.path.join(args.out, "synthetic.aqkv")
    os.makedirs(args.out, exist_ok=True)
    write_kv_dump(dump, path)
    print(json.dumps({"written": path, "n_tokens": spec.n_tokens,
                      "head_dim": spec.head_dim}))
    return 0


def cmd_inspect_dump(args) -> int:
    dump = load_kv_dump(args.dump)
    info = {
        "n_layers": dump.n_layers,
        "n_kv_heads": dump.n_kv_heads,
        "n_tokens": dump.n_tokens,
        "head_dim": dump.head_dim,
        "dtype_code": dump.dtype_code,
        "has_weights": dump.weights is not None,
        "key_norm_mean": float(np.linalg.norm(dump.keys, axis=-1).mean()),
    }
    print(json.dumps(info, sort_keys=True))
    return 0


def _build_for_arm(dump, layer, head, pq, arm, seed, n_presort_samples=2048):
    keys, values, weights = dump.head(layer, head)
    if arm in ("standard", "no-presort"):
        perm_k = perm_v = None
    else:
        cal = min(n_presort_samples, keys.shape[0])
        perm_k = sort_channels(keys[:cal], pq.m, _sub_seed(seed, "presort-k", arm))
        perm_v = sort_channels(values[:cal], pq.m, _sub_seed(seed, "presort-v", arm))
    arm_dump = dump
    if arm in ("standard", "no-weighting") and dump.weights is not None:
        arm_dump = KvDump(keys=dump.keys, values=dump.values, weights=None)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ckv = build_compressed_kv(arm_dump, layer, head, pq,
                                  perm_k=perm_k, perm_v=perm_v)
    return ckv, perm_k, perm_v


def cmd_quantize(args) -> int:
    cfg = _load_config(args.config)
    pq = _pq_from(cfg, args.seed)
    dump = load_kv_dump(args.dump)
    layer = int(cfg.get("layer", 0))
    head = int(cfg.get("kv_head", 0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ckv = build_compressed_kv(dump, layer, head, pq)
    os.makedirs(args.out, exist_ok=True)
    sidecar = os.path.join(args.out, "compressed.aqpq")
    save_compressed(ckv, sidecar)

    keys, values, weights = dump.head(layer, head)
    summary = {
        "m": pq.m,
        "k": pq.k,
        "iters": pq.iters,
        "compression_factor": compression_factor(pq, dump.n_tokens, dump.head_dim),
        "sidecar": sidecar,
    }
    if ckv.n_quantized > 0:
        mse, wmse = quantization_error(keys, ckv, "key", weights=weights)
        summary["mse"] = mse
        summary["weighted_mse"] = wmse
        summary["per_window_objectives"] = [
            {
                "window": w,
                "key": float(sum(obj[-1] for obj in ckv.objectives["key"][w])),
                "value": float(sum(obj[-1] for obj in ckv.objectives["value"][w])),
            }
            for w in range(ckv.key_codebook.n_windows)
        ]
    else:
        summary["mse"] = None
        summary["weighted_mse"] = None
        summary["per_window_objectives"] = []
    _atomic_write_text(
        os.path.join(args.out, "quantize_summary.json"),
        json.dumps(summary, indent=2, sort_keys=True) + "\n",
    )
    print(json.dumps({"written": args.out,
                      "compression_factor": summary["compression_factor"]}))
    return 0


def cmd_fidelity(args) -> int:
    cfg = _load_config(args.config)
    fcfg = cfg.get("fidelity", {})
    arms = fcfg.get("arms", list(FIDELITY_ARMS))
    for arm in arms:
        if arm not in FIDELITY_ARMS:
            raise ConfigError(f"unknown fidelity arm {arm!r}")
    n_seeds = int(fcfg.get("seeds", 3))
    n_queries = int(fcfg.get("n_queries", 8))
    layer = int(cfg.get("layer", 0))
    head = int(cfg.get("kv_head", 0))
    dump = load_kv_dump(args.dump)
    keys, values, weights = dump.head(layer, head)

    rows = []
    for arm in arms:
        for rep in range(n_seeds):
            pq = replace(_pq_from(cfg, args.seed),
                         rng_seed=_sub_seed(args.seed, "build", arm, rep))
            ckv, perm_k, perm_v = _build_for_arm(
                dump, layer, head, pq, arm, args.seed
            )
            score_l1, output_cos = attention_fidelity(
                keys, values, ckv, pq,
                n_queries=n_queries,
                rng_seed=_sub_seed(args.seed, "queries", arm, rep),
                perm_k=perm_k, perm_v=perm_v,
            )
            if ckv.n_quantized > 0:
                _, wmse = quantization_error(
                    keys, ckv, "key", weights=weights, perm=perm_k
                )
            else:
                wmse = 0.0
            rows.append(
                {
                    "arm": arm,
                    "seed": rep,
                    "score_l1": f"{score_l1:.6e}",
                    "output_cos": f"{output_cos:.6f}",
                    "weighted_mse": f"{wmse:.6e}",
                }
            )
    buf = io.StringIO()
    writer = csv.DictWriter(
        buf, fieldnames=["arm", "seed", "score_l1", "output_cos", "weighted_mse"],
        lineterminator="\n",
    )
    writer.writeheader()
    writer.writerows(rows)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "fidelity.csv")
    _atomic_write_text(path, buf.getvalue())
    print(json.dumps({"written": path, "rows": len(rows)}))
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    pq = _pq_from(cfg, args.seed)
    hw = _hw_from(cfg)
    os.makedirs(args.out, exist_ok=True)
    written = []
    for sc in _scenarios_from(cfg):
        rep = run_scenario(sc, pq, hw)
        name = f"scenario_{sc.kind}_{sc.workload.seq_in}_{sc.workload.batch}.json"
        path = os.path.join(args.out, name)
        _atomic_write_text(
            path, json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n"
        )
        written.append(path)
    print(json.dumps({"written": written}))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    pq = _pq_from(cfg, args.seed)
    hw = _hw_from(cfg)
    body = cfg.get("sweep", {})
    axis = body.get("axis", "seq_in")
    points = body.get("points", [])
    reports = sweep(_scenarios_from(cfg), axis, points, pq, hw)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "sweep.csv")
    _atomic_write_text(path, reports_to_csv(reports))
    written = [path]
    if args.format == "json":
        jpath = os.path.join(args.out, "sweep.json")
        _atomic_write_text(
            jpath,
            json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)
            + "\n",
        )
        written.append(jpath)
    print(json.dumps({"written": written, "rows": len(reports)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pqpim",
        description="Compressed KV-cache quantization and PIM performance model",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_seed=True):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, required=needs_seed,
                       default=None if needs_seed else 0)
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--format", choices=("json", "csv"), default="json")

    p = sub.add_parser("gen-synthetic", help="write a clustered synthetic dump")
    common(p)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("inspect-dump", help="print dump header info")
    p.add_argument("dump")
    p.set_defaults(func=cmd_inspect_dump, seed=0)

    p = sub.add_parser("quantize", help="build codebooks/indices for one head")
    common(p)
    p.add_argument("--dump", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("fidelity", help="ablation arms x seeds fidelity CSV")
    common(p)
    p.add_argument("--dump", required=True)
    p.set_defaults(func=cmd_fidelity)

    p = sub.add_parser("simulate", help="run scenario reports")
    common(p, needs_seed=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="sweep scenarios along an axis")
    common(p, needs_seed=False)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as err:
        print(json.dumps({"error": "input-not-found", "message": str(err)}))
        return 2
    except (ConfigError, FormatError, CapacityError, json.JSONDecodeError) as err:
        kind = getattr(err, "kind", "config-error")
        print(json.dumps({"error": kind, "message": str(err)}))
        return 2
    except PqPimError as err:
        # internal invariant violations
        print(json.dumps({"error": err.kind, "message": str(err)}))
        return 1


if __name__ == "__main__":
    sys.exit(main())
