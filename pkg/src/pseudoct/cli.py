"""Command line driver: one subcommand per pipeline stage.

Every command writes a JSON run manifest listing its inputs and outputs
with SHA-256 digests.  Failures print a single line
``error code=<Code> message=<text>`` on stderr and exit with the error's
status.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .errors import ConfigError, EmptyDataset, FormatError, GradCheckFailed, MissingCase, PseudoCTError, ShapeMismatch
from .fixtures import make_case, write_case
from .gan import TrainConfig, discriminator_shape_trace, load_generator, load_state, train_loop
from .metrics import evaluate_set
from .netgen import generator_param_count, generator_shape_trace
from .register import (
    compose_resample_matrix, estimate_similarity, fiducial_error, load_landmarks,
    resample_into_us_grid, transform_report,
)
from .roi import preprocess_case
from .verify import reduced_config, run_suite
from .volgrid import Volume, load_uvol, raw_path, save_uvol


# --- manifest -----------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _with_payloads(paths):
    out = []
    for p in paths:
        p = Path(p)
        out.append(p)
        if p.suffix == ".uvol":
            out.append(raw_path(p))
        elif p.suffix == ".json" and p.with_suffix(".bin").exists():
            out.append(p.with_suffix(".bin"))
    return out


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(path, command, started, params, inputs, outputs, extra=None) -> Path:
    manifest = {
        "tool": "pseudoct",
        "version": __version__,
        "command": command,
        "params": params,
        "inputs": [{"path": str(p), "sha256": sha256_file(p)} for p in _with_payloads(inputs)],
        "outputs": [{"path": str(p), "sha256": sha256_file(p)} for p in _with_payloads(outputs)],
        "started": started,
        "finished": _now(),
    }
    if extra:
        manifest.update(extra)
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _case_id(path, suffix):
    stem = Path(path).name
    if stem.endswith(".uvol"):
        stem = stem[: -len(".uvol")]
    return stem[: -len(suffix)] if stem.endswith(suffix) else stem


# --- subcommands -----------------------------------------------------------

def cmd_register(args) -> int:
    started = _now()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    P = load_landmarks(args.us_landmarks)
    Q = load_landmarks(args.ct_landmarks)
    ct = load_uvol(args.ct)
    us = load_uvol(args.us)
    X = estimate_similarity(P, Q)
    fre = fiducial_error(P, Q, X)
    M = compose_resample_matrix(ct.affine, X.T, us.affine)
    case = args.case or _case_id(args.us, "_us")

    report_path = out / f"{case}_transform.json"
    report_path.write_text(json.dumps(transform_report(X, fre), indent=1, sort_keys=True) + "\n")
    ct_path = save_uvol(out / f"{case}_ct_reg.uvol", resample_into_us_grid(ct, M, us.dims, us.affine))
    outputs = [report_path, ct_path]
    inputs = [args.us_landmarks, args.ct_landmarks, args.ct, args.us]
    if args.ct_mask:
        mask = load_uvol(args.ct_mask)
        outputs.append(save_uvol(
            out / f"{case}_ct_mask_reg.uvol",
            resample_into_us_grid(mask, M, us.dims, us.affine, interp="nearest"),
        ))
        inputs.append(args.ct_mask)
    write_manifest(out / f"{case}_register_manifest.json", "register", started,
                   {"case": case}, inputs, outputs, {"fre_mm": fre})
    print(f"registered {case}: s={X.s:.6f} fre_mm={fre:.3e}")
    return 0


def cmd_preprocess(args) -> int:
    started = _now()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ct, us, mask = load_uvol(args.ct), load_uvol(args.us), load_uvol(args.us_mask)
    res = preprocess_case(ct, us, mask, margin=args.margin, target_dims=args.target_dims)
    case = args.case or _case_id(args.us, "_us")
    outputs = [
        save_uvol(out / f"{case}_{key}.uvol", res[key])
        for key in ("us", "us_mask", "fov", "ct_unmasked", "ct")
    ]
    write_manifest(
        out / f"{case}_preprocess_manifest.json", "preprocess", started,
        {"case": case, "margin": args.margin, "target_dims": args.target_dims},
        [args.ct, args.us, args.us_mask], outputs,
        {"box": res["box"].as_dict(), "order": ["crop", "fov_from_raw_us", "minmax", "mask_ct"]},
    )
    print(f"preprocessed {case}: box {res['box'].b_min}..{res['box'].b_max} dims {res['us'].dims}")
    return 0


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: unreadable config ({exc})") from exc


def _train_config(args, data_dims=None) -> TrainConfig:
    d = _load_config(args.config)
    for key in ("seed", "epochs", "lr", "lambda_pix", "lambda_adv"):
        value = getattr(args, key, None)
        if value is not None:
            d[key] = value
    gen = dict(d.get("generator", {}))
    if data_dims is not None and "input_dims" not in gen:
        gen["input_dims"] = list(data_dims)
    d["generator"] = gen
    return TrainConfig.from_dict(d)


def load_pairs(data_dir, us_suffix="_us", ct_suffix="_ct"):
    """``(case, U, C)`` for every ``<case>_us.uvol`` with a matching ``<case>_ct.uvol``."""
    data_dir = Path(data_dir)
    pairs = []
    for us_path in sorted(data_dir.glob(f"*{us_suffix}.uvol")):
        case = _case_id(us_path, us_suffix)
        ct_path = data_dir / f"{case}{ct_suffix}.uvol"
        if not ct_path.exists():
            raise MissingCase(f"case {case}: no {ct_path.name} next to {us_path.name}")
        us, ct = load_uvol(us_path), load_uvol(ct_path)
        if us.dims != ct.dims:
            raise ShapeMismatch(f"case {case}: US dims {us.dims} != CT dims {ct.dims}")
        pairs.append((case, us, ct))
    if not pairs:
        raise EmptyDataset(f"no *{us_suffix}.uvol volumes in {data_dir}")
    return pairs


def dry_run(cfg: TrainConfig) -> dict:
    """Validate the full graph by shape arithmetic; nothing is allocated."""
    t0 = time.perf_counter()
    trace = generator_shape_trace(cfg.generator)
    disc = discriminator_shape_trace(cfg.generator.input_dims, cfg.discriminator)
    return {
        "generator_trace": [[name, list(shape)] for name, shape in trace],
        "discriminator_trace": [[name, list(shape)] for name, shape in disc],
        "generator_parameters": generator_param_count(cfg.generator),
        "seconds": time.perf_counter() - t0,
    }


def cmd_train(args) -> int:
    started = _now()
    if args.dry_run:
        cfg = _train_config(args).validate()
        info = dry_run(cfg)
        for name, shape in info["generator_trace"]:
            print(f"generator {name:<20} {tuple(shape)}")
        for name, shape in info["discriminator_trace"]:
            print(f"discriminator {name:<16} {tuple(shape)}")
        print(f"generator parameters {info['generator_parameters']}")
        return 0

    pairs = load_pairs(args.data_dir)
    dims = pairs[0][1].dims
    cfg = _train_config(args, dims).validate()
    arrays = []
    for case, us, ct in pairs:
        if us.dims != cfg.generator.input_dims:
            raise ShapeMismatch(f"case {case}: dims {us.dims} != configured {cfg.generator.input_dims}")
        arrays.append((us.data[None, None], ct.data[None, None]))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = load_state(args.resume) if args.resume else None
    if state is not None and state.cfg.to_dict() != cfg.to_dict():
        raise ConfigError("resume checkpoint was trained with a different configuration")

    def log(step, epoch, rec):
        if args.verbose:
            print(f"step {step} epoch {epoch} " + " ".join(f"{k}={v:.6f}" for k, v in rec.items()))

    state = train_loop(arrays, cfg, out, state=state, log=log)
    last = state.history[-1]
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    outputs = sorted(out.glob("checkpoint_*.json")) + [out / "loss_curve.jsonl", out / "config.json"]
    inputs = [p for case, _, _ in pairs for p in (Path(args.data_dir) / f"{case}_us.uvol",
                                                 Path(args.data_dir) / f"{case}_ct.uvol")]
    if args.config:
        inputs.append(args.config)
    write_manifest(out / "train_manifest.json", "train", started,
                   {"config": cfg.to_dict(), "cases": [c for c, _, _ in pairs]}, inputs, outputs)
    print(f"trained {state.step} steps; final gen_pix={last['gen_pix']:.6f} disc={last['disc']:.6f}")
    return 0


def cmd_synthesize(args) -> int:
    started = _now()
    us = load_uvol(args.us)
    gen = load_generator(args.checkpoint, us.dims)
    with T.no_grad():
        pred = gen(T.Tensor(us.data[None, None].astype(gen.dtype))).data[0, 0]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_uvol(out, Volume(pred.astype(np.float64), us.affine))
    ckpt = Path(args.checkpoint)
    ckpt = ckpt if ckpt.suffix == ".json" else ckpt.with_suffix(".json")
    write_manifest(out.with_name(out.name.replace(".uvol", "") + "_manifest.json"), "synthesize",
                   started, {}, [ckpt, args.us], [out])
    print(f"synthesized {out} dims {us.dims}")
    return 0


def cmd_evaluate(args) -> int:
    started = _now()
    pred_dir, ref_dir = Path(args.pred_dir), Path(args.ref_dir)
    preds = {_case_id(p, args.pred_suffix): p for p in sorted(pred_dir.glob(f"*{args.pred_suffix}.uvol"))}
    refs = {_case_id(p, args.ref_suffix): p for p in sorted(ref_dir.glob(f"*{args.ref_suffix}.uvol"))}
    missing = sorted(set(preds) ^ set(refs))
    if missing:
        raise MissingCase("cases without a counterpart: " + ", ".join(missing))
    if not preds:
        raise EmptyDataset(f"no *{args.pred_suffix}.uvol volumes in {pred_dir}")
    items = [(case, load_uvol(preds[case]), load_uvol(refs[case])) for case in sorted(preds)]
    report = evaluate_set(items)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    write_manifest(out.with_name(out.stem + "_manifest.json"), "evaluate", started, {},
                   [p for case in sorted(preds) for p in (preds[case], refs[case])], [out])
    agg = report.aggregate
    psnr = agg["psnr_db"]["mean"]
    print(f"evaluated {len(items)} cases: psnr_mean={'n/a' if psnr is None else f'{psnr:.4f}'} "
          f"(infinite {agg['psnr_db']['n_infinite']}) ssim_mean={agg['ssim']['mean']:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args.config) or reduced_config()
    with T.corrupt_backward(*args.corrupt):
        results = run_suite(cfg)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<26} max_rel_error={r.max_rel_error:.3e} threshold={r.threshold:.0e}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise GradCheckFailed("gradient check failed for: " + ", ".join(failed))
    return 0


def cmd_fixtures(args) -> int:
    started = _now()
    out = Path(args.out_dir)
    outputs = []
    for i in range(args.cases):
        paths = write_case(out, make_case(f"case{i:03d}", seed=args.seed + i, us_dims=tuple(args.dims)))
        outputs += list(paths.values())
    write_manifest(out / "fixtures_manifest.json", "fixtures", started,
                   {"cases": args.cases, "seed": args.seed, "dims": args.dims}, [], outputs)
    print(f"wrote {args.cases} synthetic cases to {out}")
    return 0


# --- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pseudoct", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"pseudoct {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("register", help="landmark similarity registration and CT resampling")
    r.add_argument("--us-landmarks", required=True)
    r.add_argument("--ct-landmarks", required=True)
    r.add_argument("--ct", required=True)
    r.add_argument("--us", required=True)
    r.add_argument("--ct-mask")
    r.add_argument("--case")
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_register)

    pp = sub.add_parser("preprocess", help="kidney crop, FOV masking and normalisation")
    pp.add_argument("--ct", required=True, help="registered CT on the US grid")
    pp.add_argument("--us", required=True)
    pp.add_argument("--us-mask", required=True)
    pp.add_argument("--margin", type=int, default=5)
    pp.add_argument("--target-dims", type=int, nargs=3, metavar=("D", "H", "W"),
                    help="crop a fixed-size window centred on the kidney box instead")
    pp.add_argument("--case")
    pp.add_argument("--out-dir", required=True)
    pp.set_defaults(func=cmd_preprocess)

    t = sub.add_parser("train", help="adversarial training")
    t.add_argument("--data-dir")
    t.add_argument("--config", help="JSON training config; flags override it")
    t.add_argument("--out-dir")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lambda-pix", type=float)
    t.add_argument("--lambda-adv", type=float)
    t.add_argument("--resume", help="checkpoint stem to continue from")
    t.add_argument("--dry-run", action="store_true", help="validate shapes and exit")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synthesize", help="pseudo-CT inference")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--us", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    e = sub.add_parser("evaluate", help="PSNR/SSIM/MSE report")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--ref-dir", required=True)
    e.add_argument("--pred-suffix", default="_pct")
    e.add_argument("--ref-suffix", default="_ct")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--config", help="JSON config; defaults to a built-in reduced one")
    g.add_argument("--corrupt", action="append", default=[], metavar="OP",
                   help="test hook: scale the named op's backward (repeatable)")
    g.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("fixtures", help="write synthetic paired cases")
    f.add_argument("--out-dir", required=True)
    f.add_argument("--cases", type=int, default=2)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--dims", type=int, nargs=3, default=[24, 24, 40])
    f.set_defaults(func=cmd_fixtures)
    return p


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise ConfigError([f"{flag} is required" for flag in missing])


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train" and not args.dry_run:
            _require(args, "data_dir", "out_dir")
        return args.func(args)
    except PseudoCTError as exc:
        message = " ".join(str(exc).split())
        print(f"error code={exc.code} message={message}", file=sys.stderr)
        return exc.exit_status
    except OSError as exc:
        message = " ".join(str(exc).split())
        print(f"error code=IOError message={message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
