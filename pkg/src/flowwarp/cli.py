"""``flowwarp`` command line: data generation, gradient checks, training,
evaluation and single-operator utilities.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import core, gradcheck, metrics, network, synthdata, tps
from .losses import LAMBDA_FTC, LAMBDA_TVL1
from .warp import warp_backward

log = logging.getLogger("flowwarp")


def _limit_threads():
    n = os.environ.get("FLOWWARP_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


# --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    try:
        seqs = synthdata.generate_dataset(args.seed, args.sequences, args.frames, args.motion,
                                          size=args.size, amplitude=args.amplitude)
    except synthdata.GenerationError as exc:
        log.error("generation failed: %s", exc)
        return 1
    print(synthdata.export_dataset(seqs, args.out))
    return 0


def cmd_gradcheck(args) -> int:
    ok = True
    for r in gradcheck.run(args.op, args.seed):
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max relative error {r.max_rel_error:.3e} "
              f"(threshold {r.threshold:.0e}, {r.checked} checked)")
        ok &= r.passed
    return 0 if ok else 1


def _write_config(path: Path, args, n_steps_done: int):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg["steps_done"] = n_steps_done
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


def cmd_train(args) -> int:
    seqs = synthdata.load_dataset(args.data)
    state = network.init_state(args.seed, network.FpnConfig(size=int(seqs[0].frames.shape[1])))
    opt = network.Adam(lr=args.lr, beta1=args.beta1, beta2=args.beta2)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".jsonl")
    last_good = [state]

    with open(log_path, "w") as fh:
        def on_step(k, report, st):
            fh.write(report.to_json() + "\n")
            last_good[0] = st
            if args.verbose and k % 50 == 0:
                log.info("step %d %s", k, report)

        try:
            state, reports = network.train(state, seqs, args.steps, opt, args.lambda1,
                                           args.lambda2, callback=on_step)
        except network.TrainingError as exc:
            network.save_state(last_good[0], out)
            log.error("%s; last good checkpoint written to %s", exc, out)
            return 1
    network.save_state(state, out)
    _write_config(out.with_suffix(".json"), args, args.steps)
    print(out)
    return 0


def evaluate_sequences(seqs, state=None, save_dir=None) -> dict:
    """Metrics of model outputs (or of the ground-truth frames when ``state``
    is None) against the ground truth, averaged over frames and sequences."""
    per_seq = []
    for i, seq in enumerate(seqs):
        if state is None:
            frames = list(seq.frames)
            flows = list(seq.exemplar_flows)
        else:
            outs = network.run_sequence(state, (seq.exemplar_layout, seq.exemplar), seq.layouts)
            frames = [o.warped_fine for o in outs]
            flows = [o.flow_final for o in outs]
        if save_dir is not None:
            d = Path(save_dir) / f"seq_{i:03d}"
            d.mkdir(parents=True, exist_ok=True)
            for t, (img, fl) in enumerate(zip(frames, flows)):
                core.write_image(np.clip(img, 0, 1), d / f"{t:04d}.png")
                core.write_flo(fl, d / f"{t:04d}.flo")
        entry = {
            "ssim": float(np.mean([metrics.ssim(f, g) for f, g in zip(frames, seq.frames)])),
            "psnr": float(np.mean([metrics.psnr(f, g) for f, g in zip(frames, seq.frames)])),
        }
        if len(seq) > 1:
            u = [seq.lag_flows[1][t] for t in range(1, len(seq))]
            entry["tcm"] = metrics.tcm(frames, u)
        per_seq.append(entry)
    summary = {k: float(np.mean([e[k] for e in per_seq if k in e]))
               for k in ("ssim", "psnr", "tcm") if any(k in e for e in per_seq)}
    summary["frames"] = int(sum(len(s) for s in seqs))
    summary["sequences"] = len(seqs)
    summary["per_sequence"] = per_seq
    return summary


def cmd_eval(args) -> int:
    seqs = synthdata.load_dataset(args.data)
    out = Path(args.out)
    save = Path(args.save_frames) if args.save_frames else out.with_name(out.stem + "_frames")
    if args.ground_truth:
        result = evaluate_sequences(seqs, None, save)
    else:
        if not args.model:
            log.error("--model is required unless --ground-truth is given")
            return 2
        result = evaluate_sequences(seqs, network.load_state(args.model), save)
        if args.compare_model:
            other = evaluate_sequences(seqs, network.load_state(args.compare_model))
            result["ablation"] = {
                "model": args.model,
                "compare_model": args.compare_model,
                "tcm": [result.get("tcm"), other.get("tcm")],
                "ssim": [result["ssim"], other["ssim"]],
                "psnr": [result["psnr"], other["psnr"]],
                "tcm_delta": result.get("tcm", math.nan) - other.get("tcm", math.nan),
            }
    out.write_text(metrics.metrics_json(result) + "\n")
    print(out)
    return 0


def cmd_warp(args) -> int:
    img = core.read_image(args.image)
    flow = core.read_flo(args.flow)
    core.write_image(warp_backward(img, flow), args.out)
    print(args.out)
    return 0


def _parse_size(text: str):
    parts = text.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use N or HxW")
    if len(dims) == 1:
        dims *= 2
    if len(dims) != 2 or min(dims) < 2:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use N or HxW")
    return tuple(dims)


def cmd_tps(args) -> int:
    spec = json.loads(Path(args.theta_json).read_text())
    theta = np.asarray(spec["theta"] if isinstance(spec, dict) else spec, dtype=np.float64)
    if theta.shape != (tps.K, 2):
        log.error("theta must be a 9x2 list of control points, got shape %s", theta.shape)
        return 1
    h, w = args.size
    core.write_flo(tps.tps_to_flow(tps.fit_tps(tps.lattice(), theta), h, w), args.out_flo)
    print(args.out_flo)
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowwarp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic sprite dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=20)
    g.add_argument("--sequences", type=int, default=1)
    g.add_argument("--motion", choices=synthdata.MOTIONS + ("mixed",), default="affine")
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--amplitude", type=float, default=1.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("gradcheck", help="finite-difference check of one operator")
    g.add_argument("--op", choices=sorted(gradcheck.CHECKS), required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    g = sub.add_parser("train", help="train the warping network")
    g.add_argument("--data", required=True)
    g.add_argument("--steps", type=int, default=500)
    g.add_argument("--lambda1", type=float, default=LAMBDA_FTC)
    g.add_argument("--lambda2", type=float, default=LAMBDA_TVL1)
    g.add_argument("--lr", type=float, default=2e-4)
    g.add_argument("--beta1", type=float, default=0.5)
    g.add_argument("--beta2", type=float, default=0.999)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--log", default=None)
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("eval", help="evaluate a model (SSIM, PSNR, TCM)")
    g.add_argument("--model", default=None)
    g.add_argument("--compare-model", default=None)
    g.add_argument("--ground-truth", action="store_true",
                   help="score the ground-truth frames themselves")
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--save-frames", default=None)
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("warp", help="warp an image with a .flo backward flow")
    g.add_argument("--image", required=True)
    g.add_argument("--flow", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_warp)

    g = sub.add_parser("tps", help="write the dense flow of a 3x3 TPS")
    g.add_argument("--theta-json", required=True)
    g.add_argument("--size", type=_parse_size, default=(64, 64))
    g.add_argument("--out-flo", required=True)
    g.set_defaults(func=cmd_tps)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    limiter = _limit_threads()
    try:
        return args.func(args)
    except (core.ContractError, core.FormatError, core.NumericalError, OSError) as exc:
        log.error("%s", exc)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
