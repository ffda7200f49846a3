"""Command-line surface: dataset generation, training, evaluation, sweeps."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .data import dataset_id, generate_dataset
from .evaluation import (export_predictions, export_report_csv, export_report_json,
                         harmony_report, ingest_ground_truths, ingest_predictions,
                         map_coco)
from .harness import (RunConfig, RunRecord, export_plot_data, run_config_from_file,
                      run_dir_for, sweep, sweep_config_from_file, train_fp32,
                      train_qat, write_sweep_csv)


def _cmd_gen_data(args):
    scenes = generate_dataset(args.seed, args.n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out / "images.npz",
                        images=np.stack([s.image for s in scenes]))
    gts = [{"image_id": s.scene_id,
            "detections": [{"box": [g.box.x1, g.box.y1, g.box.x2, g.box.y2],
                            "class_id": g.class_id} for g in s.gts]}
           for s in scenes]
    with open(out / "ground_truths.json", "w") as f:
        json.dump(gts, f, indent=1)
    print(f"wrote {len(scenes)} scenes ({dataset_id(args.seed, args.n)}) to {out}")


def _cmd_train(args):
    cfg = run_config_from_file(args.config)
    rec = train_fp32(cfg)
    print(f"fp32 run {cfg.hash()} finished: mAP={rec.ap['mAP']:.4f} "
          f"AP50={rec.ap['AP50']:.4f} AP75={rec.ap['AP75']:.4f} "
          f"({rec.wall_time_s:.1f}s) -> {run_dir_for(cfg)}")


def _cmd_qat(args):
    cfg = run_config_from_file(args.config)
    rec = train_qat(cfg, args.init_weights)
    print(f"qat run {cfg.hash()} finished: mAP={rec.ap['mAP']:.4f} "
          f"AP50={rec.ap['AP50']:.4f} AP75={rec.ap['AP75']:.4f} "
          f"({rec.wall_time_s:.1f}s) -> {run_dir_for(cfg)}")


def _cmd_eval(args):
    from .data import generate_scene
    cfg = RunConfig()
    if args.config:
        cfg = run_config_from_file(args.config)
    arrays, quant = harness.load_weights(args.weights)
    from .detector import DetectorNet
    net = DetectorNet()
    harness.apply_weight_arrays(net, arrays)
    if quant:
        harness.apply_bit_policy(net, cfg.bit_policy())
        harness.restore_quant_state(net, quant)
    seed, n = args.data_seed, args.data_n
    scenes = generate_dataset(seed, n)
    ap, report = harness.evaluate(net, scenes, dataset_name=dataset_id(seed, n))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ap.json", "w") as f:
        json.dump(ap.to_dict(), f, indent=1)
    export_report_json(report, out / "harmony.json")
    export_report_csv(report, out / "harmony.csv")
    print(f"mAP={ap.mAP:.4f} AP50={ap.ap50:.4f} AP75={ap.ap75:.4f} "
          f"TPs={report.tp_count} -> {out}")


def _cmd_sweep(args):
    sweep_cfg = sweep_config_from_file(args.config)
    rows = sweep(sweep_cfg)
    out = Path(sweep_cfg.base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out / "sweep.csv")
    failed = [r for r in rows if r.get("error")]
    print(f"sweep finished: {len(rows)} cells, {len(failed)} failed -> {out / 'sweep.csv'}")


def _cmd_analyze(args):
    preds = ingest_predictions(args.pred)
    gts = ingest_ground_truths(args.gt)
    image_ids = sorted(gts)
    dets_per_image = [preds.get(i, []) for i in image_ids]
    gts_per_image = [gts[i] for i in image_ids]
    ap = map_coco(dets_per_image, gts_per_image)
    report = harmony_report(dets_per_image, gts_per_image, dataset_id=args.gt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ap.json", "w") as f:
        json.dump(ap.to_dict(), f, indent=1)
    export_report_json(report, out / "harmony.json")
    export_report_csv(report, out / "harmony.csv")
    print(f"mAP={ap.mAP:.4f} AP50={ap.ap50:.4f} AP75={ap.ap75:.4f} "
          f"TPs={report.tp_count} -> {out}")


def _cmd_export_plots(args):
    records = []
    for rdir in args.records:
        rdir = Path(rdir)
        with open(rdir / "config.json") as f:
            cfg = RunConfig(**json.load(f))
        with open(rdir / "record.json") as f:
            rec = RunRecord.from_dict(json.load(f))
        records.append((cfg, rec))
    if not records:
        print("no run directories given", file=sys.stderr)
        return 1
    export_plot_data(records, args.out)
    print(f"exported plot data for {len(records)} runs -> {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="harmonyqat",
                                     description="QAT laboratory for harmony-aware detector training")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="FP32 pretraining")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("qat", help="QAT fine-tuning from FP32 weights")
    p.add_argument("--config", required=True)
    p.add_argument("--init-weights", required=True)
    p.set_defaults(fn=_cmd_qat)

    p = sub.add_parser("eval", help="evaluate saved weights on a generated dataset")
    p.add_argument("--weights", required=True)
    p.add_argument("--config", default=None,
                   help="run config (needed to rebuild the quantized graph)")
    p.add_argument("--data-seed", type=int, default=10_000)
    p.add_argument("--data-n", type=int, default=500)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("sweep", help="run a bit-width x mode x seed grid")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("analyze", help="metrics + harmony report for external prediction files")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_analyze)

    p = sub.add_parser("export-plots", help="export figure data from run directories")
    p.add_argument("--records", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_export_plots)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args) or 0


if __name__ == "__main__":
    raise SystemExit(main())
