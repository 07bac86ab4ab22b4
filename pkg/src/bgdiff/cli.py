"""Command-line entry point: ``bgdiff <subcommand> ...``.

Settings resolve in increasing precedence: built-in defaults, ``--preset``,
the ``--config`` JSON file, then individual flags. Every output directory
receives ``config.json`` holding the resolved settings.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .core.checkpoint import load_checkpoint, save_checkpoint
from .data import build_pairs, load_arrays, load_manifest, read_image, read_mask, synthesize_corpus, write_image
from .errors import ConfigurationError, ManifestError, ShapeError
from .evaluation import (
    FeatureExtractor, cluster_metrics, copy_paste_score, cosine_similarity_100, fid_from_features, report_to_json,
    run_ablation_suite, train_extractor,
)
from .experiments import EXPERIMENTS, ExperimentConfig, preset, reproduce
from .inference import PRESERVE_MODES, SampleRequest, batch_generate, generate_batch
from .perturb import fill_margin, perturb_background
from .training import STAGES, TrainConfig, train

log = logging.getLogger("bgdiff")

METRICS = ("fid", "sim", "cluster", "copypaste", "ablation")


class UsageError(Exception):
    """Invalid combination of arguments; maps to exit code 2."""


# ---------------------------------------------------------------- config resolution


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) and k != "model" else v
    if "model" in over and isinstance(base.get("model"), dict):
        out["model"] = {**base["model"], **over["model"]}
    return out


def resolve_config(args, overrides: dict | None = None) -> ExperimentConfig:
    base = preset(getattr(args, "preset", None) or "desk").to_dict()
    if getattr(args, "config", None):
        with open(args.config) as fh:
            user = json.load(fh)
        ExperimentConfig.from_dict(user)  # reject unknown keys before merging
        base = _merge(base, user)
    if getattr(args, "seed", None) is not None:
        base["seed"] = args.seed
    if overrides:
        base = _merge(base, overrides)
    return ExperimentConfig.from_dict(base)


def _echo(cfg: ExperimentConfig, out: Path, extra: dict | None = None):
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")
    if extra:
        (out / "invocation.json").write_text(json.dumps(extra, indent=1, sort_keys=True, default=str) + "\n")


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


# ---------------------------------------------------------------- subcommands


def cmd_synth_data(args) -> int:
    ds = _drop_none({"num_categories": args.num_categories, "records_per_category": args.records_per_category,
                     "image_size": args.image_size, "seed": args.data_seed})
    cfg = resolve_config(args, {"dataset": ds} if ds else None)
    out = Path(args.out)
    manifest = synthesize_corpus(cfg.dataset, out)
    cfg.dump(out / "config.json")
    print(f"wrote {len(manifest.records)} records to {out / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    manifest = load_manifest(args.manifest)
    tr = cfg.training
    perturb = cfg.perturbation
    if args.no_perturb:
        perturb = replace(perturb, enable_dilation=False, enable_fill=False, enable_mixup=False)
    default_steps = tr.backbone_steps if args.stage == "backbone" else tr.branch_steps
    tc = TrainConfig(stage=args.stage, steps=args.steps or default_steps, batch_size=args.batch_size or tr.batch_size,
                     learning_rate=args.lr or tr.learning_rate, seed=cfg.seed, perturb=perturb, joint=args.joint,
                     save_every=args.save_every)
    if args.stage == "backbone" and (args.init or args.resume) is None:
        model_cfg = cfg.model_config(**_drop_none({"prompt_mode": args.prompt_mode, "cg_attention": args.cg_attention}))
    else:
        model_cfg = cfg.model_config()
    init = load_checkpoint(args.init) if args.init else None
    if init is not None and args.cg_attention and args.cg_attention != init.model.config.cg_attention:
        init = replace(init, model=init.model.with_cg_attention(args.cg_attention))
    out = Path(args.out)
    _echo(cfg, out, {"command": "train", "train_config": tc.to_dict(), "init": args.init, "resume": args.resume,
                     "manifest": args.manifest})
    ckpt = train(tc, manifest, init=init, resume=args.resume, model_config=model_cfg, out_dir=out)
    save_checkpoint(out / "checkpoint.bgd", ckpt)
    print(f"stage {args.stage}: {ckpt.step} steps, final loss {ckpt.losses[-1]:.5f}; "
          f"checkpoint {out / 'checkpoint.bgd'}")
    return 0


def _category_id(value: str, names) -> int:
    if value.isdigit():
        return int(value)
    if value not in names:
        raise UsageError(f"unknown category {value!r}; known: {names}")
    return names.index(value)


def _use_pg(flag: str):
    return {"auto": None, "on": True, "off": False}[flag]


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    inf = cfg.inference
    steps = args.steps or inf.steps
    mode = args.preserve_mode or inf.preserve_mode
    use_pg = _use_pg(args.pg)
    single = args.product is not None
    if single == (args.manifest is not None):
        raise UsageError("give either --product/--mask or --manifest/--split")
    if single and (args.mask is None or args.category is None):
        raise UsageError("--product needs --mask and --category")
    if single and use_pg and args.reference is None:
        raise UsageError("--pg on requires --reference")
    ckpt = load_checkpoint(args.checkpoint)
    if use_pg and "cg_pg" not in ckpt.stages:
        raise UsageError("--pg on requires a checkpoint trained through the cg_pg stage")
    out = Path(args.out)
    _echo(cfg, out, {"command": "generate", "checkpoint": args.checkpoint, "args": vars(args)})
    requests, names = [], []
    if single:
        ref = read_image(args.reference) if args.reference else None
        ref_mask = read_mask(args.reference_mask) if args.reference_mask else None
        requests.append(SampleRequest(read_image(args.product), read_mask(args.mask),
                                      _category_id(args.category, ckpt.model.category_names), ref, ref_mask,
                                      steps=steps, seed=cfg.seed, preserve_mode=mode, use_pg=use_pg,
                                      reference_init=not args.no_reference_init, eta=inf.eta))
        names.append(Path(args.product).stem)
    else:
        manifest = load_manifest(args.manifest)
        if args.split == "eval_pairs":
            pairs, _ = build_pairs(manifest, seed=cfg.evaluation.pair_seed)
            prod = load_arrays(manifest, record_ids=[p.product_record_id for p in pairs])
            ref = load_arrays(manifest, record_ids=[p.reference_record_id for p in pairs])
        else:
            prod, ref = load_arrays(manifest, args.split), None
        limit = len(prod) if args.limit is None else min(args.limit, len(prod))
        for i in range(limit):
            requests.append(SampleRequest(
                prod.images[i], prod.masks[i], int(prod.category_ids[i]),
                None if ref is None else ref.images[i], None if ref is None else ref.masks[i],
                steps=steps, seed=cfg.seed * 1_000_003 + i, preserve_mode=mode, use_pg=use_pg,
                reference_init=not args.no_reference_init, eta=inf.eta))
            names.append(prod.record_ids[i])
    if args.batched:
        images = generate_batch(requests, ckpt)
        prov = [{"index": i, **r.describe(), "status": "ok"} for i, r in enumerate(requests)]
    else:
        images, prov = batch_generate(requests, ckpt)
    for name, img, entry in zip(names, images, prov):
        entry["name"] = name
        if img is not None:
            write_image(out / f"{name}.png", img)
            entry["file"] = f"{name}.png"
    sidecar = {"checkpoint": str(args.checkpoint), "stages": ckpt.stages, "requests": prov}
    (out / "provenance.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    failed = sum(e["status"] != "ok" for e in prov)
    print(f"generated {len(prov) - failed}/{len(prov)} images into {out}")
    return 1 if failed else 0


def _load_generated(gen_dir: Path, manifest):
    ids = sorted(p.stem for p in gen_dir.glob("*.png"))
    if not ids:
        raise UsageError(f"no generated PNGs in {gen_dir}")
    unknown = [i for i in ids if i not in {r["record_id"] for r in manifest.records}]
    if unknown:
        raise UsageError(f"generated files do not match manifest record ids: {unknown[:3]}")
    prod = load_arrays(manifest, record_ids=ids)
    gen = np.stack([read_image(gen_dir / f"{i}.png") for i in ids])
    return ids, gen, prod


def _pair_arrays(manifest, ids, seed):
    pairs, _ = build_pairs(manifest, seed=seed)
    ref_of = {p.product_record_id: p.reference_record_id for p in pairs}
    missing = [i for i in ids if i not in ref_of]
    if missing:
        raise UsageError(f"records without a pair reference: {missing[:3]}")
    return load_arrays(manifest, record_ids=[ref_of[i] for i in ids])


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    manifest = load_manifest(args.manifest)
    if args.extractor and Path(args.extractor).exists():
        extractor = FeatureExtractor.load(args.extractor)
    else:
        ev = cfg.evaluation
        extractor = train_extractor(manifest, seed=ev.extractor_seed, steps=ev.extractor_steps)
        if args.extractor:
            extractor.save(args.extractor)
    gen_dir = Path(args.generated_dir)
    report = {"metric": args.metric, "extractor_accuracy": extractor.accuracy,
              "metric_notes": "background-only pixels; similarity is 100 x cosine averaged over pairs"}
    if args.metric == "ablation":
        rows = {}
        data = None
        for row in "abcd":
            if not (gen_dir / row).is_dir():
                continue
            ids, gen, prod = _load_generated(gen_dir / row, manifest)
            ref = _pair_arrays(manifest, ids, cfg.evaluation.pair_seed)
            data = data or {"product_masks": prod.masks, "references": ref.images, "reference_masks": ref.masks,
                            "originals": prod.images, "ids": ids}
            if ids != data["ids"]:
                raise UsageError(f"row {row} covers different records than the other rows")
            rows[row] = gen
        if data is None:
            raise UsageError(f"{gen_dir} has no row subdirectories a, b, c or d")
        if len(data["ids"]) < extractor.dim + 1:
            raise UsageError(f"FID needs at least {extractor.dim + 1} images per row, found {len(data['ids'])}")
        report.update(run_ablation_suite(rows, extractor, data))
    else:
        ids, gen, prod = _load_generated(gen_dir, manifest)
        report["n"] = len(ids)
        eg = extractor.embed(gen, prod.masks)
        if args.metric == "fid":
            if len(ids) < extractor.dim + 1:
                raise UsageError(f"FID needs at least {extractor.dim + 1} generated images, found {len(ids)}")
            report["fid"] = fid_from_features(eg, extractor.embed(prod.images, prod.masks))
        elif args.metric == "cluster":
            report["cluster"] = cluster_metrics(eg, prod.category_ids)
            report["accuracy"] = float((extractor.classify(gen, prod.masks) == prod.category_ids).mean())
        else:
            ref = _pair_arrays(manifest, ids, cfg.evaluation.pair_seed)
            if args.metric == "sim":
                sims = cosine_similarity_100(eg, extractor.embed(ref.images, ref.masks))
                report["similarity"] = float(sims.mean())
                report["per_item"] = dict(zip(ids, map(float, sims)))
            else:
                cps = [copy_paste_score(g, r, np.maximum(pm, rm))
                       for g, r, pm, rm in zip(gen, ref.images, prod.masks, ref.masks)]
                report["identical_fraction"] = float(np.mean([c["identical_fraction"] for c in cps]))
                report["pixel_mse"] = float(np.mean([c["pixel_mse"] for c in cps]))
    out = Path(args.out_report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report_to_json(report))
    cfg.dump(out.parent / "config.json")
    print(report_to_json({k: v for k, v in report.items() if k != "per_item"}), end="")
    return 0


def cmd_perturb_preview(args) -> int:
    cfg = resolve_config(args)
    manifest = load_manifest(args.manifest)
    train_ids = manifest.split("train")
    rid = args.record or train_ids[0]
    record = manifest.load_record(rid)
    rng = np.random.default_rng([cfg.seed, 0x9E])
    partner_id = args.partner or next(i for i in train_ids if i != rid)
    partner = manifest.load_record(partner_id)
    params = cfg.perturbation
    if args.dilation_radius is not None:
        params = replace(params, dilation_radius=args.dilation_radius)
    result = perturb_background(record, partner.image, params, rng)
    m_aug = result["mask_aug"]
    filled = fill_margin(record.image, record.mask, m_aug)
    tiles = [record.image, np.repeat(m_aug[..., None].astype(np.float32), 3, -1), filled, partner.image,
             result["pg_input"]]
    grid = np.concatenate(tiles, axis=1)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_image(out, grid)
    cfg.dump(out.with_suffix(".config.json"))
    meta = {"record": rid, "partner": partner_id, "sigma": result["sigma_used"], "params": asdict(params),
            "tiles": ["original", "dilated_mask", "margin_filled", "mixup_partner", "pg_input"]}
    out.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True, default=list) + "\n")
    print(f"wrote {out} (sigma={result['sigma_used']:.3f})")
    return 0


def cmd_reproduce(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out or cfg.output_dir)
    report = reproduce(args.experiment, cfg, out_dir=out, cache_dir=args.cache_dir)
    print(json.dumps({"experiment": args.experiment, "checks": report.get("checks", {})}, sort_keys=True))
    print(f"report: {out / 'report.json'}")
    return 0


# ---------------------------------------------------------------- parser


def _common(p, seed=True):
    p.add_argument("--config", help="experiment config JSON (partial configs are merged onto the preset)")
    p.add_argument("--preset", choices=("desk", "smoke"), default=None, help="base settings (default: desk)")
    if seed:
        p.add_argument("--seed", type=int, default=None, help="global seed (overrides config)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bgdiff", description="Product background generation with category "
                                     "and reference conditioning branches.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic product-ad corpus")
    _common(p)
    p.add_argument("--out", required=True, help="output directory for images, masks and manifest.json")
    p.add_argument("--num-categories", type=int, default=None)
    p.add_argument("--records-per-category", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--data-seed", type=int, default=None, help="corpus seed (default: from config)")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="run one training stage")
    _common(p)
    p.add_argument("--stage", choices=STAGES, required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory (checkpoint.bgd, train_log.jsonl)")
    p.add_argument("--init", help="checkpoint from the previous stage")
    p.add_argument("--resume", help="checkpoint of this stage to continue")
    p.add_argument("--steps", type=int, default=None, help="total steps for the stage")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--save-every", type=int, default=0, help="periodic checkpoint interval (0: final only)")
    p.add_argument("--joint", action="store_true", help="train the backbone with the branches")
    p.add_argument("--no-perturb", action="store_true", help="disable background perturbation in cg_pg")
    p.add_argument("--cg-attention", choices=("masked", "standard"), default=None)
    p.add_argument("--prompt-mode", choices=("category", "shared"), default=None, help="backbone stage only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate backgrounds around products")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--product", help="product image PNG")
    p.add_argument("--mask", help="product mask PNG (white = product)")
    p.add_argument("--category", help="category id or name")
    p.add_argument("--reference", help="reference ad image PNG")
    p.add_argument("--reference-mask", help="reference product mask PNG")
    p.add_argument("--manifest", help="generate for a whole split instead of one product")
    p.add_argument("--split", choices=("train", "eval_bg1k", "eval_pairs"), default="eval_bg1k")
    p.add_argument("--limit", type=int, default=None, help="cap on records when using --manifest")
    p.add_argument("--pg", choices=("auto", "on", "off"), default="auto", help="reference branch usage")
    p.add_argument("--no-reference-init", action="store_true", help="start from pure noise")
    p.add_argument("--steps", type=int, default=None, help="sampling steps")
    p.add_argument("--preserve-mode", choices=PRESERVE_MODES, default=None)
    p.add_argument("--batched", action="store_true", help="sample all requests in one batch")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generated images")
    _common(p)
    p.add_argument("--metric", choices=METRICS, required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--generated-dir", required=True,
                   help="PNGs named <record_id>.png (ablation: subdirectories a/ b/ c/ d/)")
    p.add_argument("--extractor", help="extractor file; trained and saved here when missing")
    p.add_argument("--out-report", required=True, help="JSON report path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("perturb-preview", help="write a PNG strip of the perturbation stages for one record")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--record", help="record id (default: first training record)")
    p.add_argument("--partner", help="mixup partner record id")
    p.add_argument("--dilation-radius", type=int, default=None)
    p.set_defaults(func=cmd_perturb_preview)

    p = sub.add_parser("reproduce", help="run a registered experiment end to end")
    _common(p)
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--cache-dir", help="checkpoint/corpus cache shared between runs (default: <out>/cache)")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, ShapeError, ManifestError, json.JSONDecodeError) as exc:
        print(f"bgdiff {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"bgdiff {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # any other failure is a runtime failure
        log.debug("traceback", exc_info=True)
        print(f"bgdiff {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
