"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 capability error,
1 anything else raised by the package.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import CAMPAIGNS, RunConfig, load_config
from .errors import CapabilityError, ConfigError, DataError, RangeError, RelayGuardError

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_CAPABILITY = 0, 1, 2, 3, 4

log = logging.getLogger("relayguard")


def _data(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.data_dir) / name


def _header(cfg: RunConfig, command: str) -> str:
    return f"fingerprint={cfg.fingerprint()} command={command}"


# -- commands -----------------------------------------------------------------


def cmd_build_asset(cfg: RunConfig, args) -> None:
    from .assets import build_reference_asset

    out = Path(args.out or cfg.asset_dir)
    asset = build_reference_asset(out, arch=args.arch, seed=cfg.seed)
    print(f"asset {asset.asset_id} tokenizer {asset.contract_id} -> {out}")


def cmd_generate(cfg: RunConfig, args) -> None:
    from dataclasses import replace

    from .scenarios import generate_batch, generate_tsa_holdout, write_catalog
    from .waveform import write_records

    gen = cfg.generator if args.n is None else replace(cfg.generator, n_scenarios=args.n)
    out = Path(args.out or cfg.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    head = {"fingerprint": cfg.fingerprint(), "generator": gen.to_dict()}
    windows, records = generate_batch(cfg.system, gen, cfg.relay)
    write_catalog(records, out / "catalog.csv", head)
    write_records(windows, out / "windows.jsonl")
    rejected = sum(r.rejected for r in records)
    print(f"{len(records)} scenarios ({rejected} non-tripping draws rejected) -> {out}")
    n_hold = cfg.tsa_holdout_size if args.holdout is None else args.holdout
    if n_hold:
        hw, hr = generate_tsa_holdout(cfg.system, n_hold, seed=cfg.seed + 7919, relay=cfg.relay, tsa_delay_ms=gen.tsa_delay_ms)
        write_catalog(hr, out / "tsa_catalog.csv", head)
        write_records(hw, out / "tsa_holdout.jsonl")
        print(f"{len(hr)} time-stamp + FDIA holdout scenarios -> {out}")


def cmd_build_dataset(cfg: RunConfig, args) -> None:
    from .dataset import SplitSpec, export, ingest, stratified_split, stratified_subset

    src = Path(args.data) if args.data else _data(cfg, "windows.jsonl")
    ds = ingest(src)
    train, test = stratified_split(ds, SplitSpec(cfg.train_fraction, cfg.split_seed))
    if cfg.train_subset:
        train = stratified_subset(train, cfg.train_subset, cfg.split_seed)
    out = Path(args.out or cfg.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    export(train, out / "train.jsonl")
    export(test, out / "test.jsonl")
    meta = {
        "fingerprint": cfg.fingerprint(),
        "source": str(src),
        "source_fingerprint": ds.fingerprint,
        "train": {"n": len(train), "fingerprint": train.fingerprint, "class_counts": train.class_counts},
        "test": {"n": len(test), "fingerprint": test.fingerprint, "class_counts": test.class_counts},
    }
    (out / "split.json").write_text(json.dumps(meta, indent=2))
    print(f"train {len(train)} {train.class_counts}, test {len(test)} {test.class_counts} -> {out}")


def _load_splits(cfg: RunConfig):
    from .dataset import ingest

    train_p, test_p = _data(cfg, "train.jsonl"), _data(cfg, "test.jsonl")
    if not train_p.exists() or not test_p.exists():
        raise DataError(f"no train/test split in {cfg.data_dir}; run build-dataset first")
    return ingest(train_p), ingest(test_p)


def _train_model(cfg: RunConfig, kind: str, train, template):
    from .assets import load_asset
    from .baselines import train_baseline
    from .classifier import train_detector

    if kind.startswith("baseline:"):
        return train_baseline(kind.split(":", 1)[1].upper(), train, None, seed=cfg.train.seed)
    if kind not in ("distilbert", "distilbert-lora", "gpt2-style"):
        raise ConfigError(f"unknown model {kind!r}")
    asset = load_asset(cfg.asset_dir)
    want = "gpt2" if kind == "gpt2-style" else "distilbert"
    if asset.arch != want:
        raise ConfigError(f"model {kind} needs a {want} asset, {cfg.asset_dir} is {asset.arch}")
    lora = cfg.lora if kind == "distilbert-lora" else None
    return train_detector(asset, train, cfg.train, template, lora)


def cmd_train(cfg: RunConfig, args) -> None:
    from .dataset import check_disjoint
    from .textualize import get_template

    train, test = _load_splits(cfg)
    check_disjoint(train, test)
    kind = args.model or "distilbert"
    model = _train_model(cfg, kind, train, get_template(cfg.template))
    name = kind.replace(":", "-").lower() + ("" if kind.startswith("baseline:") else f"-{cfg.template.value.lower()}")
    out = Path(args.out or Path(cfg.models_dir) / name)
    model.save(out)
    (out / "run_config.json").write_text(json.dumps({"fingerprint": cfg.fingerprint(), **cfg.to_dict()}, indent=2))
    print(f"trained {kind} on {len(train)} windows -> {out}")


def load_model(path: str | Path):
    from .baselines import BaselineModel
    from .classifier import ModelBundle

    p = Path(path)
    if (p / "bundle.json").exists():
        return ModelBundle.load(p)
    if (p / "baseline.json").exists():
        return BaselineModel.load(p)
    raise DataError(f"{p} is neither a model bundle nor a baseline directory")


def _model_name(path: str) -> str:
    return Path(path).name


def cmd_evaluate(cfg: RunConfig, args) -> None:
    from . import evaluate as ev
    from .dataset import ingest
    from .textualize import TEMPLATES

    campaign = args.campaign or cfg.campaign
    if campaign not in CAMPAIGNS:
        raise ConfigError(f"campaign must be one of {CAMPAIGNS}")
    out = Path(args.out or cfg.results_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = ev.ResultsStore(out / "results.jsonl")
    fp = cfg.fingerprint()
    head = _header(cfg, f"evaluate --campaign {campaign}")
    models = args.model or []

    if campaign == "prompts":
        kind = models[0] if models else "distilbert"
        train, test = _load_splits(cfg)
        reports = {}
        for tpl in TEMPLATES.values():
            key = f"prompts/{kind}/{tpl.template_id.value}/{fp}"
            rec = store.run_cell(key, lambda: ev.run_main_eval(_train_model(cfg, kind, train, tpl), test)[0].to_dict())
            reports[tpl.template_id] = ev.metrics(ev.ConfusionMatrix(**rec["cm"]))
        ev.write_table(ev.variant_table_rows(reports), out / f"prompts_{kind}.csv", header=head)
        print(f"detection-rate band across templates: {ev.detection_band(reports):.2f} pp")
        return

    if not models:
        raise ConfigError("--model is required for this campaign")
    _, test = _load_splits(cfg)

    if campaign == "main":
        rows = []
        for m in models:
            key = f"main/{_model_name(m)}/{test.fingerprint}/{fp}"
            model = load_model(m)

            def run():
                report, preds = ev.run_main_eval(model, test)
                ev.write_predictions(preds, out / f"predictions_{_model_name(m)}.csv", head)
                return report.to_dict()

            rec = store.run_cell(key, run)
            report = ev.metrics(ev.ConfusionMatrix(**rec["cm"]))
            rows.append(report.row(_model_name(m)))
            print(" ".join(f"{k}={v}" for k, v in rows[-1].items()))
        ev.write_table(rows, out / "main.csv", ev.MAIN_COLUMNS, head)
    elif campaign == "complex":
        holdout = ingest(_data(cfg, "tsa_holdout.jsonl"))
        rows = []
        for m in models:
            key = f"complex/{_model_name(m)}/{holdout.fingerprint}/{fp}"
            model = load_model(m)
            rec = store.run_cell(key, lambda: {"detection_rate": ev.run_complex_attack_eval(model, holdout)[0]})
            rows.append({"Model": _model_name(m), ev.COMPLEX_COLUMNS[1]: f"{rec['detection_rate']:.2f}"})
            print(f"{_model_name(m)} detected {rec['detection_rate']:.2f} % of {len(holdout)} complex attacks")
        ev.write_table(rows, out / "complex.csv", ev.COMPLEX_COLUMNS, head)
    elif campaign == "noise":
        table = {}
        for m in models:
            key = f"noise/{_model_name(m)}/{test.fingerprint}/{fp}"
            model = load_model(m)

            def run():
                t, seeds = ev.run_noise_sweep({"m": model}, test, cfg.snr_list, cfg.noise_seed)
                return {"accuracy": {str(k): v for k, v in t["m"].items()}, "noise_base_seed": cfg.noise_seed}

            rec = store.run_cell(key, run)
            table[_model_name(m)] = {float(k): v for k, v in rec["accuracy"].items()}
        rows = ev.noise_table_rows(table)
        ev.write_table(rows, out / "noise.csv", header=head)
        for r in rows:
            print(" ".join(f"{k}={v}" for k, v in r.items()))
    elif campaign == "latency":
        from .baselines import BaselineModel, features
        from .classifier import predict
        from .textualize import textualize, tokenize

        model = load_model(models[0])
        windows = list(test.windows[: cfg.latency_samples])
        if isinstance(model, BaselineModel):
            rep = ev.bench_latency(model.predict_proba_features, windows, cfg.latency_warmup, lambda w: features([w]))
        else:
            tpl = model.template_id

            def prep(w):
                from .textualize import get_template

                return tokenize(textualize(w, get_template(tpl)), model.tokenizer, contract_id=model.tokenizer_contract_id)

            rep = ev.bench_latency(lambda s: predict(model, s), windows, cfg.latency_warmup, prep)
        ev.write_table([{"model": _model_name(models[0]), **rep.row()}], out / "latency.csv", header=head)
        print(rep.summary())


def cmd_explain(cfg: RunConfig, args) -> None:
    from .explain import explain, export_heatmap
    from .textualize import align_tokens_to_cells, get_template, textualize, tokenize

    if not args.model or not args.sample:
        raise ConfigError("explain needs --model and --sample")
    model = load_model(args.model[0])
    if not hasattr(model, "tokenizer"):
        raise CapabilityError("attention maps need a transformer model bundle")
    window = _find_window(cfg, args.sample)
    doc = textualize(window, get_template(model.template_id))
    sample = tokenize(doc, model.tokenizer, contract_id=model.tokenizer_contract_id)
    amap = explain(model, sample, align_tokens_to_cells(sample, doc))
    out = Path(args.out or Path(cfg.results_dir) / f"attention_{args.sample}.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    img, sidecar = export_heatmap(amap, window, out, fingerprint=cfg.fingerprint())
    top = amap.top_cells(0.1)[:5]
    print(f"top cells (time, channel): {top}; uncovered cells: {len(amap.uncovered)}")
    print(f"-> {img}, {sidecar}")


def _find_window(cfg: RunConfig, scenario_id: str):
    from .dataset import ingest

    for name in ("test.jsonl", "train.jsonl", "windows.jsonl", "tsa_holdout.jsonl"):
        p = _data(cfg, name)
        if p.exists():
            try:
                return ingest(p).by_id(scenario_id)
            except KeyError:
                continue
    raise DataError(f"scenario {scenario_id!r} not found under {cfg.data_dir}")


def cmd_plot(cfg: RunConfig, args) -> None:
    from .explain import export_heatmap, map_from_csv, read_map_fingerprint

    if not args.map or not args.sample:
        raise ConfigError("plot needs --map and --sample")
    amap = map_from_csv(args.map)
    window = _find_window(cfg, args.sample)
    out = Path(args.out or Path(args.map).with_suffix(".png"))
    # keep the producing run's fingerprint so the figure regenerates byte for byte
    img, _ = export_heatmap(amap, window, out, fingerprint=read_map_fingerprint(args.map), sidecar=False)
    print(f"-> {img}")


COMMANDS = {
    "build-asset": cmd_build_asset,
    "generate": cmd_generate,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, help="scenario generation seed")
    common.add_argument("--template", help="BASELINE, V1, V2 or V3")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--data-dir", help="override data_dir")
    common.add_argument("--asset", help="override asset_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="relayguard", description="Attack-vs-fault detection for differential relays.")
    sub = p.add_subparsers(dest="command", required=True)
    a = sub.add_parser("build-asset", parents=[common], help="build the reference encoder asset")
    a.add_argument("--arch", choices=("distilbert", "gpt2"), default="distilbert")
    g = sub.add_parser("generate", parents=[common], help="simulate a scenario batch")
    g.add_argument("--n", type=int, help="number of scenarios")
    g.add_argument("--holdout", type=int, help="time-stamp + FDIA holdout size (0 to skip)")
    d = sub.add_parser("build-dataset", parents=[common], help="ingest and split windows")
    d.add_argument("--data", help="RECORDS or CSV file to ingest")
    t = sub.add_parser("train", parents=[common], help="train a detector")
    t.add_argument("--model", help="distilbert | distilbert-lora | gpt2-style | baseline:<kind>")
    e = sub.add_parser("evaluate", parents=[common], help="run an evaluation campaign")
    e.add_argument("--campaign", choices=CAMPAIGNS)
    e.add_argument("--model", action="append", help="model directory (repeatable); a model kind for prompts")
    e.add_argument("--snr", type=float, nargs="+", help="SNR levels in dB")
    x = sub.add_parser("explain", parents=[common], help="attention heatmap for one window")
    x.add_argument("--model", action="append")
    x.add_argument("--sample", help="scenario id")
    pl = sub.add_parser("plot", parents=[common], help="redraw a heatmap from a stored map CSV")
    pl.add_argument("--map", help="map CSV written by explain")
    pl.add_argument("--sample", help="scenario id")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(
            seed=args.seed,
            template=args.template,
            snr_list=getattr(args, "snr", None),
            data_dir=args.data_dir,
            asset_dir=args.asset,
            campaign=getattr(args, "campaign", None),
        )
        print(f"config fingerprint {cfg.fingerprint()}", flush=True)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, RangeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CapabilityError as exc:
        print(f"capability error: {exc}", file=sys.stderr)
        return EXIT_CAPABILITY
    except RelayGuardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
