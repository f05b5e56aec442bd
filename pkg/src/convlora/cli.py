"""Command-line entry point: ``convlora <command> ...``.

Every command that writes a directory builds it in a temporary sibling and
promotes it only on success, and leaves ``config.json`` (the effective
configuration) next to its artifacts.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .checkpoint import AdapterCheckpoint, file_sha256, load_adapted, load_base, save_base
from .config import ConfigError, RunConfig
from .data import generate_domain_suite, list_domains, read_domain, write_suite
from .metrics import format_records, mean_std, param_report
from .pipeline import AdaptSpec, adapt_target, evaluate, pretrain_source, train_esh
from .unet import NAMED_CONFIGS, InjectionSelector, Phase, apply_freeze_policy, build_model, inject_convlora, merge_adapters

log = logging.getLogger("convlora")

# (selector, adabn, label) columns of the placement ablation
PLACEMENTS = (
    ("1", False, "blocks1"),
    ("1-2", False, "blocks1-2"),
    ("1-3", False, "blocks1-3"),
    ("all", False, "all"),
    ("all", True, "all+adabn"),
)


def worker_count() -> int:
    raw = os.environ.get("CONVLORA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CONVLORA_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CONVLORA_THREADS must be a positive integer, got {raw!r}")
    return n


@contextlib.contextmanager
def staged_dir(out):
    """Yield a temp directory that replaces (or merges into) ``out`` on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}.tmp-"))
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    if not out.exists():
        os.replace(stage, out)
        return
    for src in sorted(p for p in stage.rglob("*") if p.is_file()):
        dst = out / src.relative_to(stage)
        dst.parent.mkdir(parents=True, exist_ok=True)
        os.replace(src, dst)
    shutil.rmtree(stage, ignore_errors=True)


def _write_run_files(stage: Path, cfg: RunConfig, lines=None, log_name="train.log"):
    (stage / "config.json").write_text(cfg.to_json())
    if lines is not None:
        (stage / log_name).write_text("".join(line + "\n" for line in lines))


def _source_domain(root) -> str:
    for domain_id, role in list_domains(root):
        if role == "source":
            return domain_id
    raise ConfigError(f"{root} has no source domain")


def _target_domains(root) -> list[str]:
    return [d for d, role in list_domains(root) if role == "target"]


def _tee(lines):
    """Collect log lines; per-step lines already go to the debug log."""

    def emit(line):
        lines.append(line)
        if " step=" not in line:
            log.info(line)

    return emit


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig):
    cfg.override("data", seed=args.seed, size=args.size, n_train=args.n_train, n_test=args.n_test)
    d = cfg.data
    suite = generate_domain_suite(d.seed, d.n_train, d.n_test, d.size, specs=cfg.domains)
    with staged_dir(args.out) as stage:
        write_suite(stage, suite, {s.domain_id: s for s in cfg.domains})
        _write_run_files(stage, cfg)
    counts = ", ".join(f"{k}={sum(len(v) for v in s.values())}" for k, s in suite.items())
    log.info(f"gen-data out={args.out} {counts}")


def _set_model(cfg: RunConfig, name):
    if name is not None:
        cfg.model = NAMED_CONFIGS[name]()


def cmd_pretrain(args, cfg: RunConfig):
    _set_model(cfg, args.model)
    cfg.override("pretrain", epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    source = read_domain(args.data, _source_domain(args.data))
    model = build_model(cfg.model, cfg.pretrain.seed)
    lines = []
    pretrain_source(model, source["train"], cfg.pretrain, logfn=_tee(lines))
    if source.get("val"):
        sds, _ = evaluate(model, source["val"], args.tolerance).mean_std()
        _tee(lines)(f"pretrain val_sds={sds:.6f}")
    with staged_dir(args.out) as stage:
        sha = save_base(stage / "base.clra", model, seed=cfg.pretrain.seed, extra={"phase": "pretrain"})
        _write_run_files(stage, cfg, lines)
    log.info(f"pretrain base={Path(args.out) / 'base.clra'} sha256={sha}")


def cmd_train_esh(args, cfg: RunConfig):
    cfg.override("esh", epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    model, meta, _ = load_base(args.base)
    source = read_domain(args.data, _source_domain(args.data))
    lines = []
    train_esh(model, source["train"], cfg.esh, logfn=_tee(lines))
    if source.get("val"):
        full, _ = evaluate(model, source["val"], args.tolerance).mean_std()
        esh, _ = evaluate(model, source["val"], args.tolerance, head="esh").mean_std()
        _tee(lines)(f"esh val_sds_full={full:.6f} val_sds_esh={esh:.6f}")
    cfg.model = model.config
    with staged_dir(args.out) as stage:
        sha = save_base(stage / "base.clra", model, seed=meta.get("seed"), extra={"phase": "esh"})
        _write_run_files(stage, cfg, lines)
    log.info(f"train-esh base={Path(args.out) / 'base.clra'} sha256={sha}")


def _adapt_job(job):
    """One (domain, placement, seed) adaptation; runs in a worker process or inline."""
    base_path, data_root, domain, spec_kwargs, out_path, eval_split, tolerance = job
    spec = AdaptSpec(**spec_kwargs)
    model, _, sha = load_base(base_path)
    model.reset_bn()
    samples = read_domain(data_root, domain)
    lines = []
    ckpt = adapt_target(model, samples["train"], spec, domain, sha, logfn=lines.append)
    ckpt.save(out_path)
    sds = None
    if eval_split is not None:
        sds, _ = evaluate(model, samples[eval_split], tolerance).mean_std()
    return lines, sds


def _run_jobs(jobs):
    workers = min(worker_count(), len(jobs))
    if workers <= 1:
        return [_adapt_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_adapt_job, jobs))


def _matrix_table(results, domains, seeds, tolerance) -> str:
    labels = [p[2] for p in PLACEMENTS]
    width = max(12, max(len(d) for d in domains) + 2)
    out = [f"# surface dice mean+-std over {len(seeds)} seeds, tolerance={tolerance:g}px, split=test"]
    out.append("domain".ljust(width) + "".join(lab.rjust(18) for lab in labels))
    col_means = {lab: [] for lab in labels}
    for d in domains:
        row = d.ljust(width)
        for lab in labels:
            m, s = mean_std(results[(d, lab)])
            col_means[lab].append(m)
            row += f"{m:.4f}+-{s:.4f}".rjust(18)
        out.append(row)
    means = {lab: float(np.mean(v)) for lab, v in col_means.items()}
    out.append("mean".ljust(width) + "".join(f"{means[lab]:.4f}".rjust(18) for lab in labels))
    best = max(labels, key=lambda lab: (means[lab], -labels.index(lab)))
    out.append(f"best {best}")
    return "\n".join(out) + "\n"


def cmd_adapt(args, cfg: RunConfig):
    cfg.override(
        "adapt",
        epochs=args.epochs,
        lr=args.lr,
        rank=args.rank,
        target_sample_count=args.target_samples,
        selector=args.blocks,
        adabn=None if args.adabn is None else args.adabn == "on",
        adabn_momentum=args.momentum,
        full_pass=True if args.full_pass else None,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    base_path = Path(args.base)
    base_sha = file_sha256(base_path)
    domains = args.target_domain or _target_domains(args.data)
    seeds = [cfg.adapt.seed + k for k in range(args.seeds)]
    placements = PLACEMENTS if args.matrix else ((cfg.adapt.selector, cfg.adapt.adabn, None),)
    depth = load_base(base_path)[0].config.depth
    with staged_dir(args.out) as stage:
        jobs, keys = [], []
        for selector, adabn, label in placements:
            InjectionSelector.parse(selector, depth)
            for d in domains:
                for s in seeds:
                    spec = {**asdict(cfg.adapt), "selector": selector, "adabn": adabn, "seed": s}
                    rel = Path(label or "", d, f"seed{s}.clra")
                    (stage / rel).parent.mkdir(parents=True, exist_ok=True)
                    split = "test" if args.matrix else None
                    jobs.append((str(base_path), str(args.data), d, spec, str(stage / rel), split, args.tolerance))
                    keys.append((d, label, s, rel))
        results = _run_jobs(jobs)
        lines, table = [], {}
        for (d, label, s, rel), (job_lines, sds) in zip(keys, results):
            lines.extend(job_lines)
            if sds is not None:
                table.setdefault((d, label), []).append(sds)
                lines.append(f"result domain={d} placement={label} seed={s} sds={sds:.6f}")
            lines.append(f"checkpoint {rel.as_posix()} sha256={file_sha256(stage / rel)}")
        if file_sha256(base_path) != base_sha:
            raise RuntimeError(f"base checkpoint {base_path} changed during adaptation")
        _write_run_files(stage, cfg, lines, "adapt.log")
        if args.matrix:
            text = _matrix_table(table, domains, seeds, args.tolerance)
            (stage / "matrix.txt").write_text(text)
            sys.stdout.write(text)
    log.info(f"adapt out={args.out} runs={len(jobs)}")


def cmd_eval(args, cfg: RunConfig):
    runs = []
    if args.adapter:
        for path in args.adapter:
            model, ckpt = load_adapted(args.base, path)
            runs.append((model, [ckpt.domain_id], f"seed={ckpt.seed}"))
    else:
        model, meta, _ = load_base(args.base)
        tag = "model=merged" if meta.get("phase") == "merged" else "model=base"
        runs.append((model, args.domain or [d for d, _ in list_domains(args.data)], tag))
    text = []
    per_domain_seed_means: dict[str, list[float]] = {}
    for model, domains, tag in runs:
        apply_freeze_policy(model, Phase.EVAL)
        for d in domains:
            if args.domain and d not in args.domain:
                continue
            samples = read_domain(args.data, d)
            split = args.split if args.split in samples else "test"
            result = evaluate(model, samples[split], args.tolerance, head=args.head)
            text.append(format_records(result.records, tag=tag))
            per_domain_seed_means.setdefault(d, []).append(result.mean_std()[0])
    if args.adapter and len(args.adapter) > 1:
        rows = []
        for d, vals in sorted(per_domain_seed_means.items()):
            m, s = mean_std(vals)
            rows.append(f"summary domain={d} seeds={len(vals)} sds_mean={m:.6f} sds_std={s:.6f}")
        text.append("\n".join(rows) + "\n")
    report = "".join(text)
    with staged_dir(args.out) as stage:
        (stage / "report.txt").write_text(report)
        _write_run_files(stage, cfg)
    sys.stdout.write("".join(line + "\n" for line in report.splitlines() if line.startswith("summary")))


def cmd_merge(args, cfg: RunConfig):
    model, meta, sha = load_base(args.base)
    ckpt = AdapterCheckpoint.load(args.adapter)
    ckpt.apply(model, sha)
    merge_adapters(model)
    extra = {"phase": "merged", "domain_id": ckpt.domain_id, "adapter_sha256": file_sha256(args.adapter)}
    sha = save_base(args.out, model, seed=meta.get("seed"), extra=extra)
    log.info(f"merge out={args.out} sha256={sha}")


def cmd_params(args, cfg: RunConfig):
    if args.base:
        model, _, _ = load_base(args.base)
    else:
        _set_model(cfg, args.model)
        model = build_model(cfg.model, 0)
    phase = Phase.EVAL
    if args.adapter_spec:
        try:
            rank_text, blocks = args.adapter_spec.split(",", 1)
            rank = int(rank_text)
        except ValueError:
            raise ConfigError(f"--adapter-spec expects 'rank,blocks', got {args.adapter_spec!r}") from None
        inject_convlora(model, blocks, rank)
        phase = Phase.ADAPT
    apply_freeze_policy(model, phase)
    report = param_report(model, include_esh=args.include_esh)
    sys.stdout.write(report.format() + "\n")


# -- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="convlora", description="ConvLoRA + AdaBN multi-target adaptation for a 2D U-Net")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-step lines to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON run configuration")
        if data:
            sp.add_argument("--data", required=True, help="dataset root written by gen-data")
        return sp

    g = common(sub.add_parser("gen-data", help="write the synthetic domain suite"), data=False)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.set_defaults(func=cmd_gen_data)

    g = common(sub.add_parser("pretrain", help="supervised source training of the U-Net"))
    g.add_argument("--out", required=True)
    g.add_argument("--model", choices=sorted(NAMED_CONFIGS))
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--tolerance", type=float, default=1.0)
    g.set_defaults(func=cmd_pretrain)

    g = common(sub.add_parser("train-esh", help="train the early segmentation head on source"))
    g.add_argument("--base", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--tolerance", type=float, default=1.0)
    g.set_defaults(func=cmd_train_esh)

    g = common(sub.add_parser("adapt", help="adapt ConvLoRA factors (and BN statistics) to target domains"))
    g.add_argument("--base", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--target-domain", nargs="+", help="default: every target domain in the dataset")
    g.add_argument("--rank", type=int)
    g.add_argument("--blocks", help="encoder blocks to inject: 1, 1-2, 1-3, all, or a comma list")
    g.add_argument("--adabn", choices=("on", "off"))
    g.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds")
    g.add_argument("--seed", type=int, help="first seed")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--target-samples", type=int)
    g.add_argument("--momentum", type=float)
    g.add_argument("--full-pass", action="store_true", help="exact per-epoch target statistics instead of EMA")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--matrix", action="store_true", help="run every placement and write matrix.txt")
    g.add_argument("--tolerance", type=float, default=1.0)
    g.set_defaults(func=cmd_adapt)

    g = common(sub.add_parser("eval", help="surface and volumetric Dice report"))
    g.add_argument("--base", required=True)
    g.add_argument("--adapter", nargs="*", help="adapter checkpoints; several seeds are aggregated")
    g.add_argument("--domain", nargs="+")
    g.add_argument("--split", default="test")
    g.add_argument("--head", choices=("full", "esh"), default="full")
    g.add_argument("--tolerance", type=float, default=1.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_eval)

    g = common(sub.add_parser("merge", help="fold an adapter into a standalone checkpoint"), data=False)
    g.add_argument("--base", required=True)
    g.add_argument("--adapter", required=True)
    g.add_argument("--out", required=True, help="output .clra file")
    g.set_defaults(func=cmd_merge)

    g = common(sub.add_parser("params", help="trainable parameter report"), data=False)
    g.add_argument("--base")
    g.add_argument("--model", choices=sorted(NAMED_CONFIGS))
    g.add_argument("--adapter-spec", help="rank,blocks, e.g. 2,all")
    g.add_argument("--include-esh", action="store_true")
    g.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(getattr(args, "config", None))
        args.func(args, cfg)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        log.error(f"error: {exc}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
