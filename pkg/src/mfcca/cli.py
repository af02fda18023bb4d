"""Command-line entry point.

Subcommands: gen, gradcheck, train, eval, sweep-f, export-attention.
Exit codes: 0 success, 1 verification failure, 2 usage or config error.
All relative paths resolve against ``--workdir``.
"""

import argparse
import concurrent.futures
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as rc
from . import gradcheck, sim
from . import tensor as tn
from .errors import ContractError, DimensionError, VocabularyError
from .model import Model, diagnostic_model, load_checkpoint, save_checkpoint
from .sot import Vocabulary
from .train import Optimizer, decode_utterances, evaluate_cer, train_epoch

log = logging.getLogger("mfcca")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DEFAULT_CHANNELS = (1, 2, 4, 6, 8)
DEFAULT_F_LIST = (0, 1, 2, 3, 4)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="base directory for all relative paths")
    common.add_argument("--config", help="key = value config file with [run]/[data]/[model]/[train]/[mask]")
    common.add_argument("--seed", type=int)
    common.add_argument("--preset", choices=["desk", "paper"])
    common.add_argument("--data", dest="data_dir", help="dataset directory")
    common.add_argument("--out", dest="out_dir", help="output directory")
    common.add_argument("--jobs", type=int)
    common.add_argument("--F", dest="F", type=int, help="context radius")
    common.add_argument("--fusion-channels", type=int, help="configured fusion width C*")
    common.add_argument("--mask-prob", type=float)
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mfcca", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    g.add_argument("--speakers", help="speakers per utterance, N or LO-HI")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-eval", type=int)
    g.add_argument("--vocab-size", type=int)
    g.add_argument("--channels", dest="data_channels", type=int)

    gc = sub.add_parser("gradcheck", parents=[common], help="run the gradient-oracle suite")
    gc.add_argument("--report", help="report path (default <out>/gradcheck.jsonl)")
    gc.add_argument("--targets", help="comma-separated subset of targets")
    gc.add_argument("--inject-fault", action="append", default=[], help=argparse.SUPPRESS)

    t = sub.add_parser("train", parents=[common], help="train the desk model")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", parents=[common], help="greedy-decode and score CER")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--channels", type=_int_list, help="channel counts, e.g. 1,2,4,6,8")
    e.add_argument("--split", default="eval", choices=["train", "eval"])
    e.add_argument("--keep-sc", action="store_true", help="score the speaker-change token too")
    e.add_argument("--per-speaker", action="store_true", help="score speaker segments pairwise")
    e.add_argument("--metrics", help="metrics path (default <out>/metrics.csv)")

    s = sub.add_parser("sweep-f", parents=[common], help="train and evaluate once per context radius")
    s.add_argument("--f-list", type=_int_list, default=list(DEFAULT_F_LIST))

    x = sub.add_parser("export-attention", parents=[common], help="dump first-layer attention rows")
    src = x.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--diagnostic", action="store_true",
                     help="identity-projection probe model instead of a checkpoint")
    x.add_argument("--utt", help="utterance id (default: first of the split)")
    x.add_argument("--split", default="eval", choices=["train", "eval"])
    x.add_argument("--layer", type=int, default=1, help="1-based encoder layer")
    x.add_argument("--head", default="mean", help="head index or 'mean'")
    x.add_argument("--output", help="matrix path (default <out>/attention.csv)")
    return p


def _overrides(args):
    ov = {s: {} for s in rc.SECTIONS}
    ov["run"].update(seed=args.seed, preset=args.preset, data_dir=args.data_dir,
                     out_dir=args.out_dir, jobs=args.jobs)
    ov["model"].update(context=args.F, fusion_channels=args.fusion_channels)
    ov["mask"].update(mask_prob=args.mask_prob)
    ov["train"].update(epochs=args.epochs, lr=args.lr)
    if getattr(args, "speakers", None):
        ov["data"]["speakers"] = args.speakers
    for key, attr in (("n_train", "n_train"), ("n_eval", "n_eval"),
                      ("vocab_size", "vocab_size"), ("channels", "data_channels")):
        val = getattr(args, attr, None)
        if val is not None:
            ov["data"][key] = val
    for item in args.set:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ContractError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        lhs, value = item.split("=", 1)
        sec, key = lhs.split(".", 1)
        ov.setdefault(sec.strip(), {})[key.strip()] = value.strip()
    return ov


class Context:
    def __init__(self, args):
        self.args = args
        self.workdir = Path(args.workdir)
        cfg_path = self.path(args.config) if args.config else None
        self.cfg = rc.load(cfg_path, _overrides(args))

    def path(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.workdir / p

    @property
    def data_dir(self):
        return self.path(self.cfg.data_dir)

    @property
    def out_dir(self):
        d = self.path(self.cfg.out_dir)
        d.mkdir(parents=True, exist_ok=True)
        return d

    def echo(self, name="config.ini", cfg=None):
        (cfg or self.cfg).write(self.out_dir / name)

    def load_split(self, split):
        path = self.data_dir / f"{split}.jsonl"
        if not path.exists():
            raise ContractError(f"dataset split {path} not found; run `mfcca gen` first")
        return sim.read_split(path)

    def vocab(self):
        path = self.data_dir / "vocab.txt"
        if not path.exists():
            raise ContractError(f"vocabulary {path} not found")
        return Vocabulary.load(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(ctx):
    cfg = ctx.cfg
    out = ctx.data_dir
    splits = sim.make_corpus(out, cfg.data, jobs=cfg.jobs)
    cfg.write(out / "config.ini")
    digests = {f: sim.file_digest(out / f) for f in ("train.jsonl", "eval.jsonl", "vocab.txt")}
    log.info("wrote %d train / %d eval utterances to %s", len(splits["train"]), len(splits["eval"]), out)
    print(json.dumps({"data_dir": str(out), "digests": digests}, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(ctx):
    args = ctx.args
    names = [n.strip() for n in args.targets.split(",")] if args.targets else None
    unknown = set(names or []) - set(gradcheck.TARGETS)
    if unknown:
        raise ContractError(f"unknown gradcheck targets {sorted(unknown)}")
    report = ctx.path(args.report) if args.report else ctx.out_dir / "gradcheck.jsonl"
    report.parent.mkdir(parents=True, exist_ok=True)
    bad = set(args.inject_fault) - tn.OPS
    if bad:
        raise ContractError(f"unknown primitive(s) {sorted(bad)}; known: {', '.join(sorted(tn.OPS))}")
    saved = set(tn.FAULTS)
    tn.FAULTS.update(args.inject_fault)
    try:
        results = list(gradcheck.run(names))
    finally:
        tn.FAULTS.clear()
        tn.FAULTS.update(saved)
    gradcheck.write_report(report, results)
    ctx.echo()
    failed = [r["target"] for r in results if not r["passed"]]
    for r in results:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['target']} max_rel_err={r['max_rel_err']:.3e}")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _model_config(ctx, train_utts, vocab):
    C, _, D = train_utts[0].features.shape
    mcfg = replace(ctx.cfg.model, input_dim=D, vocab_size=len(vocab))
    if C > mcfg.fusion_channels:
        raise ContractError(f"data has {C} channels but fusion is configured for {mcfg.fusion_channels}")
    return mcfg


LOG_HEADER = ["epoch", "loss", "token_acc", "lr_step"]


def run_training(ctx, model, opt, train_utts, vocab, start_epoch, out_dir):
    tcfg = ctx.cfg.train
    log_path = out_dir / "train_log.csv"
    mode = "a" if start_epoch > 0 and log_path.exists() else "w"
    with open(log_path, mode, newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            w.writerow(LOG_HEADER)
        for epoch in range(start_epoch, tcfg.epochs):
            loss, acc = train_epoch(model, opt, train_utts, vocab, tcfg, epoch)
            w.writerow([epoch + 1, repr(loss), repr(acc), opt.step])
            fh.flush()
            log.info("epoch %d loss %.5f acc %.4f", epoch + 1, loss, acc)
    return log_path


def cmd_train(ctx):
    args = ctx.args
    vocab = ctx.vocab()
    train_utts = ctx.load_split("train")
    out = ctx.out_dir
    if args.resume:
        model, extra, state = load_checkpoint(ctx.path(args.resume))
        start = int(extra.get("epoch", 0))
        opt = Optimizer(ctx.cfg.train, list(model.params), state)
        ctx.cfg.model = model.cfg
    else:
        mcfg = _model_config(ctx, train_utts, vocab)
        ctx.cfg.model = mcfg
        model = Model.initialize(mcfg, ctx.cfg.seed)
        opt = Optimizer(ctx.cfg.train, list(model.params))
        start = 0
    ctx.echo()
    run_training(ctx, model, opt, train_utts, vocab, start, out)
    save_checkpoint(out / "checkpoint.npz", model,
                    extra={"epoch": max(start, ctx.cfg.train.epochs), "seed": ctx.cfg.seed},
                    state=opt.state())
    print(json.dumps({"checkpoint": str(out / "checkpoint.npz"),
                      "log": str(out / "train_log.csv")}, sort_keys=True))
    return EXIT_OK


def _decode_job(payload):
    cfg, arrays, utts, vocab_tokens, channels = payload
    model = Model(cfg, arrays)
    return decode_utterances(model, utts, Vocabulary(vocab_tokens), channels)


def _score(ctx, model, utts, vocab, channels):
    args = ctx.args
    jobs = ctx.cfg.jobs
    if jobs > 1 and len(utts) > 1:
        chunks = [utts[i::jobs] for i in range(jobs)]
        payloads = [(model.cfg, model.arrays(), ch, vocab.tokens, channels) for ch in chunks if ch]
        with concurrent.futures.ProcessPoolExecutor(jobs) as pool:
            parts = list(pool.map(_decode_job, payloads))
        hyps = [None] * len(utts)
        for i, part in enumerate(parts):
            hyps[i::jobs] = part
        from .sot import corpus_cer, serialize_sot
        refs = [serialize_sot(u.sot, vocab, wrap=False) for u in utts]
        return corpus_cer(zip(refs, hyps), vocab.sc_id, args.keep_sc, args.per_speaker)
    return evaluate_cer(model, utts, vocab, channels, getattr(args, "keep_sc", False),
                        getattr(args, "per_speaker", False))


def cmd_eval(ctx):
    args = ctx.args
    model, _, _ = load_checkpoint(ctx.path(args.checkpoint))
    vocab = ctx.vocab()
    utts = ctx.load_split(args.split)
    C = utts[0].features.shape[0]
    if args.channels:
        counts = args.channels
        too_many = [k for k in counts if k > C or k < 1]
        if too_many:
            raise ContractError(f"requested channel counts {too_many} but the data has {C} channels")
    else:
        counts = [k for k in DEFAULT_CHANNELS if k <= C]
    metrics = ctx.path(args.metrics) if args.metrics else ctx.out_dir / "metrics.csv"
    metrics.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for k in counts:
        rows.append((k, _score(ctx, model, utts, vocab, k), len(utts)))
        log.info("%d-ch CER %.4f", k, rows[-1][1])
    with open(metrics, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channels", "cer", "utterances"])
        for k, c, n in rows:
            w.writerow([k, repr(c), n])
    ctx.echo()
    print(json.dumps({"metrics": str(metrics), "cer": {str(k): c for k, c, _ in rows}}, sort_keys=True))
    return EXIT_OK


def cmd_sweep_f(ctx):
    args = ctx.args
    vocab = ctx.vocab()
    train_utts = ctx.load_split("train")
    eval_utts = ctx.load_split("eval")
    base = ctx.cfg
    out = ctx.out_dir
    results = []
    for F in args.f_list:
        if F < 0:
            raise ContractError(f"context radius must be >= 0, got {F}")
        ctx.cfg = replace(base, model=replace(base.model, context=F), out_dir=str(Path(base.out_dir) / f"F{F}"))
        mcfg = _model_config(ctx, train_utts, vocab)
        ctx.cfg.model = mcfg
        run_dir = ctx.out_dir
        ctx.echo()
        model = Model.initialize(mcfg, ctx.cfg.seed)
        opt = Optimizer(ctx.cfg.train, list(model.params))
        run_training(ctx, model, opt, train_utts, vocab, 0, run_dir)
        save_checkpoint(run_dir / "checkpoint.npz", model, extra={"epoch": ctx.cfg.train.epochs})
        cer = evaluate_cer(model, eval_utts, vocab)
        trace = model.first_layer_trace(eval_utts[0].features)
        C = eval_utts[0].features.shape[0]
        results.append({"F": F, "eval_cer": cer, "key_width": int(trace.weights.shape[-1]),
                        "channels": C, "run_dir": str(run_dir)})
        log.info("F=%d eval CER %.4f", F, cer)
    ctx.cfg = base
    table = out / "sweep_f.csv"
    with open(table, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["F"] + [r["F"] for r in results])
        w.writerow(["Eval"] + [repr(r["eval_cer"]) for r in results])
    (out / "sweep_f.json").write_text(json.dumps(results, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    ctx.echo()
    print(json.dumps({"table": str(table)}, sort_keys=True))
    return EXIT_OK


def attention_rows(trace, head="mean"):
    """Flatten an MFCCA trace (time, head, query channel, key) to rows (t, c)."""
    w = trace.weights
    if w.ndim != 4:
        raise DimensionError(f"expected an unbatched multi-frame trace, got shape {w.shape}")
    if head == "mean":
        m = w.mean(axis=1)
    else:
        h = int(head)
        if not 0 <= h < w.shape[1]:
            raise ContractError(f"head {h} out of range for {w.shape[1]} heads")
        m = w[:, h]
    T, C, K = m.shape
    return m.reshape(T * C, K)


def cmd_export_attention(ctx):
    args = ctx.args
    utts = ctx.load_split(args.split)
    if args.utt:
        match = [u for u in utts if u.id == args.utt]
        if not match:
            raise ContractError(f"utterance {args.utt!r} not in the {args.split} split")
        utt = match[0]
    else:
        utt = utts[0]
    C, T, D = utt.features.shape
    if args.diagnostic:
        model = diagnostic_model(replace(ctx.cfg.model, input_dim=D, model_dim=D, heads=1))
    else:
        model, _, _ = load_checkpoint(ctx.path(args.checkpoint))
    if model.cfg.attention != "mfcca":
        raise ContractError("attention export needs a multi-frame cross-channel model")
    if not 1 <= args.layer <= model.cfg.enc_layers:
        raise ContractError(f"layer must lie in 1..{model.cfg.enc_layers}")
    with tn.no_grad():
        layers = model.encoder_layers()[:args.layer]
        from .encoder import encoder_stack
        _, traces = encoder_stack(utt.features, model.params["enc.embed.w"], model.params["enc.embed.b"],
                                  layers, model.cfg.context_config(), model.cfg.positional,
                                  return_traces=True)
    rows = attention_rows(traces[-1], args.head)
    path = ctx.path(args.output) if args.output else ctx.out_dir / "attention.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, rows, delimiter=",", fmt="%.17g")
    F = model.cfg.context
    meta = {
        "utterance": utt.id, "layer": args.layer, "head": args.head, "F": F, "C": C, "T": T,
        "rows": "query (t, c), t-major: row = t * C + c",
        "columns": "key (offset, channel), offset-major: col = (offset + F) * C + channel",
        "delays": utt.delays.tolist(),
        "speakers": [s.speaker for s in utt.sot.speakers],
        "model": "diagnostic" if args.diagnostic else str(args.checkpoint),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    ctx.echo()
    print(json.dumps({"matrix": str(path), "shape": list(rows.shape)}, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-f": cmd_sweep_f,
    "export-attention": cmd_export_attention,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mfcca: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx = Context(args)
        return COMMANDS[args.command](ctx)
    except (ContractError, DimensionError, VocabularyError, FileNotFoundError) as exc:
        print(f"mfcca: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
