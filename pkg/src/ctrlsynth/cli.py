"""Command-line front end.

Logs go to stderr; every artifact is written to a file named by a flag.
Configuration precedence, lowest first: built-in defaults, ``--config``
JSON file, ``CTRLSYNTH_MODEL_<KEY>`` / ``CTRLSYNTH_TRAIN_<KEY>`` environment
variables, explicit command-line flags.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .model.config import LossWeights, ModelConfig, TrainConfig, to_dict

log = logging.getLogger("ctrlsynth")

ENV_PREFIX = "CTRLSYNTH_"


# -- configuration --------------------------------------------------------------

def _json_type(default) -> dict:
    if isinstance(default, str):
        return {"type": "string"}
    if isinstance(default, bool):
        return {"type": "boolean"}
    if isinstance(default, int):
        return {"type": "integer"}
    return {"type": "number"}


def _section_schema(cls) -> dict:
    from .model.config import LR_SCHEDULES

    props = {}
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if isinstance(default, LossWeights):
            props[f.name] = _section_schema(LossWeights)
        elif f.name == "lr_schedule":
            props[f.name] = {"enum": list(LR_SCHEDULES)}
        else:
            props[f.name] = _json_type(default)
    return {"type": "object", "additionalProperties": False, "properties": props}


CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {"model": _section_schema(ModelConfig), "train": _section_schema(TrainConfig)},
}


def _coerce(text: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, str):
            return text
        if isinstance(default, int):
            return int(text)
        return float(text)
    except ValueError:
        raise ValueError(f"environment variable {key}={text!r} is not a valid {type(default).__name__}") from None


def env_overrides(environ=None) -> dict:
    """``{"model": {...}, "train": {...}}`` read from ``CTRLSYNTH_*`` variables.

    Loss weights are addressed as ``CTRLSYNTH_TRAIN_W_EVENT`` and friends.
    """
    environ = os.environ if environ is None else environ
    out: dict = {"model": {}, "train": {}}
    sections = {"model": ModelConfig(), "train": TrainConfig()}
    weight_defaults = to_dict(LossWeights())
    for var, text in sorted(environ.items()):
        if not var.startswith(ENV_PREFIX):
            continue
        rest = var[len(ENV_PREFIX):]
        section, _, key = rest.partition("_")
        section = section.lower()
        key = key.lower()
        if section not in sections:
            continue
        defaults = to_dict(sections[section])
        if section == "train" and key in weight_defaults:
            out["train"].setdefault("weights", {})[key] = _coerce(text, weight_defaults[key], var)
        elif key in defaults and key != "weights":
            out[section][key] = _coerce(text, defaults[key], var)
        else:
            raise ValueError(f"unknown configuration key in environment variable {var}")
    return out


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, environ=None, flags=None) -> tuple[ModelConfig, TrainConfig]:
    """Resolve the model and training configuration; validates before returning."""
    import jsonschema

    doc = {"model": to_dict(ModelConfig()), "train": to_dict(TrainConfig())}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON: {exc}") from exc
        try:
            jsonschema.validate(user, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ValueError(f"{path}: {where}: {exc.message}") from None
        doc = _merge(doc, user)
    doc = _merge(doc, env_overrides(environ))
    if flags:
        doc = _merge(doc, flags)
    jsonschema.validate(doc, CONFIG_SCHEMA)
    train = dict(doc["train"])
    train["weights"] = LossWeights(**train["weights"])
    return ModelConfig(**doc["model"]), TrainConfig(**train)


def config_document(model: ModelConfig, train: TrainConfig) -> dict:
    return {"model": to_dict(model), "train": to_dict(train)}


# -- helpers --------------------------------------------------------------------

def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_text(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _emit(text: str, path=None) -> None:
    """Write to ``path`` when given, otherwise to stdout."""
    if path:
        _write_text(path, text)
    else:
        sys.stdout.write(text)


def _parse_memo(text: str) -> tuple[int, float]:
    try:
        n, eps = text.split(":")
        return int(n), float(eps)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N:EPS, got {text!r}") from None


def _load_trace(path, gen):
    from .trace import load_trace

    return load_trace(path, gen)


def _train_flags(args) -> dict:
    flags = {}
    for name in ("epochs", "ckpt_every", "lr", "batch_size"):
        v = getattr(args, name, None)
        if v is not None:
            flags[name] = v
    if args.seed is not None:
        flags["seed"] = args.seed
    return {"train": flags} if flags else {}


# -- subcommands ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .smm import generate_smm, load_model
    from .trace import save_trace

    model = load_model(args.model)
    ds = generate_smm(model, args.n, args.max_len, args.seed or 0)
    save_trace(ds, args.out)
    log.info("wrote %d streams (%d events) to %s", len(ds), ds.n_events, args.out)
    return 0


def cmd_fit_smm(args) -> int:
    from .smm import fit_smm
    from .statemachine import build_state_machine

    ds = _load_trace(args.trace, args.gen)
    model = fit_smm(ds, build_state_machine(ds.generation), device_type=args.device_type)
    model.save(args.out)
    log.info("fitted model on %d streams written to %s", len(ds), args.out)
    return 0


def _save_run(ckpts, out_dir: Path, model_cfg, train_cfg, extra: dict) -> None:
    from .model.checkpoint import save_checkpoint

    out_dir.mkdir(parents=True, exist_ok=True)
    for ck in ckpts:
        path = out_dir / f"ckpt_e{ck.epoch:04d}.bin"
        save_checkpoint(ck, path)
        log.info("saved %s", path)
    history = ckpts[-1].metadata.get("history", []) if ckpts else []
    _write_json(out_dir / "train_log.json", dict(
        extra, config=config_document(model_cfg, train_cfg),
        checkpoints=[f"ckpt_e{ck.epoch:04d}.bin" for ck in ckpts], history=history,
    ))


def cmd_train(args) -> int:
    from .model.checkpoint import init_for_dataset
    from .model.training import train

    model_cfg, train_cfg = load_config(args.config, flags=_train_flags(args))
    ds = _load_trace(args.trace, args.gen)
    val = _load_trace(args.validation, args.gen) if args.validation else None
    if model_cfg.d_token != ds.generation.vocab_size + 3:
        model_cfg = dataclasses.replace(model_cfg, d_token=ds.generation.vocab_size + 3)
    ck = init_for_dataset(ds, model_cfg, train_cfg.seed)
    ckpts = train(ck, ds, train_cfg, validation=val)
    _save_run(ckpts, Path(args.out), model_cfg, train_cfg, {"stage": "train", "trace": str(args.trace)})
    return 0


def cmd_finetune(args) -> int:
    from .model.checkpoint import load_checkpoint
    from .model.training import finetune

    base = load_checkpoint(args.ckpt)
    _, train_cfg = load_config(args.config, flags=_train_flags(args))
    ds = _load_trace(args.trace, args.gen or base.generation.value)
    val = _load_trace(args.validation, ds.generation) if args.validation else None
    ckpts = finetune(base, ds, train_cfg, validation=val)
    _save_run(ckpts, Path(args.out), base.model_config, train_cfg,
              {"stage": "finetune", "trace": str(args.trace), "base": str(args.ckpt)})
    return 0


def cmd_generate(args) -> int:
    from .generator import generate_dataset
    from .model.checkpoint import load_checkpoint
    from .trace import save_trace

    ck = load_checkpoint(args.ckpt)
    ds = generate_dataset(ck, args.n, device_type=args.device_type, seed=args.seed or 0,
                          temperature=args.temperature, batch_size=args.batch_size)
    save_trace(ds, args.out)
    log.info("wrote %d streams (%d events) to %s", len(ds), ds.n_events, args.out)
    return 0


def _write_cdf_samples(real, synth, sm, out_dir: Path) -> None:
    """Raw per-UE samples behind every distance, one JSON file per metric."""
    from .fidelity import flow_length_keys, flow_lengths, per_ue_average_sojourns

    rs, ss = per_ue_average_sojourns(real, sm), per_ue_average_sojourns(synth, sm)
    for state in rs:
        _write_json(out_dir / f"sojourn_{state}.json", {"real": rs[state], "synth": ss[state]})
    for key in flow_length_keys(real):
        _write_json(out_dir / f"flow_length_{key}.json",
                    {"real": flow_lengths(real, key), "synth": flow_lengths(synth, key)})


def cmd_evaluate(args) -> int:
    from .fidelity import full_report
    from .statemachine import build_state_machine

    real = _load_trace(args.real, args.gen)
    synth = _load_trace(args.synth, args.gen)
    sm = build_state_machine(real.generation)
    report = full_report(real, synth, sm, memo=args.memo or ())
    text = report.to_json() + "\n" if args.format == "json" else report.format_table()
    _emit(text, args.out)
    if args.samples_out:
        _write_cdf_samples(real, synth, sm, Path(args.samples_out))
    return 0


def cmd_memcheck(args) -> int:
    from .fidelity import memorization, memo_key

    real = _load_trace(args.real, args.gen)
    synth = _load_trace(args.synth, args.gen)
    frac = memorization(real, synth, args.n, args.eps)
    _emit(json.dumps({memo_key(args.n, args.eps): frac}, sort_keys=True) + "\n", args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .model.gradcheck import grad_check, random_problem

    cfg = ModelConfig(d_model=args.d_model, n_blocks=args.n_blocks, n_heads=args.n_heads,
                      mlp_hidden=args.mlp_hidden, head_hidden=args.head_hidden,
                      max_context=max(2, args.length), distribution_head=not args.no_distribution_head)
    params, tokens, tgt = random_problem(cfg, args.seed or 0, args.batch, args.length)
    err = grad_check(params, cfg, tokens, tgt, LossWeights(1.0, 0.7, 1.3))
    ok = err < args.tol
    _emit(json.dumps({"max_relative_error": err, "tolerance": args.tol, "passed": ok},
                     sort_keys=True) + "\n", args.out)
    if not ok:
        log.error("max relative error %.3g exceeds tolerance %.3g", err, args.tol)
        return 1
    return 0


def cmd_select_checkpoint(args) -> int:
    from .model.checkpoint import load_checkpoint, save_checkpoint
    from .model.selection import select_checkpoint

    paths = list(args.ckpt)
    for d in args.dir or ():
        paths += sorted(str(p) for p in Path(d).glob("ckpt_e*.bin"))
    if not paths:
        raise ValueError("no checkpoints given (use --ckpt or --dir)")
    ckpts = [load_checkpoint(p) for p in paths]
    val = _load_trace(args.validation, ckpts[0].generation)
    best, rows = select_checkpoint(ckpts, val, n_samples=args.n, seed=args.seed or 0,
                                   top_fraction=args.top_fraction)
    chosen = paths[next(i for i, c in enumerate(ckpts) if c is best)]
    for row, p in zip(rows, paths):
        row["path"] = p
    if args.out:
        save_checkpoint(best, args.out)
    _emit(json.dumps({"selected": chosen, "epoch": best.epoch, "candidates": rows},
                     indent=2, sort_keys=True) + "\n", args.report)
    return 0


def cmd_print_config(args) -> int:
    model_cfg, train_cfg = load_config(args.config)
    _emit(json.dumps(config_document(model_cfg, train_cfg), indent=2, sort_keys=True) + "\n", args.out)
    return 0


def cmd_show_smm(args) -> int:
    from .smm import load_model

    _emit(load_model(args.model).describe(), args.out)
    return 0


def cmd_show_ckpt(args) -> int:
    from .model.checkpoint import read_header

    header, _ = read_header(args.ckpt)
    _emit(json.dumps(header, indent=2, sort_keys=True) + "\n", args.out)
    return 0


def cmd_state_table(args) -> int:
    from .statemachine import build_state_machine

    _emit(build_state_machine(args.gen).format_table(), args.out)
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random draw (default 0)")
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS threads (default: available cores); results do not depend on it")
    common.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="stderr log level")

    p = argparse.ArgumentParser(prog="ctrlsynth", description="Control-plane traffic synthesis toolkit.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        sp.set_defaults(func=fn)
        return sp

    def gen_arg(sp, required=True):
        sp.add_argument("--gen", choices=["4g", "5g"], required=required, help="network generation")

    sp = add("simulate", cmd_simulate, "sample a ground-truth trace from a fitted or hand-written SMM")
    sp.add_argument("--model", required=True, help="SMM JSON (fitted model or hand-authored spec)")
    sp.add_argument("--n", type=int, required=True, help="number of streams")
    sp.add_argument("--max-len", type=int, default=500, help="maximum events per stream")
    sp.add_argument("--out", required=True, help="output JSONL trace")

    sp = add("fit-smm", cmd_fit_smm, "fit a semi-Markov baseline to a trace")
    sp.add_argument("--trace", required=True, help="input JSONL trace")
    gen_arg(sp)
    sp.add_argument("--device-type", default=None, help="restrict fitting to one device type")
    sp.add_argument("--out", required=True, help="output model JSON")

    for name, fn, text in (("train", cmd_train, "train a model from scratch"),
                           ("finetune", cmd_finetune, "continue training a checkpoint on a new trace")):
        sp = add(name, fn, text)
        if name == "finetune":
            sp.add_argument("--ckpt", required=True, help="checkpoint to start from")
        sp.add_argument("--trace", required=True, help="training JSONL trace")
        sp.add_argument("--validation", default=None, help="validation JSONL trace (logged loss)")
        gen_arg(sp, required=(name == "train"))
        sp.add_argument("--config", default=None, help='JSON config {"model": {...}, "train": {...}}')
        sp.add_argument("--epochs", type=int, default=None, help="override train.epochs")
        sp.add_argument("--ckpt-every", type=int, default=None, help="override train.ckpt_every")
        sp.add_argument("--lr", type=float, default=None, help="override train.lr")
        sp.add_argument("--batch-size", type=int, default=None, help="override train.batch_size")
        sp.add_argument("--out", required=True, help="output directory for ckpt_eNNNN.bin and train_log.json")

    sp = add("generate", cmd_generate, "synthesize streams from a checkpoint")
    sp.add_argument("--ckpt", required=True, help="checkpoint file")
    sp.add_argument("--n", type=int, required=True, help="number of streams")
    sp.add_argument("--device-type", default=None, help="device type label (default: checkpoint's)")
    sp.add_argument("--temperature", type=float, default=1.0, help="softmax temperature for event and stop")
    sp.add_argument("--batch-size", type=int, default=256, help="streams decoded together")
    sp.add_argument("--out", required=True, help="output JSONL trace")

    sp = add("evaluate", cmd_evaluate, "fidelity report of a synthesized trace against a reference")
    sp.add_argument("--real", required=True, help="reference JSONL trace")
    sp.add_argument("--synth", required=True, help="synthesized JSONL trace")
    gen_arg(sp)
    sp.add_argument("--format", choices=["json", "table"], default="json", help="report format")
    sp.add_argument("--memo", type=_parse_memo, action="append", metavar="N:EPS",
                    help="add a memorization audit (repeatable), e.g. 20:0.1")
    sp.add_argument("--samples-out", default=None, help="directory for per-metric CDF sample files")
    sp.add_argument("--out", default=None, help="report file (default stdout)")

    sp = add("memcheck", cmd_memcheck, "fraction of synthesized n-grams repeated in a reference trace")
    sp.add_argument("--real", required=True, help="reference (training) JSONL trace")
    sp.add_argument("--synth", required=True, help="synthesized JSONL trace")
    gen_arg(sp)
    sp.add_argument("--n", type=int, default=20, help="n-gram length")
    sp.add_argument("--eps", type=float, default=0.1, help="relative interarrival tolerance")
    sp.add_argument("--out", default=None, help="result file (default stdout)")

    sp = add("gradcheck", cmd_gradcheck, "compare analytic gradients with central differences")
    sp.add_argument("--d-model", type=int, default=16, help="model width")
    sp.add_argument("--n-blocks", type=int, default=1, help="transformer blocks")
    sp.add_argument("--n-heads", type=int, default=2, help="attention heads")
    sp.add_argument("--mlp-hidden", type=int, default=32, help="MLP hidden width")
    sp.add_argument("--head-hidden", type=int, default=8, help="output head hidden width")
    sp.add_argument("--no-distribution-head", action="store_true", help="use the scalar arrival head")
    sp.add_argument("--length", type=int, default=6, help="sequence length")
    sp.add_argument("--batch", type=int, default=2, help="batch size")
    sp.add_argument("--tol", type=float, default=1e-4, help="fail when the max relative error reaches this")
    sp.add_argument("--out", default=None, help="result file (default stdout)")

    sp = add("select-checkpoint", cmd_select_checkpoint, "pick a checkpoint by fidelity rank sums")
    sp.add_argument("--ckpt", action="append", default=[], help="candidate checkpoint (repeatable)")
    sp.add_argument("--dir", action="append", help="directory of ckpt_e*.bin candidates (repeatable)")
    sp.add_argument("--validation", required=True, help="validation JSONL trace")
    sp.add_argument("--n", type=int, default=1000, help="streams generated per candidate")
    sp.add_argument("--top-fraction", type=float, default=0.2,
                    help="earliest epoch wins among this top fraction")
    sp.add_argument("--out", default=None, help="copy the selected checkpoint here")
    sp.add_argument("--report", default=None, help="selection report JSON (default stdout)")

    sp = add("print-config", cmd_print_config, "print the resolved configuration with every default")
    sp.add_argument("--config", default=None, help="JSON config to merge over the defaults")
    sp.add_argument("--out", default=None, help="output file (default stdout)")

    sp = add("show-smm", cmd_show_smm, "human-readable dump of an SMM file")
    sp.add_argument("--model", required=True, help="SMM JSON")
    sp.add_argument("--out", default=None, help="output file (default stdout)")

    sp = add("show-ckpt", cmd_show_ckpt, "print a checkpoint's header")
    sp.add_argument("--ckpt", required=True, help="checkpoint file")
    sp.add_argument("--out", default=None, help="output file (default stdout)")

    sp = add("state-table", cmd_state_table, "print the legal transition table")
    gen_arg(sp)
    sp.add_argument("--out", default=None, help="output file (default stdout)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        log.error("%s: %s", args.command, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
