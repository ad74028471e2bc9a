"""``codecweave`` command-line workbench.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime abort.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import load_corpus, save_corpus
from .codec_stream import CodecSpec, GridError, grid_to_bytes
from .evaluation import evaluate_edits, evaluate_tts, make_edit_requests, result_record
from .inference import SamplerConfig, TTSRequest, edit, tts_many
from .layout import (TTS_VARIANTS, build_edit_inference, build_natural_training_sequence,
                     build_training_sequence, format_layout, speaker_vector)
from .model import ModelConfig, ModelError, load_model
from .toy_codec import DomainError, ToyLanguageSpec, gen_utterances, encode
from .trainer import Trainer, TrainConfig, TrainingAborted

log = logging.getLogger("codecweave")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3


class ConfigError(Exception):
    pass


def default_config() -> dict:
    """Full desk-scale experiment config; every key can be overridden from a JSON file."""
    lang = ToyLanguageSpec()
    return {
        "seed": 0,
        "toy_language": lang.to_dict(),
        "data": {"num_utterances": 5000, "split": [0.9, 0.05, 0.05], "length_range": [1, 12]},
        "model": {k: v for k, v in ModelConfig().to_dict().items() if k not in ("codec", "seed")},
        "train": {**{k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
                  "peak_lr": 1e-3, "batch_size": 6},
        "sampler": {k: v for k, v in SamplerConfig().to_dict().items() if k != "seed"},
        "eval": {"num_utterances": 200, "mode": "tts", "variant": "middle"},
    }


def _merge(base: dict, over: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path}{k}")
        if isinstance(base[k], dict) and k != "toy_language":
            if not isinstance(v, dict):
                raise ConfigError(f"{path}{k} must be an object")
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def load_config(path=None, seed=None) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                over = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(over, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, over)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


class Resolved:
    """Typed views of a config dict; construction errors surface as ConfigError."""

    def __init__(self, cfg: dict):
        self.raw = cfg
        seed = int(cfg["seed"])
        try:
            self.lang = ToyLanguageSpec.from_dict(cfg["toy_language"])
            self.model = ModelConfig.from_dict({**cfg["model"], "codec": self.lang.codec.to_dict(),
                                                "seed": seed})
            self.train = TrainConfig.from_dict({**cfg["train"], "seed": seed})
            self.sampler = SamplerConfig(**{**cfg["sampler"], "seed": seed})
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(f"invalid config: {e}") from e
        if self.model.text_vocab < self.lang.alphabet_size:
            raise ConfigError("model.text_vocab is smaller than the toy alphabet")
        if self.model.speaker_dim < self.lang.num_speakers:
            raise ConfigError("model.speaker_dim is smaller than the number of toy speakers")
        self.seed = seed


def _provenance(cfg: dict) -> dict:
    return {"config": cfg, "seed": cfg["seed"], "code_version": __version__}


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def split_counts(n: int, ratios) -> list:
    """Exact integer split; the remainder after flooring goes to the first split."""
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("data.split must be three non-negative ratios summing to 1")
    counts = [int(np.floor(n * r)) for r in ratios]
    counts[0] += n - sum(counts)
    return counts


def make_splits(lang: ToyLanguageSpec, seed: int, n: int, ratios, length_range) -> dict:
    """Distinct utterances, shuffled once and cut into train/val/test."""
    rng = np.random.default_rng([seed, 7])
    seen, utts = set(), []
    lo, hi = length_range
    cap = sum(lang.num_speakers * lang.alphabet_size ** L for L in range(lo, hi + 1))
    if n > cap:
        raise ConfigError(f"only {cap} distinct utterances exist for this language")
    while len(utts) < n:
        for u in gen_utterances(lang, rng, n - len(utts), tuple(length_range)):
            key = (u.symbols, u.speaker_id)
            if key not in seen:
                seen.add(key)
                utts.append(u)
    order = rng.permutation(n)
    c = split_counts(n, ratios)
    bounds = [0, c[0], c[0] + c[1], n]
    names = ("train", "val", "test")
    return {name: [utts[int(i)] for i in order[bounds[j]:bounds[j + 1]]] for j, name in enumerate(names)}


# -- subcommands -------------------------------------------------------------

def cmd_print_config(args) -> int:
    cfg = load_config(args.config, args.seed)
    Resolved(cfg)
    print(json.dumps(cfg, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.seed)
    r = Resolved(cfg)
    d = cfg["data"]
    splits = make_splits(r.lang, r.seed, int(d["num_utterances"]), d["split"], d["length_range"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {**_provenance(cfg), "splits": {}}
    for name, utts in splits.items():
        header = {**_provenance(cfg), "split": name, "toy_language": r.lang.to_dict()}
        digest = save_corpus(out / f"{name}.cwds", r.lang.codec, utts, header)
        manifest["splits"][name] = {"file": f"{name}.cwds", "count": len(utts), "sha256": digest}
    _write_json(out / "manifest.json", manifest)
    print(json.dumps(manifest["splits"], sort_keys=True))
    return EXIT_OK


def _load_split(path):
    try:
        spec, utts, header = load_corpus(path)
    except OSError as e:
        raise ConfigError(f"cannot read corpus {path}: {e}") from e
    return spec, utts, header


def _check_corpus(r: Resolved, spec: CodecSpec, header: dict, path) -> None:
    if spec != r.lang.codec:
        raise ConfigError(f"{path}: codec spec differs from the config's")
    lang = header.get("toy_language")
    if lang is not None and ToyLanguageSpec.from_dict(lang) != r.lang:
        raise ConfigError(f"{path}: toy language differs from the config's")


def _progress(rec):
    log.info("step %d loss %.4f", rec["step"], rec["loss"])


def train_run(r: Resolved, corpus, out: Path, cfg_raw: dict, layout: str | None = None,
              resume: bool = False) -> Trainer:
    tcfg = r.train if layout is None else TrainConfig.from_dict({**r.train.to_dict(), "layout": layout})
    ck = out / "checkpoint.bin"
    if resume and ck.exists():
        tr = Trainer.resume(corpus, ck, out, tcfg)
        log.info("resumed at step %d", tr.step)
    else:
        if out.exists() and (out / "metrics.jsonl").exists():
            (out / "metrics.jsonl").unlink()
            timing = out / "timing.jsonl"
            if timing.exists():
                timing.unlink()
        tr = Trainer(corpus, r.model, tcfg, out, _provenance(cfg_raw))
    tr.run(progress=_progress)
    return tr


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    if args.steps is not None:
        cfg["train"]["total_steps"] = int(args.steps)
    r = Resolved(cfg)
    path = Path(args.data) / "train.cwds" if Path(args.data).is_dir() else Path(args.data)
    spec, corpus, header = _load_split(path)
    _check_corpus(r, spec, header, path)
    tr = train_run(r, corpus, Path(args.out), cfg, resume=args.resume)
    print(json.dumps({"step": tr.step, "checkpoint": str(Path(args.out) / "checkpoint.bin")}))
    return EXIT_OK


def _sampler_from(args, base: SamplerConfig) -> SamplerConfig:
    over = {k: getattr(args, k) for k in ("top_k", "top_p", "temperature", "max_new_columns")
            if getattr(args, k, None) is not None}
    if getattr(args, "sample_seed", None) is not None:
        over["seed"] = args.sample_seed
    try:
        return SamplerConfig(**{**base.to_dict(), **over})
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _load_checkpoint(path):
    try:
        model, meta = load_model(path)
    except (OSError, KeyError) as e:
        raise ConfigError(f"cannot load checkpoint {path}: {e}") from e
    run = meta.get("run") or {}
    cfg = run.get("config") or default_config()
    return model, meta, Resolved(cfg)


def run_eval(model, r: Resolved, utts, sampler: SamplerConfig, mode: str, variant: str,
             natural: bool = False) -> dict:
    if mode == "tts":
        return evaluate_tts(model, r.lang, utts, sampler, variant=variant)
    if mode == "tts-prompted":
        by_spk = {}
        for u in utts:
            by_spk.setdefault(u.speaker_id, []).append(u)
        prompts = []
        for u in utts:
            same = by_spk[u.speaker_id]
            prompts.append(same[(same.index(u) + 1) % len(same)])
        return evaluate_tts(model, r.lang, utts, sampler, prompts=prompts, variant=variant)
    if mode == "edit":
        reqs = make_edit_requests(r.lang, utts, np.random.default_rng([sampler.seed, 11]))
        return evaluate_edits(model, r.lang, reqs, sampler, natural=natural)
    raise ConfigError(f"unknown eval mode {mode!r}")


def cmd_eval(args) -> int:
    model, meta, r = _load_checkpoint(args.checkpoint)
    cfg = r.raw
    if args.config is not None:
        cfg = load_config(args.config, args.seed)
        r = Resolved(cfg)
    spec, utts, header = _load_split(args.data)
    _check_corpus(r, spec, header, args.data)
    n = args.limit if args.limit is not None else int(cfg["eval"]["num_utterances"])
    mode = args.mode or cfg["eval"]["mode"]
    variant = args.variant or cfg["eval"]["variant"]
    sampler = _sampler_from(args, r.sampler)
    natural = (meta.get("train_config") or {}).get("layout") == "natural"
    rep = run_eval(model, r, utts[:n], sampler, mode, variant, natural)
    report = {**_provenance(cfg), "checkpoint_step": meta.get("step"), "mode": mode,
              "variant": variant, "sampler": sampler.to_dict(), **rep}
    if args.out:
        _write_json(args.out, report)
    print(json.dumps({k: report[k] for k in ("n", "ser", "speaker_match", "stop_reasons")}, sort_keys=True))
    return EXIT_OK


def _parse_symbols(text: str, lang: ToyLanguageSpec) -> tuple:
    try:
        syms = tuple(int(t) for t in text.replace(",", " ").split())
    except ValueError as e:
        raise ConfigError(f"symbols must be integers: {text!r}") from e
    if any(not 0 <= s < lang.alphabet_size for s in syms):
        raise ConfigError(f"symbols must lie in [0, {lang.alphabet_size})")
    return syms


def _emit(args, rec: dict, grid, extra: dict, r: Resolved, sampler: SamplerConfig) -> None:
    out = {**rec, **extra, "sampler": sampler.to_dict(), "seed": sampler.seed,
           "code_version": __version__}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_bytes(grid_to_bytes(grid))
        out["grid_file"] = str(args.out)
    print(json.dumps(out, sort_keys=True))


def cmd_tts(args) -> int:
    model, meta, r = _load_checkpoint(args.checkpoint)
    sampler = _sampler_from(args, r.sampler)
    target = _parse_symbols(args.text, r.lang)
    prompt = None
    if args.prompt_text is not None:
        if args.speaker is None:
            raise ConfigError("--prompt-text needs --speaker to synthesize the prompt audio")
        prompt = encode(r.lang, _parse_symbols(args.prompt_text, r.lang), args.speaker)
    if args.speaker is not None and not 0 <= args.speaker < model.config.speaker_dim:
        raise ConfigError("--speaker out of range")
    res = tts_many(model, [TTSRequest(target, args.speaker, prompt, args.variant)], sampler)[0]
    _emit(args, result_record(r.lang, res.grid, res.generation), res.grid,
          {"speaker_slot": res.speaker_id, "variant": args.variant}, r, sampler)
    return EXIT_OK


def cmd_edit(args) -> int:
    model, meta, r = _load_checkpoint(args.checkpoint)
    sampler = _sampler_from(args, r.sampler)
    try:
        src = encode(r.lang, _parse_symbols(args.source, r.lang), args.speaker)
    except DomainError as e:
        raise ConfigError(str(e)) from e
    if not 0 <= args.start <= args.stop <= len(src):
        raise ConfigError(f"span [{args.start}, {args.stop}) outside source of {len(src)} symbols")
    new = _parse_symbols(args.text, r.lang) if args.text else ()
    natural = (meta.get("train_config") or {}).get("layout") == "natural"
    res = edit(model, src, (args.start, args.stop), new, sampler, natural=natural)
    rec = result_record(r.lang, res.grid, res.middle)
    _emit(args, rec, res.grid, {"span": [res.start, res.stop], "middle_text": list(res.new_text),
                                "prefix_frames": res.prefix_frames,
                                "suffix_frames": res.suffix_frames}, r, sampler)
    return EXIT_OK


def golden_shapes(lang: ToyLanguageSpec) -> dict:
    """Rendered layouts for one fixed example under both orderings."""
    a, b, c, e = (i % lang.alphabet_size for i in (1, 2, 3, 4))
    g = encode(lang, [a, b, c, e], 0).grid
    d = lang.frames_per_symbol
    parts = ([a], [e], [b, c])
    grids = (g.columns(0, d), g.columns(3 * d, 4 * d), g.columns(d, 3 * d))
    spk = speaker_vector(0, lang.num_speakers)
    return {"reordered": format_layout(build_training_sequence(parts, grids, spk)),
            "natural": format_layout(build_natural_training_sequence(parts, grids, spk)),
            "edit_inference": format_layout(build_edit_inference([a], [e], [b], grids[0], grids[1], spk))}


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.seed)
    if args.steps is not None:
        cfg["train"]["total_steps"] = int(args.steps)
    r = Resolved(cfg)
    data = Path(args.data)
    spec, train_utts, header = _load_split(data / "train.cwds")
    _check_corpus(r, spec, header, data / "train.cwds")
    _, test_utts, _ = _load_split(data / "test.cwds")
    n = args.limit if args.limit is not None else int(cfg["eval"]["num_utterances"])
    out = Path(args.out)
    results = {}
    for layout in ("reordered", "natural"):
        tr = train_run(r, train_utts, out / layout, cfg, layout=layout)
        rep = run_eval(tr.model, r, test_utts[:n], r.sampler, "edit", "middle",
                       natural=layout == "natural")
        results[layout] = {k: rep[k] for k in ("n", "ser", "speaker_match", "stop_reasons", "by_op")}
    a, b = results["reordered"]["ser"], results["natural"]["ser"]
    report = {**_provenance(cfg), "results": results,
              "ser_ratio_natural_over_reordered": (b / a) if a > 0 else None,
              "golden_shapes": golden_shapes(r.lang)}
    _write_json(out / "ablation.json", report)
    print(json.dumps({"reordered_ser": a, "natural_ser": b}, sort_keys=True))
    return EXIT_OK


def _add_sampler_flags(p):
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--top-p", dest="top_p", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-new-columns", dest="max_new_columns", type=int)
    p.add_argument("--sample-seed", dest="sample_seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="codecweave", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON file overriding the defaults")
            p.add_argument("--seed", type=int)
        return p

    p = common(sub.add_parser("print-config", help="show the fully resolved config"))
    p.set_defaults(func=cmd_print_config)

    p = common(sub.add_parser("gen-data", help="write train/val/test toy corpora"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train", help="train (or resume) a model"))
    p.add_argument("--data", required=True, help="gen-data directory or a .cwds file")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="override train.total_steps")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="score a checkpoint on a corpus"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help=".cwds corpus file")
    p.add_argument("--mode", choices=("tts", "tts-prompted", "edit"))
    p.add_argument("--variant", choices=TTS_VARIANTS)
    p.add_argument("--limit", type=int)
    p.add_argument("--out")
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tts", help="synthesize a symbol string")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True, help="target symbols, e.g. '3 1 4'")
    p.add_argument("--speaker", type=int, help="speaker id (random when omitted without a prompt)")
    p.add_argument("--prompt-text", help="prompt symbols, encoded in --speaker's voice")
    p.add_argument("--variant", choices=TTS_VARIANTS, default="middle")
    p.add_argument("--out", help="write the generated grid here")
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_tts)

    p = sub.add_parser("edit", help="regenerate a span of a toy utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="source symbols")
    p.add_argument("--speaker", type=int, default=0)
    p.add_argument("--start", type=int, required=True)
    p.add_argument("--stop", type=int, required=True)
    p.add_argument("--text", default="", help="replacement symbols (empty deletes)")
    p.add_argument("--out")
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_edit)

    p = common(sub.add_parser("ablate-reordering", help="reordered vs natural layout, same budget"))
    p.add_argument("--data", required=True, help="gen-data directory")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, ModelError, DomainError, GridError, OSError) as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
