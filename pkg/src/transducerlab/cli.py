"""Experiment harness: every pipeline stage as a subcommand.

``run`` drives a staged experiment from an INI config (synth, vocab,
pretrain, train, adapt, decode, rescore, eval); each stage writes its
artifacts under the output directory plus a manifest keyed by the config
hash, so re-running an unchanged experiment skips completed stages. The
side commands (tokenize, memsim, latency, compare-init, compare-lookahead)
print a table to stdout and can write the same rows as CSV.

Exit codes: 0 success, 2 config error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasets as ds
from . import decoder as dec
from . import evaluation as ev
from . import language_model as lmod
from . import network as net
from . import tokenizer as tok
from . import trainer as tr
from . import transducer_loss as tl
from .alignment import read_timings
from .trainer import FreezeScope, TrainConfig

OUT_ENV = "TRANSDUCERLAB_OUT"
STAGES = ("synth", "vocab", "pretrain", "train", "adapt", "decode", "rescore", "eval")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


_SCHEMA: dict[str, set[str]] = {
    "experiment": {"stages", "out", "seed"},
    "synth": {"train_utts", "test_utts", "adapt_utts", "lm_sentences", "domain",
              "new_domain", "test_domain", "noise_sigma", "speaker_scale",
              "adapt_speaker_scale", "adapt_n_speakers", "sentence_lo",
              "sentence_hi", "n_words", "acoustic_seed"},
    "vocab": {"target_size"},
    "pretrain": {"mode", "epochs", "lr", "batch_size"},
    "train": {"arch", "feature_dim", "stack_factor", "epochs", "lr", "lr_decay",
              "lr_decay_every", "batch_size", "clip", "max_lattice_mb",
              "eval_dev_wer"},
    "adapt": {"scope", "epochs", "lr", "batch_size", "mix_ratio"},
    "decode": {"beam"},
    "rescore": {"lm_cells", "lm_proj", "lm_layers", "lm_epochs", "lm_lr",
                "lambda_grid"},
    "eval": {"histogram"},
}


@dataclass
class ExperimentConfig:
    stages: list[str]
    out: Path
    seed: int
    sections: dict[str, dict[str, str]] = field(default_factory=dict)
    jobs: int = 1

    def get(self, section: str, key: str, default: str) -> str:
        return self.sections.get(section, {}).get(key, default)

    def getint(self, section: str, key: str, default: int) -> int:
        return int(self.get(section, key, str(default)))

    def getfloat(self, section: str, key: str, default: float) -> float:
        return float(self.get(section, key, str(default)))

    def getbool(self, section: str, key: str, default: bool) -> bool:
        return self.get(section, key, str(default)).lower() in ("1", "true", "yes")


def load_experiment_config(path: str | Path, out: str | None = None,
                           seed: int | None = None, jobs: int = 1) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path, encoding="utf-8")
    if not read:
        raise ConfigError(f"cannot read config {path}")
    sections: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        body = dict(parser.items(section))
        unknown = set(body) - _SCHEMA[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
        sections[section] = body
    exp = sections.get("experiment", {})
    stages = exp.get("stages", "synth vocab train decode eval").split()
    bad = [s for s in stages if s not in STAGES]
    if bad:
        raise ConfigError(f"unknown stages: {bad}")
    ordered = [s for s in STAGES if s in stages]
    if ordered != stages:
        raise ConfigError(f"stages must follow the pipeline order {list(STAGES)}")
    out_dir = out or exp.get("out") or os.path.join(
        os.environ.get(OUT_ENV, "runs"), Path(path).stem)
    seed_val = seed if seed is not None else int(exp.get("seed", "0"))
    return ExperimentConfig(stages=stages, out=Path(out_dir), seed=seed_val,
                            sections=sections, jobs=jobs)


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------

def _stage_hash(cfg: ExperimentConfig, stage: str, prev: str) -> str:
    body = json.dumps({
        "stage": stage,
        "seed": cfg.seed,
        "section": sorted(cfg.sections.get(stage, {}).items()),
        "prev": prev,
    }, sort_keys=True)
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def _synth_spec(cfg: ExperimentConfig, domain_key: str, *, n_speakers=None,
                speaker_scale=None) -> ds.SynthSpec:
    s = "synth"
    return ds.make_spec(
        cfg.get(s, domain_key, "base" if domain_key == "domain" else "new"),
        acoustic_seed=cfg.getint(s, "acoustic_seed", 11),
        n_words=cfg.getint(s, "n_words", 50),
        noise_sigma=cfg.getfloat(s, "noise_sigma", 0.3),
        speaker_scale=cfg.getfloat(s, "speaker_scale", 0.5)
        if speaker_scale is None else speaker_scale,
        n_speakers=n_speakers,
        sentence_len=(cfg.getint(s, "sentence_lo", 2), cfg.getint(s, "sentence_hi", 3)))


def stage_synth(cfg: ExperimentConfig) -> None:
    s = "synth"
    base = _synth_spec(cfg, "domain")
    test_domain = cfg.get(s, "test_domain", "base")
    test_spec = base if test_domain == "base" else _synth_spec(cfg, "new_domain")
    train = ds.synth_corpus(base, cfg.getint(s, "train_utts", 60), seed=cfg.seed)
    test = ds.synth_corpus(test_spec, cfg.getint(s, "test_utts", 20),
                           seed=cfg.seed + 1)
    ds.write_corpus(train, cfg.out / "data" / "train")
    ds.write_corpus(test, cfg.out / "data" / "test")
    n_adapt = cfg.getint(s, "adapt_utts", 0)
    if n_adapt:
        adapt_spec = _synth_spec(
            cfg, "new_domain",
            n_speakers=cfg.getint(s, "adapt_n_speakers", 1),
            speaker_scale=cfg.getfloat(s, "adapt_speaker_scale", 0.0))
        ds.write_corpus(ds.synth_corpus(adapt_spec, n_adapt, seed=cfg.seed + 2),
                        cfg.out / "data" / "adapt")
    n_lm = cfg.getint(s, "lm_sentences", 0)
    if n_lm:
        lm_spec = _synth_spec(cfg, "new_domain")
        rng = np.random.default_rng(cfg.seed + 3)
        lines = [" ".join(ds.sample_sentence(lm_spec, rng)) for _ in range(n_lm)]
        (cfg.out / "data" / "lm_text.txt").write_text(
            "\n".join(lines) + "\n", encoding="utf-8")


def stage_vocab(cfg: ExperimentConfig) -> None:
    train = ds.read_corpus(cfg.out / "data" / "train")
    vocab = tok.build_vocab(ds.transcripts(train),
                            cfg.getint("vocab", "target_size", 30))
    vocab.save(cfg.out / "vocab.txt")


def _train_cfg(cfg: ExperimentConfig, section: str, **overrides) -> TrainConfig:
    arch = net.parse_arch_spec(
        cfg.get("train", "arch", "32p16_2x1"),
        feature_dim=cfg.getint("train", "feature_dim", 8),
        stack_factor=cfg.getint("train", "stack_factor", 3))
    kwargs = dict(
        arch=arch,
        lr=cfg.getfloat(section, "lr", 1e-2),
        lr_decay=cfg.getfloat("train", "lr_decay", 0.5),
        lr_decay_every=cfg.getint("train", "lr_decay_every", 3),
        epochs=cfg.getint(section, "epochs", 6),
        batch_size=cfg.getint(section, "batch_size", 4),
        clip=cfg.getfloat("train", "clip", 5.0),
        seed=cfg.seed,
        pretrain_epochs=cfg.getint("pretrain", "epochs", 4),
        max_lattice_mb=cfg.getfloat("train", "max_lattice_mb", 64.0),
        eval_dev_wer=cfg.getbool("train", "eval_dev_wer", True),
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def stage_pretrain(cfg: ExperimentConfig) -> None:
    mode = cfg.get("pretrain", "mode", "ce")
    if mode == "none":
        return
    train = ds.read_corpus(cfg.out / "data" / "train")
    vocab = tok.Vocabulary.load(cfg.out / "vocab.txt")
    tcfg = _train_cfg(cfg, "pretrain", init=mode)
    if mode == "ce":
        encoder = tr.pretrain_encoder_ce(tcfg, train, vocab)
    elif mode == "ctc":
        encoder = tr.pretrain_encoder_ctc(tcfg, train, vocab)
    else:
        raise ConfigError(f"unknown pretrain mode {mode!r}")
    shell = net.init_model(tcfg.arch, vocab.n_labels, cfg.seed)
    tr.transfer_encoder(shell, encoder)
    net.save_checkpoint(cfg.out / "encoder_init.ckpt", shell)


def stage_train(cfg: ExperimentConfig) -> None:
    train = ds.read_corpus(cfg.out / "data" / "train")
    vocab = tok.Vocabulary.load(cfg.out / "vocab.txt")
    tcfg = _train_cfg(cfg, "train")
    init = None
    init_path = cfg.out / "encoder_init.ckpt"
    if init_path.exists():
        init = net.load_checkpoint(init_path).encoder
    model, history = tr.train_rnnt(tcfg, train, vocab, init=init)
    net.save_checkpoint(cfg.out / "model.ckpt", model)
    tr.write_metrics_csv(cfg.out / "metrics.csv", history)


def stage_adapt(cfg: ExperimentConfig) -> None:
    adapt_dir = cfg.out / "data" / "adapt"
    if not adapt_dir.exists():
        raise ConfigError("adapt stage needs synth.adapt_utts > 0")
    model = net.load_checkpoint(cfg.out / "model.ckpt")
    vocab = tok.Vocabulary.load(cfg.out / "vocab.txt")
    corpus = ds.read_corpus(adapt_dir)
    scope = FreezeScope(cfg.get("adapt", "scope", "prediction_and_joint"))
    tcfg = _train_cfg(cfg, "adapt", epochs=cfg.getint("adapt", "epochs", 2),
                      lr=cfg.getfloat("adapt", "lr", 2e-3))
    mix_ratio = cfg.getfloat("adapt", "mix_ratio", 0.0)
    mix = None
    if mix_ratio > 0:
        mix = (ds.read_corpus(cfg.out / "data" / "train"), mix_ratio)
    adapted = tr.adapt(model, tcfg, corpus, vocab, scope, mix=mix)
    net.save_checkpoint(cfg.out / "adapted.ckpt", adapted)


def _decode_model_path(cfg: ExperimentConfig) -> Path:
    adapted = cfg.out / "adapted.ckpt"
    return adapted if adapted.exists() else cfg.out / "model.ckpt"


def _decode_one(args):
    state, stacked, beam = args
    model = net.load_state(state)
    hyp = dec.greedy_decode(model, stacked)
    nbest = dec.beam_decode(model, stacked, beam=beam)
    return hyp, nbest


def _decode_corpus(model: net.ModelParams, corpus, vocab, beam: int, jobs: int):
    arch = model.arch
    stacked = [net.stack_frames(u.features, arch.stack_factor).values for u in corpus]
    if jobs > 1:
        state = net.save_state(model)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_decode_one,
                                    [(state, s, beam) for s in stacked]))
    else:
        results = [(dec.greedy_decode(model, s), dec.beam_decode(model, s, beam=beam))
                   for s in stacked]
    return results


def _write_decodes(cfg: ExperimentConfig, name: str, corpus, results, vocab) -> None:
    out_dir = cfg.out / "decode"
    out_dir.mkdir(parents=True, exist_ok=True)
    nbest_rows = []
    greedy_rows = ["utt_id,score,emit_frames,text"]
    for utt, (greedy, nbest) in zip(corpus, results):
        texts = [tok.decode(h.tokens, vocab) for h in nbest.hyps]
        nbest_rows.append((utt.utt_id, nbest, texts))
        frames = ";".join(str(f) for f in greedy.emit_frames)
        greedy_rows.append(
            f"{utt.utt_id},{greedy.score:.9f},{frames},{tok.decode(greedy.tokens, vocab)}")
    dec.write_nbest_csv(out_dir / f"nbest_{name}.csv", nbest_rows)
    (out_dir / f"greedy_{name}.csv").write_text(
        "\n".join(greedy_rows) + "\n", encoding="utf-8")


def stage_decode(cfg: ExperimentConfig) -> None:
    model = net.load_checkpoint(_decode_model_path(cfg))
    vocab = tok.Vocabulary.load(cfg.out / "vocab.txt")
    beam = cfg.getint("decode", "beam", 5)
    train = ds.read_corpus(cfg.out / "data" / "train")
    _, dev = tr.split_corpus(train, cfg.seed)
    test = ds.read_corpus(cfg.out / "data" / "test")
    for name, corpus in (("dev", dev), ("test", test)):
        results = _decode_corpus(model, corpus, vocab, beam, cfg.jobs)
        _write_decodes(cfg, name, corpus, results, vocab)


def _read_nbest_csv(path: Path) -> dict[str, list[tuple[float, str]]]:
    out: dict[str, list[tuple[float, str]]] = {}
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        utt_id, _rank, score, _frames, text = line.split(",", 4)
        out.setdefault(utt_id, []).append((float(score), text))
    return out


def stage_rescore(cfg: ExperimentConfig) -> None:
    lm_path = cfg.out / "data" / "lm_text.txt"
    if not lm_path.exists():
        raise ConfigError("rescore stage needs synth.lm_sentences > 0")
    vocab = tok.Vocabulary.load(cfg.out / "vocab.txt")
    text = lm_path.read_text(encoding="utf-8").splitlines()
    r = "rescore"
    lm_cfg = TrainConfig(arch=net.parse_arch_spec("8p8x1"),
                         lr=cfg.getfloat(r, "lm_lr", 1e-2),
                         epochs=cfg.getint(r, "lm_epochs", 10),
                         batch_size=8, seed=cfg.seed, eval_dev_wer=False)
    lm = lmod.train_lm(text, lm_cfg, vocab,
                       cells=cfg.getint(r, "lm_cells", 24),
                       proj=cfg.getint(r, "lm_proj", 16),
                       layers=cfg.getint(r, "lm_layers", 1))
    lmod.save_lm(cfg.out / "lm.ckpt", lm)
    grid = [float(x) for x in cfg.get(
        r, "lambda_grid", "0.0 0.1 0.2 0.3 0.4 0.5 0.6 0.7 0.8 0.9 1.0").split()]

    def rescore_set(name: str, lam: float) -> list[tuple[str, str]]:
        by_utt = _read_nbest_csv(cfg.out / "decode" / f"nbest_{name}.csv")
        picked = []
        for utt_id, entries in by_utt.items():
            best = None
            for score, text_hyp in entries:
                seq = tok.encode(text_hyp, vocab)
                combined = score + lam * lmod.lm_score(lm, seq) if lam else score
                key = (-combined, seq.ids)
                if best is None or key < best[0]:
                    best = (key, text_hyp)
            picked.append((utt_id, best[1]))
        return picked

    dev = ds.read_corpus(cfg.out / "data" / "train")
    _, dev_set = tr.split_corpus(dev, cfg.seed)
    dev_refs = {u.utt_id: u.transcript for u in dev_set}
    best_lam, best_wer = grid[0], None
    rows = ["lambda,dev_wer"]
    for lam in grid:
        picked = rescore_set("dev", lam)
        score = ev.wer([dev_refs[u] for u, _ in picked], [h for _, h in picked]).wer
        rows.append(f"{lam},{score:.4f}")
        if best_wer is None or score < best_wer - 1e-12:
            best_lam, best_wer = lam, score
    out_dir = cfg.out / "rescore"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "lambda_grid.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    (out_dir / "chosen_lambda.txt").write_text(f"{best_lam}\n", encoding="utf-8")
    picked = rescore_set("test", best_lam)
    lines = ["utt_id,text"] + [f"{u},{h}" for u, h in picked]
    (out_dir / "rescored_test.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _greedy_rows(path: Path) -> dict[str, tuple[list[int], str]]:
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        utt_id, _score, frames, text = line.split(",", 3)
        emit = [int(x) for x in frames.split(";")] if frames else []
        out[utt_id] = (emit, text)
    return out


def stage_eval(cfg: ExperimentConfig) -> None:
    vocab = tok.Vocabulary.load(cfg.out / "vocab.txt")
    model = net.load_checkpoint(_decode_model_path(cfg))
    arch = model.arch
    lookahead = net.total_lookahead(arch)
    model_name = arch.name
    rows = []
    test = ds.read_corpus(cfg.out / "data" / "test")
    refs = {u.utt_id: u for u in test}
    greedy = _greedy_rows(cfg.out / "decode" / "greedy_test.csv")
    ref_list = [refs[u].transcript for u in greedy]
    hyp_list = [text for _, text in greedy.values()]
    wer_out = ev.wer(ref_list, hyp_list)
    stats = ev.merge_delay_stats([
        _delay_for(refs[u], emit, text, vocab, arch.stack_factor)
        for u, (emit, text) in greedy.items()])
    mean_enc_frames = (stats.mean_gap / arch.stack_factor) if stats.gaps else 0.0
    rows.append(ev.ReportRow(
        model=model_name, test_set="test_greedy", wer=wer_out,
        mean_gap_frames=stats.mean_gap if stats.gaps else float("nan"),
        latency_ms=ev.latency_ms(mean_enc_frames, lookahead.frames,
                                 arch.encoder_frame_ms)))
    nbest = _read_nbest_csv(cfg.out / "decode" / "nbest_test.csv")
    beam_refs = [refs[u].transcript for u in nbest]
    beam_hyps = [entries[0][1] for entries in nbest.values()]
    rows.append(ev.ReportRow(model=model_name, test_set="test_beam",
                             wer=ev.wer(beam_refs, beam_hyps),
                             mean_gap_frames=float("nan"), latency_ms=float("nan")))
    rescored = cfg.out / "rescore" / "rescored_test.csv"
    if rescored.exists():
        picked = dict(line.split(",", 1) for line in
                      rescored.read_text(encoding="utf-8").splitlines()[1:])
        rows.append(ev.ReportRow(
            model=model_name, test_set="test_rescored",
            wer=ev.wer([refs[u].transcript for u in picked],
                       list(picked.values())),
            mean_gap_frames=float("nan"), latency_ms=float("nan")))
    ev.write_report_csv(cfg.out / "report.csv", rows)
    if cfg.getbool("eval", "histogram", True):
        ev.write_histogram_csv(cfg.out / "hist.csv", stats)


def _delay_for(utt, emit_frames, text, vocab, stack_factor):
    hyp_tokens = tok.encode(text, vocab)
    if len(hyp_tokens) != len(emit_frames):
        return ev.DelayStats(skipped=1)
    hyp = dec.Hypothesis(tokens=hyp_tokens, score=0.0,
                         emit_frames=tuple(emit_frames))
    return ev.emission_delay(utt.words, hyp, vocab, stack_factor)


_STAGE_FN = {
    "synth": stage_synth,
    "vocab": stage_vocab,
    "pretrain": stage_pretrain,
    "train": stage_train,
    "adapt": stage_adapt,
    "decode": stage_decode,
    "rescore": stage_rescore,
    "eval": stage_eval,
}


def run_experiment(cfg: ExperimentConfig) -> Path:
    """Execute the configured stages in order; completed stages are skipped
    when their manifest hash still matches."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    manifest_dir = cfg.out / "manifest"
    manifest_dir.mkdir(exist_ok=True)
    prev = ""
    for stage in cfg.stages:
        digest = _stage_hash(cfg, stage, prev)
        marker = manifest_dir / f"{stage}.json"
        if marker.exists():
            recorded = json.loads(marker.read_text(encoding="utf-8"))
            if recorded.get("hash") == digest:
                prev = digest
                continue
        try:
            _STAGE_FN[stage](cfg)
        except Exception as exc:
            raise StageError(stage, exc) from exc
        marker.write_text(json.dumps({"stage": stage, "seed": cfg.seed,
                                      "hash": digest}, indent=1),
                          encoding="utf-8")
        prev = digest
    return cfg.out


# ---------------------------------------------------------------------------
# Side commands
# ---------------------------------------------------------------------------

def _print_table(header: list[str], rows: list[list[str]]) -> None:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(header)]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in rows:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)))


def _write_csv(path: str, header: list[str], rows: list[list[str]]) -> None:
    lines = [",".join(header)] + [",".join(r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_tokenize(args) -> int:
    vocab = tok.Vocabulary.load(args.vocab)
    rows = []
    for text in args.text:
        marker, delim = tok.scheme_token_counts(text, vocab)
        rows.append([text, str(marker), str(delim)])
    _print_table(["text", "marker", "delimiter"], rows)
    if args.csv:
        _write_csv(args.csv, ["text", "marker", "delimiter"], rows)
    return 0


def cmd_memsim(args) -> int:
    rows = []
    for labels in [args.labels] + (args.compare_labels or []):
        size = tl.lattice_memory_bytes(args.frames, labels, args.vocab_size,
                                       args.bytes_per)
        rows.append([str(args.frames), str(labels), str(args.vocab_size),
                     str(args.bytes_per), str(size)])
    _print_table(["frames", "labels", "vocab", "bytes_per", "lattice_bytes"], rows)
    if args.csv:
        _write_csv(args.csv, ["frames", "labels", "vocab", "bytes_per",
                              "lattice_bytes"], rows)
    return 0


def cmd_latency(args) -> int:
    run_dir = Path(args.run)
    vocab = tok.Vocabulary.load(run_dir / "vocab.txt")
    adapted = run_dir / "adapted.ckpt"
    model = net.load_checkpoint(adapted if adapted.exists() else run_dir / "model.ckpt")
    arch = model.arch
    corpus = ds.read_corpus(run_dir / "data" / args.set)
    refs = {u.utt_id: u for u in corpus}
    greedy = _greedy_rows(run_dir / "decode" / f"greedy_{args.set}.csv")
    stats = ev.merge_delay_stats([
        _delay_for(refs[u], emit, text, vocab, arch.stack_factor)
        for u, (emit, text) in greedy.items()])
    lookahead = net.total_lookahead(arch)
    mean_enc = (stats.mean_gap / arch.stack_factor) if stats.gaps else float("nan")
    latency = ev.latency_ms(mean_enc, lookahead.frames, arch.encoder_frame_ms) \
        if stats.gaps else float("nan")
    _print_table(["model", "measured_words", "skipped", "mean_gap_frames",
                  "lookahead_ms", "latency_ms"],
                 [[arch.name, str(len(stats.gaps)), str(stats.skipped),
                   f"{stats.mean_gap:.2f}", str(lookahead.ms), f"{latency:.1f}"]])
    ev.write_histogram_csv(args.csv or (run_dir / "hist.csv"), stats)
    return 0


def _grid_corpora(cfg: ExperimentConfig):
    base = _synth_spec(cfg, "domain")
    train = ds.synth_corpus(base, cfg.getint("synth", "train_utts", 60), cfg.seed)
    vocab = tok.build_vocab(ds.transcripts(train),
                            cfg.getint("vocab", "target_size", 30))
    return train, vocab


def cmd_compare_init(args) -> int:
    cfg = load_experiment_config(args.config, out=args.out, seed=args.seed,
                                 jobs=args.jobs)
    train, vocab = _grid_corpora(cfg)
    rows = []
    for seed in range(args.seeds):
        for mode in ("random", "ctc", "ce"):
            tcfg = _train_cfg(cfg, "train", seed=cfg.seed + seed, init=mode)
            encoder = None
            if mode == "ce":
                encoder = tr.pretrain_encoder_ce(tcfg, train, vocab)
            elif mode == "ctc":
                encoder = tr.pretrain_encoder_ctc(tcfg, train, vocab)
            _, history = tr.train_rnnt(tcfg, train, vocab, init=encoder)
            dev = [r for r in history if r.split == "dev" and r.wer is not None]
            rows.append([str(seed), mode, f"{dev[-1].wer:.2f}" if dev else ""])
    _print_table(["seed", "init", "dev_wer"], rows)
    if args.csv:
        _write_csv(args.csv, ["seed", "init", "dev_wer"], rows)
    return 0


def cmd_compare_lookahead(args) -> int:
    cfg = load_experiment_config(args.config, out=args.out, seed=args.seed,
                                 jobs=args.jobs)
    train, vocab = _grid_corpora(cfg)
    rows = []
    for seed in range(args.seeds):
        for arch_name in args.archs:
            arch = net.parse_arch_spec(
                arch_name, feature_dim=cfg.getint("train", "feature_dim", 8),
                stack_factor=cfg.getint("train", "stack_factor", 3))
            tcfg = _train_cfg(cfg, "train", seed=cfg.seed + seed, arch=arch)
            encoder = tr.pretrain_encoder_ce(tcfg, train, vocab)
            model, history = tr.train_rnnt(tcfg, train, vocab, init=encoder)
            dev = [r for r in history if r.split == "dev" and r.wer is not None]
            _, dev_set = tr.split_corpus(train, tcfg.seed)
            stats_parts = []
            for utt in dev_set:
                stacked = net.stack_frames(utt.features, arch.stack_factor).values
                hyp = dec.greedy_decode(model, stacked)
                stats_parts.append(ev.emission_delay(utt.words, hyp, vocab,
                                                     arch.stack_factor))
            stats = ev.merge_delay_stats(stats_parts)
            look = net.total_lookahead(arch)
            rows.append([str(seed), arch_name,
                         f"{dev[-1].wer:.2f}" if dev else "",
                         f"{stats.mean_gap:.2f}" if stats.gaps else "nan",
                         str(look.ms)])
    _print_table(["seed", "arch", "dev_wer", "mean_gap_frames", "lookahead_ms"], rows)
    if args.csv:
        _write_csv(args.csv, ["seed", "arch", "dev_wer", "mean_gap_frames",
                              "lookahead_ms"], rows)
    return 0


def cmd_run(args) -> int:
    cfg = load_experiment_config(args.config, out=args.out, seed=args.seed,
                                 jobs=args.jobs)
    out = run_experiment(cfg)
    print(f"experiment complete: {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transducerlab")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a staged experiment from a config")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--out", default=None)
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--jobs", type=int, default=1)
    run_p.set_defaults(fn=cmd_run)

    tok_p = sub.add_parser("tokenize", help="marker vs delimiter token counts")
    tok_p.add_argument("--vocab", required=True)
    tok_p.add_argument("--csv", default=None)
    tok_p.add_argument("text", nargs="+")
    tok_p.set_defaults(fn=cmd_tokenize)

    mem_p = sub.add_parser("memsim", help="lattice memory accounting")
    mem_p.add_argument("--frames", "-T", type=int, required=True)
    mem_p.add_argument("--labels", "-U", type=int, required=True)
    mem_p.add_argument("--vocab-size", "-V", type=int, required=True)
    mem_p.add_argument("--bytes-per", type=int, default=4)
    mem_p.add_argument("--compare-labels", type=int, nargs="*", default=None)
    mem_p.add_argument("--csv", default=None)
    mem_p.set_defaults(fn=cmd_memsim)

    lat_p = sub.add_parser("latency", help="emission-delay histogram for a run")
    lat_p.add_argument("--run", required=True)
    lat_p.add_argument("--set", default="test")
    lat_p.add_argument("--csv", default=None)
    lat_p.set_defaults(fn=cmd_latency)

    ci_p = sub.add_parser("compare-init", help="matched-seed init comparison")
    ci_p.add_argument("--config", required=True)
    ci_p.add_argument("--seeds", type=int, default=5)
    ci_p.add_argument("--out", default=None)
    ci_p.add_argument("--seed", type=int, default=None)
    ci_p.add_argument("--jobs", type=int, default=1)
    ci_p.add_argument("--csv", default=None)
    ci_p.set_defaults(fn=cmd_compare_init)

    cl_p = sub.add_parser("compare-lookahead",
                          help="matched-seed lookahead comparison")
    cl_p.add_argument("--config", required=True)
    cl_p.add_argument("--seeds", type=int, default=5)
    cl_p.add_argument("--archs", nargs="+", default=["32p16x2", "32p16_2x2"])
    cl_p.add_argument("--out", default=None)
    cl_p.add_argument("--seed", type=int, default=None)
    cl_p.add_argument("--jobs", type=int, default=1)
    cl_p.add_argument("--csv", default=None)
    cl_p.set_defaults(fn=cmd_compare_lookahead)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, configparser.Error) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
