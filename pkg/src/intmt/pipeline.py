"""Experiment drivers behind the command-line interface.

Each driver writes its tab-separated outputs into the run directory and
renders the matching figure next to them: training emits ``metrics.tsv``
plus ``loss_curve.png``, evaluation emits ``report.tsv`` plus
``report.png``.  All paths hang off ``config.workdir``.
"""

from __future__ import annotations

import os
from statistics import fmean

import numpy as np

from . import config as C
from . import tensor as T
from .bleu import corpus_bleu
from .checkpoint import (
    apply_entries_to_model,
    entries_from_model,
    load_checkpoint,
    save_checkpoint,
)
from .data import (
    endless_batches,
    epoch_batches,
    make_pairs,
    read_corpus,
    sentence_to_text,
    split_pairs,
    write_corpus,
)
from .decoding import decode_corpus
from .errors import ConfigurationError
from .figures import save_eval_figure, save_loss_curve
from .model import (
    EOS_ID,
    MODE_FAKE,
    MODE_FP32,
    PAD_ID,
    ScalarRegistry,
    Transformer,
    expected_site_counts,
)
from .schedule import (
    ALL_PHASES,
    Adam,
    QatSchedule,
    lr_factor,
    select_checkpoint,
    train_step,
)
from .seeding import substream

SPLITS = ("train", "valid", "test")


# -- run directory layout -------------------------------------------------

def data_prefix(cfg: C.RunConfig, split: str) -> str:
    return os.path.join(cfg.workdir, "data", split)


def fp32_dir(cfg: C.RunConfig) -> str:
    return os.path.join(cfg.workdir, "fp32")


def qat_dir(cfg: C.RunConfig, joint: bool = False) -> str:
    tag = "joint" if joint else "qat"
    return os.path.join(cfg.workdir, f"{tag}-int{cfg.bits}")


def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def load_split(cfg: C.RunConfig, split: str):
    if split not in SPLITS:
        raise ConfigurationError(f"unknown split {split!r}, expected one of {SPLITS}")
    return read_corpus(data_prefix(cfg, split), vocab_size=cfg.vocab_size)


# -- shared helpers --------------------------------------------------------

def shift_targets(tgt: np.ndarray) -> np.ndarray:
    """Decoder input: end-of-sequence symbol, then the target minus its tail."""
    bos = np.full((tgt.shape[0], 1), EOS_ID, dtype=tgt.dtype)
    return np.concatenate([bos, tgt[:, :-1]], axis=1)


def token_accuracy(model: Transformer, pairs, batch_size: int) -> float:
    """Teacher-forced argmax accuracy over non-pad target positions."""
    was_training = model.training
    model.training = False
    correct = total = 0
    for src, tgt in epoch_batches(pairs, batch_size):
        with T.no_grad():
            logits = model.forward(src, shift_targets(tgt)).data
        pred = logits.argmax(axis=-1)
        mask = tgt != PAD_ID
        correct += int((pred[mask] == tgt[mask]).sum())
        total += int(mask.sum())
    model.training = was_training
    return correct / total


def decode_pairs(model: Transformer, pairs, params):
    """Beam-decode the sources; returns (candidates, references, truncated)."""
    was_training = model.training
    model.training = False
    hyps, truncated = decode_corpus(model, [s for s, _ in pairs], params)
    model.training = was_training
    cands = [sentence_to_text(ids) for ids in hyps]
    refs = [sentence_to_text(t) for _, t in pairs]
    return cands, refs, truncated


def validation_bleu(model: Transformer, pairs, params) -> float:
    cands, refs, _ = decode_pairs(model, pairs, params)
    return corpus_bleu(cands, refs, lowercase=True)


def snapshot_state(model: Transformer):
    return ([p.data.copy() for p in model.parameters()],
            [th.z for th in model.registry.scalars()])


def restore_state(model: Transformer, state) -> None:
    arrays, zs = state
    for p, a in zip(model.parameters(), arrays):
        p.data = a.copy()
    for th, z in zip(model.registry.scalars(), zs):
        th.z = z


def _metrics_line(step: int, phase: int, loss: float, lrf: float) -> str:
    return f"{step}\t{phase}\t{loss:.6f}\t{lrf:.8f}\n"


# -- generate-data ----------------------------------------------------------

def generate_data(cfg: C.RunConfig, log=print) -> dict:
    """Write deterministic train/valid/test corpora under the workdir."""
    spec = C.task_spec(cfg)
    pairs = make_pairs(spec, cfg.pairs, cfg.seed)
    splits = split_pairs(pairs, cfg.train_frac, cfg.valid_frac)
    out = {}
    for split in SPLITS:
        part = splits[split]
        src_path, tgt_path = write_corpus(data_prefix(cfg, split), part)
        out[split] = len(part)
        log(f"{split}: {len(part)} pairs -> {src_path}, {tgt_path}")
    return out


# -- train-fp32 -------------------------------------------------------------

def run_train_fp32(cfg: C.RunConfig, resume: str | None = None,
                   log=print) -> tuple[str, dict]:
    """Train the float baseline; keep the best-validation snapshot."""
    train_pairs = load_split(cfg, "train")
    valid_pairs = load_split(cfg, "valid")[:cfg.eval_sentences]

    model = Transformer(C.model_config(cfg), seed=cfg.seed)
    model.set_mode(MODE_FP32)
    model.training = True
    opt = Adam(model.parameters(), base_rate=cfg.base_rate, warmup=cfg.warmup)

    start = 0
    if resume is not None:
        _, meta, entries = load_checkpoint(resume)
        if meta.get("kind") != "fp32":
            raise ConfigurationError(
                f"cannot resume fp32 training from a {meta.get('kind')!r} checkpoint")
        apply_entries_to_model(model, entries)
        start = int(meta.get("step", "0"))
        opt.t = start
        log(f"resumed from {resume} at step {start}")
    if start >= cfg.fp32_steps:
        raise ConfigurationError(
            f"nothing to train: resumed step {start} >= fp32_steps {cfg.fp32_steps}")

    out_dir = _ensure_dir(fp32_dir(cfg))
    metrics_path = os.path.join(out_dir, "metrics.tsv")
    batches = endless_batches(train_pairs, cfg.batch_size,
                              substream(cfg.seed, "shuffle"))
    rows = []
    best_acc, best_state, best_step = -1.0, None, 0
    try:
        with open(metrics_path, "w") as mf:
            for t in range(start + 1, cfg.fp32_steps + 1):
                src, tgt = next(batches)
                loss = train_step(model, opt, src, tgt)
                row = (t, 0, loss, lr_factor(opt.t, opt.warmup))
                rows.append(row)
                mf.write(_metrics_line(*row))
                if t % cfg.eval_interval == 0 or t == cfg.fp32_steps:
                    acc = token_accuracy(model, valid_pairs, cfg.batch_size)
                    log(f"step {t}  loss {loss:.4f}  valid token acc {acc:.4f}")
                    if acc >= best_acc:  # ties go to the later snapshot
                        best_acc, best_state, best_step = acc, snapshot_state(model), t
    finally:
        if rows:
            save_loss_curve(rows, os.path.join(out_dir, "loss_curve.png"),
                            title="fp32 training")

    restore_state(model, best_state)
    path = os.path.join(out_dir, "model.qatf")
    meta = {"kind": "fp32", "step": str(cfg.fp32_steps),
            "best_step": str(best_step), "valid_acc": repr(best_acc)}
    save_checkpoint(path, serialize_config_snapshot(cfg), meta,
                    entries_from_model(model, quantized=False))
    log(f"saved {path} (best step {best_step}, valid token acc {best_acc:.4f})")
    return path, {"valid_acc": best_acc, "best_step": best_step,
                  "metrics": metrics_path}


def serialize_config_snapshot(cfg: C.RunConfig) -> str:
    return C.serialize_config(cfg)


# -- qat ---------------------------------------------------------------------

def run_qat(cfg: C.RunConfig, fp32_checkpoint: str, joint: bool = False,
            log=print) -> tuple[str | None, dict]:
    """Six-phase threshold training starting from the float baseline.

    With ``joint=True`` runs the simultaneous weights-plus-thresholds
    variant instead (no calibration, scales start at 1.0); it exists to
    show why the staged schedule is needed and exports no checkpoint.
    """
    _, meta, entries = load_checkpoint(fp32_checkpoint)
    if meta.get("kind") != "fp32":
        raise ConfigurationError(
            f"qat starts from an fp32 checkpoint, got kind={meta.get('kind')!r}")

    model = Transformer(C.model_config(cfg), seed=cfg.seed)
    expected = ScalarRegistry.expected_count(cfg.n_layers)
    assert len(model.registry) == expected, (
        f"registry holds {len(model.registry)} thresholds, "
        f"formula 28N+1 gives {expected}")
    apply_entries_to_model(model, entries)
    model.set_mode(MODE_FAKE)  # phase masks toggle the quantize flags
    model.training = True
    opt = Adam(model.parameters(), model.registry.scalars(),
               base_rate=cfg.base_rate, warmup=cfg.warmup)

    train_pairs = load_split(cfg, "train")
    valid_pairs = load_split(cfg, "valid")[:cfg.eval_sentences]
    batches = endless_batches(train_pairs, cfg.batch_size,
                              substream(cfg.seed, "shuffle"))
    out_dir = _ensure_dir(qat_dir(cfg, joint=joint))
    metrics_path = os.path.join(out_dir, "metrics.tsv")

    if joint:
        return _run_joint(cfg, model, opt, batches, out_dir, metrics_path, log)

    plan = C.phase_plan(cfg)
    sched = QatSchedule(model, plan, opt)
    beam = C.beam_params(cfg)
    rows = []
    phase_means = {}
    candidates = []  # (state, validation BLEU) from the fine-tune phases
    try:
        with open(metrics_path, "w") as mf:
            def emit(step, phase, loss, lrf):
                rows.append((step, phase, loss, lrf))
                mf.write(_metrics_line(step, phase, loss, lrf))

            for phase in ALL_PHASES:
                if not plan.enabled(phase):
                    continue
                losses = sched.run_phase(phase, batches, log=emit)
                if losses:
                    phase_means[phase] = fmean(losses)
                    log(f"phase {phase}: {len(losses)} steps, "
                        f"mean loss {phase_means[phase]:.4f}")
                if phase in (5, 6) and losses:
                    score = validation_bleu(model, valid_pairs, beam)
                    candidates.append((snapshot_state(model), score))
                    log(f"phase {phase} candidate: valid BLEU {score:.2f}")
    finally:
        if rows:
            save_loss_curve(rows, os.path.join(out_dir, "loss_curve.png"),
                            title=f"qat int{cfg.bits}")

    if candidates:
        best = select_checkpoint([(i, s) for i, (_, s) in enumerate(candidates)])
        restore_state(model, candidates[best][0])
        log(f"selected fine-tune candidate {best + 1}/{len(candidates)} "
            f"(valid BLEU {candidates[best][1]:.2f})")

    out_entries = entries_from_model(model, quantized=True)
    n_thresholds = sum(1 for e in out_entries if e.kind == 2)
    assert n_thresholds == expected, (
        f"exported {n_thresholds} thresholds, formula gives {expected}")
    path = os.path.join(out_dir, "model.qatf")
    out_meta = {"kind": "qat", "bits": str(cfg.bits), "step": str(opt.t),
                "source": os.path.basename(fp32_checkpoint)}
    save_checkpoint(path, serialize_config_snapshot(cfg), out_meta, out_entries)
    log(f"saved {path} ({n_thresholds} threshold entries)")
    return path, {"phase_means": phase_means, "metrics": metrics_path,
                  "candidates": [s for _, s in candidates]}


def _run_joint(cfg, model, opt, batches, out_dir, metrics_path, log):
    """Weights and thresholds trained together from scale 1.0.

    Activations are quantized against uncalibrated unit scales from the
    first step, so the model trains through severe rounding noise; the
    loss typically stalls far above the staged schedule's or diverges.
    """
    for th in model.registry.scalars():
        th.z = 0.0
        th.frozen = False
    for p in model.parameters():
        p.frozen = False
    model.quantize_weights = True
    model.quantize_acts = True

    total = sum(cfg.phase_steps)
    rows = []
    try:
        with open(metrics_path, "w") as mf:
            for t in range(1, total + 1):
                src, tgt = next(batches)
                loss = train_step(model, opt, src, tgt)
                row = (t, 0, loss, lr_factor(opt.t, opt.warmup))
                rows.append(row)
                mf.write(_metrics_line(*row))
                if t % cfg.eval_interval == 0:
                    log(f"joint step {t}  loss {loss:.4f}")
    finally:
        if rows:
            save_loss_curve(rows, os.path.join(out_dir, "loss_curve.png"),
                            title=f"joint int{cfg.bits} (demonstration)")

    if not rows:
        raise ConfigurationError("joint run has a zero step budget")
    head = fmean(r[2] for r in rows[:20])
    tail = fmean(r[2] for r in rows[-20:])
    log(f"joint run finished without convergence machinery: first-20 mean "
        f"loss {head:.4f}, last-20 mean loss {tail:.4f}")
    log("no checkpoint exported; the staged schedule is the supported path")
    return None, {"metrics": metrics_path, "head_loss": head, "tail_loss": tail}


# -- eval ---------------------------------------------------------------------

MODE_ALIASES = {"fp32": "fp32", "fake": "fake_quant", "int": "int_infer"}


def _report_path_pair(out_dir: str) -> tuple[str, str]:
    return os.path.join(out_dir, "report.tsv"), os.path.join(out_dir, "report.png")


def read_report(path: str) -> dict:
    out = {}
    try:
        with open(path) as f:
            for line in f:
                if line.strip():
                    key, _, value = line.rstrip("\n").partition("\t")
                    out[key] = value
    except OSError as e:
        raise ConfigurationError(f"cannot read baseline report {path}: {e}") from e
    return out


def write_report(report: dict, out_dir: str) -> tuple[str, str]:
    tsv, png = _report_path_pair(_ensure_dir(out_dir))
    with open(tsv, "w") as f:
        for key, value in report.items():
            rendered = repr(value) if isinstance(value, float) else str(value)
            f.write(f"{key}\t{rendered}\n")
    save_eval_figure(report, png)
    return tsv, png


def run_eval(checkpoint: str, mode: str, cfg: C.RunConfig | None = None,
             bits: int | None = None, beam: int | None = None,
             alpha: float | None = None, seed: int | None = None,
             split: str = "test", baseline: str | None = None,
             out_dir: str | None = None, log=print) -> tuple[dict, str]:
    """Decode a corpus with the checkpointed model and score it.

    The checkpoint's embedded config drives model shape and data paths;
    an explicit config (if any) must agree on the model dimensions.
    """
    if mode not in MODE_ALIASES:
        raise ConfigurationError(
            f"unknown mode {mode!r}, expected one of {tuple(MODE_ALIASES)}")
    cfg_text, meta, entries = load_checkpoint(checkpoint)
    snap = C.parse_config(cfg_text) if cfg_text.strip() else None
    if cfg is None:
        if snap is None:
            raise ConfigurationError(
                f"{checkpoint} carries no config snapshot; pass --config")
        cfg = snap
    elif snap is not None:
        for name in ("n_layers", "d_model", "n_heads", "d_ff",
                     "vocab_size", "model_max_len"):
            if getattr(cfg, name) != getattr(snap, name):
                raise ConfigurationError(
                    f"config disagrees with checkpoint on {name}: "
                    f"{getattr(cfg, name)} vs {getattr(snap, name)}")
    if seed is not None:
        cfg = C.with_overrides(cfg, seed=seed)

    kind = meta.get("kind", "fp32")
    ckpt_bits = int(meta["bits"]) if "bits" in meta else None
    if mode == "fp32":
        if kind != "fp32":
            raise ConfigurationError(
                f"mode fp32 needs an fp32 checkpoint; {checkpoint} is "
                f"kind={kind!r} (bits={ckpt_bits})")
        model_cfg = C.model_config(cfg)
    else:
        if kind != "qat":
            raise ConfigurationError(
                f"mode {mode!r} needs a quantized checkpoint; {checkpoint} "
                f"is kind={kind!r}")
        if bits is not None and bits != ckpt_bits:
            raise ConfigurationError(
                f"--bits {bits} does not match checkpoint bits {ckpt_bits}")
        model_cfg = C.model_config(cfg, mode_bits=ckpt_bits)

    model = Transformer(model_cfg, seed=cfg.seed)
    apply_entries_to_model(model, entries)
    if mode == "int":
        model.prepare_int_inference()
    else:
        model.set_mode(MODE_ALIASES[mode])
    model.training = False

    pairs = load_split(cfg, split)[:cfg.eval_sentences]
    params = C.beam_params(cfg, beam=beam, alpha=alpha)
    cands, refs, truncated = decode_pairs(model, pairs, params)

    report = {
        "checkpoint": os.path.basename(checkpoint),
        "mode": MODE_ALIASES[mode],
        "bits": ckpt_bits if ckpt_bits is not None else 32,
        "split": split,
        "sentences": len(pairs),
        "beam_size": params.beam_size,
        "alpha": params.alpha,
        "bleu_cased": corpus_bleu(cands, refs, lowercase=False),
        "bleu_uncased": corpus_bleu(cands, refs, lowercase=True),
        "token_accuracy": token_accuracy(model, pairs, cfg.batch_size),
        "truncated": truncated,
    }
    if baseline is not None:
        base = read_report(baseline)
        try:
            base_bleu = float(base["bleu_uncased"])
        except (KeyError, ValueError) as e:
            raise ConfigurationError(
                f"baseline report {baseline} lacks a bleu_uncased value") from e
        report["baseline_bleu"] = base_bleu
        report["relative_bleu"] = (100.0 * report["bleu_uncased"] / base_bleu
                                   if base_bleu > 0 else 0.0)

    if out_dir is None:
        out_dir = os.path.join(os.path.dirname(os.path.abspath(checkpoint)),
                               f"eval-{mode}-{split}")
    tsv, _ = write_report(report, out_dir)

    log(f"BLEU cased:     {report['bleu_cased']:.2f}")
    log(f"BLEU uncased:   {report['bleu_uncased']:.2f}")
    log(f"token accuracy: {report['token_accuracy']:.4f}")
    if truncated:
        log(f"truncated:      {truncated}/{len(pairs)}")
    if "relative_bleu" in report:
        log(f"relative BLEU:  {report['relative_bleu']:.2f}% of baseline "
            f"({base_bleu:.2f})")
    log(f"report: {tsv}")
    return report, tsv


# -- inspect --------------------------------------------------------------------

_KIND_NAMES = {0: "fp32", 1: "int", 2: "threshold"}


def inspect_checkpoint(path: str) -> str:
    """Human-readable listing of a checkpoint's header and entries."""
    cfg_text, meta, entries = load_checkpoint(path)
    lines = [f"checkpoint {path}"]
    kind = meta.get("kind", "?")
    lines.append(f"  kind {kind}   bits {meta.get('bits', '-')}   "
                 f"step {meta.get('step', '-')}")

    expected = None
    if cfg_text.strip():
        snap = C.parse_config(cfg_text)
        counts = expected_site_counts(snap.n_layers)
        expected = counts["thresholds"]
        lines.append(f"  model {snap.n_layers} layers, d_model {snap.d_model}, "
                     f"{snap.n_heads} heads, d_ff {snap.d_ff}, "
                     f"vocab {snap.vocab_size}")
        lines.append(f"  structure {counts['dense']} dense sites, "
                     f"{counts['matmul']} matmul sites, "
                     f"{counts['thresholds']} threshold scalars")

    by_kind = {0: 0, 1: 0, 2: 0}
    lines.append("  entries:")
    for e in entries:
        by_kind[e.kind] += 1
        if e.kind == 2:
            detail = f"z={e.z:+.4f}"
        elif e.kind == 1:
            detail = (f"shape={e.shape} bits={e.int_tensor.bits} "
                      f"scale={e.int_tensor.scale:.3e}")
        else:
            detail = f"shape={e.shape}"
        lines.append(f"    {e.name:<24} {_KIND_NAMES[e.kind]:<9} {detail}")
    lines.append(f"  totals: {by_kind[0]} fp32, {by_kind[1]} int, "
                 f"{by_kind[2]} threshold")

    if expected is not None and by_kind[2] > 0:
        verdict = "OK" if by_kind[2] == expected else "MISMATCH"
        lines.append(f"  registry check: {verdict} "
                     f"({by_kind[2]} threshold entries, formula {expected})")
    lines.append("  checksum: OK")
    return "\n".join(lines)
