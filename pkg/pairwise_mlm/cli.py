"""
`pmlm` command line.

Every command exits with 0 on success and 1 on any pairwise-mlm error,
whose message goes to stderr. Files written by a command start with a
header record carrying the run's config hash, seed and package version.
"""

import functools
import logging
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import typer

from pairwise_mlm.checkpoint import load_model
from pairwise_mlm.config import get_config
from pairwise_mlm.contacts import (contact_record, range_filter,
                                   read_contact_records, write_contact_records)
from pairwise_mlm.decorators import write_atomically
from pairwise_mlm.dumpers import jsonl_dumper
from pairwise_mlm.evalkit import (CompareConfig, compare_mlm_vs_pmlm,
                                  evaluate_contact_predictor,
                                  evaluate_contact_scores, finetune_contact,
                                  kl_histogram, kl_scan_report,
                                  read_score_maps, save_contact_predictor,
                                  scan_dataset_kl, write_score_maps)
from pairwise_mlm.exceptions import (PairwiseMlmBaseException,
                                     PairwiseMlmTypeError)
from pairwise_mlm.gradcheck import DEFAULT_TOLERANCE, check_model_gradients
from pairwise_mlm.runconfig import RunConfig, load_run_config
from pairwise_mlm.seqio import load_sequences, write_fasta
from pairwise_mlm.synthgen import (PRESET_SPEC_SEED, contacts_from_spec,
                                   load_spec, sample_sequences, save_spec,
                                   spec_to_document, synth_preset)
from pairwise_mlm.trainer import pretrain
from pairwise_mlm.utils import (canonical_hash, dump_to_file, make_rng,
                                output_header, resolve_data_path)

logger = logging.getLogger(__name__)

app = typer.Typer(
    add_completion=False,
    pretty_exceptions_enable=False,
    help="Pairwise masked language modelling for protein sequences.",
)


def _handle_errors(command: Callable) -> Callable:
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except PairwiseMlmBaseException as err:
            typer.echo(f"error: {err}", err=True)
            raise typer.Exit(code=1)

    return wrapper


def _existing(path: Path, what: str) -> Path:
    resolved = resolve_data_path(path)
    if not resolved.exists():
        raise PairwiseMlmTypeError(f"{what} not found: {resolved}")
    return resolved


def _run_config(config: Optional[Path], flags: Dict[str, Any]) -> RunConfig:
    return load_run_config(_existing(config, "config file") if config else None, flags=flags)


def _write_text(path: Path, text: str) -> None:
    write_atomically(text, path)


@app.callback()
def main(
    log_level: Optional[str] = typer.Option(None, "--log-level", help="Overrides PMLM_LOG_LEVEL."),
):
    logging.basicConfig(
        level=(log_level or get_config().log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@app.command("pretrain")
@_handle_errors
def cmd_pretrain(
    data: Path = typer.Option(..., "--data", help="FASTA file or dataset cache."),
    config: Optional[Path] = typer.Option(None, "--config", help="JSON, YAML or TOML run config."),
    out: Path = typer.Option(Path("runs/pretrain"), "--out"),
    preset: Optional[str] = typer.Option(None, "--preset", help="Model preset."),
    steps: Optional[int] = typer.Option(None, "--steps"),
    lambda_: Optional[float] = typer.Option(None, "--lambda", help="Pair loss weight; 0 trains plain MLM."),
    pmlm_only: bool = typer.Option(False, "--pmlm-only", help="Pair head with diagonal pairs, no token head."),
    batch_size: Optional[int] = typer.Option(None, "--batch-size"),
    lr: Optional[float] = typer.Option(None, "--lr"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    threads: int = typer.Option(get_config().threads, "--threads", help="1 keeps runs bitwise reproducible."),
):
    """Pre-trains a model and writes checkpoints plus a metric log."""
    model_flags: Dict[str, Any] = {"lambda": lambda_}
    if pmlm_only:
        model_flags["pmlm_only_with_diagonal"] = True
    run = _run_config(
        config,
        {
            "seed": seed,
            "model_preset": preset,
            "model": model_flags,
            "train": {"total_steps": steps, "batch_size": batch_size, "peak_lr": lr, "threads": threads},
        },
    )
    records = load_sequences(_existing(data, "dataset"), max_len=run.model.max_len)
    dump_to_file(run.to_document(with_meta=True), out / "run_config.yaml")
    result = pretrain(records, run.model, run.train, run.masking, out_dir=out)

    summary = result.summary.get_rendered_str()
    _write_text(out / "summary.txt", summary)
    typer.echo(summary)
    typer.echo(f"checkpoint: {result.checkpoint_path}")


@app.command("gen-synth")
@_handle_errors
def cmd_gen_synth(
    out: Path = typer.Option(Path("synth"), "--out"),
    preset: str = typer.Option("accept-L8", "--preset"),
    spec_path: Optional[Path] = typer.Option(None, "--spec", help="Spec document; overrides --preset."),
    n: int = typer.Option(5000, "--n"),
    seed: int = typer.Option(0, "--seed", help="Drives sampling only."),
    spec_seed: int = typer.Option(PRESET_SPEC_SEED, "--spec-seed", help="Draws the couplings of random presets."),
    gibbs: bool = typer.Option(False, "--gibbs", help="Gibbs sampling instead of exact enumeration."),
    burn_in: int = typer.Option(1000, "--burn-in"),
    thin: int = typer.Option(10, "--thin"),
):
    """Samples a synthetic dataset with its ground-truth contacts and the spec used."""
    spec = load_spec(_existing(spec_path, "spec")) if spec_path else synth_preset(preset, spec_seed=spec_seed)
    mode = "gibbs" if gibbs else "exact"
    kwargs = {"burn_in": burn_in, "thin": thin} if gibbs else {}
    records = sample_sequences(spec, n, make_rng(seed), mode=mode, **kwargs)

    run_hash = canonical_hash({"spec": spec_to_document(spec), "n": n, "mode": mode, **kwargs})
    write_fasta(records, out / "sequences.fasta", header=output_header(run_hash, seed, stream="sequences"))
    write_contact_records(
        [contact_record(r.identifier, r, contacts_from_spec(spec, r.identifier)) for r in records],
        out / "contacts.jsonl",
        run_hash,
        seed,
    )
    save_spec(spec, out / "spec.yaml", meta=output_header(run_hash, seed, kind="meta"))
    typer.echo(f"{len(records)} sequences of length {spec.length}, coupled pairs {list(spec.coupled_pairs)} -> {out}")


@app.command("analyze-kl")
@_handle_errors
def cmd_analyze_kl(
    ckpt: Path = typer.Option(..., "--ckpt"),
    data: Path = typer.Option(..., "--data"),
    pairs: str = typer.Option("all", "--pairs", help="all, a range name, or a list like 0-5,2-7."),
    truth: Optional[Path] = typer.Option(None, "--truth", help="Contact records to flag coupled pairs."),
    width: float = typer.Option(0.1, "--width", help="Histogram bucket width."),
    out: Path = typer.Option(Path("runs/kl"), "--out"),
):
    """Scans KL(P(x_i) P(x_j) || P(x_i, x_j)) over sequence pairs."""
    model, checkpoint = load_model(ckpt)
    records = load_sequences(_existing(data, "dataset"), max_len=model.config.max_len)
    truths = {r.identifier: r.contact_map for r in read_contact_records(_existing(truth, "truth"))} if truth else None

    kl_records = scan_dataset_kl(model, records, pairs, truths)
    config_hash = checkpoint.manifest.get("config_hash", model.config.config_hash)
    seed = int(checkpoint.manifest.get("extra", {}).get("train_config", {}).get("seed", 0))

    jsonl_dumper(
        [output_header(config_hash, seed, stream="kl")] + [r.model_dump(mode="json") for r in kl_records],
        out / "kl.jsonl",
    )
    jsonl_dumper(
        [output_header(config_hash, seed, stream="kl_histogram", width=width)]
        + [{"bucket_low": low, "count": count} for low, count in kl_histogram(kl_records, width)],
        out / "kl_histogram.jsonl",
    )
    report = kl_scan_report(kl_records, config_hash, pairs, width, seed=seed).get_rendered_str()
    _write_text(out / "kl_summary.txt", report)
    typer.echo(report)


def _range(name: str, strict: bool, min_sep: Optional[int]):
    return range_filter(name, strict=strict, min_sep=min_sep)


@app.command("finetune-contact")
@_handle_errors
def cmd_finetune_contact(
    ckpt: Path = typer.Option(..., "--ckpt"),
    contacts: Path = typer.Option(..., "--contacts", help="Labeled contact records used for training."),
    eval_contacts: Optional[Path] = typer.Option(None, "--eval-contacts", help="Held-out contact records."),
    config: Optional[Path] = typer.Option(None, "--config"),
    mode: Optional[str] = typer.Option(None, "--mode", help="probe (frozen encoder) or full."),
    epochs: Optional[int] = typer.Option(None, "--epochs"),
    lr: Optional[float] = typer.Option(None, "--lr"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    range_name: str = typer.Option("medium-long", "--range"),
    strict: bool = typer.Option(False, "--strict", help="Reads the separation bound as strictly greater."),
    min_sep: Optional[int] = typer.Option(None, "--min-sep", help="Separation for --range custom."),
    out: Path = typer.Option(Path("runs/contact"), "--out"),
):
    """Fits a contact head on a pre-trained checkpoint and scores the evaluation set."""
    run = _run_config(config, {"seed": seed, "finetune": {"mode": mode, "epochs": epochs, "lr": lr}})
    model, checkpoint = load_model(ckpt)
    labeled = read_contact_records(_existing(contacts, "contact records"))
    result = finetune_contact(model, labeled, run.finetune)
    save_contact_predictor(result.predictor, out / "finetuned.ckpt", extra={"finetune": run.finetune.model_dump()})

    held_out = read_contact_records(_existing(eval_contacts, "contact records")) if eval_contacts else labeled
    scores = {item.identifier: result.predictor.scores(item.sequence) for item in held_out}
    write_score_maps(scores, out / "scores.jsonl", run.finetune.config_hash, run.finetune.seed)
    jsonl_dumper(
        [output_header(run.finetune.config_hash, run.finetune.seed, stream="finetune")]
        + [r.model_dump(mode="json") for r in result.history],
        out / "finetune.jsonl",
    )

    report = evaluate_contact_predictor(
        result.predictor,
        held_out,
        _range(range_name, strict, min_sep),
        config_hash=run.finetune.config_hash,
        seed=run.finetune.seed,
    )
    text = report.get_rendered_str()
    _write_text(out / "contact_summary.txt", text)
    typer.echo(text)


@app.command("eval-contact")
@_handle_errors
def cmd_eval_contact(
    scores: Path = typer.Option(..., "--scores"),
    truth: Path = typer.Option(..., "--truth"),
    range_name: str = typer.Option("medium-long", "--range"),
    strict: bool = typer.Option(False, "--strict"),
    min_sep: Optional[int] = typer.Option(None, "--min-sep"),
    out: Optional[Path] = typer.Option(None, "--out", help="Writes per-record precision as JSON lines."),
):
    """Precision of the top L, L/2 and L/5 ranked pairs against true contacts."""
    score_maps = read_score_maps(_existing(scores, "score file"))
    truths = [r.contact_map for r in read_contact_records(_existing(truth, "truth"))]
    pair_filter = _range(range_name, strict, min_sep)
    report = evaluate_contact_scores(score_maps, truths, pair_filter)
    if out is not None:
        jsonl_dumper(
            [output_header(pair_filter.config_hash, 0, stream="contact_eval")]
            + [r.model_dump(mode="json") for r in report.records],
            out,
        )
    typer.echo(report.get_rendered_str())


@app.command("compare")
@_handle_errors
def cmd_compare(
    config: Optional[Path] = typer.Option(None, "--config"),
    preset: str = typer.Option("accept-L8", "--preset", help="Synthetic spec preset."),
    spec_path: Optional[Path] = typer.Option(None, "--spec"),
    spec_seed: int = typer.Option(PRESET_SPEC_SEED, "--spec-seed", help="Draws the couplings of random presets."),
    steps: Optional[int] = typer.Option(None, "--steps"),
    n_pretrain: int = typer.Option(5000, "--n-pretrain"),
    n_finetune: int = typer.Option(200, "--n-finetune"),
    n_heldout: int = typer.Option(100, "--n-heldout"),
    lambda_: float = typer.Option(1.0, "--lambda", help="λ of the pair-loss arm."),
    min_sep: int = typer.Option(2, "--min-sep", help="Contact separation used for ranking."),
    seed: Optional[int] = typer.Option(None, "--seed"),
    threads: int = typer.Option(get_config().threads, "--threads"),
    out: Path = typer.Option(Path("runs/compare"), "--out"),
):
    """Pre-trains an MLM arm and an MLM+PMLM arm on synthetic data and compares them."""
    run = _run_config(config, {"seed": seed, "train": {"total_steps": steps, "threads": threads}})
    spec = load_spec(_existing(spec_path, "spec")) if spec_path else synth_preset(preset, spec_seed=spec_seed)
    cfg = CompareConfig(
        synth_preset=preset,
        spec_seed=spec_seed,
        n_pretrain=n_pretrain,
        n_finetune=n_finetune,
        n_heldout=n_heldout,
        model=run.model,
        train=run.train,
        masking=run.masking,
        finetune=run.finetune,
        pmlm_lambda=lambda_,
        contact_min_sep=min_sep,
        seed=run.seed,
    )
    report = compare_mlm_vs_pmlm(spec, cfg, out_dir=out)
    text = report.get_rendered_str()
    _write_text(out / "compare_summary.txt", text)
    typer.echo(text)


@app.command("gradcheck")
@_handle_errors
def cmd_gradcheck(
    config: str = typer.Option("tiny", "--config", help="Model preset to check."),
    seed: int = typer.Option(0, "--seed"),
    tolerance: float = typer.Option(DEFAULT_TOLERANCE, "--tolerance"),
    max_elements: int = typer.Option(16, "--max-elements", help="Elements checked per parameter."),
):
    """Compares analytic gradients with central finite differences; exits 1 on failure."""
    report = check_model_gradients(
        preset=config, seed=seed, tolerance=tolerance, max_elements_per_param=max_elements
    )
    typer.echo(report.get_rendered_str())
    if not report.passed:
        typer.echo(f"gradient check failed, worst parameter: {report.worst.param_name}", err=True)
        raise typer.Exit(code=1)


if __name__ == "__main__":
    app()
