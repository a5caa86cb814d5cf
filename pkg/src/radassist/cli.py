"""Command-line entry points for every pipeline stage.

All subcommands accept ``--config <file>`` (JSON or YAML mapping of option
names to values; explicit flags win) and ``--seed``. Exit status is 0 on
success, 2 on usage errors and 1 otherwise, with a one-line
``error: <message>`` on stderr.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import __version__
from .errors import ConfigError


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    text = Path(path).read_text("utf-8")
    if path.endswith((".yaml", ".yml")):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return data


def common_options(f):
    f = click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                     help="JSON/YAML file with option defaults.")(f)
    f = click.option("--seed", type=int, default=None, help="Random seed.")(f)
    return f


def stack_options(f):
    f = click.option("--vision", "vision_dir", type=click.Path(), default=None)(f)
    f = click.option("--classifier", "classifier_dir", type=click.Path(), default=None)(f)
    f = click.option("--base", "base_dir", type=click.Path(), default=None)(f)
    f = click.option("--adapter", "adapter_dir", type=click.Path(), default=None)(f)
    return f


def resolve(cfg: dict, **pairs):
    """Flag value if given, else config-file value, else hard default."""
    out = {}
    for name, (flag_value, default) in pairs.items():
        if flag_value is not None:
            out[name] = flag_value
        elif name in cfg:
            out[name] = cfg[name]
        else:
            out[name] = default
    return out


def run_guarded(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as exc:  # noqa: BLE001 - single-line machine-parsable error
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(1)

    return wrapper


def _encoder_channels(image_size: int) -> tuple[int, ...]:
    return (16, 32, 64, 128, 256) if image_size >= 224 else (8, 16, 32, 64, 128)


def _load_corpus_and_split(corpus_dir: str, part: str | None):
    from .corpus import CorpusSplit, load_corpus

    studies = load_corpus(corpus_dir)
    split_file = Path(corpus_dir) / "splits.json"
    split = None
    if split_file.exists():
        split = CorpusSplit.from_dict(json.loads(split_file.read_text("utf-8")))
    if part is None:
        return studies, split, studies
    if split is None:
        raise ConfigError(f"no splits.json in {corpus_dir}; run build-corpus first")
    return studies, split, split.subset(studies, part)


@click.group()
@click.version_option(version=__version__, prog_name="radassist")
def main():
    """Chest X-ray report generation and dialog: data, training, eval, serving."""


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------

@main.command("build-corpus")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--n", type=int, default=None)
@click.option("--prevalence", type=float, default=None)
@click.option("--image-size", type=int, default=None)
@click.option("--fractions", type=str, default=None, help="train,val,test e.g. 0.8,0.1,0.1")
@common_options
@run_guarded
def build_corpus_cmd(out_dir, n, prevalence, image_size, fractions, config_path, seed):
    """Generate a deterministic synthetic corpus with splits."""
    from .corpus import save_corpus, split_corpus, synth_corpus

    cfg = _load_config_file(config_path)
    opts = resolve(
        cfg, n=(n, 500), prevalence=(prevalence, 0.22), image_size=(image_size, 128),
        fractions=(fractions, "0.8,0.1,0.1"), seed=(seed, 7),
    )
    fracs = tuple(float(x) for x in str(opts["fractions"]).split(","))
    if len(fracs) != 3:
        raise ConfigError("fractions must have three comma-separated values")
    studies = synth_corpus(
        seed=opts["seed"], n=opts["n"], label_prevalences=opts["prevalence"],
        image_size=opts["image_size"],
    )
    save_corpus(studies, out_dir)
    split = split_corpus(studies, fracs, seed=opts["seed"])
    (Path(out_dir) / "splits.json").write_text(json.dumps(split.to_dict(), indent=2), "utf-8")
    click.echo(
        f"wrote {len(studies)} studies to {out_dir} "
        f"(train={len(split.train)} val={len(split.validation)} test={len(split.test)})"
    )


@main.command("build-instruct")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--total", type=int, default=None)
@click.option("--base-lm", "base_lm_ref", type=str, default=None)
@click.option("--part", type=str, default="train")
@click.option("--use-indication", is_flag=True, default=False)
@common_options
@run_guarded
def build_instruct_cmd(corpus_dir, out_dir, total, base_lm_ref, part, use_indication, config_path, seed):
    """Build the eight-task instruct dataset from one corpus split."""
    from .adapt import lm_client
    from .instruct import build_instruct_dataset, save_instruct
    from .prompts import TASKS

    cfg = _load_config_file(config_path)
    opts = resolve(
        cfg, total=(total, None), base_lm_ref=(base_lm_ref, "stub:desk"), seed=(seed, 7),
    )
    _, _, studies = _load_corpus_and_split(corpus_dir, part)
    mixture = cfg.get("mixture", {t: 1.0 for t in TASKS})
    client = lm_client(opts["base_lm_ref"])
    samples, manifest = build_instruct_dataset(
        studies, mixture, client, seed=opts["seed"], total=opts["total"],
        use_indication=use_indication,
    )
    path = save_instruct(samples, manifest, out_dir)
    click.echo(f"wrote {len(samples)} samples to {path} (counts={manifest['counts']})")


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@main.group()
def train():
    """Train one pipeline stage."""


@train.command("alignment")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--warmup-steps", type=int, default=None)
@click.option("--lm-width", type=int, default=None)
@click.option("--freeze-encoder", is_flag=True, default=False)
@common_options
@run_guarded
def train_alignment_cmd(corpus_dir, out_dir, epochs, batch_size, warmup_steps, lm_width,
                        freeze_encoder, config_path, seed):
    from .vision import AlignTrainConfig, VisionConfig, train_alignment

    cfg = _load_config_file(config_path)
    opts = resolve(
        cfg, epochs=(epochs, 4), batch_size=(batch_size, 16),
        warmup_steps=(warmup_steps, 1000), lm_width=(lm_width, 128),
        hidden=(None, 96), layers=(None, 2), heads=(None, 4), seed=(seed, 0),
    )
    _, _, studies = _load_corpus_and_split(corpus_dir, "train")
    image_size = studies[0].image.shape[0]
    vis = VisionConfig(
        image_size=image_size, encoder_channels=_encoder_channels(image_size),
        hidden=opts["hidden"], layers=opts["layers"], heads=opts["heads"],
        lm_width=opts["lm_width"], freeze_encoder=freeze_encoder, seed=opts["seed"],
    )
    tc = AlignTrainConfig(
        epochs=opts["epochs"], batch_size=opts["batch_size"],
        warmup_steps=opts["warmup_steps"], seed=opts["seed"], vision=vis,
    )
    out = train_alignment(studies, tc, out_dir)
    click.echo(f"alignment checkpoint at {out}")


@train.command("classifier")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@common_options
@run_guarded
def train_classifier_cmd(corpus_dir, out_dir, epochs, batch_size, lr, config_path, seed):
    from .classifier import ClassifierConfig, ClassifierTrainConfig, train_classifier

    cfg = _load_config_file(config_path)
    opts = resolve(
        cfg, epochs=(epochs, 6), batch_size=(batch_size, 16), lr=(lr, 5e-5), seed=(seed, 0),
    )
    studies, split, _ = _load_corpus_and_split(corpus_dir, "train")
    image_size = studies[0].image.shape[0]
    model_cfg = ClassifierConfig(
        image_size=image_size, encoder_channels=_encoder_channels(image_size), seed=opts["seed"],
    )
    tc = ClassifierTrainConfig(
        epochs=opts["epochs"], batch_size=opts["batch_size"], lr=opts["lr"],
        seed=opts["seed"], model=model_cfg,
    )
    out = train_classifier(studies, split, tc, out_dir)
    click.echo(f"classifier checkpoint at {out}")


@train.command("lm")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--instruct", "instruct_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--lr-min", type=float, default=None, help="Cosine-decay floor (default: constant LR).")
@click.option("--warmup-steps", type=int, default=None)
@click.option("--d-model", type=int, default=None)
@click.option("--layers", type=int, default=None)
@click.option("--heads", type=int, default=None)
@click.option("--max-seq-len", type=int, default=None)
@common_options
@run_guarded
def train_lm_cmd(corpus_dir, instruct_path, out_dir, epochs, batch_size, lr, lr_min,
                 warmup_steps, d_model, layers, heads, max_seq_len, config_path, seed):
    """Train the toy base LM from scratch on dialog-formatted instruct data."""
    from .adapt import BaseTrainConfig, LMConfig, train_base_lm
    from .instruct import load_instruct
    from .pipeline import build_pipeline_tokenizer, prepare_examples

    cfg = _load_config_file(config_path)
    opts = resolve(
        cfg, epochs=(epochs, 10), batch_size=(batch_size, 16), lr=(lr, 1e-3),
        lr_min=(lr_min, None), warmup_steps=(warmup_steps, 0),
        d_model=(d_model, 128), layers=(layers, 3), heads=(heads, 4),
        max_seq_len=(max_seq_len, 384), seed=(seed, 0),
    )
    studies, _, _ = _load_corpus_and_split(corpus_dir, None)
    samples = load_instruct(instruct_path)
    tokenizer = build_pipeline_tokenizer(studies, samples)
    examples = prepare_examples(
        samples, studies, tokenizer, max_seq_len=opts["max_seq_len"],
    )
    tc = BaseTrainConfig(
        epochs=opts["epochs"], batch_size=opts["batch_size"], lr=opts["lr"],
        lr_min=opts["lr_min"], warmup_steps=opts["warmup_steps"], seed=opts["seed"],
        model=LMConfig(
            d_model=opts["d_model"], layers=opts["layers"], heads=opts["heads"],
            max_seq_len=opts["max_seq_len"], seed=opts["seed"],
        ),
    )
    out = train_base_lm(examples, tokenizer, tc, out_dir)
    click.echo(f"base LM checkpoint at {out} ({len(examples)} examples)")


@train.command("adapter")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--instruct", "instruct_path", type=click.Path(exists=True), required=True)
@click.option("--base", "base_dir", type=click.Path(exists=True), required=True)
@click.option("--vision", "vision_dir", type=click.Path(exists=True), required=True)
@click.option("--classifier", "classifier_dir", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--rank", type=int, default=None)
@click.option("--alpha", type=float, default=None)
@common_options
@run_guarded
def train_adapter_cmd(corpus_dir, instruct_path, base_dir, vision_dir, classifier_dir, out_dir,
                      epochs, batch_size, lr, rank, alpha, config_path, seed):
    """LoRA fine-tuning of the frozen base LM on the instruct dataset."""
    from .adapt import AdapterTrainConfig, LoRAConfig, load_base_lm, train_adapter
    from .classifier import ClassifierStack
    from .instruct import load_instruct
    from .pipeline import prepare_examples
    from .vision import VisionStack

    cfg = _load_config_file(config_path)
    opts = resolve(
        cfg, epochs=(epochs, 5), batch_size=(batch_size, 16), lr=(lr, 3e-4),
        rank=(rank, 8), alpha=(alpha, 16.0), seed=(seed, 0),
    )
    studies, _, _ = _load_corpus_and_split(corpus_dir, None)
    samples = load_instruct(instruct_path)
    base = load_base_lm(base_dir)
    vision = VisionStack.load(vision_dir)
    clf = ClassifierStack.load(classifier_dir) if classifier_dir else None
    examples = prepare_examples(
        samples, studies, base.tokenizer, vision=vision, classifier=clf,
        max_seq_len=base.lm.config.max_seq_len,
    )
    tc = AdapterTrainConfig(
        epochs=opts["epochs"], batch_size=opts["batch_size"], lr=opts["lr"], seed=opts["seed"],
        lora=LoRAConfig(rank=opts["rank"], alpha=opts["alpha"]),
    )
    out = train_adapter(examples, base_dir, tc, out_dir)
    click.echo(f"adapter checkpoint at {out} ({len(examples)} examples)")


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

def _load_stack(vision_dir, classifier_dir, base_dir, adapter_dir):
    from .pipeline import InferencePipeline

    for name, val in (("--vision", vision_dir), ("--classifier", classifier_dir), ("--base", base_dir)):
        if not val:
            raise ConfigError(f"{name} checkpoint directory is required")
    return InferencePipeline.load(vision_dir, classifier_dir, base_dir, adapter_dir)


@main.group("eval")
def eval_group():
    """Run one evaluation protocol on a corpus split."""


@eval_group.command("report")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--split", "part", type=str, default="test")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--use-indication", is_flag=True, default=False)
@click.option("--csv", "csv_export", is_flag=True, default=False)
@stack_options
@common_options
@run_guarded
def eval_report_cmd(corpus_dir, part, out_dir, use_indication, csv_export, vision_dir,
                    classifier_dir, base_dir, adapter_dir, config_path, seed):
    from .evaluation import EvalOptions, eval_report_generation, write_eval_outputs
    from .labeler import RuleLabeler

    cfg = _load_config_file(config_path)
    opts = resolve(cfg, seed=(seed, 0))
    _, _, studies = _load_corpus_and_split(corpus_dir, part)
    stack = _load_stack(vision_dir, classifier_dir, base_dir, adapter_dir)
    labeler = RuleLabeler(stack.classifier.vocab)
    report = eval_report_generation(
        stack, studies, labeler,
        EvalOptions(use_indication=use_indication, seed=opts["seed"]),
    )
    path = write_eval_outputs(report, out_dir, csv_export=csv_export)
    click.echo(
        f"CE={report.summary.ce_macro_f1:.4f} B1={report.summary.bleu1:.4f} "
        f"B4={report.summary.bleu4:.4f} RL={report.summary.rouge_l:.4f} "
        f"MTR={report.summary.meteor:.4f} -> {path}"
    )


@eval_group.command("correction")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--split", "part", type=str, default="test")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@stack_options
@common_options
@run_guarded
def eval_correction_cmd(corpus_dir, part, out_dir, vision_dir, classifier_dir, base_dir,
                        adapter_dir, config_path, seed):
    from .evaluation import EvalOptions, eval_correction
    from .labeler import RuleLabeler

    cfg = _load_config_file(config_path)
    opts = resolve(cfg, seed=(seed, 0))
    _, _, studies = _load_corpus_and_split(corpus_dir, part)
    stack = _load_stack(vision_dir, classifier_dir, base_dir, adapter_dir)
    labeler = RuleLabeler(stack.classifier.vocab)
    result = eval_correction(stack, studies, labeler, options=EvalOptions(seed=opts["seed"]))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "before": result.before.to_dict(),
        "after": result.after.to_dict(),
        "delta": result.delta,
        "n_corrected": result.n_corrected,
    }
    (out / "correction.json").write_text(json.dumps(payload, indent=2, sort_keys=True), "utf-8")
    click.echo(
        f"CE before={result.before.ce_macro_f1:.4f} after={result.after.ce_macro_f1:.4f} "
        f"delta={result.delta['ce_macro_f1']:+.4f} corrected={result.n_corrected}"
    )


@eval_group.command("findings-qa")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--split", "part", type=str, default="test")
@click.option("--mode", type=click.Choice(["binary", "complete"]), default="binary")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@stack_options
@common_options
@run_guarded
def eval_findings_qa_cmd(corpus_dir, part, mode, out_dir, vision_dir, classifier_dir, base_dir,
                         adapter_dir, config_path, seed):
    from .evaluation import EvalOptions, eval_findings_qa

    cfg = _load_config_file(config_path)
    opts = resolve(cfg, seed=(seed, 0))
    _, _, studies = _load_corpus_and_split(corpus_dir, part)
    stack = _load_stack(vision_dir, classifier_dir, base_dir, adapter_dir)
    result = eval_findings_qa(stack, studies, mode, options=EvalOptions(seed=opts["seed"]))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"findings_qa_{mode}.json").write_text(
        json.dumps(result.__dict__, indent=2, sort_keys=True), "utf-8"
    )
    click.echo(f"{mode} F1={result.f1:.4f} P={result.precision:.4f} R={result.recall:.4f}")


# --------------------------------------------------------------------------
# Serving / REPL
# --------------------------------------------------------------------------

@main.command("serve")
@click.option("--host", type=str, default="127.0.0.1")
@click.option("--port", type=int, default=8080)
@click.option("--state-dir", type=click.Path(), default="service-state")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), default=None)
@stack_options
@common_options
@run_guarded
def serve_cmd(host, port, state_dir, corpus_dir, vision_dir, classifier_dir, base_dir,
              adapter_dir, config_path, seed):
    """Serve the dialog HTTP API."""
    import uvicorn

    from .service import create_app

    stack = _load_stack(vision_dir, classifier_dir, base_dir, adapter_dir)
    app = create_app(stack, state_dir, corpus_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command("chat")
@click.option("--image", "image_path", type=click.Path(exists=True), default=None)
@click.option("--study-id", type=str, default=None)
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), default=None)
@stack_options
@common_options
@run_guarded
def chat_cmd(image_path, study_id, corpus_dir, vision_dir, classifier_dir, base_dir,
             adapter_dir, config_path, seed):
    """Terminal REPL: generate a report for one image, then chat about it."""
    import numpy as np

    from .pipeline import ImageStudy
    from .prompts import Turn

    stack = _load_stack(vision_dir, classifier_dir, base_dir, adapter_dir)
    if image_path:
        from PIL import Image

        size = stack.vision.config.image_size
        with Image.open(image_path) as im:
            image = np.asarray(im.convert("L").resize((size, size)), dtype=np.float32) / 255.0
        study = ImageStudy(id=Path(image_path).stem, image=image.astype(np.float32))
    elif study_id and corpus_dir:
        from .corpus import load_corpus

        matches = [s for s in load_corpus(corpus_dir) if s.id == study_id]
        if not matches:
            raise ConfigError(f"study {study_id!r} not in corpus")
        study = matches[0]
    else:
        raise ConfigError("provide --image or (--study-id and --corpus)")

    report = stack.generate_report(study)
    click.echo(f"REPORT: {report}\n(type a message, or 'exit')")
    history = [Turn("assistant", report)]
    while True:
        try:
            message = click.prompt("you", default="", show_default=False)
        except (EOFError, KeyboardInterrupt):
            break
        if not message or message.strip().lower() in ("exit", "quit"):
            break
        reply = stack.continue_dialog(study, history, message)
        click.echo(f"assistant: {reply}")
        history += [Turn("user", message), Turn("assistant", reply)]


if __name__ == "__main__":
    main()
