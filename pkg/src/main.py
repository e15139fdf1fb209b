import dataclasses
import functools
import logging
import os
import sys

import click
import numpy as np
import torch

import numerics
from checkpoint import describe, digest, load_checkpoint
from config import load_config
from corpus import MAX_WORDS, SplitSpec, preprocess_directory, read_markdown_corpus
from data_process import read_classification_data, read_minimal_pairs, read_probe_data
from errors import CheckpointError, LabError
from finetune import finetune_classifier
from model import init_model, parameter_count
from objectives import batch_rng, total_loss
from probing import format_layer_report, layer_report, load_probe, probe_train, save_probe
from sentence_scorer import SentenceScorer, format_report, minimal_pair_eval
from tokenizer import CLS_ID, SEP_ID, Vocabulary, coverage_report, token_counts, train_vocab, write_counts
from training import corpus_subwords, encode_documents, exposure, pretrain
from writer import output_to_file, setup_logging

logger = logging.getLogger(__name__)

PROG = 'mlm-lab'
GRAD_TOLERANCE = 1e-4
# Source split: 35 development documents out of 4,049.
DEV_FRACTION = 35 / 4049


def run_options(command):
    """
    --config, --seed, --out and --threads for every subcommand.
    """
    @click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                  help='Flat key = value TOML configuration file.')
    @click.option('--seed', type=int, default=None, help='Seed for every random choice.')
    @click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None,
                  help='Output directory.')
    @click.option('--threads', type=int, default=None, help='Worker threads for batch construction.')
    @functools.wraps(command)
    def wrapper(config_path, seed, out_dir, threads, **kwargs):
        run = load_config(config_path, {'seed': seed, 'out_dir': out_dir, 'threads': threads})
        os.makedirs(run.out_dir, exist_ok=True)
        setup_logging(run.log_level, os.path.join(run.out_dir, PROG + '.log'))
        logger.info(f'{PROG} {click.get_current_context().info_name}')
        run.log()
        return command(run, **kwargs)
    return wrapper


def _vocab(run, vocab_path):
    path = vocab_path or run.vocab_path
    if not path:
        raise click.UsageError('a vocabulary is required (--vocab or vocab_path in the config)')
    return Vocabulary.load(path)


def _model(run, vocab, checkpoint, random_init):
    """
    A trained checkpoint, or a fresh model with --random-init.
    """
    if random_init:
        model = init_model(dataclasses.replace(run.model, vocab_size=len(vocab)), run.seed)
        return model.eval()
    if not checkpoint:
        raise click.UsageError('give --checkpoint or --random-init')
    model, step = load_checkpoint(checkpoint)
    if model.config.vocab_size != len(vocab):
        raise CheckpointError(
            f'{checkpoint} has vocab_size {model.config.vocab_size}, vocabulary has {len(vocab)}'
        )
    logger.info(f'Loaded {checkpoint} (step {step})')
    return model


def _lines(path):
    with open(path, 'r', encoding='utf-8') as file:
        return file.read().split('\n')


vocab_option = click.option('--vocab', 'vocab_path', type=click.Path(dir_okay=False), default=None)
checkpoint_option = click.option('--checkpoint', type=click.Path(dir_okay=False), default=None)
random_init_option = click.option('--random-init', is_flag=True, help='Evaluate a freshly initialised model.')


@click.group(context_settings={'help_option_names': ['-h', '--help']})
def cli():
    """
    Small-corpus masked language modelling lab.
    """


@cli.command()
@click.argument('source_dir', type=click.Path(exists=True, file_okay=False))
@click.option('--dev-fraction', type=float, default=DEV_FRACTION, show_default=True)
@click.option('--max-words', type=int, default=MAX_WORDS, show_default=True)
@run_options
def preprocess(run, source_dir, dev_fraction, max_words):
    """Convert XML-like sources to Markdown and split them."""
    stats = preprocess_directory(source_dir, run.out_dir, SplitSpec(dev_fraction, run.seed), max_words)
    click.echo(stats.to_string())


@cli.command('train-tokenizer')
@click.argument('corpus', type=click.Path(exists=True, dir_okay=False))
@click.option('--size', type=int, required=True, help='Exact vocabulary size.')
@run_options
def train_tokenizer(run, corpus, size):
    """Learn a WordPiece vocabulary of exactly --size tokens."""
    vocab = train_vocab(_lines(corpus), size)
    path = vocab.save(os.path.join(run.out_dir, 'vocab.txt'))
    click.echo(f'{len(vocab)} tokens written to {path}')


@cli.command()
@click.argument('corpus', type=click.Path(exists=True, dir_okay=False))
@vocab_option
@click.option('--threshold', type=int, default=100, show_default=True)
@run_options
def coverage(run, corpus, vocab_path, threshold):
    """Share of vocabulary tokens occurring at least --threshold times."""
    vocab = _vocab(run, vocab_path)
    lines = _lines(corpus)
    fraction = coverage_report(vocab, lines, threshold)
    write_counts(vocab, token_counts(vocab, lines), os.path.join(run.out_dir, 'vocab.counts'))
    click.echo(f'coverage@{threshold}\t{fraction:.6f}')


@cli.command('pretrain')
@click.option('--corpus', type=click.Path(exists=True, dir_okay=False), default=None)
@vocab_option
@click.option('--quiet', is_flag=True)
@run_options
def pretrain_command(run, corpus, vocab_path, quiet):
    """Pretrain a model from scratch; prints the final checkpoint digest."""
    vocab = _vocab(run, vocab_path)
    path = corpus or run.train_corpus
    if not path:
        raise click.UsageError('a training corpus is required (--corpus or train_corpus)')
    documents = encode_documents(read_markdown_corpus(path), vocab)
    seen = exposure(run.schedule.total_steps, run.pretrain.tokens_per_step, corpus_subwords(documents))
    logger.info(f'Each training subword is seen about {seen:.1f} times')

    torch.set_num_threads(1)
    model = init_model(dataclasses.replace(run.model, vocab_size=len(vocab)), run.seed)
    result = pretrain(model, documents, vocab, run.masking, run.schedule, run.pretrain, run.out_dir, quiet)
    click.echo(f'{result.checkpoint}\t{digest(result.checkpoint)}')


@cli.command('score-pairs')
@click.argument('pairs', type=click.Path(exists=True, dir_okay=False))
@vocab_option
@checkpoint_option
@random_init_option
@run_options
def score_pairs(run, pairs, vocab_path, checkpoint, random_init):
    """Minimal-pair accuracy by pseudo-log-likelihood."""
    vocab = _vocab(run, vocab_path)
    scorer = SentenceScorer(_model(run, vocab, checkpoint, random_init), vocab)
    report, overall = minimal_pair_eval(scorer, read_minimal_pairs(pairs), quiet=False)
    text = format_report(report, overall)
    output_to_file('pairs_report.txt', text, directory=run.out_dir)
    click.echo(text, nl=False)


@cli.command()
@click.argument('train_data', type=click.Path(exists=True, dir_okay=False))
@click.option('--eval-data', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--task', default='probe', show_default=True, help='Name used for the outputs.')
@vocab_option
@checkpoint_option
@random_init_option
@run_options
def probe(run, train_data, eval_data, task, vocab_path, checkpoint, random_init):
    """Train an edge probe on frozen layer contributions."""
    vocab = _vocab(run, vocab_path)
    model = _model(run, vocab, checkpoint, random_init)
    examples = read_probe_data(train_data, vocab)
    held_out = read_probe_data(eval_data, vocab) if eval_data else None
    result = probe_train(model, examples, run.probe, eval_examples=held_out, quiet=False)
    save_probe(result.probe, os.path.join(run.out_dir, f'probe-{task}.safetensors'))
    gamma, slope = layer_report(result.probe)
    click.echo(f'{task}\taccuracy {result.accuracy:.4f}')
    click.echo(format_layer_report(gamma, slope, task), nl=False)


@cli.command('layer-report')
@click.argument('probes', nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@run_options
def layer_report_command(run, probes):
    """Layer weights (percent) and their regression slope per probe."""
    lines = []
    for path in probes:
        gamma, slope = layer_report(load_probe(path))
        task = os.path.splitext(os.path.basename(path))[0]
        lines.append(format_layer_report(gamma, slope, task))
    text = ''.join(lines)
    output_to_file('layer_report.txt', text, directory=run.out_dir)
    click.echo(text, nl=False)


@cli.command()
@click.argument('train_data', type=click.Path(exists=True, dir_okay=False))
@click.option('--eval-data', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--task', type=click.Choice(['single', 'pair', 'regression']), default=None)
@vocab_option
@checkpoint_option
@random_init_option
@run_options
def finetune(run, train_data, eval_data, task, vocab_path, checkpoint, random_init):
    """Fine-tune the encoder with a [CLS] classifier."""
    vocab = _vocab(run, vocab_path)
    model = _model(run, vocab, checkpoint, random_init)
    train_df = read_classification_data(train_data)
    eval_df = read_classification_data(eval_data) if eval_data else None
    result = finetune_classifier(model, vocab, train_df, run.finetune, eval_df, task, run.out_dir, quiet=False)
    for key, value in sorted(result.metrics.items()):
        click.echo(f'{key}\t{value:.6f}')


@cli.command('grad-check')
@click.option('--length', type=int, default=8, show_default=True)
@click.option('--entries', type=int, default=None, help='Entries checked per parameter tensor (all by default).')
@click.option('--step', 'h', type=float, default=1e-5, show_default=True)
@run_options
def grad_check(run, length, entries, h):
    """Compare backprop gradients of the masked-token loss with finite differences."""
    config = dataclasses.replace(run.model, dropout=0.0, attention_dropout=0.0)
    model = init_model(config, run.seed)
    length = max(3, min(length, config.max_length))
    rng = batch_rng(run.seed, 0)
    ids = [CLS_ID] + rng.integers(5, config.vocab_size, size=length - 2).tolist() + [SEP_ID]
    targets = np.full(length, -100, dtype=np.int64)
    targets[1:-1] = ids[1:-1]
    ids_tensor = torch.tensor([ids])
    targets_tensor = torch.from_numpy(targets)[None]

    def loss_fn():
        with numerics.float64():
            output = model(ids_tensor)
            return total_loss(output.mlm_logits, targets_tensor)

    errors = numerics.parameter_gradient_check(
        loss_fn, model.named_parameters(), h, entries, torch.Generator().manual_seed(run.seed)
    )
    worst = max(errors, key=errors.get)
    for name, error in errors.items():
        logger.info(f'{name}\t{error:.3e}')
    click.echo(f'max relative error {errors[worst]:.3e} ({worst})')
    if errors[worst] > GRAD_TOLERANCE:
        raise LabError(f'gradient check failed: {errors[worst]:.3e} > {GRAD_TOLERANCE:g} in {worst}')


@cli.command('inspect-checkpoint')
@click.argument('path', type=click.Path(exists=True, dir_okay=False))
@run_options
def inspect_checkpoint(run, path):
    """Print the manifest, config and digest of a checkpoint."""
    rows, metadata = describe(path)
    for key in sorted(metadata):
        click.echo(f'{key}\t{metadata[key]}')
    for name, shape, count in rows:
        click.echo(f'{name}\t{"x".join(map(str, shape)) or "scalar"}\t{count}')
    model, _ = load_checkpoint(path)
    click.echo(f'parameters\t{parameter_count(model)}')
    click.echo(f'digest\t{digest(path)}')


def main(argv=None):
    """
    Run one subcommand; returns 0 on success, 1 on a usage error and 2 on a
    runtime error.
    """
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        with click.Context(cli, info_name=PROG) as ctx:
            click.echo(cli.get_help(ctx), err=True)
        return 1
    try:
        result = cli.main(args=argv, prog_name=PROG, standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 1
    except click.Abort:
        return 1
    except click.ClickException as e:
        e.show()
        return 2
    except LabError as e:
        logger.error(str(e))
        return 2
    except Exception as e:
        logger.exception(f'{type(e).__name__}: {e}')
        return 2
    return result if isinstance(result, int) else 0


if __name__ == '__main__':
    sys.exit(main())
