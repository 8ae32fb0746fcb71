import argparse
import json
import math
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from ._version import __version__
from .checks import run_geometry_checks, run_gradchecks
from .config import COMPARE_STRATEGIES, SEED_ENV_VAR, STRATEGY_NAMES, ModelConfig, TrainConfig, default_seed, \
    strategy_from_name
from .model import ModelWeights, count_parameters
from .prenorm import chain_input, check_equivalence, random_chain_modules
from .results import LossLog, save_as_json, save_loss_log, save_run_manifest, save_summary, \
    save_variant_summary, save_weights, summarize_runs
from .schedules import DECAY_NAMES
from .tensor import Precision
from .training import Corpus, default_corpus_path, init_training_weights, load_corpus, train
from .utils import CheckFailure, ContractError, CorpusError, get_func_parameters, safe_print, str_to_valid_type

__all__ = ['cli', 'EXIT_OK', 'EXIT_USAGE', 'EXIT_FAILURE', 'CLAMP_VARIANTS']

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

CLAMP_VARIANTS: Tuple[Tuple[str, float], ...] = (
    ('pi/2', math.pi / 2),
    ('pi/4', math.pi / 4),
    ('pi/8', math.pi / 8),
)
CONVERGED_RATIO = 0.7


_STRING_OPTIONS = ('strategy', 'decay', 'corpus', 'download_root', 'out', 'precision')


class _ArgumentParser(argparse.ArgumentParser):

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f'{self.prog}: error: {message}\n')


str2val = {"true": True, "false": False, "1": True, "0": False}


def str2bool(string: str) -> bool:
    string = string.lower()
    if string in str2val:
        return str2val[string]
    raise ValueError(f"Expected one of {set(str2val.keys())}, got {string}")


def _str_list(string: str) -> List[str]:
    return [s.strip() for s in string.split(',') if s.strip()]


def _int_list(string: str) -> List[int]:
    return [int(s) for s in _str_list(string)]


def _add_common_args(parser: argparse.ArgumentParser):
    parser.add_argument('--config', type=str,
                        help='JSON file of option values (keys are the option names without the leading "--"); '
                             'options given on the command line take precedence')
    parser.add_argument('--seed', type=int, default=None,
                        help=f'random seed; defaults to ${SEED_ENV_VAR} if set, otherwise 1234')
    parser.add_argument('--verbose', '-v', type=int, default=1, choices=(0, 1, 2),
                        help='whether to display progress; '
                             'if 2, display all the details; '
                             'if 1, display progressbar; '
                             'if 0, display nothing')
    parser.add_argument('--debug', action='store_true',
                        help='print all library calls with their resolved arguments')


def _add_model_args(parser: argparse.ArgumentParser):
    parser.add_argument('--dim', type=int, default=64, help='model width')
    parser.add_argument('--layers', type=int, default=2, help='number of transformer layers')
    parser.add_argument('--heads', type=int, default=4, help='number of attention heads')
    parser.add_argument('--seq', type=int, default=64, help='context length in bytes')
    parser.add_argument('--rms_gain', type=str2bool, default=False,
                        help='whether RMSNorm layers have a learnable per-dimension gain')


def _add_train_args(parser: argparse.ArgumentParser, out_default: str):
    parser.add_argument('--corpus', type=str, default=None,
                        help='text file to train on; the last 10%% of its bytes are the validation split; '
                             'Tiny Shakespeare (~1 MB, downloaded once) if not specified')
    parser.add_argument('--download_root', type=str, default=None,
                        help='directory of the downloaded default corpus; uses ~/.cache/geonorm by default')
    parser.add_argument('--steps', type=int, default=2000, help='number of optimizer steps')
    parser.add_argument('--batch', type=int, default=16, help='sequences per step')
    parser.add_argument('--lr', type=float, default=6e-4, help='Adam learning rate')
    parser.add_argument('--betas', type=float, nargs=2, default=(0.9, 0.95), help='Adam betas')
    parser.add_argument('--eps', type=float, default=1e-8, help='Adam epsilon')
    parser.add_argument('--eval_every', type=int, default=100, help='steps between validation evaluations')
    parser.add_argument('--eval_batches', type=int, default=4, help='validation batches per evaluation')
    parser.add_argument('--precision', type=str, default=Precision.NARROW.value,
                        choices=[p.value for p in Precision],
                        help='"narrow" trains in float32, "wide" in float64')
    parser.add_argument('--out', '-o', type=str, default=out_default, help='directory to save the outputs')


def _add_geo_args(parser: argparse.ArgumentParser, decay: bool = True, clamp: bool = True):
    if decay:
        parser.add_argument('--decay', type=str, default=None, choices=DECAY_NAMES + ('harnomic',),
                            help='layer-wise decay of the geodesic angle (geonorm only); harmonic if not specified')
    if clamp:
        parser.add_argument('--clamp', type=float, default=None,
                            help='upper bound on the geodesic angle in (0, pi/2] (geonorm only); pi/4 if not specified')
    parser.add_argument('--scale', type=float, default=None,
                        help='initial angle multiplier of every geonorm site (geonorm only); 1.0 if not specified')
    parser.add_argument('--bias', type=float, default=None,
                        help='initial angle offset of every geonorm site (geonorm only); 0.0 if not specified')


def _build_parser() -> Tuple[argparse.ArgumentParser, Dict[str, argparse.ArgumentParser]]:
    parser = _ArgumentParser(prog='geonorm', formatter_class=argparse.ArgumentDefaultsHelpFormatter,
                             description='Geodesic normalization for transformers: training harness and checks')
    parser.add_argument('--version', '-V', action='version', version=f'%(prog)s {__version__}')
    subparsers = parser.add_subparsers(dest='command', required=True, metavar='COMMAND')
    subs = {}

    def add(name: str, help_str: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, help=help_str, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        _add_common_args(sub)
        subs[name] = sub
        return sub

    p = add('train', 'train one model and save its loss log, run manifest and final weights')
    p.add_argument('--strategy', type=str, default='geonorm', choices=STRATEGY_NAMES, help='normalization strategy')
    _add_model_args(p)
    _add_train_args(p, 'runs')
    _add_geo_args(p)

    p = add('compare', 'train every (strategy, seed) pair under one config and summarize validation losses')
    p.add_argument('--strategies', type=_str_list, default=list(COMPARE_STRATEGIES),
                   help='comma-separated strategies to compare')
    p.add_argument('--seeds', type=_int_list, default=None, help='comma-separated seeds; [seed] if not specified')
    p.add_argument('--jobs', '-j', type=int, default=1, help='number of runs trained concurrently')
    _add_model_args(p)
    _add_train_args(p, 'runs')
    _add_geo_args(p)

    p = add('gradcheck', 'compare autodiff gradients of every layer type with central finite differences')
    p.add_argument('--samples', type=int, default=6, help='entries checked per parameter tensor')
    p.add_argument('--out', '-o', type=str, default='.', help='directory to save the report')

    p = add('geometry-check', 'randomized invariants of the sphere kernels')
    p.add_argument('--trials', type=int, default=10_000, help='number of random trials')
    p.add_argument('--out', '-o', type=str, default='.', help='directory to save the report')

    p = add('equivalence', 'check that Pre-Norm and its rescaled form agree after RMSNorm')
    p.add_argument('--layers', type=int, default=12,
                   help='transformer layers of the chain; each contributes an attention and an FFN sub-module')
    p.add_argument('--dim', type=int, default=64, help='chain width')
    p.add_argument('--heads', type=int, default=4, help='attention heads')
    p.add_argument('--seq', type=int, default=16, help='sequence length of the chain input')
    p.add_argument('--batch', type=int, default=2, help='batch size of the chain input')
    p.add_argument('--precision', type=str, default=Precision.WIDE.value, choices=[p.value for p in Precision],
                   help='arithmetic precision of the chains')
    p.add_argument('--tolerance', type=float, default=None,
                   help='bound on the normalized deviation; 1e-6 for wide and 1e-3 for narrow if not specified')
    p.add_argument('--out', '-o', type=str, default='.', help='directory to save the report')

    p = add('ablate-clamp', 'train geonorm with clamp pi/2, pi/4 and pi/8 and summarize')
    p.add_argument('--seeds', type=_int_list, default=None, help='comma-separated seeds; [seed] if not specified')
    _add_model_args(p)
    _add_train_args(p, 'ablate_clamp')
    _add_geo_args(p, clamp=False)

    p = add('ablate-decay', 'train geonorm with harmonic, sqrt and linear decay and summarize')
    p.add_argument('--seeds', type=_int_list, default=None, help='comma-separated seeds; [seed] if not specified')
    _add_model_args(p)
    _add_train_args(p, 'ablate_decay')
    _add_geo_args(p, decay=False)

    return parser, subs


def _load_config_file(path: str, sub: argparse.ArgumentParser) -> dict:
    if not os.path.isfile(path):
        sub.error(f'config file not found: {path}')
    with open(path, 'r', encoding='utf-8') as f:
        try:
            config = json.load(f)
        except json.JSONDecodeError as e:
            sub.error(f'config file {path} is not valid JSON: {e}')
    if not isinstance(config, dict):
        sub.error(f'config file {path} must hold a JSON object')
    known = {a.dest for a in sub._actions} - {'help', 'config'}
    if unknown := sorted(set(config) - known):
        sub.error(f'unknown option(s) in {path}: {unknown}')
    for key, value in config.items():
        if key in ('strategies',) and isinstance(value, str):
            config[key] = _str_list(value)
        elif key in ('seeds',) and isinstance(value, str):
            config[key] = _int_list(value)
        elif isinstance(value, str) and key not in _STRING_OPTIONS:
            config[key] = str_to_valid_type(value)
    return config


def _parse_args(argv: Optional[List[str]]) -> Tuple[dict, argparse.ArgumentParser]:
    parser, subs = _build_parser()
    args = parser.parse_args(argv)
    sub = subs[args.command]
    if args.config:
        sub.set_defaults(**_load_config_file(args.config, sub))
        args = parser.parse_args(argv)
    args = vars(args)
    if args.get('seed') is None:
        args['seed'] = default_seed()
    if 'seeds' in args and not args['seeds']:
        args['seeds'] = [args['seed']]
    args['verbose'] = False if args['verbose'] == 1 else (True if args['verbose'] == 2 else None)
    return args, sub


def cli(argv: Optional[List[str]] = None) -> int:
    """
    Entry point of the ``geonorm`` command; returns the exit code.

    0 on success, 1 on a usage error, 2 when a check fails or a training run diverges.
    """
    args, sub = _parse_args(argv)
    command: str = args.pop('command')
    debug: bool = args.pop('debug')
    verbose: Optional[bool] = args['verbose']

    def call_method_with_options(method, options: dict):
        def val_to_str(val) -> str:
            if isinstance(val, np.ndarray):
                return f'{val.__class__}(shape:{list(val.shape)})'
            elif isinstance(val, str):
                return f'"{val}"'
            elif isinstance(val, Corpus):
                return f'Corpus(path="{val.path}", bytes:{len(val.data)})'
            elif isinstance(val, ModelWeights):
                return f'{type(val)}(parameters:{count_parameters(val)})'
            return str(val)

        if debug:
            params = tuple(get_func_parameters(method))
            ordered = {k: options[k] for k in params if k in options}
            options_str = ',\n'.join(f'    {k}={val_to_str(v)}' for k, v in ordered.items())
            if options_str:
                options_str = f'\n{options_str}\n'
            safe_print(f'{method.__qualname__}({options_str})')
        return method(**options)

    def geo_options(strategy: str, strict: bool = True) -> dict:
        options = {k: args.get(k) for k in ('decay', 'clamp', 'scale', 'bias')}
        if strategy == 'geonorm':
            return options
        # strict keeps the options so strategy_from_name rejects them
        return {k: v for k, v in options.items() if v is not None} if strict else {}

    def make_configs(strategy: str, seed: int, strict: bool = True, **overrides) -> Tuple[ModelConfig, TrainConfig]:
        options = geo_options(strategy, strict)
        options.update(overrides)
        model_config = ModelConfig(
            dim=args['dim'],
            heads=args['heads'],
            layers=args['layers'],
            seq_len=args['seq'],
            strategy=strategy_from_name(strategy, **options),
            rms_gain=args['rms_gain'],
        )
        train_config = TrainConfig(
            steps=args['steps'],
            batch=args['batch'],
            lr=args['lr'],
            betas=tuple(args['betas']),
            eps=args['eps'],
            seed=seed,
            eval_every=args['eval_every'],
            eval_batches=args['eval_batches'],
            precision=Precision(args['precision']),
        )
        return model_config, train_config

    def load_training_corpus() -> Corpus:
        if args['corpus'] is None:
            args['corpus'] = call_method_with_options(
                default_corpus_path, dict(download_root=args['download_root'], verbose=verbose)
            )
        corpus = call_method_with_options(load_corpus, dict(path=args['corpus']))
        if len(corpus.val) < args['seq'] + 1:
            raise ContractError(f'validation split of {args["corpus"]} has {len(corpus.val)} bytes; '
                                f'need at least {args["seq"] + 1} for --seq {args["seq"]}')
        return corpus

    def run_one(model_config: ModelConfig, train_config: TrainConfig, corpus: Corpus,
                run_verbose: Optional[bool]) -> Tuple[LossLog, ModelWeights]:
        weights = init_training_weights(model_config, train_config)
        log = call_method_with_options(
            train,
            dict(
                model_config=model_config,
                train_config=train_config,
                corpus=corpus,
                verbose=run_verbose,
                weights=weights
            )
        )
        return log, weights

    def save_run(log: LossLog, weights: ModelWeights, model_config: ModelConfig, train_config: TrainConfig,
                 corpus: Corpus, out_dir: str, with_weights: bool = True):
        save_loss_log(log, out_dir)
        save_run_manifest(
            log,
            out_dir,
            model=model_config.to_dict(),
            train=train_config.to_dict(),
            corpus=os.path.abspath(corpus.path),
            parameters=count_parameters(weights)
        )
        if with_weights:
            save_weights(weights.state_dict(), out_dir, log.strategy, log.seed)

    def run_many(jobs: List[Tuple[ModelConfig, TrainConfig]], corpus: Corpus,
                 workers: int = 1) -> List[Tuple[LossLog, ModelWeights]]:
        if workers <= 1 or len(jobs) <= 1:
            return [run_one(m, t, corpus, verbose) for m, t in jobs]
        run_verbose = True if verbose else None
        with tqdm(total=len(jobs), unit='run', disable=verbose is not False, desc='Runs') as tqdm_pbar:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                futures = [executor.submit(run_one, m, t, corpus, run_verbose) for m, t in jobs]
                for future in futures:
                    future.add_done_callback(lambda _: tqdm_pbar.update(1))
                return [future.result() for future in futures]

    def save_failure(suite: str, e: CheckFailure, out_dir: str):
        save_as_json(e.get_data(), os.path.join(out_dir, f'failed_{suite}.json'))
        warnings.warn(str(e))

    def cmd_train() -> int:
        corpus = load_training_corpus()
        model_config, train_config = make_configs(args['strategy'], args['seed'])
        log, weights = run_one(model_config, train_config, corpus, verbose)
        save_run(log, weights, model_config, train_config, corpus, args['out'])
        if verbose is not None:
            safe_print(f'{log.strategy} seed={log.seed}: final train loss {log.final("train")}, '
                       f'final val loss {log.final("val")}')
        return EXIT_FAILURE if log.failed else EXIT_OK

    def cmd_compare() -> int:
        strategies: List[str] = args['strategies']
        if unknown := [s for s in strategies if s not in STRATEGY_NAMES]:
            raise ContractError(f'unknown strategies {unknown}; expected names from {STRATEGY_NAMES}')
        if len(set(strategies)) < 2:
            raise ContractError(f'compare needs at least 2 distinct strategies but got {strategies}')
        if 'geonorm' not in strategies and any(v is not None for v in geo_options('geonorm').values()):
            raise ContractError('--decay/--clamp/--scale/--bias only apply to strategy "geonorm"')
        if args['jobs'] < 1:
            raise ContractError(f'--jobs must be at least 1 but got {args["jobs"]}')
        corpus = load_training_corpus()
        jobs = [make_configs(s, seed, strict=False) for s in strategies for seed in args['seeds']]
        runs = run_many(jobs, corpus, args['jobs'])
        for (log, weights), (model_config, train_config) in zip(runs, jobs):
            save_run(log, weights, model_config, train_config, corpus, args['out'])
        logs = [log for log, _ in runs]
        save_summary(summarize_runs(logs, strategies), args['out'])
        if failed := [f'{log.strategy}_{log.seed}' for log in logs if log.failed]:
            warnings.warn(f'{len(failed)} run(s) diverged: {failed}')
            return EXIT_FAILURE
        return EXIT_OK

    def run_ablation(variant_name: str, variants: List[Tuple[str, dict]], filename: str) -> int:
        corpus = load_training_corpus()
        rows, all_ok = [], True
        for label, overrides in variants:
            jobs = [make_configs('geonorm', seed, **overrides) for seed in args['seeds']]
            out_dir = os.path.join(args['out'], f'{variant_name}_{label.replace("/", "_")}')
            for (log, weights), (model_config, train_config) in zip(run_many(jobs, corpus), jobs):
                save_run(log, weights, model_config, train_config, corpus, out_dir, with_weights=False)
                initial_val, final_val = log.loss_at('val', 0), log.final('val')
                converged = not log.failed and final_val <= CONVERGED_RATIO * initial_val
                all_ok &= converged
                rows.append({
                    variant_name: label,
                    'seed': log.seed,
                    'initial_val': initial_val,
                    'final_train': log.final('train') if log.final('train') is not None else math.nan,
                    'final_val': final_val,
                    'failed': log.failed,
                    'converged': converged,
                })
        save_variant_summary(variant_name, rows, args['out'], filename)
        return EXIT_OK if all_ok else EXIT_FAILURE

    def cmd_ablate_clamp() -> int:
        return run_ablation('clamp', [(label, dict(clamp=value)) for label, value in CLAMP_VARIANTS],
                            'clamp_summary.csv')

    def cmd_ablate_decay() -> int:
        return run_ablation('decay', [(name, dict(decay=name)) for name in DECAY_NAMES], 'decay_summary.csv')

    def cmd_gradcheck() -> int:
        report = call_method_with_options(
            run_gradchecks,
            dict(seed=args['seed'], samples=args['samples'], verbose=verbose)
        )
        if verbose is False:
            for r in report.results:
                safe_print(f'{r.name}: {r.max_error:.3e}')
        save_as_json(report.to_dict(), os.path.join(args['out'], 'gradcheck.json'))
        try:
            report.raise_for_failure()
        except CheckFailure as e:
            save_failure('gradcheck', e, args['out'])
            return EXIT_FAILURE
        return EXIT_OK

    def cmd_geometry_check() -> int:
        report = call_method_with_options(
            run_geometry_checks,
            dict(trials=args['trials'], seed=args['seed'], verbose=verbose)
        )
        if verbose is not None:
            safe_print(f'max norm deviation: {report.max_norm_deviation:.3e}')
            safe_print(f'max orthogonality: {report.max_orthogonality:.3e}')
            safe_print(f'max idempotence error: {report.max_idempotence:.3e}')
            safe_print(f'max geodesic angle error: {report.max_angle_error:.3e}')
        save_as_json(report.to_dict(), os.path.join(args['out'], 'geometry.json'))
        try:
            report.raise_for_failure()
        except CheckFailure as e:
            save_failure('geometry', e, args['out'])
            return EXIT_FAILURE
        return EXIT_OK

    def cmd_equivalence() -> int:
        precision = Precision(args['precision'])
        mods = random_chain_modules(args['dim'], args['layers'], heads=args['heads'], seed=args['seed'],
                                    precision=precision)
        x0 = chain_input(args['dim'], batch=args['batch'], seq=args['seq'], seed=args['seed'] + 1,
                         precision=precision)
        report = call_method_with_options(check_equivalence, dict(x0=x0, mods=mods, tolerance=args['tolerance']))
        if verbose is not None:
            safe_print(f'max deviation after RMSNorm: {report.max_deviation:.3e} (< {report.tolerance:g})')
            safe_print(f'max scaled-identity error: {report.max_scaled_deviation:.3e} '
                       f'(< {report.scaled_tolerance:g})')
        save_as_json(report.to_dict(), os.path.join(args['out'], 'equivalence.json'))
        if not report.passed:
            failure = CheckFailure('Pre-Norm equivalence check failed',
                                   data=dict(suite='equivalence', seed=args['seed'], layers=args['layers'],
                                             dim=args['dim'], precision=precision.value, report=report.to_dict()))
            save_failure('equivalence', failure, args['out'])
            return EXIT_FAILURE
        return EXIT_OK

    commands: Dict[str, Callable[[], int]] = {
        'train': cmd_train,
        'compare': cmd_compare,
        'gradcheck': cmd_gradcheck,
        'geometry-check': cmd_geometry_check,
        'equivalence': cmd_equivalence,
        'ablate-clamp': cmd_ablate_clamp,
        'ablate-decay': cmd_ablate_decay,
    }
    try:
        return commands[command]()
    except (ContractError, CorpusError) as e:
        sub.error(str(e))


if __name__ == '__main__':
    sys.exit(cli())
