import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from more_itertools import first_true, is_sorted, map_reduce

from .utils import ContractError, CorpusError, GeoNormError

__all__ = [
    'LossRecord', 'LossLog', 'SPLITS', 'LOSS_CSV_HEADER',
    'loss_log_to_csv', 'loss_log_from_csv', 'save_loss_log', 'load_loss_log', 'save_run_manifest', 'save_as_json',
    'summarize_runs', 'summary_to_csv', 'save_summary', 'variant_summary_to_csv', 'save_variant_summary',
    'save_weights', 'load_weights', 'run_file_stem'
]

SPLITS = ('train', 'val')
LOSS_CSV_HEADER = 'step,split,strategy,seed,loss'


@dataclass(frozen=True)
class LossRecord:
    step: int
    split: str
    strategy: str
    seed: int
    loss: float

    def to_csv_line(self) -> str:
        return f'{self.step},{self.split},{self.strategy},{self.seed},{self.loss:.6f}'


@dataclass
class LossLog:
    """
    Loss records of one (strategy, seed) run.

    Steps are strictly increasing within each split. A run whose loss or gradients became non-finite is
    ``failed`` with ``diverged_at`` holding the step and ``diverged_reason`` a short diagnostic.
    """
    strategy: str
    seed: int
    records: List[LossRecord] = field(default_factory=list)
    diverged_at: Optional[int] = None
    diverged_reason: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.diverged_at is not None

    def append(self, step: int, split: str, loss: float):
        if split not in SPLITS:
            raise ContractError(f'split must be one of {SPLITS} but got "{split}"')
        if (prev := self.steps(split)) and step <= prev[-1]:
            raise ContractError(f'{split} step {step} is not after the last logged step {prev[-1]}')
        self.records.append(LossRecord(int(step), split, self.strategy, int(self.seed), float(loss)))

    def mark_diverged(self, step: int, reason: str):
        self.diverged_at = int(step)
        self.diverged_reason = reason

    def split_records(self, split: str) -> List[LossRecord]:
        return [r for r in self.records if r.split == split]

    def steps(self, split: str) -> List[int]:
        return [r.step for r in self.split_records(split)]

    def losses(self, split: str) -> List[float]:
        return [r.loss for r in self.split_records(split)]

    def loss_at(self, split: str, step: int) -> Optional[float]:
        record = first_true(self.split_records(split), pred=lambda r: r.step == step)
        return None if record is None else record.loss

    def final(self, split: str) -> Optional[float]:
        losses = self.losses(split)
        return losses[-1] if losses else None

    def is_ordered(self) -> bool:
        return all(is_sorted(self.steps(split), strict=True) for split in SPLITS)

    def to_dict(self) -> dict:
        return dict(
            train_loss=self.final('train'),
            val_loss=self.final('val'),
            failed=self.failed,
            diverged_at=self.diverged_at,
            diverged_reason=self.diverged_reason,
        )


def run_file_stem(strategy: str, seed: int) -> str:
    return f'{strategy}_{seed}'


def _save_as_file(content: str, path: str):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(content)
    print(f'Saved: {os.path.abspath(path)}')


def _make_dirs(path: str):
    if directory := os.path.dirname(path):
        os.makedirs(directory, exist_ok=True)


def loss_log_to_csv(log: LossLog) -> str:
    return '\n'.join([LOSS_CSV_HEADER] + [r.to_csv_line() for r in log.records]) + '\n'


def loss_log_from_csv(content: str) -> LossLog:
    lines = [line for line in content.splitlines() if line.strip()]
    if not lines or lines[0].strip() != LOSS_CSV_HEADER:
        raise GeoNormError(f'loss log must start with the header "{LOSS_CSV_HEADER}"')
    rows = [line.split(',') for line in lines[1:]]
    if not rows:
        raise GeoNormError('loss log has no records')
    log = LossLog(rows[0][2], int(rows[0][3]))
    for step, split, *_, loss in rows:
        log.append(int(step), split, float(loss))
    return log


def save_loss_log(log: LossLog, out_dir: str) -> str:
    """
    Write ``<out_dir>/loss_<strategy>_<seed>.csv`` with header ``step,split,strategy,seed,loss``.
    """
    path = os.path.join(out_dir, f'loss_{run_file_stem(log.strategy, log.seed)}.csv')
    _make_dirs(path)
    _save_as_file(loss_log_to_csv(log), path)
    return path


def load_loss_log(path: str) -> LossLog:
    if not os.path.isfile(path):
        raise CorpusError(f'loss log not found: {path}')
    with open(path, encoding='utf-8') as f:
        return loss_log_from_csv(f.read())


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.generic):
        return _json_safe(value.item())
    return value


def save_as_json(content: dict, path: str, indent: int = 2):
    _make_dirs(path)
    _save_as_file(json.dumps(_json_safe(content), indent=indent, allow_nan=False, ensure_ascii=False), path)


def save_run_manifest(
        log: LossLog,
        out_dir: str,
        model: dict,
        train: dict,
        corpus: str,
        parameters: int
) -> str:
    """
    Write ``<out_dir>/run_<strategy>_<seed>.json`` holding the resolved configuration and the final metrics.
    """
    path = os.path.join(out_dir, f'run_{run_file_stem(log.strategy, log.seed)}.json')
    manifest = dict(
        model=model,
        train=train,
        corpus=corpus,
        final=log.to_dict(),
        parameters=parameters
    )
    save_as_json(manifest, path)
    return path


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def _fmt(value: float) -> str:
    return f'{value:.6f}' if math.isfinite(value) else ''


def summarize_runs(logs: Sequence[LossLog], strategies: Sequence[str] = None) -> List[dict]:
    """
    One row per strategy with final and per-checkpoint validation losses (mean, population std over seeds).

    Failed runs are counted in ``failed`` and left out of the statistics.

    Parameters
    ----------
    logs : list of LossLog
        Runs of every (strategy, seed) pair.
    strategies : list of str, optional
        Row order. Defaults to the order of first appearance in ``logs``.

    Returns
    -------
    list of dict
        Keys: 'strategy', 'runs', 'failed', 'final_val_mean', 'final_val_std' and
        'val_<step>_mean', 'val_<step>_std' for every checkpoint shared by the successful runs.
    """
    grouped: Dict[str, List[LossLog]] = map_reduce(logs, keyfunc=lambda log: log.strategy)
    if strategies is None:
        strategies = list(dict.fromkeys(log.strategy for log in logs))
    rows = []
    for strategy in strategies:
        runs = grouped.get(strategy, [])
        ok = [log for log in runs if not log.failed]
        row = dict(strategy=strategy, runs=len(runs), failed=len(runs) - len(ok))
        row['final_val_mean'], row['final_val_std'] = _mean_std([log.final('val') for log in ok])
        shared_steps = sorted(set.intersection(*(set(log.steps('val')) for log in ok))) if ok else []
        for step in shared_steps:
            row[f'val_{step}_mean'], row[f'val_{step}_std'] = _mean_std([log.loss_at('val', step) for log in ok])
        rows.append(row)
    return rows


def summary_to_csv(rows: List[dict]) -> str:
    columns = ['strategy', 'runs', 'failed', 'final_val_mean', 'final_val_std']
    checkpoint_steps = sorted({int(k.split('_')[1]) for row in rows for k in row if k.startswith('val_')})
    for step in checkpoint_steps:
        columns += [f'val_{step}_mean', f'val_{step}_std']
    lines = [','.join(columns)]
    for row in rows:
        cells = []
        for c in columns:
            value = row.get(c, math.nan)
            cells.append(_fmt(value) if isinstance(value, float) else str(value))
        lines.append(','.join(cells))
    return '\n'.join(lines) + '\n'


def save_summary(rows: List[dict], out_dir: str, filename: str = 'summary.csv') -> str:
    path = os.path.join(out_dir, filename)
    _make_dirs(path)
    _save_as_file(summary_to_csv(rows), path)
    return path


def variant_summary_to_csv(variant_name: str, rows: List[dict]) -> str:
    """
    Rows of ``{variant_name, seed, initial_val, final_train, final_val, failed, converged}`` in the given order.
    """
    columns = [variant_name, 'seed', 'initial_val', 'final_train', 'final_val', 'failed', 'converged']
    lines = [','.join(columns)]
    for row in rows:
        cells = []
        for c in columns:
            value = row[c]
            if isinstance(value, bool):
                cells.append(str(value).lower())
            elif isinstance(value, float):
                cells.append(_fmt(value))
            else:
                cells.append(str(value))
        lines.append(','.join(cells))
    return '\n'.join(lines) + '\n'


def save_variant_summary(variant_name: str, rows: List[dict], out_dir: str, filename: str) -> str:
    path = os.path.join(out_dir, filename)
    _make_dirs(path)
    _save_as_file(variant_summary_to_csv(variant_name, rows), path)
    return path


def save_weights(state: Dict[str, np.ndarray], out_dir: str, strategy: str, seed: int) -> str:
    """
    Write ``<out_dir>/weights_<strategy>_<seed>.npz`` with one named array per parameter.
    """
    path = os.path.join(out_dir, f'weights_{run_file_stem(strategy, seed)}.npz')
    _make_dirs(path)
    np.savez(path, **state)
    print(f'Saved: {os.path.abspath(path)}')
    return path


def load_weights(path: str) -> Dict[str, np.ndarray]:
    if not os.path.isfile(path):
        raise CorpusError(f'weights file not found: {path}')
    with np.load(path) as archive:
        return {name: archive[name] for name in archive.files}
