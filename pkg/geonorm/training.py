import math
import os
import urllib.request
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple
from urllib.parse import urlparse

import numpy as np
from more_itertools import first_true
from tqdm import tqdm

from .config import ModelConfig, TrainConfig
from .model import ModelWeights, model_forward
from .results import LossLog
from .tensor import ComputationTape, Parameter, backward, cross_entropy, zero_grad
from .utils import ContractError, CorpusError, safe_print

__all__ = [
    'Corpus', 'load_corpus', 'sample_batch', 'AdamState', 'adam_step', 'train', 'evaluate',
    'init_training_weights', 'training_rngs', 'download_corpus', 'default_corpus_path', 'default_download_root',
    'VOCAB_SIZE', 'VAL_FRACTION', 'CORPUS_URL', 'CORPUS_FILENAME', 'BUNDLED_CORPUS'
]

VOCAB_SIZE = 256
VAL_FRACTION = 10

CORPUS_URL = 'https://raw.githubusercontent.com/karpathy/char-rnn/master/data/tinyshakespeare/input.txt'
CORPUS_FILENAME = 'tinyshakespeare.txt'
BUNDLED_CORPUS = os.path.join(os.path.dirname(__file__), 'data', 'sample_corpus.txt')


@dataclass
class Corpus:
    """
    Byte-level corpus; the last ``len // 10`` bytes are the validation split.
    """
    path: str
    data: np.ndarray

    @property
    def val_size(self) -> int:
        return len(self.data) // VAL_FRACTION

    @property
    def train(self) -> np.ndarray:
        return self.data[:len(self.data) - self.val_size]

    @property
    def val(self) -> np.ndarray:
        return self.data[len(self.data) - self.val_size:]

    def split(self, name: str) -> np.ndarray:
        if name == 'train':
            return self.train
        if name == 'val':
            return self.val
        raise ContractError(f'split must be "train" or "val" but got "{name}"')

    @classmethod
    def from_bytes(cls, content: bytes, path: str = '<memory>') -> 'Corpus':
        if not content:
            raise CorpusError(f'corpus is empty: {path}')
        return cls(path, np.frombuffer(content, dtype=np.uint8).copy())


def load_corpus(path: str) -> Corpus:
    if not os.path.isfile(path):
        raise CorpusError(f'corpus not found: {os.path.abspath(path)}')
    with open(path, 'rb') as f:
        content = f.read()
    return Corpus.from_bytes(content, path)


def default_download_root() -> str:
    return os.path.join(os.getenv('XDG_CACHE_HOME', os.path.join(os.path.expanduser('~'), '.cache')), 'geonorm')


def download_corpus(
        url: str = CORPUS_URL,
        download_root: Optional[str] = None,
        filename: Optional[str] = None,
        verbose: Optional[bool] = False
) -> str:
    """
    Download ``url`` into ``download_root`` unless it is already there.

    Parameters
    ----------
    url : str, default CORPUS_URL
        Address of a plain-text corpus. The default is the ~1 MB Tiny Shakespeare text.
    download_root : str, optional
        Directory of downloaded corpora; by default, it uses "~/.cache/geonorm".
    filename : str, optional
        Name of the saved file. Defaults to the last component of ``url``
        (``CORPUS_FILENAME`` for the default ``url``).
    verbose : bool or None, default False
        Whether to display the download progressbar. Display nothing if ``None``.

    Returns
    -------
    str
        Path of the corpus file.
    """
    if download_root is None:
        download_root = default_download_root()
    if filename is None:
        filename = CORPUS_FILENAME if url == CORPUS_URL else os.path.basename(urlparse(url).path)
    if not filename:
        raise ContractError(f'cannot infer a file name from {url}')
    path = os.path.join(download_root, filename)
    if os.path.isfile(path):
        return path

    os.makedirs(download_root, exist_ok=True)
    partial = f'{path}.part'
    try:
        with urllib.request.urlopen(url, timeout=60) as source, open(partial, 'wb') as output:
            total = int(source.headers.get('Content-Length') or 0) or None
            with tqdm(total=total, unit='B', unit_scale=True, unit_divisor=1024,
                      disable=verbose is not False, desc='Downloading corpus') as tqdm_pbar:
                while buffer := source.read(1 << 16):
                    output.write(buffer)
                    tqdm_pbar.update(len(buffer))
    except OSError as e:
        if os.path.exists(partial):
            os.remove(partial)
        raise CorpusError(f'failed to download {url}: {e}') from e
    if os.path.getsize(partial) == 0:
        os.remove(partial)
        raise CorpusError(f'downloaded corpus is empty: {url}')
    os.replace(partial, path)
    if verbose is not None:
        safe_print(f'Saved: {os.path.abspath(path)}')
    return path


def default_corpus_path(download_root: Optional[str] = None, verbose: Optional[bool] = False) -> str:
    """
    Path of the default training corpus.

    Tiny Shakespeare is downloaded on first use. Without network access the bundled
    sample corpus is used instead, with a warning.
    """
    try:
        return download_corpus(download_root=download_root, verbose=verbose)
    except CorpusError as e:
        warnings.warn(f'{e}; using the bundled sample corpus instead ({BUNDLED_CORPUS}). '
                      f'It is too small for the validation losses to be meaningful.')
        return BUNDLED_CORPUS


def sample_batch(
        split: np.ndarray,
        seq_len: int,
        batch: int,
        rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw ``batch`` contiguous windows uniformly from ``split``.

    Parameters
    ----------
    split : np.ndarray
        Byte ids of one corpus split.
    seq_len : int
        Window length.
    batch : int
        Number of windows.
    rng : np.random.Generator
        Source of the window offsets.

    Returns
    -------
    tuple of np.ndarray
        ``inputs`` and ``targets`` of shape (batch, seq_len) where ``targets[:, t] == inputs[:, t + 1]``.
    """
    split = np.asarray(split)
    if len(split) < seq_len + 1:
        raise ContractError(f'split of {len(split)} bytes is too short for windows of {seq_len}+1 bytes')
    starts = rng.integers(0, len(split) - seq_len, size=batch)
    idx = starts[:, None] + np.arange(seq_len)
    return split[idx].astype(np.int64), split[idx + 1].astype(np.int64)


@dataclass
class AdamState:
    """
    First and second moments keyed by parameter name, and the number of updates taken.
    """
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Parameter]) -> 'AdamState':
        return cls(
            m={p.name: np.zeros_like(p.data) for p in params},
            v={p.name: np.zeros_like(p.data) for p in params}
        )


def adam_step(params: Sequence[Parameter], state: AdamState, config: TrainConfig):
    """
    Bias-corrected Adam update of every parameter from its accumulated gradient.
    """
    beta1, beta2 = config.betas
    state.t += 1
    correction1 = 1 - beta1 ** state.t
    correction2 = 1 - beta2 ** state.t
    for p in params:
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        m, v, g = state.m[p.name], state.v[p.name], p.grad.data
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data[...] -= config.lr * (m / correction1) / (np.sqrt(v / correction2) + config.eps)


def training_rngs(seed: int) -> Tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """
    Independent generators for weight initialization, training batches and validation batches.
    """
    init_seq, train_seq, val_seq = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init_seq), np.random.default_rng(train_seq), np.random.default_rng(val_seq)


def init_training_weights(model_config: ModelConfig, train_config: TrainConfig) -> ModelWeights:
    init_rng, _, _ = training_rngs(train_config.seed)
    return ModelWeights(model_config, init_rng, train_config.precision)


def evaluate(
        batches: List[Tuple[np.ndarray, np.ndarray]],
        model_config: ModelConfig,
        weights: ModelWeights
) -> float:
    """
    Mean cross-entropy over ``batches`` without recording a tape.
    """
    losses = [cross_entropy(model_forward(x, model_config, weights), y).item() for x, y in batches]
    return float(np.mean(losses))


def _non_finite_grad(params: Sequence[Parameter]) -> Optional[str]:
    bad = first_true(params, pred=lambda p: not np.isfinite(p.grad.data).all())
    return None if bad is None else bad.name


def train(
        model_config: ModelConfig,
        train_config: TrainConfig,
        corpus: Corpus,
        verbose: Optional[bool] = False,
        weights: Optional[ModelWeights] = None,
        on_backward: Optional[Callable[[int, List[Parameter]], None]] = None
) -> LossLog:
    """
    Train a model on ``corpus`` and log its losses.

    Parameters
    ----------
    model_config : ModelConfig
        Architecture and normalization strategy.
    train_config : TrainConfig
        Optimizer settings, step count, seed and precision.
    corpus : Corpus
        Byte-level corpus.
    verbose : bool or None, default False
        Whether to display every evaluation. Displays a progress bar instead when ``False``.
        Nothing is displayed when ``None``.
    weights : ModelWeights, optional
        Weights to train in place. Initialized from ``train_config.seed`` when omitted.
    on_backward : Callable, optional
        Called with the step and the parameters after gradients are accumulated and before the update.

    Returns
    -------
    LossLog
        Training loss at every step, validation loss at step 0, every ``eval_every`` steps and the last step.
        A non-finite loss or gradient stops the run and marks it failed.
    """
    strategy_name = model_config.strategy.name
    log = LossLog(strategy_name, train_config.seed)
    if weights is None:
        weights = init_training_weights(model_config, train_config)
    _, train_rng, val_rng = training_rngs(train_config.seed)
    seq_len, batch = model_config.seq_len, train_config.batch
    train_split, val_split = corpus.train, corpus.val
    val_batches = [sample_batch(val_split, seq_len, batch, val_rng) for _ in range(train_config.eval_batches)]
    params = weights.parameters()
    state = AdamState.for_params(params)

    def log_val(step: int, pbar: tqdm):
        loss = evaluate(val_batches, model_config, weights)
        log.append(step, 'val', loss)
        if verbose:
            msg = f'[{strategy_name} seed={train_config.seed}] step {step}: val loss {loss:.6f}'
            if pbar.disable:
                safe_print(msg)
            else:
                pbar.write(msg)
        return loss

    desc = f'{strategy_name} (seed {train_config.seed})'
    with tqdm(total=train_config.steps, unit='step', disable=verbose is not False, desc=desc) as tqdm_pbar:
        log_val(0, tqdm_pbar)
        for step in range(1, train_config.steps + 1):
            inputs, targets = sample_batch(train_split, seq_len, batch, train_rng)
            zero_grad(params)
            with ComputationTape():
                loss = cross_entropy(model_forward(inputs, model_config, weights), targets)
                loss_value = loss.item()
                log.append(step, 'train', loss_value)
                if not math.isfinite(loss_value):
                    log.mark_diverged(step, f'non-finite loss ({loss_value})')
                    break
                backward(loss)
            if on_backward is not None:
                on_backward(step, params)
            if bad := _non_finite_grad(params):
                log.mark_diverged(step, f'non-finite gradient in "{bad}"')
                break
            adam_step(params, state, train_config)
            tqdm_pbar.update(1)
            if not tqdm_pbar.disable:
                tqdm_pbar.set_postfix(loss=f'{loss_value:.4f}')
            if step % train_config.eval_every == 0 or step == train_config.steps:
                if not math.isfinite(log_val(step, tqdm_pbar)):
                    log.mark_diverged(step, 'non-finite validation loss')
                    break

    if log.failed:
        warnings.warn(f'{strategy_name} run with seed {train_config.seed} diverged at step {log.diverged_at}: '
                      f'{log.diverged_reason}')
    return log
