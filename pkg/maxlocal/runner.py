"""
Replicate pool: runs an observation function over replicate keys in chunks,
reduces the chunks in order into accumulators, and checkpoints after every
chunk so that an interrupted run resumes to the same result.
"""

import hashlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Union

import numpy as np

from maxlocal.constants import CHECKPOINT_FORMAT_VERSION, DEFAULT_CHUNK_SIZE, RNG_MIXER
from maxlocal.errors import ExperimentInterrupted
from maxlocal.models import Checkpoint, ExperimentConfig, StageState
from maxlocal.stats import Accumulator, StreamKey, merge

logger = logging.getLogger(__name__)

Observation = Dict[str, Union[float, Iterable[float]]]
Observer = Callable[[StreamKey], Observation]


def config_fingerprint(config: ExperimentConfig) -> str:
    return hashlib.sha256(config.fingerprint_payload().encode()).hexdigest()


def run_chunk(
    observe: Observer,
    seed: int,
    start: int,
    stop: int,
    reservoirs: Dict[str, int],
) -> Dict[str, Accumulator]:
    accumulators: Dict[str, Accumulator] = {}
    for index in range(start, stop):
        key = StreamKey(seed=seed, replicate_index=index)
        for name, value in observe(key).items():
            accumulator = accumulators.get(name)
            if accumulator is None:
                accumulator = Accumulator(reservoir_capacity=reservoirs.get(name, 0))
                accumulators[name] = accumulator
            if np.ndim(value) == 0:
                accumulator.add(value, key=key)
            else:
                accumulator.add_many(value, key=key)
    return accumulators


def merge_all(
    target: Dict[str, Accumulator],
    chunk: Dict[str, Accumulator],
    reservoirs: Dict[str, int],
) -> Dict[str, Accumulator]:
    for name, accumulator in chunk.items():
        base = target.get(name) or Accumulator(reservoir_capacity=reservoirs.get(name, 0))
        target[name] = merge(base, accumulator)
    return target


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    checkpoint = Checkpoint.model_validate_json(Path(path).read_text())
    if checkpoint.format_version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"Checkpoint format {checkpoint.format_version} is not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})."
        )
    if checkpoint.rng_mixer != RNG_MIXER:
        raise ValueError(
            f"Checkpoint was written with RNG mixer {checkpoint.rng_mixer}, "
            f"this build uses {RNG_MIXER}."
        )
    return checkpoint


class ReplicateRunner:
    def __init__(
        self,
        workers: int = 1,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
        checkpoint_path: Optional[Union[str, Path]] = None,
        config: Optional[ExperimentConfig] = None,
        stop_at: Optional[int] = None,
    ):
        """
        Initialize a replicate runner.

        Args:
            workers: Number of worker processes (1 runs in-process)
            chunk_size: Replicates per chunk, the checkpoint granularity
            checkpoint_path: JSON checkpoint file, written after each chunk
            config: Experiment config, required with a checkpoint path
            stop_at: Interrupt once this many replicates of a stage are done
        """
        if workers < 1 or chunk_size < 1:
            raise ValueError("workers and chunk_size must be positive.")
        if checkpoint_path is not None and config is None:
            raise ValueError("A checkpoint needs the experiment config.")
        self.workers = workers
        self.chunk_size = chunk_size
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.config = config
        self.stop_at = stop_at
        self.checkpoint = self._open_checkpoint()

    def _open_checkpoint(self) -> Optional[Checkpoint]:
        if self.checkpoint_path is None:
            return None
        fingerprint = config_fingerprint(self.config)
        if self.checkpoint_path.exists():
            checkpoint = load_checkpoint(self.checkpoint_path)
            if checkpoint.fingerprint != fingerprint:
                raise ValueError(
                    f"Checkpoint {self.checkpoint_path} belongs to another config."
                )
            logger.info(f"Resuming from checkpoint {self.checkpoint_path}")
            return checkpoint
        return Checkpoint(fingerprint=fingerprint, config=self.config)

    def _write_checkpoint(self) -> None:
        if self.checkpoint is None:
            return
        self.checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
        scratch = self.checkpoint_path.with_suffix(".tmp")
        scratch.write_text(self.checkpoint.model_dump_json())
        os.replace(scratch, self.checkpoint_path)

    def _chunks(self, start: int, reps: int) -> List[tuple]:
        return [
            (lo, min(lo + self.chunk_size, reps))
            for lo in range(start, reps, self.chunk_size)
        ]

    def run(
        self,
        stage: str,
        observe: Observer,
        seed: int,
        reps: int,
        reservoirs: Optional[Dict[str, int]] = None,
    ) -> Dict[str, Accumulator]:
        """
        Run replicates 0..reps-1 of a stage and return its accumulators.

        Args:
            stage: Stage name, unique within an experiment
            observe: Picklable function of a StreamKey returning named values
            seed: Experiment seed
            reps: Number of replicates
            reservoirs: Reservoir capacity per observation name

        Returns:
            Dict[str, Accumulator]: Accumulators keyed by observation name
        """
        reservoirs = reservoirs or {}
        state = StageState(reps=reps)
        if self.checkpoint is not None:
            state = self.checkpoint.stages.setdefault(stage, state)
            if state.reps != reps:
                raise ValueError(
                    f"Stage '{stage}' was checkpointed with {state.reps} reps, not {reps}."
                )
        if state.completed:
            return state.accumulators

        chunks = self._chunks(state.frontier, reps)
        logger.info(
            f"Stage '{stage}': replicates {state.frontier}..{reps} in "
            f"{len(chunks)} chunks on {self.workers} worker(s)"
        )
        results = self._execute(observe, seed, chunks, reservoirs)
        try:
            for lo, hi, result in results:
                merge_all(state.accumulators, result, reservoirs)
                state.frontier = hi
                self._write_checkpoint()
                logger.debug(f"Stage '{stage}': frontier {hi}/{reps}")
                if self.stop_at is not None and hi >= self.stop_at and hi < reps:
                    raise KeyboardInterrupt
        except KeyboardInterrupt:
            self._write_checkpoint()
            logger.warning(f"Stage '{stage}' interrupted at replicate {state.frontier}")
            raise ExperimentInterrupted(
                state.frontier,
                str(self.checkpoint_path) if self.checkpoint_path else None,
            )
        finally:
            results.close()
        return state.accumulators

    def _execute(self, observe, seed, chunks, reservoirs):
        # Yields chunk results in chunk order.
        if self.workers == 1 or len(chunks) == 1:
            for lo, hi in chunks:
                yield lo, hi, run_chunk(observe, seed, lo, hi, reservoirs)
            return

        window = 2 * self.workers
        executor = ProcessPoolExecutor(max_workers=self.workers)
        try:
            pending = []
            queue = list(chunks)
            while queue or pending:
                while queue and len(pending) < window:
                    lo, hi = queue.pop(0)
                    future = executor.submit(run_chunk, observe, seed, lo, hi, reservoirs)
                    pending.append((lo, hi, future))
                lo, hi, future = pending.pop(0)
                yield lo, hi, future.result()
        finally:
            executor.shutdown(wait=True, cancel_futures=True)
