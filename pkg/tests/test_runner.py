import shutil
from functools import partial
from pathlib import Path

import pytest

from maxlocal.constants import Subcommand
from maxlocal.errors import ExperimentInterrupted
from maxlocal.lattice import observe_escape
from maxlocal.models import ExperimentConfig
from maxlocal.runner import ReplicateRunner, config_fingerprint, load_checkpoint

PATH = Path("./maxlocal_runner_test")
CHECKPOINT = PATH / "checkpoint.json"
OBSERVE = partial(observe_escape, d=3, horizon=100)
CONFIG = ExperimentConfig(subcommand=Subcommand.CONSTANTS, reps=40, seed=12)


@pytest.fixture(scope="function", autouse=True)
def cleanup_runner_path():
    if PATH.exists():
        shutil.rmtree(PATH)

    yield

    if PATH.exists():
        shutil.rmtree(PATH)


def run_escapes(runner, reps=40):
    return runner.run("escape", OBSERVE, seed=12, reps=reps)["escaped"]


def test_chunking_does_not_change_results():
    reference = run_escapes(ReplicateRunner(chunk_size=40))
    for chunk_size in (1, 7, 16):
        result = run_escapes(ReplicateRunner(chunk_size=chunk_size))
        assert result.count == reference.count == 40
        assert result.sum == reference.sum
        assert result.sum_sq == reference.sum_sq


def test_workers_do_not_change_results():
    reference = run_escapes(ReplicateRunner(workers=1, chunk_size=5))
    parallel = run_escapes(ReplicateRunner(workers=2, chunk_size=5))
    assert parallel.count == reference.count
    assert parallel.sum == reference.sum


def test_interrupt_and_resume():
    runner = ReplicateRunner(
        chunk_size=5, checkpoint_path=CHECKPOINT, config=CONFIG, stop_at=15
    )
    with pytest.raises(ExperimentInterrupted) as info:
        run_escapes(runner)
    assert info.value.frontier == 15
    assert info.value.checkpoint_path == str(CHECKPOINT)

    checkpoint = load_checkpoint(CHECKPOINT)
    assert checkpoint.fingerprint == config_fingerprint(CONFIG)
    assert checkpoint.stages["escape"].frontier == 15
    assert checkpoint.stages["escape"].accumulators["escaped"].count == 15

    resumed = run_escapes(
        ReplicateRunner(chunk_size=5, checkpoint_path=CHECKPOINT, config=CONFIG)
    )
    reference = run_escapes(ReplicateRunner())
    assert resumed.count == 40
    assert resumed.sum == reference.sum
    assert load_checkpoint(CHECKPOINT).stages["escape"].completed


def test_completed_stage_is_not_rerun():
    runner = ReplicateRunner(chunk_size=10, checkpoint_path=CHECKPOINT, config=CONFIG)
    first = run_escapes(runner)
    again = ReplicateRunner(
        chunk_size=10, checkpoint_path=CHECKPOINT, config=CONFIG, stop_at=1
    )
    assert run_escapes(again).sum == first.sum


def test_checkpoint_of_other_config_is_rejected():
    ReplicateRunner(chunk_size=10, checkpoint_path=CHECKPOINT, config=CONFIG).run(
        "escape", OBSERVE, seed=12, reps=10
    )
    other = CONFIG.model_copy(update={"seed": 13})
    with pytest.raises(ValueError, match="another config"):
        ReplicateRunner(checkpoint_path=CHECKPOINT, config=other)


def test_fingerprint_ignores_placement():
    moved = CONFIG.model_copy(update={"workers": 4, "output_dir": "/elsewhere"})
    assert config_fingerprint(moved) == config_fingerprint(CONFIG)
    assert config_fingerprint(CONFIG.model_copy(update={"reps": 41})) != config_fingerprint(
        CONFIG
    )


def test_stage_reps_must_match_checkpoint():
    runner = ReplicateRunner(chunk_size=10, checkpoint_path=CHECKPOINT, config=CONFIG)
    run_escapes(runner, reps=10)
    with pytest.raises(ValueError, match="checkpointed with 10 reps"):
        run_escapes(runner, reps=20)


def test_runner_validation():
    with pytest.raises(ValueError, match="positive"):
        ReplicateRunner(workers=0)
    with pytest.raises(ValueError, match="experiment config"):
        ReplicateRunner(checkpoint_path=CHECKPOINT)
