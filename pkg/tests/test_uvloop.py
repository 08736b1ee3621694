#!/usr/bin/env python3

import asyncio
import os
import sys

import pytest

if os.name != "nt":
    import uvloop

from modal_to_text.experiment import ablation_cells, install_event_loop_policy, run_cells_async
from tiny_world import tiny_config

pytestmark = pytest.mark.skipif(sys.platform == "win32", reason="uvloop does not support windows at the moment")


@pytest.fixture
def restore_event_loop_policy():
    policy = asyncio.get_event_loop_policy()
    yield
    asyncio.set_event_loop_policy(policy)


def test_install_event_loop_policy(restore_event_loop_policy):
    install_event_loop_policy()
    assert isinstance(asyncio.get_event_loop_policy(), uvloop.EventLoopPolicy)  # pylint: disable=possibly-used-before-assignment


def test_cells_run_under_uvloop(tmp_path, restore_event_loop_policy):
    config = tiny_config([("train.epochs", 1), ("ablation.input_subsets", ["Q+V"]), ("ablation.seeds", [0, 1])])
    finished = []
    install_event_loop_policy()
    records = asyncio.run(run_cells_async(cells=ablation_cells(config=config, root_dir=str(tmp_path)), split="test", parallelism=2, on_result=finished.append))
    assert [x["seed"] for x in records] == [0, 1]
    assert sorted(x["seed"] for x in finished) == [0, 1]


if __name__ == "__main__":
    test_install_event_loop_policy(None)
