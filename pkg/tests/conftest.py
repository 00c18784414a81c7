import pytest

from dtgnn.distill import distill

import treekit


@pytest.fixture(scope="session")
def node_run():
    """Trained fold 0 of the node toy, one message-passing layer."""
    dataset = treekit.node_toy()
    result, fold, config = treekit.quick_fold(dataset, layer_count=1)
    return dataset, result, fold, config


@pytest.fixture(scope="session")
def node_run_l2():
    dataset = treekit.node_toy()
    result, fold, config = treekit.quick_fold(dataset, layer_count=2)
    return dataset, result, fold, config


@pytest.fixture(scope="session")
def graph_run():
    dataset = treekit.graph_toy()
    result, fold, config = treekit.quick_fold(dataset)
    return dataset, result, fold, config


@pytest.fixture(scope="session")
def node_model(node_run):
    dataset, result, fold, config = node_run
    return dataset, distill(result.model, dataset, result.fit_ids), fold


@pytest.fixture(scope="session")
def graph_model(graph_run):
    dataset, result, fold, config = graph_run
    return dataset, distill(result.model, dataset, result.fit_ids), fold
