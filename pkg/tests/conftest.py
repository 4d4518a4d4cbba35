import pytest

from genie import GeneratorConfig, PolicyConfig, generate_logs, generate_marketplace


@pytest.fixture(scope="session")
def small_model():
    return generate_marketplace(GeneratorConfig(n_advertisers=8, n_query_classes=3), seed=42)


@pytest.fixture(scope="session")
def small_logs(small_model):
    return generate_logs(small_model, PolicyConfig({"reserve_score": 0.1}), 400, seed=7)
