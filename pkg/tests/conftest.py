import pytest

from talktrack import load_catalog, load_rules, load_scenario, toyshop_paths


@pytest.fixture(scope="session")
def toyshop():
    paths = toyshop_paths()
    catalog = load_catalog(paths["catalog"])
    return {
        "spec": load_scenario(paths["scenario"]),
        "catalog": catalog,
        "rules": load_rules(paths["rules"], catalog),
        "paths": paths,
    }
