from importlib.resources import files

import pytest

from rssnav import SourceSpec, parse_floor_plan, synthesize_field


def load_fixture(name):
    return parse_floor_plan((files("rssnav") / "fixtures" / f"{name}.plan").read_text())


@pytest.fixture(scope="session")
def rooms():
    plan = load_fixture("rooms-small")
    return plan, synthesize_field(plan, SourceSpec(plan.target))


@pytest.fixture(scope="session")
def corridor():
    plan = load_fixture("corridor")
    return plan, synthesize_field(plan, SourceSpec(plan.target))
