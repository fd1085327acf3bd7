"""Shared fixtures: tiny domains and plans sized for sub-second tests."""

import numpy as np
import pytest

from rankfuse.continual import StepPlan
from rankfuse.data import DomainSpec, PairPolicy, StyleParams, generate_domain, with_domain_id
from rankfuse.losses import LossToggles

TINY_STYLE = StyleParams(
    plane_weight=0.5,
    box_weight=0.3,
    clutter_weight=0.2,
    landmark_density=0.4,
    visibility_radius=45.0,
    noise=0.02,
    yaw_jitter=0.1,
)


def tiny_domain(seed=7, n_places=40, session=0, points=32, style=TINY_STYLE, domain_id=0):
    spec = DomainSpec(
        seed=seed,
        n_places=n_places,
        trajectory_length=300.0,
        style=style,
        session=session,
    )
    return with_domain_id(generate_domain(spec, points_per_scan=points), domain_id)


def tiny_plan(step_index=0, **overrides):
    defaults = dict(
        step_index=step_index,
        epochs=2,
        lr=1e-3,
        lr_drop_epoch=1,
        batch_start=8,
        batch_cap=16,
        margin=0.2,
        rank_temp=0.1,
        dist_temp=1.0,
        toggles=LossToggles(pr=True, rkd=step_index > 0, dkd=step_index > 0),
    )
    defaults.update(overrides)
    return StepPlan(**defaults)


@pytest.fixture
def policy():
    return PairPolicy(pos_train=10.0, neg_train=50.0, pos_test=25.0)


@pytest.fixture
def unit_rows():
    def make(n, d, seed=0):
        rng = np.random.default_rng(seed)
        e = rng.normal(size=(n, d))
        return e / np.linalg.norm(e, axis=1, keepdims=True)

    return make
