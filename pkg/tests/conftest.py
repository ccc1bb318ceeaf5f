"""Shared fixtures and random-case generators."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from echoadapt.remap import LabelSpace, RemapEntry, RemapPlan, SemanticMask, build_plan

settings.register_profile("suite", max_examples=50, derandomize=True, deadline=None)
settings.load_profile("suite")


def model_space() -> LabelSpace:
    """Vocabulary of the pretrained (source-modality) model."""
    return LabelSpace(
        name="tte_phantom",
        classes=((1, "LA"), (2, "LV"), (3, "LV_epi")),
        background_id=0,
    )


def dataset_space() -> LabelSpace:
    """Vocabulary of the new (target-modality) dataset, in reporting order."""
    return LabelSpace(
        name="tee_phantom",
        classes=((1, "LA"), (2, "LV"), (3, "RV"), (4, "RA")),
        background_id=0,
    )


def chamber_plan() -> RemapPlan:
    """The canonical four-chamber -> three-channel plan used across tests."""
    y, x = dataset_space(), model_space()
    return build_plan(
        source=y,
        target=x,
        repurpose_assignments=[({y.id_of("RA"), y.id_of("RV")}, x.id_of("LV_epi"))],
    )


def random_plan_case(rng: np.random.Generator):
    """A random (source space, target space, valid plan) triple.

    Shared names become identity entries; leftover source classes are
    partitioned into groups repurposed onto distinct target-only classes.
    """
    pool = [f"c{i}" for i in range(12)]
    n_shared = int(rng.integers(0, 4))
    n_src_only = int(rng.integers(0 if n_shared else 1, 4))
    n_tgt_only = int(rng.integers(1 if n_src_only else 0, 4))
    names = list(rng.permutation(pool))
    shared = [names.pop() for _ in range(n_shared)]
    src_only = [names.pop() for _ in range(n_src_only)]
    tgt_only = [names.pop() for _ in range(n_tgt_only)]

    def ids(n):
        return [int(i) for i in rng.choice(np.arange(1, 30), size=n, replace=False)]

    src_names = shared + src_only
    tgt_names = shared + tgt_only
    source = LabelSpace(
        name="src", classes=tuple(zip(ids(len(src_names)), src_names)), background_id=0
    )
    target = LabelSpace(
        name="tgt", classes=tuple(zip(ids(len(tgt_names)), tgt_names)), background_id=0
    )

    repurpose = []
    if src_only:
        n_groups = int(rng.integers(1, min(len(src_only), n_tgt_only) + 1))
        bounds = sorted(
            rng.choice(np.arange(1, len(src_only)), size=n_groups - 1, replace=False).tolist()
        )
        pieces = np.split(np.array([source.id_of(n) for n in src_only]), bounds)
        targets = rng.choice([target.id_of(n) for n in tgt_only], size=n_groups, replace=False)
        repurpose = [(set(int(i) for i in p), int(t)) for p, t in zip(pieces, targets)]

    plan = build_plan(source=source, target=target, repurpose_assignments=repurpose)
    return source, target, plan


def random_mask(rng: np.random.Generator, space: LabelSpace, shape=(8, 8)) -> SemanticMask:
    values = [space.background_id, *space.class_ids]
    labels = rng.choice(values, size=shape)
    return SemanticMask(labels=labels.astype(np.int64), space=space)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
