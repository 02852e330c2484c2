"""Shared fixtures: small synthetic datasets reused across test modules.

Heavy session-scoped fixtures (the 500-event training sets) live here so the
end-to-end tests can share one generation pass.
"""

from __future__ import annotations

import numpy as np
import pytest

from swimbout.augment import DESK_AUGMENT, augment_event, augment_split
from swimbout.container import ContainerWriter, DatasetContainer
from swimbout.preprocess import process_clip
from swimbout.synthgen import SynthSpec, clip_rngs, generate_bout
from swimbout.twostream import TrainConfig, build_model, desk_stream, evaluate, train

SEED = 462019


def make_events(n, artifact_probability=0.0, seed=SEED, frame_size=256,
                labels=None, mask_corners=False):
    """Generate ``n`` single-bout clips in memory and return their events."""
    spec = SynthSpec(n_videos=n, frame_size=(frame_size, frame_size),
                     frames_per_video=180,
                     artifact_probability=artifact_probability, seed=seed)
    rngs, label_rng = clip_rngs(spec)
    if labels is None:
        labels = (label_rng.random(n) < spec.class_balance).astype(int)
    events = []
    for i in range(n):
        clip = generate_bout(spec, int(labels[i]), rngs[i],
                             source_id=f"clip_{i:05d}")
        events.extend(process_clip(clip, int(labels[i]),
                                   mask_corners=mask_corners))
    return events


@pytest.fixture(scope="session")
def small_events():
    """Ten mixed-label events for cheap integration tests."""
    return make_events(10, labels=[0, 1] * 5)


@pytest.fixture(scope="session")
def desk_containers(tmp_path_factory, small_events):
    """Tiny desk-preset train/valid containers from the small event set."""
    root = tmp_path_factory.mktemp("desk_containers")
    train_part = small_events[:8]
    valid_part = small_events[8:]
    augment_split(train_part, "train", root / "train.bout", DESK_AUGMENT,
                  seed=SEED)
    augment_split(valid_part, "valid", root / "valid.bout", DESK_AUGMENT,
                  seed=SEED + 1)
    return root


# ---------------------------------------------------------------------------
# heavy end-to-end fixtures (shared by the pipeline-level tests)
# ---------------------------------------------------------------------------

N_TRAIN_EVENTS = 400
N_TEST_EVENTS = 100


def build_desk_containers(root, artifact_probability=0.0, seed=SEED,
                          mask_corners=False,
                          n_train=N_TRAIN_EVENTS, n_test=N_TEST_EVENTS):
    """Stream clips straight into desk-preset containers, one clip at a time.

    Keeping all source events in memory at once would need gigabytes, so each
    clip is generated, preprocessed, augmented and appended, then discarded.
    """
    n_clips = n_train + n_test
    spec = SynthSpec(n_videos=n_clips, frame_size=(256, 256),
                     frames_per_video=180,
                     artifact_probability=artifact_probability, seed=seed)
    rngs, label_rng = clip_rngs(spec)
    labels = (label_rng.random(n_clips) < spec.class_balance).astype(int)
    aug_seeds = np.random.SeedSequence(seed + 1).generate_state(n_clips)

    count = 0
    with ContainerWriter(root / "train.bout", "train") as train_writer, \
            ContainerWriter(root / "test.bout", "test") as test_writer:
        for i in range(n_clips):
            clip = generate_bout(spec, int(labels[i]), rngs[i],
                                 source_id=f"clip_{i:05d}")
            for event in process_clip(clip, int(labels[i]),
                                      mask_corners=mask_corners):
                writer = train_writer if count < n_train else test_writer
                aug_rng = np.random.default_rng(int(aug_seeds[i]))
                for sample in augment_event(event, aug_rng, DESK_AUGMENT):
                    writer.append(sample)
                count += 1
    return root


@pytest.fixture(scope="session")
def clean_containers(tmp_path_factory):
    """400 train / 100 test artifact-free events, desk-augmented."""
    root = tmp_path_factory.mktemp("clean_data")
    return build_desk_containers(root)


@pytest.fixture(scope="session")
def artifact_containers(tmp_path_factory):
    """Same scale, but every negative clip carries the corner artifact."""
    root = tmp_path_factory.mktemp("artifact_data")
    return build_desk_containers(root, artifact_probability=1.0, seed=SEED + 7)


@pytest.fixture(scope="session")
def masked_containers(tmp_path_factory):
    """The artifact events again, with corner regions blanked before use."""
    root = tmp_path_factory.mktemp("masked_data")
    return build_desk_containers(root, artifact_probability=1.0, seed=SEED + 7,
                                 mask_corners=True)


def train_desk_model(root):
    """Five-epoch desk-preset training run; returns (model, test metrics).

    The test container is passed as the monitoring set for the history, but
    the reported metrics come from the final-epoch parameters, so no
    test-based model selection happens.
    """
    with DatasetContainer(root / "train.bout") as train_data, \
            DatasetContainer(root / "test.bout") as test_data:
        channels = train_data[0].temporal.shape[0]
        model = build_model(desk_stream(1), desk_stream(channels), seed=SEED)
        train(model, train_data, test_data, TrainConfig(epochs=5, seed=SEED),
              quiet=True)
        metrics = evaluate(model, test_data)
    return model, metrics


@pytest.fixture(scope="session")
def clean_run(clean_containers):
    return train_desk_model(clean_containers)


@pytest.fixture(scope="session")
def artifact_run(artifact_containers):
    return train_desk_model(artifact_containers)


@pytest.fixture(scope="session")
def masked_run(masked_containers):
    return train_desk_model(masked_containers)
