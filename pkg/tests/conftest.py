import numpy as np
import pytest

from psgmae import mae, pipeline, synthgen


TINY_CONFIG_KWARGS = dict(
    patch_size=10, seq_len=4, embed_dim=8, num_heads=2,
    encoder_layers=1, decoder_layers=1, mask_ratio=0.5,
    target_channels=("t0", "t1"),
)


@pytest.fixture
def tiny_config():
    return mae.MaeConfig(**TINY_CONFIG_KWARGS)


def philox(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def synth_records(seed=0, minutes=5.0, noise_std=5.0, subject_id="S000"):
    """Segment one synthetic recording into epoch records."""
    spec = synthgen.SynthSpec(
        seed=seed, duration_s=int(minutes * 60), noise_std=noise_std,
        subject_id=subject_id,
    )
    recording, annotations = synthgen.generate(spec)
    return pipeline.segment_epochs(
        recording, annotations, synthgen.INPUT_CHANNEL,
        list(synthgen.DEFAULT_TARGETS), subject_id=subject_id,
    )


def synth_dataset(n_subjects=5, minutes=3.0, seed=0, noise_std=5.0,
                  fractions=(0.6, 0.2, 0.2)):
    """Multi-subject synthetic dataset with a subject-level split."""
    records = []
    entries = []
    for i in range(n_subjects):
        subject = f"S{i:03d}"
        subject_records = synth_records(
            seed=(seed, i), minutes=minutes, noise_std=noise_std,
            subject_id=subject,
        )
        records.extend(subject_records)
        entries.append(pipeline.SubjectEntry(
            subject_id=subject, psg_path=f"{subject}-PSG.edf",
            hypnogram_path=f"{subject}-Hypnogram.edf",
            stage_counts=pipeline.stage_histogram(subject_records),
        ))
    manifest = pipeline.DatasetManifest(subjects=entries, seed=seed)
    manifest = pipeline.split_subjects(manifest, seed, fractions)
    splits = {"train": [], "val": [], "test": []}
    for record in records:
        splits[manifest.splits[record.subject_id]].append(record)
    return manifest, records, splits
