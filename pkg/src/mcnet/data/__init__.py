from mcnet.data.dataset import (
    BRATS_MODALITIES,
    Batch,
    DatasetManifest,
    Sample,
    batch_iterator,
    load_manifest,
    load_samples,
    split_dataset,
    stack,
    write_dataset,
)
from mcnet.data.pgm import encode_pgm, load_pgm, parse_pgm, save_pgm
from mcnet.data.preprocess import pad_to, preprocess, resize_bilinear, resize_nearest
from mcnet.data.synth import synth_dataset, synth_sample

__all__ = [
    "BRATS_MODALITIES", "Batch", "DatasetManifest", "Sample", "batch_iterator", "encode_pgm",
    "load_manifest", "load_pgm", "load_samples", "pad_to", "parse_pgm", "preprocess",
    "resize_bilinear", "resize_nearest", "save_pgm", "split_dataset", "stack", "synth_dataset",
    "synth_sample", "write_dataset",
]
