"""Long-short temporal attention kernels and a desk-scale video segmentation pipeline.

Submodules:
    rng      -- splittable counter-based pseudorandom generator
    tensor   -- float32 tensor type with reverse-mode autodiff and binary serialization
    ltm      -- linearized global attention over a multi-frame feature memory
    sta      -- sliding-window patch attention between neighboring frames
    model    -- encoder, frame selection, fusion decoder, training step
    losses   -- hard-example-mined and distillation cross-entropy
    data     -- synthetic moving-shapes clips and teacher soft labels
    pnm      -- portable pixmap/graymap I/O
    metrics  -- region similarity and contour accuracy
    bench    -- attention complexity benchmark harness
    cli      -- command-line entry point

This top-level module intentionally imports nothing heavy so that the CLI can
configure thread limits before numpy loads.
"""

__version__ = "0.1.0"
