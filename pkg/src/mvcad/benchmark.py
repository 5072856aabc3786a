"""The standard benchmark: 10 seeded synthetic scenes with calibrated noise.

Scene sizes vary with the seed index (5-10 objects, 60-114 frames). Noise is
fixed at 3 px center, 5 deg rotation, 4 px box sides, 10% scale, 10% dropout
(plus 5% vote errors). Spec files shipped under mvcad/benchmarks mirror
`standard_specs()` exactly; a test guards against drift.
"""

from __future__ import annotations

from dataclasses import replace
from importlib import resources
from pathlib import Path

from .synth import NoiseSpec, PoseRanges, SynthSpec, TrajectorySpec, save_synth_spec

N_SCENES = 10

STANDARD_NOISE = NoiseSpec(
    center_sigma=3.0,
    rotation_sigma_deg=5.0,
    box_sigma=4.0,
    scale_sigma=0.10,
    dropout_rate=0.10,
    vote_error_rate=0.05,
)


def standard_spec(index: int) -> SynthSpec:
    if not (0 <= index < N_SCENES):
        raise ValueError(f"benchmark index {index} outside [0, {N_SCENES})")
    return SynthSpec(
        seed=1000 + index,
        n_objects=7 + index % 4,
        cad_db="standard",
        pose_ranges=PoseRanges(
            t_min=(-2.6, -2.6, 0.25),
            t_max=(2.6, 2.6, 0.95),
            s_min=0.6,
            s_max=1.8,
            min_separation=1.1,
        ),
        trajectory=TrajectorySpec(
            kind="orbit",
            n_frames=60 + 6 * index,
            radius=8.5 + 0.1 * index,
            height=3.0 + 0.06 * index,
            arc_deg=300.0,
            start_deg=17.0 * index,
        ),
        noise=STANDARD_NOISE,
    )


def standard_specs() -> list[SynthSpec]:
    return [standard_spec(i) for i in range(N_SCENES)]


def noiseless(spec: SynthSpec) -> SynthSpec:
    return replace(spec, noise=NoiseSpec())


def spec_filename(index: int) -> str:
    return f"seed_{index:02d}.json"


def packaged_spec_path(index: int) -> Path:
    return Path(resources.files("mvcad") / "benchmarks" / spec_filename(index))


def write_spec_files(directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for i in range(N_SCENES):
        path = directory / spec_filename(i)
        save_synth_spec(standard_spec(i), path)
        out.append(path)
    return out
