"""Synthetic point-cloud observations and point-cloud file I/O.

Observations are the ground-truth surface plus isotropic Gaussian noise,
with a spherical occluder around the tool tip.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ParseError, ValidationError


@dataclass
class PointCloud:
    """Observed points.

    ``ids`` maps each point back to the ground-truth surface index it was
    sampled from, so dropped points do not break the point/particle match.
    """

    points: np.ndarray
    occluded_flags: Optional[np.ndarray] = None
    frame_time: float = 0.0
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValidationError("point coordinates must be finite")
        if self.occluded_flags is not None:
            self.occluded_flags = np.asarray(self.occluded_flags, dtype=bool).reshape(-1)
            if len(self.occluded_flags) != len(self.points):
                raise ValidationError("occlusion flags do not match the point count")
        if self.ids is not None:
            self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
            if len(self.ids) != len(self.points):
                raise ValidationError("ids do not match the point count")

    def __len__(self):
        return len(self.points)

    def visible_points(self) -> np.ndarray:
        if self.occluded_flags is None:
            return self.points
        return self.points[~self.occluded_flags]

    def matched(self, n: int) -> tuple:
        """(n, 3) points aligned with surface indices, NaN where dropped,
        plus an (n,) occlusion mask."""
        ids = np.arange(len(self.points)) if self.ids is None else self.ids
        out = np.full((n, 3), np.nan)
        out[ids] = self.points
        mask = np.zeros(n, dtype=bool)
        if self.occluded_flags is not None:
            mask[ids] = self.occluded_flags
        return out, mask


@dataclass(frozen=True)
class ObservationConfig:
    noise_sigma: float = 0.0005
    occlusion_radius: float = 0.0
    drop_occluded: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0 or self.occlusion_radius < 0:
            raise ValidationError("noise_sigma and occlusion_radius must be non-negative")


def generate_observation(oracle_surface, tool_tip, cfg: ObservationConfig, frame: int = 0,
                         frame_time: float = 0.0) -> PointCloud:
    """Noisy, partly occluded copy of ``oracle_surface``.

    Noise is drawn from a generator seeded with ``(cfg.rng_seed, frame)``, so
    every frame has its own reproducible stream.  Occlusion is decided on
    the noise-free surface.
    """
    truth = np.asarray(oracle_surface, dtype=np.float64).reshape(-1, 3)
    if len(truth) == 0:
        raise ValidationError("oracle surface is empty")
    rng = np.random.default_rng([int(cfg.rng_seed), int(frame)])
    noise = rng.normal(0.0, 1.0, size=truth.shape) * cfg.noise_sigma
    pts = truth + noise
    ids = np.arange(len(truth))
    if cfg.occlusion_radius > 0:
        occluded = np.linalg.norm(truth - np.asarray(tool_tip, dtype=np.float64), axis=1) <= cfg.occlusion_radius
    else:
        occluded = np.zeros(len(truth), dtype=bool)
    if cfg.drop_occluded:
        keep = ~occluded
        return PointCloud(pts[keep], None, frame_time, ids[keep])
    return PointCloud(pts, occluded, frame_time, ids)


# -- file I/O --------------------------------------------------------------------


def _fmt(v) -> str:
    return f"{v:.12g}"


def save_cloud(path, cloud: PointCloud, fmt: Optional[str] = None) -> None:
    """Write CSV (``x,y,z[,occluded]`` rows) or ASCII PLY."""
    path = Path(path)
    fmt = fmt or ("ply" if path.suffix.lower() == ".ply" else "csv")
    flags = cloud.occluded_flags
    with open(path, "w") as fh:
        if fmt == "csv":
            for i, p in enumerate(cloud.points):
                row = [_fmt(c) for c in p]
                if flags is not None:
                    row.append(str(int(flags[i])))
                fh.write(",".join(row) + "\n")
        elif fmt == "ply":
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {len(cloud.points)}\n")
            fh.write("property double x\nproperty double y\nproperty double z\n")
            if flags is not None:
                fh.write("property uchar occluded\n")
            fh.write("end_header\n")
            for i, p in enumerate(cloud.points):
                row = [_fmt(c) for c in p]
                if flags is not None:
                    row.append(str(int(flags[i])))
                fh.write(" ".join(row) + "\n")
        else:
            raise ValidationError(f"unknown cloud format {fmt!r}")


def load_cloud(path, fmt: Optional[str] = None) -> PointCloud:
    """Read a CSV or ASCII PLY cloud; the format defaults to the file suffix."""
    path = Path(path)
    fmt = fmt or ("ply" if path.suffix.lower() == ".ply" else "csv")
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    if fmt == "csv":
        return _parse_csv(text)
    if fmt == "ply":
        return _parse_ply(text)
    raise ValidationError(f"unknown cloud format {fmt!r}")


def _row(values, lineno, width):
    try:
        nums = [float(v) for v in values]
    except ValueError:
        raise ParseError(f"non-numeric value in {values!r}", lineno) from None
    if len(nums) not in width:
        raise ParseError(f"expected {' or '.join(map(str, width))} columns, got {len(nums)}", lineno)
    return nums


def _parse_csv(text: str) -> PointCloud:
    pts, flags = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        nums = _row([v.strip() for v in line.split(",")], lineno, (3, 4))
        pts.append(nums[:3])
        flags.append(nums[3] if len(nums) == 4 else None)
    has_flags = any(f is not None for f in flags)
    if has_flags and any(f is None for f in flags):
        raise ParseError("occlusion column present on some rows only")
    arr = np.array(pts, dtype=np.float64).reshape(-1, 3)
    return PointCloud(arr, np.array(flags, dtype=float) != 0 if has_flags else None)


def _parse_ply(text: str) -> PointCloud:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    n_vertex = None
    props = []
    elements = []
    header_end = None
    for lineno, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1:2] != ["ascii"]:
                raise ParseError("only ASCII PLY is supported", lineno)
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2])))
            if tok[1] == "vertex":
                n_vertex = int(tok[2])
        elif tok[0] == "property":
            if elements and elements[-1][0] == "vertex":
                props.append(tok[-1])
        elif tok[0] == "end_header":
            header_end = lineno
            break
        else:
            raise ParseError(f"unexpected header line {line!r}", lineno)
    if header_end is None:
        raise ParseError("missing end_header")
    if n_vertex is None:
        n_vertex = 0
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        if n_vertex:
            raise ParseError("vertex element lacks x/y/z properties") from None
        cols = [0, 1, 2]
    occ_col = props.index("occluded") if "occluded" in props else None
    # vertices come after any elements declared before them
    skip = 0
    for name, count in elements:
        if name == "vertex":
            break
        skip += count
    body = [(i, ln) for i, ln in enumerate(lines[header_end:], start=header_end + 1) if ln.strip()]
    rows = body[skip:skip + n_vertex]
    if len(rows) < n_vertex:
        raise ParseError(f"expected {n_vertex} vertices, found {len(rows)}")
    pts, flags = [], []
    for lineno, ln in rows:
        nums = _row(ln.split(), lineno, (len(props),))
        pts.append([nums[c] for c in cols])
        if occ_col is not None:
            flags.append(nums[occ_col] != 0)
    arr = np.array(pts, dtype=np.float64).reshape(-1, 3)
    return PointCloud(arr, np.array(flags, dtype=bool) if occ_col is not None else None)
