"""Procedural reference/test scan pairs with injected, labelled defects.

Surfaces are parametrised by (u, y): ``u`` is arc length across the
surface (x for a plane) and ``y`` runs along its length. Defects are
declared in that parameter space and lifted onto the surface.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .core import LABEL_CODES, PointCloud
from .errors import ParameterError

SURFACES = ("plane", "arch")
DEFECT_KINDS = ("intrados_crack", "extrados_crack", "water_patch")
PRESETS = ("arch_x_move", "arch_z_move", "arch_xz", "tunnel_ovalization", "water_only")

_STREAM_REFERENCE = 1
_STREAM_TEST = 2
_STREAM_GROOVE = 3


@dataclass
class Deformation:
    """Rigid motion of the crack's moving side (signed distance > 0).

    ``rotation`` turns that side about the crack line by ``angle`` radians;
    ``translation`` shifts it by ``vector`` metres.
    """

    kind: str = "rotation"
    angle: float = 0.0
    vector: Tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class DefectSpec:
    kind: str
    line: List[Tuple[float, float]] = field(default_factory=list)
    width: float = 0.0
    depth: float = 0.0
    intensity_drop: float = 0.0
    deformation: Optional[Deformation] = None
    center: Tuple[float, float] = (0.0, 0.0)
    semi_axes: Tuple[float, float] = (0.0, 0.0)


@dataclass
class SceneSpec:
    surface: str = "arch"
    radius: float = 1.5
    span: float = math.pi
    length: float = 2.0
    width: float = 2.0
    spacing: float = 0.01
    roughness_depth: float = 0.004
    cell_size: Tuple[float, float] = (0.24, 0.08)
    mortar_width: float = 0.012
    noise_sigma: float = 0.0005
    base_intensity: float = 0.6
    intensity_texture_amplitude: float = 0.05
    mortar_intensity: float = 0.3
    intensity_floor: float = 0.05
    seed: int = 0
    scene_class: str = "arch"
    defects: List[DefectSpec] = field(default_factory=list)

    @property
    def extent_u(self) -> float:
        return self.radius * self.span if self.surface == "arch" else self.width

    def scanner_position(self) -> Tuple[float, float, float]:
        """Viewpoint used to orient normals: on the arch axis, or above the plane."""
        if self.surface == "arch":
            return (0.0, self.length / 2.0, 0.0)
        return (self.width / 2.0, self.length / 2.0, 10.0)

    def validate(self) -> None:
        if self.surface not in SURFACES:
            raise ParameterError(f"unknown surface {self.surface!r}")
        if not self.spacing > 0:
            raise ParameterError("spacing must be positive")
        if self.surface == "arch" and not (self.radius > 0 and 0 < self.span <= 2 * math.pi):
            raise ParameterError("arch needs radius > 0 and 0 < span <= 2*pi")
        if not (self.length > 0 and self.extent_u > 0):
            raise ParameterError("surface extent must be positive")
        for name in ("roughness_depth", "noise_sigma", "intensity_texture_amplitude", "mortar_width"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        if min(self.cell_size) <= 0:
            raise ParameterError("cell_size must be positive")
        if not 0 <= self.base_intensity <= 1:
            raise ParameterError("base_intensity must lie in [0, 1]")
        if self.mortar_intensity > self.base_intensity - self.intensity_texture_amplitude:
            raise ParameterError("mortar_intensity must not exceed the darkest brick value")
        if not 0 <= self.intensity_floor <= self.mortar_intensity:
            raise ParameterError("intensity_floor must lie in [0, mortar_intensity]")
        for defect in self.defects:
            _validate_defect(self, defect)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        data = dict(data)
        defects = []
        for d in data.pop("defects", []) or []:
            d = dict(d)
            deform = d.pop("deformation", None)
            if deform is not None:
                deform = dict(deform)
                if "vector" in deform:
                    deform["vector"] = tuple(deform["vector"])
                deform = Deformation(**deform)
            for key in ("center", "semi_axes"):
                if key in d:
                    d[key] = tuple(d[key])
            d["line"] = [tuple(p) for p in d.get("line", [])]
            defects.append(DefectSpec(deformation=deform, **d))
        if "cell_size" in data:
            data["cell_size"] = tuple(data["cell_size"])
        try:
            return cls(defects=defects, **data)
        except TypeError as exc:
            raise ParameterError(f"invalid scene spec: {exc}") from None


@dataclass(eq=False)
class LabeledPair:
    reference: PointCloud
    test: PointCloud
    spec: SceneSpec

    @property
    def labels(self) -> np.ndarray:
        return self.test.labels


def _validate_defect(spec: SceneSpec, d: DefectSpec) -> None:
    if d.kind not in DEFECT_KINDS:
        raise ParameterError(f"unknown defect kind {d.kind!r}")
    eu, ey = spec.extent_u, spec.length
    if not 0 <= d.intensity_drop <= spec.base_intensity:
        raise ParameterError("intensity_drop must lie in [0, base_intensity]")
    if d.kind == "water_patch":
        (cu, cy), (a, b) = d.center, d.semi_axes
        if not (a > 0 and b > 0):
            raise ParameterError("water patch semi-axes must be positive")
        if cu - a < 0 or cu + a > eu or cy - b < 0 or cy + b > ey:
            raise ParameterError("water patch footprint lies outside the surface")
        return
    if not d.width > 0:
        raise ParameterError("crack width must be positive")
    if d.kind == "intrados_crack" and not d.depth > 0:
        raise ParameterError("intrados crack depth must be positive")
    line = np.asarray(d.line, dtype=np.float64)
    if line.ndim != 2 or line.shape[0] < 2 or line.shape[1] != 2:
        raise ParameterError("crack line needs at least two (u, y) points")
    if np.any(np.linalg.norm(np.diff(line, axis=0), axis=1) <= 0):
        raise ParameterError("crack line has repeated vertices")
    if line[:, 0].min() < 0 or line[:, 0].max() > eu or line[:, 1].min() < 0 or line[:, 1].max() > ey:
        raise ParameterError("crack line lies outside the surface")
    if d.deformation is not None and d.deformation.kind not in ("rotation", "translation"):
        raise ParameterError(f"unknown deformation {d.deformation.kind!r}")


# -- surface geometry ---------------------------------------------------------

def _embed(spec: SceneSpec, u: np.ndarray, y: np.ndarray):
    """Surface points and scanner-facing unit normals at parameters (u, y)."""
    if spec.surface == "plane":
        pos = np.column_stack([u, y, np.zeros_like(u)])
        nrm = np.tile([0.0, 0.0, 1.0], (u.size, 1))
        return pos, nrm
    phi = (math.pi - spec.span) / 2.0 + u / spec.radius
    c, s = np.cos(phi), np.sin(phi)
    pos = np.column_stack([spec.radius * c, y, spec.radius * s])
    nrm = np.column_stack([-c, np.zeros_like(c), -s])
    return pos, nrm


def _hash_noise(i: np.ndarray, j: np.ndarray, seed: int, salt: int) -> np.ndarray:
    """Deterministic per-cell value in [-1, 1] from integer cell coordinates."""
    h = (i.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         ^ j.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         ^ np.uint64((seed * 0x165667B1 + salt * 0x27D4EB2F) & 0xFFFFFFFFFFFFFFFF))
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xC4CEB9FE1A85EC53)
    h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53) * 2.0 - 1.0


def _masonry(spec: SceneSpec, u: np.ndarray, y: np.ndarray):
    """Running-bond brick pattern: (mortar mask, cell i, cell j, joint-void mask).

    Voids are the small squares where a head joint meets the bed joint below
    it; they return the darkest intensity of the scene.
    """
    bw, bh = spec.cell_size
    row = np.floor(y / bh).astype(np.int64)
    shifted = u + (row % 2) * (bw / 2.0)
    col = np.floor(shifted / bw).astype(np.int64)
    lu = shifted - col * bw
    ly = y - row * bh
    half = spec.mortar_width / 2.0
    mortar = (lu < half) | (lu > bw - half) | (ly < half) | (ly > bh - half)
    void = (lu < half) & (ly < half)
    return mortar, col, row, void


def _brick_intensity(spec: SceneSpec, u, y, col, row):
    amp = spec.intensity_texture_amplitude
    fine = _hash_noise(np.floor(u / (spec.cell_size[0] / 4)).astype(np.int64),
                       np.floor(y / (spec.cell_size[1] / 2)).astype(np.int64), spec.seed, 2)
    return spec.base_intensity + amp * (0.75 * _hash_noise(col, row, spec.seed, 1) + 0.25 * fine)


def _texture(spec: SceneSpec, u: np.ndarray, y: np.ndarray):
    """Relief depth (m, into the material) and intensity of the undamaged surface."""
    mortar, col, row, void = _masonry(spec, u, y)
    relief = spec.roughness_depth * 0.15 * (_hash_noise(col, row, spec.seed, 3) + 1.0)
    depth = np.where(mortar, spec.roughness_depth, relief)
    inten = np.where(mortar, spec.mortar_intensity, _brick_intensity(spec, u, y, col, row))
    inten[void] = spec.intensity_floor
    return depth, inten


# -- crack lines ----------------------------------------------------------------

def _polyline_frame(line: np.ndarray, u: np.ndarray, y: np.ndarray):
    """Signed distance to the polyline (via its nearest segment's line) and
    whether the foot point falls inside that segment's extent."""
    pts = np.column_stack([u, y])
    best = np.full(u.size, np.inf)
    signed = np.zeros(u.size)
    inside = np.zeros(u.size, dtype=bool)
    for a, b in zip(line[:-1], line[1:]):
        seg = b - a
        seg_len = float(np.hypot(*seg))
        tangent = seg / seg_len
        rel = pts - a
        along = rel @ tangent
        across = rel[:, 0] * tangent[1] - rel[:, 1] * tangent[0]
        clamped = np.clip(along, 0.0, seg_len)
        dist = np.hypot(along - clamped, across)
        closer = dist < best
        best = np.where(closer, dist, best)
        signed = np.where(closer, across, signed)
        inside = np.where(closer, (along >= 0) & (along <= seg_len), inside)
    return signed, inside


def _rotate_about(points: np.ndarray, origin: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    rel = points - origin
    c, s = math.cos(angle), math.sin(angle)
    rotated = (rel * c + np.cross(axis, rel) * s
               + np.outer(rel @ axis, axis) * (1.0 - c))
    return rotated + origin


def _apply_deformation(spec: SceneSpec, defect: DefectSpec, pos: np.ndarray, moving: np.ndarray) -> np.ndarray:
    deform = defect.deformation
    if deform is None or not moving.any():
        return pos
    out = pos.copy()
    if deform.kind == "translation":
        out[moving] += np.asarray(deform.vector, dtype=np.float64)
        return out
    line = np.asarray(defect.line, dtype=np.float64)
    ends, _ = _embed(spec, line[[0, -1], 0], line[[0, -1], 1])
    out[moving] = _rotate_about(pos[moving], ends[0], ends[1] - ends[0], deform.angle)
    return out


def _groove_samples(spec: SceneSpec, defect: DefectSpec):
    """Parameters of V-groove wall samples: (u, y, signed offset, depth)."""
    line = np.asarray(defect.line, dtype=np.float64)
    half, t, h = defect.width / 2.0, defect.depth, spec.spacing
    wall_len = math.hypot(half, t)
    n_wall = max(1, int(math.ceil(wall_len / h)))
    frac = (np.arange(n_wall) + 0.5) / n_wall
    us, ys, offs, depths = [], [], [], []
    for a, b in zip(line[:-1], line[1:]):
        seg = b - a
        seg_len = float(np.hypot(*seg))
        tangent = seg / seg_len
        normal = np.array([tangent[1], -tangent[0]])
        n_station = max(1, int(round(seg_len / h)))
        stations = a + np.outer((np.arange(n_station) + 0.5) / n_station * seg_len, tangent)
        for side in (-1.0, 1.0):
            off = side * half * (1.0 - frac)
            dep = t * frac
            grid = stations[:, None, :] + off[None, :, None] * normal
            us.append(grid[..., 0].ravel())
            ys.append(grid[..., 1].ravel())
            offs.append(np.tile(off, n_station))
            depths.append(np.tile(dep, n_station))
    return np.concatenate(us), np.concatenate(ys), np.concatenate(offs), np.concatenate(depths)


# -- generation -----------------------------------------------------------------

def _base_grid(spec: SceneSpec):
    nu = max(1, int(round(spec.extent_u / spec.spacing)))
    ny = max(1, int(round(spec.length / spec.spacing)))
    uu = (np.arange(nu) + 0.5) * (spec.extent_u / nu)
    yy = (np.arange(ny) + 0.5) * (spec.length / ny)
    u, y = np.meshgrid(uu, yy, indexing="ij")
    return u.ravel(), y.ravel()


def _noise(spec: SceneSpec, stream: int, n: int) -> np.ndarray:
    if spec.noise_sigma == 0:
        return np.zeros((n, 3))
    bitgen = np.random.Philox(np.random.SeedSequence([spec.seed, stream]))
    return np.random.Generator(bitgen).normal(0.0, spec.noise_sigma, size=(n, 3))


def _build_test(spec: SceneSpec, with_defects: bool = True):
    """Positions, intensities and label codes of the test scan.

    Noise is drawn per grid node (and per groove sample from its own
    stream), so removing or adding defects never shifts another point's noise.
    """
    u, y = _base_grid(spec)
    noise = _noise(spec, _STREAM_TEST, u.size)
    depth, inten = _texture(spec, u, y)
    labels = np.zeros(u.size, dtype=np.int8)
    defects = spec.defects if with_defects else []
    floor = spec.intensity_floor

    keep = np.ones(u.size, dtype=bool)
    extra_u, extra_y, extra_depth, extra_int, extra_lab, extra_owner, extra_off = [], [], [], [], [], [], []
    for k, d in enumerate(defects):
        if d.kind == "water_patch":
            rho = np.hypot((u - d.center[0]) / d.semi_axes[0], (y - d.center[1]) / d.semi_axes[1])
            patch = rho <= 1.0
            inten = np.where(patch, np.maximum(inten - d.intensity_drop * (1.0 - rho), floor), inten)
            labels[patch & (labels == 0)] = LABEL_CODES["water_patch"]
            continue
        line = np.asarray(d.line, dtype=np.float64)
        signed, _ = _polyline_frame(line, u, y)
        half = d.width / 2.0
        if d.kind == "extrados_crack":
            band = np.abs(signed) <= half
            labels[band & (labels == 0)] = LABEL_CODES["extrados_crack"]
            continue
        opening = np.abs(signed) < half
        keep &= ~opening
        lips = (np.abs(signed) >= half) & (np.abs(signed) <= d.width)
        labels[lips & (labels == 0)] = LABEL_CODES["intrados_crack"]
        gu, gy, goff, gdep = _groove_samples(spec, d)
        _, col, row, _ = _masonry(spec, gu, gy)
        g_int = np.maximum(_brick_intensity(spec, gu, gy, col, row) - d.intensity_drop, floor)
        extra_u.append(gu)
        extra_y.append(gy)
        extra_depth.append(gdep)
        extra_int.append(g_int)
        extra_lab.append(np.full(gu.size, LABEL_CODES["inner_crack"], dtype=np.int8))
        extra_owner.append(np.full(gu.size, k))
        extra_off.append(goff)

    surf_pos, surf_nrm = _embed(spec, u, y)
    pos = surf_pos - surf_nrm * depth[:, None]
    groove_owner = np.empty(0, dtype=np.int64)
    groove_off = np.empty(0)
    if extra_u:
        gu, gy = np.concatenate(extra_u), np.concatenate(extra_y)
        g_surf, g_nrm = _embed(spec, gu, gy)
        g_pos = g_surf - g_nrm * np.concatenate(extra_depth)[:, None]
        pos = np.vstack([pos[keep], g_pos])
        noise = np.vstack([noise[keep], _noise(spec, _STREAM_GROOVE, g_pos.shape[0])])
        inten = np.concatenate([inten[keep], np.concatenate(extra_int)])
        labels = np.concatenate([labels[keep], np.concatenate(extra_lab)])
        u = np.concatenate([u[keep], gu])
        y = np.concatenate([y[keep], gy])
        groove_owner = np.concatenate([np.full(int(keep.sum()), -1), np.concatenate(extra_owner)])
        groove_off = np.concatenate([np.zeros(int(keep.sum())), np.concatenate(extra_off)])
    else:
        pos, inten, labels, noise = pos[keep], inten[keep], labels[keep], noise[keep]
        u, y = u[keep], y[keep]
        groove_owner = np.full(pos.shape[0], -1)
        groove_off = np.zeros(pos.shape[0])

    for k, d in enumerate(defects):
        if d.kind == "water_patch" or d.deformation is None:
            continue
        signed, _ = _polyline_frame(np.asarray(d.line, dtype=np.float64), u, y)
        # groove samples of this crack take their side from the wall they belong to
        own = groove_owner == k
        signed = np.where(own, groove_off, signed)
        pos = _apply_deformation(spec, d, pos, signed > 0)
    return pos + noise, inten, labels


def generate(spec: SceneSpec) -> LabeledPair:
    """Reference (defect-free) and test (defects applied) scans of one scene."""
    spec.validate()
    u, y = _base_grid(spec)
    depth, ref_int = _texture(spec, u, y)
    surf_pos, surf_nrm = _embed(spec, u, y)
    ref_pos = surf_pos - surf_nrm * depth[:, None] + _noise(spec, _STREAM_REFERENCE, u.size)
    test_pos, test_int, labels = _build_test(spec)
    reference = PointCloud.from_raw(ref_pos, ref_int, np.zeros(u.size, dtype=np.int8), "reference")
    test = PointCloud.from_raw(test_pos, test_int, labels, "test")
    return LabeledPair(reference, test, spec)


def generate_undamaged_test(spec: SceneSpec) -> PointCloud:
    """The test scan with every defect removed (same noise stream)."""
    spec.validate()
    pos, inten, labels = _build_test(spec, with_defects=False)
    return PointCloud.from_raw(pos, inten, labels, "test")


# -- presets --------------------------------------------------------------------

def _arch_crack(spec: SceneSpec, frac: float, kind: str, deformation: Deformation,
                width: float, depth: float = 0.0, drop: float = 0.0) -> DefectSpec:
    u0 = frac * spec.extent_u
    return DefectSpec(kind=kind, line=[(u0, 0.0), (u0, spec.length)], width=width, depth=depth,
                      intensity_drop=drop, deformation=deformation)


def preset(name: str) -> SceneSpec:
    """Named demonstration scenes.

    ``arch_*``: semicircular masonry arch (r = 1.5 m, 2 m long) with hinge
    cracks from a support movement in x, z or both. ``tunnel_ovalization``:
    a 1.375 m lining segment with crown and shoulder hinges.
    ``water_only``: the arch with a single water patch.
    """
    if name not in PRESETS:
        raise ParameterError(f"unknown preset {name!r}; expected one of {PRESETS}")
    if name == "tunnel_ovalization":
        spec = SceneSpec(surface="arch", radius=1.375, span=1.5 * math.pi, length=1.0,
                         spacing=0.007, cell_size=(0.3, 0.15), roughness_depth=0.002,
                         mortar_width=0.008, scene_class="tunnel", seed=11)
        spec.defects = [
            _arch_crack(spec, 0.5, "intrados_crack", Deformation("rotation", angle=0.015),
                        width=0.012, depth=0.04, drop=0.5),
            _arch_crack(spec, 0.2, "extrados_crack", Deformation("rotation", angle=-0.03), width=0.014),
            _arch_crack(spec, 0.8, "extrados_crack", Deformation("rotation", angle=-0.03), width=0.014),
        ]
        return spec
    spec = SceneSpec(seed={"arch_x_move": 1, "arch_z_move": 2, "arch_xz": 3, "water_only": 4}[name])
    if name == "water_only":
        spec.defects = [DefectSpec(kind="water_patch", center=(0.55 * spec.extent_u, 1.0),
                                   semi_axes=(0.45, 0.35), intensity_drop=0.35)]
        return spec
    x_move = Deformation("translation", vector=(0.008, 0.0, 0.0))
    z_move = Deformation("translation", vector=(0.0, 0.0, -0.008))
    if name == "arch_x_move":
        spec.defects = [
            _arch_crack(spec, 0.55, "intrados_crack", x_move, width=0.02, depth=0.05, drop=0.5),
            _arch_crack(spec, 0.22, "extrados_crack", Deformation("rotation", angle=0.02), width=0.02),
        ]
    elif name == "arch_z_move":
        spec.defects = [
            _arch_crack(spec, 0.35, "intrados_crack", z_move, width=0.02, depth=0.05, drop=0.5),
            _arch_crack(spec, 0.8, "extrados_crack", Deformation("rotation", angle=-0.02), width=0.02),
        ]
    else:
        spec.defects = [
            _arch_crack(spec, 0.5, "intrados_crack",
                        Deformation("translation", vector=(0.006, 0.0, -0.006)),
                        width=0.02, depth=0.05, drop=0.5),
            _arch_crack(spec, 0.2, "extrados_crack", Deformation("rotation", angle=0.03), width=0.02),
            _arch_crack(spec, 0.8, "extrados_crack", Deformation("rotation", angle=-0.03), width=0.02),
        ]
    return spec
