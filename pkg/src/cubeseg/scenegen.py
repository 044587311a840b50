"""Synthetic cube houses rendered with pixel-exact ground-truth masks.

Houses are stacks of unit cubes on an integer grid.  A scene is a subset of a
house (construction stage, optionally with some cubes knocked out) viewed
from one of four horizontal angles under a fixed axonometric projection.
Faces are drawn back to front, so the mask is exact by construction.
"""
from __future__ import annotations

import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import yaml
from PIL import Image

from .errors import (ConfigError, EmptyStageError, NotFoundError, ResolutionError,
                     SupportViolationError, WriteError)
from .manifest import DatasetManifest, LabelSpace, SampleRecord

log = logging.getLogger(__name__)

ANGLES = (0, 30, 60, 90)
ELEVATION_DEG = 35.0
ROLE_CLASS = {"foundation": 1, "wall": 2, "roof": 3}


class Role(str, Enum):
    foundation = "foundation"
    wall = "wall"
    roof = "roof"


class Stage(str, Enum):
    foundation = "foundation"
    walls = "walls"
    foundation_and_walls = "foundation_and_walls"
    full_house = "full_house"

    @property
    def roles(self):
        return STAGE_ROLES[self]


STAGE_ROLES = {
    Stage.foundation: {Role.foundation},
    Stage.walls: {Role.wall},
    Stage.foundation_and_walls: {Role.foundation, Role.wall},
    Stage.full_house: {Role.foundation, Role.wall, Role.roof},
}


@dataclass(frozen=True)
class CubePlacement:
    grid_pos: tuple
    role: Role
    cube_id: int

    def __post_init__(self):
        object.__setattr__(self, "grid_pos", tuple(int(v) for v in self.grid_pos))
        object.__setattr__(self, "role", Role(self.role))


def _check_support(placements):
    occupied = {p.grid_pos for p in placements}
    for p in placements:
        i, j, k = p.grid_pos
        if k > 0 and (i, j, k - 1) not in occupied:
            return p
    return None


@dataclass
class HouseSpec:
    name: str
    placements: List[CubePlacement]
    roof_has_extra_layer: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        n = len(self.placements)
        if not 1 <= n <= 43:
            raise ConfigError(f"house {self.name!r}: {n} cubes, expected 1..43")
        ids = sorted(p.cube_id for p in self.placements)
        if ids != list(range(1, n + 1)):
            raise ConfigError(f"house {self.name!r}: cube ids must be distinct and contiguous from 1")
        if len({p.grid_pos for p in self.placements}) != n:
            raise ConfigError(f"house {self.name!r}: two cubes share a grid position")
        if any(p.grid_pos[2] < 0 for p in self.placements):
            raise ConfigError(f"house {self.name!r}: negative height")
        floating = _check_support(self.placements)
        if floating is not None:
            raise SupportViolationError(f"house {self.name!r}: cube {floating.cube_id} at {floating.grid_pos} is unsupported")
        roof_levels = {p.grid_pos[2] for p in self.placements if p.role is Role.roof}
        if roof_levels and self.roof_has_extra_layer and len(roof_levels) < 2:
            raise ConfigError(f"house {self.name!r}: roof_has_extra_layer set but roof spans one level")

    def by_id(self):
        return {p.cube_id: p for p in self.placements}


def build_house(spec: HouseSpec, stage) -> List[CubePlacement]:
    stage = Stage(stage)
    roles = STAGE_ROLES[stage]
    out = [p for p in spec.placements if p.role in roles]
    if not out:
        raise EmptyStageError(f"house {spec.name!r} has no cubes for stage {stage.value}")
    return out


def knockout(placements: Sequence[CubePlacement], removed_ids: Sequence[int]) -> List[CubePlacement]:
    """Remove cubes by id; refuses to leave any remaining cube floating."""
    known = {p.cube_id for p in placements}
    missing = sorted(set(removed_ids) - known)
    if missing:
        raise NotFoundError(f"knockout ids {missing} not present")
    removed = set(removed_ids)
    kept = [p for p in placements if p.cube_id not in removed]
    floating = _check_support(kept)
    if floating is not None:
        raise SupportViolationError(
            f"removing {sorted(removed)} leaves cube {floating.cube_id} at {floating.grid_pos} unsupported"
        )
    return kept


# ------------------------------------------------------------------ library


def _make_house(name, cells):
    """cells: iterable of ((i, j, k), role); ids follow (k, j, i) order."""
    cells = sorted(cells, key=lambda c: (c[0][2], c[0][1], c[0][0]))
    return HouseSpec(name, [CubePlacement(pos, role, n + 1) for n, (pos, role) in enumerate(cells)])


def _box(nx, ny, k, role, ring=False):
    out = []
    for i in range(nx):
        for j in range(ny):
            if ring and 0 < i < nx - 1 and 0 < j < ny - 1:
                continue
            out.append(((i, j, k), role))
    return out


def builtin_houses() -> List[HouseSpec]:
    """Five reference houses with 1, 7, 18, 27 and 43 cubes."""
    block = _make_house("block", [((0, 0, 0), "foundation")])
    shed = _make_house("shed", _box(2, 1, 0, "foundation") + _box(2, 1, 1, "wall")
                       + _box(2, 1, 2, "roof") + [((0, 0, 3), "roof")])
    hut = _make_house("hut", _box(2, 2, 0, "foundation") + _box(2, 2, 1, "wall") + _box(2, 2, 2, "wall")
                      + _box(2, 2, 3, "roof") + _box(2, 1, 4, "roof"))
    cottage = _make_house("cottage", _box(3, 2, 0, "foundation") + _box(3, 2, 1, "wall")
                          + _box(3, 2, 2, "wall") + _box(3, 2, 3, "roof") + _box(3, 1, 4, "roof"))
    manor = _make_house("manor", _box(4, 3, 0, "foundation") + _box(4, 3, 1, "wall", ring=True)
                        + _box(4, 3, 2, "wall", ring=True) + _box(4, 3, 3, "roof", ring=True)
                        + [((1, 0, 4), "roof")])
    return [block, shed, hut, cottage, manor]


def column_knockout(spec: HouseSpec, cell, from_k):
    """Ids of the cubes at ``cell`` from height ``from_k`` upward."""
    i, j = cell
    return sorted(p.cube_id for p in spec.placements
                  if p.grid_pos[:2] == (i, j) and p.grid_pos[2] >= from_k)


def default_knockout_plans(spec: HouseSpec) -> List[List[int]]:
    """Column removals at every footprint corner: whole wall column, then roof only."""
    levels = {}
    for p in spec.placements:
        levels.setdefault(p.grid_pos[:2], []).append(p)
    if len(spec.placements) < 2:
        return []
    cells = sorted(levels)
    xs = [c[0] for c in cells]
    ys = [c[1] for c in cells]
    corners = sorted({(min(xs), min(ys)), (max(xs), min(ys)), (min(xs), max(ys)), (max(xs), max(ys))})
    plans = []
    for cell in corners:
        if cell not in levels:
            continue
        roles = {p.grid_pos[2]: p.role for p in levels[cell]}
        wall_levels = [k for k, r in roles.items() if r is Role.wall]
        roof_levels = [k for k, r in roles.items() if r is Role.roof]
        if wall_levels:
            plans.append(column_knockout(spec, cell, max(wall_levels)))
        if roof_levels:
            plans.append(column_knockout(spec, cell, min(roof_levels)))
    uniq = []
    for plan in plans:
        if plan and plan not in uniq:
            uniq.append(plan)
    return uniq


def load_house_specs(path) -> List[HouseSpec]:
    """Read houses from YAML/JSON: a list of {name, roof_has_extra_layer, placements}.

    Each placement is ``{pos: [i, j, k], role: ..., id: ...}``; ids are
    assigned in (k, j, i) order when omitted.
    """
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"house spec file {path} not found")
    data = yaml.safe_load(path.read_text())
    if isinstance(data, dict):
        data = data.get("houses", [data])
    houses = []
    for entry in data:
        cells = entry["placements"]
        if all("id" in c for c in cells):
            placements = [CubePlacement(c["pos"], c["role"], c["id"]) for c in cells]
            houses.append(HouseSpec(entry["name"], placements, entry.get("roof_has_extra_layer", True)))
        else:
            h = _make_house(entry["name"], [(tuple(c["pos"]), c["role"]) for c in cells])
            h.roof_has_extra_layer = entry.get("roof_has_extra_layer", True)
            h.validate()
            houses.append(h)
    return houses


# ---------------------------------------------------------------- rendering


@dataclass
class RenderConfig:
    image_size: int = 192
    cube_px: int = 30
    palette_seed: int = 0
    noise_std: float = 2.5


@dataclass
class RenderedSample:
    image: np.ndarray
    mask: np.ndarray
    meta: dict


def view_basis(angle_deg, elevation_deg=ELEVATION_DEG):
    """(right, up, toward_camera) unit vectors for a horizontal view angle."""
    t = np.deg2rad(angle_deg)
    e = np.deg2rad(elevation_deg)
    c = np.array([np.sin(t) * np.cos(e), -np.cos(t) * np.cos(e), np.sin(e)])
    r = np.array([np.cos(t), np.sin(t), 0.0])
    u = np.cross(c, r)
    return r, u, c


_CORNERS = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)

# (normal, corner indices into _CORNERS in cyclic order)
_FACES = [
    ((0, 0, 1), (1, 3, 7, 5)),
    ((0, 0, -1), (0, 4, 6, 2)),
    ((1, 0, 0), (4, 5, 7, 6)),
    ((-1, 0, 0), (0, 2, 3, 1)),
    ((0, 1, 0), (2, 6, 7, 3)),
    ((0, -1, 0), (0, 1, 5, 4)),
]

TOP_SHADE, LEFT_SHADE, RIGHT_SHADE = 1.0, 0.80, 0.62
WOOD_RGB = np.array([214.0, 176.0, 128.0])
BACKGROUND_RGB = np.array([246.0, 244.0, 238.0])
LIGHT_TINT = np.array([1.0, 0.97, 0.90])


def projection(placements, angle_deg, cube_px, image_size):
    """Pixel-space projection parameters: (basis, offset) centring the house.

    Raises ResolutionError if the projected house does not fit with a
    one-pixel background border.
    """
    if not placements:
        raise EmptyStageError("nothing to render: no cubes placed")
    r, u, c = view_basis(angle_deg)
    pts = np.concatenate([np.asarray(p.grid_pos, float) + _CORNERS for p in placements])
    sx = pts @ r * cube_px
    sy = -(pts @ u) * cube_px
    w = sx.max() - sx.min()
    h = sy.max() - sy.min()
    if w > image_size - 2 or h > image_size - 2:
        raise ResolutionError(
            f"projected house is {w:.0f}x{h:.0f}px, does not fit a {image_size}px image with border"
        )
    # integer offsets keep axis-aligned edges off pixel centres
    ox = np.round(image_size / 2 - (sx.max() + sx.min()) / 2)
    oy = np.round(image_size / 2 - (sy.max() + sy.min()) / 2)
    return (r, u, c), (ox, oy)


def to_pixels(points, basis, offset, cube_px):
    r, u, _ = basis
    return np.stack([points @ r * cube_px + offset[0], -(points @ u) * cube_px + offset[1]], axis=-1)


def _label(p, mode):
    return ROLE_CLASS[p.role.value] if mode == "semantic4" else p.cube_id


def _fill_quad(quad, size, seam_px=1.0):
    """Pixel-centre coverage of a convex quad: (ys, xs, is_seam) or None."""
    x0 = max(int(np.floor(quad[:, 0].min())), 0)
    x1 = min(int(np.ceil(quad[:, 0].max())), size)
    y0 = max(int(np.floor(quad[:, 1].min())), 0)
    y1 = min(int(np.ceil(quad[:, 1].max())), size)
    if x1 <= x0 or y1 <= y0:
        return None
    gx, gy = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
    area2 = 0.0
    for n in range(4):
        a, b = quad[n], quad[(n + 1) % 4]
        area2 += a[0] * b[1] - a[1] * b[0]
    if abs(area2) < 1e-9:
        return None
    sign = np.sign(area2)
    inside = np.ones(gx.shape, bool)
    edge_dist = np.full(gx.shape, np.inf)
    for n in range(4):
        a, b = quad[n], quad[(n + 1) % 4]
        ex, ey = b - a
        length = np.hypot(ex, ey)
        if length < 1e-12:
            continue
        d = sign * (ex * (gy - a[1]) - ey * (gx - a[0])) / length
        inside &= d >= 0
        edge_dist = np.minimum(edge_dist, d)
    ys, xs = np.nonzero(inside)
    return ys + y0, xs + x0, edge_dist[ys, xs] < seam_px


def render_view(placements, angle_deg, label_space: LabelSpace, render_cfg: RenderConfig,
                noise_seed: int = 0) -> RenderedSample:
    if int(angle_deg) not in ANGLES:
        raise ConfigError(f"angle {angle_deg} not in {ANGLES}")
    placements = list(placements)
    if not placements:
        raise EmptyStageError("nothing to render")
    size = render_cfg.image_size
    basis, offset = projection(placements, angle_deg, render_cfg.cube_px, size)
    r, u, c = basis

    shade = np.ones((size, size))
    color = np.tile(BACKGROUND_RGB, (size, size, 1))
    mask = np.zeros((size, size), np.uint8)

    # painter's order: farthest cube centre first
    depth = [(np.asarray(p.grid_pos, float) + 0.5) @ c for p in placements]
    order = np.argsort(depth, kind="stable")
    for idx in order:
        p = placements[idx]
        rng = np.random.default_rng([render_cfg.palette_seed, p.cube_id])
        jitter = rng.uniform(0.88, 1.08)
        tint = WOOD_RGB * rng.uniform(0.96, 1.04, size=3)
        label = _label(p, label_space.mode)
        origin = np.asarray(p.grid_pos, float)
        for normal, corner_idx in _FACES:
            n = np.asarray(normal, float)
            facing = n @ c
            if facing <= 1e-9:
                continue
            if normal[2] == 1:
                face_shade = TOP_SHADE
            elif n @ r <= 1e-9:
                face_shade = LEFT_SHADE
            else:
                face_shade = RIGHT_SHADE
            quad = to_pixels(origin + _CORNERS[list(corner_idx)], basis, offset, render_cfg.cube_px)
            hit = _fill_quad(quad, size)
            if hit is None:
                continue
            ys, xs, seam = hit
            mask[ys, xs] = label
            color[ys, xs] = tint
            shade[ys, xs] = face_shade * jitter * np.where(seam, 0.82, 1.0)

    img = color * shade[..., None] * LIGHT_TINT
    if render_cfg.noise_std > 0:
        noise_rng = np.random.default_rng([render_cfg.palette_seed, noise_seed, 7])
        img = img + noise_rng.normal(0.0, render_cfg.noise_std, size=(size, size, 1))
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    meta = {"angle_deg": int(angle_deg), "label_space_mode": label_space.mode}
    return RenderedSample(image, mask, meta)


def zbuffer_mask(placements, angle_deg, label_space: LabelSpace, render_cfg: RenderConfig):
    """Reference mask by casting one ray per pixel centre through every cube.

    Slow and independent of the face rasteriser; used to cross-check it.
    """
    placements = list(placements)
    size = render_cfg.image_size
    basis, offset = projection(placements, angle_deg, render_cfg.cube_px, size)
    r, u, c = basis
    px, py = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5)
    sx = (px - offset[0]) / render_cfg.cube_px
    sy = -(py - offset[1]) / render_cfg.cube_px
    # ray origin on the screen plane, travelling away from the camera
    origin = sx[..., None] * r + sy[..., None] * u + 1000.0 * c
    direction = -c
    best = np.full((size, size), np.inf)
    mask = np.zeros((size, size), np.uint8)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
    for p in placements:
        lo = np.asarray(p.grid_pos, float)
        hi = lo + 1.0
        t_near = np.full((size, size), -np.inf)
        t_far = np.full((size, size), np.inf)
        ok = np.ones((size, size), bool)
        for axis in range(3):
            if abs(direction[axis]) < 1e-12:
                ok &= (origin[..., axis] >= lo[axis]) & (origin[..., axis] <= hi[axis])
                continue
            t1 = (lo[axis] - origin[..., axis]) * inv[axis]
            t2 = (hi[axis] - origin[..., axis]) * inv[axis]
            t_near = np.maximum(t_near, np.minimum(t1, t2))
            t_far = np.minimum(t_far, np.maximum(t1, t2))
        hit = ok & (t_near <= t_far) & (t_near < best)
        best[hit] = t_near[hit]
        mask[hit] = _label(p, label_space.mode)
    return mask


# ------------------------------------------------------------------ dataset


@dataclass
class GenConfig:
    angles: tuple = ANGLES
    stages: tuple = tuple(s.value for s in Stage)
    # house name -> list of id lists; missing houses get no knockouts
    knockout_plans: Dict[str, List[List[int]]] = field(default_factory=dict)
    render_cfg: RenderConfig = field(default_factory=RenderConfig)
    seed: int = 0
    workers: int = 1


def sample_id(house, stage, angle, plan_index):
    return f"{house}__{stage}__a{int(angle):02d}__k{plan_index:02d}"


def enumerate_scenes(houses, gen_cfg: GenConfig):
    """Every distinct (house, stage, angle, knockout plan) scene.

    Plan 0 is the intact house.  A knocked-out variant is skipped for a stage
    when it removes none of that stage's cubes (it would duplicate plan 0) or
    leaves the stage empty.
    """
    scenes = []
    for house in houses:
        plans = [[]] + [list(p) for p in gen_cfg.knockout_plans.get(house.name, [])]
        for stage in gen_cfg.stages:
            stage = Stage(stage)
            try:
                staged = build_house(house, stage)
            except EmptyStageError:
                log.info("house %s has no %s stage; skipped", house.name, stage.value)
                continue
            staged_ids = {p.cube_id for p in staged}
            for plan_index, plan in enumerate(plans):
                kept_ids = {p.cube_id for p in knockout(house.placements, plan)}
                if plan_index and not staged_ids - kept_ids:
                    continue
                placements = [p for p in staged if p.cube_id in kept_ids]
                if not placements:
                    continue
                for angle in gen_cfg.angles:
                    scenes.append((house.name, stage.value, int(angle), plan_index,
                                   tuple(sorted(plan)), placements))
    return scenes


def _write_png(path: Path, array):
    try:
        Image.fromarray(array).save(path, format="PNG", optimize=False)
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}", path=path) from exc


def generate_dataset(houses, label_space: LabelSpace, gen_cfg: GenConfig, out_root) -> DatasetManifest:
    """Render every enumerated scene to ``out_root`` and write its manifest."""
    out_root = Path(out_root)
    for sub in ("images", "masks"):
        try:
            (out_root / sub).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise WriteError(f"cannot create {out_root / sub}: {exc}", path=out_root / sub) from exc

    scenes = enumerate_scenes(houses, gen_cfg)

    def render_one(scene):
        house, stage, angle, plan_index, plan, placements = scene
        sid = sample_id(house, stage, angle, plan_index)
        seed = zlib.crc32(f"{gen_cfg.seed}:{sid}".encode())
        sample = render_view(placements, angle, label_space, gen_cfg.render_cfg, noise_seed=seed)
        _write_png(out_root / "images" / f"{sid}.png", sample.image)
        _write_png(out_root / "masks" / f"{sid}.png", sample.mask)
        return SampleRecord(
            id=sid, house=house, stage=stage, angle=angle, knockout_ids=plan,
            knockout_plan=plan_index, label_space_mode=label_space.mode,
            num_classes=label_space.num_classes, image=f"images/{sid}.png",
            mask=f"masks/{sid}.png", base_id=sid,
        )

    if gen_cfg.workers > 1:
        with ThreadPoolExecutor(gen_cfg.workers) as pool:
            records = list(pool.map(render_one, scenes))
    else:
        records = [render_one(s) for s in scenes]
    manifest = DatasetManifest(samples=records, seed=gen_cfg.seed, label_space=label_space, root=out_root)
    manifest.write(out_root)
    return manifest


def load_sample(root, record: SampleRecord) -> RenderedSample:
    root = Path(root)
    image = np.asarray(Image.open(root / record.image).convert("RGB"))
    mask = np.asarray(Image.open(root / record.mask))
    meta = {
        "house_name": record.house, "stage": record.stage, "angle_deg": record.angle,
        "knockout_ids": list(record.knockout_ids), "label_space_mode": record.label_space_mode,
    }
    return RenderedSample(image, mask, meta)
