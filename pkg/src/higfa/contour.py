"""Diversity-enhanced contour preprocessing.

Edge maps are extracted with a from-scratch Canny pipeline (Gaussian blur,
Sobel gradients, non-maximum suppression, hysteresis), geometrically
diversified by horizontal flip and rotation, and optionally warped with a
thin-plate spline fitted to perturbed control points chosen from
edge-containing patches.

Every operation is pure given an explicit ``numpy.random.Generator`` and
keeps the edge raster strictly binary.  Transform provenance travels with
the map and serializes to a JSON sidecar next to the PGM/PNG raster.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import correlate2d

from higfa.imageio import read_gray, write_gray

__all__ = [
    "ContourError",
    "ControlPointError",
    "TpsError",
    "EdgeMap",
    "Provenance",
    "TpsWarp",
    "ContourParams",
    "canny",
    "flip_rotate",
    "select_control_points",
    "farthest_point_subset",
    "fit_tps",
    "warp_edge_map",
    "augment_contour",
    "save_edge_map",
    "load_edge_map",
    "DEFAULT_CANNY_LOW",
    "DEFAULT_CANNY_HIGH",
    "DEFAULT_BINARIZE_THRESHOLD",
]

DEFAULT_CANNY_LOW = 120
DEFAULT_CANNY_HIGH = 200
DEFAULT_BINARIZE_THRESHOLD = 100

# Canny internals (thresholds above are the tunables; these are fixed)
_BLUR_SIGMA = 1.4
_BLUR_SIZE = 5
_HARRIS_SIGMA = 1.0
_HARRIS_K = 0.04
_HARRIS_REL_THRESHOLD = 0.01

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


class ContourError(ValueError):
    """Contour preprocessing failure."""


class ControlPointError(ContourError):
    """Not enough material to pick TPS control points; caller should skip TPS."""


class TpsError(ContourError):
    """Thin-plate spline system could not be solved."""


@dataclass
class Provenance:
    """Applied transforms, in application order: flip, rotate, then TPS."""

    flipped: bool = False
    rotation_deg: float = 0.0
    tps_source: np.ndarray | None = None
    tps_target: np.ndarray | None = None
    tps_skipped: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "flipped": self.flipped,
            "rotation_deg": self.rotation_deg,
            "tps": None
            if self.tps_source is None
            else {
                "source_points": np.asarray(self.tps_source).tolist(),
                "target_points": np.asarray(self.tps_target).tolist(),
            },
            "tps_skipped": self.tps_skipped,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Provenance":
        tps = d.get("tps")
        return cls(
            flipped=bool(d.get("flipped", False)),
            rotation_deg=float(d.get("rotation_deg", 0.0)),
            tps_source=None if tps is None else np.asarray(tps["source_points"], dtype=np.float64),
            tps_target=None if tps is None else np.asarray(tps["target_points"], dtype=np.float64),
            tps_skipped=d.get("tps_skipped"),
        )


@dataclass
class EdgeMap:
    """Binary contour raster plus the provenance of how it was made."""

    bits: np.ndarray
    provenance: Provenance = field(default_factory=Provenance)

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ContourError(f"edge map must be 2-D, got shape {bits.shape}")
        if not np.all((bits == 0) | (bits == 1)):
            raise ContourError("edge map values must be 0 or 1")
        self.bits = bits.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = (size - 1) / 2.0
    x = np.arange(size) - r
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _smooth(img: np.ndarray, size: int, sigma: float) -> np.ndarray:
    return correlate2d(img, _gaussian_kernel(size, sigma), mode="same", boundary="symm")


def canny(img: np.ndarray, low: float = DEFAULT_CANNY_LOW,
          high: float = DEFAULT_CANNY_HIGH) -> EdgeMap:
    """Canny edge detection with hysteresis thresholds on the 0-255 scale."""
    if not (0 <= low <= high <= 255):
        raise ContourError(f"need 0 <= low <= high <= 255, got ({low}, {high})")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ContourError(f"expected a 2-D grayscale image, got shape {img.shape}")

    blurred = _smooth(img, _BLUR_SIZE, _BLUR_SIGMA)
    gx = correlate2d(blurred, _SOBEL_X, mode="same", boundary="symm")
    gy = correlate2d(blurred, _SOBEL_Y, mode="same", boundary="symm")
    mag = np.clip(np.hypot(gx, gy), 0.0, 255.0)

    # non-maximum suppression: 4 quantized directions; the >=/> asymmetry
    # keeps exactly one pixel when a blurred step produces an equal pair
    h, w = mag.shape
    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    offsets = np.empty((h, w, 2), dtype=np.int64)
    d0 = (angle < 22.5) | (angle >= 157.5)          # horizontal gradient
    d45 = (angle >= 22.5) & (angle < 67.5)
    d90 = (angle >= 67.5) & (angle < 112.5)         # vertical gradient
    d135 = (angle >= 112.5) & (angle < 157.5)
    offsets[d0] = (0, 1)
    offsets[d45] = (1, 1)
    offsets[d90] = (1, 0)
    offsets[d135] = (1, -1)

    padded = np.pad(mag, 1, mode="constant")
    yy, xx = np.mgrid[0:h, 0:w]
    fwd = padded[yy + 1 + offsets[..., 0], xx + 1 + offsets[..., 1]]
    bwd = padded[yy + 1 - offsets[..., 0], xx + 1 - offsets[..., 1]]
    thin = np.where((mag > fwd) & (mag >= bwd), mag, 0.0)

    strong = thin >= high
    weak = thin >= low
    bits = _hysteresis(strong, weak)
    return EdgeMap(bits=bits, provenance=Provenance())


def _hysteresis(strong: np.ndarray, weak: np.ndarray) -> np.ndarray:
    """Grow strong edges through 8-connected weak pixels."""
    h, w = strong.shape
    out = strong.copy()
    stack = list(zip(*np.nonzero(strong)))
    while stack:
        y, x = stack.pop()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and weak[ny, nx] and not out[ny, nx]:
                    out[ny, nx] = True
                    stack.append((ny, nx))
    return out.astype(np.uint8)


def flip_rotate(em: EdgeMap, flip: bool, angle_deg: float) -> EdgeMap:
    """Horizontal mirror, then rotation about the image center.

    Nearest-neighbor sampling; positive angles turn +x toward +y (visually
    clockwise with y pointing down).  Out-of-frame regions fill with 0.
    """
    if abs(angle_deg) > 45.0:
        raise ContourError(f"|angle_deg| must be <= 45, got {angle_deg}")
    bits = em.bits[:, ::-1] if flip else em.bits
    if angle_deg != 0.0:
        h, w = bits.shape
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        theta = np.radians(angle_deg)
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        yy, xx = np.mgrid[0:h, 0:w]
        dx, dy = xx - cx, yy - cy
        # inverse rotation of each output coordinate
        sx = np.round(cx + cos_t * dx + sin_t * dy).astype(np.int64)
        sy = np.round(cy - sin_t * dx + cos_t * dy).astype(np.int64)
        inside = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
        out = np.zeros_like(bits)
        out[inside] = bits[sy[inside], sx[inside]]
        bits = out
    else:
        bits = bits.copy()
    prov = replace(em.provenance,
                   flipped=em.provenance.flipped ^ flip,
                   rotation_deg=em.provenance.rotation_deg + angle_deg)
    return EdgeMap(bits=bits, provenance=prov)


def _harris_response(bits: np.ndarray) -> np.ndarray:
    img = bits.astype(np.float64)
    ix = correlate2d(img, _SOBEL_X, mode="same", boundary="symm")
    iy = correlate2d(img, _SOBEL_Y, mode="same", boundary="symm")
    sxx = _smooth(ix * ix, _BLUR_SIZE, _HARRIS_SIGMA)
    syy = _smooth(iy * iy, _BLUR_SIZE, _HARRIS_SIGMA)
    sxy = _smooth(ix * iy, _BLUR_SIZE, _HARRIS_SIGMA)
    return (sxx * syy - sxy * sxy) - _HARRIS_K * (sxx + syy) ** 2


def farthest_point_subset(points: np.ndarray, k: int) -> np.ndarray:
    """Greedy max-min-distance subset, seeded from the farthest pair.

    Ties break toward lower candidate indices, so the selection is
    deterministic for a fixed candidate order.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if k > n:
        raise ControlPointError(f"need {k} candidates, have {n}")
    if k == n:
        return pts.copy()
    d = np.hypot(pts[:, None, 0] - pts[None, :, 0], pts[:, None, 1] - pts[None, :, 1])
    i, j = np.unravel_index(np.argmax(d), d.shape)
    chosen = [min(i, j), max(i, j)] if k >= 2 else [int(np.argmax(d.max(axis=1)))]
    while len(chosen) < k:
        min_d = d[:, chosen].min(axis=1)
        min_d[chosen] = -np.inf
        chosen.append(int(np.argmax(min_d)))
    return pts[sorted(chosen)]


def select_control_points(em: EdgeMap, grid: int = 8, k: int = 5,
                          rng: np.random.Generator | None = None) -> np.ndarray:
    """Pick k mutually distant points from randomly sampled edge patches.

    The map is split into a grid x grid patchwork; k patches containing at
    least one edge pixel are sampled, Harris corners inside them are pooled,
    and a greedy farthest-point pass picks the k points.  When the pool has
    fewer than k corners, the patches' edge pixels are used instead.
    Returns (k, 2) points as (x, y).
    """
    if k < 3:
        raise ControlPointError(f"need k >= 3 control points, got {k}")
    rng = rng if rng is not None else np.random.default_rng()
    h, w = em.bits.shape
    ph = max(1, -(-h // grid))
    pw = max(1, -(-w // grid))

    patches = []
    for py in range(0, h, ph):
        for px in range(0, w, pw):
            if em.bits[py:py + ph, px:px + pw].any():
                patches.append((py, px))
    if len(patches) < k:
        raise ControlPointError(
            f"only {len(patches)} edge-containing patches, need {k}; skip TPS for this map"
        )

    picked = [patches[i] for i in rng.choice(len(patches), size=k, replace=False)]
    response = _harris_response(em.bits)
    rmax = float(response.max())
    corner_mask = response >= rmax * _HARRIS_REL_THRESHOLD if rmax > 0 else np.zeros_like(response, bool)

    def collect(mask: np.ndarray) -> list[tuple[float, float]]:
        pts: list[tuple[float, float]] = []
        for py, px in picked:
            ys, xs = np.nonzero(mask[py:py + ph, px:px + pw])
            pts.extend((float(px + x), float(py + y)) for y, x in zip(ys, xs))
        return pts

    pool = collect(corner_mask & (em.bits > 0))
    if len(pool) < k:
        pool = collect(em.bits > 0)
    return farthest_point_subset(np.array(pool), k)


@dataclass(frozen=True)
class TpsWarp:
    """Fitted thin-plate spline mapping R^2 -> R^2.

    ``affine`` rows are (constant, x-coefficient, y-coefficient) per output
    component; ``weights`` are the radial coefficients of U(r) = r^2 log r^2.
    """

    source_points: np.ndarray
    target_points: np.ndarray
    weights: np.ndarray   # (n, 2)
    affine: np.ndarray    # (3, 2)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = self.affine[0] + pts @ self.affine[1:]
        d2 = ((pts[:, None, :] - self.source_points[None, :, :]) ** 2).sum(axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(d2 > 0.0, d2 * np.log(d2), 0.0)
        return out + u @ self.weights


def fit_tps(source: np.ndarray, target: np.ndarray, regularization: float = 0.0) -> TpsWarp:
    """Solve the thin-plate spline system U(r) = r^2 log r^2 exactly (lambda=0)."""
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 2:
        raise TpsError(f"point sets must both be (n, 2), got {src.shape} and {tgt.shape}")
    n = len(src)
    if n < 3:
        raise TpsError(f"need at least 3 control points, got {n}")
    p = np.c_[np.ones(n), src]
    if np.linalg.matrix_rank(p) < 3:
        raise TpsError("source points are collinear or duplicated")

    d2 = ((src[:, None, :] - src[None, :, :]) ** 2).sum(axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        km = np.where(d2 > 0.0, d2 * np.log(d2), 0.0)
    km = km + regularization * np.eye(n)

    lhs = np.zeros((n + 3, n + 3))
    lhs[:n, :n] = km
    lhs[:n, n:] = p
    lhs[n:, :n] = p.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = tgt
    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as e:
        raise TpsError(f"singular TPS system: {e}") from None
    if not np.all(np.isfinite(sol)):
        raise TpsError("TPS solve produced non-finite coefficients")
    return TpsWarp(source_points=src.copy(), target_points=tgt.copy(),
                   weights=sol[:n], affine=sol[n:])


def warp_edge_map(em: EdgeMap, warp: TpsWarp,
                  binarize_threshold: float = DEFAULT_BINARIZE_THRESHOLD) -> EdgeMap:
    """Resample the edge raster through a backward map and re-binarize.

    ``warp`` maps each output pixel coordinate to the source location to
    sample (bilinearly, on the 0/255-valued raster, zero outside the frame).
    """
    h, w = em.bits.shape
    raster = em.bits.astype(np.float64) * 255.0
    yy, xx = np.mgrid[0:h, 0:w]
    src = warp(np.c_[xx.ravel(), yy.ravel()])
    sx, sy = src[:, 0], src[:, 1]

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0

    def sample(yi, xi):
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        vals = np.zeros_like(fx)
        vals[ok] = raster[yi[ok], xi[ok]]
        return vals

    v = ((1 - fx) * (1 - fy) * sample(y0, x0)
         + fx * (1 - fy) * sample(y0, x0 + 1)
         + (1 - fx) * fy * sample(y0 + 1, x0)
         + fx * fy * sample(y0 + 1, x0 + 1))
    bits = (v.reshape(h, w) >= binarize_threshold).astype(np.uint8)
    prov = replace(em.provenance,
                   tps_source=np.asarray(warp.source_points),
                   tps_target=np.asarray(warp.target_points),
                   tps_skipped=None)
    return EdgeMap(bits=bits, provenance=prov)


@dataclass(frozen=True)
class ContourParams:
    canny_low: float = DEFAULT_CANNY_LOW
    canny_high: float = DEFAULT_CANNY_HIGH
    max_rotation_deg: float = 15.0
    flip_prob: float = 0.5
    grid: int = 8
    control_points: int = 5
    perturb_scale: float | None = None  # None: half the patch size
    binarize_threshold: float = DEFAULT_BINARIZE_THRESHOLD


def augment_contour(img: np.ndarray, rigidity: str,
                    params: ContourParams | None = None,
                    rng: np.random.Generator | None = None) -> EdgeMap:
    """Extract and diversify a contour: canny, flip/rotate, optional TPS warp.

    ``rigidity`` is "rigid" (flip/rotate only) or "nonrigid" (additionally a
    TPS warp of perturbed control points).  A failed TPS stage falls back to
    the flip/rotate result with the skip recorded in provenance.
    """
    if rigidity not in ("rigid", "nonrigid"):
        raise ContourError(f"rigidity must be 'rigid' or 'nonrigid', got {rigidity!r}")
    params = params if params is not None else ContourParams()
    rng = rng if rng is not None else np.random.default_rng()

    em = canny(img, params.canny_low, params.canny_high)
    flip = bool(rng.random() < params.flip_prob)
    angle = float(rng.uniform(-params.max_rotation_deg, params.max_rotation_deg)) \
        if params.max_rotation_deg > 0 else 0.0
    em = flip_rotate(em, flip, angle)
    if rigidity == "rigid":
        return em

    h, w = em.bits.shape
    patch = max(-(-h // params.grid), -(-w // params.grid))
    spread = params.perturb_scale if params.perturb_scale is not None else patch / 2.0
    try:
        pts = select_control_points(em, grid=params.grid, k=params.control_points, rng=rng)
        targets = pts + rng.uniform(-spread, spread, size=pts.shape)
        # backward map: fitted from perturbed positions to the originals, so
        # edge content moves from pts toward targets
        warp = fit_tps(targets, pts)
        warped = warp_edge_map(em, warp, params.binarize_threshold)
        return EdgeMap(bits=warped.bits,
                       provenance=replace(warped.provenance,
                                          tps_source=pts, tps_target=targets))
    except ContourError as e:
        return EdgeMap(bits=em.bits,
                       provenance=replace(em.provenance, tps_skipped=str(e)))


def save_edge_map(path, em: EdgeMap) -> None:
    """Write the raster (0/255) plus a .json provenance sidecar."""
    path = Path(path)
    write_gray(path, em.bits * 255)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(em.provenance.to_json_dict(), indent=1, sort_keys=True))


def load_edge_map(path) -> EdgeMap:
    path = Path(path)
    raster = read_gray(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    prov = Provenance()
    if sidecar.exists():
        prov = Provenance.from_json_dict(json.loads(sidecar.read_text()))
    return EdgeMap(bits=(raster >= 128).astype(np.uint8), provenance=prov)
