"""
Chromosome rectification: masks, skeletons, medial axes and patch sequences.

All functions are pure; images follow the dark-on-light convention
(chromosome darker than background).
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import networkx as nx
import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize, thin as thin_binary, binary_dilation, disk
from skimage.transform import resize

from exceptions import (
    InvalidParameter, ShapeMismatch, EmptyMask, MultipleComponents,
    DegenerateSkeleton, AxisTooShort,
)
from models import GrayImage, BinaryMask, MedialAxis, Patch, PatchSequence, BACKGROUND

logger = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
PATCH_MARGIN = 4


@dataclass
class Skeleton:
    """One-pixel-wide skeleton raster with its pixel adjacency graph."""
    bits: np.ndarray
    graph: nx.Graph

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "Skeleton":
        bits = np.asarray(bits, dtype=bool)
        return cls(bits, skeleton_graph(bits))

    @classmethod
    def from_pixels(cls, pixels: Sequence[Tuple[int, int]], shape: Tuple[int, int]) -> "Skeleton":
        """Rasterize an arbitrary pixel list; the pixel order is irrelevant."""
        bits = np.zeros(shape, dtype=bool)
        for r, c in pixels:
            bits[r, c] = True
        return cls.from_bits(bits)

    def as_mask(self) -> BinaryMask:
        return BinaryMask(self.bits.copy())

    @property
    def size(self) -> int:
        return int(self.bits.sum())


# ============================================================================
# MASKS AND SKELETONS
# ============================================================================

def binarize(image: GrayImage, threshold: float) -> BinaryMask:
    """Foreground is every pixel darker than the threshold."""
    if not 0.0 < threshold < 1.0:
        raise InvalidParameter(f"threshold must lie in (0,1), got {threshold}")
    return BinaryMask(image.pixels < threshold)


def largest_component(mask: BinaryMask) -> BinaryMask:
    """Keep only the largest 8-connected foreground component."""
    labels, count = ndimage.label(mask.bits, structure=EIGHT_CONNECTED)
    if count <= 1:
        return BinaryMask(mask.bits.copy())
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return BinaryMask(labels == int(np.argmax(sizes)))


def skeleton_graph(bits: np.ndarray) -> nx.Graph:
    """
    Build the pixel graph of a skeleton.

    Diagonal links are omitted when a 4-connected detour exists, so corners
    do not create spurious triangles.
    """
    graph = nx.Graph()
    height, width = bits.shape
    for r, c in np.argwhere(bits):
        r, c = int(r), int(c)
        graph.add_node((r, c))
        for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
            nr, nc = r + dr, c + dc
            if not (0 <= nr < height and 0 <= nc < width) or not bits[nr, nc]:
                continue
            if dr != 0 and dc != 0 and (bits[r + dr, c] or bits[r, c + dc]):
                continue
            graph.add_edge((r, c), (nr, nc), weight=math.hypot(dr, dc))
    return graph


def _thin_bits(bits: np.ndarray) -> np.ndarray:
    skeleton = skeletonize(bits, method='lee').astype(bool)
    return thin_binary(skeleton).astype(bool)


def thin(mask: BinaryMask) -> Skeleton:
    """
    Medial-axis thinning of a single-component mask.

    Args:
        mask: foreground with exactly one 8-connected component

    Returns:
        Skeleton that is 1 px wide and connected

    Raises:
        EmptyMask: no foreground
        MultipleComponents: more than one component
    """
    _, count = ndimage.label(mask.bits, structure=EIGHT_CONNECTED)
    if count == 0:
        raise EmptyMask("mask has no foreground pixels")
    if count > 1:
        raise MultipleComponents(f"mask has {count} foreground components, expected 1")
    return Skeleton.from_bits(_thin_bits(mask.bits))


# ============================================================================
# MEDIAL AXIS
# ============================================================================

def _needs_merge(graph: nx.Graph) -> bool:
    if nx.number_connected_components(graph) > 1:
        return True
    return any(len(cycle) > 4 for cycle in nx.cycle_basis(graph))


def _merge_paths(bits: np.ndarray, merge_distance: float) -> np.ndarray:
    radius = max(1, int(math.ceil(merge_distance / 2.0)))
    merged = binary_dilation(bits, disk(radius))
    merged = ndimage.binary_fill_holes(merged)
    return _thin_bits(merged)


def _largest_subgraph(graph: nx.Graph) -> nx.Graph:
    components = sorted(nx.connected_components(graph), key=lambda comp: (-len(comp), min(comp)))
    return graph.subgraph(components[0]).copy()


def prune_branches(graph: nx.Graph, min_branch_length: int) -> nx.Graph:
    """Iteratively remove endpoint branches shorter than min_branch_length pixels."""
    graph = graph.copy()
    changed = True
    while changed:
        changed = False
        if not any(graph.degree(n) >= 3 for n in graph):
            break
        for end in sorted(n for n in graph if graph.degree(n) == 1):
            branch = [end]
            previous, current = None, end
            while True:
                following = sorted(n for n in graph.neighbors(current) if n != previous)
                if len(following) != 1:
                    break
                previous, current = current, following[0]
                if graph.degree(current) >= 3:
                    break
                branch.append(current)
            if graph.degree(current) >= 3 and len(branch) < min_branch_length:
                graph.remove_nodes_from(branch)
                changed = True
                break
    return graph


def longest_path(graph: nx.Graph) -> List[Tuple[int, int]]:
    """Double Dijkstra sweep; exact on trees."""
    start = min(graph.nodes)
    distances = nx.single_source_dijkstra_path_length(graph, start)
    first = max(sorted(distances), key=distances.get)
    distances, paths = nx.single_source_dijkstra(graph, first)
    last = max(sorted(distances), key=distances.get)
    return paths[last]


def extract_axis(skeleton: Skeleton, merge_distance: float = 2.0, min_branch_length: int = 8) -> MedialAxis:
    """
    Reduce a skeleton to its main medial axis.

    Args:
        skeleton: thinned skeleton
        merge_distance: separate or looping paths closer than this are fused
        min_branch_length: spurs shorter than this are pruned

    Returns:
        MedialAxis ordered from the topmost endpoint

    Raises:
        DegenerateSkeleton: resulting path has fewer than 2 points
    """
    if skeleton.size == 0:
        raise DegenerateSkeleton("skeleton is empty")
    bits, graph = skeleton.bits, skeleton.graph
    if merge_distance > 0 and _needs_merge(graph):
        bits = _merge_paths(bits, merge_distance)
        graph = skeleton_graph(bits)
        logger.debug(f"Merged skeleton paths within {merge_distance} px")
    graph = _largest_subgraph(graph)
    graph = prune_branches(graph, min_branch_length)
    path = longest_path(graph)
    if len(path) < 2:
        raise DegenerateSkeleton(f"axis has {len(path)} point(s), need at least 2")
    if tuple(path[-1]) < tuple(path[0]):
        path = path[::-1]
    return MedialAxis(np.array(path, dtype=np.float64))


def sample_axis(axis: MedialAxis, interval: float) -> np.ndarray:
    """
    Sample centers along the axis at a fixed arc-length interval.

    The trailing remainder shorter than the interval is dropped.

    Returns:
        (n, 2) array of (r, c) centers
    """
    if interval <= 0:
        raise InvalidParameter(f"interval must be > 0, got {interval}")
    points = axis.points
    keep = np.ones(len(points), dtype=bool)
    keep[1:] = np.any(np.diff(points, axis=0) != 0, axis=1)
    points = points[keep]
    cumulative = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])
    total = cumulative[-1]
    if total + 1e-9 < interval:
        raise AxisTooShort(f"axis arc length {total:.3f} is shorter than interval {interval}")
    count = int(math.floor(total / interval + 1e-9)) + 1
    positions = np.arange(count) * float(interval)
    rows = np.interp(positions, cumulative, points[:, 0])
    cols = np.interp(positions, cumulative, points[:, 1])
    return np.column_stack([rows, cols])


# ============================================================================
# PATCHES
# ============================================================================

def center_tangents(centers: np.ndarray) -> np.ndarray:
    """Unit tangents from neighboring centers (central differences inside)."""
    centers = np.asarray(centers, dtype=np.float64)
    if len(centers) < 2:
        return np.array([[1.0, 0.0]] * len(centers))
    tangents = np.empty_like(centers)
    tangents[1:-1] = centers[2:] - centers[:-2]
    tangents[0] = centers[1] - centers[0]
    tangents[-1] = centers[-1] - centers[-2]
    norms = np.linalg.norm(tangents, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return tangents / norms


def _normals(tangents: np.ndarray) -> np.ndarray:
    return np.column_stack([-tangents[:, 1], tangents[:, 0]])


def patch_width(mask: BinaryMask, centers: np.ndarray, tangents: np.ndarray = None) -> int:
    """Symmetric perpendicular foreground extent over all centers plus the margin."""
    centers = np.asarray(centers, dtype=np.float64)
    if tangents is None:
        tangents = center_tangents(centers)
    normals = _normals(tangents)
    reach = max(mask.shape)
    steps = np.arange(1, reach + 1, dtype=np.float64)
    max_half = 0
    for center, normal in zip(centers, normals):
        inside = ndimage.map_coordinates(
            mask.bits.astype(np.float64), [[center[0]], [center[1]]], order=0, mode='constant', cval=0.0
        )[0]
        if inside < 0.5:
            continue
        for sign in (-1.0, 1.0):
            rows = center[0] + sign * steps * normal[0]
            cols = center[1] + sign * steps * normal[1]
            line = ndimage.map_coordinates(
                mask.bits.astype(np.float64), [rows, cols], order=0, mode='constant', cval=0.0
            ) > 0.5
            run = int(np.argmin(line)) if not line.all() else len(line)
            max_half = max(max_half, run)
    return 2 * max_half + 1 + PATCH_MARGIN


def extract_patches(image: GrayImage, mask: BinaryMask, centers: np.ndarray, interval: int,
                    width: int = None) -> PatchSequence:
    """
    Resample rotated rectangles of height `interval` centered on each axis point.

    Args:
        image: source chromosome image
        mask: foreground mask of the same shape
        centers: (n, 2) centers from sample_axis
        interval: patch height l in pixels
        width: optional fixed patch width (computed from the mask otherwise)

    Returns:
        PatchSequence of n patches, each interval x width
    """
    if not mask.matches(image):
        raise ShapeMismatch(f"image {image.shape} and mask {mask.shape} differ")
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    interval = int(interval)
    if interval < 1:
        raise InvalidParameter(f"interval must be >= 1, got {interval}")
    tangents = center_tangents(centers)
    normals = _normals(tangents)
    if width is None:
        width = patch_width(mask, centers, tangents)
    along = np.arange(interval, dtype=np.float64) - interval // 2
    across = np.arange(width, dtype=np.float64) - width // 2
    grid_a, grid_b = np.meshgrid(along, across, indexing='ij')
    patches = []
    for center, tangent, normal in zip(centers, tangents, normals):
        rows = center[0] + grid_a * tangent[0] + grid_b * normal[0]
        cols = center[1] + grid_a * tangent[1] + grid_b * normal[1]
        pixels = ndimage.map_coordinates(
            image.pixels, [rows.ravel(), cols.ravel()], order=1, mode='constant', cval=BACKGROUND
        ).reshape(interval, width)
        patches.append(Patch(
            center=(float(center[0]), float(center[1])),
            angle=float(math.atan2(tangent[1], tangent[0])),
            pixels=np.clip(pixels, 0.0, 1.0),
        ))
    return PatchSequence(patches)


def stack_patches(sequence: PatchSequence) -> GrayImage:
    """Stack patches top to bottom into the rearranged chromosome s."""
    if len(sequence) == 0:
        raise InvalidParameter("cannot stack an empty patch sequence")
    return GrayImage(np.vstack([p.pixels for p in sequence.patches]))


def chromosome_height(mask: BinaryMask) -> int:
    """Row extent of the foreground."""
    rows = np.flatnonzero(mask.bits.any(axis=1))
    if len(rows) == 0:
        raise EmptyMask("mask has no foreground pixels")
    return int(rows[-1] - rows[0] + 1)


def border_level(image: GrayImage) -> float:
    """Median intensity of the outermost pixel ring."""
    p = image.pixels
    ring = np.concatenate([p[0], p[-1], p[1:-1, 0], p[1:-1, -1]])
    return float(np.median(ring))


def fit_to_canvas(image: GrayImage, shape: Tuple[int, int], fill: float = None) -> GrayImage:
    """
    Center an image on a canvas, shrinking it first when it does not fit.

    Args:
        image: image of arbitrary size
        shape: canvas (height, width)
        fill: background level; estimated from the image border when None
    """
    if fill is None:
        fill = border_level(image)
    height, width = shape
    pixels = image.pixels
    if pixels.shape[0] > height or pixels.shape[1] > width:
        scale = min(height / pixels.shape[0], width / pixels.shape[1])
        target = (max(1, int(pixels.shape[0] * scale)), max(1, int(pixels.shape[1] * scale)))
        pixels = resize(pixels, target, order=1, anti_aliasing=True, preserve_range=True)
    canvas = np.full(shape, fill, dtype=np.float64)
    top = (height - pixels.shape[0]) // 2
    left = (width - pixels.shape[1]) // 2
    canvas[top:top + pixels.shape[0], left:left + pixels.shape[1]] = pixels
    return GrayImage.clipped(canvas)


def rectify(image: GrayImage, threshold: float, interval: int, merge_distance: float = 2.0,
            min_branch_length: int = 8) -> Tuple[MedialAxis, PatchSequence]:
    """Full rectification: binarize, clean, thin, extract axis, sample, cut patches."""
    mask = largest_component(binarize(image, threshold))
    axis = extract_axis(thin(mask), merge_distance, min_branch_length)
    centers = sample_axis(axis, interval)
    return axis, extract_patches(image, mask, centers, interval)
