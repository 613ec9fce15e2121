"""Three-level channel-wise Saab transform tree.

Level 1 fits one kernel bank per input channel (a single joint 5x5x2 bank for
two-channel chroma input), deeper levels fit one bank per forwarded node.
Node energies are tracked in two steps: the within-unit share (e_init) and the
root-path product (e_norm), which drives the keep/forward/discard partition
via the E_C / E_F thresholds. The spatial chain for 32x32 input is fixed:
32 -> 28 -> 14 -> 10 -> 5 -> 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import saab
from .container import read_container, write_container
from .errors import DataError, FitError

INTERMEDIATE = "intermediate"
LEAF = "leaf"
DISCARDED = "discarded"

INPUT_SIZE = 32
WINDOW = 5
STRIDE = 1
POOL = 2
LEVELS = 3


@dataclass(frozen=True)
class PixelHopConfig:
    input_channels: int
    e_cutoff: float
    e_forward: float
    patch_subsample: float = 1.0
    subsample_seed: int = 0

    def __post_init__(self):
        if self.input_channels < 1:
            raise DataError("input_channels must be >= 1")
        if not (0.0 <= self.e_cutoff <= self.e_forward <= 1.0):
            raise DataError("need 0 <= e_cutoff <= e_forward <= 1")
        if not (0.0 < self.patch_subsample <= 1.0):
            raise DataError("patch_subsample must be in (0, 1]")


@dataclass
class HopNode:
    id: str
    level: int
    parent: str | None
    within_bank_index: int
    e_init: float
    e_norm: float
    status: str


@dataclass
class PixelHopModel:
    config: PixelHopConfig
    banks: dict[str, saab.SaabKernelBank]
    nodes: dict[str, HopNode]
    unit_order: list[str] = field(default_factory=list)

    def nodes_at(self, level: int, statuses: tuple[str, ...] | None = None) -> list[HopNode]:
        """Nodes of one level in id order, optionally filtered by status."""
        picked = [n for n in self.nodes.values() if n.level == level]
        if statuses is not None:
            picked = [n for n in picked if n.status in statuses]
        return sorted(picked, key=lambda n: n.id)

    def output_nodes(self, level: int) -> list[HopNode]:
        return self.nodes_at(level, (INTERMEDIATE, LEAF))

    @property
    def level_counts(self) -> tuple[int, int, int]:
        return tuple(len(self.output_nodes(lv)) for lv in (1, 2, 3))


@dataclass
class HopOutputs:
    """Pre-pooling response maps of all non-discarded nodes, in node id order."""

    level1: np.ndarray  # (28, 28, K1)
    level2: np.ndarray  # (10, 10, K2)
    level3: np.ndarray  # (K3,)

    def level_array(self, level: int) -> np.ndarray:
        return (self.level1, self.level2, self.level3)[level - 1]


def _unit_layout(k0: int) -> list[tuple[str, list[int]]]:
    """Level-1 units: per channel, except the joint two-channel chroma bank."""
    if k0 == 2:
        return [("1.u0", [0, 1])]
    return [(f"1.u{c}", [c]) for c in range(k0)]


def _node_id(level: int, unit_path: str, kernel_index: int) -> str:
    return f"{level}.{unit_path}.k{kernel_index:02d}"


def _unit_path(node: HopNode) -> str:
    # "2.u0.k03" -> "u0.k03"; used to build the ids of the node's children
    return node.id.split(".", 1)[1]


def _subsample(patches: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    if rate >= 1.0:
        return patches
    n = patches.shape[0]
    keep = max(2, int(round(n * rate)))
    idx = np.sort(rng.choice(n, size=keep, replace=False))
    return patches[idx]


def _fit_unit(
    model: PixelHopModel,
    unit_id: str,
    level: int,
    parent: HopNode | None,
    patches: np.ndarray,
    rng: np.random.Generator,
) -> list[HopNode]:
    """Fit one bank, attach energy-annotated nodes, prune discarded kernels."""
    cfg = model.config
    sample = _subsample(patches, cfg.patch_subsample, rng)
    bank = saab.fit_saab(sample)

    raw = bank.raw_energies()
    e_init = raw / raw.sum()
    parent_norm = 1.0 if parent is None else parent.e_norm
    parent_id = None if parent is None else parent.id
    unit_path = unit_id.split(".", 1)[1] if parent is None else _unit_path(parent)

    nodes: list[HopNode] = []
    for k in range(bank.patch_dim):
        if k < bank.n_kept:
            ei = float(e_init[k])
            en = parent_norm * ei
            if en < cfg.e_cutoff:
                status = DISCARDED
            elif level < LEVELS and en >= cfg.e_forward:
                status = INTERMEDIATE
            else:
                status = LEAF
        else:  # rank-pruned slot: no kernel was retained for it
            ei, en, status = 0.0, 0.0, DISCARDED
        nodes.append(
            HopNode(
                id=_node_id(level, unit_path, k),
                level=level,
                parent=parent_id,
                within_bank_index=k,
                e_init=ei,
                e_norm=en,
                status=status,
            )
        )

    keep_ac = np.array([n.status != DISCARDED for n in nodes[1 : bank.n_kept]], dtype=bool)
    model.banks[unit_id] = saab.select_kernels(bank, keep_ac, sample)
    for node in nodes:
        model.nodes[node.id] = node
    model.unit_order.append(unit_id)
    return nodes


def _bank_columns(model: PixelHopModel, unit_id: str, unit_nodes: list[HopNode]) -> list[tuple[HopNode, int]]:
    """Map each kept node of a unit to its column in the pruned bank."""
    col = 0
    mapping = []
    for node in sorted(unit_nodes, key=lambda n: n.within_bank_index):
        if node.within_bank_index == 0 or node.status != DISCARDED:
            if node.status != DISCARDED:
                mapping.append((node, col))
            col += 1
    return mapping


def fit_pixelhop(images: np.ndarray, config: PixelHopConfig) -> PixelHopModel:
    """One-pass feedforward fit of the full three-level tree.

    ``images`` is (n, 32, 32, K0); at least two images are required. Raises
    FitError naming the level when every node there is discarded or nothing
    can be forwarded.
    """
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim != 4 or imgs.shape[1] != INPUT_SIZE or imgs.shape[2] != INPUT_SIZE:
        raise DataError(f"expected (n, {INPUT_SIZE}, {INPUT_SIZE}, C) images, got {imgs.shape}")
    if imgs.shape[3] != config.input_channels:
        raise DataError(f"images have {imgs.shape[3]} channels, config says {config.input_channels}")
    if imgs.shape[0] < 2:
        raise FitError("need at least 2 training images")

    model = PixelHopModel(config=config, banks={}, nodes={})
    rng = np.random.default_rng(config.subsample_seed)
    n = imgs.shape[0]

    def fit_and_forward(
        unit_id: str,
        level: int,
        parent: HopNode | None,
        per_image: list[np.ndarray],
        side: int,
    ) -> list[tuple[HopNode, np.ndarray]]:
        """Fit one unit from per-image patch matrices; pool its forwarded maps."""
        unit_nodes = _fit_unit(model, unit_id, level, parent, np.concatenate(per_image), rng)
        bank = model.banks[unit_id]
        pairs = _bank_columns(model, unit_id, unit_nodes)
        inter = [(node, col) for node, col in pairs if node.status == INTERMEDIATE]
        if level == LEVELS or not inter:
            return []
        pooled = np.stack(
            [saab.max_pool_2x2(saab.apply_saab(bank, pts).reshape(side, side, -1)) for pts in per_image]
        )  # (n, side/2, side/2, n_cols)
        return [(node, pooled[..., col]) for node, col in inter]

    # level 1
    side = saab.patch_grid_side(INPUT_SIZE, WINDOW, STRIDE)  # 28
    forwarded: list[tuple[HopNode, np.ndarray]] = []
    for unit_id, channels in _unit_layout(config.input_channels):
        per_image = [saab.extract_patches(imgs[i][:, :, channels], WINDOW, STRIDE) for i in range(n)]
        forwarded.extend(fit_and_forward(unit_id, 1, None, per_image, side))
    _check_level(model, 1, needs_forward=True)

    # levels 2 and 3
    side //= POOL  # 14
    for level in (2, 3):
        grid = saab.patch_grid_side(side, WINDOW, STRIDE)  # 10 then 1
        next_forwarded: list[tuple[HopNode, np.ndarray]] = []
        for parent, maps in forwarded:
            per_image = [saab.extract_patches(maps[i], WINDOW, STRIDE) for i in range(n)]
            next_forwarded.extend(fit_and_forward(parent.id, level, parent, per_image, grid))
        _check_level(model, level, needs_forward=level < LEVELS)
        forwarded = next_forwarded
        side = grid // POOL
    return model


def _check_level(model: PixelHopModel, level: int, needs_forward: bool) -> None:
    if not model.output_nodes(level):
        raise FitError(f"level {level}: every node was discarded (thresholds too high)")
    if needs_forward and not model.nodes_at(level, (INTERMEDIATE,)):
        raise FitError(f"level {level}: no intermediate nodes to forward to level {level + 1}")


def apply_pixelhop(model: PixelHopModel, image: np.ndarray) -> HopOutputs:
    """Transform one image into pre-pooling response maps at all three levels.

    Intermediate and leaf nodes are both emitted; channel order is node id
    order, matching ``model.output_nodes``.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape != (INPUT_SIZE, INPUT_SIZE, model.config.input_channels):
        raise DataError(
            f"expected ({INPUT_SIZE}, {INPUT_SIZE}, {model.config.input_channels}) image, got {img.shape}"
        )

    maps_by_id: dict[str, np.ndarray] = {}  # node id -> pre-pooling 2-D map
    level_maps: dict[int, dict[str, np.ndarray]] = {1: {}, 2: {}, 3: {}}

    unit_nodes_by_id: dict[str, list[HopNode]] = {}
    for node in model.nodes.values():
        key = "1." + node.id.split(".")[1] if node.level == 1 else node.parent
        unit_nodes_by_id.setdefault(key, []).append(node)

    # level 1
    for unit_id, channels in _unit_layout(model.config.input_channels):
        patches = saab.extract_patches(img[:, :, channels], WINDOW, STRIDE)
        side = saab.patch_grid_side(INPUT_SIZE, WINDOW, STRIDE)
        resp = saab.apply_saab(model.banks[unit_id], patches)
        for node, col in _bank_columns(model, unit_id, unit_nodes_by_id[unit_id]):
            level_maps[1][node.id] = resp[:, col].reshape(side, side)
            if node.status == INTERMEDIATE:
                maps_by_id[node.id] = saab.max_pool_2x2(level_maps[1][node.id])

    # levels 2 and 3
    for level in (2, 3):
        for parent_node in model.nodes_at(level - 1, (INTERMEDIATE,)):
            unit_id = parent_node.id
            source = maps_by_id[unit_id]
            patches = saab.extract_patches(source, WINDOW, STRIDE)
            grid = saab.patch_grid_side(source.shape[0], WINDOW, STRIDE)
            resp = saab.apply_saab(model.banks[unit_id], patches)
            for node, col in _bank_columns(model, unit_id, unit_nodes_by_id[unit_id]):
                level_maps[level][node.id] = resp[:, col].reshape(grid, grid)
                if node.status == INTERMEDIATE and level < LEVELS:
                    maps_by_id[node.id] = saab.max_pool_2x2(level_maps[level][node.id])

    def stack(level: int) -> np.ndarray:
        ordered = [level_maps[level][n.id] for n in model.output_nodes(level)]
        return np.stack(ordered, axis=-1)

    l3 = stack(3)
    return HopOutputs(level1=stack(1), level2=stack(2), level3=l3.reshape(-1))


def count_parameters(
    level_counts: tuple[int, int, int], k0: int = 1, accounting: str = "text"
) -> dict[str, int]:
    """Per-level stored-parameter counts for the transform tree.

    Level 1 stores one kernel per kept node plus a single bias; deeper levels
    re-use the constant DC kernel of each per-channel transform, so only the
    non-repeated kernels are counted, plus one bias per transform. Under
    ``text`` accounting the joint two-channel first unit is costed at its true
    50-dim kernel size; ``table4`` accounting prices every kernel at 25 values.
    """
    if accounting not in ("text", "table4"):
        raise DataError(f"unknown accounting {accounting!r}")
    k1, k2, k3 = level_counts
    window_dim = WINDOW * WINDOW
    first_dim = window_dim * k0 if (accounting == "text" and k0 == 2) else window_dim
    return {
        "level1": first_dim * k1 + 1,
        "level2": window_dim * (k2 - k1) + k1,
        "level3": window_dim * (k3 - k2) + k2,
    }


# ---------------------------------------------------------------------------
# serialization


def model_to_payload(model: PixelHopModel, prefix: str = "") -> tuple[dict, dict[str, np.ndarray]]:
    """Flatten a model into (json-meta, named arrays) for the container."""
    meta = {
        "config": {
            "input_channels": model.config.input_channels,
            "e_cutoff": model.config.e_cutoff,
            "e_forward": model.config.e_forward,
            "patch_subsample": model.config.patch_subsample,
            "subsample_seed": model.config.subsample_seed,
        },
        "unit_order": list(model.unit_order),
        "banks": {},
        "nodes": [
            {
                "id": nd.id,
                "level": nd.level,
                "parent": nd.parent,
                "within_bank_index": nd.within_bank_index,
                "e_init": nd.e_init,
                "e_norm": nd.e_norm,
                "status": nd.status,
            }
            for nd in sorted(model.nodes.values(), key=lambda nd: nd.id)
        ],
    }
    arrays = {}
    for unit_id, bank in model.banks.items():
        meta["banks"][unit_id] = {"dc_energy_raw": bank.dc_energy_raw, "bias": bank.bias}
        arrays[f"{prefix}bank/{unit_id}/kernels"] = bank.kernels
        arrays[f"{prefix}bank/{unit_id}/eigenvalues"] = bank.eigenvalues
    return meta, arrays


def model_from_payload(meta: dict, arrays: dict[str, np.ndarray], prefix: str = "") -> PixelHopModel:
    config = PixelHopConfig(**meta["config"])
    banks = {}
    for unit_id, scalars in meta["banks"].items():
        banks[unit_id] = saab.SaabKernelBank(
            kernels=arrays[f"{prefix}bank/{unit_id}/kernels"],
            eigenvalues=arrays[f"{prefix}bank/{unit_id}/eigenvalues"],
            dc_energy_raw=scalars["dc_energy_raw"],
            bias=scalars["bias"],
        )
    nodes = {nd["id"]: HopNode(**nd) for nd in meta["nodes"]}
    return PixelHopModel(config=config, banks=banks, nodes=nodes, unit_order=list(meta["unit_order"]))


def save_model(model: PixelHopModel, path) -> None:
    meta, arrays = model_to_payload(model)
    write_container(path, "pixelhop", meta, arrays)


def load_model(path) -> PixelHopModel:
    kind, meta, arrays = read_container(path)
    if kind != "pixelhop":
        raise DataError(f"{path}: container holds {kind!r}, not a pixelhop model")
    return model_from_payload(meta, arrays)
