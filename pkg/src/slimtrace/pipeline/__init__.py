"""Scene-level retrieval: ingestion, per-pixel SLIM, maps and reports."""

from .maps import ConcentrationMap, MapComparison, compare_maps, render_heatmap
from .retrieve import (
    RetrievalConfig,
    RetrievalError,
    RetrievalReport,
    all_species_totals,
    choose_global_q,
    retrieve_map,
    species_totals,
)
from .scene import SceneCube, SceneError, clip_band, load_scene, make_scene, save_scene

__all__ = [
    "ConcentrationMap",
    "MapComparison",
    "RetrievalConfig",
    "RetrievalError",
    "RetrievalReport",
    "SceneCube",
    "SceneError",
    "all_species_totals",
    "choose_global_q",
    "clip_band",
    "compare_maps",
    "load_scene",
    "make_scene",
    "render_heatmap",
    "retrieve_map",
    "save_scene",
    "species_totals",
]
