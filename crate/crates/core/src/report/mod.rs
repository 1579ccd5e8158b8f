//! Output artefacts: run manifests, SVG charts and PPM overlays.

mod manifest;
mod overlay;
mod svg;

pub use manifest::{RunManifest, MANIFEST_FORMAT, RUN_MANIFEST_FILE};
pub use overlay::{blend_heatmap, crop, draw_box, heat_color, GREEN, YELLOW};
pub use svg::{paired_bars_svg, BarSeries};
