//! Checks for gradient obfuscation: restart curves, the solid-gray oracle,
//! collapsed-run filtering and loss-surface grids.

mod checks;
mod landscape;
mod report;

pub(crate) use report::csv_error;

pub use checks::{gray_image_check, restart_curve, GrayCheck, RestartCurve, GRAY_MARGIN};
pub use landscape::{loss_landscape, point_loss, LandscapeConfig, LandscapeGrid, MAX_COSINE};
pub use report::{
    collapse_filter, collapse_threshold, read_rows_csv, write_rows_csv, Exclusion, Flag, ReportRow, RobustnessReport,
};
