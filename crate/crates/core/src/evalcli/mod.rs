//! Scores, maps, configuration, reports and the run pipeline behind the
//! command-line tool.

mod config;
mod metrics;
mod render;
mod report;
mod run;

pub use config::{RunConfig, SynthSettings, TheorySettings};
pub use metrics::{confusion, metrics, ConfusionMatrix, MetricsReport};
pub use render::{default_palette, map_bytes, render_map, Rgb};
pub use report::{format_f64, to_json, RunReport, Theorem1Summary, TheoryReport};
pub use run::{bound_report, entropy_report, eval_run, evaluate, theorem1_summary, theory_report, train_run, Task};
