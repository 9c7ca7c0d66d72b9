//! Configuration, calibration, benchmarking and the files they read and write.

pub mod bench;
pub mod calibrate;
pub mod config;
pub mod metrics;
pub mod tensor_io;
pub mod trace_io;

pub use bench::{
    baseline_macs, load_sweep, obtain_calibration, run_benchmark, run_sweep, write_outcome,
    BenchOutcome,
};
pub use calibrate::{
    calibrate, calibrate_model, percentile, Calibration, LayerCalibration, Percentiles,
};
pub use config::{
    load_config, save_config, AutoPlan, CalibratedThresholds, RunConfig, ThresholdSection,
    WeightBitsSpec, OUT_DIR_ENV,
};
pub use metrics::{
    compare_outputs, read_metrics_csv, write_metrics_csv, MetricsRow, RunMetrics, PSNR_CAP,
};
pub use tensor_io::{decode_tensor, encode_tensor, load_tensor, save_tensor};
pub use trace_io::{
    export_trace, import_trace, read_trace, replay_trace, write_trace, ReplayReport,
};
