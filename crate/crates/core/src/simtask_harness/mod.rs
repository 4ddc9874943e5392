//! Synthetic desk-scale experiments: the multi-camera world, the pixel-codec
//! baseline, single-run evaluation and parameter sweeps.

pub mod baseline;
pub mod eval;
pub mod sweep;
pub mod world;

pub use baseline::{baseline_decode, baseline_encode, baseline_encode_frame, BaselineFrame};
pub use eval::{
    evaluate_baseline, evaluate_frames, evaluate_run, latency_ms, write_records_csv, BaselineRecord, EvalOptions,
    FrameEval, RateDistortionRecord,
};
pub use sweep::{held_out, run_sweep, run_sweep_on, sweep_csv, GridPoint, SweepGrid};
pub use world::{gen_dataset, pixels_to_tensor, Dataset, WorldSpec};
