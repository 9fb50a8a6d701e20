//! Parallel configurations and the layout rules shared by save and load paths.

mod config;
mod layout;

pub use config::{ParallelConfig, Placement, PpSchedule, TpGrid, ZeroStage};
pub use layout::{
    assign_pattern, check_compatible, fragment_layout, materialize, param_stage, partial_value, pp_layer_map,
    slice_shape, zero_flatten, zero_ranges, zero_shards, FragmentLayout, Pattern, TpRole, TpSlice, ZeroFlat,
};
