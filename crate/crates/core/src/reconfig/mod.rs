//! Distributed → atomic conversion: extract, union, strip padding, save.

mod convert;
mod extract;
mod plan;
mod union;

pub use convert::{convert, ConvertOptions, ConvertStats};
pub use extract::{extract, extract_each, FragmentMsg};
pub use plan::{plan_items, plan_work, WorkPlan};
pub use union::{strip_pad, union, UnionOptions};
