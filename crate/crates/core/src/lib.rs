// `!(x > 0.0)` style guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cases;
pub mod certificates;
pub mod cli;
pub mod cmpfn;
pub mod config;
pub mod converse;
pub mod oracle;
pub mod report;
pub mod synthesis;
pub mod system;
