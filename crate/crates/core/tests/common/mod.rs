// Loop oracles index on purpose; not every target uses every helper.
#![allow(dead_code, clippy::needless_range_loop)]

pub mod block;
pub mod oracles;
