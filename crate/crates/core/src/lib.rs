pub mod benchmarks;
pub mod data_driven;
pub mod dual_loop;
pub mod error;
pub mod experiments;
pub mod game_oracle;
pub mod matrix_kit;
pub mod plant;
pub mod sysid_init;

pub use error::{Error, Result};
