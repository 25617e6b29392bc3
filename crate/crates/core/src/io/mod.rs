//! Configuration files, checkpoints and CSV tables.

pub mod checkpoint;
pub mod config;
pub mod csv;

pub use self::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use self::config::{load_config, parse_config};
pub use self::csv::emit_csv;
