//! Composition front door: config files, the loader, the monitor protocol
//! and the delay-loop benchmark.

pub mod bench;
pub mod config;
pub mod loader;
pub mod monitor;

pub use config::{parse_config, ConfigError, TapestryConfig};
pub use loader::{load_config_file, load_tapestry, LoadError};
pub use monitor::{MonitorSession, Reply};
