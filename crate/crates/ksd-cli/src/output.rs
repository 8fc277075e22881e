//! Output directory resolution and artifact paths.
//!
//! Precedence for where an experiment writes its files: the `KSD_OUT_DIR`
//! environment variable wins, then the config's `out_dir` key, then the
//! default `runs/<experiment>` under the working directory.

use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::{CliError, CliResult};

/// Environment variable that overrides every config's output directory.
pub const OUT_DIR_ENV: &str = "KSD_OUT_DIR";

/// Picks the output directory and creates it.
pub fn resolve_out_dir(cfg: &Config, experiment: &str) -> CliResult<PathBuf> {
    // Consume the key either way so `finish` does not flag it when the
    // environment override is active.
    let from_cfg = cfg.get("out_dir").map(PathBuf::from);
    let dir = match std::env::var_os(OUT_DIR_ENV) {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => from_cfg.unwrap_or_else(|| Path::new("runs").join(experiment)),
    };
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    // Both tests touch the process-global environment, so they must not
    // interleave with each other.
    static ENV_LOCK: Mutex<()> = Mutex::new(());

    #[test]
    fn config_key_beats_default() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("custom");
        let cfg = Config::parse(&format!("out_dir = {}\n", sub.display())).unwrap();
        std::env::remove_var(OUT_DIR_ENV);
        let out = resolve_out_dir(&cfg, "gaussian2d").unwrap();
        assert_eq!(out, sub);
        assert!(sub.is_dir());
        cfg.finish().unwrap();
    }

    #[test]
    fn env_var_overrides_config() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let from_env = dir.path().join("enved");
        let cfg = Config::parse("out_dir = should_not_be_used\n").unwrap();
        std::env::set_var(OUT_DIR_ENV, &from_env);
        let out = resolve_out_dir(&cfg, "gaussian2d");
        std::env::remove_var(OUT_DIR_ENV);
        assert_eq!(out.unwrap(), from_env);
        assert!(from_env.is_dir());
        // The out_dir key still counts as consumed.
        cfg.finish().unwrap();
    }
}
