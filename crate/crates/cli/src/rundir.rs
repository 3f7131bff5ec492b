use std::fs;
use std::path::{Path, PathBuf};

use marmamba::{Error, Result};
use serde::Serialize;

use crate::config::{RunConfig, CONFIG_FILE};

pub const RUN_FILE: &str = "run.json";
pub const VERSION: &str = env!("MARMAMBA_VERSION");

#[derive(Serialize)]
struct RunInfo<'a> {
    version: &'a str,
    command: &'a str,
    seed: u64,
}

/// Output directory of one command invocation.
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates `path`. An existing non-empty directory is replaced only
    /// with `force`, and only if it holds a previous run.
    pub fn create(path: &Path, force: bool) -> Result<Self> {
        let occupied = path.exists() && fs::read_dir(path).map_err(|e| Error::io(path, e))?.next().is_some();
        if occupied {
            if !force {
                return Err(Error::Contract(format!(
                    "{} already exists; pass --force to replace it",
                    path.display()
                )));
            }
            if !path.join(RUN_FILE).is_file() {
                return Err(Error::Contract(format!(
                    "{} is not a run directory; refusing to replace it",
                    path.display()
                )));
            }
            fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
        }
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn open(path: &Path) -> Result<Self> {
        if !path.join(RUN_FILE).is_file() {
            return Err(Error::Contract(format!("{} is not a run directory", path.display())));
        }
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write_config(&self, cfg: &RunConfig, command: &str) -> Result<()> {
        let path = self.path.join(CONFIG_FILE);
        fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
        let info = RunInfo {
            version: VERSION,
            command,
            seed: cfg.seed,
        };
        let path = self.path.join(RUN_FILE);
        fs::write(&path, serde_json::to_string_pretty(&info)? + "\n").map_err(|e| Error::io(&path, e))
    }
}
