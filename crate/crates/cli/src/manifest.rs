use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::Command;
use crate::error::{CliError, CliResult};

/// Pseudo-path for output written to standard output.
pub const STDOUT: &str = "-";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Command,
    pub seed: Option<u64>,
    pub version: String,
    pub threads: usize,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub duration_seconds: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> CliResult<FileDigest> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    })
}

/// Files read and written by one run.
#[derive(Debug, Default)]
pub struct RunRecord {
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub stdout: Vec<u8>,
}

impl RunRecord {
    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let d = digest_file(path)?;
        if !self.inputs.contains(&d) {
            self.inputs.push(d);
        }
        Ok(())
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, bytes).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        self.outputs.push(FileDigest {
            path: path.to_path_buf(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Writes to `path`, or to standard output when `None`.
    pub fn emit(&mut self, path: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
        match path {
            Some(p) => self.write(p, bytes),
            None => {
                self.stdout.extend_from_slice(bytes);
                self.outputs.push(FileDigest {
                    path: PathBuf::from(STDOUT),
                    sha256: sha256_hex(bytes),
                });
                Ok(())
            }
        }
    }

    /// Default manifest location: beside the first file output.
    pub fn default_manifest_path(&self, command: &Command) -> Option<PathBuf> {
        if let Command::McStudy(a) = command {
            return Some(a.out_dir.join("manifest.json"));
        }
        self.outputs
            .iter()
            .find(|o| o.path != Path::new(STDOUT))
            .map(|o| {
                let mut name = o.path.as_os_str().to_owned();
                name.push(".manifest.json");
                PathBuf::from(name)
            })
    }
}

pub fn read_manifest(path: &Path) -> CliResult<RunManifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read manifest {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("manifest {}: {e}", path.display())))
}

/// Makes every path in the command absolute so the manifest can be replayed
/// from any directory.
pub fn absolutize(command: &mut Command) -> CliResult<()> {
    fn abs(p: &mut PathBuf) -> CliResult<()> {
        *p = std::path::absolute(&*p)?;
        Ok(())
    }
    fn abs_opt(p: &mut Option<PathBuf>) -> CliResult<()> {
        if let Some(p) = p {
            abs(p)?;
        }
        Ok(())
    }
    match command {
        Command::GenPop(a) => {
            abs(&mut a.out)?;
            abs_opt(&mut a.report)?;
        }
        Command::Sample(a) => {
            abs(&mut a.pop)?;
            abs(&mut a.out)?;
            abs_opt(&mut a.pi_out)?;
        }
        Command::Estimate(a) => {
            abs(&mut a.pop)?;
            abs(&mut a.sample)?;
            abs(&mut a.pi)?;
            abs_opt(&mut a.grid)?;
            abs(&mut a.out_mean)?;
            abs(&mut a.out_cov)?;
        }
        Command::Bands(a) => {
            abs(&mut a.pop)?;
            abs(&mut a.sample)?;
            abs(&mut a.pi)?;
            abs_opt(&mut a.grid)?;
            abs(&mut a.out)?;
        }
        Command::McStudy(a) => {
            abs(&mut a.pop)?;
            abs_opt(&mut a.grid)?;
            abs(&mut a.out_dir)?;
        }
        Command::OracleCheck(a) => abs_opt(&mut a.out)?,
        Command::RateStudy(a) => abs_opt(&mut a.out)?,
        Command::Replay(a) => abs(&mut a.from)?,
    }
    Ok(())
}
