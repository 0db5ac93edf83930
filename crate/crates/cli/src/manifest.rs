//! Run manifests and run-directory locking.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use boostnmt_core::corpus::file_digest;
use boostnmt_core::trainer::TrainConfig;

use crate::error::{CliError, CliResult};
use crate::prepared::data_files;

pub const MANIFEST: &str = "manifest.txt";
pub const LOCK: &str = ".lock";
const CONFIG_SECTION: &str = "[config]";

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub version: String,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    /// `(file name, sha256)` for every input file.
    pub hashes: Vec<(String, String)>,
    pub config: TrainConfig,
}

impl RunManifest {
    pub fn hash_inputs(data_dir: &Path) -> CliResult<Vec<(String, String)>> {
        data_files(data_dir)
            .into_iter()
            .map(|f| {
                let digest = file_digest(&data_dir.join(&f))?;
                Ok((f, digest))
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# boostnmt run manifest\n");
        let seeds: Vec<String> = self.config.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "run_id = {}", self.run_id);
        let _ = writeln!(s, "version = {}", self.version);
        let _ = writeln!(s, "data_dir = {}", self.data_dir.display());
        let _ = writeln!(s, "output_dir = {}", self.output_dir.display());
        let _ = writeln!(s, "seeds = {}", seeds.join(","));
        for (f, h) in &self.hashes {
            let _ = writeln!(s, "sha256 {f} = {h}");
        }
        s.push_str(CONFIG_SECTION);
        s.push('\n');
        s.push_str(&self.config.to_config_string());
        s
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let bad = |msg: String| CliError::Usage(format!("manifest: {msg}"));
        let (head, config) = text
            .split_once(&format!("{CONFIG_SECTION}\n"))
            .ok_or_else(|| bad(format!("missing {CONFIG_SECTION} section")))?;
        let config = TrainConfig::parse(config)?;
        let (mut run_id, mut version, mut data_dir, mut output_dir) = (None, None, None, None);
        let mut hashes = Vec::new();
        for line in head.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("cannot read line `{line}`")))?;
            let (k, v) = (k.trim(), v.trim().to_owned());
            match k {
                "run_id" => run_id = Some(v),
                "version" => version = Some(v),
                "data_dir" => data_dir = Some(PathBuf::from(v)),
                "output_dir" => output_dir = Some(PathBuf::from(v)),
                "seeds" => {}
                _ => match k.strip_prefix("sha256 ") {
                    Some(f) => hashes.push((f.to_owned(), v)),
                    None => return Err(bad(format!("unknown key `{k}`"))),
                },
            }
        }
        Ok(RunManifest {
            run_id: run_id.ok_or_else(|| bad("missing run_id".into()))?,
            version: version.unwrap_or_default(),
            data_dir: data_dir.ok_or_else(|| bad("missing data_dir".into()))?,
            output_dir: output_dir.ok_or_else(|| bad("missing output_dir".into()))?,
            hashes,
            config,
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Fails if any recorded input changed.
    pub fn verify_inputs(&self) -> CliResult<()> {
        let now = Self::hash_inputs(&self.data_dir)?;
        for (f, h) in &self.hashes {
            match now.iter().find(|(g, _)| g == f) {
                Some((_, cur)) if cur == h => {}
                Some(_) => {
                    return Err(CliError::Usage(format!(
                        "{} changed since the run was recorded",
                        self.data_dir.join(f).display()
                    )))
                }
                None => {
                    return Err(CliError::Usage(format!(
                        "{} is missing",
                        self.data_dir.join(f).display()
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Exclusive hold on a fresh run directory; the lock file is removed on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    /// Creates `dir`, refusing existing run directories.
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        let lock = dir.join(LOCK);
        if dir.exists() {
            return Err(CliError::Usage(if lock.exists() {
                format!("{} is in use by another process", dir.display())
            } else {
                format!(
                    "{} already exists; run directories are never reused",
                    dir.display()
                )
            }));
        }
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        let mut f: File = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|_| {
                CliError::Usage(format!("{} is in use by another process", dir.display()))
            })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(RunLock { path: lock })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
