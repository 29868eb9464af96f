//! Output files that appear only once complete.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Read};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// A file written under `<path>.partial` and renamed into place on
/// [`AtomicFile::commit`]. Dropping it uncommitted deletes the partial file.
pub struct AtomicFile {
    target: PathBuf,
    partial: PathBuf,
    file: Option<File>,
}

impl AtomicFile {
    pub fn create(target: &Path) -> Result<Self> {
        let partial = with_suffix(target, ".partial");
        let file = File::create(&partial).with_context(|| format!("creating {}", partial.display()))?;
        Ok(AtomicFile {
            target: target.to_path_buf(),
            partial,
            file: Some(file),
        })
    }

    pub fn writer(&self) -> Result<BufWriter<File>> {
        let f = self.file.as_ref().expect("file open until commit").try_clone()?;
        Ok(BufWriter::new(f))
    }

    pub fn commit(mut self) -> Result<()> {
        if let Some(f) = self.file.take() {
            f.sync_all()?;
        }
        fs::rename(&self.partial, &self.target).with_context(|| format!("moving {} into place", self.target.display()))
    }

    /// Runs `write` on the partial path and renames the result on success.
    pub fn write_with(target: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let partial = with_suffix(target, ".partial");
        match write(&partial) {
            Ok(()) => fs::rename(&partial, target).with_context(|| format!("moving {} into place", target.display())),
            Err(e) => {
                let _ = fs::remove_file(&partial);
                Err(e)
            }
        }
    }
}

impl Drop for AtomicFile {
    fn drop(&mut self) {
        if self.file.take().is_some() {
            let _ = fs::remove_file(&self.partial);
        }
    }
}

/// A directory filled under `<dir>.partial` and renamed into place.
pub struct StagedDir {
    target: PathBuf,
    staging: PathBuf,
    done: bool,
}

impl StagedDir {
    /// Fails if `target` exists and is not an empty directory.
    pub fn create(target: &Path) -> Result<Self> {
        if target.exists() {
            let empty = target.is_dir() && fs::read_dir(target)?.next().is_none();
            if !empty {
                bail!("output directory {} already exists and is not empty", target.display());
            }
        }
        let staging = with_suffix(target, ".partial");
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(StagedDir {
            target: target.to_path_buf(),
            staging,
            done: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn commit(mut self) -> Result<()> {
        if self.target.exists() {
            fs::remove_dir(&self.target)?;
        }
        fs::rename(&self.staging, &self.target)
            .with_context(|| format!("moving {} into place", self.target.display()))?;
        self.done = true;
        Ok(())
    }
}

impl Drop for StagedDir {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
