use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

/// Output directory of one run. Completed runs carry a `manifest.txt` and
/// are never modified unless the caller passes `--overwrite`.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
}

fn is_empty_dir(path: &Path) -> anyhow::Result<bool> {
    Ok(fs::read_dir(path)?.next().is_none())
}

impl RunDir {
    /// Validates that `root` may be written and prepares it.
    pub fn prepare(root: &Path, overwrite: bool) -> anyhow::Result<Self> {
        if root.exists() && !is_empty_dir(root).with_context(|| format!("cannot list {}", root.display()))? {
            if !overwrite {
                bail!(
                    "run directory {} already exists; choose a new directory or pass --overwrite",
                    root.display()
                );
            }
            if !root.join(MANIFEST).is_file() {
                bail!(
                    "refusing to overwrite {}: it is not empty and has no {MANIFEST}",
                    root.display()
                );
            }
        }
        Ok(Self { root: root.to_path_buf() })
    }

    /// A cache directory that is updated in place across runs.
    pub fn reuse(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    /// Clears any previous contents and creates the directory.
    pub fn create(&self) -> anyhow::Result<()> {
        if self.root.exists() {
            fs::remove_dir_all(&self.root).with_context(|| format!("cannot clear {}", self.root.display()))?;
        }
        fs::create_dir_all(&self.root).with_context(|| format!("cannot create {}", self.root.display()))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Path of `rel` inside the run, with parent directories created.
    pub fn file(&self, rel: impl AsRef<Path>) -> anyhow::Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
        }
        Ok(p)
    }

    pub fn write(&self, rel: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
        let p = self.file(rel)?;
        fs::write(&p, contents).with_context(|| format!("cannot write {}", p.display()))
    }

    /// Lists every file under the run, sorted, into `manifest.txt`.
    pub fn finish(&self) -> anyhow::Result<Vec<String>> {
        let mut files = Vec::new();
        collect(&self.root, &self.root, &mut files)?;
        files.retain(|f| f != MANIFEST);
        files.sort();
        let mut text = files.join("\n");
        text.push('\n');
        self.write(MANIFEST, text)?;
        Ok(files)
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> anyhow::Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walked below root");
            out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn existing_run_requires_overwrite() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("run");
        let run = RunDir::prepare(&root, false).unwrap();
        run.create().unwrap();
        run.write("a/b.txt", "x").unwrap();
        run.write("c.txt", "y").unwrap();
        assert_eq!(run.finish().unwrap(), vec!["a/b.txt", "c.txt"]);
        assert_eq!(fs::read_to_string(root.join(MANIFEST)).unwrap(), "a/b.txt\nc.txt\n");

        assert!(RunDir::prepare(&root, false).is_err());
        let again = RunDir::prepare(&root, true).unwrap();
        again.create().unwrap();
        assert!(!root.join("c.txt").exists());
    }

    #[test]
    fn foreign_directory_is_never_cleared() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("keep.txt"), "x").unwrap();
        assert!(RunDir::prepare(tmp.path(), true).is_err());
        assert!(tmp.path().join("keep.txt").exists());
    }
}
