use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.txt";

fn collect(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> =
        fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect(&path, root, out)?;
        } else if path.strip_prefix(root)? != Path::new(MANIFEST) {
            out.push(path);
        }
    }
    Ok(())
}

/// Rewrite `<dir>/manifest.txt`: one `sha256  relative/path` line per file
/// under `dir`, sorted by path.
pub fn write(dir: &Path) -> Result<()> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    let mut text = String::new();
    for f in files {
        let bytes = fs::read(&f).with_context(|| format!("reading {}", f.display()))?;
        let rel = f.strip_prefix(dir)?.to_string_lossy().replace('\\', "/");
        text.push_str(&format!("{}  {rel}\n", hex::encode(Sha256::digest(&bytes))));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}
