//! Crash-safe filesystem primitives. Each mutation is made durable (file and
//! parent directory fsync) before its crash site fires.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;

use crate::crash::{self, Site};

fn sync_dir(dir: &Path) -> io::Result<()> {
    match File::open(dir) {
        Ok(f) => f.sync_all(),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e),
    }
}

fn sync_parent(path: &Path) -> io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => sync_dir(p),
        _ => Ok(()),
    }
}

/// Replace `path` with `bytes` via a temp file and rename on the same filesystem.
pub fn write_atomic(site: Site, path: &Path, bytes: &[u8]) -> io::Result<()> {
    let file_name =
        path.file_name().ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{:08x}", file_name.to_string_lossy(), rand::random::<u32>()));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    sync_parent(path)?;
    crash::point(site);
    Ok(())
}

/// Create `path` with `bytes`, failing with `AlreadyExists` if it is present.
pub fn write_new(site: Site, path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut f = OpenOptions::new().write(true).create_new(true).open(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    sync_parent(path)?;
    crash::point(site);
    Ok(())
}

/// Append one line (a trailing newline is added) and fsync.
pub fn append_line(site: Site, path: &Path, line: &str) -> io::Result<()> {
    debug_assert!(!line.contains('\n'));
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = Vec::with_capacity(line.len() + 1);
    buf.extend_from_slice(line.as_bytes());
    buf.push(b'\n');
    f.write_all(&buf)?;
    f.sync_all()?;
    crash::point(site);
    Ok(())
}

pub fn create_dir_all(site: Site, path: &Path) -> io::Result<()> {
    fs::create_dir_all(path)?;
    sync_parent(path)?;
    crash::point(site);
    Ok(())
}

/// Create an empty container directory. Carries no crash site: an empty
/// directory holds no state of its own.
pub fn ensure_dir(path: &Path) -> io::Result<()> {
    fs::create_dir_all(path)
}

/// Remove a file; absent files are not an error.
pub fn remove_file(site: Site, path: &Path) -> io::Result<()> {
    match fs::remove_file(path) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e),
    }
    sync_parent(path)?;
    crash::point(site);
    Ok(())
}

/// Remove a directory tree; absent paths are not an error.
pub fn remove_dir_all(site: Site, path: &Path) -> io::Result<()> {
    match fs::remove_dir_all(path) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e),
    }
    sync_parent(path)?;
    crash::point(site);
    Ok(())
}

/// Remove a file or directory tree, whichever `path` is.
pub fn remove_path(site: Site, path: &Path) -> io::Result<()> {
    match fs::symlink_metadata(path) {
        Ok(m) if m.is_dir() => remove_dir_all(site, path),
        Ok(_) => remove_file(site, path),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e),
    }
}

/// Recursively copy `src` (file or directory) to `dst`, which must not exist.
/// Files are fsynced; the site fires once after the whole tree is copied.
pub fn copy_tree(site: Site, src: &Path, dst: &Path) -> io::Result<()> {
    copy_tree_inner(src, dst)?;
    sync_parent(dst)?;
    crash::point(site);
    Ok(())
}

fn copy_tree_inner(src: &Path, dst: &Path) -> io::Result<()> {
    let meta = fs::symlink_metadata(src)?;
    if meta.is_dir() {
        fs::create_dir(dst)?;
        let mut entries: Vec<_> = fs::read_dir(src)?.collect::<io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            copy_tree_inner(&entry.path(), &dst.join(entry.file_name()))?;
        }
        sync_dir(dst)?;
    } else {
        fs::copy(src, dst)?;
        File::open(dst)?.sync_all()?;
    }
    Ok(())
}

/// Move a directory into place. `to` must be absent or an empty directory.
pub fn rename_dir(site: Site, from: &Path, to: &Path) -> io::Result<()> {
    fs::rename(from, to)?;
    sync_parent(to)?;
    crash::point(site);
    Ok(())
}

/// Copy one file into place atomically (temp + rename).
pub fn copy_file_atomic(site: Site, src: &Path, dst: &Path) -> io::Result<()> {
    let bytes = fs::read(src)?;
    write_atomic(site, dst, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crash::site;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f");
        write_atomic(site::CHECKPOINT_WRITTEN, &p, b"one").unwrap();
        write_atomic(site::CHECKPOINT_WRITTEN, &p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn write_new_refuses_existing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tok");
        write_new(site::LOCK_GRANTED, &p, b"").unwrap();
        let err = write_new(site::LOCK_GRANTED, &p, b"").unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::AlreadyExists);
    }

    #[test]
    fn copy_tree_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        fs::create_dir_all(src.join("a/b")).unwrap();
        fs::write(src.join("a/b/x"), b"x").unwrap();
        fs::write(src.join("y"), b"").unwrap();
        let dst = dir.path().join("dst");
        copy_tree(site::SNAPSHOT_COPIED, &src, &dst).unwrap();
        assert_eq!(fs::read(dst.join("a/b/x")).unwrap(), b"x");
        assert_eq!(fs::read(dst.join("y")).unwrap(), b"");
        remove_path(site::SNAPSHOT_DISCARDED, &dst).unwrap();
        assert!(!dst.exists());
        remove_path(site::SNAPSHOT_DISCARDED, &dst).unwrap();
    }
}
