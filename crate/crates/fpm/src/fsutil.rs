//! File tree helpers shared by the store, the build engine and profiles.

use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::os::unix::fs::{symlink, MetadataExt, PermissionsExt};
use std::path::Path;

use sha2::{Digest, Sha256};
use walkdir::WalkDir;

const TREE_MAGIC: &[u8] = b"fpm-tree-v1\0";

fn field(h: &mut Sha256, bytes: &[u8]) {
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
}

fn hash_file_into(h: &mut Sha256, path: &Path) -> io::Result<()> {
    let mut f = File::open(path)?;
    let len = f.metadata()?.len();
    h.update(len.to_le_bytes());
    let mut buf = [0u8; 64 * 1024];
    let mut seen = 0u64;
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        seen += n as u64;
        h.update(&buf[..n]);
    }
    if seen != len {
        return Err(io::Error::other("file changed while hashing"));
    }
    Ok(())
}

/// sha256 of a file's bytes.
pub fn hash_file(path: &Path) -> io::Result<[u8; 32]> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    io::copy(&mut f, &mut h)?;
    Ok(h.finalize().into())
}

/// sha256 of the canonical serialization of a file tree.
///
/// Entries are visited depth first with siblings sorted by name. Each entry
/// contributes its relative path, a type byte (`d`, `f` or `l`), an
/// executable flag and its contents (file bytes or link target), each
/// length-prefixed.
pub fn hash_tree(root: &Path) -> io::Result<[u8; 32]> {
    let mut h = Sha256::new();
    h.update(TREE_MAGIC);
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(io::Error::from)?;
        let rel = entry.path().strip_prefix(root).expect("walk stays under root");
        let rel = rel.to_str().ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "non UTF-8 file name"))?;
        field(&mut h, rel.as_bytes());
        let ft = entry.file_type();
        if ft.is_symlink() {
            h.update(b"l0");
            let target = fs::read_link(entry.path())?;
            field(&mut h, target.as_os_str().as_encoded_bytes());
        } else if ft.is_dir() {
            h.update(b"d0");
            field(&mut h, b"");
        } else {
            let exec = entry.metadata().map_err(io::Error::from)?.mode() & 0o111 != 0;
            h.update(if exec { b"f1" } else { b"f0" });
            hash_file_into(&mut h, entry.path())?;
        }
    }
    Ok(h.finalize().into())
}

/// Copies a file, directory or symlink to `dst`, which must not exist.
/// Modes are kept apart from the write bits, which are added for the owner.
pub fn copy_tree(src: &Path, dst: &Path) -> io::Result<()> {
    let meta = fs::symlink_metadata(src)?;
    let ft = meta.file_type();
    if ft.is_symlink() {
        symlink(fs::read_link(src)?, dst)
    } else if ft.is_dir() {
        fs::create_dir(dst)?;
        let mut names: Vec<_> = fs::read_dir(src)?.map(|e| e.map(|e| e.file_name())).collect::<io::Result<_>>()?;
        names.sort();
        for name in names {
            copy_tree(&src.join(&name), &dst.join(&name))?;
        }
        fs::set_permissions(dst, fs::Permissions::from_mode((meta.mode() & 0o777) | 0o700))
    } else {
        fs::copy(src, dst)?;
        fs::set_permissions(dst, fs::Permissions::from_mode((meta.mode() & 0o777) | 0o200))
    }
}

/// Removes write permission everywhere under `path`. Executable files
/// become 0555, other files 0444 and directories 0555.
pub fn make_read_only(path: &Path) -> io::Result<()> {
    let meta = fs::symlink_metadata(path)?;
    if meta.file_type().is_symlink() {
        return Ok(());
    }
    if meta.is_dir() {
        for entry in fs::read_dir(path)? {
            make_read_only(&entry?.path())?;
        }
        fs::set_permissions(path, fs::Permissions::from_mode(0o555))
    } else {
        let mode = if meta.mode() & 0o111 != 0 { 0o555 } else { 0o444 };
        fs::set_permissions(path, fs::Permissions::from_mode(mode))
    }
}

/// Grants the owner write permission on every directory under `path`.
pub fn make_dirs_writable(path: &Path) -> io::Result<()> {
    let meta = fs::symlink_metadata(path)?;
    if meta.is_dir() {
        fs::set_permissions(path, fs::Permissions::from_mode((meta.mode() & 0o777) | 0o700))?;
        for entry in fs::read_dir(path)? {
            make_dirs_writable(&entry?.path())?;
        }
    }
    Ok(())
}

/// `rm -rf`, including read-only trees. Missing paths are fine.
pub fn remove_tree(path: &Path) -> io::Result<()> {
    let meta = match fs::symlink_metadata(path) {
        Ok(m) => m,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e),
    };
    if meta.is_dir() {
        make_dirs_writable(path)?;
        fs::remove_dir_all(path)
    } else {
        fs::remove_file(path)
    }
}

/// Total size of the regular files and symlinks under `path`.
pub fn tree_size(path: &Path) -> u64 {
    WalkDir::new(path)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter_map(|e| e.metadata().ok())
        .filter(|m| !m.is_dir())
        .map(|m| m.len())
        .sum()
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::Builder::new().prefix(".tmp-").tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_data()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_digest_tracks_content_mode_and_names() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        fs::create_dir_all(a.join("sub")).unwrap();
        fs::write(a.join("sub/f"), "x").unwrap();
        symlink("sub/f", a.join("link")).unwrap();
        let d1 = hash_tree(&a).unwrap();
        assert_eq!(d1, hash_tree(&a).unwrap());

        let b = dir.path().join("b");
        copy_tree(&a, &b).unwrap();
        assert_eq!(hash_tree(&b).unwrap(), d1);

        fs::set_permissions(b.join("sub/f"), fs::Permissions::from_mode(0o755)).unwrap();
        let d2 = hash_tree(&b).unwrap();
        assert_ne!(d2, d1);

        fs::write(b.join("sub/f"), "y").unwrap();
        assert_ne!(hash_tree(&b).unwrap(), d2);
    }

    #[test]
    fn read_only_then_removed() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("t");
        fs::create_dir_all(t.join("d")).unwrap();
        fs::write(t.join("d/f"), "x").unwrap();
        make_read_only(&t).unwrap();
        assert_eq!(fs::metadata(t.join("d/f")).unwrap().mode() & 0o777, 0o444);
        assert_eq!(fs::metadata(t.join("d")).unwrap().mode() & 0o777, 0o555);
        remove_tree(&t).unwrap();
        assert!(!t.exists());
        remove_tree(&t).unwrap();
    }
}
