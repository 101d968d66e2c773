//! File-system access for the build stratum.
//!
//! Builtins never call `std::fs` directly; they go through [`BuildFs`], so a
//! recording implementation can observe everything an evaluation touches.

use std::cell::RefCell;
use std::fs;
use std::io;
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use crate::fsutil;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    File,
    Dir,
    Symlink,
}

pub trait BuildFs {
    fn read(&self, path: &Path) -> io::Result<Vec<u8>>;
    fn write(&self, path: &Path, data: &[u8]) -> io::Result<()>;
    /// Replaces `path` through a temporary file, keeping its mode.
    fn replace(&self, path: &Path, data: &[u8]) -> io::Result<()>;
    fn create_dir_all(&self, path: &Path) -> io::Result<()>;
    fn symlink(&self, target: &Path, link: &Path) -> io::Result<()>;
    fn read_link(&self, path: &Path) -> io::Result<PathBuf>;
    /// Names in a directory, sorted.
    fn read_dir(&self, path: &Path) -> io::Result<Vec<String>>;
    /// Kind of `path` without following symlinks; `None` if it does not exist.
    fn kind(&self, path: &Path) -> io::Result<Option<FileKind>>;
    /// Kind of `path` after following symlinks.
    fn resolved_kind(&self, path: &Path) -> io::Result<Option<FileKind>>;
    fn mode(&self, path: &Path) -> io::Result<u32>;
    fn set_mode(&self, path: &Path, mode: u32) -> io::Result<()>;
    fn copy_file(&self, from: &Path, to: &Path) -> io::Result<()>;
    fn remove_tree(&self, path: &Path) -> io::Result<()>;
}

fn kind_of(meta: &fs::Metadata) -> FileKind {
    let ft = meta.file_type();
    if ft.is_symlink() {
        FileKind::Symlink
    } else if ft.is_dir() {
        FileKind::Dir
    } else {
        FileKind::File
    }
}

fn not_found_is_none(r: io::Result<fs::Metadata>) -> io::Result<Option<FileKind>> {
    match r {
        Ok(m) => Ok(Some(kind_of(&m))),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

/// The real file system.
#[derive(Debug, Default, Clone, Copy)]
pub struct OsFs;

impl BuildFs for OsFs {
    fn read(&self, path: &Path) -> io::Result<Vec<u8>> {
        fs::read(path)
    }

    fn write(&self, path: &Path, data: &[u8]) -> io::Result<()> {
        fs::write(path, data)
    }

    fn replace(&self, path: &Path, data: &[u8]) -> io::Result<()> {
        let mode = fs::metadata(path)?.permissions().mode();
        fsutil::write_atomic(path, data)?;
        fs::set_permissions(path, fs::Permissions::from_mode(mode))
    }

    fn create_dir_all(&self, path: &Path) -> io::Result<()> {
        fs::create_dir_all(path)
    }

    fn symlink(&self, target: &Path, link: &Path) -> io::Result<()> {
        symlink(target, link)
    }

    fn read_link(&self, path: &Path) -> io::Result<PathBuf> {
        fs::read_link(path)
    }

    fn read_dir(&self, path: &Path) -> io::Result<Vec<String>> {
        let mut names = Vec::new();
        for entry in fs::read_dir(path)? {
            names.push(entry?.file_name().to_string_lossy().into_owned());
        }
        names.sort();
        Ok(names)
    }

    fn kind(&self, path: &Path) -> io::Result<Option<FileKind>> {
        not_found_is_none(fs::symlink_metadata(path))
    }

    fn resolved_kind(&self, path: &Path) -> io::Result<Option<FileKind>> {
        not_found_is_none(fs::metadata(path))
    }

    fn mode(&self, path: &Path) -> io::Result<u32> {
        Ok(fs::metadata(path)?.permissions().mode() & 0o7777)
    }

    fn set_mode(&self, path: &Path, mode: u32) -> io::Result<()> {
        fs::set_permissions(path, fs::Permissions::from_mode(mode))
    }

    fn copy_file(&self, from: &Path, to: &Path) -> io::Result<()> {
        fs::copy(from, to).map(|_| ())
    }

    fn remove_tree(&self, path: &Path) -> io::Result<()> {
        fsutil::remove_tree(path)
    }
}

/// One observed file-system call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FsAccess {
    pub op: &'static str,
    pub path: PathBuf,
}

/// Passes calls through to [`OsFs`] and records each one.
#[derive(Debug, Default, Clone)]
pub struct RecordingFs {
    log: Rc<RefCell<Vec<FsAccess>>>,
}

impl RecordingFs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accesses(&self) -> Vec<FsAccess> {
        self.log.borrow().clone()
    }

    fn note(&self, op: &'static str, path: &Path) {
        self.log.borrow_mut().push(FsAccess { op, path: path.to_path_buf() });
    }
}

impl BuildFs for RecordingFs {
    fn read(&self, path: &Path) -> io::Result<Vec<u8>> {
        self.note("read", path);
        OsFs.read(path)
    }

    fn write(&self, path: &Path, data: &[u8]) -> io::Result<()> {
        self.note("write", path);
        OsFs.write(path, data)
    }

    fn replace(&self, path: &Path, data: &[u8]) -> io::Result<()> {
        self.note("replace", path);
        OsFs.replace(path, data)
    }

    fn create_dir_all(&self, path: &Path) -> io::Result<()> {
        self.note("mkdir", path);
        OsFs.create_dir_all(path)
    }

    fn symlink(&self, target: &Path, link: &Path) -> io::Result<()> {
        self.note("symlink", link);
        OsFs.symlink(target, link)
    }

    fn read_link(&self, path: &Path) -> io::Result<PathBuf> {
        self.note("readlink", path);
        OsFs.read_link(path)
    }

    fn read_dir(&self, path: &Path) -> io::Result<Vec<String>> {
        self.note("readdir", path);
        OsFs.read_dir(path)
    }

    fn kind(&self, path: &Path) -> io::Result<Option<FileKind>> {
        self.note("stat", path);
        OsFs.kind(path)
    }

    fn resolved_kind(&self, path: &Path) -> io::Result<Option<FileKind>> {
        self.note("stat", path);
        OsFs.resolved_kind(path)
    }

    fn mode(&self, path: &Path) -> io::Result<u32> {
        self.note("stat", path);
        OsFs.mode(path)
    }

    fn set_mode(&self, path: &Path, mode: u32) -> io::Result<()> {
        self.note("chmod", path);
        OsFs.set_mode(path, mode)
    }

    fn copy_file(&self, from: &Path, to: &Path) -> io::Result<()> {
        self.note("read", from);
        self.note("write", to);
        OsFs.copy_file(from, to)
    }

    fn remove_tree(&self, path: &Path) -> io::Result<()> {
        self.note("remove", path);
        OsFs.remove_tree(path)
    }
}
