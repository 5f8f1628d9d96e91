//! Thin wrapper over POSIX named shared memory.
//!
//! One segment per PE, named `/<base>-<jobid>-<rank>`. The creator sizes it
//! with `ftruncate` and maps it read-write; attachers map the size reported
//! by `fstat`. Mappings are page-aligned, which satisfies every alignment
//! the layouts above this module need.

use std::ffi::CString;

use crate::error::PoshError;
use crate::Result;

/// A mapped shared-memory segment. Dropping unmaps; unlinking is explicit
/// because only the owner removes the name (attachers must not).
#[derive(Debug)]
pub(crate) struct ShmSegment {
    name: String,
    base: *mut u8,
    len: usize,
}

// The mapping is shared between processes by design; all concurrent access
// goes through atomics or raw copies above this layer.
unsafe impl Send for ShmSegment {}
unsafe impl Sync for ShmSegment {}

fn cname(name: &str) -> Result<CString> {
    CString::new(name).map_err(|_| PoshError::BadConfig(format!("segment name {name:?} contains NUL")))
}

impl ShmSegment {
    /// Creates the named segment exclusively, sizes it, and maps it.
    /// Fails with `Os` carrying `EEXIST` if the name is taken.
    pub(crate) fn create(name: &str, len: usize) -> Result<Self> {
        let c = cname(name)?;
        let fd = unsafe {
            libc::shm_open(c.as_ptr(), libc::O_CREAT | libc::O_EXCL | libc::O_RDWR, 0o600)
        };
        if fd < 0 {
            return Err(PoshError::os("shm_open(O_CREAT|O_EXCL)"));
        }
        let r = unsafe { libc::ftruncate(fd, len as libc::off_t) };
        if r != 0 {
            let e = PoshError::os("ftruncate");
            unsafe {
                libc::close(fd);
                libc::shm_unlink(c.as_ptr());
            }
            return Err(e);
        }
        Self::map(name, fd, len)
    }

    /// Opens and maps an existing segment. `ENOENT` surfaces as `Os`.
    pub(crate) fn open(name: &str) -> Result<Self> {
        let c = cname(name)?;
        let fd = unsafe { libc::shm_open(c.as_ptr(), libc::O_RDWR, 0) };
        if fd < 0 {
            return Err(PoshError::os("shm_open"));
        }
        let mut st: libc::stat = unsafe { std::mem::zeroed() };
        if unsafe { libc::fstat(fd, &mut st) } != 0 {
            let e = PoshError::os("fstat");
            unsafe { libc::close(fd) };
            return Err(e);
        }
        if st.st_size == 0 {
            // Name already published but not yet sized by its creator.
            // Report it as absent so attach loops retry instead of
            // mapping zero bytes.
            unsafe { libc::close(fd) };
            return Err(PoshError::Os {
                call: "shm_open",
                errno: std::io::Error::from_raw_os_error(libc::ENOENT),
            });
        }
        Self::map(name, fd, st.st_size as usize)
    }

    fn map(name: &str, fd: libc::c_int, len: usize) -> Result<Self> {
        let base = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_SHARED,
                fd,
                0,
            )
        };
        unsafe { libc::close(fd) };
        if base == libc::MAP_FAILED {
            return Err(PoshError::os("mmap"));
        }
        Ok(ShmSegment { name: name.to_string(), base: base as *mut u8, len })
    }

    pub(crate) fn base(&self) -> *mut u8 {
        self.base
    }

    pub(crate) fn len(&self) -> usize {
        self.len
    }

    /// Removes the name from the namespace. The mapping stays valid until
    /// every process unmaps. `ENOENT` is ignored (idempotent teardown).
    pub(crate) fn unlink(&self) {
        unlink_name(&self.name);
    }
}

impl Drop for ShmSegment {
    fn drop(&mut self) {
        unsafe {
            libc::munmap(self.base as *mut libc::c_void, self.len);
        }
    }
}

/// Unlinks a segment by name, ignoring ENOENT.
pub(crate) fn unlink_name(name: &str) {
    if let Ok(c) = cname(name) {
        unsafe {
            libc::shm_unlink(c.as_ptr());
        }
    }
}

/// True if the name currently exists in the shm namespace.
pub(crate) fn name_exists(name: &str) -> bool {
    let Ok(c) = cname(name) else { return false };
    let fd = unsafe { libc::shm_open(c.as_ptr(), libc::O_RDONLY, 0) };
    if fd >= 0 {
        unsafe { libc::close(fd) };
        true
    } else {
        false
    }
}

/// True if `pid` refers to a live process we may signal (or one that exists
/// but belongs to someone else, which for staleness purposes counts as live).
pub(crate) fn pid_alive(pid: i32) -> bool {
    if pid <= 0 {
        return false;
    }
    let r = unsafe { libc::kill(pid, 0) };
    r == 0 || std::io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

/// True when `err` wraps the given errno.
pub(crate) fn is_errno(err: &PoshError, code: i32) -> bool {
    matches!(err, PoshError::Os { errno, .. } if errno.raw_os_error() == Some(code))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unique(tag: &str) -> String {
        format!("/posh-test-{}-{}", tag, std::process::id())
    }

    #[test]
    fn create_map_unlink() {
        let name = unique("cmu");
        let seg = ShmSegment::create(&name, 8192).unwrap();
        assert_eq!(seg.len(), 8192);
        unsafe {
            seg.base().write(0xAB);
            assert_eq!(seg.base().read(), 0xAB);
        }
        assert!(name_exists(&name));
        seg.unlink();
        assert!(!name_exists(&name));
    }

    #[test]
    fn exclusive_create_collides() {
        let name = unique("excl");
        let seg = ShmSegment::create(&name, 4096).unwrap();
        let err = ShmSegment::create(&name, 4096).unwrap_err();
        assert!(is_errno(&err, libc::EEXIST), "expected EEXIST, got {err}");
        seg.unlink();
    }

    #[test]
    fn open_sees_creator_writes() {
        let name = unique("open");
        let seg = ShmSegment::create(&name, 4096).unwrap();
        unsafe { seg.base().add(100).write(42) };
        let other = ShmSegment::open(&name).unwrap();
        assert_eq!(other.len(), 4096);
        assert_eq!(unsafe { other.base().add(100).read() }, 42);
        seg.unlink();
    }

    #[test]
    fn open_missing_is_enoent() {
        let err = ShmSegment::open("/posh-test-definitely-missing").unwrap_err();
        assert!(is_errno(&err, libc::ENOENT));
    }

    #[test]
    fn pid_liveness() {
        assert!(pid_alive(std::process::id() as i32));
        assert!(!pid_alive(0));
        assert!(!pid_alive(-1));
    }
}
