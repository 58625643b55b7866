//! Local-memory reservations held by a helper process.
//!
//! The helper is forked from the caller, binds itself to the target node,
//! maps and `mlock`s the requested bytes (which faults every page in) and
//! then sleeps until killed. Keeping the locked pages in a separate process
//! leaves the workload's own RSS untouched, and `PR_SET_PDEATHSIG` makes the
//! kernel reclaim the reservation if the supervisor dies.

use std::io;

use log::warn;

use super::policy::{LaunchPolicy, MemPolicy};
use super::EmulatorError;
use crate::procfs::{NodeId, Pid};

/// Memory pinned on one node by a helper process.
#[derive(Debug)]
pub struct LockReservation {
    pub node: NodeId,
    pub bytes: u64,
    helper: Option<Pid>,
}

impl LockReservation {
    /// Locks `bytes` on `node`. Blocks until every page is resident.
    pub fn acquire(node: NodeId, bytes: u64) -> Result<LockReservation, EmulatorError> {
        if bytes == 0 {
            return Err(EmulatorError::Invalid("lock reservation of zero bytes".into()));
        }
        let policy = LaunchPolicy::new(&[], &MemPolicy::Bind(vec![node])).map_err(EmulatorError::os("node mask"))?;
        let len = usize::try_from(bytes).map_err(|_| EmulatorError::Invalid("lock size overflows usize".into()))?;

        let mut fds = [0; 2];
        // SAFETY: fds is a two-element array as pipe2 requires.
        if unsafe { libc::pipe2(fds.as_mut_ptr(), libc::O_CLOEXEC) } != 0 {
            return Err(EmulatorError::os("pipe")(io::Error::last_os_error()));
        }
        let (rd, wr) = (fds[0], fds[1]);
        let parent = unsafe { libc::getpid() };

        // SAFETY: the child only issues raw syscalls until it is killed.
        let pid = unsafe { libc::fork() };
        if pid < 0 {
            let err = io::Error::last_os_error();
            unsafe {
                libc::close(rd);
                libc::close(wr);
            }
            return Err(EmulatorError::os("fork")(err));
        }
        if pid == 0 {
            unsafe { lock_helper_main(wr, parent, &policy, len) }
        }

        unsafe { libc::close(wr) };
        let mut status = [0u8; 4];
        let n = read_full(rd, &mut status);
        unsafe { libc::close(rd) };
        let code = i32::from_ne_bytes(status);
        if n != 4 || code != 0 {
            kill_and_reap(pid as Pid);
            let err = if n == 4 {
                io::Error::from_raw_os_error(code)
            } else {
                io::Error::new(io::ErrorKind::UnexpectedEof, "lock helper died")
            };
            return Err(EmulatorError::Unsatisfiable(format!(
                "cannot lock {bytes} bytes on node {node}: {err}"
            )));
        }
        Ok(LockReservation {
            node,
            bytes,
            helper: Some(pid as Pid),
        })
    }

    pub fn helper_pid(&self) -> Option<Pid> {
        self.helper
    }

    pub fn is_held(&self) -> bool {
        self.helper.is_some()
    }

    /// Frees the reservation. Idempotent.
    pub fn release(&mut self) {
        if let Some(pid) = self.helper.take() {
            kill_and_reap(pid);
        }
    }
}

impl Drop for LockReservation {
    fn drop(&mut self) {
        self.release();
    }
}

fn read_full(fd: libc::c_int, buf: &mut [u8]) -> usize {
    let mut got = 0;
    while got < buf.len() {
        // SAFETY: buf[got..] is valid writable memory.
        let n = unsafe { libc::read(fd, buf[got..].as_mut_ptr().cast(), buf.len() - got) };
        if n < 0 {
            if io::Error::last_os_error().raw_os_error() == Some(libc::EINTR) {
                continue;
            }
            break;
        }
        if n == 0 {
            break;
        }
        got += n as usize;
    }
    got
}

fn kill_and_reap(pid: Pid) {
    // SAFETY: plain syscalls on a pid we forked.
    unsafe {
        if libc::kill(pid as libc::pid_t, libc::SIGKILL) != 0 {
            warn!("lock helper {pid}: kill failed: {}", io::Error::last_os_error());
        }
        let mut status = 0;
        while libc::waitpid(pid as libc::pid_t, &mut status, 0) < 0 {
            if io::Error::last_os_error().raw_os_error() != Some(libc::EINTR) {
                break;
            }
        }
    }
}

/// Body of the forked helper. Never returns.
unsafe fn lock_helper_main(wr: libc::c_int, parent: libc::pid_t, policy: &LaunchPolicy, len: usize) -> ! {
    let report = |code: i32| {
        let bytes = code.to_ne_bytes();
        libc::write(wr, bytes.as_ptr().cast(), bytes.len());
    };
    let errno = || *libc::__errno_location();

    libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL as libc::c_ulong);
    if libc::getppid() != parent {
        libc::_exit(1);
    }
    if let Err(e) = policy.apply_to_current_thread() {
        report(e);
        libc::_exit(1);
    }
    let addr = libc::mmap(
        std::ptr::null_mut(),
        len,
        libc::PROT_READ | libc::PROT_WRITE,
        libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
        -1,
        0,
    );
    if addr == libc::MAP_FAILED {
        report(errno());
        libc::_exit(1);
    }
    if libc::mlock(addr, len) != 0 {
        report(errno());
        libc::_exit(1);
    }
    report(0);
    libc::close(wr);
    loop {
        libc::pause();
    }
}
