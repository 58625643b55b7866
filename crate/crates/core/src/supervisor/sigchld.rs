//! `SIGCHLD` fan-out to event loops.
//!
//! A process-wide handler writes one byte into every wake pipe in a fixed
//! table. Each supervision loop checks out a slot, polls its read end, and
//! returns the slot when done. Pipes are created once and never closed, so
//! the handler can never write into a recycled descriptor.

use std::io;
use std::sync::atomic::{AtomicBool, AtomicI32, Ordering};
use std::sync::{Mutex, Once};

const SLOTS: usize = 64;

static WRITE_FDS: [AtomicI32; SLOTS] = [const { AtomicI32::new(-1) }; SLOTS];
static READ_FDS: [AtomicI32; SLOTS] = [const { AtomicI32::new(-1) }; SLOTS];
static IN_USE: [AtomicBool; SLOTS] = [const { AtomicBool::new(false) }; SLOTS];
static CREATE: Mutex<()> = Mutex::new(());
static INSTALL: Once = Once::new();

extern "C" fn on_sigchld(_: libc::c_int) {
    // SAFETY: errno save/restore and write(2) are async-signal-safe.
    unsafe {
        let saved = *libc::__errno_location();
        let byte = 1u8;
        for fd in &WRITE_FDS {
            let fd = fd.load(Ordering::Relaxed);
            if fd >= 0 {
                libc::write(fd, (&byte as *const u8).cast(), 1);
            }
        }
        *libc::__errno_location() = saved;
    }
}

fn install_handler() -> io::Result<()> {
    let mut result = Ok(());
    INSTALL.call_once(|| {
        // SAFETY: sigaction with a valid handler and an empty mask.
        unsafe {
            let mut sa: libc::sigaction = std::mem::zeroed();
            sa.sa_sigaction = on_sigchld as extern "C" fn(libc::c_int) as usize;
            sa.sa_flags = libc::SA_RESTART;
            libc::sigemptyset(&mut sa.sa_mask);
            if libc::sigaction(libc::SIGCHLD, &sa, std::ptr::null_mut()) != 0 {
                result = Err(io::Error::last_os_error());
            }
        }
    });
    result
}

/// A checked-out wake pipe; readable whenever a child changed state.
#[derive(Debug)]
pub struct ChildWake {
    slot: usize,
    read_fd: i32,
}

impl ChildWake {
    pub fn acquire() -> io::Result<ChildWake> {
        install_handler()?;
        let _guard = CREATE.lock().unwrap_or_else(|e| e.into_inner());
        for slot in 0..SLOTS {
            if IN_USE[slot].load(Ordering::Acquire) {
                continue;
            }
            if READ_FDS[slot].load(Ordering::Acquire) < 0 {
                let mut fds = [0; 2];
                // SAFETY: fds holds two descriptors.
                if unsafe { libc::pipe2(fds.as_mut_ptr(), libc::O_CLOEXEC | libc::O_NONBLOCK) } != 0 {
                    return Err(io::Error::last_os_error());
                }
                READ_FDS[slot].store(fds[0], Ordering::Release);
                WRITE_FDS[slot].store(fds[1], Ordering::Release);
            }
            IN_USE[slot].store(true, Ordering::Release);
            let wake = ChildWake {
                slot,
                read_fd: READ_FDS[slot].load(Ordering::Acquire),
            };
            wake.drain();
            return Ok(wake);
        }
        Err(io::Error::new(io::ErrorKind::Other, "too many concurrent supervision loops"))
    }

    pub fn fd(&self) -> i32 {
        self.read_fd
    }

    pub fn drain(&self) {
        let mut buf = [0u8; 256];
        // SAFETY: non-blocking read into a local buffer.
        while unsafe { libc::read(self.read_fd, buf.as_mut_ptr().cast(), buf.len()) } > 0 {}
    }
}

impl Drop for ChildWake {
    fn drop(&mut self) {
        self.drain();
        IN_USE[self.slot].store(false, Ordering::Release);
    }
}
