//! Child launch with `fork`/`execve`.
//!
//! `std::process::Command` cannot stop a child between `fork` and `exec`
//! without deadlocking `spawn`, which the start barrier for concurrent jobs
//! needs. Everything the child touches is prepared before `fork`; the child
//! itself only issues raw syscalls.

use std::env;
use std::ffi::{CString, OsStr, OsString};
use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::os::unix::ffi::{OsStrExt, OsStringExt};
use std::path::{Path, PathBuf};

use crate::emulator::LaunchPolicy;
use crate::procfs::Pid;

/// Everything needed to start one child.
#[derive(Debug, Clone)]
pub struct LaunchSpec {
    pub argv: Vec<OsString>,
    /// Added to (or overriding) the supervisor's environment.
    pub env: Vec<(OsString, OsString)>,
    pub capture_stdout: bool,
    /// Stop the child right before `exec`; see [`Spawned::release_gate`].
    pub gated: bool,
    pub policy: LaunchPolicy,
}

impl LaunchSpec {
    pub fn new<I, S>(argv: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<OsString>,
    {
        LaunchSpec {
            argv: argv.into_iter().map(Into::into).collect(),
            env: Vec::new(),
            capture_stdout: false,
            gated: false,
            policy: LaunchPolicy::unrestricted(),
        }
    }
}

/// A launched child.
#[derive(Debug)]
pub struct Spawned {
    pub pid: Pid,
    /// Read end of the child's stdout, when captured (non-blocking).
    pub stdout: Option<OwnedFd>,
    exec_status: Option<OwnedFd>,
}

#[derive(Debug, thiserror::Error)]
pub enum SpawnError {
    #[error("empty command")]
    EmptyCommand,
    #[error("{0}: command not found")]
    NotFound(String),
    #[error("argument contains a NUL byte")]
    Nul,
    #[error("cannot start {cmd}: {source}")]
    Exec {
        cmd: String,
        #[source]
        source: io::Error,
    },
    #[error("applying launch policy: {0}")]
    Policy(io::Error),
    #[error("{0}")]
    Os(#[from] io::Error),
}

fn cstring(s: &OsStr) -> Result<CString, SpawnError> {
    CString::new(s.as_bytes()).map_err(|_| SpawnError::Nul)
}

/// Resolves `program` against `PATH` the way `execvp` would.
pub fn resolve_program(program: &OsStr) -> Option<PathBuf> {
    let p = Path::new(program);
    if program.as_bytes().contains(&b'/') {
        return Some(p.to_path_buf());
    }
    let path = env::var_os("PATH").unwrap_or_else(|| OsString::from("/usr/local/bin:/usr/bin:/bin"));
    env::split_paths(&path).map(|dir| dir.join(p)).find(|c| is_executable(c))
}

fn is_executable(p: &Path) -> bool {
    use std::os::unix::fs::PermissionsExt;
    std::fs::metadata(p).is_ok_and(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
}

fn pipe() -> io::Result<(OwnedFd, OwnedFd)> {
    let mut fds = [0; 2];
    // SAFETY: fds has room for two descriptors.
    if unsafe { libc::pipe2(fds.as_mut_ptr(), libc::O_CLOEXEC) } != 0 {
        return Err(io::Error::last_os_error());
    }
    // SAFETY: both descriptors were just created and are owned here.
    Ok(unsafe { (OwnedFd::from_raw_fd(fds[0]), OwnedFd::from_raw_fd(fds[1])) })
}

/// Reads the 8-byte exec status record; `None` means exec succeeded.
fn read_exec_status(fd: &OwnedFd) -> Option<(i32, i32)> {
    let mut buf = [0u8; 8];
    let mut got = 0;
    while got < buf.len() {
        // SAFETY: buf[got..] is writable.
        let n = unsafe { libc::read(fd.as_raw_fd(), buf[got..].as_mut_ptr().cast(), buf.len() - got) };
        if n < 0 && io::Error::last_os_error().raw_os_error() == Some(libc::EINTR) {
            continue;
        }
        if n <= 0 {
            break;
        }
        got += n as usize;
    }
    (got == 8).then(|| {
        let stage = i32::from_ne_bytes(buf[..4].try_into().unwrap());
        let errno = i32::from_ne_bytes(buf[4..].try_into().unwrap());
        (stage, errno)
    })
}

const STAGE_POLICY: i32 = 1;
const STAGE_EXEC: i32 = 2;

fn reap(pid: Pid) {
    let mut status = 0;
    // SAFETY: pid is our child.
    unsafe {
        while libc::waitpid(pid as libc::pid_t, &mut status, 0) < 0 {
            if io::Error::last_os_error().raw_os_error() != Some(libc::EINTR) {
                break;
            }
        }
    }
}

fn status_to_error(spec: &LaunchSpec, pid: Pid, stage: i32, errno: i32) -> SpawnError {
    reap(pid);
    let err = io::Error::from_raw_os_error(errno);
    if stage == STAGE_POLICY {
        SpawnError::Policy(err)
    } else {
        SpawnError::Exec {
            cmd: spec.argv[0].to_string_lossy().into_owned(),
            source: err,
        }
    }
}

/// Forks and execs `spec`. For gated launches the child is left stopped
/// before `exec` and the caller must call [`Spawned::release_gate`].
pub fn spawn(spec: &LaunchSpec) -> Result<Spawned, SpawnError> {
    let program = spec.argv.first().ok_or(SpawnError::EmptyCommand)?;
    let path = resolve_program(program).ok_or_else(|| SpawnError::NotFound(program.to_string_lossy().into_owned()))?;
    let path = cstring(path.as_os_str())?;
    let argv: Vec<CString> = spec.argv.iter().map(|a| cstring(a)).collect::<Result<_, _>>()?;
    let mut argv_ptrs: Vec<*const libc::c_char> = argv.iter().map(|a| a.as_ptr()).collect();
    argv_ptrs.push(std::ptr::null());

    let mut vars: Vec<(OsString, OsString)> = env::vars_os().collect();
    for (k, v) in &spec.env {
        vars.retain(|(ek, _)| ek != k);
        vars.push((k.clone(), v.clone()));
    }
    let envp: Vec<CString> = vars
        .into_iter()
        .map(|(k, v)| {
            let mut kv = k.into_vec();
            kv.push(b'=');
            kv.extend(v.into_vec());
            CString::new(kv).map_err(|_| SpawnError::Nul)
        })
        .collect::<Result<_, _>>()?;
    let mut envp_ptrs: Vec<*const libc::c_char> = envp.iter().map(|e| e.as_ptr()).collect();
    envp_ptrs.push(std::ptr::null());

    let (status_rd, status_wr) = pipe()?;
    let stdout_pipe = if spec.capture_stdout { Some(pipe()?) } else { None };
    let policy = spec.policy;
    let gated = spec.gated;
    let out_wr = stdout_pipe.as_ref().map(|(_, w)| w.as_raw_fd()).unwrap_or(-1);
    let status_wr_fd = status_wr.as_raw_fd();

    // SAFETY: the child branch only performs async-signal-safe syscalls on
    // memory prepared above and never returns.
    let pid = unsafe { libc::fork() };
    if pid < 0 {
        return Err(io::Error::last_os_error().into());
    }
    if pid == 0 {
        unsafe {
            let fail = |stage: i32| -> ! {
                let errno = *libc::__errno_location();
                let mut rec = [0u8; 8];
                rec[..4].copy_from_slice(&stage.to_ne_bytes());
                rec[4..].copy_from_slice(&errno.to_ne_bytes());
                libc::write(status_wr_fd, rec.as_ptr().cast(), rec.len());
                libc::_exit(127);
            };
            if out_wr >= 0 && libc::dup2(out_wr, 1) < 0 {
                fail(STAGE_EXEC);
            }
            if let Err(e) = policy.apply_to_current_thread() {
                *libc::__errno_location() = e;
                fail(STAGE_POLICY);
            }
            if gated {
                libc::raise(libc::SIGSTOP);
            }
            libc::execve(path.as_ptr(), argv_ptrs.as_ptr(), envp_ptrs.as_ptr());
            fail(STAGE_EXEC);
        }
    }

    let pid = pid as Pid;
    drop(status_wr);
    let stdout = match stdout_pipe {
        Some((rd, wr)) => {
            drop(wr);
            // SAFETY: rd is a valid descriptor we own.
            unsafe {
                let flags = libc::fcntl(rd.as_raw_fd(), libc::F_GETFL);
                libc::fcntl(rd.as_raw_fd(), libc::F_SETFL, flags | libc::O_NONBLOCK);
            }
            Some(rd)
        }
        None => None,
    };

    if gated {
        // Wait for the pre-exec stop (or an early failure).
        let mut status = 0;
        loop {
            // SAFETY: waiting on our own child.
            let rc = unsafe { libc::waitpid(pid as libc::pid_t, &mut status, libc::WUNTRACED) };
            if rc < 0 && io::Error::last_os_error().raw_os_error() == Some(libc::EINTR) {
                continue;
            }
            break;
        }
        if !libc::WIFSTOPPED(status) {
            // Already reaped by the waitpid above.
            let (stage, errno) = read_exec_status(&status_rd).unwrap_or((STAGE_EXEC, libc::ECHILD));
            let source = io::Error::from_raw_os_error(errno);
            return Err(if stage == STAGE_POLICY {
                SpawnError::Policy(source)
            } else {
                SpawnError::Exec {
                    cmd: spec.argv[0].to_string_lossy().into_owned(),
                    source,
                }
            });
        }
        return Ok(Spawned {
            pid,
            stdout,
            exec_status: Some(status_rd),
        });
    }

    if let Some((stage, errno)) = read_exec_status(&status_rd) {
        return Err(status_to_error(spec, pid, stage, errno));
    }
    Ok(Spawned {
        pid,
        stdout,
        exec_status: None,
    })
}

impl Spawned {
    /// Resumes a gated child and waits for its `exec` to succeed.
    pub fn release_gate(&mut self, spec: &LaunchSpec) -> Result<(), SpawnError> {
        let Some(fd) = self.exec_status.take() else {
            return Ok(());
        };
        // SAFETY: signalling our own stopped child.
        unsafe { libc::kill(self.pid as libc::pid_t, libc::SIGCONT) };
        match read_exec_status(&fd) {
            None => Ok(()),
            Some((stage, errno)) => Err(status_to_error(spec, self.pid, stage, errno)),
        }
    }
}
