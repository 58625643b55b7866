//! Synthetic workloads with known memory behaviour, run as
//! `memcompose synth <kind>` under the supervisor.

use std::fs::OpenOptions;
use std::io::{self, Write};
use std::os::fd::AsRawFd;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::selfstop::region_boundary_if_supervised;

/// Page-aligned anonymous or file-backed mapping.
pub struct Region {
    ptr: *mut u8,
    len: usize,
}

// SAFETY: the region is plain memory owned by this value.
unsafe impl Send for Region {}

impl Region {
    /// Anonymous private memory; not faulted in until touched.
    pub fn anonymous(len: usize) -> io::Result<Region> {
        Self::map(len, libc::MAP_PRIVATE | libc::MAP_ANONYMOUS, -1)
    }

    /// Shared mapping of `path`, created and sized to `len` if needed.
    pub fn shared_file(path: &Path, len: usize) -> io::Result<Region> {
        let f = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(path)?;
        if f.metadata()?.len() < len as u64 {
            f.set_len(len as u64)?;
        }
        Self::map(len, libc::MAP_SHARED, f.as_raw_fd())
    }

    fn map(len: usize, flags: libc::c_int, fd: libc::c_int) -> io::Result<Region> {
        if len == 0 {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "empty region"));
        }
        // SAFETY: fresh mapping with no address hint.
        let ptr = unsafe { libc::mmap(std::ptr::null_mut(), len, libc::PROT_READ | libc::PROT_WRITE, flags, fd, 0) };
        if ptr == libc::MAP_FAILED {
            return Err(io::Error::last_os_error());
        }
        Ok(Region { ptr: ptr.cast(), len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn pages(&self) -> usize {
        self.len.div_ceil(page_size())
    }

    /// Writes one byte in each page of `[first, first + count)`.
    pub fn touch_pages(&mut self, first: usize, count: usize) {
        let ps = page_size();
        let end = (first + count).min(self.pages());
        for p in first..end {
            // SAFETY: p * ps < len.
            unsafe {
                let q = self.ptr.add(p * ps);
                q.write_volatile(q.read_volatile().wrapping_add(1));
            }
        }
    }

    pub fn touch_all(&mut self) {
        self.touch_pages(0, self.pages());
    }
}

impl Drop for Region {
    fn drop(&mut self) {
        // SAFETY: ptr/len came from mmap.
        unsafe { libc::munmap(self.ptr.cast(), self.len) };
    }
}

pub fn page_size() -> usize {
    // SAFETY: sysconf has no preconditions.
    unsafe { libc::sysconf(libc::_SC_PAGESIZE) as usize }
}

/// Touches `rate` bytes of distinct pages per second, cycling through a
/// `footprint`-byte region in 1/50 s slices, for `duration`.
pub fn touch_rate(footprint: usize, rate: u64, duration: Duration) -> io::Result<()> {
    let mut r = Region::anonymous(footprint)?;
    r.touch_all();
    const SLICES_PER_SEC: u64 = 50;
    let pages_per_slice = ((rate / SLICES_PER_SEC) as usize / page_size()).max(1);
    let slice = Duration::from_secs(1) / SLICES_PER_SEC as u32;
    let start = Instant::now();
    let mut next_page = 0;
    let mut k = 0u32;
    while start.elapsed() < duration {
        let mut left = pages_per_slice;
        while left > 0 {
            let n = left.min(r.pages() - next_page);
            r.touch_pages(next_page, n);
            next_page = (next_page + n) % r.pages();
            left -= n;
        }
        k += 1;
        if let Some(wait) = (start + slice * k).checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
    }
    Ok(())
}

/// Grows the footprint by `step` bytes every `interval`, `steps` times, then
/// holds it for one more interval.
pub fn grow(step: usize, steps: usize, interval: Duration) -> io::Result<()> {
    let mut held = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut r = Region::anonymous(step)?;
        r.touch_all();
        held.push(r);
        std::thread::sleep(interval);
    }
    std::thread::sleep(interval);
    Ok(())
}

/// Initialise a `footprint`-byte region, then touch the first `fraction` of
/// its pages for `compute`, bracketing the compute phase with self-stops.
pub fn phases(footprint: usize, fraction: f64, compute: Duration) -> io::Result<()> {
    let mut r = Region::anonymous(footprint)?;
    r.touch_all();
    region_boundary_if_supervised();
    let hot = (r.pages() as f64 * fraction.clamp(0.0, 1.0)).round() as usize;
    let start = Instant::now();
    loop {
        r.touch_pages(0, hot);
        if start.elapsed() >= compute {
            break;
        }
        std::thread::sleep(Duration::from_millis(20).min(compute));
    }
    region_boundary_if_supervised();
    Ok(())
}

/// `count` steps; each touches a fresh `chunk`-byte region, prints
/// `STEP <k>` and holds for `hold`.
pub fn steps(count: usize, chunk: usize, hold: Duration) -> io::Result<()> {
    let mut held = Vec::with_capacity(count);
    let stdout = io::stdout();
    for k in 1..=count {
        let mut r = Region::anonymous(chunk)?;
        r.touch_all();
        held.push(r);
        let mut out = stdout.lock();
        writeln!(out, "STEP {k}")?;
        out.flush()?;
        drop(out);
        std::thread::sleep(hold);
    }
    Ok(())
}

/// Fixed amount of integer work with a negligible memory footprint.
pub fn spin(iterations: u64) -> u64 {
    let mut x = 0x9E37_79B9_7F4A_7C15u64;
    for _ in 0..iterations {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
    }
    std::hint::black_box(x)
}

/// Triad-like streaming over three arrays totalling `bytes`, `passes` times.
/// Returns elapsed seconds.
pub fn stream(bytes: usize, passes: usize) -> f64 {
    let n = (bytes / 24).max(1);
    let mut a = vec![0.0f64; n];
    let b = vec![1.0f64; n];
    let c = vec![2.0f64; n];
    let t0 = Instant::now();
    for _ in 0..passes {
        for i in 0..n {
            a[i] = b[i] + 3.0 * c[i];
        }
        std::hint::black_box(&mut a);
    }
    t0.elapsed().as_secs_f64()
}

/// Maps `path` shared, touches every page, holds for `hold`.
pub fn shared(path: &Path, bytes: usize, hold: Duration) -> io::Result<()> {
    let mut r = Region::shared_file(path, bytes)?;
    r.touch_all();
    std::thread::sleep(hold);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procfs::read_mem_stats;

    fn rss_kib() -> u64 {
        read_mem_stats(std::process::id()).unwrap().rss_kib
    }

    #[test]
    fn region_faults_on_touch() {
        let mut r = Region::anonymous(64 << 20).unwrap();
        let before = rss_kib();
        r.touch_all();
        let after = rss_kib();
        assert!(after >= before + 60 * 1024, "{before} -> {after}");
        assert_eq!(r.pages(), (64 << 20) / page_size());
    }

    #[test]
    fn partial_touch_is_bounded() {
        let mut r = Region::anonymous(8 * page_size()).unwrap();
        r.touch_pages(6, 100);
        assert!(Region::anonymous(0).is_err());
    }

    #[test]
    fn spin_is_deterministic() {
        assert_eq!(spin(1000), spin(1000));
        assert_ne!(spin(1000), spin(1001));
    }

    #[test]
    fn stream_runs() {
        assert!(stream(1 << 20, 2) >= 0.0);
    }

    #[test]
    fn shared_file_is_sized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg");
        shared(&path, 1 << 20, Duration::ZERO).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 1 << 20);
    }

    #[test]
    fn phases_without_supervisor_do_not_stop() {
        if std::env::var_os(crate::selfstop::SUPERVISED_ENV).is_none() {
            phases(4 << 20, 0.5, Duration::from_millis(10)).unwrap();
        }
    }
}
