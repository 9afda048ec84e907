//! Preloadable coverage runtime. At load time it finds every writable
//! segment of the process that starts with the coverage magic, then dumps
//! those segments at exit and whenever the configured signal arrives.
//!
//! Environment: `BCOV_OUT` is the dump directory (default: the working
//! directory at startup), `BCOV_SIG` the dump signal (default SIGUSR1).
//! Dump files are named `<dir>/<module>.<pid>.<seq>.bcov`.
//!
//! Nothing is allocated after initialization; the dump path only uses
//! getpid, open, write and close on static buffers.

#![allow(clippy::missing_safety_doc)]

use std::cell::UnsafeCell;
use std::ffi::{c_char, c_int, c_void, CStr};
use std::sync::atomic::{AtomicBool, AtomicI32, AtomicU32, AtomicUsize, Ordering};

const MAGIC: &[u8; 8] = b"BCOVDATA";
const HEADER_SIZE: usize = 28;
const MAX_SEGMENTS: usize = 64;
const PATH_CAP: usize = 4096;
/// Room after the prefix for "<pid>.<seq>.bcov\0".
const SUFFIX_CAP: usize = 40;

#[derive(Clone, Copy)]
struct Segment {
    base: *const u8,
    len: usize,
    /// "<dir>/<module>." without terminator.
    prefix: [u8; PATH_CAP],
    prefix_len: usize,
}

const EMPTY: Segment = Segment {
    base: std::ptr::null(),
    len: 0,
    prefix: [0; PATH_CAP],
    prefix_len: 0,
};

struct Registry {
    segments: UnsafeCell<[Segment; MAX_SEGMENTS]>,
    path: UnsafeCell<[u8; PATH_CAP + SUFFIX_CAP]>,
}

// Written only during single-threaded initialization; the path buffer is
// guarded by `BUSY`.
unsafe impl Sync for Registry {}

static REGISTRY: Registry = Registry {
    segments: UnsafeCell::new([EMPTY; MAX_SEGMENTS]),
    path: UnsafeCell::new([0; PATH_CAP + SUFFIX_CAP]),
};
static COUNT: AtomicUsize = AtomicUsize::new(0);
static BUSY: AtomicBool = AtomicBool::new(false);
static SEQ: AtomicU32 = AtomicU32::new(0);
static SEQ_PID: AtomicI32 = AtomicI32::new(0);

#[used]
#[link_section = ".init_array"]
static INIT: extern "C" fn() = bcov_rt_init;

struct Scan {
    dir: [u8; PATH_CAP],
    dir_len: usize,
}

fn append(buf: &mut [u8], len: &mut usize, bytes: &[u8]) -> bool {
    if *len + bytes.len() > buf.len() {
        return false;
    }
    buf[*len..*len + bytes.len()].copy_from_slice(bytes);
    *len += bytes.len();
    true
}

fn basename(path: &[u8]) -> &[u8] {
    match path.iter().rposition(|&c| c == b'/') {
        Some(i) => &path[i + 1..],
        None => path,
    }
}

fn write_all(fd: c_int, mut bytes: &[u8]) -> bool {
    while !bytes.is_empty() {
        let n = unsafe { libc::write(fd, bytes.as_ptr() as *const c_void, bytes.len()) };
        if n < 0 {
            if unsafe { *libc::__errno_location() } == libc::EINTR {
                continue;
            }
            return false;
        }
        bytes = &bytes[n as usize..];
    }
    true
}

fn log(parts: &[&[u8]]) {
    for p in parts {
        write_all(2, p);
    }
}

/// Decimal digits of `v` into `buf`, returning the used tail.
fn decimal(mut v: u64, buf: &mut [u8; 20]) -> &[u8] {
    let mut i = buf.len();
    loop {
        i -= 1;
        buf[i] = b'0' + (v % 10) as u8;
        v /= 10;
        if v == 0 {
            return &buf[i..];
        }
    }
}

unsafe fn register(scan: &Scan, name: &[u8], base: *const u8, mem_size: usize) {
    if mem_size < HEADER_SIZE {
        return;
    }
    let header = std::slice::from_raw_parts(base, HEADER_SIZE);
    if &header[..8] != MAGIC {
        return;
    }
    let probes = u32::from_le_bytes([header[16], header[17], header[18], header[19]]) as usize;
    let len = HEADER_SIZE + probes;
    if len > mem_size {
        log(&[b"bcov-rt: coverage segment larger than its mapping in ", name, b"\n"]);
        return;
    }
    let n = COUNT.load(Ordering::Relaxed);
    if n == MAX_SEGMENTS {
        log(&[b"bcov-rt: too many coverage segments, ignoring ", name, b"\n"]);
        return;
    }
    let seg = &mut (*REGISTRY.segments.get())[n];
    seg.base = base;
    seg.len = len;
    seg.prefix_len = 0;
    let ok = append(&mut seg.prefix, &mut seg.prefix_len, &scan.dir[..scan.dir_len])
        && append(&mut seg.prefix, &mut seg.prefix_len, b"/")
        && append(&mut seg.prefix, &mut seg.prefix_len, basename(name))
        && append(&mut seg.prefix, &mut seg.prefix_len, b".");
    if !ok {
        log(&[b"bcov-rt: dump path too long for ", name, b"\n"]);
        return;
    }
    COUNT.store(n + 1, Ordering::Release);
}

unsafe extern "C" fn visit(info: *mut libc::dl_phdr_info, _size: usize, data: *mut c_void) -> c_int {
    let scan = &*(data as *const Scan);
    let info = &*info;
    let mut exe = [0u8; PATH_CAP];
    let name: &[u8] = if info.dlpi_name.is_null() || *info.dlpi_name == 0 {
        let n = libc::readlink(c"/proc/self/exe".as_ptr(), exe.as_mut_ptr() as *mut c_char, exe.len());
        if n <= 0 {
            b"a.out"
        } else {
            &exe[..n as usize]
        }
    } else {
        CStr::from_ptr(info.dlpi_name).to_bytes()
    };
    for i in 0..info.dlpi_phnum as usize {
        let ph = &*info.dlpi_phdr.add(i);
        if ph.p_type == libc::PT_LOAD && ph.p_flags & libc::PF_W != 0 {
            let base = (info.dlpi_addr as usize).wrapping_add(ph.p_vaddr as usize) as *const u8;
            register(scan, name, base, ph.p_memsz as usize);
        }
    }
    0
}

fn env(name: &CStr) -> Option<&'static [u8]> {
    let p = unsafe { libc::getenv(name.as_ptr()) };
    if p.is_null() {
        None
    } else {
        Some(unsafe { CStr::from_ptr(p) }.to_bytes())
    }
}

fn parse_signal(s: &[u8]) -> Option<c_int> {
    let s = s.strip_prefix(b"SIG").unwrap_or(s);
    match s {
        b"USR1" => Some(libc::SIGUSR1),
        b"USR2" => Some(libc::SIGUSR2),
        b"HUP" => Some(libc::SIGHUP),
        b"INT" => Some(libc::SIGINT),
        b"TERM" => Some(libc::SIGTERM),
        _ => std::str::from_utf8(s)
            .ok()?
            .parse::<c_int>()
            .ok()
            .filter(|&n| n > 0 && n < 65),
    }
}

extern "C" fn bcov_rt_init() {
    let mut scan = Scan {
        dir: [0; PATH_CAP],
        dir_len: 0,
    };
    match env(c"BCOV_OUT").filter(|d| !d.is_empty()) {
        Some(d) => {
            let d = if d.len() > 1 { d.strip_suffix(b"/").unwrap_or(d) } else { d };
            if !append(&mut scan.dir, &mut scan.dir_len, d) {
                log(&[b"bcov-rt: BCOV_OUT is too long\n"]);
                return;
            }
        }
        None => {
            if unsafe { libc::getcwd(scan.dir.as_mut_ptr() as *mut c_char, PATH_CAP) }.is_null() {
                scan.dir[0] = b'.';
                scan.dir_len = 1;
            } else {
                scan.dir_len = scan.dir.iter().position(|&c| c == 0).unwrap_or(0);
            }
        }
    }
    unsafe {
        libc::dl_iterate_phdr(Some(visit), &mut scan as *mut Scan as *mut c_void);
    }
    if COUNT.load(Ordering::Acquire) == 0 {
        return;
    }
    let signal = match env(c"BCOV_SIG") {
        Some(s) => match parse_signal(s) {
            Some(n) => n,
            None => {
                log(&[b"bcov-rt: unknown BCOV_SIG, using SIGUSR1\n"]);
                libc::SIGUSR1
            }
        },
        None => libc::SIGUSR1,
    };
    unsafe {
        let mut sa: libc::sigaction = std::mem::zeroed();
        sa.sa_sigaction = on_signal as extern "C" fn(c_int) as usize;
        sa.sa_flags = libc::SA_RESTART;
        libc::sigemptyset(&mut sa.sa_mask);
        if libc::sigaction(signal, &sa, std::ptr::null_mut()) != 0 {
            log(&[b"bcov-rt: cannot install dump signal handler\n"]);
        }
        libc::atexit(on_exit);
    }
}

extern "C" fn on_signal(_sig: c_int) {
    dump_all();
}

extern "C" fn on_exit() {
    dump_all();
}

fn next_seq() -> u32 {
    let pid = unsafe { libc::getpid() };
    if SEQ_PID.swap(pid, Ordering::AcqRel) != pid {
        // First dump in this process, including forked children.
        SEQ.store(0, Ordering::Release);
    }
    SEQ.fetch_add(1, Ordering::AcqRel)
}

/// Writes one dump file per registered segment; every segment of one
/// event shares the sequence number.
pub fn dump_all() {
    if BUSY.swap(true, Ordering::Acquire) {
        return;
    }
    let errno = unsafe { *libc::__errno_location() };
    let seq = next_seq();
    let pid = unsafe { libc::getpid() } as u64;
    let n = COUNT.load(Ordering::Acquire);
    for i in 0..n {
        let seg = unsafe { &(*REGISTRY.segments.get())[i] };
        let path = unsafe { &mut *REGISTRY.path.get() };
        let mut len = 0;
        let mut digits = [0u8; 20];
        append(path, &mut len, &seg.prefix[..seg.prefix_len]);
        append(path, &mut len, decimal(pid, &mut digits));
        append(path, &mut len, b".");
        append(path, &mut len, decimal(seq as u64, &mut digits));
        append(path, &mut len, b".bcov\0");
        let fd = unsafe {
            libc::open(
                path.as_ptr() as *const c_char,
                libc::O_WRONLY | libc::O_CREAT | libc::O_TRUNC | libc::O_CLOEXEC,
                0o644,
            )
        };
        let bytes = unsafe { std::slice::from_raw_parts(seg.base, seg.len) };
        let ok = fd >= 0 && write_all(fd, bytes);
        if fd >= 0 {
            unsafe { libc::close(fd) };
        }
        if !ok {
            log(&[b"bcov-rt: cannot write ", &path[..len - 1], b"\n"]);
        }
    }
    unsafe { *libc::__errno_location() = errno };
    BUSY.store(false, Ordering::Release);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimal_formats() {
        let mut b = [0u8; 20];
        assert_eq!(decimal(0, &mut b), b"0");
        assert_eq!(decimal(4711, &mut b), b"4711");
        assert_eq!(decimal(u64::MAX, &mut b), b"18446744073709551615");
    }

    #[test]
    fn signal_names() {
        assert_eq!(parse_signal(b"SIGUSR2"), Some(libc::SIGUSR2));
        assert_eq!(parse_signal(b"USR1"), Some(libc::SIGUSR1));
        assert_eq!(parse_signal(b"12"), Some(12));
        assert_eq!(parse_signal(b"nope"), None);
        assert_eq!(parse_signal(b"99"), None);
    }

    #[test]
    fn basename_strips_dirs() {
        assert_eq!(basename(b"/a/b/c.so"), b"c.so");
        assert_eq!(basename(b"x"), b"x");
    }
}
