//! Block devices the profiler and read engine run against.
//!
//! [`FileDevice`] reads a real file, optionally with `O_DIRECT`.
//! [`SyntheticDevice`] is an in-process shim whose read cost follows the
//! affine model `overhead + size / bandwidth`, accounted on a virtual clock
//! so timing is exact and independent of the host.

use std::fs::File;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sector alignment used for direct access.
pub const DIRECT_ALIGN: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccessMode {
    Direct,
    Buffered,
    Synthetic,
}

pub trait ReadDevice: Sync {
    fn len(&self) -> u64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn mode(&self) -> AccessMode;

    /// Required alignment of offsets, lengths and buffers; 1 if none.
    fn alignment(&self) -> u64;

    /// Reads into `buf` starting at `offset`. May return fewer bytes only at
    /// end of device.
    fn read_at(&self, offset: u64, buf: &mut [u8]) -> std::io::Result<usize>;

    /// Clock used to time batches, in µs.
    fn now_us(&self) -> f64;
}

/// Heap buffer whose usable slice starts on an `align` boundary.
struct AlignedBuf {
    storage: Vec<u8>,
    offset: usize,
    len: usize,
}

impl AlignedBuf {
    fn new(len: usize, align: usize) -> Self {
        let storage = vec![0u8; len + align];
        let misalign = storage.as_ptr() as usize % align;
        let offset = if misalign == 0 { 0 } else { align - misalign };
        Self {
            storage,
            offset,
            len,
        }
    }

    fn as_mut_slice(&mut self) -> &mut [u8] {
        &mut self.storage[self.offset..self.offset + self.len]
    }

    fn as_slice(&self) -> &[u8] {
        &self.storage[self.offset..self.offset + self.len]
    }
}

/// Outward alignment of `[offset, offset + len)`; returns padded offset and length.
pub fn padded_span(offset: u64, len: u64, align: u64) -> (u64, u64) {
    let start = offset / align * align;
    let end = (offset + len).div_ceil(align) * align;
    (start, end - start)
}

/// Reads exactly `len` bytes at `offset`, padding the request to the
/// device's alignment and returning only the requested bytes.
pub fn aligned_read(device: &dyn ReadDevice, offset: u64, len: u64) -> std::io::Result<Vec<u8>> {
    let align = device.alignment().max(1);
    let (p_off, p_len) = padded_span(offset, len, align);
    let mut buf = AlignedBuf::new(p_len as usize, align as usize);
    let need = (offset + len - p_off) as usize;
    let mut got = 0usize;
    while got < need {
        let n = device.read_at(p_off + got as u64, &mut buf.as_mut_slice()[got..])?;
        if n == 0 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("short read: {got} of {need} bytes at offset {p_off}"),
            ));
        }
        got += n;
    }
    let skip = (offset - p_off) as usize;
    Ok(buf.as_slice()[skip..skip + len as usize].to_vec())
}

/// One contiguous read request in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadRequest {
    pub offset: u64,
    pub len: u64,
}

/// Outcome of a batch: bytes per request (if kept) and the span from first
/// submission to last completion.
pub struct BatchOutcome {
    pub buffers: Vec<Vec<u8>>,
    pub elapsed_us: f64,
}

/// Issues `requests` from a pool of `workers` threads pulling from a shared
/// queue. On failure returns the index of the first failing request.
pub fn run_batch(
    device: &dyn ReadDevice,
    requests: &[ReadRequest],
    workers: usize,
    keep_bytes: bool,
) -> std::result::Result<BatchOutcome, (usize, std::io::Error)> {
    let workers = workers.max(1).min(requests.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Vec<u8>>>> = requests.iter().map(|_| Mutex::new(None)).collect();
    let failure: Mutex<Option<(usize, std::io::Error)>> = Mutex::new(None);

    let t0 = device.now_us();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= requests.len() {
                    break;
                }
                let r = requests[i];
                match aligned_read(device, r.offset, r.len) {
                    Ok(bytes) => {
                        if keep_bytes {
                            *slots[i].lock().unwrap() = Some(bytes);
                        }
                    }
                    Err(e) => {
                        let mut f = failure.lock().unwrap();
                        if f.as_ref().is_none_or(|(j, _)| i < *j) {
                            *f = Some((i, e));
                        }
                        // drain the queue so the other workers stop
                        next.store(requests.len(), Ordering::Relaxed);
                        break;
                    }
                }
            });
        }
    });
    let elapsed_us = device.now_us() - t0;

    if let Some(f) = failure.into_inner().unwrap() {
        return Err(f);
    }
    let buffers = if keep_bytes {
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().unwrap_or_default())
            .collect()
    } else {
        Vec::new()
    };
    Ok(BatchOutcome {
        buffers,
        elapsed_us,
    })
}

/// A file opened for profiling or weight reads.
pub struct FileDevice {
    file: File,
    path: PathBuf,
    len: u64,
    direct: bool,
    epoch: Instant,
}

impl FileDevice {
    pub fn open(path: &Path, direct: bool) -> Result<Self> {
        let meta = std::fs::metadata(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        let mut opts = std::fs::OpenOptions::new();
        opts.read(true);
        if direct {
            use std::os::unix::fs::OpenOptionsExt;
            opts.custom_flags(libc::O_DIRECT);
        }
        let file = opts.open(path).map_err(|source| {
            if direct && source.raw_os_error() == Some(libc::EINVAL) {
                Error::DirectUnsupported {
                    path: path.to_path_buf(),
                    source,
                }
            } else {
                Error::File {
                    path: path.to_path_buf(),
                    source,
                }
            }
        })?;
        let dev = Self {
            file,
            path: path.to_path_buf(),
            len: meta.len(),
            direct,
            epoch: Instant::now(),
        };
        if direct && dev.len >= DIRECT_ALIGN {
            // some filesystems accept O_DIRECT at open and reject it on read
            aligned_read(&dev, 0, DIRECT_ALIGN).map_err(|source| Error::DirectUnsupported {
                path: path.to_path_buf(),
                source,
            })?;
        }
        Ok(dev)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl ReadDevice for FileDevice {
    fn len(&self) -> u64 {
        self.len
    }

    fn mode(&self) -> AccessMode {
        if self.direct {
            AccessMode::Direct
        } else {
            AccessMode::Buffered
        }
    }

    fn alignment(&self) -> u64 {
        if self.direct {
            DIRECT_ALIGN
        } else {
            1
        }
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> std::io::Result<usize> {
        self.file.read_at(buf, offset)
    }

    fn now_us(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64() * 1e6
    }
}

/// Shim parameters: per-request overhead, streaming bandwidth and a
/// multiplicative uniform noise of ±`noise_rel`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShimParams {
    pub overhead_us: f64,
    pub bandwidth_bytes_per_us: f64,
    pub noise_rel: f64,
    pub seed: u64,
}

impl ShimParams {
    pub fn service_us(&self, len: u64) -> f64 {
        self.overhead_us + len as f64 / self.bandwidth_bytes_per_us
    }
}

/// In-process device whose requests serialize on one virtual service queue,
/// so a batch's elapsed time is the sum of its request service times.
pub struct SyntheticDevice {
    params: ShimParams,
    len: u64,
    data: Option<Arc<Vec<u8>>>,
    state: Mutex<(f64, ChaCha8Rng)>,
}

impl SyntheticDevice {
    /// Device of `len` bytes whose byte at offset `o` is `o % 251`.
    pub fn new(params: ShimParams, len: u64) -> Result<Self> {
        if !(params.overhead_us >= 0.0
            && params.bandwidth_bytes_per_us > 0.0
            && (0.0..1.0).contains(&params.noise_rel))
        {
            return Err(Error::Input(format!("invalid shim params {params:?}")));
        }
        Ok(Self {
            state: Mutex::new((0.0, ChaCha8Rng::seed_from_u64(params.seed))),
            params,
            len,
            data: None,
        })
    }

    /// Device backed by the given bytes.
    pub fn with_data(params: ShimParams, data: Vec<u8>) -> Result<Self> {
        let mut dev = Self::new(params, data.len() as u64)?;
        dev.data = Some(Arc::new(data));
        Ok(dev)
    }

    pub fn params(&self) -> &ShimParams {
        &self.params
    }
}

impl ReadDevice for SyntheticDevice {
    fn len(&self) -> u64 {
        self.len
    }

    fn mode(&self) -> AccessMode {
        AccessMode::Synthetic
    }

    fn alignment(&self) -> u64 {
        1
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> std::io::Result<usize> {
        if offset >= self.len {
            return Ok(0);
        }
        let n = (buf.len() as u64).min(self.len - offset) as usize;
        match &self.data {
            Some(data) => buf[..n].copy_from_slice(&data[offset as usize..offset as usize + n]),
            None => {
                for (k, b) in buf[..n].iter_mut().enumerate() {
                    *b = ((offset + k as u64) % 251) as u8;
                }
            }
        }
        let mut st = self.state.lock().unwrap();
        let jitter = if self.params.noise_rel > 0.0 {
            1.0 + st
                .1
                .random_range(-self.params.noise_rel..self.params.noise_rel)
        } else {
            1.0
        };
        st.0 += self.params.service_us(n as u64) * jitter;
        Ok(n)
    }

    fn now_us(&self) -> f64 {
        self.state.lock().unwrap().0
    }
}
