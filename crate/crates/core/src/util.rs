//! Small helpers: float rounding for serialization, seed derivation, clocks,
//! atomic file writes.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Rounds to 6 decimal places, the precision used in every emitted file.
pub fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// SplitMix64 finalizer; derives independent child seeds from a parent.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Wall clock, or a frozen one for reproducible artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Clock {
    #[default]
    System,
    /// Fixed unix time in seconds; stopwatches read zero.
    Fixed(i64),
}

impl Clock {
    pub fn unix_seconds(&self) -> i64 {
        match self {
            Clock::System => std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs() as i64)
                .unwrap_or(0),
            Clock::Fixed(t) => *t,
        }
    }

    /// RFC 3339 UTC timestamp, second precision.
    pub fn timestamp(&self) -> String {
        chrono::DateTime::from_timestamp(self.unix_seconds(), 0)
            .unwrap_or_default()
            .format("%Y-%m-%dT%H:%M:%SZ")
            .to_string()
    }

    /// Compact form safe for file names, e.g. `20240131T120000Z`.
    pub fn file_stamp(&self) -> String {
        chrono::DateTime::from_timestamp(self.unix_seconds(), 0)
            .unwrap_or_default()
            .format("%Y%m%dT%H%M%SZ")
            .to_string()
    }

    pub fn stopwatch(&self) -> Stopwatch {
        Stopwatch {
            start: matches!(self, Clock::System).then(Instant::now),
        }
    }
}

pub struct Stopwatch {
    start: Option<Instant>,
}

impl Stopwatch {
    pub fn elapsed_s(&self) -> f64 {
        self.start.map_or(0.0, |s| s.elapsed().as_secs_f64())
    }
}

/// Writes `bytes` to a temp file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// File-name-safe rendering of an arbitrary key.
pub fn file_safe(key: &str) -> String {
    let mut out = String::with_capacity(key.len());
    for c in key.chars() {
        if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
            out.push(c);
        } else {
            let mut buf = [0u8; 4];
            for b in c.encode_utf8(&mut buf).bytes() {
                out.push_str(&format!("%{b:02X}"));
            }
        }
    }
    out
}
