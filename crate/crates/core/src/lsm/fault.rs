use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

/// Points in the write path where a simulated crash can occur.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CrashSite {
    /// Half of a WAL record has reached the file.
    WalTornWrite,
    /// The WAL record is durable; the memtable has not been updated.
    AfterWalAppend,
    /// Component data and metadata written; validity bit still unset.
    FlushBeforeValid,
    /// Flushed component valid; WAL not yet truncated.
    FlushBeforeWalTruncate,
    /// Merged component written; validity bit still unset.
    MergeBeforeValid,
    /// Merged component valid; inputs not yet deleted.
    MergeBeforeDelete,
}

impl fmt::Display for CrashSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultMode {
    /// Return an error from the crashing operation; the engine is then
    /// unusable and must be reopened.
    Error,
    /// Abort the whole process after naming the site on stderr.
    Abort,
}

/// Counts crash-site hits and fires on the armed one.
#[derive(Debug)]
pub struct FaultInjector {
    mode: FaultMode,
    countdown: AtomicU64,
    hits: AtomicU64,
}

impl Default for FaultInjector {
    fn default() -> Self {
        FaultInjector::disarmed()
    }
}

impl FaultInjector {
    pub fn disarmed() -> Self {
        FaultInjector {
            mode: FaultMode::Error,
            countdown: AtomicU64::new(0),
            hits: AtomicU64::new(0),
        }
    }

    /// Fires on the `nth` site hit (1-based).
    pub fn armed(nth: u64, mode: FaultMode) -> Self {
        FaultInjector {
            mode,
            countdown: AtomicU64::new(nth),
            hits: AtomicU64::new(0),
        }
    }

    /// Site hits observed so far.
    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    /// Returns `Err(site)` (or aborts) when this hit is the armed one.
    pub fn check(&self, site: CrashSite) -> Result<(), CrashSite> {
        self.hits.fetch_add(1, Ordering::Relaxed);
        let fire = self
            .countdown
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| (c > 0).then(|| c - 1))
            .is_ok_and(|prev| prev == 1);
        if !fire {
            return Ok(());
        }
        match self.mode {
            FaultMode::Error => Err(site),
            FaultMode::Abort => {
                eprintln!("crash site: {site}");
                std::process::abort()
            }
        }
    }
}
