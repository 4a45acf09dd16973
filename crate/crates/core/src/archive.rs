//! Versioned JSON archives of gain schedules.
//!
//! An archive stores the full network next to its content hash so a
//! schedule is never applied to a model it was not synthesized for.
//! Certificates are not hashed: a tampered `X` must still load so the
//! verifier can point at it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lmi::FeasibleCertificate;
use crate::model::NetworkModel;
use crate::scheduling::{GainSchedule, GridDesign, ScheduleError};

pub const ARCHIVE_FORMAT: &str = "lpvsync-schedule";
pub const ARCHIVE_VERSION: u32 = 1;

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed archive: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported archive {format} v{version}")]
    Unsupported { format: String, version: u32 },
    #[error("archive was built for network {archived}, not {expected}")]
    IncompatibleArchive { archived: String, expected: String },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleArchive {
    pub format: String,
    pub version: u32,
    pub network_hash: String,
    pub network: NetworkModel,
    pub grid: GridDesign,
    pub certificates: Vec<FeasibleCertificate>,
    pub point_gamma_sq: Vec<f64>,
    pub gamma_sq: f64,
}

impl ScheduleArchive {
    pub fn from_schedule(s: &GainSchedule) -> Self {
        Self {
            format: ARCHIVE_FORMAT.into(),
            version: ARCHIVE_VERSION,
            network_hash: s.network.content_hash(),
            network: s.network.clone(),
            grid: s.grid.clone(),
            certificates: s.certificates.clone(),
            point_gamma_sq: s.point_gamma_sq.clone(),
            gamma_sq: s.gamma_sq,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("archive serializes")
    }

    /// Parses and checks format, version and the stored network hash.
    pub fn from_json(text: &str) -> Result<Self, ArchiveError> {
        let a: Self = serde_json::from_str(text)?;
        if a.format != ARCHIVE_FORMAT || a.version != ARCHIVE_VERSION {
            return Err(ArchiveError::Unsupported {
                format: a.format,
                version: a.version,
            });
        }
        let actual = a.network.content_hash();
        if actual != a.network_hash {
            return Err(ArchiveError::IncompatibleArchive {
                archived: a.network_hash,
                expected: actual,
            });
        }
        Ok(a)
    }

    /// Fails unless the archive was synthesized for `net`.
    pub fn ensure_compatible(&self, net: &NetworkModel) -> Result<(), ArchiveError> {
        let expected = net.content_hash();
        if expected != self.network_hash {
            return Err(ArchiveError::IncompatibleArchive {
                archived: self.network_hash.clone(),
                expected,
            });
        }
        Ok(())
    }

    pub fn into_schedule(self) -> Result<GainSchedule, ArchiveError> {
        Ok(GainSchedule::from_parts(
            self.network,
            self.grid,
            self.certificates,
            self.point_gamma_sq,
            self.gamma_sq,
        )?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ArchiveError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ArchiveError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
