//! Append-only journals of [`JournalRecord`]s in the wire record format.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use mmpaxos_core::wire::{decode_records, encode_record};
use mmpaxos_core::JournalRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyncPolicy {
    /// fsync after every append.
    EveryWrite,
    /// fsync once this many records have accumulated.
    Batched(usize),
    Never,
}

pub struct Journal {
    file: File,
    path: PathBuf,
    policy: SyncPolicy,
    unsynced: usize,
}

impl Journal {
    /// Opens or creates the journal and returns the records already in it.
    pub fn open(path: &Path, policy: SyncPolicy) -> io::Result<(Journal, Vec<JournalRecord>)> {
        let existing = match fs::read(path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        let records =
            decode_records(&existing).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        // rewrite without a torn tail so later appends stay parseable
        let valid: usize = records.iter().map(|r| encode_record(r).len()).sum();
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        if valid != existing.len() {
            file.set_len(valid as u64)?;
        }
        Ok((
            Journal {
                file,
                path: path.to_owned(),
                policy,
                unsynced: 0,
            },
            records,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, records: &[JournalRecord]) -> io::Result<()> {
        if records.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for r in records {
            buf.extend(encode_record(r));
        }
        self.file.write_all(&buf)?;
        self.unsynced += records.len();
        match self.policy {
            SyncPolicy::EveryWrite => self.sync(),
            SyncPolicy::Batched(n) if self.unsynced >= n => self.sync(),
            _ => Ok(()),
        }
    }

    pub fn sync(&mut self) -> io::Result<()> {
        if self.unsynced > 0 {
            self.file.sync_data()?;
            self.unsynced = 0;
        }
        Ok(())
    }
}

/// Reads, bumps and persists the incarnation counter stored at `path`.
pub fn next_incarnation(path: &Path) -> io::Result<u32> {
    let current = match fs::read_to_string(path) {
        Ok(s) => s.trim().parse::<u32>().unwrap_or(0),
        Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
        Err(e) => return Err(e),
    };
    let next = current + 1;
    fs::write(path, next.to_string())?;
    Ok(next)
}
