//! Native on-disk layout: `windows.bin`, `manifest.csv` and `inventory.txt`
//! inside one directory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, PhonemeWindow, SignalMatrix, Split};
use crate::error::{Error, Result};
use crate::inventory::PhonemeInventory;

pub const MAGIC: &[u8; 7] = b"MEGPH1\0";
const HEADER_LEN: u64 = 7 + 4 + 4 + 8;
pub const WINDOWS_FILE: &str = "windows.bin";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const INVENTORY_FILE: &str = "inventory.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Native,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    index: u64,
    phoneme: String,
    split: String,
    session: String,
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin = dir.join(WINDOWS_FILE);
    let mut out = BufWriter::new(File::create(&bin).map_err(|e| Error::io(&bin, e))?);
    let mut header = Vec::with_capacity(HEADER_LEN as usize);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&(ds.channels as u32).to_le_bytes());
    header.extend_from_slice(&(ds.times as u32).to_le_bytes());
    header.extend_from_slice(&(ds.windows.len() as u64).to_le_bytes());
    out.write_all(&header).map_err(|e| Error::io(&bin, e))?;
    for w in &ds.windows {
        let bytes: Vec<u8> = w.data.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        out.write_all(&bytes).map_err(|e| Error::io(&bin, e))?;
    }
    out.flush().map_err(|e| Error::io(&bin, e))?;

    let man = dir.join(MANIFEST_FILE);
    let mut csv = csv::Writer::from_path(&man).map_err(|e| Error::Input(format!("{}: {e}", man.display())))?;
    for (i, w) in ds.windows.iter().enumerate() {
        csv.serialize(ManifestRow {
            index: i as u64,
            phoneme: ds.inventory.symbol(w.label).unwrap_or("?").to_string(),
            split: w.split.to_string(),
            session: w.session_id.clone(),
        })
        .map_err(|e| Error::Input(format!("{}: {e}", man.display())))?;
    }
    csv.flush().map_err(|e| Error::io(&man, e))?;

    let inv = dir.join(INVENTORY_FILE);
    let mut text = ds.inventory.symbols().join("\n");
    text.push('\n');
    std::fs::write(&inv, text).map_err(|e| Error::io(&inv, e))
}

struct Meta {
    label: usize,
    split: Split,
    session: String,
}

/// Streaming reader over a native dataset directory.
///
/// The header, file length and manifest are fully validated on open, so a
/// truncated or inconsistent file fails before any window is produced.
pub struct NativeReader {
    pub inventory: PhonemeInventory,
    pub channels: usize,
    pub times: usize,
    path: PathBuf,
    reader: BufReader<File>,
    meta: std::vec::IntoIter<Meta>,
    offset: u64,
}

impl NativeReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let inv_path = dir.join(INVENTORY_FILE);
        let inventory = if inv_path.exists() {
            let text = std::fs::read_to_string(&inv_path).map_err(|e| Error::io(&inv_path, e))?;
            PhonemeInventory::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())?
        } else {
            PhonemeInventory::default()
        };

        let path = dir.join(WINDOWS_FILE);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        let mut reader = BufReader::new(file);
        let mut header = [0u8; HEADER_LEN as usize];
        if file_len < HEADER_LEN {
            return Err(Error::Parse {
                offset: file_len,
                reason: format!("file ends inside the {HEADER_LEN}-byte header"),
            });
        }
        reader.read_exact(&mut header).map_err(|e| Error::io(&path, e))?;
        if &header[..7] != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                reason: "bad magic, not a native dataset file".into(),
            });
        }
        let channels = u32::from_le_bytes(header[7..11].try_into().unwrap()) as usize;
        let times = u32::from_le_bytes(header[11..15].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(header[15..23].try_into().unwrap());
        let window_bytes = (channels * times * 4) as u64;
        let expected = HEADER_LEN + count * window_bytes;
        if file_len != expected {
            let offset = if file_len < expected {
                let whole = (file_len - HEADER_LEN) / window_bytes.max(1);
                HEADER_LEN + whole * window_bytes
            } else {
                expected
            };
            return Err(Error::Parse {
                offset,
                reason: format!("header declares {count} windows ({expected} bytes) but the file has {file_len} bytes"),
            });
        }

        let man_path = dir.join(MANIFEST_FILE);
        let mut csv = csv::Reader::from_path(&man_path).map_err(|e| Error::Parse {
            offset: 0,
            reason: format!("{}: {e}", man_path.display()),
        })?;
        let mut meta = Vec::with_capacity(count as usize);
        for (row, rec) in csv.deserialize::<ManifestRow>().enumerate() {
            let rec = rec.map_err(|e| Error::Parse {
                offset: e.position().map(|p| p.byte()).unwrap_or(0),
                reason: format!("{}: {e}", man_path.display()),
            })?;
            if rec.index != row as u64 {
                return Err(Error::Parse {
                    offset: 0,
                    reason: format!("manifest row {row} has index {}", rec.index),
                });
            }
            let label = inventory.id(&rec.phoneme).ok_or_else(|| Error::Vocabulary {
                symbol: rec.phoneme.clone(),
                row,
            })?;
            meta.push(Meta {
                label,
                split: rec.split.parse()?,
                session: rec.session,
            });
        }
        if meta.len() as u64 != count {
            return Err(Error::Parse {
                offset: 15,
                reason: format!("header declares {count} windows, manifest lists {}", meta.len()),
            });
        }
        Ok(Self {
            inventory,
            channels,
            times,
            path,
            reader,
            meta: meta.into_iter(),
            offset: HEADER_LEN,
        })
    }

    pub fn remaining(&self) -> usize {
        self.meta.len()
    }

    pub fn into_dataset(self, dir: &Path) -> Result<Dataset> {
        let mut ds = Dataset::new(self.inventory.clone(), self.channels, self.times);
        for w in self {
            ds.push(w?)?;
        }
        ds.sources.push(dir.to_path_buf());
        Ok(ds)
    }
}

impl Iterator for NativeReader {
    type Item = Result<PhonemeWindow>;

    fn next(&mut self) -> Option<Self::Item> {
        let meta = self.meta.next()?;
        let mut bytes = vec![0u8; self.channels * self.times * 4];
        if let Err(e) = self.reader.read_exact(&mut bytes) {
            self.meta = Vec::new().into_iter();
            return Some(Err(Error::Parse {
                offset: self.offset,
                reason: format!("{}: incomplete window: {e}", self.path.display()),
            }));
        }
        self.offset += bytes.len() as u64;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Some(
            SignalMatrix::new(self.channels, self.times, data)
                .and_then(|m| PhonemeWindow::new(m, meta.label, meta.split, meta.session)),
        )
    }
}

pub fn ingest(path: &Path, format: DataFormat) -> Result<NativeReader> {
    match format {
        DataFormat::Native => NativeReader::open(path),
    }
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        NativeReader::open(dir)?.into_dataset(dir)
    }
}
