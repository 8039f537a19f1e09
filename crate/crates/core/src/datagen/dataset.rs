use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const DATASET_MAGIC: &[u8; 8] = b"SINODS01";
pub const DATASET_VERSION: u32 = 1;
/// Magic, version, grid size, trajectory and time counts, length, sampling
/// interval and training-trajectory count.
pub const HEADER_BYTES: u64 = 8 + 4 + 4 + 8 + 8 + 8 + 8 + 8;

/// Metadata of a dataset file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetHeader {
    pub d: usize,
    pub n_traj: usize,
    pub n_times: usize,
    pub length: f64,
    pub dt_sample: f64,
    /// The first `n_train` trajectories are for training, the rest for testing.
    pub n_train: usize,
}

impl DatasetHeader {
    pub fn payload_len(&self) -> usize {
        self.n_traj * self.n_times * self.d
    }

    pub fn file_len(&self) -> u64 {
        HEADER_BYTES + 8 * self.payload_len() as u64
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_times == 0 || self.n_train > self.n_traj {
            return Err(Error::Format(format!("inconsistent dataset header {self:?}")));
        }
        if !(self.length > 0.0) || !(self.dt_sample > 0.0) {
            return Err(Error::Format(format!(
                "dataset length and sampling interval must be positive, got {} and {}",
                self.length, self.dt_sample
            )));
        }
        Ok(())
    }

    fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.d as u32).to_le_bytes())?;
        w.write_all(&(self.n_traj as u64).to_le_bytes())?;
        w.write_all(&(self.n_times as u64).to_le_bytes())?;
        w.write_all(&self.length.to_le_bytes())?;
        w.write_all(&self.dt_sample.to_le_bytes())?;
        w.write_all(&(self.n_train as u64).to_le_bytes())?;
        Ok(())
    }

    fn parse(bytes: &[u8]) -> Result<Self> {
        if (bytes.len() as u64) < HEADER_BYTES {
            return Err(Error::Truncated {
                expected: HEADER_BYTES,
                found: bytes.len() as u64,
            });
        }
        if &bytes[..8] != DATASET_MAGIC {
            return Err(Error::Format("not a SINODS01 dataset".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "dataset version {version} is not supported (expected {DATASET_VERSION})"
            )));
        }
        let header = Self {
            d: u32_at(12) as usize,
            n_traj: u64_at(16) as usize,
            n_times: u64_at(24) as usize,
            length: f64::from_bits(u64_at(32)),
            dt_sample: f64::from_bits(u64_at(40)),
            n_train: u64_at(48) as usize,
        };
        header.validate()?;
        Ok(header)
    }
}

/// Sampled trajectories stored as `[trajectory][time][space]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    header: DatasetHeader,
    data: Vec<f64>,
}

impl Dataset {
    pub fn new(header: DatasetHeader, data: Vec<f64>) -> Result<Self> {
        header.validate().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        if data.len() != header.payload_len() {
            return Err(Error::DimensionMismatch {
                context: "dataset payload",
                expected: header.payload_len(),
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("dataset entry {i} is not finite")));
        }
        Ok(Self { header, data })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn d(&self) -> usize {
        self.header.d
    }

    pub fn n_traj(&self) -> usize {
        self.header.n_traj
    }

    pub fn n_times(&self) -> usize {
        self.header.n_times
    }

    pub fn n_train(&self) -> usize {
        self.header.n_train
    }

    pub fn dt_sample(&self) -> f64 {
        self.header.dt_sample
    }

    pub fn length(&self) -> f64 {
        self.header.length
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_train(&self, traj: usize) -> bool {
        traj < self.header.n_train
    }

    pub fn snapshot(&self, traj: usize, time: usize) -> &[f64] {
        let d = self.header.d;
        let o = (traj * self.header.n_times + time) * d;
        &self.data[o..o + d]
    }

    /// Snapshots `(traj, time)` as the columns of a `d x len` block.
    pub fn gather(&self, index: &[(usize, usize)]) -> DenseMatrix {
        let cols: Vec<&[f64]> = index.iter().map(|&(tr, t)| self.snapshot(tr, t)).collect();
        DenseMatrix::from_columns(&cols).expect("snapshots share the grid size")
    }

    /// Keeps only the first `n` trajectories of each split.
    pub fn subset(&self, n_train: usize, n_test: usize) -> Result<Self> {
        let h = &self.header;
        if n_train > h.n_train || n_test > h.n_traj - h.n_train {
            return Err(Error::InvalidArgument(format!(
                "asked for {n_train}+{n_test} trajectories, dataset has {}+{}",
                h.n_train,
                h.n_traj - h.n_train
            )));
        }
        let per = h.n_times * h.d;
        let mut data = Vec::with_capacity((n_train + n_test) * per);
        data.extend_from_slice(&self.data[..n_train * per]);
        let test0 = h.n_train * per;
        data.extend_from_slice(&self.data[test0..test0 + n_test * per]);
        Self::new(
            DatasetHeader {
                n_traj: n_train + n_test,
                n_train,
                ..*h
            },
            data,
        )
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        self.header.write_to(&mut w)?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = DatasetHeader::parse(bytes)?;
        let expected = header.file_len();
        if (bytes.len() as u64) < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len() as u64,
            });
        }
        if (bytes.len() as u64) > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after the dataset payload",
                bytes.len() as u64 - expected
            )));
        }
        let data = bytes[HEADER_BYTES as usize..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(header, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(self.header.file_len() as usize);
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Reads only the header of a dataset file.
pub fn read_header(path: impl AsRef<Path>) -> Result<DatasetHeader> {
    let f = std::fs::File::open(path)?;
    let mut buf = Vec::with_capacity(HEADER_BYTES as usize);
    f.take(HEADER_BYTES).read_to_end(&mut buf)?;
    DatasetHeader::parse(&buf)
}
