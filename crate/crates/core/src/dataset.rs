//! Channel datasets as JSON lines: one header record, then one record per sample.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::sysmodel::{sample_channel, sample_seed, ChannelState, SystemConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub config: SystemConfig,
    pub base_seed: u64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleRecord {
    seed: u64,
    gamma: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub channels: Vec<ChannelState>,
}

impl Dataset {
    /// Draws `samples` channels; sample `i` uses `sample_seed(base_seed, i)`.
    pub fn generate(config: &SystemConfig, base_seed: u64, samples: usize) -> Result<Self> {
        config.validate()?;
        let channels = (0..samples as u64)
            .map(|i| sample_channel(config, sample_seed(base_seed, i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            header: DatasetHeader {
                config: config.clone(),
                base_seed,
                samples,
            },
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn write_to(&self, writer: impl Write) -> Result<()> {
        let mut w = BufWriter::new(writer);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for ch in &self.channels {
            let rec = SampleRecord {
                seed: ch.seed,
                gamma: ch.gamma.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(reader: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Shape("dataset is empty".into()))??;
        let header: DatasetHeader = serde_json::from_str(&first)?;
        header.config.validate()?;
        let mut channels = Vec::with_capacity(header.samples);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)?;
            let ch = ChannelState::new(rec.seed, rec.gamma)?;
            ch.check_shape(&header.config)?;
            channels.push(ch);
        }
        if channels.len() != header.samples {
            return Err(Error::Shape(format!(
                "header announces {} samples, found {}",
                header.samples,
                channels.len()
            )));
        }
        Ok(Self { header, channels })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
