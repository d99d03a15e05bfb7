//! Line-delimited JSON export and import of task streams.
//!
//! The first line is a header `{"meta": {"geometry": .., "specs": [..]}}`.
//! Every following line is one sample:
//!
//! ```text
//! {"split":"train","task":0,"class":1,"group":0,"features":[...]}
//! ```
//!
//! `split` is `train`, `test`, `test-flip` or `memory`. A `test` record is
//! followed by one `test-flip` record per bias channel, carrying `channel`.
//! Streams with more than one channel add the full `groups` list.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{BiasedSample, StreamGeometry, TaskSpec, TaskStream, TestPair};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub split: String,
    pub task: usize,
    pub class: usize,
    pub group: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<usize>,
    pub features: Vec<f64>,
}

impl SampleRecord {
    fn from_sample(split: &str, sample: &BiasedSample, channel: Option<usize>) -> Self {
        Self {
            split: split.to_string(),
            task: sample.task,
            class: sample.class,
            group: sample.group(),
            groups: (sample.groups.len() > 1).then(|| sample.groups.clone()),
            channel,
            features: sample.features.clone(),
        }
    }

    fn into_sample(self) -> BiasedSample {
        BiasedSample {
            groups: self.groups.unwrap_or_else(|| vec![self.group]),
            features: self.features,
            class: self.class,
            task: self.task,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StreamMeta {
    geometry: StreamGeometry,
    specs: Vec<TaskSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaLine {
    meta: StreamMeta,
}

pub fn write_records<W: Write>(stream: &TaskStream, mut out: W) -> Result<()> {
    let meta = MetaLine {
        meta: StreamMeta {
            geometry: stream.geometry.clone(),
            specs: stream.specs.clone(),
        },
    };
    serde_json::to_writer(&mut out, &meta)?;
    writeln!(out)?;
    for (train, test) in stream.train.iter().zip(&stream.test) {
        for s in train {
            write_line(&mut out, &SampleRecord::from_sample("train", s, None))?;
        }
        for pair in test {
            write_line(&mut out, &SampleRecord::from_sample("test", &pair.original, None))?;
            for (c, f) in pair.flipped.iter().enumerate() {
                write_line(&mut out, &SampleRecord::from_sample("test-flip", f, Some(c)))?;
            }
        }
    }
    Ok(())
}

/// Writes memory contents as `memory` records (no header).
pub fn write_memory_records<'a, W: Write>(
    samples: impl IntoIterator<Item = &'a BiasedSample>,
    mut out: W,
) -> Result<()> {
    for s in samples {
        write_line(&mut out, &SampleRecord::from_sample("memory", s, None))?;
    }
    Ok(())
}

fn write_line<W: Write>(out: &mut W, record: &SampleRecord) -> Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    writeln!(out)?;
    Ok(())
}

pub fn read_records<R: BufRead>(input: R) -> Result<TaskStream> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Empty("stream file".into()))??;
    let meta: MetaLine = serde_json::from_str(&header)?;
    let tasks = meta.meta.specs.len();
    let mut train = vec![Vec::new(); tasks];
    let mut test: Vec<Vec<TestPair>> = vec![Vec::new(); tasks];
    for (number, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line)?;
        let task = record.task;
        if task >= tasks {
            return Err(Error::OutOfRange(format!("record {} names task {task}", number + 2)));
        }
        match record.split.as_str() {
            "train" => train[task].push(record.into_sample()),
            "test" => test[task].push(TestPair {
                original: record.into_sample(),
                flipped: Vec::new(),
            }),
            "test-flip" => {
                let pair = test[task].last_mut().ok_or_else(|| {
                    Error::InvalidSpec(format!("record {}: flip without original", number + 2))
                })?;
                pair.flipped.push(record.into_sample());
            }
            other => {
                return Err(Error::InvalidSpec(format!(
                    "record {}: unexpected split `{other}`",
                    number + 2
                )))
            }
        }
    }
    Ok(TaskStream {
        geometry: meta.meta.geometry,
        specs: meta.meta.specs,
        train,
        test,
    })
}
