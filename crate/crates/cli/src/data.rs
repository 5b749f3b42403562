//! Loading and pooling manifest splits.

use anyhow::{bail, Context, Result};
use hieragg::dataio::{load_manifest, DatasetManifest, Split, Stream, VideoRecord};
use hieragg::hierarchy::{pool_sequence_with, Hierarchy, PoolOptions};
use hieragg::kernels::NodeScaling;
use hieragg::Tree;
use rayon::prelude::*;
use std::path::Path;

use crate::error::CliError;

pub struct Pooled {
    pub trees: Vec<Tree>,
    pub labels: Vec<usize>,
}

pub fn manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

pub fn split_records(m: &DatasetManifest, split: Split) -> Result<Vec<&VideoRecord>> {
    let records: Vec<&VideoRecord> = m.split(split).collect();
    if records.is_empty() {
        bail!(CliError::EmptySplit(split_name(split)));
    }
    Ok(records)
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

/// Pools one stream of every record, in record order.
pub fn pool_records(
    m: &DatasetManifest,
    records: &[&VideoRecord],
    stream: Stream,
    h: &Hierarchy,
    opts: PoolOptions,
) -> Result<Pooled> {
    let trees = records
        .par_iter()
        .map(|r| {
            let seq = m
                .load_sequence(r, stream)
                .map_err(|e| CliError::MissingFeatures(e.to_string()))?;
            pool_sequence_with(&seq, h, opts).with_context(|| format!("pooling '{}'", r.video_id))
        })
        .collect::<Result<Vec<Tree>>>()?;
    Ok(Pooled {
        trees,
        labels: records.iter().map(|r| r.label).collect(),
    })
}

pub fn pool_split(
    m: &DatasetManifest,
    split: Split,
    stream: Stream,
    h: &Hierarchy,
    opts: PoolOptions,
) -> Result<Pooled> {
    let records = split_records(m, split)?;
    pool_records(m, &records, stream, h, opts)
}

pub fn apply_scale(scale: Option<&[f64]>, trees: Vec<Tree>) -> Result<Vec<Tree>> {
    match scale {
        Some(f) => Ok(NodeScaling { factors: f.to_vec() }.apply_all(&trees)?),
        None => Ok(trees),
    }
}
