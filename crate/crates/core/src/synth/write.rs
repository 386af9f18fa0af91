use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Corpus, SynthError};
use crate::ctml::write_records;
use crate::embedstore::ManifestWriter;
use crate::events::write_video_meta;

/// Locations of the files written for a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusPaths {
    pub events: PathBuf,
    pub videos: PathBuf,
    pub manifest: PathBuf,
    pub concepts: PathBuf,
    pub human_ratings: PathBuf,
    pub ground_truth: PathBuf,
    pub config: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>, SynthError> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes the event log, metadata, embedding store, rubric records and
/// ground truth under `dir`.
pub fn write_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<CorpusPaths, SynthError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let paths = CorpusPaths {
        events: dir.join("events.jsonl"),
        videos: dir.join("videos.jsonl"),
        manifest: dir.join("embeddings").join("manifest.json"),
        concepts: dir.join("concepts.jsonl"),
        human_ratings: dir.join("human_ratings.jsonl"),
        ground_truth: dir.join("ground_truth.json"),
        config: dir.join("synth_config.json"),
    };
    fs::write(&paths.events, corpus.event_log.as_bytes())?;

    let mut w = create(&paths.videos)?;
    write_video_meta(&corpus.metas, &mut w)?;
    w.flush()?;

    let emb = &corpus.embeddings;
    let mut writer = ManifestWriter::create(dir.join("embeddings"), &emb.parts)?;
    let mut offsets = vec![0usize; emb.parts.len()];
    for (video, t) in &emb.index {
        let rows: Vec<&[f32]> = emb
            .parts
            .iter()
            .zip(&emb.data)
            .zip(&offsets)
            .map(|(((_, d), data), &o)| &data[o..o + d])
            .collect();
        writer.push(video, *t, &rows)?;
        for (o, (_, d)) in offsets.iter_mut().zip(&emb.parts) {
            *o += d;
        }
    }
    let manifest = writer.finish()?;
    debug_assert_eq!(manifest, paths.manifest);

    let mut w = create(&paths.concepts)?;
    write_records(&corpus.records, &mut w)?;
    w.flush()?;
    let mut w = create(&paths.human_ratings)?;
    write_records(&corpus.human_ratings, &mut w)?;
    w.flush()?;

    let mut w = create(&paths.ground_truth)?;
    serde_json::to_writer(&mut w, &corpus.truth).map_err(std::io::Error::other)?;
    w.flush()?;
    fs::write(
        &paths.config,
        serde_json::to_vec_pretty(&corpus.config).map_err(std::io::Error::other)?,
    )?;
    Ok(paths)
}
