use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{realize_caption, sample_rng, sample_scene_pair, CaptionSample, SceneConfig, ScenePair, Vocabulary};

/// One dataset record: the symbolic pair (including jitter and noise seed,
/// so grids can be re-rendered) and its caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub pair: ScenePair,
    pub caption: CaptionSample,
}

/// Samples `ids` of the stream defined by `config.seed`; sample `i` only
/// depends on `(seed, i)`, so disjoint ranges give disjoint splits.
pub fn generate_dataset(config: &SceneConfig, vocab: &Vocabulary, ids: Range<u64>) -> Result<Vec<Sample>> {
    config.validate()?;
    ids.map(|id| {
        let pair = sample_scene_pair(&mut sample_rng(config.seed, id), config)?;
        let caption = realize_caption(&pair, vocab, config)?;
        Ok(Sample { id, pair, caption })
    })
    .collect()
}

/// Writes one JSON record per line.
pub fn save_dataset(samples: &[Sample], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let cfg = SceneConfig::default();
        let data = generate_dataset(&cfg, &Vocabulary::grammar(), 0..100).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&data, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), data);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        File::create(&path).unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_line_is_reported() {
        let cfg = SceneConfig::default();
        let data = generate_dataset(&cfg, &Vocabulary::grammar(), 0..10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&data, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let cut = lines[6].len() / 2;
        lines[6].truncate(cut);
        std::fs::write(&path, lines.join("\n")).unwrap();
        match load_dataset(&path) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected malformed record, got {other:?}"),
        }
    }

    #[test]
    fn disjoint_ranges_are_independent() {
        let cfg = SceneConfig::default();
        let v = Vocabulary::grammar();
        let all = generate_dataset(&cfg, &v, 0..20).unwrap();
        let tail = generate_dataset(&cfg, &v, 10..20).unwrap();
        assert_eq!(&all[10..], &tail[..]);
    }
}
