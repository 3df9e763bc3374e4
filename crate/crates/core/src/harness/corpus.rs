//! Manifests, speaker maps and per-speaker feature normalization.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use crate::numerics::Tensor;
use crate::training::Example;
use crate::vocab::{Vocab, UNK};
use crate::{Error, Result};

/// Smallest standard deviation used when dividing.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Feature file, resolved against the manifest's directory.
    pub path: PathBuf,
    pub transcript: String,
}

/// `id<TAB>feature path<TAB>transcript` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut f = line.splitn(3, '\t');
            let (Some(id), Some(feat), Some(transcript)) = (f.next(), f.next(), f.next()) else {
                return Err(Error::format(path, format!("line {}: expected 3 tab-separated fields", n + 1)));
            };
            if !seen.insert(id.to_string()) {
                return Err(Error::format(path, format!("line {}: duplicate id {id}", n + 1)));
            }
            let fp = base.join(feat);
            if !fp.is_file() {
                return Err(Error::format(path, format!("line {}: missing feature file {}", n + 1, fp.display())));
            }
            entries.push(ManifestEntry {
                id: id.to_string(),
                path: fp,
                transcript: transcript.to_string(),
            });
        }
        if entries.is_empty() {
            return Err(Error::format(path, "manifest is empty"));
        }
        Ok(Manifest { entries })
    }
}

/// Two-column `id<TAB>value` table, e.g. speakers or transcripts. Extra
/// columns are ignored.
pub fn read_table(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut f = line.split('\t');
        let id = f.next().unwrap_or_default();
        let value = f
            .next()
            .ok_or_else(|| Error::format(path, format!("line {}: expected id<TAB>value", n + 1)))?;
        if !seen.insert(id.to_string()) {
            return Err(Error::format(path, format!("line {}: duplicate id {id}", n + 1)));
        }
        out.push((id.to_string(), value.to_string()));
    }
    Ok(out)
}

/// Per speaker and dimension: subtract the mean and divide by the
/// (population) standard deviation, floored at [`STD_FLOOR`].
pub fn normalize_features(features: &mut [Tensor], speakers: &[String]) -> Result<()> {
    if features.len() != speakers.len() {
        return Err(Error::Input(format!(
            "{} feature matrices for {} speaker labels",
            features.len(),
            speakers.len()
        )));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in speakers.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    for (speaker, members) in groups {
        let d = features[members[0]].cols();
        let mut sum = vec![0.0; d];
        let mut n = 0usize;
        for &i in &members {
            let f = &features[i];
            if f.cols() != d {
                return Err(Error::dim("normalize_features", format!("speaker {speaker} mixes dimensions {d} and {}", f.cols())));
            }
            for r in 0..f.rows() {
                for (s, x) in sum.iter_mut().zip(f.row(r)) {
                    *s += x;
                }
            }
            n += f.rows();
        }
        if n < 2 {
            return Err(Error::Normalization(format!("speaker {speaker} has {n} frame(s), need at least 2")));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0; d];
        for &i in &members {
            let f = &features[i];
            for r in 0..f.rows() {
                for ((v, x), m) in var.iter_mut().zip(f.row(r)).zip(&mean) {
                    *v += (x - m).powi(2);
                }
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
        for &i in &members {
            let f = &mut features[i];
            for (k, x) in f.data_mut().iter_mut().enumerate() {
                let j = k % d;
                *x = (*x - mean[j]) / std[j];
            }
        }
    }
    Ok(())
}

/// Loads `dir/manifest.tsv` with its features. When `normalize` is set,
/// features are normalized per speaker using `dir/speakers.tsv`.
/// Transcripts with characters outside `vocab` are rejected.
pub fn load_split(dir: &Path, vocab: &Vocab, normalize: bool) -> Result<Vec<Example>> {
    let manifest = Manifest::load(&dir.join("manifest.tsv"))?;
    let mut feats = Vec::with_capacity(manifest.entries.len());
    let mut examples = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let chars = vocab.encode(&e.transcript);
        if chars.contains(&UNK) || chars.is_empty() {
            return Err(Error::Input(format!(
                "utterance {}: transcript {:?} is empty or has characters outside the vocabulary",
                e.id, e.transcript
            )));
        }
        feats.push(super::features::read(&e.path)?);
        examples.push((e.id.clone(), chars));
    }
    if normalize {
        let spk_path = dir.join("speakers.tsv");
        let map: BTreeMap<String, String> = read_table(&spk_path)?.into_iter().collect();
        let speakers = manifest
            .entries
            .iter()
            .map(|e| {
                map.get(&e.id)
                    .cloned()
                    .ok_or_else(|| Error::format(&spk_path, format!("no speaker for {}", e.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        normalize_features(&mut feats, &speakers)?;
    }
    Ok(examples
        .into_iter()
        .zip(feats)
        .map(|((id, chars), features)| Example { id, features, chars })
        .collect())
}
