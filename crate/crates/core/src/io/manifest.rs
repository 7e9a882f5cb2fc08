//! Dataset directories: one PLY per cloud plus an `index.csv` listing
//! `pair_id, regime, src, tgt, t00..t33, overlap_ratio`. Paths in the index
//! are relative to the dataset directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform};
use crate::io::ply::{read_ply, write_ply, PlyFormat};
use crate::io::synth::{Regime, ScenePair};

pub const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub regime: Regime,
    pub src: PathBuf,
    pub tgt: PathBuf,
    pub t_true: RigidTransform,
    pub overlap_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load_pair(&self, entry: &ManifestEntry) -> Result<(PointCloud, PointCloud)> {
        Ok((read_ply(&self.root.join(&entry.src))?, read_ply(&self.root.join(&entry.tgt))?))
    }

    pub fn regime(&self, regime: Regime) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.regime == regime)
    }
}

fn header() -> Vec<String> {
    let mut h = vec!["pair_id".to_string(), "regime".into(), "src".into(), "tgt".into()];
    for r in 0..4 {
        for c in 0..4 {
            h.push(format!("t{r}{c}"));
        }
    }
    h.push("overlap_ratio".into());
    h
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let location = e
        .position()
        .map(|p| format!("line {}", p.line()))
        .unwrap_or_else(|| "unknown".into());
    Error::Parse {
        path: path.to_path_buf(),
        location,
        message: e.to_string(),
    }
}

/// Writes the pairs as binary PLY files plus the index. Pair ids are
/// `<regime>_<index>`.
pub fn write_dataset(root: &Path, pairs: &[(Regime, ScenePair)]) -> Result<Manifest> {
    let clouds = root.join("clouds");
    fs::create_dir_all(&clouds).map_err(|e| Error::io(&clouds, e))?;
    let mut entries = Vec::with_capacity(pairs.len());
    let mut counters = std::collections::BTreeMap::new();
    for (regime, pair) in pairs {
        let k = counters.entry(*regime).or_insert(0usize);
        let pair_id = format!("{}_{:04}", regime.name(), k);
        *k += 1;
        let src = PathBuf::from("clouds").join(format!("{pair_id}_src.ply"));
        let tgt = PathBuf::from("clouds").join(format!("{pair_id}_tgt.ply"));
        write_ply(&pair.src, &root.join(&src), PlyFormat::BinaryLittleEndian)?;
        write_ply(&pair.tgt, &root.join(&tgt), PlyFormat::BinaryLittleEndian)?;
        entries.push(ManifestEntry {
            pair_id,
            regime: *regime,
            src,
            tgt,
            t_true: pair.t_true,
            overlap_ratio: pair.overlap_ratio,
        });
    }
    let manifest = Manifest {
        root: root.to_path_buf(),
        entries,
    };
    write_index(&manifest)?;
    Ok(manifest)
}

pub fn write_index(manifest: &Manifest) -> Result<()> {
    let path = manifest.root.join(INDEX_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(header()).map_err(|e| csv_err(&path, e))?;
    for e in &manifest.entries {
        let mut row = vec![
            e.pair_id.clone(),
            e.regime.name().to_string(),
            e.src.to_string_lossy().into_owned(),
            e.tgt.to_string_lossy().into_owned(),
        ];
        row.extend(e.t_true.to_row_major().iter().map(|v| v.to_string()));
        row.push(e.overlap_ratio.to_string());
        w.write_record(&row).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Reads `<root>/index.csv`.
pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(INDEX_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let expected = header();
    let got: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(&path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if got != expected {
        return Err(Error::Parse {
            path: path.clone(),
            location: "line 1".into(),
            message: "unexpected index header".into(),
        });
    }
    let mut entries = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| csv_err(&path, e))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let bad = |message: String| Error::Parse {
            path: path.clone(),
            location: format!("line {line}"),
            message,
        };
        let num = |i: usize| -> Result<f64> {
            row[i]
                .parse::<f64>()
                .map_err(|_| bad(format!("bad number '{}' in column {}", &row[i], expected[i])))
        };
        let mut m = [0.0; 16];
        for (i, slot) in m.iter_mut().enumerate() {
            *slot = num(4 + i)?;
        }
        entries.push(ManifestEntry {
            pair_id: row[0].to_string(),
            regime: row[1].parse().map_err(|e: Error| bad(e.to_string()))?,
            src: PathBuf::from(&row[2]),
            tgt: PathBuf::from(&row[3]),
            t_true: RigidTransform::from_row_major(&m).map_err(|e| bad(e.to_string()))?,
            overlap_ratio: num(20)?,
        });
    }
    Ok(Manifest {
        root: root.to_path_buf(),
        entries,
    })
}
