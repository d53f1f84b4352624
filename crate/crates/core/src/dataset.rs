//! Voxel parcellation, block design and the on-disk dataset layout.
//!
//! A dataset directory holds three files:
//!
//! * `parcellation.csv` with header `voxel_id,x,y,z,roi`,
//! * `series.f64`, little-endian `f64`, row-major `V x T`,
//! * `meta.json` with keys `V`, `T`, `tr_seconds`, `sessions`, `task_blocks`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PARCELLATION_FILE: &str = "parcellation.csv";
pub const SERIES_FILE: &str = "series.f64";
pub const META_FILE: &str = "meta.json";
const PARCELLATION_HEADER: &str = "voxel_id,x,y,z,roi";

/// Integer grid coordinate in voxel units.
pub type Coord = [i64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Voxel {
    pub id: usize,
    pub coord: Coord,
    pub roi: usize,
}

/// Voxels sorted by id (ids run `1..=V`), each labelled with a ROI in `1..=R`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parcellation {
    voxels: Vec<Voxel>,
    n_rois: usize,
    /// Per ROI (index `r - 1`), voxel indices sorted by `(z, y, x)`.
    members: Vec<Vec<usize>>,
}

impl Parcellation {
    pub fn new(mut voxels: Vec<Voxel>) -> Result<Self> {
        if voxels.is_empty() {
            return Err(Error::format("parcellation", "no voxels"));
        }
        voxels.sort_by_key(|v| v.id);
        for (i, v) in voxels.iter().enumerate() {
            if v.id != i + 1 {
                return Err(Error::format(
                    "parcellation",
                    format!("voxel ids must be unique and contiguous from 1; found {} at position {}", v.id, i + 1),
                ));
            }
        }
        let mut seen = HashSet::with_capacity(voxels.len());
        for v in &voxels {
            if !seen.insert(v.coord) {
                return Err(Error::format(
                    "parcellation",
                    format!("two voxels share coordinate {:?}", v.coord),
                ));
            }
        }
        let n_rois = voxels.iter().map(|v| v.roi).max().unwrap_or(0);
        if voxels.iter().any(|v| v.roi == 0) {
            return Err(Error::format("parcellation", "roi labels start at 1"));
        }
        let mut members = vec![Vec::new(); n_rois];
        for (i, v) in voxels.iter().enumerate() {
            members[v.roi - 1].push(i);
        }
        if let Some(r) = members.iter().position(|m| m.is_empty()) {
            return Err(Error::format("parcellation", format!("roi {} has no voxels", r + 1)));
        }
        for m in &mut members {
            m.sort_by_key(|&i| {
                let c = voxels[i].coord;
                (c[2], c[1], c[0])
            });
        }
        Ok(Self {
            voxels,
            n_rois,
            members,
        })
    }

    pub fn voxels(&self) -> &[Voxel] {
        &self.voxels
    }

    pub fn n_voxels(&self) -> usize {
        self.voxels.len()
    }

    pub fn n_rois(&self) -> usize {
        self.n_rois
    }

    /// Voxel indices (0-based) of ROI `roi` (1-based), in canonical `(z, y, x)` order.
    pub fn roi_members(&self, roi: usize) -> &[usize] {
        &self.members[roi - 1]
    }

    pub fn roi_coords(&self, roi: usize) -> Vec<Coord> {
        self.roi_members(roi)
            .iter()
            .map(|&i| self.voxels[i].coord)
            .collect()
    }
}

/// Experimental block design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDesign {
    pub tr_seconds: f64,
    pub n_scans: usize,
    /// Session intervals, 1-based inclusive, partitioning `1..=T`.
    pub sessions: Vec<(usize, usize)>,
    /// Task indicator `S_1(t)`; rest is `1 - S_1(t)`.
    pub task: Vec<u8>,
}

impl BlockDesign {
    pub fn from_blocks(
        tr_seconds: f64,
        n_scans: usize,
        sessions: Vec<(usize, usize)>,
        task_blocks: &[(usize, usize)],
    ) -> Result<Self> {
        let mut task = vec![0u8; n_scans];
        for &(a, b) in task_blocks {
            if a < 1 || b < a || b > n_scans {
                return Err(Error::InvalidDesign(format!(
                    "task block [{a},{b}] outside 1..={n_scans}"
                )));
            }
            task[a - 1..b].iter_mut().for_each(|s| *s = 1);
        }
        let design = Self {
            tr_seconds,
            n_scans,
            sessions,
            task,
        };
        design.validate()?;
        Ok(design)
    }

    /// Three equal sessions, each alternating rest/task three times starting with rest.
    pub fn alternating(tr_seconds: f64, session_len: usize) -> Result<Self> {
        if session_len < 6 {
            return Err(Error::InvalidDesign("sessions need at least 6 scans".into()));
        }
        let n_scans = 3 * session_len;
        let sessions: Vec<_> = (0..3)
            .map(|s| (s * session_len + 1, (s + 1) * session_len))
            .collect();
        let mut blocks = Vec::new();
        for &(start, _) in &sessions {
            for b in 0..6 {
                let lo = start + b * session_len / 6;
                let hi = start + (b + 1) * session_len / 6 - 1;
                if b % 2 == 1 {
                    blocks.push((lo, hi));
                }
            }
        }
        Self::from_blocks(tr_seconds, n_scans, sessions, &blocks)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tr_seconds > 0.0) {
            return Err(Error::InvalidDesign("tr_seconds must be positive".into()));
        }
        if self.task.len() != self.n_scans {
            return Err(Error::InvalidDesign("task indicator length differs from T".into()));
        }
        if self.task.iter().any(|&s| s > 1) {
            return Err(Error::InvalidDesign("task indicator must be binary".into()));
        }
        if self.sessions.is_empty() {
            return Err(Error::InvalidDesign("no sessions".into()));
        }
        let mut expected = 1;
        for &(a, b) in &self.sessions {
            if a != expected || b < a {
                return Err(Error::InvalidDesign(format!(
                    "sessions must partition 1..={} without overlap; got [{a},{b}] where {expected} was expected",
                    self.n_scans
                )));
            }
            expected = b + 1;
        }
        if expected != self.n_scans + 1 {
            return Err(Error::InvalidDesign(format!(
                "sessions cover 1..={} but T={}",
                expected - 1,
                self.n_scans
            )));
        }
        Ok(())
    }

    pub fn rest(&self) -> Vec<u8> {
        self.task.iter().map(|&s| 1 - s).collect()
    }

    /// Task blocks as maximal runs of ones, 1-based inclusive.
    pub fn task_blocks(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = None;
        for (i, &s) in self.task.iter().enumerate() {
            match (s, start) {
                (1, None) => start = Some(i + 1),
                (0, Some(a)) => {
                    out.push((a, i));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(a) = start {
            out.push((a, self.n_scans));
        }
        out
    }
}

/// The pipeline's input: parcellation, `V x T` series and the block design.
#[derive(Debug, Clone, PartialEq)]
pub struct FmriDataset {
    pub parcellation: Parcellation,
    pub series: DMatrix<f64>,
    pub design: BlockDesign,
}

impl FmriDataset {
    pub fn new(parcellation: Parcellation, series: DMatrix<f64>, design: BlockDesign) -> Result<Self> {
        design.validate()?;
        if series.nrows() != parcellation.n_voxels() || series.ncols() != design.n_scans {
            return Err(Error::SizeMismatch(format!(
                "series is {}x{}, expected {}x{}",
                series.nrows(),
                series.ncols(),
                parcellation.n_voxels(),
                design.n_scans
            )));
        }
        if design.n_scans < 10 {
            return Err(Error::InvalidDesign(format!(
                "need at least 10 scans, got {}",
                design.n_scans
            )));
        }
        if let Some(idx) = series.iter().position(|v| !v.is_finite()) {
            let (v, t) = (idx % series.nrows(), idx / series.nrows());
            return Err(Error::NonFinite(format!("series voxel {} scan {}", v + 1, t + 1)));
        }
        crate::design::design_matrix(&design, &crate::design::canonical_hrf(design.tr_seconds, &Default::default()))?;
        Ok(Self {
            parcellation,
            series,
            design,
        })
    }

    pub fn n_voxels(&self) -> usize {
        self.series.nrows()
    }

    pub fn n_scans(&self) -> usize {
        self.series.ncols()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    #[serde(rename = "V")]
    v: usize,
    #[serde(rename = "T")]
    t: usize,
    tr_seconds: f64,
    sessions: Vec<[usize; 2]>,
    task_blocks: Vec<[usize; 2]>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn parse_parcellation(text: &str) -> Result<Parcellation> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end_matches('\r') == PARCELLATION_HEADER => {}
        other => {
            return Err(Error::format(
                PARCELLATION_FILE,
                format!("expected header `{PARCELLATION_HEADER}`, got {other:?}"),
            ))
        }
    }
    let mut voxels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::format(
                PARCELLATION_FILE,
                format!("line {}: expected 5 fields", lineno + 2),
            ));
        }
        let int = |s: &str| -> Result<i64> {
            s.trim().parse::<i64>().map_err(|e| {
                Error::format(PARCELLATION_FILE, format!("line {}: {e}", lineno + 2))
            })
        };
        let id = int(fields[0])?;
        let roi = int(fields[4])?;
        if id < 1 || roi < 1 {
            return Err(Error::format(
                PARCELLATION_FILE,
                format!("line {}: ids and roi labels must be positive", lineno + 2),
            ));
        }
        voxels.push(Voxel {
            id: id as usize,
            coord: [int(fields[1])?, int(fields[2])?, int(fields[3])?],
            roi: roi as usize,
        });
    }
    Parcellation::new(voxels)
}

pub(crate) fn format_parcellation(p: &Parcellation) -> String {
    let mut out = String::with_capacity(24 * p.n_voxels());
    out.push_str(PARCELLATION_HEADER);
    out.push('\n');
    for v in p.voxels() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            v.id, v.coord[0], v.coord[1], v.coord[2], v.roi
        ));
    }
    out
}

/// Little-endian f64 blob of a matrix in row-major order.
pub fn matrix_to_bytes(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    out
}

pub fn matrix_from_bytes(bytes: &[u8], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if bytes.len() != 8 * rows * cols {
        return Err(Error::SizeMismatch(format!(
            "blob has {} bytes, expected 8*{rows}*{cols} = {}",
            bytes.len(),
            8 * rows * cols
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

/// Read and validate a dataset directory.
pub fn load_dataset(root: &Path) -> Result<FmriDataset> {
    let meta_bytes = read_file(&root.join(META_FILE))?;
    let meta: Meta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::format(META_FILE, e.to_string()))?;
    let text = String::from_utf8(read_file(&root.join(PARCELLATION_FILE))?)
        .map_err(|e| Error::format(PARCELLATION_FILE, e.to_string()))?;
    let parcellation = parse_parcellation(&text)?;
    if parcellation.n_voxels() != meta.v {
        return Err(Error::SizeMismatch(format!(
            "{META_FILE} declares V={} but {PARCELLATION_FILE} has {} voxels",
            meta.v,
            parcellation.n_voxels()
        )));
    }
    let blob = read_file(&root.join(SERIES_FILE))?;
    let series = matrix_from_bytes(&blob, meta.v, meta.t)
        .map_err(|e| Error::SizeMismatch(format!("{SERIES_FILE}: {e}")))?;
    let sessions = meta.sessions.iter().map(|s| (s[0], s[1])).collect();
    let blocks: Vec<_> = meta.task_blocks.iter().map(|s| (s[0], s[1])).collect();
    let design = BlockDesign::from_blocks(meta.tr_seconds, meta.t, sessions, &blocks)?;
    FmriDataset::new(parcellation, series, design)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Write a dataset directory in the layout read by [`load_dataset`].
pub fn save_dataset(dataset: &FmriDataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_file(
        &root.join(PARCELLATION_FILE),
        format_parcellation(&dataset.parcellation).as_bytes(),
    )?;
    write_file(&root.join(SERIES_FILE), &matrix_to_bytes(&dataset.series))?;
    let meta = Meta {
        v: dataset.n_voxels(),
        t: dataset.n_scans(),
        tr_seconds: dataset.design.tr_seconds,
        sessions: dataset.design.sessions.iter().map(|&(a, b)| [a, b]).collect(),
        task_blocks: dataset.design.task_blocks().iter().map(|&(a, b)| [a, b]).collect(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::format(META_FILE, e.to_string()))?;
    write_file(&root.join(META_FILE), format!("{json}\n").as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube_parcellation(nx: i64, ny: i64, nz: i64) -> Parcellation {
        let mut voxels = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    voxels.push(Voxel {
                        id: voxels.len() + 1,
                        coord: [x, y, z],
                        roi: if x < nx / 2 { 1 } else { 2 },
                    });
                }
            }
        }
        Parcellation::new(voxels).unwrap()
    }

    #[test]
    fn alternating_design_matches_three_sessions_of_48() {
        let d = BlockDesign::alternating(2.0, 48).unwrap();
        assert_eq!(d.n_scans, 144);
        assert_eq!(d.sessions, vec![(1, 48), (49, 96), (97, 144)]);
        assert_eq!(d.task[..8], [0; 8]);
        assert_eq!(d.task[8..16], [1; 8]);
        assert_eq!(d.task_blocks().len(), 9);
        assert_eq!(d.task.iter().map(|&s| s as usize).sum::<usize>(), 72);
    }

    #[test]
    fn overlapping_sessions_rejected() {
        let err = BlockDesign::from_blocks(2.0, 20, vec![(1, 12), (10, 20)], &[(3, 5)]).unwrap_err();
        assert!(matches!(err, Error::InvalidDesign(_)));
    }

    #[test]
    fn parcellation_invariants() {
        let dup = vec![
            Voxel { id: 1, coord: [0, 0, 0], roi: 1 },
            Voxel { id: 2, coord: [0, 0, 0], roi: 1 },
        ];
        assert!(Parcellation::new(dup).is_err());
        let gap = vec![
            Voxel { id: 1, coord: [0, 0, 0], roi: 1 },
            Voxel { id: 3, coord: [1, 0, 0], roi: 1 },
        ];
        assert!(Parcellation::new(gap).is_err());
        let empty_roi = vec![
            Voxel { id: 1, coord: [0, 0, 0], roi: 1 },
            Voxel { id: 2, coord: [1, 0, 0], roi: 3 },
        ];
        assert!(Parcellation::new(empty_roi).is_err());
    }

    #[test]
    fn csv_round_trip_and_row_order_independence() {
        let p = cube_parcellation(4, 2, 1);
        let text = format_parcellation(&p);
        assert_eq!(parse_parcellation(&text).unwrap(), p);
        let mut lines: Vec<&str> = text.lines().collect();
        lines[1..].reverse();
        let shuffled = lines.join("\n");
        assert_eq!(parse_parcellation(&shuffled).unwrap(), p);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = cube_parcellation(4, 2, 1);
        let design = BlockDesign::from_blocks(2.0, 12, vec![(1, 4), (5, 8), (9, 12)], &[(3, 4), (7, 8), (11, 12)])
            .unwrap();
        let series = DMatrix::from_fn(8, 12, |i, j| (i * 12 + j) as f64 * 0.5 + ((i + j) as f64).sin());
        let ds = FmriDataset::new(p, series, design).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.n_voxels(), 8);
        assert_eq!(back.n_scans(), 12);
        assert_eq!(back, ds);
    }

    #[test]
    fn wrong_blob_length_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = cube_parcellation(4, 2, 1);
        let design = BlockDesign::from_blocks(2.0, 12, vec![(1, 4), (5, 8), (9, 12)], &[(3, 4), (7, 8), (11, 12)])
            .unwrap();
        let series = DMatrix::from_fn(8, 12, |i, j| (i + 2 * j) as f64 + ((i * j) as f64).cos());
        save_dataset(&FmriDataset::new(p, series, design).unwrap(), dir.path()).unwrap();
        let path = dir.path().join(SERIES_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()).unwrap_err(), Error::SizeMismatch(_)));
        fs::remove_file(&path).unwrap();
        assert!(matches!(load_dataset(dir.path()).unwrap_err(), Error::MissingFile(_)));
    }

    #[test]
    fn non_finite_series_rejected() {
        let p = cube_parcellation(4, 2, 1);
        let design = BlockDesign::from_blocks(2.0, 12, vec![(1, 4), (5, 8), (9, 12)], &[(3, 4), (7, 8), (11, 12)])
            .unwrap();
        let mut series = DMatrix::from_fn(8, 12, |i, j| (i + j) as f64);
        series[(3, 5)] = f64::NAN;
        assert!(matches!(FmriDataset::new(p, series, design).unwrap_err(), Error::NonFinite(_)));
    }
}
