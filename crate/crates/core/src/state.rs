//! Persisted pipeline state: one key-value text file per stage plus raw
//! little-endian `.f64` matrix blobs, each with a `.dims` sidecar.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::activation::{BasisTerm, FourierBasis, RoiActivation, VoxelTest};
use crate::dataset::{matrix_from_bytes, matrix_to_bytes};
use crate::error::{Error, Result};
use crate::localcov::{AngleMode, AnisoParams, RoiCovModel, SubregionPartition};
use crate::regional::{CvResult, GlassoResult};
use crate::select::GridConfig;
use crate::shrinkage::{ContrastFit, ShrinkageResult};
use crate::temporal::{Ar2Params, VoxelFit};

pub const STATE_VERSION: &str = "1";
const INDEX_FILE: &str = "state.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Temporal,
    Local,
    Regional,
    Activation,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Temporal, Stage::Local, Stage::Regional, Stage::Activation];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Temporal => "temporal",
            Stage::Local => "local",
            Stage::Regional => "regional",
            Stage::Activation => "activation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }

    /// The stage whose record must be present before this one.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Temporal => None,
            Stage::Local => Some(Stage::Temporal),
            Stage::Regional | Stage::Activation => Some(Stage::Local),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

/// Everything stage 2 produces for one ROI.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiRecord {
    pub config: GridConfig,
    /// Frozen-angle BIC of the selected grid.
    pub bic: f64,
    pub visited: Vec<(GridConfig, f64)>,
    pub model: RoiCovModel,
    pub shrinkage: ShrinkageResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionalRecord {
    /// Sample covariance of the ROI-mean residuals.
    pub a: DMatrix<f64>,
    pub glasso: GlassoResult,
    pub cv: CvResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub rois: Vec<RoiActivation>,
    /// Indexed by voxel (0-based position in the parcellation).
    pub tests: Vec<VoxelTest>,
    pub reject: Vec<bool>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitState {
    pub provenance: Provenance,
    pub voxel_fits: Option<Vec<VoxelFit>>,
    pub roi_models: Option<Vec<RoiRecord>>,
    pub regional: Option<RegionalRecord>,
    pub activation: Option<ActivationRecord>,
}

impl FitState {
    pub fn has(&self, stage: Stage) -> bool {
        match stage {
            Stage::Temporal => self.voxel_fits.is_some(),
            Stage::Local => self.roi_models.is_some(),
            Stage::Regional => self.regional.is_some(),
            Stage::Activation => self.activation.is_some(),
        }
    }

    pub fn stages(&self) -> Vec<Stage> {
        Stage::ALL.into_iter().filter(|&s| self.has(s)).collect()
    }

    /// Drops `stage` and every stage that depends on it.
    pub fn clear_from(&mut self, stage: Stage) {
        for s in Stage::ALL {
            if s >= stage && (s == stage || depends_on(s, stage)) {
                match s {
                    Stage::Temporal => self.voxel_fits = None,
                    Stage::Local => self.roi_models = None,
                    Stage::Regional => self.regional = None,
                    Stage::Activation => self.activation = None,
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in self.stages() {
            if let Some(pre) = s.prerequisite() {
                if !self.has(pre) {
                    return Err(Error::StateInvariant(format!(
                        "{} record present without {} record",
                        s.name(),
                        pre.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

fn depends_on(s: Stage, on: Stage) -> bool {
    let mut cur = s.prerequisite();
    while let Some(p) = cur {
        if p == on {
            return true;
        }
        cur = p.prerequisite();
    }
    false
}

// ---------------------------------------------------------------------------
// Key-value text

#[derive(Debug, Default)]
struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    fn put(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.push((key.into(), value.to_string()));
    }

    fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

struct Parsed {
    file: PathBuf,
    map: BTreeMap<String, String>,
}

impl Parsed {
    fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path.display().to_string(), format!("line {} has no '='", i + 1)))?;
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::format(path.display().to_string(), format!("duplicate key {k}")));
            }
        }
        Ok(Self {
            file: path.to_path_buf(),
            map,
        })
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(self.file.display().to_string(), format!("missing key {key}")))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|_| Error::format(self.file.display().to_string(), format!("bad value for {key}: {raw}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.raw(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::format(self.file.display().to_string(), format!("bad entry in {key}: {s}")))
            })
            .collect()
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn read_text(path: &Path) -> Result<String> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingFile(path.to_path_buf())),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_matrix(dir: &Path, name: &str, m: &DMatrix<f64>) -> Result<()> {
    write_file(&dir.join(format!("{name}.f64")), &matrix_to_bytes(m))?;
    write_file(&dir.join(format!("{name}.dims")), format!("{} {}\n", m.nrows(), m.ncols()).as_bytes())
}

fn read_matrix(dir: &Path, name: &str) -> Result<DMatrix<f64>> {
    let dims_path = dir.join(format!("{name}.dims"));
    let dims = read_text(&dims_path)?;
    let parts: Vec<usize> = dims
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| Error::format(dims_path.display().to_string(), "bad dimension")))
        .collect::<Result<_>>()?;
    if parts.len() != 2 {
        return Err(Error::format(dims_path.display().to_string(), "expected 'rows cols'"));
    }
    let blob = dir.join(format!("{name}.f64"));
    let bytes = match fs::read(&blob) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(blob)),
        Err(e) => return Err(Error::io(&blob, e)),
    };
    matrix_from_bytes(&bytes, parts[0], parts[1])
}

fn column(values: impl IntoIterator<Item = f64>) -> DMatrix<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    DMatrix::from_column_slice(v.len(), 1, &v)
}

fn parse_grid(s: &str) -> Option<GridConfig> {
    let v: Vec<usize> = s.split('x').map(|p| p.parse().ok()).collect::<Option<_>>()?;
    (v.len() == 3).then(|| GridConfig::new(v[0], v[1], v[2]))
}

// ---------------------------------------------------------------------------
// Stage writers and readers

fn save_temporal(dir: &Path, fits: &[VoxelFit]) -> Result<()> {
    let p = fits.first().map_or(0, |f| f.beta.len());
    if fits.iter().any(|f| f.beta.len() != p) {
        return Err(Error::StateInvariant("voxel fits have differing coefficient counts".into()));
    }
    let beta = DMatrix::from_fn(fits.len(), p, |v, j| fits[v].beta[j]);
    let ar = DMatrix::from_fn(fits.len(), 3, |v, j| {
        let a = fits[v].ar;
        [a.phi1, a.phi2, a.sigma2][j]
    });
    let mut kv = KeyValues::default();
    kv.put("n_voxels", fits.len());
    kv.put("n_beta", p);
    write_matrix(dir, "temporal.beta", &beta)?;
    write_matrix(dir, "temporal.ar", &ar)?;
    write_matrix(dir, "temporal.loglik", &column(fits.iter().map(|f| f.loglik)))?;
    write_file(&dir.join("temporal.txt"), kv.render().as_bytes())
}

fn load_temporal(dir: &Path) -> Result<Vec<VoxelFit>> {
    let kv = Parsed::read(&dir.join("temporal.txt"))?;
    let n: usize = kv.get("n_voxels")?;
    let p: usize = kv.get("n_beta")?;
    let beta = read_matrix(dir, "temporal.beta")?;
    let ar = read_matrix(dir, "temporal.ar")?;
    let ll = read_matrix(dir, "temporal.loglik")?;
    if beta.shape() != (n, p) || ar.shape() != (n, 3) || ll.shape() != (n, 1) {
        return Err(Error::format("temporal stage", "matrix shapes disagree with temporal.txt"));
    }
    Ok((0..n)
        .map(|v| VoxelFit {
            beta: beta.row(v).iter().copied().collect(),
            ar: Ar2Params::new(ar[(v, 0)], ar[(v, 1)], ar[(v, 2)]),
            loglik: ll[(v, 0)],
        })
        .collect())
}

fn save_local(dir: &Path, rois: &[RoiRecord]) -> Result<()> {
    let mut kv = KeyValues::default();
    kv.put("n_rois", rois.len());
    for (i, rec) in rois.iter().enumerate() {
        let r = i + 1;
        let m = &rec.model;
        kv.put(format!("roi.{r}.config"), rec.config);
        kv.put(format!("roi.{r}.bic"), rec.bic);
        let visited: Vec<String> = rec.visited.iter().map(|(c, b)| format!("{c}:{b}")).collect();
        kv.put(format!("roi.{r}.visited"), visited.join(";"));
        kv.put(format!("roi.{r}.mode"), m.mode.name());
        kv.put(format!("roi.{r}.omega"), m.omega);
        kv.put(format!("roi.{r}.loglik"), m.loglik);
        kv.put(format!("roi.{r}.delta"), rec.shrinkage.delta);
        kv.put(format!("roi.{r}.objective"), rec.shrinkage.objective);
        kv.put(format!("roi.{r}.n_curves"), rec.shrinkage.curves.len());
        for (c, curve) in rec.shrinkage.curves.iter().enumerate() {
            let key = format!("roi.{r}.curve.{c}");
            kv.put(format!("{key}.axis"), curve.axis);
            kv.put(format!("{key}.slices"), join(&curve.slices));
            kv.put(format!("{key}.empirical"), join(&curve.empirical));
            kv.put(format!("{key}.smoothed"), join(&curve.smoothed));
            kv.put(format!("{key}.model"), join(&curve.model));
        }
        let params = DMatrix::from_fn(m.params.len(), 6, |l, j| {
            let p = &m.params[l];
            [p.nu, p.lengths[0], p.lengths[1], p.lengths[2], p.xi1, p.xi2][j]
        });
        let centroids = DMatrix::from_fn(m.partition.centroids.len(), 3, |l, j| m.partition.centroids[l][j]);
        let base = format!("local.roi{r}");
        write_matrix(dir, &format!("{base}.params"), &params)?;
        write_matrix(dir, &format!("{base}.centroids"), &centroids)?;
        write_matrix(
            dir,
            &format!("{base}.assignment"),
            &column(m.partition.assignment.iter().map(|&a| a as f64)),
        )?;
        write_matrix(dir, &format!("{base}.sigma1"), &m.sigma1)?;
        write_matrix(dir, &format!("{base}.shrunk"), &rec.shrinkage.shrunk)?;
    }
    write_file(&dir.join("local.txt"), kv.render().as_bytes())
}

fn load_local(dir: &Path) -> Result<Vec<RoiRecord>> {
    let kv = Parsed::read(&dir.join("local.txt"))?;
    let n_rois: usize = kv.get("n_rois")?;
    let bad = |what: &str| Error::format("local stage", what.to_string());
    (1..=n_rois)
        .map(|r| {
            let base = format!("local.roi{r}");
            let params_m = read_matrix(dir, &format!("{base}.params"))?;
            let centroids_m = read_matrix(dir, &format!("{base}.centroids"))?;
            let assign_m = read_matrix(dir, &format!("{base}.assignment"))?;
            if params_m.ncols() != 6 || centroids_m.ncols() != 3 || assign_m.ncols() != 1 {
                return Err(bad("parameter matrix shapes"));
            }
            let params = params_m
                .row_iter()
                .map(|row| AnisoParams {
                    nu: row[0],
                    lengths: [row[1], row[2], row[3]],
                    xi1: row[4],
                    xi2: row[5],
                })
                .collect();
            let partition = SubregionPartition {
                assignment: assign_m.iter().map(|&a| a as usize).collect(),
                centroids: centroids_m.row_iter().map(|row| [row[0], row[1], row[2]]).collect(),
            };
            let mode = AngleMode::parse(kv.raw(&format!("roi.{r}.mode"))?).ok_or_else(|| bad("unknown angle mode"))?;
            let model = RoiCovModel {
                partition,
                params,
                omega: kv.get(&format!("roi.{r}.omega"))?,
                mode,
                sigma1: read_matrix(dir, &format!("{base}.sigma1"))?,
                loglik: kv.get(&format!("roi.{r}.loglik"))?,
            };
            let n_curves: usize = kv.get(&format!("roi.{r}.n_curves"))?;
            let curves = (0..n_curves)
                .map(|c| {
                    let key = format!("roi.{r}.curve.{c}");
                    Ok(ContrastFit {
                        axis: kv.get(&format!("{key}.axis"))?,
                        slices: kv.list(&format!("{key}.slices"))?,
                        empirical: kv.list(&format!("{key}.empirical"))?,
                        smoothed: kv.list(&format!("{key}.smoothed"))?,
                        model: kv.list(&format!("{key}.model"))?,
                    })
                })
                .collect::<Result<_>>()?;
            let visited_raw = kv.raw(&format!("roi.{r}.visited"))?;
            let visited = if visited_raw.is_empty() {
                Vec::new()
            } else {
                visited_raw
                    .split(';')
                    .map(|item| {
                        let (c, b) = item.split_once(':').ok_or_else(|| bad("visited entry"))?;
                        let cfg = parse_grid(c).ok_or_else(|| bad("visited grid"))?;
                        let bic = b.parse().map_err(|_| bad("visited bic"))?;
                        Ok((cfg, bic))
                    })
                    .collect::<Result<_>>()?
            };
            Ok(RoiRecord {
                config: parse_grid(kv.raw(&format!("roi.{r}.config"))?).ok_or_else(|| bad("grid config"))?,
                bic: kv.get(&format!("roi.{r}.bic"))?,
                visited,
                model,
                shrinkage: ShrinkageResult {
                    delta: kv.get(&format!("roi.{r}.delta"))?,
                    shrunk: read_matrix(dir, &format!("{base}.shrunk"))?,
                    curves,
                    objective: kv.get(&format!("roi.{r}.objective"))?,
                },
            })
        })
        .collect()
}

fn save_regional(dir: &Path, rec: &RegionalRecord) -> Result<()> {
    let g = &rec.glasso;
    let mut kv = KeyValues::default();
    kv.put("lambda", g.lambda);
    kv.put("nnz_offdiag", g.nnz_offdiag);
    kv.put("objective", g.objective);
    kv.put("sweeps", g.sweeps);
    kv.put("jitter", g.jitter);
    kv.put("cv.lambda", rec.cv.lambda);
    let curve: Vec<String> = rec.cv.sse_curve.iter().map(|(l, s)| format!("{l}:{s}")).collect();
    kv.put("cv.sse_curve", curve.join(";"));
    kv.put("cv.test_columns", join(&rec.cv.test_columns));
    write_matrix(dir, "regional.a", &rec.a)?;
    write_matrix(dir, "regional.precision", &g.precision)?;
    write_file(&dir.join("regional.txt"), kv.render().as_bytes())
}

fn load_regional(dir: &Path) -> Result<RegionalRecord> {
    let kv = Parsed::read(&dir.join("regional.txt"))?;
    let bad = || Error::format("regional stage", "malformed cv.sse_curve");
    let raw = kv.raw("cv.sse_curve")?;
    let sse_curve = if raw.is_empty() {
        Vec::new()
    } else {
        raw.split(';')
            .map(|item| {
                let (l, s) = item.split_once(':').ok_or_else(bad)?;
                Ok((l.parse().map_err(|_| bad())?, s.parse().map_err(|_| bad())?))
            })
            .collect::<Result<_>>()?
    };
    Ok(RegionalRecord {
        a: read_matrix(dir, "regional.a")?,
        glasso: GlassoResult {
            precision: read_matrix(dir, "regional.precision")?,
            lambda: kv.get("lambda")?,
            nnz_offdiag: kv.get("nnz_offdiag")?,
            objective: kv.get("objective")?,
            sweeps: kv.get("sweeps")?,
            jitter: kv.get("jitter")?,
        },
        cv: CvResult {
            lambda: kv.get("cv.lambda")?,
            sse_curve,
            test_columns: kv.list("cv.test_columns")?,
        },
    })
}

fn term_code(t: &BasisTerm) -> String {
    format!("{}:{}:{}", t.axis, t.harmonic, if t.sine { 's' } else { 'c' })
}

fn parse_term(s: &str) -> Option<BasisTerm> {
    let mut it = s.split(':');
    let axis = it.next()?.parse().ok()?;
    let harmonic = it.next()?.parse().ok()?;
    let sine = match it.next()? {
        "s" => true,
        "c" => false,
        _ => return None,
    };
    it.next().is_none().then_some(BasisTerm { axis, harmonic, sine })
}

fn save_activation(dir: &Path, rec: &ActivationRecord) -> Result<()> {
    let mut kv = KeyValues::default();
    kv.put("n_rois", rec.rois.len());
    kv.put("n_voxels", rec.tests.len());
    for (i, roi) in rec.rois.iter().enumerate() {
        let r = i + 1;
        let terms: Vec<String> = roi.basis.terms.iter().map(term_code).collect();
        kv.put(format!("roi.{r}.terms"), terms.join(","));
        let base = format!("activation.roi{r}");
        write_matrix(dir, &format!("{base}.coef"), &column(roi.coef.iter().copied()))?;
        write_matrix(dir, &format!("{base}.cov"), &roi.cov)?;
        write_matrix(dir, &format!("{base}.basis"), &roi.basis.matrix)?;
    }
    let tests = DMatrix::from_fn(rec.tests.len(), 5, |v, j| {
        let t = &rec.tests[v];
        [t.contrast, t.se, t.z, t.p, f64::from(u8::from(rec.reject[v]))][j]
    });
    write_matrix(dir, "activation.tests", &tests)?;
    write_file(&dir.join("activation.txt"), kv.render().as_bytes())
}

fn load_activation(dir: &Path) -> Result<ActivationRecord> {
    let kv = Parsed::read(&dir.join("activation.txt"))?;
    let n_rois: usize = kv.get("n_rois")?;
    let n_vox: usize = kv.get("n_voxels")?;
    let bad = |what: &str| Error::format("activation stage", what.to_string());
    let rois = (1..=n_rois)
        .map(|r| {
            let base = format!("activation.roi{r}");
            let raw = kv.raw(&format!("roi.{r}.terms"))?;
            let terms: Vec<BasisTerm> = if raw.is_empty() {
                Vec::new()
            } else {
                raw.split(',').map(parse_term).collect::<Option<_>>().ok_or_else(|| bad("basis term"))?
            };
            let coef = read_matrix(dir, &format!("{base}.coef"))?;
            Ok(RoiActivation {
                coef: coef.iter().copied().collect(),
                cov: read_matrix(dir, &format!("{base}.cov"))?,
                basis: FourierBasis {
                    matrix: read_matrix(dir, &format!("{base}.basis"))?,
                    terms,
                },
            })
        })
        .collect::<Result<_>>()?;
    let tests_m = read_matrix(dir, "activation.tests")?;
    if tests_m.shape() != (n_vox, 5) {
        return Err(bad("tests matrix shape"));
    }
    let tests = tests_m
        .row_iter()
        .map(|row| VoxelTest {
            contrast: row[0],
            se: row[1],
            z: row[2],
            p: row[3],
        })
        .collect();
    let reject = tests_m.column(4).iter().map(|&x| x != 0.0).collect();
    Ok(ActivationRecord { rois, tests, reject })
}

/// True for files this module writes for `stage`.
fn stage_file(name: &str, stage: Stage) -> bool {
    let prefix = stage.name();
    name.strip_prefix(prefix)
        .is_some_and(|rest| rest.starts_with('.'))
}

/// Writes every present stage, removes files of absent stages, and writes
/// the index last so an interrupted save never lists a partial stage.
pub fn save_state(state: &FitState, dir: &Path) -> Result<()> {
    state.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index = dir.join(INDEX_FILE);
    if index.exists() {
        fs::remove_file(&index).map_err(|e| Error::io(&index, e))?;
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if Stage::ALL.iter().any(|&s| stage_file(&name, s)) {
            fs::remove_file(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        }
    }
    if let Some(f) = &state.voxel_fits {
        save_temporal(dir, f)?;
    }
    if let Some(r) = &state.roi_models {
        save_local(dir, r)?;
    }
    if let Some(r) = &state.regional {
        save_regional(dir, r)?;
    }
    if let Some(a) = &state.activation {
        save_activation(dir, a)?;
    }
    let mut kv = KeyValues::default();
    kv.put("version", STATE_VERSION);
    kv.put("seed", state.provenance.seed);
    kv.put("config_hash", &state.provenance.config_hash);
    let names: Vec<&str> = state.stages().into_iter().map(Stage::name).collect();
    kv.put("stages", names.join(","));
    write_file(&index, kv.render().as_bytes())
}

pub fn load_state(dir: &Path) -> Result<FitState> {
    let kv = Parsed::read(&dir.join(INDEX_FILE))?;
    let version = kv.raw("version")?;
    if version != STATE_VERSION {
        return Err(Error::StateVersion {
            found: version.to_string(),
            expected: STATE_VERSION.to_string(),
        });
    }
    let stages: Vec<Stage> = kv
        .list::<String>("stages")?
        .iter()
        .map(|s| Stage::parse(s).ok_or_else(|| Error::format(INDEX_FILE, format!("unknown stage {s}"))))
        .collect::<Result<_>>()?;
    let mut state = FitState {
        provenance: Provenance {
            seed: kv.get("seed")?,
            config_hash: kv.raw("config_hash")?.to_string(),
        },
        ..FitState::default()
    };
    for s in stages {
        match s {
            Stage::Temporal => state.voxel_fits = Some(load_temporal(dir)?),
            Stage::Local => state.roi_models = Some(load_local(dir)?),
            Stage::Regional => state.regional = Some(load_regional(dir)?),
            Stage::Activation => state.activation = Some(load_activation(dir)?),
        }
    }
    state.validate()?;
    Ok(state)
}
