//! Checkpoints, grid field files, run configs and CSV slices.
//!
//! Binary files are little-endian and end in a 64-bit checksum: the first
//! eight bytes of the SHA-256 of everything before it.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridField, DEFAULT_CFL};
use crate::net::NetParams;
use crate::systems::{Mode, SystemSpec};
use crate::train::{Precision, TrainConfig};
use crate::value::{is_safe, ValueFunction, Variant};
use crate::verify::VerifyConfig;

const CHECKPOINT_MAGIC: &[u8; 8] = b"HJRCKPT\0";
const FIELD_MAGIC: &[u8; 8] = b"HJRGRID\0";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const FIELD_VERSION: u32 = 1;
pub const SCHEMA_VERSION: u32 = 1;

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn seal(mut buf: Vec<u8>) -> Vec<u8> {
    let sum = checksum(&buf);
    buf.extend(sum.to_le_bytes());
    buf
}

/// Verifies and strips the trailing checksum.
fn unseal<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    if bytes.len() < 8 {
        return Err(Error::Checksum { path: path.into() });
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    if checksum(payload).to_le_bytes() != tail {
        return Err(Error::Checksum { path: path.into() });
    }
    Ok(payload)
}

/// Cursor over a verified payload.
struct Reader<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(self.bad("unexpected end of payload"));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.bad("length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn bad(&self, reason: &str) -> Error {
        Error::Format {
            path: self.path.into(),
            reason: reason.into(),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(self.bad("trailing bytes after payload"))
        }
    }
}

fn header<'a>(bytes: &'a [u8], path: &'a Path, magic: &[u8; 8], version: u32) -> Result<Reader<'a>> {
    let payload = unseal(bytes, path)?;
    let mut r = Reader {
        bytes: payload,
        path,
    };
    if r.take(8)? != magic {
        return Err(r.bad("wrong magic bytes"));
    }
    let found = r.u32()?;
    if found != version {
        return Err(r.bad(&format!("format version {found}, expected {version}")));
    }
    Ok(r)
}

/// Trained parameters plus the metadata needed to use them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub system: String,
    pub params_hash: u64,
    pub variant: Variant,
    pub precision: Precision,
    /// Completed training iterations (0 after pretraining).
    pub iteration: u64,
    pub vanilla_scale: f64,
    pub params: NetParams,
}

impl Checkpoint {
    pub fn new(sys: &SystemSpec, cfg: &TrainConfig, iteration: u64, params: NetParams) -> Self {
        Self {
            system: sys.name.clone(),
            params_hash: sys.params_hash(),
            variant: cfg.variant,
            precision: cfg.precision,
            iteration,
            vanilla_scale: cfg.vanilla_scale,
            params,
        }
    }

    /// Refuses a checkpoint made for a different system definition.
    pub fn check_system(&self, sys: &SystemSpec) -> Result<()> {
        if self.system != sys.name || self.params_hash != sys.params_hash() {
            return Err(Error::Metadata(format!(
                "checkpoint is for system `{}` (hash {:016x}), run is for `{}` (hash {:016x})",
                self.system,
                self.params_hash,
                sys.name,
                sys.params_hash()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(CHECKPOINT_MAGIC);
        b.extend(CHECKPOINT_VERSION.to_le_bytes());
        b.extend((self.system.len() as u32).to_le_bytes());
        b.extend(self.system.as_bytes());
        b.extend(self.params_hash.to_le_bytes());
        b.push(self.variant.tag());
        b.push(self.precision.tag());
        b.extend((self.params.layer_sizes.len() as u32).to_le_bytes());
        for &d in &self.params.layer_sizes {
            b.extend((d as u32).to_le_bytes());
        }
        b.extend(self.params.omega0.to_le_bytes());
        b.extend(self.vanilla_scale.to_le_bytes());
        b.extend(self.iteration.to_le_bytes());
        let flat = self.params.to_flat();
        b.extend((flat.len() as u64).to_le_bytes());
        for v in flat {
            b.extend(v.to_le_bytes());
        }
        seal(b)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = header(bytes, path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let name_len = r.u32()? as usize;
        let system = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| r.bad("system name is not UTF-8"))?;
        let params_hash = r.u64()?;
        let variant = Variant::from_tag(r.u8()?).ok_or_else(|| r.bad("unknown variant tag"))?;
        let precision =
            Precision::from_tag(r.u8()?).ok_or_else(|| r.bad("unknown precision tag"))?;
        let n_layers = r.u32()? as usize;
        let mut layer_sizes = Vec::with_capacity(n_layers.min(64));
        for _ in 0..n_layers {
            layer_sizes.push(r.u32()? as usize);
        }
        let omega0 = r.f64()?;
        let vanilla_scale = r.f64()?;
        let iteration = r.u64()?;
        let n = r.u64()? as usize;
        let flat = r.f64s(n)?;
        r.finish()?;
        let params = NetParams::from_flat(&layer_sizes, omega0, &flat).map_err(|e| Error::Format {
            path: path.into(),
            reason: e.to_string(),
        })?;
        Ok(Self {
            system,
            params_hash,
            variant,
            precision,
            iteration,
            vanilla_scale,
            params,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?, path)
}

pub fn field_to_bytes(field: &GridField) -> Vec<u8> {
    let g = &field.grid;
    let mut b = Vec::new();
    b.extend(FIELD_MAGIC);
    b.extend(FIELD_VERSION.to_le_bytes());
    b.extend((g.dims() as u32).to_le_bytes());
    for k in 0..g.dims() {
        b.extend(g.mins[k].to_le_bytes());
        b.extend(g.maxs[k].to_le_bytes());
        b.extend((g.counts[k] as u64).to_le_bytes());
        b.push(g.periodic[k] as u8);
    }
    b.extend(field.time.to_le_bytes());
    for v in &field.values {
        b.extend(v.to_le_bytes());
    }
    seal(b)
}

pub fn field_from_bytes(bytes: &[u8], path: &Path) -> Result<GridField> {
    let mut r = header(bytes, path, FIELD_MAGIC, FIELD_VERSION)?;
    let dims = r.u32()? as usize;
    if dims == 0 || dims > crate::grid::MAX_DIMS {
        return Err(r.bad("unsupported grid dimension"));
    }
    let (mut mins, mut maxs, mut counts, mut periodic) = (vec![], vec![], vec![], vec![]);
    for _ in 0..dims {
        mins.push(r.f64()?);
        maxs.push(r.f64()?);
        counts.push(r.u64()? as usize);
        periodic.push(r.u8()? != 0);
    }
    let time = r.f64()?;
    let fmt = |e: Error| Error::Format {
        path: path.into(),
        reason: e.to_string(),
    };
    let grid = Grid::new(mins, maxs, counts, periodic).map_err(fmt)?;
    let values = r.f64s(grid.len())?;
    r.finish()?;
    GridField::new(grid, values, time).map_err(fmt)
}

pub fn save_field(path: &Path, field: &GridField) -> Result<()> {
    write_atomic(path, &field_to_bytes(field))
}

pub fn load_field(path: &Path) -> Result<GridField> {
    field_from_bytes(&std::fs::read(path)?, path)
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// `[system]`: a named preset with optional overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub name: String,
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub params: std::collections::BTreeMap<String, f64>,
}

impl SystemConfig {
    pub fn build(&self) -> Result<SystemSpec> {
        let mut sys = SystemSpec::by_name(&self.name)?;
        if let Some(mode) = self.mode {
            sys.mode = mode;
        }
        if let Some(h) = self.horizon {
            sys.horizon = h;
        }
        for (k, v) in &self.params {
            sys.set_param(k, *v)?;
        }
        sys.validate()?;
        Ok(sys)
    }
}

/// `[grid]`: resolution of the oracle solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub counts: Vec<usize>,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
}

fn default_cfl() -> f64 {
    DEFAULT_CFL
}

/// `[slice]`: a two-dimensional cut through the state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSpec {
    /// The two free state dimensions.
    pub dims: [usize; 2],
    /// Values of the other dimensions; entries at the free dimensions are ignored.
    pub fixed: Vec<f64>,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default)]
    pub time: f64,
    /// Level-set correction used for the `safe` column.
    #[serde(default)]
    pub delta: f64,
}

fn default_resolution() -> usize {
    201
}

/// `[output]`: where artifacts go. Relative paths resolve against `dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_checkpoint")]
    pub checkpoint: PathBuf,
    #[serde(default = "default_field")]
    pub field: PathBuf,
    #[serde(default = "default_slice")]
    pub slice: PathBuf,
    #[serde(default = "default_report")]
    pub report: PathBuf,
    #[serde(default = "default_train_log")]
    pub train_log: PathBuf,
}

fn default_dir() -> PathBuf {
    "out".into()
}
fn default_checkpoint() -> PathBuf {
    "model.ckpt".into()
}
fn default_field() -> PathBuf {
    "field.grid".into()
}
fn default_slice() -> PathBuf {
    "slice.csv".into()
}
fn default_report() -> PathBuf {
    "runs.jsonl".into()
}
fn default_train_log() -> PathBuf {
    "train.jsonl".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            checkpoint: default_checkpoint(),
            field: default_field(),
            slice: default_slice(),
            report: default_report(),
            train_log: default_train_log(),
        }
    }
}

impl OutputConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }
}

/// Everything one run needs, stored as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub system: SystemConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub slice: Option<SliceSpec>,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.train.validate()?;
        cfg.verify.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }
}

/// The points of a slice, row-major with the second free dimension fastest.
pub fn slice_points(sys: &SystemSpec, spec: &SliceSpec) -> Result<Vec<Vec<f64>>> {
    let n = sys.state_dim();
    let [a, b] = spec.dims;
    if a == b {
        return Err(Error::config("slice dimensions must be distinct"));
    }
    if a >= n || b >= n {
        return Err(Error::config(format!("slice dimension out of range for a {n}-D state")));
    }
    if spec.fixed.len() != n {
        return Err(Error::dim("slice fixed values", n, spec.fixed.len()));
    }
    if spec.resolution < 2 {
        return Err(Error::config("slice resolution must be at least 2"));
    }
    let axis = |k: usize| -> Vec<f64> {
        let (lo, hi) = (sys.domain_lo[k], sys.domain_hi[k]);
        let last = (spec.resolution - 1) as f64;
        (0..spec.resolution)
            .map(|i| lo + (hi - lo) * i as f64 / last)
            .collect()
    };
    let (xa, xb) = (axis(a), axis(b));
    let mut pts = Vec::with_capacity(spec.resolution * spec.resolution);
    for va in &xa {
        for vb in &xb {
            let mut x = spec.fixed.clone();
            x[a] = *va;
            x[b] = *vb;
            pts.push(x);
        }
    }
    Ok(pts)
}

/// Writes `dim_a, dim_b, V, l, safe` rows for precomputed values.
pub fn write_slice_csv<W: Write>(
    sys: &SystemSpec,
    spec: &SliceSpec,
    points: &[Vec<f64>],
    values: &[f64],
    mut w: W,
) -> Result<()> {
    let [a, b] = spec.dims;
    writeln!(w, "x{a},x{b},V,l,safe")?;
    for (x, v) in points.iter().zip(values) {
        let safe = is_safe(sys.mode, *v, spec.delta) as u8;
        writeln!(w, "{},{},{},{},{}", x[a], x[b], v, sys.target_fn(x), safe)?;
    }
    Ok(())
}

pub fn export_model_slice<W: Write>(vf: &dyn ValueFunction, spec: &SliceSpec, w: W) -> Result<()> {
    let sys = vf.system();
    let pts = slice_points(sys, spec)?;
    let values = vf.values_at(&pts, spec.time)?;
    write_slice_csv(sys, spec, &pts, &values, w)
}

/// Slice of a grid field by multilinear interpolation. The field's own time is
/// used; `spec.time` is ignored.
pub fn export_field_slice<W: Write>(
    field: &GridField,
    sys: &SystemSpec,
    spec: &SliceSpec,
    w: W,
) -> Result<()> {
    if field.grid.dims() != sys.state_dim() {
        return Err(Error::dim("grid dimensions", sys.state_dim(), field.grid.dims()));
    }
    let pts = slice_points(sys, spec)?;
    let values: Vec<f64> = pts.iter().map(|x| field.interpolate(x)).collect();
    write_slice_csv(sys, spec, &pts, &values, w)
}
