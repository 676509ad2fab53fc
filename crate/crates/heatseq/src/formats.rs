//! On-disk formats: binary trajectory container, binary model checkpoint,
//! CSV exports, and grayscale portable-anymap images. Everything is
//! little-endian with a magic + version + dimension header so corrupt or
//! mismatched files fail loudly rather than load garbage.

use crate::error::{Error, Result};
use crate::fdsolver::Trajectory;
use crate::geometry::PlateGeometry;
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::scenario::{BoundarySpec, CaseSpec, ScenarioMode, Segment, Side};
use crate::training::TrainingHistory;
use ndarray::{Array2, Array3, ArrayD};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 4] = b"HTFD";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

// ---------- primitive readers/writers ----------

fn w_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn w_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn w_f32(buf: &mut Vec<u8>, v: f32) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn w_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format(format!(
                "truncated file while reading {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after expected end of file",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn side_tag(side: Side) -> u8 {
    match side {
        Side::Left => 0,
        Side::Right => 1,
        Side::Top => 2,
        Side::Bottom => 3,
    }
}

fn side_from_tag(tag: u8) -> Result<Side> {
    match tag {
        0 => Ok(Side::Left),
        1 => Ok(Side::Right),
        2 => Ok(Side::Top),
        3 => Ok(Side::Bottom),
        other => Err(Error::Format(format!("unknown boundary side tag {other}"))),
    }
}

fn mode_tag(mode: ScenarioMode) -> u8 {
    match mode {
        ScenarioMode::Base => 0,
        ScenarioMode::Challenge1 => 1,
        ScenarioMode::Challenge2 => 2,
    }
}

fn mode_from_tag(tag: u8) -> Result<ScenarioMode> {
    match tag {
        0 => Ok(ScenarioMode::Base),
        1 => Ok(ScenarioMode::Challenge1),
        2 => Ok(ScenarioMode::Challenge2),
        other => Err(Error::Format(format!("unknown scenario mode tag {other}"))),
    }
}

// ---------- trajectory container ----------

/// Serialize one split's trajectories. Values are stored as f32; loading
/// recovers them within storage precision, and save -> load -> save is
/// byte-stable.
pub fn save_trajectories(
    path: &Path,
    mode: ScenarioMode,
    trajectories: &[Trajectory],
) -> Result<()> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::Domain("cannot save an empty split".into()))?;
    let (t, ny, nx) = first.frames.dim();
    let stride = first.record_stride;
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    w_u32(&mut buf, DATASET_VERSION);
    buf.push(mode_tag(mode));
    w_u32(&mut buf, trajectories.len() as u32);
    w_u16(&mut buf, ny as u16);
    w_u16(&mut buf, nx as u16);
    w_u32(&mut buf, t as u32);
    w_u32(&mut buf, stride as u32);
    for traj in trajectories {
        if traj.frames.dim() != (t, ny, nx) || traj.record_stride != stride {
            return Err(Error::Domain(
                "all trajectories in a split must share shape and stride".into(),
            ));
        }
        let case = &traj.case;
        for v in case.boundary.all_values() {
            w_f32(&mut buf, v as f32);
        }
        w_u16(&mut buf, case.boundary.segments.len() as u16);
        for seg in &case.boundary.segments {
            buf.push(side_tag(seg.side));
            w_u32(&mut buf, seg.start as u32);
            w_u32(&mut buf, seg.len as u32);
            w_f32(&mut buf, seg.value as f32);
        }
        w_f32(&mut buf, case.theta_init as f32);
        w_f32(&mut buf, case.beta as f32);
        w_f32(&mut buf, case.dtau as f32);
        for &v in traj.frames.iter() {
            w_f32(&mut buf, v as f32);
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_trajectories(path: &Path) -> Result<(ScenarioMode, Vec<Trajectory>)> {
    let data = std::fs::read(path)?;
    let mut r = Reader { data: &data, pos: 0 };
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::Format(format!(
            "{} is not a trajectory container (bad magic)",
            path.display()
        )));
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version} (expected {DATASET_VERSION})"
        )));
    }
    let mode = mode_from_tag(r.u8("mode tag")?)?;
    let n_cases = r.u32("case count")? as usize;
    let ny = r.u16("ny")? as usize;
    let nx = r.u16("nx")? as usize;
    let seq_len = r.u32("seq_len")? as usize;
    let stride = r.u32("record_stride")? as usize;
    let geometry = PlateGeometry::new(nx, ny)?;
    let mut out = Vec::with_capacity(n_cases);
    for ci in 0..n_cases {
        let mut side_vec = |len: usize, what: &str| -> Result<Vec<f64>> {
            (0..len)
                .map(|_| r.f32(what).map(f64::from))
                .collect()
        };
        let left = side_vec(ny, "left boundary")?;
        let right = side_vec(ny, "right boundary")?;
        let top = side_vec(nx, "top boundary")?;
        let bottom = side_vec(nx, "bottom boundary")?;
        let n_segs = r.u16("segment count")? as usize;
        let mut segments = Vec::with_capacity(n_segs);
        for _ in 0..n_segs {
            segments.push(Segment {
                side: side_from_tag(r.u8("segment side")?)?,
                start: r.u32("segment start")? as usize,
                len: r.u32("segment length")? as usize,
                value: r.f32("segment value")? as f64,
            });
        }
        let boundary = BoundarySpec {
            left,
            right,
            top,
            bottom,
            segments,
        };
        let theta_init = r.f32("theta_init")? as f64;
        let beta = r.f32("beta")? as f64;
        let dtau = r.f32("dtau")? as f64;
        if beta <= 0.0 || dtau <= 0.0 {
            return Err(Error::Format(format!(
                "case {ci}: nonpositive beta ({beta}) or dtau ({dtau})"
            )));
        }
        let mut frames = Array3::zeros((seq_len, ny, nx));
        for v in frames.iter_mut() {
            *v = r.f32("frame data")? as f64;
        }
        let steadiness = if seq_len >= 2 {
            let last = frames.index_axis(ndarray::Axis(0), seq_len - 1);
            let prev = frames.index_axis(ndarray::Axis(0), seq_len - 2);
            last.iter()
                .zip(prev.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max)
        } else {
            f64::INFINITY
        };
        out.push(Trajectory {
            frames,
            case: CaseSpec {
                geometry,
                boundary,
                theta_init,
                beta,
                dtau,
            },
            record_stride: stride,
            steadiness,
        });
    }
    r.done()?;
    Ok((mode, out))
}

// ---------- checkpoint ----------

fn config_kv(config: &ModelConfig) -> BTreeMap<String, String> {
    let mut kv = BTreeMap::new();
    kv.insert("ny".into(), config.ny.to_string());
    kv.insert("nx".into(), config.nx.to_string());
    kv.insert("seq_len".into(), config.seq_len.to_string());
    kv.insert("embed_dim".into(), config.embed_dim.to_string());
    kv.insert("num_heads".into(), config.num_heads.to_string());
    kv.insert(
        "num_encoder_layers".into(),
        config.num_encoder_layers.to_string(),
    );
    kv.insert("mlp_dim".into(), config.mlp_dim.to_string());
    kv.insert(
        "start_predicting_from".into(),
        config.start_predicting_from.to_string(),
    );
    kv.insert("mask".into(), config.mask_kind.to_string());
    kv.insert(
        "activation".into(),
        match config.activation {
            crate::model::Activation::Gelu => "gelu".into(),
            crate::model::Activation::Relu => "relu".into(),
        },
    );
    if let Some(scale) = config.pe_scale {
        kv.insert("pe_scale".into(), format!("{scale:e}"));
    }
    kv
}

fn parse_usize(kv: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    kv.get(key)
        .ok_or_else(|| Error::Format(format!("checkpoint config missing key `{key}`")))?
        .parse()
        .map_err(|_| Error::Format(format!("checkpoint config key `{key}` is not an integer")))
}

fn config_from_kv(kv: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let get = |key: &str| {
        kv.get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint config missing key `{key}`")))
    };
    let config = ModelConfig {
        ny: parse_usize(kv, "ny")?,
        nx: parse_usize(kv, "nx")?,
        seq_len: parse_usize(kv, "seq_len")?,
        embed_dim: parse_usize(kv, "embed_dim")?,
        num_heads: parse_usize(kv, "num_heads")?,
        num_encoder_layers: parse_usize(kv, "num_encoder_layers")?,
        mlp_dim: parse_usize(kv, "mlp_dim")?,
        start_predicting_from: parse_usize(kv, "start_predicting_from")?,
        mask_kind: get("mask")?.parse()?,
        activation: get("activation")?.parse()?,
        pe_scale: match kv.get("pe_scale") {
            Some(s) => Some(s.parse().map_err(|_| {
                Error::Format("checkpoint config key `pe_scale` is not a number".into())
            })?),
            None => None,
        },
    };
    config.validate()?;
    Ok(config)
}

/// Save parameters plus model config and free-form run metadata. Parameters
/// are stored at full f64 precision so a reload reproduces forward outputs
/// bit-exactly.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    config: &ModelConfig,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    w_u32(&mut buf, CHECKPOINT_VERSION);
    let mut text = String::new();
    for (k, v) in config_kv(config) {
        text.push_str(&format!("{k}={v}\n"));
    }
    for (k, v) in extra {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Config(format!("metadata key `{k}` not serializable")));
        }
        text.push_str(&format!("run.{k}={v}\n"));
    }
    w_u32(&mut buf, text.len() as u32);
    buf.extend_from_slice(text.as_bytes());

    let tensors = params.tensors();
    w_u32(&mut buf, tensors.len() as u32);
    for (name, tensor) in tensors {
        w_u16(&mut buf, name.len() as u16);
        buf.extend_from_slice(name.as_bytes());
        buf.push(tensor.ndim() as u8);
        for &d in tensor.shape() {
            w_u32(&mut buf, d as u32);
        }
        for &v in tensor.iter() {
            w_f64(&mut buf, v);
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(ModelParams, ModelConfig, BTreeMap<String, String>)> {
    let data = std::fs::read(path)?;
    let mut r = Reader { data: &data, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let text_len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(text_len, "config block")?)
        .map_err(|_| Error::Format("checkpoint config block is not UTF-8".into()))?;
    let mut config_map = BTreeMap::new();
    let mut extra = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed config line `{line}`")))?;
        if let Some(run_key) = k.strip_prefix("run.") {
            extra.insert(run_key.to_string(), v.to_string());
        } else {
            config_map.insert(k.to_string(), v.to_string());
        }
    }
    let config = config_from_kv(&config_map)?;

    // template gives expected tensor names/shapes in canonical order
    let mut params = init_params(&config, 0)?;
    let n_tensors = r.u32("tensor count")? as usize;
    let expected = params.tensors().len();
    if n_tensors != expected {
        return Err(Error::Format(format!(
            "checkpoint has {n_tensors} tensors, config implies {expected}"
        )));
    }
    for (name, tensor) in params.tensors_mut() {
        let name_len = r.u16("tensor name length")? as usize;
        let got_name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if got_name != name {
            return Err(Error::Format(format!(
                "tensor order mismatch: expected `{name}`, found `{got_name}`"
            )));
        }
        let ndim = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("tensor dim")? as usize);
        }
        if shape != tensor.shape() {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {shape:?}, config implies {:?}",
                tensor.shape()
            )));
        }
        for v in tensor.iter_mut() {
            *v = r.f64("tensor data")?;
        }
    }
    r.done()?;
    if !params.all_finite() {
        return Err(Error::Format("checkpoint contains non-finite values".into()));
    }
    Ok((params, config, extra))
}

// ---------- CSV / image exports ----------

/// 9 significant digits, plain scientific notation.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn write_history_csv(path: &Path, history: &TrainingHistory) -> Result<()> {
    let mut out = String::from(
        "epoch,lr,train_mse,train_physics,train_boundary,train_initial,train_total,val_mse,val_physics,val_boundary,val_initial,val_total,wall_secs\n",
    );
    for rec in &history.records {
        let row = [
            rec.lr,
            rec.train.mse,
            rec.train.physics,
            rec.train.boundary,
            rec.train.initial,
            rec.train.total,
            rec.val.mse,
            rec.val.physics,
            rec.val.boundary,
            rec.val.initial,
            rec.val.total,
            rec.wall_secs,
        ];
        out.push_str(&rec.epoch.to_string());
        for v in row {
            out.push(',');
            out.push_str(&fmt_float(v));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_metrics_csv(path: &Path, losses: &[f64], mean: f64) -> Result<()> {
    let mut out = String::from("case,loss\n");
    for (i, &l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{}\n", fmt_float(l)));
    }
    out.push_str(&format!("mean,{}\n", fmt_float(mean)));
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_matrix_csv(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    let mut out = String::new();
    for row in matrix.rows() {
        let cells: Vec<String> = row.iter().map(|&v| fmt_float(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Grayscale binary PGM with linear min-max normalization (min maps to
/// black, max to white; a constant map renders uniform mid-gray).
pub fn write_grayscale_pgm(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    let (lo, hi) = matrix.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = hi - lo;
    let mut file = std::fs::File::create(path)?;
    let (ny, nx) = matrix.dim();
    write!(
        file,
        "P5\n# linear min-max normalization: min={} max={}\n{nx} {ny}\n255\n",
        fmt_float(lo),
        fmt_float(hi)
    )?;
    let bytes: Vec<u8> = matrix
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                128
            }
        })
        .collect();
    file.write_all(&bytes)?;
    Ok(())
}

/// Run-config text file: flat `key=value` lines, `#` comments, blank lines
/// ignored. Returns an ordered map; unknown-key policy is the caller's.
pub fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut text = String::new();
    std::fs::File::open(path)?.read_to_string(&mut text)?;
    let mut kv = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected key=value, got `{line}`",
                path.display(),
                lineno + 1
            ))
        })?;
        if kv.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!(
                "{}:{}: duplicate key `{}`",
                path.display(),
                lineno + 1,
                k.trim()
            )));
        }
    }
    Ok(kv)
}

/// Export a single frame for side-by-side comparison images.
pub fn frame_to_matrix(frames: &ArrayD<f64>, b: usize, t: usize) -> Array2<f64> {
    frames
        .index_axis(ndarray::Axis(0), b)
        .index_axis(ndarray::Axis(0), t)
        .to_owned()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
}
