//! Sinusoidal positional encodings and the block / causal attention masks.

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Block,
    Causal,
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskKind::Block => write!(f, "block"),
            MaskKind::Causal => write!(f, "causal"),
        }
    }
}

impl std::str::FromStr for MaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(MaskKind::Block),
            "causal" => Ok(MaskKind::Causal),
            other => Err(Error::Config(format!("unknown mask type '{other}'"))),
        }
    }
}

/// T x T additive attention mask. Entries are exactly `0.0` or
/// `f64::NEG_INFINITY`; the softmax implementation treats -inf columns as
/// fully hidden and assigns them weight exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    pub entries: Array2<f64>,
    pub n_visible: usize,
    pub kind: MaskKind,
}

impl MaskMatrix {
    pub fn seq_len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_hidden(&self, row: usize, col: usize) -> bool {
        self.entries[[row, col]] == f64::NEG_INFINITY
    }
}

fn check_visible(seq_len: usize, n_visible: usize) -> Result<()> {
    if n_visible < 1 || n_visible > seq_len {
        return Err(Error::Config(format!(
            "n_visible must satisfy 1 <= n <= seq_len ({seq_len}), got {n_visible}"
        )));
    }
    Ok(())
}

/// Block mode: every row sees exactly the first `n_visible` columns.
pub fn block_mask(seq_len: usize, n_visible: usize) -> Result<MaskMatrix> {
    check_visible(seq_len, n_visible)?;
    let mut entries = Array2::from_elem((seq_len, seq_len), f64::NEG_INFINITY);
    entries.slice_mut(ndarray::s![.., ..n_visible]).fill(0.0);
    Ok(MaskMatrix {
        entries,
        n_visible,
        kind: MaskKind::Block,
    })
}

/// Causal mode: upper triangle including the diagonal is hidden, then the
/// first `n_visible` columns are forced visible. The masked diagonal means a
/// frame never attends to itself in the predictive region, so position i's
/// output is a genuine next-frame estimate.
pub fn causal_mask(seq_len: usize, n_visible: usize) -> Result<MaskMatrix> {
    check_visible(seq_len, n_visible)?;
    let mut entries = Array2::zeros((seq_len, seq_len));
    for i in 0..seq_len {
        for j in 0..seq_len {
            if j >= i && j >= n_visible {
                entries[[i, j]] = f64::NEG_INFINITY;
            }
        }
    }
    Ok(MaskMatrix {
        entries,
        n_visible,
        kind: MaskKind::Causal,
    })
}

/// Sinusoidal table with interleaved sin/cos slots:
/// entry (pos, i) = scale*sin(pos / 10000^(i/D)) for even i,
///                  scale*cos(pos / 10000^((i-1)/D)) for odd i.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    pub table: Array2<f64>,
    pub dims: usize,
    pub scale: f64,
}

pub fn sinusoidal_pe(length: usize, dims: usize, scale: f64) -> Result<PositionalEncoding> {
    if dims == 0 || dims % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding dims must be even and positive, got {dims}"
        )));
    }
    if length == 0 {
        return Err(Error::Config("positional encoding length must be >= 1".into()));
    }
    let mut table = Array2::zeros((length, dims));
    for pos in 0..length {
        for i in 0..dims {
            let exponent = if i % 2 == 0 { i } else { i - 1 } as f64 / dims as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            table[[pos, i]] = if i % 2 == 0 {
                scale * angle.sin()
            } else {
                scale * angle.cos()
            };
        }
    }
    Ok(PositionalEncoding { table, dims, scale })
}

/// Default scale used by the model: 1/sqrt(D/2).
pub fn default_pe_scale(dims: usize) -> f64 {
    1.0 / ((dims as f64 / 2.0).sqrt())
}
