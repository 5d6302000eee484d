//! The `PSBR` tensor container, shared by checkpoints and BSR exports.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PSBR" | version: u32
//! repeated until end of file:
//!   name_len: u32 | name: UTF-8
//!   rows: u32 | cols: u32 | block_rows: u32 | block_cols: u32
//!   indptr_len: u64  | indptr: u32 * indptr_len
//!   indices_len: u64 | indices: u32 * indices_len
//!   data_len: u64    | data: f32 * data_len
//! ```
//!
//! A dense tensor is a single `rows x cols` block. `rows`/`cols` are the
//! logical dimensions; padded edge blocks are implied by the block shape.

use std::collections::BTreeMap;
use std::path::Path;

use crate::block::BlockShape;
use crate::bsr::{bsr_to_dense, dense_to_bsr, BsrMatrix, DenseMatrix};
use crate::error::{Error, Result};
use crate::optimizer::{OptimizerState, TensorState};
use crate::prox::GammaState;
use crate::tensor::WeightTensor;
use crate::toy::LassoProblem;

pub const MAGIC: &[u8; 4] = b"PSBR";
pub const VERSION: u32 = 1;
/// Prefix of the optimizer-state sections in a checkpoint.
pub const STATE_PREFIX: &str = "opt/";
/// Prefix of non-tensor sections; `meta/config` holds the resolved run
/// configuration as UTF-8 bytes, one byte per `f32`.
pub const META_PREFIX: &str = "meta/";
pub const CONFIG_SECTION: &str = "meta/config";

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub matrix: BsrMatrix<f32>,
}

impl Section {
    /// A dense tensor stored as one block.
    pub fn dense(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if rows == 0 || cols == 0 {
            return Err(Error::Format(format!("tensor `{name}` has an empty shape {rows}x{cols}")));
        }
        let shape = BlockShape::new(rows, cols)?;
        let matrix = BsrMatrix::from_parts(rows, cols, shape, vec![0, 1], vec![0], data)?;
        Ok(Self { name, matrix })
    }

    pub fn from_tensor(t: &WeightTensor) -> Result<Self> {
        Self::dense(&t.name, t.rows, t.cols, t.data.iter().map(|v| *v as f32).collect())
    }

    /// Text stored byte-per-value in a `1 x len` section.
    pub fn text(name: impl Into<String>, text: &str) -> Result<Self> {
        Self::dense(name, 1, text.len(), text.bytes().map(f32::from).collect())
    }

    pub fn as_text(&self) -> Result<String> {
        let bytes = self
            .matrix
            .data()
            .iter()
            .map(|v| {
                if (0.0..=255.0).contains(v) && v.fract() == 0.0 {
                    Ok(*v as u8)
                } else {
                    Err(Error::Format(format!("section `{}` is not text", self.name)))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes).map_err(|_| Error::Format(format!("section `{}` is not UTF-8", self.name)))
    }

    /// Weight tensors, as opposed to optimizer state or metadata.
    pub fn is_tensor(&self) -> bool {
        !self.name.starts_with(STATE_PREFIX) && !self.name.starts_with(META_PREFIX)
    }

    pub fn to_dense(&self) -> DenseMatrix<f32> {
        bsr_to_dense(&self.matrix)
    }

    pub fn to_tensor(&self) -> WeightTensor {
        let d = self.to_dense();
        WeightTensor {
            name: self.name.clone(),
            rows: d.rows,
            cols: d.cols,
            data: d.data.iter().map(|v| *v as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub sections: Vec<Section>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// The embedded run configuration, if any.
    pub fn config_text(&self) -> Result<Option<String>> {
        self.get(CONFIG_SECTION).map(Section::as_text).transpose()
    }

    /// Replaces the embedded run configuration.
    pub fn set_config_text(&mut self, text: &str) -> Result<()> {
        self.sections.retain(|s| s.name != CONFIG_SECTION);
        if !text.is_empty() {
            self.sections.push(Section::text(CONFIG_SECTION, text)?);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for s in &self.sections {
            let m = &s.matrix;
            let shape = m.block_shape();
            put_u32(&mut out, s.name.len(), "name length")?;
            out.extend_from_slice(s.name.as_bytes());
            for (v, what) in [(m.rows(), "rows"), (m.cols(), "cols"), (shape.rows, "block rows"), (shape.cols, "block cols")] {
                put_u32(&mut out, v, what)?;
            }
            out.extend_from_slice(&(m.indptr().len() as u64).to_le_bytes());
            m.indptr().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            out.extend_from_slice(&(m.indices().len() as u64).to_le_bytes());
            m.indices().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            out.extend_from_slice(&(m.data().len() as u64).to_le_bytes());
            m.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Format("missing PSBR magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let mut sections = Vec::new();
        while r.pos < bytes.len() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_owned();
            let (rows, cols, br, bc) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
            let indptr = r.u32_array()?;
            let indices = r.u32_array()?;
            let n = r.len()?;
            let data: Vec<f32> = r
                .take(n.checked_mul(4).ok_or_else(truncated)?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let shape = BlockShape::new(br as usize, bc as usize)
                .map_err(|_| Error::Format(format!("section `{name}`: zero block dimension")))?;
            let matrix = BsrMatrix::from_parts(rows as usize, cols as usize, shape, indptr, indices, data)
                .map_err(|e| Error::Format(format!("section `{name}`: {e}")))?;
            sections.push(Section { name, matrix });
        }
        Ok(Self { sections })
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn truncated() -> Error {
    Error::Format("truncated container".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| truncated())
    }

    fn u32_array(&mut self) -> Result<Vec<u32>> {
        let n = self.len()?;
        Ok(self
            .take(n.checked_mul(4).ok_or_else(truncated)?)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Weights plus optimizer state. Values are stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<WeightTensor>,
    pub state: OptimizerState,
    pub config: Option<String>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let mut sections: Vec<Section> = self.params.iter().map(Section::from_tensor).collect::<Result<_>>()?;
        let step = self.state.step;
        sections.push(Section::dense(
            format!("{STATE_PREFIX}step"),
            1,
            2,
            vec![(step & 0xFF_FFFF) as f32, (step >> 24) as f32],
        )?);
        for (name, slot) in &self.state.tensors {
            let vec_section = |kind: &str, v: &[f64]| {
                Section::dense(format!("{STATE_PREFIX}{kind}/{name}"), 1, v.len(), v.iter().map(|x| *x as f32).collect())
            };
            sections.push(vec_section("m", &slot.m)?);
            sections.push(vec_section("v", &slot.v)?);
            if let Some(g) = &slot.gamma {
                sections.push(vec_section("gamma", &g.gamma)?);
                sections.push(Section::dense(format!("{STATE_PREFIX}ell/{name}"), 1, 1, vec![g.ell as f32])?);
            }
        }
        let mut c = Container { sections };
        if let Some(text) = &self.config {
            c.set_config_text(text)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mut params = Vec::new();
        let mut state = OptimizerState::default();
        let mut parts: BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>, Option<u32>)> =
            BTreeMap::new();
        for s in c.sections.iter().filter(|s| !s.name.starts_with(META_PREFIX)) {
            let Some(rest) = s.name.strip_prefix(STATE_PREFIX) else {
                params.push(s.to_tensor());
                continue;
            };
            let values = s.to_tensor().data;
            if rest == "step" {
                if values.len() != 2 {
                    return Err(Error::Format("malformed step section".into()));
                }
                state.step = values[0] as u64 | ((values[1] as u64) << 24);
                continue;
            }
            let (kind, name) = rest
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("unknown state section `{}`", s.name)))?;
            let entry = parts.entry(name.to_owned()).or_default();
            match kind {
                "m" => entry.0 = Some(values),
                "v" => entry.1 = Some(values),
                "gamma" => entry.2 = Some(values),
                "ell" => entry.3 = values.first().map(|v| *v as u32),
                _ => return Err(Error::Format(format!("unknown state section `{}`", s.name))),
            }
        }
        for (name, (m, v, gamma, ell)) in parts {
            let (Some(m), Some(v)) = (m, v) else {
                return Err(Error::Format(format!("incomplete optimizer state for `{name}`")));
            };
            let gamma = gamma.map(|gamma| GammaState { gamma, ell: ell.unwrap_or(0) });
            state.tensors.insert(name, TensorState { m, v, gamma });
        }
        Ok(Self { params, state, config: c.config_text()? })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write_to(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read_from(path)?)
    }
}

/// Converts every weight tensor of `c` to BSR with the given block shape,
/// dropping optimizer state and metadata.
pub fn export_bsr(c: &Container, shape: BlockShape, zero_tol: f64, pad: bool) -> Result<Container> {
    let sections = c
        .sections
        .iter()
        .filter(|s| s.is_tensor())
        .map(|s| {
            let matrix = dense_to_bsr(&s.to_dense(), shape, zero_tol, pad)?;
            Ok(Section { name: s.name.clone(), matrix })
        })
        .collect::<Result<_>>()?;
    Ok(Container { sections })
}

impl LassoProblem {
    /// Fixture sections `lasso/A`, `lasso/y`, `lasso/w_true`, `lasso/seed`.
    pub fn to_container(&self) -> Result<Container> {
        let f = |v: &[f64]| v.iter().map(|x| *x as f32).collect::<Vec<_>>();
        let seed: Vec<f32> = (0..4).map(|i| ((self.seed >> (16 * i)) & 0xFFFF) as f32).collect();
        Ok(Container {
            sections: vec![
                Section::dense("lasso/A", self.n, self.d, f(&self.a))?,
                Section::dense("lasso/y", self.n, 1, f(&self.y))?,
                Section::dense("lasso/w_true", self.d, 1, f(&self.w_true))?,
                Section::dense("lasso/seed", 1, 4, seed)?,
            ],
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let get = |n: &str| {
            c.get(n)
                .map(|s| s.to_tensor())
                .ok_or_else(|| Error::Format(format!("missing section `{n}`")))
        };
        let a = get("lasso/A")?;
        let seed = get("lasso/seed")?
            .data
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, v)| acc | ((*v as u64) << (16 * i)));
        LassoProblem::from_data(a.rows, a.cols, a.data, get("lasso/y")?.data, get("lasso/w_true")?.data, seed)
    }
}
