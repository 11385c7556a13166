//! Multi-scale context features, their projection and fusion into prompts.

use std::io::Write;
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::kernels;
use crate::params::{var_of, Parameters};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"ZAFT";
const VERSION: u16 = 1;

/// Stream used to draw per-label prototypes; sample noise uses the sample seed.
const PROTOTYPE_SEED: u64 = 0x5EED_F00D;

/// Global features `I_1..I_M` at possibly different widths.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatureSet {
    pub features: Vec<Vec<f32>>,
}

impl VisualFeatureSet {
    pub fn new(features: Vec<Vec<f32>>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Config("feature set needs at least one scale".into()));
        }
        Ok(Self { features })
    }

    pub fn scales(&self) -> usize {
        self.features.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.features.iter().map(Vec::len).collect()
    }

    pub fn total_width(&self) -> usize {
        self.features.iter().map(Vec::len).sum()
    }

    /// Channel-wise concatenation as a `[1×ΣC_m]` row.
    pub fn concat<T: Real>(&self) -> Tensor<T> {
        let data: Vec<T> = self.features.iter().flatten().map(|&x| T::of(x as f64)).collect();
        Tensor::new(vec![1, data.len()], data).expect("row shape")
    }

    /// Default scale widths `(C, C/2)`.
    pub fn default_widths(dim: usize) -> Vec<usize> {
        vec![dim, dim / 2]
    }

    /// Label prototype plus seeded Gaussian noise, so the label is learnable.
    pub fn synthetic(label: usize, seed: u64, widths: &[usize], noise: f64) -> Self {
        let mut proto = Rng::new(PROTOTYPE_SEED).split(label as u64);
        let mut jitter = Rng::new(seed).split(label as u64 ^ 0xFEA7);
        let features = widths
            .iter()
            .map(|&w| {
                (0..w)
                    .map(|_| (proto.normal() + noise * jitter.normal()) as f32)
                    .collect()
            })
            .collect();
        Self { features }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * (self.scales() + self.total_width()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.scales() as u16).to_le_bytes());
        for f in &self.features {
            out.extend_from_slice(&(f.len() as u32).to_le_bytes());
            for x in f {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(r.error_at(0, "bad magic, expected ZAFT"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        let scales = r.u16()? as usize;
        if scales == 0 {
            return Err(r.error_at(6, "scale count is zero"));
        }
        let mut features = Vec::with_capacity(scales);
        for _ in 0..scales {
            let width = r.u32()? as usize;
            features.push(r.f32s(width)?);
        }
        r.finish()?;
        Ok(Self { features })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Little-endian cursor that reports the byte offset of every failure.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn error_at(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_at(
                self.pos,
                format!("truncated: wanted {n} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| self.error_at(self.pos, "length overflow"))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(self.error_at(self.pos, "trailing bytes"))
        }
    }
}

/// Cascaded affine stages with silu between them, mapping `ΣC_m → C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionNet<T: Real = f32> {
    /// `(weight [in×out], bias [1×out])` per stage.
    pub stages: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> ProjectionNet<T> {
    /// Stages of widths `in_width → hidden[0] → … → out_width`, zero biases.
    pub fn init(in_width: usize, hidden: &[usize], out_width: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed).split(0x9207);
        let mut widths = vec![in_width];
        widths.extend_from_slice(hidden);
        widths.push(out_width);
        let stages = widths
            .windows(2)
            .map(|w| {
                let weight = Tensor::randn(&[w[0], w[1]], 1.0 / (w[0].max(1) as f64).sqrt(), &mut rng);
                (weight, Tensor::zeros(&[1, w[1]]))
            })
            .collect();
        Self { stages }
    }

    /// Two stages with hidden width `C` over the default feature widths.
    pub fn default_for(dim: usize, seed: u64) -> Self {
        let in_width = VisualFeatureSet::default_widths(dim).iter().sum();
        Self::init(in_width, &[dim], dim, seed)
    }

    pub fn default_param_count(dim: usize) -> usize {
        let in_width: usize = VisualFeatureSet::default_widths(dim).iter().sum();
        in_width * dim + dim + dim * dim + dim
    }

    pub fn in_width(&self) -> usize {
        self.stages.first().map_or(0, |(w, _)| w.rows())
    }

    pub fn out_width(&self) -> usize {
        self.stages.last().map_or(0, |(w, _)| w.cols())
    }

    /// Value-level forward of a `[1×in]` row.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for (i, (w, b)) in self.stages.iter().enumerate() {
            let (r, k) = cur.matrix_dims("projection")?;
            if k != w.rows() {
                return dim_err("projection", cur.shape(), w.shape());
            }
            let mut y = kernels::matmul(cur.data(), w.data(), r, k, w.cols());
            for row in y.chunks_exact_mut(w.cols()) {
                for (v, &bb) in row.iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
            if i + 1 < self.stages.len() {
                y.iter_mut().for_each(|v| *v = kernels::silu(*v));
            }
            cur = Tensor::new(vec![r, w.cols()], y)?;
        }
        Ok(cur)
    }

    pub fn cast<U: Real>(&self) -> ProjectionNet<U> {
        ProjectionNet {
            stages: self.stages.iter().map(|(w, b)| (w.cast(), b.cast())).collect(),
        }
    }
}

impl<T: Real> Parameters<T> for ProjectionNet<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.stages.iter().enumerate() {
            out.push((format!("proj.{i}.weight"), w));
            out.push((format!("proj.{i}.bias"), b));
        }
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.stages.iter_mut().enumerate() {
            out.push((format!("proj.{i}.weight"), w));
            out.push((format!("proj.{i}.bias"), b));
        }
        out
    }
}

/// Tape handles of a projection net.
#[derive(Clone, Debug)]
pub struct ProjectionVars {
    pub stages: Vec<(Var, Var)>,
}

impl ProjectionVars {
    pub fn from_bound(bound: &[(String, Var)], n_stages: usize) -> Self {
        Self {
            stages: (0..n_stages)
                .map(|i| {
                    (
                        var_of(bound, &format!("proj.{i}.weight")),
                        var_of(bound, &format!("proj.{i}.bias")),
                    )
                })
                .collect(),
        }
    }

    /// `I_p = proj(concat(I_1..I_M))` on the tape.
    pub fn aggregate<T: Real>(&self, tape: &mut Tape<T>, fs: &VisualFeatureSet) -> Result<Var> {
        let mut x = tape.constant(fs.concat());
        for (i, &(w, b)) in self.stages.iter().enumerate() {
            x = tape.matmul(x, w)?;
            x = tape.broadcast_add_row(x, b)?;
            if i + 1 < self.stages.len() {
                x = tape.silu(x);
            }
        }
        Ok(x)
    }
}

/// `I_p = proj(concat(I_1..I_M))`.
pub fn aggregate_features<T: Real>(fs: &VisualFeatureSet, proj: &ProjectionNet<T>) -> Result<Tensor<T>> {
    if fs.total_width() != proj.in_width() {
        return dim_err("aggregate_features", &fs.widths(), &[proj.in_width()]);
    }
    proj.apply(&fs.concat())
}

/// `P_l + Repeat(I_p)`: add the visual row to every prompt row.
pub fn fuse_prompts<T: Real>(prompts: &Tensor<T>, visual: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = prompts.matrix_dims("fuse_prompts")?;
    if visual.len() != c {
        return dim_err("fuse_prompts", prompts.shape(), visual.shape());
    }
    let mut out = prompts.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for (p, &v) in row.iter_mut().zip(visual.data()) {
            *p += v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zaft_round_trip_is_bit_exact() {
        let fs = VisualFeatureSet::synthetic(2, 9, &[4, 3], 0.1);
        let back = VisualFeatureSet::from_bytes(&fs.to_bytes()).unwrap();
        assert_eq!(
            fs.features.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>(),
            back.features.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.widths(), vec![4, 3]);
    }

    #[test]
    fn malformed_files_report_offsets() {
        match VisualFeatureSet::from_bytes(&[]) {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut bytes = VisualFeatureSet::synthetic(0, 0, &[4], 0.0).to_bytes();
        bytes.truncate(bytes.len() - 2);
        match VisualFeatureSet::from_bytes(&bytes) {
            Err(Error::Parse { offset: 12, .. }) => {}
            other => panic!("{other:?}"),
        }
        match VisualFeatureSet::from_bytes(b"ZAFX\x01\x00") {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synthetic_is_deterministic_per_seed_and_label() {
        let a = VisualFeatureSet::synthetic(1, 5, &[8, 4], 0.3);
        assert_eq!(a, VisualFeatureSet::synthetic(1, 5, &[8, 4], 0.3));
        assert_ne!(a, VisualFeatureSet::synthetic(2, 5, &[8, 4], 0.3));
    }

    #[test]
    fn identity_projection_passes_single_scale_through() {
        let fs = VisualFeatureSet::new(vec![vec![0.5, -1.0, 2.0]]).unwrap();
        let proj = ProjectionNet {
            stages: vec![(Tensor::<f32>::eye(3), Tensor::zeros(&[1, 3]))],
        };
        assert_eq!(aggregate_features(&fs, &proj).unwrap().data(), &[0.5, -1.0, 2.0]);
        let zero = VisualFeatureSet::new(vec![vec![0.0; 4], vec![0.0; 2]]).unwrap();
        let p2 = ProjectionNet::<f32>::init(6, &[5], 3, 1);
        assert!(aggregate_features(&zero, &p2).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(aggregate_features(&fs, &p2).is_err());
    }

    #[test]
    fn two_scale_single_stage_matches_matrix_product() {
        let fs = VisualFeatureSet::new(vec![vec![1.0, 2.0], vec![3.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![1.0f64, 0.0], vec![0.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.5, 0.25]]).unwrap();
        let proj = ProjectionNet { stages: vec![(w, b)] };
        assert_eq!(aggregate_features(&fs, &proj).unwrap().data(), &[4.5, -0.75]);
    }

    #[test]
    fn fusion_adds_the_row_everywhere() {
        let p = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![0.5, -0.5]]).unwrap();
        let f = fuse_prompts(&p, &v).unwrap();
        assert_eq!(f.data(), &[1.5, 1.5, 3.5, 3.5]);
        assert_eq!(fuse_prompts(&p, &Tensor::zeros(&[1, 2])).unwrap(), p);
        assert!(fuse_prompts(&p, &Tensor::zeros(&[1, 3])).is_err());
    }
}
