//! Residual vector quantization: a cascade of codebooks where stage g
//! quantizes the residual left by stages < g. Summed selected codewords
//! approximate the latent; entry 0 of every codebook is pinned to the zero
//! vector, which makes per-frame residual energy non-increasing across
//! stages (choosing entry 0 is always available and leaves the residual
//! unchanged).

use crate::error::{Error, Result};
use crate::numerics::tensor::matmul_bt_into;
use crate::numerics::Tensor;

/// One quantizer stage: a K×D embedding matrix with entry 0 pinned to zero.
#[derive(Debug, Clone)]
pub struct Codebook {
    weights: Tensor,
}

impl Codebook {
    pub fn new(weights: Tensor) -> Result<Self> {
        let (_, d) = weights.dims2()?;
        if !weights.all_finite() {
            return Err(Error::NonFinite {
                what: "codebook weights".into(),
            });
        }
        if weights.row(0).iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidArg(
                "codebook entry 0 must be the zero vector".into(),
            ));
        }
        let _ = d;
        Ok(Codebook { weights })
    }

    pub fn size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        self.weights.row(k)
    }

    /// Replace entry `k` (k ≥ 1; entry 0 stays pinned).
    pub(crate) fn set_entry(&mut self, k: usize, values: &[f64]) {
        assert!(k >= 1, "entry 0 is pinned");
        let d = self.dim();
        self.weights.data_mut()[k * d..(k + 1) * d].copy_from_slice(values);
    }

    /// Squared-norm column used by the nearest-codeword score.
    fn sq_norms(&self) -> Vec<f64> {
        (0..self.size())
            .map(|k| self.entry(k).iter().map(|v| v * v).sum())
            .collect()
    }
}

/// Per-frame codec code indices, one column per populated quantizer group.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeFrameSeq {
    data: Vec<u32>,
    frames: usize,
    groups: usize,
    codebook_size: usize,
}

impl CodeFrameSeq {
    pub fn new(data: Vec<u32>, frames: usize, groups: usize, codebook_size: usize) -> Result<Self> {
        if groups == 0 {
            return Err(Error::InvalidArg("need at least one code group".into()));
        }
        if data.len() != frames * groups {
            return Err(Error::InvalidArg(format!(
                "{} codes for {}x{} layout",
                data.len(),
                frames,
                groups
            )));
        }
        if let Some(&bad) = data.iter().find(|&&c| c as usize >= codebook_size) {
            return Err(Error::InvalidArg(format!(
                "code {} out of range for codebook size {}",
                bad, codebook_size
            )));
        }
        Ok(CodeFrameSeq {
            data,
            frames,
            groups,
            codebook_size,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    #[inline]
    pub fn get(&self, frame: usize, group: usize) -> u32 {
        self.data[frame * self.groups + group]
    }

    pub fn group(&self, g: usize) -> Vec<u32> {
        (0..self.frames).map(|t| self.get(t, g)).collect()
    }

    /// Column 0: the LM's audio token stream.
    pub fn first_group(&self) -> Vec<u32> {
        self.group(0)
    }

    /// Keep only the first `n` groups.
    pub fn truncated(&self, n: usize) -> Result<CodeFrameSeq> {
        if n == 0 || n > self.groups {
            return Err(Error::InvalidArg(format!(
                "cannot truncate {} groups to {}",
                self.groups, n
            )));
        }
        let mut data = Vec::with_capacity(self.frames * n);
        for t in 0..self.frames {
            for g in 0..n {
                data.push(self.get(t, g));
            }
        }
        CodeFrameSeq::new(data, self.frames, n, self.codebook_size)
    }

    /// Append one group's worth of codes (used by the multi-step baseline).
    pub fn with_group_appended(&self, codes: &[u32]) -> Result<CodeFrameSeq> {
        if codes.len() != self.frames {
            return Err(Error::InvalidArg(format!(
                "group length {} vs {} frames",
                codes.len(),
                self.frames
            )));
        }
        let mut data = Vec::with_capacity(self.frames * (self.groups + 1));
        for t in 0..self.frames {
            for g in 0..self.groups {
                data.push(self.get(t, g));
            }
            data.push(codes[t]);
        }
        CodeFrameSeq::new(data, self.frames, self.groups + 1, self.codebook_size)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.data.chunks(self.groups)
    }
}

/// Output of quantization: codes plus the exact split
/// `latents == sum_embedding + residual`.
#[derive(Debug, Clone)]
pub struct RvqResult {
    pub codes: CodeFrameSeq,
    pub sum_embedding: Tensor,
    pub residual: Tensor,
}

/// Per-stage assignment detail used by EMA codebook training.
#[derive(Debug, Clone)]
pub(crate) struct StageAssignment {
    /// Residual fed into this stage, one row per frame.
    pub inputs: Tensor,
    /// Selected codeword per frame.
    pub codes: Vec<u32>,
}

pub(crate) fn quantize_detailed(
    latents: &Tensor,
    n_active: usize,
    codebooks: &[Codebook],
) -> Result<(RvqResult, Vec<StageAssignment>)> {
    let (t_frames, d) = latents.dims2()?;
    if n_active == 0 || n_active > codebooks.len() {
        return Err(Error::InvalidArg(format!(
            "n_active {} out of range 1..={}",
            n_active,
            codebooks.len()
        )));
    }
    let max_size = codebooks[..n_active]
        .iter()
        .map(Codebook::size)
        .max()
        .unwrap();
    let mut residual = latents.clone();
    let mut sum = Tensor::zeros(&[t_frames, d]);
    let mut codes = vec![0u32; t_frames * n_active];
    let mut stages = Vec::with_capacity(n_active);
    for g in 0..n_active {
        let book = &codebooks[g];
        let k_size = book.size();
        let stage_input = residual.clone();
        // score_k = ‖c_k‖² − 2·r·c_k orders codewords identically to the
        // squared distance; ties resolve to the lowest index.
        let norms = book.sq_norms();
        let mut dots = vec![0.0; t_frames * k_size];
        matmul_bt_into(&mut dots, &residual, book.weights());
        let mut stage_codes = Vec::with_capacity(t_frames);
        for t in 0..t_frames {
            let drow = &dots[t * k_size..(t + 1) * k_size];
            let mut best = 0usize;
            let mut best_score = norms[0] - 2.0 * drow[0];
            for k in 1..k_size {
                let s = norms[k] - 2.0 * drow[k];
                if s < best_score {
                    best_score = s;
                    best = k;
                }
            }
            stage_codes.push(best as u32);
            codes[t * n_active + g] = best as u32;
            let cw = book.entry(best);
            let rrow = &mut residual.data_mut()[t * d..(t + 1) * d];
            for i in 0..d {
                rrow[i] -= cw[i];
            }
            let srow = &mut sum.data_mut()[t * d..(t + 1) * d];
            for i in 0..d {
                srow[i] += cw[i];
            }
        }
        stages.push(StageAssignment {
            inputs: stage_input,
            codes: stage_codes,
        });
    }
    let codes = CodeFrameSeq::new(codes, t_frames, n_active, max_size)?;
    Ok((
        RvqResult {
            codes,
            sum_embedding: sum,
            residual,
        },
        stages,
    ))
}

/// Quantize latents with the first `n_active` stages.
pub fn rvq_quantize(latents: &Tensor, n_active: usize, codebooks: &[Codebook]) -> Result<RvqResult> {
    quantize_detailed(latents, n_active, codebooks).map(|(r, _)| r)
}

/// Sum of codeword embeddings of the first `n` groups per frame; bit-exact
/// against the `sum_embedding` produced at quantize time for the same `n`.
pub fn rvq_dequantize(codes: &CodeFrameSeq, n: usize, codebooks: &[Codebook]) -> Result<Tensor> {
    if n == 0 || n > codes.groups() {
        return Err(Error::InvalidArg(format!(
            "n {} out of populated range 1..={}",
            n,
            codes.groups()
        )));
    }
    if n > codebooks.len() {
        return Err(Error::InvalidArg(format!(
            "n {} exceeds {} codebooks",
            n,
            codebooks.len()
        )));
    }
    let d = codebooks[0].dim();
    let t_frames = codes.frames();
    let mut sum = Tensor::zeros(&[t_frames, d]);
    for g in 0..n {
        let book = &codebooks[g];
        for t in 0..t_frames {
            let idx = codes.get(t, g) as usize;
            if idx >= book.size() {
                return Err(Error::InvalidArg(format!(
                    "code {} out of codebook range {}",
                    idx,
                    book.size()
                )));
            }
            let cw = book.entry(idx);
            let srow = &mut sum.data_mut()[t * d..(t + 1) * d];
            for i in 0..d {
                srow[i] += cw[i];
            }
        }
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book(rows: &[Vec<f64>]) -> Codebook {
        Codebook::new(Tensor::from_rows(rows)).unwrap()
    }

    #[test]
    fn exact_codeword_match_has_zero_residual() {
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|k| vec![k as f64 * 0.3, -(k as f64) * 0.1])
            .collect();
        let cb = book(&rows);
        let latent = Tensor::from_rows(&[rows[7].clone()]);
        let r = rvq_quantize(&latent, 1, &[cb]).unwrap();
        assert_eq!(r.codes.get(0, 0), 7);
        assert!(r.residual.data().iter().all(|&v| v.abs() < 1e-15));
        assert_eq!(r.sum_embedding.row(0), &rows[7][..]);
    }

    #[test]
    fn two_stage_toy_example() {
        // C1 = {(0,0),(1,0),(0,1)}, C2 = {(0,0),(−0.1,0.2)}, input (0.9,0.2):
        // stage 1 picks (1,0), stage 2 picks (−0.1,0.2), residual (0,0).
        let c1 = book(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let c2 = book(&[vec![0.0, 0.0], vec![-0.1, 0.2]]);
        let latent = Tensor::from_rows(&[vec![0.9, 0.2]]);
        let r = rvq_quantize(&latent, 2, &[c1, c2]).unwrap();
        assert_eq!(r.codes.get(0, 0), 1);
        assert_eq!(r.codes.get(0, 1), 1);
        for &v in r.residual.data() {
            assert!(v.abs() < 1e-15, "residual {}", v);
        }
        assert!((r.sum_embedding.at2(0, 0) - 0.9).abs() < 1e-15);
        assert!((r.sum_embedding.at2(0, 1) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        // duplicate codewords: equal distance, index 1 must win over 2
        let cb = book(&[vec![0.0, 0.0], vec![0.5, 0.5], vec![0.5, 0.5]]);
        let latent = Tensor::from_rows(&[vec![0.5, 0.5]]);
        let r = rvq_quantize(&latent, 1, &[cb]).unwrap();
        assert_eq!(r.codes.get(0, 0), 1);
    }

    #[test]
    fn dequantize_matches_quantize_sum_bitwise() {
        let mut rows = vec![vec![0.0; 4]];
        for k in 1..16 {
            rows.push(vec![
                (k as f64 * 0.17).sin(),
                (k as f64 * 0.31).cos(),
                k as f64 * 0.05 - 0.4,
                -(k as f64) * 0.02,
            ]);
        }
        let books: Vec<Codebook> = (0..4).map(|_| book(&rows)).collect();
        let latents = Tensor::from_rows(&[
            vec![0.3, -0.2, 0.8, 0.1],
            vec![-0.5, 0.9, 0.0, 0.33],
            vec![0.01, 0.02, -0.03, 0.6],
        ]);
        let r = rvq_quantize(&latents, 4, &books).unwrap();
        let deq = rvq_dequantize(&r.codes, 4, &books).unwrap();
        for (a, b) in r.sum_embedding.data().iter().zip(deq.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // n=1 vs n=2 difference is exactly the stage-2 codewords
        let d1 = rvq_dequantize(&r.codes, 1, &books).unwrap();
        let d2 = rvq_dequantize(&r.codes, 2, &books).unwrap();
        for t in 0..3 {
            let cw = books[1].entry(r.codes.get(t, 1) as usize);
            for i in 0..4 {
                assert!((d2.at2(t, i) - d1.at2(t, i) - cw[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn all_zero_codes_give_zero_embedding() {
        let rows = vec![vec![0.0, 0.0], vec![0.7, -0.3]];
        let books = vec![book(&rows), book(&rows)];
        let codes = CodeFrameSeq::new(vec![0, 0, 0, 0], 2, 2, 2).unwrap();
        let deq = rvq_dequantize(&codes, 2, &books).unwrap();
        assert!(deq.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prefix_consistency() {
        let mut rows = vec![vec![0.0; 3]];
        for k in 1..32 {
            rows.push(vec![
                (k as f64 * 0.7).sin() * 0.5,
                (k as f64 * 1.3).cos() * 0.5,
                ((k * k) as f64 * 0.11).sin() * 0.5,
            ]);
        }
        let books: Vec<Codebook> = (0..8).map(|_| book(&rows)).collect();
        let latents = Tensor::from_rows(&[vec![0.4, -0.6, 0.2], vec![-0.1, 0.05, 0.9]]);
        let full = rvq_quantize(&latents, 8, &books).unwrap();
        let partial = rvq_quantize(&latents, 3, &books).unwrap();
        for t in 0..2 {
            for g in 0..3 {
                assert_eq!(full.codes.get(t, g), partial.codes.get(t, g));
            }
        }
        assert_eq!(full.codes.truncated(3).unwrap(), partial.codes);
    }

    #[test]
    fn codebook_rejects_unpinned_entry_zero() {
        let t = Tensor::from_rows(&[vec![0.1, 0.0], vec![1.0, 1.0]]);
        assert!(Codebook::new(t).is_err());
    }
}
