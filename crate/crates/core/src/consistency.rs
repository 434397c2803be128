//! Cross-domain consistency: for each batch member, the softmax over its cosine
//! similarities to the other members is computed in source and target feature
//! spaces, and the target distribution is pulled toward the source one by
//! KL(target ‖ source). Averaged over members, summed over tapped layers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{domain_err, shape_err, Error, Result};
use crate::nets::{Bound, ModelPair, Network};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetworkTag {
    Generator,
    Discriminator,
}

/// Softmax over one member's similarities to the rest of the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityDistribution {
    pub probabilities: Vec<f64>,
    pub anchor_index: usize,
    pub layer: usize,
    pub domain: DomainTag,
    pub network: NetworkTag,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CdcLossReport {
    pub generator_loss: f64,
    pub discriminator_loss: f64,
    /// Keyed `g<res>` / `d<res>`.
    pub per_layer_terms: BTreeMap<String, f64>,
}

/// Cosine similarity between every pair of rows of a (B, D) matrix.
pub fn pairwise_cosine(rows: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let b = rows.len();
    if b < 2 {
        return Err(domain_err!("pairwise similarity needs at least 2 samples, got {}", b));
    }
    let units = unit_rows(rows)?;
    let mut sim = vec![vec![0.0; b]; b];
    for i in 0..b {
        sim[i][i] = 1.0;
        for j in (i + 1)..b {
            let c = dot(&units[i].0, &units[j].0).clamp(-1.0, 1.0);
            sim[i][j] = c;
            sim[j][i] = c;
        }
    }
    Ok(sim)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit vectors and original norms; zero rows are rejected.
fn unit_rows(rows: &[&[f64]]) -> Result<Vec<(Vec<f64>, f64)>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let n = dot(r, r).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!("sample {} has a zero or non-finite activation vector", i)));
            }
            Ok((r.iter().map(|v| v / n).collect(), n))
        })
        .collect()
}

/// Temperature-1 softmax over the K similarities of one member to the others.
pub fn similarity_distribution(sims: &[f64]) -> Result<Vec<f64>> {
    if sims.is_empty() {
        return Err(domain_err!("similarity distribution needs K >= 1 (batch of at least 2)"));
    }
    if sims.iter().any(|v| !v.is_finite()) {
        return Err(domain_err!("non-finite similarity"));
    }
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// `KL(p_target ‖ p_source)`; zero-probability target entries contribute nothing.
pub fn kl_divergence(p_target: &[f64], p_source: &[f64]) -> Result<f64> {
    if p_target.len() != p_source.len() {
        return Err(shape_err!("KL of distributions of length {} and {}", p_target.len(), p_source.len()));
    }
    Ok(p_target
        .iter()
        .zip(p_source)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p / q).ln())
        .sum())
}

/// All B distributions of a (B, D) activation matrix, anchor order.
pub fn batch_distributions(rows: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let sim = pairwise_cosine(rows)?;
    (0..rows.len())
        .map(|i| {
            let others: Vec<f64> = (0..rows.len()).filter(|&j| j != i).map(|j| sim[i][j]).collect();
            similarity_distribution(&others)
        })
        .collect()
}

fn rows_f64<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.batch()).map(|i| t.row(i).iter().map(|v| v.as_f64()).collect()).collect()
}

/// One layer's consistency term and its gradient with respect to the target activations.
pub fn layer_term<T: Real>(target: &Tensor<T>, source: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if target.shape() != source.shape() {
        return Err(shape_err!("target {:?} vs source {:?} activations", target.shape(), source.shape()));
    }
    let b = target.batch();
    let t_rows = rows_f64(target);
    let s_rows = rows_f64(source);
    let t_refs: Vec<&[f64]> = t_rows.iter().map(Vec::as_slice).collect();
    let s_refs: Vec<&[f64]> = s_rows.iter().map(Vec::as_slice).collect();
    let p_s = batch_distributions(&s_refs)?;
    let sim = pairwise_cosine(&t_refs)?;
    let units = unit_rows(&t_refs)?;

    // g[i][j] = ∂L/∂sim(i, j) for the ordered pair (row i, column j).
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut g = vec![vec![0.0; b]; b];
    for i in 0..b {
        let cols: Vec<usize> = (0..b).filter(|&j| j != i).collect();
        let row: Vec<f64> = cols.iter().map(|&j| sim[i][j]).collect();
        let p_t = similarity_distribution(&row)?;
        let kl = kl_divergence(&p_t, &p_s[i])?;
        loss += kl * inv_b;
        for (k, &j) in cols.iter().enumerate() {
            g[i][j] = inv_b * p_t[k] * ((p_t[k] / p_s[i][k]).ln() - kl);
        }
    }

    let d = target.row_len();
    let mut grad = vec![T::zero(); b * d];
    for i in 0..b {
        let (ui, ni) = (&units[i].0, units[i].1);
        let mut acc = vec![0.0; d];
        for j in (0..b).filter(|&j| j != i) {
            let w = g[i][j] + g[j][i];
            if w == 0.0 {
                continue;
            }
            let c = sim[i][j];
            for ((a, &uj), &uii) in acc.iter_mut().zip(&units[j].0).zip(ui) {
                *a += w * (uj - c * uii);
            }
        }
        for (dst, a) in grad[i * d..(i + 1) * d].iter_mut().zip(acc) {
            *dst = T::from_f64_lossy(a / ni);
        }
    }
    Ok((loss, Tensor::new(target.shape().to_vec(), grad)?))
}

/// A summed-over-layers consistency loss on a tape.
#[derive(Debug, Clone)]
pub struct CdcTerm {
    pub loss: Var,
    pub value: f64,
    pub per_layer: BTreeMap<usize, f64>,
}

/// Sum of per-layer terms, target activations on the tape, source activations as constants.
pub fn cdc_from_taps<T: Real>(
    tape: &mut Tape<T>,
    target_taps: &BTreeMap<usize, Var>,
    source_taps: &BTreeMap<usize, Tensor<T>>,
    layers: &[usize],
) -> Result<CdcTerm> {
    let mut terms = Vec::with_capacity(layers.len());
    let mut per_layer = BTreeMap::new();
    let mut value = 0.0;
    for &layer in layers {
        let t = *target_taps.get(&layer).ok_or_else(|| shape_err!("missing target tap {}", layer))?;
        let s = source_taps.get(&layer).ok_or_else(|| shape_err!("missing source tap {}", layer))?;
        let (v, grad) = layer_term(tape.value(t), s)?;
        terms.push(tape.scalar_fn(t, T::from_f64_lossy(v), grad)?);
        per_layer.insert(layer, v);
        value += v;
    }
    let loss = tape.sum_scalars(&terms)?.ok_or_else(|| domain_err!("consistency loss needs at least one layer"))?;
    Ok(CdcTerm { loss, value, per_layer })
}

fn tap_values<T: Real>(tape: &Tape<T>, taps: &BTreeMap<usize, Var>) -> BTreeMap<usize, Tensor<T>> {
    taps.iter().map(|(&k, &v)| (k, tape.value(v).clone())).collect()
}

/// Generator term on a tape: `target_g` binds the target generator.
pub fn generator_cdc_on_tape<T: Real>(
    tape: &mut Tape<T>,
    pair: &ModelPair<T>,
    target_g: &Bound,
    z: Var,
    taps: &[usize],
) -> Result<CdcTerm> {
    let source = {
        let mut st = Tape::new();
        let b = pair.generator_source.bind(&mut st);
        let zs = st.constant(tape.value(z).clone());
        let out = pair.generator_source.forward(&mut st, &b, zs, taps)?;
        tap_values(&st, &out.taps)
    };
    let out = pair.generator_target.forward(tape, target_g, z, taps)?;
    cdc_from_taps(tape, &out.taps, &source, taps)
}

/// Source-side discriminator activations: D_s taps on G_s images.
pub fn source_discriminator_taps<T: Real>(pair: &ModelPair<T>, z: &Tensor<T>, taps: &[usize]) -> Result<BTreeMap<usize, Tensor<T>>> {
    let mut st = Tape::new();
    let gb = pair.generator_source.bind(&mut st);
    let db = pair.discriminator_source.bind(&mut st);
    let zs = st.constant(z.clone());
    let img = pair.generator_source.forward(&mut st, &gb, zs, &[])?.images;
    let out = pair.discriminator_source.forward(&mut st, &db, img, taps, None)?;
    Ok(tap_values(&st, &out.taps))
}

/// Discriminator term on a tape, given target images `g_t_images = G_t(z)`
/// already on it; D_t taps are computed without any mask.
pub fn discriminator_cdc_on_tape<T: Real>(
    tape: &mut Tape<T>,
    pair: &ModelPair<T>,
    target_d: &Bound,
    g_t_images: Var,
    z: &Tensor<T>,
    taps: &[usize],
) -> Result<CdcTerm> {
    let source = source_discriminator_taps(pair, z, taps)?;
    let out = pair.discriminator_target.forward(tape, target_d, g_t_images, taps, None)?;
    cdc_from_taps(tape, &out.taps, &source, taps)
}

/// Value of the generator consistency loss.
pub fn generator_cdc<T: Real>(pair: &ModelPair<T>, z: &Tensor<T>, taps: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let gb = pair.generator_target.params().bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    Ok(generator_cdc_on_tape(&mut tape, pair, &gb, zv, taps)?.value)
}

/// Value of the discriminator consistency loss.
pub fn discriminator_cdc<T: Real>(pair: &ModelPair<T>, z: &Tensor<T>, taps: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let gb = pair.generator_target.params().bind(&mut tape, false);
    let db = pair.discriminator_target.params().bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    let img = pair.generator_target.forward(&mut tape, &gb, zv, &[])?.images;
    Ok(discriminator_cdc_on_tape(&mut tape, pair, &db, img, z, taps)?.value)
}

/// Both losses with per-layer breakdown.
pub fn cdc_report<T: Real>(pair: &ModelPair<T>, z: &Tensor<T>, g_taps: &[usize], d_taps: &[usize]) -> Result<CdcLossReport> {
    let mut report = CdcLossReport::default();
    let mut tape = Tape::new();
    let gb = pair.generator_target.params().bind(&mut tape, false);
    let db = pair.discriminator_target.params().bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    let g = generator_cdc_on_tape(&mut tape, pair, &gb, zv, g_taps)?;
    let img = pair.generator_target.forward(&mut tape, &gb, zv, &[])?.images;
    let d = discriminator_cdc_on_tape(&mut tape, pair, &db, img, z, d_taps)?;
    report.generator_loss = g.value;
    report.discriminator_loss = d.value;
    for (k, v) in g.per_layer {
        report.per_layer_terms.insert(format!("g{k}"), v);
    }
    for (k, v) in d.per_layer {
        report.per_layer_terms.insert(format!("d{k}"), v);
    }
    Ok(report)
}
