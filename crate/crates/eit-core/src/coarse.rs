//! Coarse scale: region partitioning of a fine field, near-binary controls
//! `zeta = (sigma_low, sigma_high_1..N_max, sigma_th_1..N_max)`, and their
//! gradients.
//!
//! Thresholds use the normalized convention: `sigma_th` lives in `(0, 1)` and
//! the actual cut for region `n` is
//! `(1 - sigma_th_n) * min(sigma) + sigma_th_n * max(sigma)` over the fine
//! reference field.

use thiserror::Error;

use crate::adjoint::SigmaGradient;
use crate::forward::ConductivityField;
use crate::geometry::{ElectrodeLayout, Mesh};
use crate::objective::{evaluate, DataError, MeasurementSet};

#[derive(Debug, Error)]
pub enum CoarseError {
    #[error("degenerate field: {0}")]
    DegenerateField(String),
    #[error("invalid controls: {0}")]
    InvalidControls(String),
    #[error(transparent)]
    Objective(#[from] DataError),
}

/// Fine-to-coarse partition: subset 0 is the low-conductivity background,
/// subsets `1..=n_max` are detected high regions (possibly empty).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionMap {
    /// Per-element subset index in `0..=n_max`.
    pub assignment: Vec<usize>,
    pub subset_sizes: Vec<usize>,
    pub n_max: usize,
}

impl PartitionMap {
    pub fn num_subsets(&self) -> usize {
        self.n_max + 1
    }

    /// Count of nonempty high-conductivity regions.
    pub fn num_regions(&self) -> usize {
        self.subset_sizes[1..].iter().filter(|&&s| s > 0).count()
    }

    pub fn validate(&self, mesh: &Mesh) -> Result<(), CoarseError> {
        if self.assignment.len() != mesh.num_elements() {
            return Err(CoarseError::InvalidControls("assignment length != element count".into()));
        }
        let total: usize = self.subset_sizes.iter().sum();
        if total != self.assignment.len() || self.subset_sizes.len() != self.num_subsets() {
            return Err(CoarseError::InvalidControls("subset sizes inconsistent".into()));
        }
        Ok(())
    }
}

/// Coarse control vector.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CoarseControls {
    pub sigma_low: f64,
    pub sigma_high: Vec<f64>,
    /// Normalized thresholds, each in (0, 1).
    pub sigma_th: Vec<f64>,
}

impl CoarseControls {
    pub fn n_max(&self) -> usize {
        self.sigma_high.len()
    }

    pub fn len(&self) -> usize {
        2 * self.n_max() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.push(self.sigma_low);
        v.extend_from_slice(&self.sigma_high);
        v.extend_from_slice(&self.sigma_th);
        v
    }

    pub fn from_vec(v: &[f64], n_max: usize) -> Self {
        assert_eq!(v.len(), 2 * n_max + 1);
        Self {
            sigma_low: v[0],
            sigma_high: v[1..=n_max].to_vec(),
            sigma_th: v[n_max + 1..].to_vec(),
        }
    }

    pub fn validate(&self) -> Result<(), CoarseError> {
        if self.sigma_th.len() != self.sigma_high.len() {
            return Err(CoarseError::InvalidControls("threshold/value length mismatch".into()));
        }
        if !(self.sigma_low > 0.0) {
            return Err(CoarseError::InvalidControls(format!("sigma_low {}", self.sigma_low)));
        }
        for &h in &self.sigma_high {
            if !(h > self.sigma_low) {
                return Err(CoarseError::InvalidControls(format!(
                    "sigma_high {h} not above sigma_low {}",
                    self.sigma_low
                )));
            }
        }
        for &t in &self.sigma_th {
            if !(t > 0.0 && t < 1.0) {
                return Err(CoarseError::InvalidControls(format!("threshold {t} not in (0,1)")));
            }
        }
        Ok(())
    }

    /// Project onto the feasible box: positive values, `sigma_low` strictly
    /// below every `sigma_high`, thresholds inside (0, 1).
    pub fn project(&mut self) {
        const FLOOR: f64 = 1e-4;
        const GAP: f64 = 1e-6;
        const T_MARGIN: f64 = 1e-3;
        if self.sigma_low < FLOOR {
            self.sigma_low = FLOOR;
        }
        for h in self.sigma_high.iter_mut() {
            if *h < self.sigma_low + GAP {
                *h = self.sigma_low + GAP;
            }
        }
        for t in self.sigma_th.iter_mut() {
            *t = t.clamp(T_MARGIN, 1.0 - T_MARGIN);
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoarseGradient {
    /// Length `2 * n_max + 1`, ordered like [`CoarseControls::as_vec`].
    pub values: Vec<f64>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, i: usize) -> usize {
        let mut r = i;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        let mut c = i;
        while self.parent[c] != r {
            let next = self.parent[c];
            self.parent[c] = r;
            c = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn field_range(fine: &ConductivityField) -> (f64, f64) {
    let lo = fine.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = fine.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Normalized cut for threshold `t` over the field range.
fn cut_value(lo: f64, hi: f64, t: f64) -> f64 {
    (1.0 - t) * lo + t * hi
}

/// Group above-threshold elements into connected components under the
/// shared-vertex rule; the largest `n_max` become high subsets, everything
/// else is background. When `prev` is given, each element's threshold is the
/// one of its previous region, and new labels are matched to previous labels
/// by maximal element overlap so `sigma_high_n` keeps tracking the same spot.
pub fn detect_regions(
    fine: &ConductivityField,
    zeta: &CoarseControls,
    mesh: &Mesh,
    prev: Option<&PartitionMap>,
) -> PartitionMap {
    let n = mesh.num_elements();
    let n_max = zeta.n_max();
    let (lo, hi) = field_range(fine);
    let default_t = zeta.sigma_th.iter().sum::<f64>() / zeta.sigma_th.len() as f64;
    let mut high = vec![false; n];
    if hi > lo {
        for i in 0..n {
            let t = match prev {
                Some(p) if p.assignment[i] > 0 => zeta.sigma_th[p.assignment[i] - 1],
                _ => default_t,
            };
            high[i] = fine.values[i] > cut_value(lo, hi, t);
        }
    }
    let mut uf = UnionFind::new(n);
    for elems in mesh.vertex_elements() {
        let mut first_high: Option<usize> = None;
        for &e in &elems {
            if high[e] {
                match first_high {
                    Some(f) => uf.union(f, e),
                    None => first_high = Some(e),
                }
            }
        }
    }
    // collect components of high elements
    let mut comp_elems: std::collections::HashMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        if high[i] {
            comp_elems.entry(uf.find(i)).or_default().push(i);
        }
    }
    let mut comps: Vec<Vec<usize>> = comp_elems.into_values().collect();
    comps.sort_by_key(|c| (std::cmp::Reverse(c.len()), c[0]));
    comps.truncate(n_max);

    // assign labels 1..=k, preferring maximal overlap with the previous map
    let mut label_of_comp = vec![0usize; comps.len()];
    let mut used = vec![false; n_max + 1];
    if let Some(p) = prev {
        let mut overlaps: Vec<(usize, usize, usize)> = Vec::new(); // (count, comp, label)
        for (ci, c) in comps.iter().enumerate() {
            let mut counts = vec![0usize; n_max + 1];
            for &e in c {
                counts[p.assignment[e]] += 1;
            }
            for l in 1..=n_max {
                if counts[l] > 0 {
                    overlaps.push((counts[l], ci, l));
                }
            }
        }
        overlaps.sort_by_key(|&(cnt, ci, l)| (std::cmp::Reverse(cnt), ci, l));
        for (_, ci, l) in overlaps {
            if label_of_comp[ci] == 0 && !used[l] {
                label_of_comp[ci] = l;
                used[l] = true;
            }
        }
    }
    let mut next = 1;
    for l in label_of_comp.iter_mut() {
        if *l == 0 {
            while next <= n_max && used[next] {
                next += 1;
            }
            *l = next;
            used[next] = true;
        }
    }

    let mut assignment = vec![0usize; n];
    for (ci, c) in comps.iter().enumerate() {
        for &e in c {
            assignment[e] = label_of_comp[ci];
        }
    }
    let mut subset_sizes = vec![0usize; n_max + 1];
    for &a in &assignment {
        subset_sizes[a] += 1;
    }
    PartitionMap { assignment, subset_sizes, n_max }
}

/// Which control value an element takes under `(fine, zeta, map)`.
fn element_source(fine: &ConductivityField, zeta: &CoarseControls, map: &PartitionMap, lo: f64, hi: f64, i: usize) -> usize {
    // returns 0 for sigma_low, n for sigma_high_n
    let j = map.assignment[i];
    if j == 0 {
        return 0;
    }
    let cut = cut_value(lo, hi, zeta.sigma_th[j - 1]);
    if fine.values[i] > cut {
        j
    } else {
        0
    }
}

/// Near-binary field from coarse controls: element `i` in region `n` gets
/// `sigma_high_n` if the fine reference exceeds the region's cut, else
/// `sigma_low`.
pub fn binarize(fine: &ConductivityField, zeta: &CoarseControls, map: &PartitionMap) -> ConductivityField {
    let (lo, hi) = field_range(fine);
    let values = (0..fine.values.len())
        .map(|i| match element_source(fine, zeta, map, lo, hi, i) {
            0 => zeta.sigma_low,
            n => zeta.sigma_high[n - 1],
        })
        .collect();
    ConductivityField { values }
}

/// Initial coarse controls from a fine field and its partition: split at the
/// midrange value, take means below and above per region, thresholds at 0.5.
pub fn init_controls(
    fine: &ConductivityField,
    map: &PartitionMap,
    n_max: usize,
) -> Result<CoarseControls, CoarseError> {
    let (lo, hi) = field_range(fine);
    if !(hi > lo) {
        return Err(CoarseError::DegenerateField("constant field has no range to split".into()));
    }
    let sigma_ini = 0.5 * (lo + hi);
    let mut low_sum = 0.0;
    let mut low_cnt = 0usize;
    let mut high_sum = vec![0.0; n_max];
    let mut high_cnt = vec![0usize; n_max];
    for (i, &v) in fine.values.iter().enumerate() {
        if v <= sigma_ini {
            low_sum += v;
            low_cnt += 1;
        } else if map.assignment[i] > 0 {
            high_sum[map.assignment[i] - 1] += v;
            high_cnt[map.assignment[i] - 1] += 1;
        } else {
            // above midrange but unpartitioned: counts toward background
            low_sum += v;
            low_cnt += 1;
        }
    }
    let sigma_low = if low_cnt > 0 { low_sum / low_cnt as f64 } else { lo };
    let fallback = sigma_ini + 0.25 * (hi - lo);
    let sigma_high = (0..n_max)
        .map(|n| if high_cnt[n] > 0 { high_sum[n] / high_cnt[n] as f64 } else { fallback })
        .collect();
    let zeta = CoarseControls { sigma_low, sigma_high, sigma_th: vec![0.5; n_max] };
    zeta.validate()?;
    Ok(zeta)
}

/// Area-weighted summation of a per-element density over a subset
/// (the coarse gradient summation formula for value components).
pub fn subset_sum_weighted(densities: &[f64], areas: &[f64], indices: &[usize]) -> f64 {
    indices.iter().map(|&i| densities[i] * areas[i]).sum()
}

/// Coarse gradient at `zeta`: value components by summation of the fine
/// sigma-gradient over the elements currently taking each control value;
/// threshold components by forward finite differences with step `delta_zeta`
/// (one extra objective evaluation per region).
///
/// `sigma_grad` and `j_base` must be evaluated at `binarize(fine, zeta, map)`.
#[allow(clippy::too_many_arguments)]
pub fn coarse_gradient(
    mesh: &Mesh,
    layout: &ElectrodeLayout,
    data: &MeasurementSet,
    fine: &ConductivityField,
    zeta: &CoarseControls,
    map: &PartitionMap,
    sigma_grad: &SigmaGradient,
    j_base: f64,
    delta_zeta: f64,
) -> Result<CoarseGradient, CoarseError> {
    let n_max = zeta.n_max();
    let (lo, hi) = field_range(fine);
    // exact partials carry the element measure already; divide it out so the
    // area-weighted summation reproduces the plain chain-rule subset sum
    let densities: Vec<f64> = sigma_grad
        .values
        .iter()
        .zip(&mesh.element_areas)
        .map(|(g, a)| g / a)
        .collect();
    let mut by_source: Vec<Vec<usize>> = vec![Vec::new(); n_max + 1];
    for i in 0..fine.values.len() {
        by_source[element_source(fine, zeta, map, lo, hi, i)].push(i);
    }
    let mut values = vec![0.0; 2 * n_max + 1];
    for s in 0..=n_max {
        values[s] = subset_sum_weighted(&densities, &mesh.element_areas, &by_source[s]);
    }
    for n in 0..n_max {
        if map.subset_sizes[n + 1] == 0 {
            continue; // empty region: threshold has no effect
        }
        let mut pert = zeta.clone();
        pert.sigma_th[n] += delta_zeta;
        let trial = binarize(fine, &pert, map);
        let j_trial = evaluate(mesh, &trial, layout, data)?.value;
        values[n_max + 1 + n] = (j_trial - j_base) / delta_zeta;
    }
    Ok(CoarseGradient { values })
}
