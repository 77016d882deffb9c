//! Transmission-efficiency instrumentation: accumulated subject attention
//! (ASA) and statistic latent difference (SLD).
//!
//! ASA is the share of attention mass that generated-token queries place on
//! delivered subject tokens, with every head and query weighted equally. SLD
//! is the absolute difference between the mean delivered subject hidden state
//! and the mean generated hidden state at a site.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::denoiser::SiteId;
use crate::error::{Error, Result};

/// Attention statistics of one self-attention site in one forward pass.
///
/// Masses are sums over `(batch, head, query)` rows; each row sums to 1, so
/// `subject_mass + gen_mass == queries` up to rounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub site: SiteId,
    pub t: usize,
    pub delivered: bool,
    pub queries: f64,
    pub subject_mass: f64,
    pub gen_mass: f64,
    /// Rows whose query lies in the customized region.
    pub region_queries: f64,
    pub region_subject_mass: f64,
    pub mean_gen_hidden: f64,
    pub mean_subject_hidden: Option<f64>,
}

impl SiteRecord {
    pub fn subject_fraction(&self) -> f64 {
        if self.queries == 0.0 {
            0.0
        } else {
            self.subject_mass / self.queries
        }
    }

    pub fn gen_fraction(&self) -> f64 {
        if self.queries == 0.0 {
            0.0
        } else {
            self.gen_mass / self.queries
        }
    }

    /// Builds a record from attention weights `(b, heads, n, n + m)` whose
    /// last `m` columns are subject tokens, and a per-query region flag
    /// `(b, n)`.
    pub fn from_weights(
        site: SiteId,
        t: usize,
        weights: &Tensor,
        subject_tokens: usize,
        region: &[Vec<bool>],
        gen_hidden: &Tensor,
        subject_hidden: Option<&Tensor>,
    ) -> Result<Self> {
        let w = weights.detach().to_dtype(DType::F64)?;
        let (b, heads, n, cols) = w.dims4()?;
        let gen = w.narrow(3, 0, cols - subject_tokens)?.sum(3)?.to_vec3::<f64>()?;
        let sub = if subject_tokens > 0 {
            w.narrow(3, cols - subject_tokens, subject_tokens)?.sum(3)?.to_vec3::<f64>()?
        } else {
            vec![vec![vec![0.0; n]; heads]; b]
        };
        let mut rec = SiteRecord {
            site,
            t,
            delivered: subject_tokens > 0,
            queries: (b * heads * n) as f64,
            subject_mass: 0.0,
            gen_mass: 0.0,
            region_queries: 0.0,
            region_subject_mass: 0.0,
            mean_gen_hidden: mean_of(gen_hidden)?,
            mean_subject_hidden: subject_hidden.map(mean_of).transpose()?,
        };
        for bi in 0..b {
            for hi in 0..heads {
                for qi in 0..n {
                    rec.subject_mass += sub[bi][hi][qi];
                    rec.gen_mass += gen[bi][hi][qi];
                    if region.get(bi).and_then(|r| r.get(qi)).copied().unwrap_or(false) {
                        rec.region_queries += 1.0;
                        rec.region_subject_mass += sub[bi][hi][qi];
                    }
                }
            }
        }
        Ok(rec)
    }
}

fn mean_of(t: &Tensor) -> Result<f64> {
    Ok(t.detach().to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub records: Vec<SiteRecord>,
}

impl AttentionTrace {
    pub fn delivered_sites(&self) -> usize {
        self.records.iter().filter(|r| r.delivered).count()
    }

    pub fn extend(&mut self, other: AttentionTrace) {
        self.records.extend(other.records);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Layer,
    LayerAndStep,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AsaCell {
    pub subject_mass: f64,
    pub total_mass: f64,
    pub region_subject_mass: f64,
    pub region_mass: f64,
}

impl AsaCell {
    fn add(&mut self, other: &AsaCell) {
        self.subject_mass += other.subject_mass;
        self.total_mass += other.total_mass;
        self.region_subject_mass += other.region_subject_mass;
        self.region_mass += other.region_mass;
    }

    pub fn asa(&self) -> f64 {
        ratio(self.subject_mass, self.total_mass)
    }

    /// ASA over queries inside the customized region.
    pub fn asa_region(&self) -> f64 {
        ratio(self.region_subject_mass, self.region_mass)
    }

    /// ASA over background queries.
    pub fn asa_background(&self) -> f64 {
        ratio(
            self.subject_mass - self.region_subject_mass,
            self.total_mass - self.region_mass,
        )
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        (a / b).clamp(0.0, 1.0)
    }
}

/// Accumulated subject attention keyed by site and, optionally, timestep.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AsaTable {
    pub cells: BTreeMap<(SiteId, Option<usize>), AsaCell>,
}

impl AsaTable {
    /// Accumulated over the given sites (all sites when `None`).
    pub fn total(&self, sites: Option<&[SiteId]>) -> AsaCell {
        let mut acc = AsaCell::default();
        for ((site, _), cell) in &self.cells {
            if sites.is_none_or(|s| s.contains(site)) {
                acc.add(cell);
            }
        }
        acc
    }

    pub fn to_tsv(&self, system: &str) -> String {
        let mut out = String::from("system\tsite\tstep\tasa\tasa_region\tasa_background\tsubject_mass\ttotal_mass\n");
        for ((site, step), c) in &self.cells {
            let step = step.map_or("all".to_string(), |s| s.to_string());
            let _ = writeln!(
                out,
                "{system}\t{site}\t{step}\t{:.6}\t{:.6}\t{:.6}\t{:.3}\t{:.3}",
                c.asa(),
                c.asa_region(),
                c.asa_background(),
                c.subject_mass,
                c.total_mass
            );
        }
        out
    }
}

pub fn asa_accumulate(traces: &[AttentionTrace], group_by: GroupBy) -> Result<AsaTable> {
    if traces.iter().all(|t| t.records.is_empty()) {
        return Err(Error::Empty("no attention records to accumulate".into()));
    }
    let mut by_step: BTreeMap<(SiteId, Option<usize>), AsaCell> = BTreeMap::new();
    for rec in traces.iter().flat_map(|t| &t.records) {
        let cell = AsaCell {
            subject_mass: rec.subject_mass,
            total_mass: rec.subject_mass + rec.gen_mass,
            region_subject_mass: rec.region_subject_mass,
            region_mass: rec.region_queries,
        };
        by_step.entry((rec.site, Some(rec.t))).or_default().add(&cell);
    }
    let cells = match group_by {
        GroupBy::LayerAndStep => by_step,
        // Folding the per-step table keeps both groupings consistent.
        GroupBy::Layer => {
            let mut by_layer: BTreeMap<(SiteId, Option<usize>), AsaCell> = BTreeMap::new();
            for ((site, _), cell) in &by_step {
                by_layer.entry((*site, None)).or_default().add(cell);
            }
            by_layer
        }
    };
    Ok(AsaTable { cells })
}

/// `|mean(subject) − mean(generated)|`.
pub fn sld_from_states(subject: &Tensor, generated: &Tensor) -> Result<f64> {
    Ok((mean_of(subject)? - mean_of(generated)?).abs())
}

/// Per-site SLD averaged over every record of the site. Sites that never
/// received a delivery report `None`.
pub fn sld_compute(traces: &[AttentionTrace]) -> BTreeMap<SiteId, Option<f64>> {
    let mut acc: BTreeMap<SiteId, (f64, usize)> = BTreeMap::new();
    for rec in traces.iter().flat_map(|t| &t.records) {
        let e = acc.entry(rec.site).or_insert((0.0, 0));
        if let (true, Some(sub)) = (rec.delivered, rec.mean_subject_hidden) {
            e.0 += (sub - rec.mean_gen_hidden).abs();
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(site, (sum, n))| (site, (n > 0).then(|| sum / n as f64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{SiteId, Stage};
    use candle_core::Device;

    fn site(k: usize) -> SiteId {
        SiteId { stage: Stage::Decoder, ordinal: k, scale: 0 }
    }

    #[test]
    fn uniform_attention_with_equal_counts_gives_half() {
        // softmax over 2n equal scores: every column gets 1/(2n), so the n
        // subject columns carry half the mass of every row.
        let n = 3;
        let w = Tensor::full(1.0 / (2 * n) as f64, (1, 1, n, 2 * n), &Device::Cpu).unwrap();
        let h = Tensor::zeros((1, n, 2), DType::F64, &Device::Cpu).unwrap();
        let rec = SiteRecord::from_weights(site(1), 0, &w, n, &[vec![true; n]], &h, Some(&h)).unwrap();
        let table = asa_accumulate(&[AttentionTrace { records: vec![rec] }], GroupBy::Layer).unwrap();
        assert!((table.total(None).asa() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn blocked_sites_have_zero_asa_and_no_sld() {
        let w = Tensor::full(0.25f64, (1, 1, 4, 4), &Device::Cpu).unwrap();
        let h = Tensor::ones((1, 4, 2), DType::F64, &Device::Cpu).unwrap();
        let rec = SiteRecord::from_weights(site(1), 5, &w, 0, &[vec![false; 4]], &h, None).unwrap();
        assert_eq!(rec.subject_mass, 0.0);
        assert!((rec.subject_fraction() + rec.gen_fraction() - 1.0).abs() < 1e-12);
        let traces = [AttentionTrace { records: vec![rec] }];
        assert_eq!(asa_accumulate(&traces, GroupBy::Layer).unwrap().total(None).asa(), 0.0);
        assert_eq!(sld_compute(&traces)[&site(1)], None);
    }

    #[test]
    fn sld_of_states() {
        let dev = Device::Cpu;
        let a = Tensor::full(0.3f64, (1, 4, 2), &dev).unwrap();
        let b = Tensor::full(0.1f64, (1, 4, 2), &dev).unwrap();
        assert!((sld_from_states(&a, &b).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(sld_from_states(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn empty_traces_are_an_error() {
        assert!(asa_accumulate(&[], GroupBy::Layer).is_err());
        assert!(asa_accumulate(&[AttentionTrace::default()], GroupBy::Layer).is_err());
    }

    fn arb_record() -> impl proptest::strategy::Strategy<Value = SiteRecord> {
        use proptest::prelude::*;
        (1usize..4, 0usize..5, 0.0f64..1.0, 1u32..50, 0.0f64..1.0).prop_map(|(k, t, frac, q, rfrac)| {
            let queries = q as f64;
            SiteRecord {
                site: site(k),
                t: t * 50,
                delivered: frac > 0.0,
                queries,
                subject_mass: frac * queries,
                gen_mass: (1.0 - frac) * queries,
                region_queries: (rfrac * queries).floor(),
                region_subject_mass: frac * (rfrac * queries).floor(),
                mean_gen_hidden: 0.0,
                mean_subject_hidden: Some(frac),
            }
        })
    }

    proptest::proptest! {
        #[test]
        fn step_groups_sum_to_layer_groups(records in proptest::collection::vec(arb_record(), 1..30)) {
            let traces = [AttentionTrace { records }];
            let by_layer = asa_accumulate(&traces, GroupBy::Layer).unwrap();
            let by_step = asa_accumulate(&traces, GroupBy::LayerAndStep).unwrap();
            let mut summed: BTreeMap<SiteId, AsaCell> = BTreeMap::new();
            for ((s, _), c) in &by_step.cells {
                summed.entry(*s).or_default().add(c);
            }
            for ((s, _), c) in &by_layer.cells {
                proptest::prop_assert_eq!(&summed[s], c);
            }
            for c in by_layer.cells.values() {
                proptest::prop_assert!((0.0..=1.0).contains(&c.asa()));
            }
        }

        #[test]
        fn adding_a_delivered_site_never_lowers_subject_mass(
            records in proptest::collection::vec(arb_record(), 1..20),
            extra in arb_record(),
        ) {
            let before = asa_accumulate(&[AttentionTrace { records: records.clone() }], GroupBy::Layer)
                .unwrap().total(None).subject_mass;
            let mut more = records;
            more.push(extra);
            let after = asa_accumulate(&[AttentionTrace { records: more }], GroupBy::Layer)
                .unwrap().total(None).subject_mass;
            proptest::prop_assert!(after >= before - 1e-9);
        }
    }
}
