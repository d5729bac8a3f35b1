//! Missing-index patterns: block strategies, mixtures of them, and the
//! canonical test-pattern family.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use nalgebra::DVector;

/// Observed/missing indicator per frame: `tau[i] = 1` observed, `0` missing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    tau: Vec<u8>,
    obs: Vec<usize>,
    miss: Vec<usize>,
}

impl Mask {
    pub fn from_tau(tau: Vec<u8>) -> Result<Self> {
        let obs: Vec<usize> = tau.iter().enumerate().filter(|(_, &t)| t == 1).map(|(i, _)| i).collect();
        let miss: Vec<usize> = tau.iter().enumerate().filter(|(_, &t)| t == 0).map(|(i, _)| i).collect();
        if tau.iter().any(|&t| t > 1) {
            return Err(Error::InvalidParam("mask entries must be 0 or 1".into()));
        }
        if miss.is_empty() || obs.is_empty() {
            return Err(Error::DegenerateMask(format!(
                "|I_miss| = {} must satisfy 0 < |I_miss| < H = {}",
                miss.len(),
                tau.len()
            )));
        }
        Ok(Mask { tau, obs, miss })
    }

    pub fn from_miss_indices(h: usize, miss: &[usize]) -> Result<Self> {
        let mut tau = vec![1u8; h];
        for &i in miss {
            if i >= h {
                return Err(Error::InvalidParam(format!("missing index {i} >= H = {h}")));
            }
            tau[i] = 0;
        }
        Self::from_tau(tau)
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn tau(&self) -> &[u8] {
        &self.tau
    }

    pub fn obs_indices(&self) -> &[usize] {
        &self.obs
    }

    pub fn miss_indices(&self) -> &[usize] {
        &self.miss
    }

    pub fn is_missing(&self, i: usize) -> bool {
        self.tau[i] == 0
    }

    /// Lengths of maximal missing runs, in index order.
    pub fn missing_runs(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut cur = 0usize;
        for &t in &self.tau {
            if t == 0 {
                cur += 1;
            } else if cur > 0 {
                runs.push(cur);
                cur = 0;
            }
        }
        if cur > 0 {
            runs.push(cur);
        }
        runs
    }
}

/// Where the blocks of a [`BlockStrategy`] land.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Placement {
    /// Starts drawn uniformly, rejecting draws where blocks overlap or
    /// touch, so every draw has exactly `k` maximal runs of length `b`.
    UniformRandomNonoverlapping,
    /// One run of `k * b` frames at the end of the sequence.
    Tail,
    /// Explicit block start indices.
    Fixed { starts: Vec<usize> },
}

/// `k` missing blocks of `b` consecutive frames each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockStrategy {
    pub k: usize,
    pub b: usize,
    pub placement: Placement,
}

impl BlockStrategy {
    pub fn uniform(k: usize, b: usize) -> Self {
        BlockStrategy { k, b, placement: Placement::UniformRandomNonoverlapping }
    }

    pub fn tail(k: usize, b: usize) -> Self {
        BlockStrategy { k, b, placement: Placement::Tail }
    }

    pub fn missing_count(&self) -> usize {
        self.k * self.b
    }

    pub fn validate(&self, h: usize) -> Result<()> {
        if self.k == 0 || self.b == 0 {
            return Err(Error::InvalidParam("block strategy needs k >= 1 and b >= 1".into()));
        }
        if self.k * self.b >= h {
            return Err(Error::StrategySaturated(format!(
                "k b = {} >= H = {h}",
                self.k * self.b
            )));
        }
        if matches!(self.placement, Placement::UniformRandomNonoverlapping)
            && self.k * self.b + self.k - 1 > h
        {
            return Err(Error::StrategySaturated(format!(
                "{} separated blocks of {} need {} frames, H = {h}",
                self.k,
                self.b,
                self.k * self.b + self.k - 1
            )));
        }
        if let Placement::Fixed { starts } = &self.placement {
            if starts.len() != self.k {
                return Err(Error::InvalidParam(format!(
                    "fixed placement has {} starts, expected k = {}",
                    starts.len(),
                    self.k
                )));
            }
            let mut sorted = starts.clone();
            sorted.sort_unstable();
            for w in sorted.windows(2) {
                if w[1] < w[0] + self.b {
                    return Err(Error::InvalidParam("fixed blocks overlap".into()));
                }
            }
            if sorted.last().unwrap() + self.b > h {
                return Err(Error::StrategySaturated("fixed block exceeds sequence".into()));
            }
        }
        Ok(())
    }

    fn draw(&self, h: usize, rng: &mut ChaCha12Rng) -> Result<Mask> {
        self.validate(h)?;
        let starts: Vec<usize> = match &self.placement {
            Placement::Tail => {
                (0..self.k).map(|i| h - self.k * self.b + i * self.b).collect()
            }
            Placement::Fixed { starts } => starts.clone(),
            Placement::UniformRandomNonoverlapping => {
                let mut tries = 0usize;
                loop {
                    tries += 1;
                    if tries > 100_000 {
                        return Err(Error::StrategySaturated(format!(
                            "could not place {} non-overlapping blocks of {} in H = {h}",
                            self.k, self.b
                        )));
                    }
                    let cand: Vec<usize> =
                        (0..self.k).map(|_| rng.gen_range(0..=h - self.b)).collect();
                    let mut sorted = cand.clone();
                    sorted.sort_unstable();
                    if sorted.windows(2).all(|w| w[1] > w[0] + self.b) {
                        break cand;
                    }
                }
            }
        };
        let miss: Vec<usize> = starts.iter().flat_map(|&s| s..s + self.b).collect();
        Mask::from_miss_indices(h, &miss)
    }
}

/// Mixture of block strategies; each draw picks one component by weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedStrategy {
    pub components: Vec<MixComponent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixComponent {
    #[serde(flatten)]
    pub blocks: BlockStrategy,
    pub weight: f64,
}

impl MixedStrategy {
    pub fn single(blocks: BlockStrategy) -> Self {
        MixedStrategy { components: vec![MixComponent { blocks, weight: 1.0 }] }
    }

    pub fn uniform_mix(strategies: Vec<BlockStrategy>) -> Self {
        let w = 1.0 / strategies.len() as f64;
        MixedStrategy {
            components: strategies
                .into_iter()
                .map(|blocks| MixComponent { blocks, weight: w })
                .collect(),
        }
    }

    pub fn validate(&self, h: usize) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidParam("mixed strategy has no components".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParam(format!("component weights sum to {total}, not 1")));
        }
        if self.components.iter().any(|c| c.weight < 0.0) {
            return Err(Error::InvalidParam("negative component weight".into()));
        }
        for c in &self.components {
            c.blocks.validate(h)?;
        }
        Ok(())
    }

    fn draw(&self, h: usize, rng: &mut ChaCha12Rng) -> Result<Mask> {
        self.validate(h)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = &self.components[self.components.len() - 1].blocks;
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = &c.blocks;
                break;
            }
        }
        chosen.draw(h, rng)
    }

    /// Component index a given uniform draw would select; used by tests.
    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    /// Expected per-frame missing probability (uniform placement components
    /// spread mass evenly in expectation over interior positions).
    pub fn expected_missing_count(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.blocks.missing_count() as f64).sum()
    }
}

/// Draw a mask from a strategy; deterministic given `seed`.
pub fn sample_mask(strategy: &MixedStrategy, h: usize, seed: u64) -> Result<Mask> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    strategy.draw(h, &mut rng)
}

/// Draw a mask reusing a caller-owned RNG stream.
pub fn sample_mask_with(strategy: &MixedStrategy, h: usize, rng: &mut ChaCha12Rng) -> Result<Mask> {
    strategy.draw(h, rng)
}

/// The canonical pattern family over a total missing budget `m_tot`:
/// P1 = one block of `m_tot` (strongly clustered), P2 = 2 blocks, P3 = 4
/// blocks, P4 = `m_tot` singletons (dispersed). `m_tot` scales as `H/6`
/// from the reference H = 96 with 16 missing.
pub fn builtin_patterns(h: usize) -> Result<Vec<(String, BlockStrategy)>> {
    let m_tot = (h / 6).max(2);
    let even = m_tot - (m_tot % 4);
    let m_tot = if even >= 4 { even } else { m_tot };
    let mut out = vec![("P1".to_string(), BlockStrategy::uniform(1, m_tot))];
    if m_tot % 2 == 0 && m_tot >= 2 {
        out.push(("P2".to_string(), BlockStrategy::uniform(2, m_tot / 2)));
    }
    if m_tot % 4 == 0 && m_tot >= 4 {
        out.push(("P3".to_string(), BlockStrategy::uniform(4, m_tot / 4)));
    }
    out.push(("P4".to_string(), BlockStrategy::uniform(m_tot, 1)));
    for (_, s) in &out {
        s.validate(h)?;
    }
    Ok(out)
}

/// The mixed training strategies S1..S4 over the same budget as
/// [`builtin_patterns`]: S1 all singletons, S2 adds pairs, S3 adds quads,
/// S4 adds the full clustered block, with equal component weights.
pub fn builtin_strategies(h: usize) -> Result<Vec<(String, MixedStrategy)>> {
    let m_tot = (h / 6).max(2);
    let m_tot = if m_tot % 4 == 0 { m_tot } else { (m_tot / 4).max(1) * 4 };
    let singles = BlockStrategy::uniform(m_tot, 1);
    let pairs = BlockStrategy::uniform(m_tot / 2, 2);
    let quads = BlockStrategy::uniform(m_tot / 4, 4);
    let full = BlockStrategy::uniform(1, m_tot);
    let list = vec![
        ("S1".to_string(), MixedStrategy::single(singles.clone())),
        ("S2".to_string(), MixedStrategy::uniform_mix(vec![singles.clone(), pairs.clone()])),
        (
            "S3".to_string(),
            MixedStrategy::uniform_mix(vec![singles.clone(), pairs.clone(), quads.clone()]),
        ),
        ("S4".to_string(), MixedStrategy::uniform_mix(vec![singles, pairs, quads, full])),
    ];
    for (_, s) in &list {
        s.validate(h)?;
    }
    Ok(list)
}

/// Split a vectorized sequence into `(x_obs, x_miss)` in ascending frame
/// order with `d` coordinates per frame.
pub fn apply_mask(sequence: &DVector<f64>, mask: &Mask, d: usize) -> Result<(DVector<f64>, DVector<f64>)> {
    if sequence.len() != mask.len() * d {
        return Err(Error::DimMismatch(format!(
            "sequence length {} != H d = {}",
            sequence.len(),
            mask.len() * d
        )));
    }
    let gather = |idx: &[usize]| {
        let mut v = DVector::zeros(idx.len() * d);
        for (k, &i) in idx.iter().enumerate() {
            v.rows_mut(k * d, d).copy_from(&sequence.rows(i * d, d));
        }
        v
    };
    Ok((gather(mask.obs_indices()), gather(mask.miss_indices())))
}

/// Inverse of [`apply_mask`]: reassemble the full sequence.
pub fn merge_mask(
    x_obs: &DVector<f64>,
    x_miss: &DVector<f64>,
    mask: &Mask,
    d: usize,
) -> Result<DVector<f64>> {
    if x_obs.len() != mask.obs_indices().len() * d || x_miss.len() != mask.miss_indices().len() * d {
        return Err(Error::DimMismatch("block lengths do not match mask".into()));
    }
    let mut out = DVector::zeros(mask.len() * d);
    for (k, &i) in mask.obs_indices().iter().enumerate() {
        out.rows_mut(i * d, d).copy_from(&x_obs.rows(k * d, d));
    }
    for (k, &i) in mask.miss_indices().iter().enumerate() {
        out.rows_mut(i * d, d).copy_from(&x_miss.rows(k * d, d));
    }
    Ok(out)
}
