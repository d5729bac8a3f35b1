//! Fixed-weight ReLU-attention network whose forward pass executes the
//! nested gradient descent of [`crate::unroll`] step for step.
//!
//! Tokens carry `D = 12 d + d_e + 4 + 3` coordinates: the raw frame, its
//! embedding, the time features `[eta_t, alpha_t, sigma_t^2, alpha_t^2]`,
//! six working buffers, three selection flags `[1, obs, miss]`, and five
//! more buffers. Attention blocks route covariance-block products through
//! four-ReLU trapezoid heads keyed on embedding inner products (one head
//! quadruple per frame gap, `4 H` heads per block); feed-forward layers do
//! the bookkeeping; multiplication modules handle products with the time
//! features either exactly or through a ReLU square ladder.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gp::{condition_on_observed, ConditionalGaussian, EmbeddingSpec, GpSpec};
use crate::mask::Mask;
use crate::score::{default_data_radius, sigma_constant, DiffusionSchedule, ScoreFn, ScoreQuery};
use crate::unroll::{recommend_from_instance, GdInstance, NestedGdConfig};

/// How scalar-times-vector products are realized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MultMode {
    /// Exact products; the network is a literal transcription of the descent.
    IdealizedMult,
    /// ReLU square-ladder approximation with a per-site precision budget.
    ReluMult,
}

#[derive(Clone, Debug)]
struct Head {
    /// Combined key-query form `Q^T K`; scores are `y_i^T (qk) y_j`.
    qk: DMatrix<f64>,
    v: DMatrix<f64>,
}

#[derive(Clone, Debug)]
enum Layer {
    /// `Y + sum_heads V Y relu((Q Y)^T (K Y))`.
    Attention { heads: Vec<Head> },
    /// `Y + W1 relu(W2 Y + b2 1^T)`; linear maps use paired-ReLU rows.
    Ffn { w1: DMatrix<f64>, w2: DMatrix<f64>, b2: DVector<f64> },
    /// Idealized multiplication `dst += Y[w_slot] * Y[src..src+len]`.
    ExactMult { w_slot: usize, src: usize, dst: usize, len: usize },
    /// Bisimulation checkpoint marker (no computation).
    Mark(Checkpoint),
}

/// Points of the forward pass aligned with descent intermediates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Checkpoint {
    /// After auxiliary iteration `aux` inside major step `major` (0-based).
    AuxIter { major: usize, aux: usize },
    /// After major step `major` completes (0-based).
    MajorStep { major: usize },
}

/// A recorded checkpoint state: observed-token `u` buffer and missing-token
/// `s` buffer, flattened in ascending frame order.
#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub at: Checkpoint,
    pub u: DVector<f64>,
    pub s: DVector<f64>,
}

/// Architecture summary for reports.
#[derive(Clone, Debug, Serialize)]
pub struct NetMetadata {
    pub token_dim: usize,
    pub seq_len: usize,
    pub layers_total: usize,
    pub attention_layers: usize,
    pub heads_per_attention: usize,
    pub major_iters: usize,
    pub aux_iters: usize,
    pub mode: MultMode,
    pub eps: f64,
    pub eps_mult: f64,
    pub weight_norm_max: f64,
    pub weight_bound_theorem: f64,
    pub weight_bound_mult_domain: f64,
    pub clip_radius_coeff: f64,
    pub per_layer_heads: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Slots {
    x: usize,
    e: usize,
    phi: usize,
    a: [usize; 6],
    flags: usize,
    c: [usize; 5],
    d: usize,
    d_e: usize,
}

impl Slots {
    fn new(d: usize, d_e: usize) -> Self {
        let x = 0;
        let e = d;
        let phi = d + d_e;
        let a0 = phi + 4;
        let a = [a0, a0 + d, a0 + 2 * d, a0 + 3 * d, a0 + 4 * d, a0 + 5 * d];
        let flags = a0 + 6 * d;
        let c0 = flags + 3;
        let c = [c0, c0 + d, c0 + 2 * d, c0 + 3 * d, c0 + 4 * d];
        Slots { x, e, phi, a, flags, c, d, d_e }
    }

    fn dim(&self) -> usize {
        self.c[4] + self.d
    }
}

/// Time features fed to every token: `[eta_t, alpha_t, sigma_t^2, alpha_t^2]`
/// with the step size from the conditional block's extreme eigenvalues.
pub fn time_features(schedule: &DiffusionSchedule, lmin: f64, lmax: f64, t: f64) -> [f64; 4] {
    let a = schedule.alpha(t);
    let s2 = schedule.sigma2(t);
    let a2 = a * a;
    let eta = 2.0 / ((a2 * lmin + s2) + (a2 * lmax + s2));
    [eta, a, s2, a2]
}

/// Four-ReLU trapezoid: exactly one on the plateau `|x| <= delta/8`, exactly
/// zero outside `|x| < delta/4`.
pub fn trapezoid(x: f64, delta: f64) -> f64 {
    let r = |z: f64| z.max(0.0);
    (8.0 / delta)
        * (r(x + delta / 4.0) - r(x + delta / 8.0) - r(x - delta / 8.0) + r(x - delta / 4.0))
}

/// ReLU square-ladder product on `[-b, b]^2`: tent-map series for the two
/// squares of `|w +- x|`, truncated at `levels` compositions.
pub fn relu_mult_product(w: f64, x: f64, b: f64, levels: usize) -> f64 {
    let bp = 2.0 * b;
    let tent = |z: f64| 2.0 * z - 4.0 * (z - bp / 2.0).max(0.0);
    let sq = |y: f64| {
        let mut z = y;
        let mut acc = y;
        let mut pow = 1.0;
        for _ in 0..levels {
            z = tent(z);
            pow *= 0.25;
            acc -= z * pow;
        }
        bp * acc
    };
    0.25 * (sq((w + x).abs()) - sq((w - x).abs()))
}

/// Ladder depth needed for `|f_mult - w x| <= eps_mult` on `[-b, b]^2`.
pub fn mult_levels_for(b: f64, eps_mult: f64) -> usize {
    // each square truncates with error <= (2b)^2 4^-K / 3; the product
    // combines two squares with a factor 1/4
    let bp = 2.0 * b;
    let mut k = 1usize;
    while bp * bp * 0.25_f64.powi(k as i32) / 6.0 > eps_mult && k < 64 {
        k += 1;
    }
    k
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum FlagSel {
    ObsObs,
    MissMiss,
    Cross,
}

/// One scalar-times-buffer multiplication site.
#[derive(Clone, Copy)]
struct MultSite {
    w_slot: usize,
    src: usize,
    dst: usize,
    /// Domain bound on the scalar factor.
    b_w: f64,
    /// Domain bound on each source coordinate.
    b_x: f64,
}

/// Sparse residual-linear plan compiled into a paired-ReLU FFN.
struct LinearPlan {
    entries: Vec<(usize, usize, f64)>,
    d: usize,
}

impl LinearPlan {
    fn add(&mut self, dst: usize, src: usize, coef: f64) {
        for k in 0..self.d {
            self.entries.push((dst + k, src + k, coef));
        }
    }

    fn replace(&mut self, dst: usize, src: usize) {
        self.clear(dst);
        self.add(dst, src, 1.0);
    }

    fn clear(&mut self, slot: usize) {
        for k in 0..self.d {
            self.entries.push((slot + k, slot + k, -1.0));
        }
    }

    fn to_matrix(&self, dim: usize) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(dim, dim);
        for &(r, c, v) in &self.entries {
            t[(r, c)] += v;
        }
        t
    }
}

struct NetBuilder {
    slots: Slots,
    h: usize,
    d: usize,
    delta: f64,
    r2: f64,
    /// `f(m)` for every gap.
    gap_f: Vec<f64>,
    /// `gamma(f(m))` for every gap.
    gamma_by_gap: Vec<f64>,
    lambda: DMatrix<f64>,
    mode: MultMode,
    eps_mult: f64,
    layers: Vec<Arc<Layer>>,
    shared: HashMap<&'static str, Arc<Layer>>,
}

impl NetBuilder {
    fn mark(&mut self, c: Checkpoint) {
        self.layers.push(Arc::new(Layer::Mark(c)));
    }

    fn ffn_from_plan(&self, plan: &LinearPlan) -> Layer {
        let dim = self.slots.dim();
        let t = plan.to_matrix(dim);
        let mut w2 = DMatrix::zeros(2 * dim, dim);
        w2.rows_mut(0, dim).copy_from(&t);
        w2.rows_mut(dim, dim).copy_from(&(-&t));
        let mut w1 = DMatrix::zeros(dim, 2 * dim);
        w1.columns_mut(0, dim).copy_from(&DMatrix::identity(dim, dim));
        w1.columns_mut(dim, dim)
            .copy_from(&(DMatrix::<f64>::identity(dim, dim) * -1.0));
        Layer::Ffn { w1, w2, b2: DVector::zeros(2 * dim) }
    }

    /// Shared (interned) linear layer.
    fn linear(&mut self, label: &'static str, f: impl Fn(&mut LinearPlan, &Slots)) {
        if let Some(l) = self.shared.get(label) {
            self.layers.push(l.clone());
            return;
        }
        let mut plan = LinearPlan { entries: Vec::new(), d: self.d };
        let slots = self.slots;
        f(&mut plan, &slots);
        let layer = Arc::new(self.ffn_from_plan(&plan));
        self.shared.insert(label, layer.clone());
        self.layers.push(layer);
    }

    /// One auxiliary descent iteration: stash `theta u`, route it through
    /// the observed-pair block, update `u`, clear scratch.
    fn aux_loop(&mut self, iters: usize, theta: f64, major: usize) {
        for aux in 0..iters {
            let s = self.slots;
            self.linear("aux_stash", move |t, sl| {
                let _ = s;
                t.add(sl.a[3], sl.a[0], theta);
            });
            self.attention("tb_obs", self.slots.a[3], self.slots.a[4], FlagSel::ObsObs);
            self.linear("aux_update", move |t, sl| {
                t.add(sl.a[0], sl.a[1], theta);
                t.add(sl.a[0], sl.a[4], -1.0);
                t.clear(sl.a[3]);
                t.clear(sl.a[4]);
            });
            self.mark(Checkpoint::AuxIter { major, aux });
        }
    }

    /// `4 H`-head block: for every gap `m`, four trapezoid heads move
    /// `gamma_m Lambda src` from matching senders into `dst` on the pairs
    /// selected by the flag coupling.
    fn attention(&mut self, label: &'static str, src: usize, dst: usize, sel: FlagSel) {
        if let Some(l) = self.shared.get(label) {
            self.layers.push(l.clone());
            return;
        }
        let dim = self.slots.dim();
        let f_obs = self.slots.flags + 1;
        let f_miss = self.slots.flags + 2;
        let mut heads = Vec::with_capacity(4 * self.h);
        let signs = [1.0, -1.0, -1.0, 1.0];
        let offs = [self.delta / 4.0, self.delta / 8.0, -self.delta / 8.0, -self.delta / 4.0];
        for m in 0..self.h {
            let f2_m = self.gap_f[m] * self.gap_f[m];
            for a in 0..4 {
                let mut qk = DMatrix::zeros(dim, dim);
                for k in 0..self.slots.d_e {
                    qk[(self.slots.e + k, self.slots.e + k)] = 1.0;
                }
                // the trapezoid argument e_i.e_j - r^2 + f^2(m)/2 (+ offset),
                // with its constant part gated so non-selected pairs see the
                // same score in all four heads and cancel exactly
                let c_a = -self.r2 + 0.5 * f2_m + offs[a];
                // an ordered pair fires exactly one of the two cross entries
                match sel {
                    FlagSel::ObsObs => qk[(f_obs, f_obs)] = c_a,
                    FlagSel::MissMiss => qk[(f_miss, f_miss)] = c_a,
                    FlagSel::Cross => {
                        qk[(f_obs, f_miss)] = c_a;
                        qk[(f_miss, f_obs)] = c_a;
                    }
                }
                let mut v = DMatrix::zeros(dim, dim);
                let coef = signs[a] * (8.0 / self.delta) * self.gamma_by_gap[m];
                for r in 0..self.d {
                    for c in 0..self.d {
                        v[(dst + r, src + c)] = coef * self.lambda[(r, c)];
                    }
                }
                heads.push(Head { qk, v });
            }
        }
        let layer = Arc::new(Layer::Attention { heads });
        self.shared.insert(label, layer.clone());
        self.layers.push(layer);
    }

    fn mult(&mut self, site: MultSite) {
        match self.mode {
            MultMode::IdealizedMult => {
                self.layers.push(Arc::new(Layer::ExactMult {
                    w_slot: site.w_slot,
                    src: site.src,
                    dst: site.dst,
                    len: self.d,
                }));
            }
            MultMode::ReluMult => self.push_ladder(site),
        }
    }

    /// Square-ladder FFN sequence for one site: carriers `|w + x|` and
    /// `|w - x|` live in the two scratch buffers; each level applies the
    /// tent map and accumulates one series term into the destination.
    fn push_ladder(&mut self, site: MultSite) {
        let dim = self.slots.dim();
        let d = self.d;
        let zp = self.slots.a[4];
        let zm = self.slots.a[5];
        let b_dom = site.b_w + site.b_x;
        let levels = mult_levels_for(b_dom, self.eps_mult);
        let bp = 2.0 * b_dom;

        // init: z+ = |w + x|, z- = |w - x|, dst += (bp/4)(z+ - z-)
        let hidden = 4 * d;
        let mut w2 = DMatrix::zeros(hidden, dim);
        let mut w1 = DMatrix::zeros(dim, hidden);
        for k in 0..d {
            let rows = [4 * k, 4 * k + 1, 4 * k + 2, 4 * k + 3];
            w2[(rows[0], site.w_slot)] = 1.0;
            w2[(rows[0], site.src + k)] = 1.0;
            w2[(rows[1], site.w_slot)] = -1.0;
            w2[(rows[1], site.src + k)] = -1.0;
            w2[(rows[2], site.w_slot)] = 1.0;
            w2[(rows[2], site.src + k)] = -1.0;
            w2[(rows[3], site.w_slot)] = -1.0;
            w2[(rows[3], site.src + k)] = 1.0;
            w1[(zp + k, rows[0])] = 1.0;
            w1[(zp + k, rows[1])] = 1.0;
            w1[(zm + k, rows[2])] = 1.0;
            w1[(zm + k, rows[3])] = 1.0;
            w1[(site.dst + k, rows[0])] = bp / 4.0;
            w1[(site.dst + k, rows[1])] = bp / 4.0;
            w1[(site.dst + k, rows[2])] = -bp / 4.0;
            w1[(site.dst + k, rows[3])] = -bp / 4.0;
        }
        self.layers
            .push(Arc::new(Layer::Ffn { w1, w2, b2: DVector::zeros(hidden) }));

        // level k: z <- 2 relu(z) - 4 relu(z - bp/2), dst -= (bp/4) 4^-k (z+ - z-)
        for level in 1..=levels {
            let mut w2 = DMatrix::zeros(hidden, dim);
            let mut b2 = DVector::zeros(hidden);
            let mut w1 = DMatrix::zeros(dim, hidden);
            let pow = 0.25_f64.powi(level as i32);
            for k in 0..d {
                let rows = [4 * k, 4 * k + 1, 4 * k + 2, 4 * k + 3];
                w2[(rows[0], zp + k)] = 1.0;
                w2[(rows[1], zp + k)] = 1.0;
                b2[rows[1]] = -bp / 2.0;
                w2[(rows[2], zm + k)] = 1.0;
                w2[(rows[3], zm + k)] = 1.0;
                b2[rows[3]] = -bp / 2.0;
                // z_new = 2 h0 - 4 h1; delta z = z_new - z = h0 - 4 h1
                w1[(zp + k, rows[0])] = 1.0;
                w1[(zp + k, rows[1])] = -4.0;
                w1[(zm + k, rows[2])] = 1.0;
                w1[(zm + k, rows[3])] = -4.0;
                w1[(site.dst + k, rows[0])] = -(bp / 4.0) * pow * 2.0;
                w1[(site.dst + k, rows[1])] = (bp / 4.0) * pow * 4.0;
                w1[(site.dst + k, rows[2])] = (bp / 4.0) * pow * 2.0;
                w1[(site.dst + k, rows[3])] = -(bp / 4.0) * pow * 4.0;
            }
            self.layers.push(Arc::new(Layer::Ffn { w1, w2, b2 }));
        }

        let mut plan = LinearPlan { entries: Vec::new(), d };
        plan.clear(zp);
        plan.clear(zm);
        self.layers.push(Arc::new(self.ffn_from_plan(&plan)));
    }

    fn finish(self) -> (Vec<Arc<Layer>>, Vec<usize>, f64, usize) {
        let mut norm_max: f64 = 0.0;
        let mut heads_per_layer = Vec::new();
        let mut attn = 0usize;
        for l in &self.layers {
            match &**l {
                Layer::Attention { heads } => {
                    attn += 1;
                    heads_per_layer.push(heads.len());
                    for h in heads {
                        norm_max = norm_max.max(h.qk.norm()).max(h.v.norm());
                    }
                }
                Layer::Ffn { w1, w2, b2 } => {
                    heads_per_layer.push(0);
                    norm_max = norm_max.max(w1.norm()).max(w2.norm()).max(b2.norm());
                }
                Layer::ExactMult { .. } => heads_per_layer.push(0),
                Layer::Mark(_) => {}
            }
        }
        (self.layers, heads_per_layer, norm_max, attn)
    }
}

/// The constructed network, fixed to one mask family and one schedule.
pub struct UnrolledTransformer {
    layers: Vec<Arc<Layer>>,
    pub mask: Mask,
    pub schedule: DiffusionSchedule,
    mode: MultMode,
    d: usize,
    token_dim: usize,
    h: usize,
    embeddings: Vec<DVector<f64>>,
    lmin_cond: f64,
    lmax_cond: f64,
    /// Decoder clip is `clip_coeff / sigma_t^2`.
    clip_coeff: f64,
    cfg: NestedGdConfig,
    metadata: NetMetadata,
    slots: Slots,
}

/// Build the network that unrolls the nested descent for one mask family.
///
/// Iteration counts are taken at the early-stop time (the worst case over
/// the schedule), so one circuit serves every `t` in range; the encoder
/// injects the time-dependent step size through the feature slots.
pub fn build_unrolled_transformer(
    spec: &GpSpec,
    mask: &Mask,
    schedule: &DiffusionSchedule,
    eps: f64,
    mode: MultMode,
) -> Result<UnrolledTransformer> {
    let r = match &spec.embedding {
        EmbeddingSpec::Sinusoidal { r, .. } => *r,
        EmbeddingSpec::LinearGap => {
            return Err(Error::InvalidParam(
                "network construction needs an explicit (sinusoidal) embedding".into(),
            ))
        }
    };
    if spec.mean.iter().any(|&m| m != 0.0) {
        return Err(Error::InvalidParam("network construction assumes a zero mean".into()));
    }
    if !(0.0 < eps && eps < 1.0) {
        return Err(Error::InvalidParam(format!("eps = {eps} must be in (0, 1)")));
    }
    spec.embedding.validate(spec.h)?;
    let delta = spec.embedding.min_sq_gap(spec.h);
    if !(delta > 0.0) {
        return Err(Error::InvalidParam(
            "embedding squared distances must be strictly increasing".into(),
        ));
    }

    let cond = condition_on_observed(spec, mask)?;
    let inst = GdInstance::new(&cond);
    let cfg = recommend_from_instance(&inst, &cond, schedule, schedule.t0, eps);

    let d = spec.d;
    let slots = Slots::new(d, 2);
    let h = spec.h;
    let embeddings = spec.embedding.vectors(h).expect("sinusoidal embeddings exist");
    let gap_f: Vec<f64> = (0..h).map(|m| spec.embedding.gap_distance(m)).collect();
    let gamma_by_gap: Vec<f64> = gap_f.iter().map(|&f| spec.kernel.eval(f)).collect();

    let c_data = default_data_radius(&cond);
    let sigma_t0 = schedule.sigma(schedule.t0);
    let r_t0 = sigma_constant(&cond) * c_data / schedule.sigma2(schedule.t0);
    let eta_max = {
        let f0 = time_features(schedule, inst.lmin_cond, inst.lmax_cond, schedule.t0);
        let f1 = time_features(schedule, inst.lmin_cond, inst.lmax_cond, schedule.t_end);
        f0[0].max(f1[0]).max(1.0)
    };
    let s_bound = 2.2 * r_t0;

    // per-step multiplication budget from the step error allocation
    let kappa_t0 = inst.kappa_t(schedule, schedule.t0);
    let eps_step = (eps / sigma_t0) * 2.0 / (kappa_t0 + 2.0);
    let eps_mult = eps_step / (8.0 * (d as f64 * h as f64).sqrt() * (cond.sigma_miss.norm() + 2.0));
    if mode == MultMode::ReluMult {
        let worst = eta_max + s_bound.max(c_data);
        if mult_levels_for(worst, eps_mult) >= 64 {
            return Err(Error::PrecisionBudget(format!(
                "square ladder needs >= 64 levels for eps_mult = {eps_mult:.3e} on domain {worst:.3e}"
            )));
        }
    }

    let mut b = NetBuilder {
        slots,
        h,
        d,
        delta,
        r2: r * r,
        gap_f,
        gamma_by_gap,
        lambda: spec.lambda.clone(),
        mode,
        eps_mult,
        layers: Vec::new(),
        shared: HashMap::new(),
    };

    let phi_eta = slots.phi;
    let phi_alpha = slots.phi + 1;
    let phi_sigma2 = slots.phi + 2;
    let phi_alpha2 = slots.phi + 3;

    // stage 0: eta v -> X (missing tokens), eta alpha x -> A1 (observed)
    b.mult(MultSite { w_slot: phi_eta, src: slots.c[4], dst: slots.c[3], b_w: eta_max, b_x: c_data });
    b.linear("stage0_move_v", |t, s| {
        t.replace(s.x, s.c[3]);
        t.clear(s.c[3]);
        t.clear(s.c[4]);
    });
    b.mult(MultSite { w_slot: phi_eta, src: slots.a[2], dst: slots.a[3], b_w: eta_max, b_x: c_data });
    b.linear("stage0_clear_a2", |t, s| t.clear(s.a[2]));
    b.mult(MultSite {
        w_slot: phi_alpha,
        src: slots.a[3],
        dst: slots.a[1],
        b_w: 1.0,
        b_x: eta_max * c_data,
    });
    b.linear("stage0_finish", |t, s| t.clear(s.a[3]));

    // first major step: inner loop for the conditional-mean solve, then the
    // cross block assembles eta alpha mu_hat and the first iterate
    b.aux_loop(cfg.aux_iters, cfg.theta, 0);
    b.attention("tb_cort", slots.a[0], slots.c[4], FlagSel::Cross);
    b.linear("first_combine", |t, s| {
        t.add(s.c[1], s.c[4], 1.0);
        t.add(s.c[0], s.c[4], 1.0);
        t.add(s.c[0], s.x, -1.0);
        t.clear(s.c[4]);
        t.clear(s.a[0]);
        t.clear(s.a[1]);
    });
    b.mark(Checkpoint::MajorStep { major: 0 });

    // later major steps
    for major in 1..cfg.major_iters {
        b.mult(MultSite { w_slot: phi_alpha2, src: slots.c[0], dst: slots.c[2], b_w: 1.0, b_x: s_bound });
        b.mult(MultSite { w_slot: phi_eta, src: slots.c[2], dst: slots.c[3], b_w: eta_max, b_x: s_bound });
        b.linear("mult_clear_c2", |t, s| t.clear(s.c[2]));
        b.mult(MultSite { w_slot: phi_sigma2, src: slots.c[0], dst: slots.c[2], b_w: 1.0, b_x: s_bound });
        b.mult(MultSite { w_slot: phi_eta, src: slots.c[2], dst: slots.c[4], b_w: eta_max, b_x: s_bound });
        b.linear("mult_shuffle", |t, s| {
            t.replace(s.c[2], s.c[3]);
            t.replace(s.c[3], s.c[4]);
            t.clear(s.c[4]);
        });
        b.attention("tb_cor", slots.c[2], slots.a[1], FlagSel::Cross);
        b.aux_loop(cfg.aux_iters, cfg.theta, major);
        b.attention("tb_cort", slots.a[0], slots.c[4], FlagSel::Cross);
        b.attention("tb_miss", slots.c[2], slots.a[3], FlagSel::MissMiss);
        b.linear("combine", |t, s| {
            t.add(s.c[0], s.c[4], 1.0);
            t.add(s.c[0], s.c[1], 1.0);
            t.add(s.c[0], s.a[3], -1.0);
            t.add(s.c[0], s.c[3], -1.0);
            t.add(s.c[0], s.x, -1.0);
            t.clear(s.c[2]);
            t.clear(s.c[3]);
            t.clear(s.c[4]);
            t.clear(s.a[3]);
            t.clear(s.a[1]);
            t.clear(s.a[0]);
        });
        b.mark(Checkpoint::MajorStep { major });
    }

    let (layers, per_layer_heads, weight_norm_max, attention_layers) = b.finish();

    let kappa_prod = {
        let (lmin_l, lmax_l) = crate::gp::eigen_extremes(&cond.lambda);
        let (lmin_g, lmax_g) = crate::gp::eigen_extremes(&cond.gamma_obs);
        (lmax_l / lmin_l) * (lmax_g / lmin_g)
    };
    let weight_bound_theorem =
        64.0 * ((h * d * d * d) as f64).sqrt() * (r * r + kappa_prod / sigma_t0);
    let b_domain = eta_max + s_bound.max(c_data);
    let weight_bound_mult_domain =
        weight_bound_theorem.max(64.0 * d as f64 * b_domain * b_domain.max(1.0));

    let clip_coeff = sigma_constant(&cond) * c_data;
    let metadata = NetMetadata {
        token_dim: slots.dim(),
        seq_len: h,
        layers_total: layers.iter().filter(|l| !matches!(***l, Layer::Mark(_))).count(),
        attention_layers,
        heads_per_attention: 4 * h,
        major_iters: cfg.major_iters,
        aux_iters: cfg.aux_iters,
        mode,
        eps,
        eps_mult,
        weight_norm_max,
        weight_bound_theorem,
        weight_bound_mult_domain,
        clip_radius_coeff: clip_coeff,
        per_layer_heads,
    };

    Ok(UnrolledTransformer {
        layers,
        mask: mask.clone(),
        schedule: *schedule,
        mode,
        d,
        token_dim: slots.dim(),
        h,
        embeddings,
        lmin_cond: inst.lmin_cond,
        lmax_cond: inst.lmax_cond,
        clip_coeff,
        cfg,
        metadata,
        slots,
    })
}

impl UnrolledTransformer {
    pub fn metadata(&self) -> &NetMetadata {
        &self.metadata
    }

    pub fn gd_config(&self) -> &NestedGdConfig {
        &self.cfg
    }

    pub fn mode(&self) -> MultMode {
        self.mode
    }

    /// Decoder clip radius at time `t`.
    pub fn clip_radius(&self, t: f64) -> f64 {
        self.clip_coeff / self.schedule.sigma2(t)
    }

    /// The conditional this network was built against.
    pub fn conditional(&self, spec: &GpSpec) -> Result<ConditionalGaussian> {
        condition_on_observed(spec, &self.mask)
    }

    fn encode(&self, q: &ScoreQuery) -> Result<DMatrix<f64>> {
        let n_obs = self.mask.obs_indices().len();
        let n_miss = self.mask.miss_indices().len();
        if q.x_obs.len() != n_obs * self.d || q.v_t.len() != n_miss * self.d {
            return Err(Error::DimMismatch("query does not match the network's mask".into()));
        }
        if q.t < self.schedule.t0 {
            return Err(Error::BelowEarlyStop { t: q.t, t0: self.schedule.t0 });
        }
        let s = &self.slots;
        let phi = time_features(&self.schedule, self.lmin_cond, self.lmax_cond, q.t);
        let mut y = DMatrix::zeros(self.token_dim, self.h);
        for (pos, &i) in self.mask.obs_indices().iter().enumerate() {
            let xi = q.x_obs.rows(pos * self.d, self.d);
            let mut col = y.column_mut(i);
            col.rows_mut(s.x, self.d).copy_from(&xi);
            col.rows_mut(s.e, s.d_e).copy_from(&self.embeddings[i]);
            for (k, &p) in phi.iter().enumerate() {
                col[s.phi + k] = p;
            }
            col.rows_mut(s.a[2], self.d).copy_from(&xi);
            col[s.flags] = 1.0;
            col[s.flags + 1] = 1.0;
        }
        for (pos, &j) in self.mask.miss_indices().iter().enumerate() {
            let vj = q.v_t.rows(pos * self.d, self.d);
            let mut col = y.column_mut(j);
            col.rows_mut(s.x, self.d).copy_from(&vj);
            col.rows_mut(s.e, s.d_e).copy_from(&self.embeddings[j]);
            for (k, &p) in phi.iter().enumerate() {
                col[s.phi + k] = p;
            }
            col.rows_mut(s.c[4], self.d).copy_from(&vj);
            col[s.flags] = 1.0;
            col[s.flags + 2] = 1.0;
        }
        Ok(y)
    }

    fn apply_layer(&self, layer: &Layer, y: &mut DMatrix<f64>) {
        match layer {
            Layer::Attention { heads } => {
                let mut delta = DMatrix::zeros(y.nrows(), y.ncols());
                for head in heads {
                    let qky = &head.qk * &*y;
                    let mut scores = y.tr_mul(&qky);
                    scores.apply(|v| *v = v.max(0.0));
                    delta += &head.v * (&*y * scores);
                }
                *y += delta;
            }
            Layer::Ffn { w1, w2, b2 } => {
                let mut hid = w2 * &*y;
                for mut col in hid.column_iter_mut() {
                    col += b2;
                }
                hid.apply(|v| *v = v.max(0.0));
                *y += w1 * hid;
            }
            Layer::ExactMult { w_slot, src, dst, len } => {
                for c in 0..y.ncols() {
                    let w = y[(*w_slot, c)];
                    for k in 0..*len {
                        let prod = w * y[(*src + k, c)];
                        y[(*dst + k, c)] += prod;
                    }
                }
            }
            Layer::Mark(_) => {}
        }
    }

    fn decode(&self, y: &DMatrix<f64>, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.mask.miss_indices().len() * self.d);
        for (pos, &j) in self.mask.miss_indices().iter().enumerate() {
            out.rows_mut(pos * self.d, self.d)
                .copy_from(&y.column(j).rows(self.slots.c[0], self.d));
        }
        let r_t = self.clip_radius(t);
        let n = out.norm();
        if n > r_t {
            out *= r_t / n;
        }
        out
    }

    /// Pure evaluation of the constructed network.
    pub fn forward(&self, q: &ScoreQuery) -> Result<DVector<f64>> {
        let mut y = self.encode(q)?;
        for layer in &self.layers {
            self.apply_layer(layer, &mut y);
        }
        Ok(self.decode(&y, q.t))
    }

    /// Evaluation recording descent-aligned buffer states at each marker.
    pub fn forward_trace(&self, q: &ScoreQuery) -> Result<(DVector<f64>, Vec<TraceEntry>)> {
        let mut y = self.encode(q)?;
        let mut trace = Vec::new();
        for layer in &self.layers {
            self.apply_layer(layer, &mut y);
            if let Layer::Mark(at) = &**layer {
                trace.push(TraceEntry {
                    at: *at,
                    u: self.gather(&y, self.slots.a[0], self.mask.obs_indices()),
                    s: self.gather(&y, self.slots.c[0], self.mask.miss_indices()),
                });
            }
        }
        Ok((self.decode(&y, q.t), trace))
    }

    fn gather(&self, y: &DMatrix<f64>, slot: usize, idx: &[usize]) -> DVector<f64> {
        let mut out = DVector::zeros(idx.len() * self.d);
        for (pos, &i) in idx.iter().enumerate() {
            out.rows_mut(pos * self.d, self.d).copy_from(&y.column(i).rows(slot, self.d));
        }
        out
    }
}

impl ScoreFn for UnrolledTransformer {
    fn score(&self, v_t: &DVector<f64>, x_obs: &DVector<f64>, t: f64) -> DVector<f64> {
        self.forward(&ScoreQuery { v_t: v_t.clone(), x_obs: x_obs.clone(), t })
            .expect("query matches the network family")
    }
}
