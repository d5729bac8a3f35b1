use gpimpute::gp::*;
use gpimpute::mask::Mask;
use gpimpute::score::*;
use gpimpute::transformer::*;
use gpimpute::unroll::*;
use nalgebra::DVector;

fn main() {
    let h = 8usize;
    let c = (2 * (h - 1)) as f64;
    let spec = GpSpec::new(
        h, 1,
        nalgebra::DMatrix::identity(1, 1),
        KernelSpec::Laplace { lengthscale: 3.0 },
        EmbeddingSpec::Sinusoidal { r: c / (2.0 * std::f64::consts::PI), c },
    ).unwrap();
    let mask = Mask::from_miss_indices(8, &[2, 3, 6]).unwrap();
    let sch = DiffusionSchedule::new(0.05, 5.0).unwrap();
    let net = build_unrolled_transformer(&spec, &mask, &sch, 0.1, MultMode::IdealizedMult).unwrap();
    let cond = condition_on_observed(&spec, &mask).unwrap();
    let inst = GdInstance::new(&cond);
    let q = ScoreQuery {
        v_t: DVector::from_vec(vec![0.5, -0.3, 0.8]),
        x_obs: DVector::from_vec(vec![0.2, 0.4, -0.1, 0.3, 0.6]),
        t: 0.5,
    };
    let mut cfg = net.gd_config().clone();
    cfg.eta_t = inst.eta_t(&sch, q.t);
    cfg.record_trajectory = true;
    println!("eta(0.5) = {}, theta = {}", cfg.eta_t, cfg.theta);
    let (net_out, net_trace) = net.forward_trace(&q).unwrap();
    let (gd_out, gd_trace) = nested_gd_score(&cond, &sch, &q, &cfg, None).unwrap();
    println!("net_out = {:?}", net_out.as_slice());
    println!("gd_out  = {:?}", gd_out.as_slice());
    for e in net_trace.iter() {
        if let Checkpoint::MajorStep { major } = e.at {
            if major < 3 {
                println!("net s[{major}] = {:?}", e.s.as_slice());
                println!("gd  s[{major}] = {:?}", gd_trace.major_iterates[major].as_slice());
            }
        }
    }
    // also check aux scaling on the first step
    let a = sch.alpha(q.t);
    let eta = cfg.eta_t;
    for e in net_trace.iter().take(2) {
        if let Checkpoint::AuxIter { major: 0, aux } = e.at {
            let want = &gd_trace.mu_aux_iterates[aux] * (eta * a);
            println!("aux{aux}: net u = {:?}", e.u.as_slice());
            println!("aux{aux}: want  = {:?}", want.as_slice());
        }
    }
}
