//! Property battery behind the `selftest` subcommand: fast structural
//! checks of the event model, blending, formats and metrics.

use crate::biofnet::{eif_biofnet_forward, init_biof_params, BiOFInput, ForwardOptions, PyramidConfig};
use crate::event::{reverse_events, split_events, voxelize, Event, EventStream};
use crate::flow::{backward_warp, blend_flows, charbonnier, Frame};
use crate::io;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};
use crate::train::metrics::{psnr, ssim};

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn report(name: &'static str, result: std::result::Result<String, String>) -> CheckReport {
    match result {
        Ok(detail) => CheckReport { name, pass: true, detail },
        Err(detail) => CheckReport { name, pass: false, detail },
    }
}

fn random_stream(rng: &mut Rng, w: u16, h: u16, t0: u64, t1: u64, n: usize) -> EventStream {
    let events = (0..n)
        .map(|_| Event {
            t: t0 + rng.next_u64() % (t1 - t0 + 1),
            x: rng.below(w as usize) as u16,
            y: rng.below(h as usize) as u16,
            p: if rng.unit() < 0.5 { 1 } else { -1 },
        })
        .collect();
    EventStream::new(events, w, h, t0, t1).unwrap()
}

/// Run every self-check; deterministic for a given seed.
pub fn run_selftest(seed: u64) -> Vec<CheckReport> {
    let mut rng = Rng::new(seed);
    let mut rows = Vec::new();

    rows.push(report("voxel_reversal_symmetry", {
        let bins = 16;
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let n = 1 + rng.below(256);
            let s = random_stream(&mut rng, 12, 10, 0, 20_000, n);
            let fwd = voxelize(&s, 0, 20_000, bins, 10, 12).unwrap();
            let bwd = voxelize(&reverse_events(&s), 0, 20_000, bins, 10, 12).unwrap();
            let hw = 120;
            for b in 0..bins {
                for pix in 0..hw {
                    let got = bwd.data.data()[b * hw + pix];
                    let want = -fwd.data.data()[(bins - 1 - b) * hw + pix];
                    worst = worst.max((got - want).abs());
                }
            }
        }
        if worst < 1e-9 {
            Ok(format!("max deviation {worst:.2e} over 100 random streams"))
        } else {
            Err(format!("max deviation {worst:.2e} exceeds 1e-9"))
        }
    }));

    rows.push(report("reverse_involution_and_split_partition", {
        let mut ok = true;
        for _ in 0..20 {
            let s = random_stream(&mut rng, 8, 8, 100, 5_000, 64);
            ok &= reverse_events(&reverse_events(&s)) == s;
            let t = 100 + rng.next_u64() % 4_901;
            let (l, r) = split_events(&s, t).unwrap();
            ok &= l.len() + r.len() == s.len();
        }
        if ok { Ok("20 random streams".into()) } else { Err("violated".into()) }
    }));

    rows.push(report("blend_endpoints_exact", {
        let mut ok = true;
        for _ in 0..10 {
            let flow_a = Tensor::from_vec(vec![2, 4, 4], (0..32).map(|_| rng.uniform(-4.0, 4.0)).collect());
            let flow_b = Tensor::from_vec(vec![2, 4, 4], (0..32).map(|_| rng.uniform(-4.0, 4.0)).collect());
            let mut tape = Tape::no_grad();
            let ones = Tensor::full(&[1, 4, 4], 1.0);
            let zeros = Tensor::zeros(&[1, 4, 4]);
            let img = blend_flows(&mut tape, &flow_a, &flow_b, &ones).unwrap();
            let evt = blend_flows(&mut tape, &flow_a, &flow_b, &zeros).unwrap();
            ok &= img.data() == flow_a.data() && evt.data() == flow_b.data();
            let mask = Tensor::from_vec(vec![1, 4, 4], (0..16).map(|_| rng.unit()).collect());
            let mid = blend_flows(&mut tape, &flow_a, &flow_b, &mask).unwrap();
            for c in 0..2 {
                for i in 0..16 {
                    let (a, b) = (flow_a.data()[c * 16 + i], flow_b.data()[c * 16 + i]);
                    let v = mid.data()[c * 16 + i];
                    ok &= v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12;
                }
            }
        }
        if ok { Ok("endpoints exact, interior convex".into()) } else { Err("violated".into()) }
    }));

    rows.push(report("format_roundtrips", {
        let mut ok = true;
        for trial in 0..50 {
            let s = random_stream(&mut rng, 32, 24, 0, 9_999, trial * 7 % 300);
            ok &= io::read_evt1(&io::write_evt1(&s)).map(|b| b == s).unwrap_or(false);
            let flow_data: Vec<f64> =
                (0..2 * 5 * 6).map(|_| rng.uniform(-16.0, 16.0) as f32 as f64).collect();
            let field = crate::flow::FlowField::new(Tensor::from_vec(vec![2, 5, 6], flow_data)).unwrap();
            let bytes = io::write_flo(&field);
            ok &= io::read_flo(&bytes).map(|b| io::write_flo(&b) == bytes).unwrap_or(false);
            let mut store = ParamStore::new();
            store.insert("w", vec![3, 2], (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let bytes = io::write_checkpoint(&store);
            ok &= io::read_checkpoint(&bytes)
                .map(|b| io::write_checkpoint(&b) == bytes)
                .unwrap_or(false);
        }
        if ok { Ok("EVT1 / FLO1 / EVFICKPT, 50 trials each".into()) } else { Err("round-trip mismatch".into()) }
    }));

    rows.push(report("metric_oracles", {
        let a = Frame::from_fn(1, 16, 16, |_, y, x| ((y * 16 + x) % 9) as f64 / 10.0);
        let b = Frame::from_fn(1, 16, 16, |_, y, x| ((y * 16 + x) % 9) as f64 / 10.0 + 0.1);
        let p = psnr(&a, &b).unwrap();
        let s_id = ssim(&a, &a).unwrap();
        if (p - 20.0).abs() < 1e-9 && s_id == 1.0 {
            Ok(format!("psnr offset {p:.6} dB, ssim identity {s_id}"))
        } else {
            Err(format!("psnr {p}, ssim {s_id}"))
        }
    }));

    rows.push(report("softmax_normalization", {
        let mut tape = Tape::no_grad();
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let x = Tensor::from_vec(vec![4, 7], (0..28).map(|_| rng.uniform(-50.0, 50.0)).collect());
            let y = tape.softmax(&x, 1).unwrap();
            for r in 0..4 {
                let s: f64 = y.data()[r * 7..(r + 1) * 7].iter().sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        if worst < 1e-9 { Ok(format!("max |sum-1| = {worst:.2e}")) } else { Err(format!("{worst:.2e}")) }
    }));

    rows.push(report("warp_linearity", {
        let mut tape = Tape::no_grad();
        let mut ok = true;
        for _ in 0..10 {
            let s1 = Tensor::from_vec(vec![1, 5, 5], (0..25).map(|_| rng.unit()).collect());
            let s2 = Tensor::from_vec(vec![1, 5, 5], (0..25).map(|_| rng.unit()).collect());
            let flow = Tensor::from_vec(vec![2, 5, 5], (0..50).map(|_| rng.uniform(-2.0, 2.0)).collect());
            let combo = Tensor::from_vec(
                vec![1, 5, 5],
                s1.data().iter().zip(s2.data()).map(|(a, b)| 1.7 * a - 0.4 * b).collect(),
            );
            let (wc, _) = backward_warp(&mut tape, &combo, &flow).unwrap();
            let (w1, _) = backward_warp(&mut tape, &s1, &flow).unwrap();
            let (w2, _) = backward_warp(&mut tape, &s2, &flow).unwrap();
            for i in 0..25 {
                ok &= (wc.data()[i] - (1.7 * w1.data()[i] - 0.4 * w2.data()[i])).abs() < 1e-9;
            }
        }
        if ok { Ok("10 random fields".into()) } else { Err("linearity violated".into()) }
    }));

    rows.push(report("charbonnier_even", {
        let mut tape = Tape::no_grad();
        let x = Tensor::from_vec(vec![16], (0..16).map(|_| rng.uniform(-2.0, 2.0)).collect());
        let neg = Tensor::from_vec(vec![16], x.data().iter().map(|v| -v).collect());
        let a = charbonnier(&mut tape, &x, 1e-3, 0.5).unwrap().item();
        let b = charbonnier(&mut tape, &neg, 1e-3, 0.5).unwrap().item();
        if a == b { Ok(format!("rho = {a:.6}")) } else { Err(format!("{a} vs {b}")) }
    }));

    rows.push(report("zero_cascade_identity", {
        let cfg = PyramidConfig::micro();
        let mut prng = Rng::new(rng.next_u64());
        let store = init_biof_params(&cfg, &mut prng);
        let params = store.bind_frozen();
        let t = |c: usize, rng: &mut Rng| {
            Tensor::from_vec(vec![1, c, 16, 16], (0..c * 256).map(|_| rng.uniform(-0.5, 0.5)).collect())
        };
        let (i0, i1, g0t, gt0, gt1) = (t(3, &mut rng), t(3, &mut rng), t(16, &mut rng), t(16, &mut rng), t(16, &mut rng));
        let mut tape = Tape::no_grad();
        let input = BiOFInput { i0: &i0, i1: &i1, g_0t: &g0t, g_t0: &gt0, g_t1: &gt1 };
        let out = eif_biofnet_forward(&mut tape, &cfg, &params, &input, ForwardOptions::default()).unwrap();
        let all_zero = out
            .flows
            .iter()
            .all(|(a, b)| a.data().iter().all(|&v| v == 0.0) && b.data().iter().all(|&v| v == 0.0));
        if all_zero { Ok("default-initialized cascade emits exact zeros".into()) } else { Err("nonzero flow".into()) }
    }));

    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_selftests_pass() {
        for row in run_selftest(7) {
            assert!(row.pass, "{} failed: {}", row.name, row.detail);
        }
    }
}
