use chora_core::harness::*;
use chora_core::netsim::{DelayModel, Dist};
use chora_core::trace::TraceKind;

fn base(protocol: Protocol, n: u32) -> Scenario {
    let mut sc = Scenario::new(protocol, n);
    sc.declare_windows = false;
    sc
}

#[test]
#[ignore]
fn probe_msgs_per_commit() {
    for n in [3u32, 5, 7] {
        let mut sc = base(Protocol::ChoraPulsing, n);
        sc.clients = 16 * n;
        sc.delay = DelayModel::new(Dist::Uniform { lo: 2000, hi: 4000 }, Dist::Constant(500), 0.0);
        sc.round_length_ns = 2 * (n as u64 - 1) * 500 + 2000;
        sc.think_ns = 2 * sc.round_length_ns;
        sc.duration_ns = 400 * sc.round_length_ns;
        let r = run_scenario(&sc, 1).unwrap().result;
        let mut sq = sc.clone();
        sq.round_length_ns = sc.round_length_ns / 4;
        sq.duration_ns = sc.duration_ns;
        let rq = run_scenario(&sq, 1).unwrap().result;
        println!(
            "n={} T={} mpc={:?} | T/4={} mpc={:?}",
            n, sc.round_length_ns, r.msgs_per_commit, sq.round_length_ns, rq.msgs_per_commit
        );
    }
}

#[test]
#[ignore]
fn probe_round_length_sweep() {
    let mut sc = base(Protocol::ChoraPulsing, 3);
    sc.clients = 24;
    sc.think_ns = 500;
    sc.delay = DelayModel::new(Dist::Uniform { lo: 2000, hi: 4000 }, Dist::Constant(400), 0.0);
    sc.duration_ns = 2_000_000;
    let values = vec![600u64, 1200, 2400, 4800, 9600];
    let rows = sweep(&sc, &SweepAxis::RoundLength(values.clone()), &[1, 2, 3, 4, 5]).unwrap();
    for (i, v) in values.iter().enumerate() {
        let m: f64 = rows[i * 5..(i + 1) * 5].iter().map(|r| r.throughput_ops_per_s).sum::<f64>() / 5.0;
        println!("T={} tput={:.3e}", v, m);
    }
    let mut resp = sc.clone();
    resp.protocol = Protocol::ChoraResponsive;
    let m: f64 = (1..=5u64).map(|s| run_scenario(&resp, s).unwrap().result.throughput_ops_per_s).sum::<f64>() / 5.0;
    println!("responsive tput={:.3e}", m);
}

#[test]
#[ignore]
fn probe_spread_sweep() {
    let mut sc = base(Protocol::ChoraPulsing, 5);
    sc.clients = 40;
    sc.think_ns = 500;
    sc.delay = DelayModel::new(Dist::Uniform { lo: 2800, hi: 3200 }, Dist::Constant(50), 0.0);
    sc.early_exit = true;
    sc.round_length_ns = 20_000;
    sc.duration_ns = 4_000_000;
    sc.compute_ideal = true;
    let rows = sweep(&sc, &SweepAxis::DelaySpread(vec![200, 1200, 2800]), &[1, 2, 3, 4, 5]).unwrap();
    for chunk in rows.chunks(5) {
        let s: f64 = chunk.iter().map(|r| r.synchrony.as_ref().unwrap().s).sum::<f64>() / 5.0;
        let k: f64 = chunk.iter().map(|r| r.kappa.unwrap()).sum::<f64>() / 5.0;
        let a: f64 = chunk.iter().map(|r| r.alpha.unwrap()).sum::<f64>() / 5.0;
        let b: f64 = chunk.iter().map(|r| r.beta.unwrap()).sum::<f64>() / 5.0;
        println!("s90={:.4} alpha={:.4} beta={:.4} kappa={:.4}", s, a, b, k);
    }
}

#[test]
#[ignore]
fn probe_throughput_ordering() {
    for n in [3u32, 5, 7] {
        for p in [Protocol::ChoraPulsing, Protocol::ChoraResponsive, Protocol::Mencius, Protocol::MultiPaxos] {
            let mut sc = base(p, n);
            sc.clients = 16 * n;
            sc.think_ns = 200;
            sc.detector_rounds = 250;
            sc.delay = DelayModel::new(Dist::Uniform { lo: 2000, hi: 4000 }, Dist::Constant(500), 0.0);
            sc.round_length_ns = 4000;
            sc.duration_ns = 2_000_000;
            let m: f64 = (1..=10u64)
                .map(|s| run_scenario(&sc, s).unwrap().result.throughput_ops_per_s)
                .sum::<f64>()
                / 10.0;
            println!("n={} {} tput={:.4e}", n, p.name(), m);
        }
    }
}

#[test]
#[ignore]
fn probe_crash_recovery() {
    let mut sc = base(Protocol::ChoraPulsing, 5);
    sc.clients = 60;
    sc.think_ns = 5000;
    sc.delay = DelayModel::new(Dist::Uniform { lo: 2900, hi: 3100 }, Dist::Constant(200), 0.0);
    sc.round_length_ns = 4000;
    sc.duration_ns = 4_800_000;
    sc.faults.push(Fault { at: 1_600_000, action: FaultAction::Crash(4) });
    for seed in 1..=5u64 {
        let out = run_scenario(&sc, seed).unwrap();
        let mut pre = 0u64;
        let mut post = 0u64;
        let mut seen = std::collections::BTreeSet::new();
        for e in out.trace.events() {
            if let TraceKind::Commit { slot, ops, .. } = e.kind {
                if !seen.insert(slot) {
                    continue;
                }
                if (400_000..1_600_000).contains(&e.time) {
                    pre += ops as u64;
                } else if (2_800_000..4_400_000).contains(&e.time) {
                    post += ops as u64;
                }
            }
        }
        let pre_r = pre as f64 / 1.2e6;
        let post_r = post as f64 / 1.6e6;
        println!(
            "seed={} pre={:.5} post={:.5} ratio={:.3} ttr={:?} safety={}",
            seed,
            pre_r,
            post_r,
            post_r / pre_r,
            out.result.time_to_recover_ns,
            out.result.safety_pass
        );
    }
}

#[test]
#[ignore]
fn probe_mode_flapping() {
    let mut sc = base(Protocol::ChoraAuto, 3);
    sc.clients = 24;
    sc.think_ns = 500;
    sc.delay = DelayModel::new(Dist::Constant(3000), Dist::Constant(500), 0.0);
    sc.round_length_ns = 4000;
    sc.duration_ns = 3_000_000;
    sc.faults.push(Fault {
        at: 1_000_000,
        action: FaultAction::SetDelayModel(DelayModel::new(
            Dist::Uniform { lo: 1000, hi: 20000 },
            Dist::Constant(500),
            0.0,
        )),
    });
    sc.faults.push(Fault {
        at: 2_000_000,
        action: FaultAction::SetDelayModel(DelayModel::new(
            Dist::Constant(3000),
            Dist::Constant(500),
            0.0,
        )),
    });
    for seed in 1..=3u64 {
        let out = run_scenario(&sc, seed).unwrap();
        let switches: Vec<String> = out
            .trace
            .events()
            .iter()
            .filter_map(|e| match &e.kind {
                TraceKind::ModeSwitch { mode } => Some(format!("{}@{}:{}", e.node, e.time, mode)),
                _ => None,
            })
            .collect();
        println!("seed={} switches={:?} safety={}", seed, switches, out.result.safety_pass);
    }
}

#[test]
#[ignore]
fn probe_utilization() {
    let mut sc = base(Protocol::ChoraPulsing, 5);
    sc.clients = 40;
    sc.think_ns = 500;
    sc.delay = DelayModel::new(Dist::Constant(3000), Dist::Constant(500), 0.0);
    sc.round_length_ns = 2000;
    sc.duration_ns = 2_000_000;
    let out = run_scenario(&sc, 1).unwrap();
    let sr = out.result.synchrony.as_ref().unwrap();
    println!("s_tilde={} s={}", sr.s_tilde, sr.s);
    for (node, busy) in &out.busy_ns {
        println!("node={} util={:.4}", node, *busy as f64 / 2.0e6);
    }
}

#[test]
#[ignore]
fn probe_soak_timing() {
    use std::time::Instant;
    let t0 = Instant::now();
    let mut sc = base(Protocol::ChoraPulsing, 7);
    sc.duration_ns = 1_200_000;
    sc.faults.push(Fault { at: 400_000, action: FaultAction::Crash(6) });
    let seeds: Vec<u64> = (0..100).collect();
    let rs = run_seeds(&sc, &seeds).unwrap();
    let fails = rs.iter().filter(|r| !r.checker.all_pass()).count();
    println!("100 crash runs n=7: {:?}, failures={}", t0.elapsed(), fails);
}
