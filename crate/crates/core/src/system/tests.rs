use super::*;
use crate::bench::micro::{self, MicroBench};
use crate::bench::scenario::StallKind;
use crate::bench::{overhead, templates};
use crate::guests::{ProfileKind, RtProfile, RtTaskConfig};
use crate::simcore::trace_hash;

fn run(c: &ScenarioConfig) -> System {
    let mut s = System::new(c).expect("valid scenario");
    s.run();
    s
}

fn count(s: &System, f: impl Fn(&TraceRecord) -> bool) -> usize {
    s.trace().iter().filter(|r| f(r)).count()
}

// Oracle for the composed paths, summed by hand from the individual
// charges rather than taken from the calibration module.
fn oracle_paths(c: &CostModel) -> (u64, u64) {
    let (t, w, h, v) = (c.vm_trap_ns, c.world_switch_ns, c.hypercall_ns, c.virq_inject_ns);
    let ipi = t + c.gicd_emul_ns + t + w + h + v + w;
    let io_out = t + w + h + v + w + c.gdm_user_hop_ns + h + w;
    (ipi, io_out)
}

#[test]
fn micro_paths_match_oracle() {
    let perturbed = CostModel {
        hypercall_ns: 500,
        vm_trap_ns: 700,
        world_switch_ns: 1600,
        virq_inject_ns: 300,
        gicd_emul_ns: 4000,
        gdm_user_hop_ns: 3000,
        ..CostModel::default()
    };
    for cost in [CostModel::default(), perturbed] {
        let mut c = templates::micro(20);
        c.cost_model = cost.clone();
        let s = run(&c);
        s.check_invariants().unwrap();
        let (ipi, io_out) = oracle_paths(&cost);
        let get = |b| micro::samples(s.trace(), b);
        assert_eq!(get(MicroBench::Ipi), vec![ipi; 20]);
        assert_eq!(get(MicroBench::IoOut), vec![io_out; 20]);
        assert_eq!(get(MicroBench::Hypercall), vec![cost.hypercall_ns; 20]);
        assert!(get(MicroBench::WorldSwitch).iter().all(|&x| x == cost.world_switch_ns));
        assert!(get(MicroBench::VmTrap).iter().all(|&x| x == cost.vm_trap_ns));
    }
}

#[test]
fn io_bound_forwarding_cost_per_interrupt() {
    let c = templates::overhead(ProfileKind::IoBound, 1_000_000_000);
    let s = run(&c);
    s.check_invariants().unwrap();
    let r = overhead::overhead_from_trace(s.trace(), 1, c.duration_ns, &c.cost_model);
    assert!((12346.0 * 0.99..=12346.0 * 1.01).contains(&r.int_freq), "{r:?}");
    // Every interrupt costs two switches plus one injection hypercall.
    assert_eq!(r.charged_ns, r.interrupts * (2 * 1485 + 441 + 233));
    assert_eq!(r.world_switches, 2 * r.interrupts);
    assert!(r.measured >= r.estimated * 0.99);
}

#[test]
fn cpu_bound_rate() {
    let c = templates::overhead(ProfileKind::CpuBound, 1_000_000_000);
    let s = run(&c);
    let r = overhead::overhead_from_trace(s.trace(), 1, c.duration_ns, &c.cost_model);
    assert!((247.0..=253.0).contains(&r.int_freq), "{r:?}");
}

#[test]
fn rtvm_contained() {
    for k in [0u32, 1, 7] {
        let s = run(&templates::rtvm_gicd(k, 1_000_000_000));
        let traps = count(&s, |r| matches!(r.action, Action::VmTrap { vm: 1, .. }));
        let hops = count(&s, |r| matches!(r.action, Action::RouteToGear2 { vm: 1, .. }));
        assert_eq!((traps, hops), (k as usize, 0), "k={k}");
        assert_eq!(s.gear1.vm(1).unwrap().gear2_hops, 0);
    }
}

#[test]
fn vcpus_only_run_on_their_pcpu() {
    let scenarios = [
        templates::micro(10),
        templates::overhead(ProfileKind::IoBound, 50_000_000),
        templates::jitter(templates::JitterConfig::GearvNonRtVm, RtTaskConfig { samples: 50, ..Default::default() }, 3),
        templates::jitter(templates::JitterConfig::KvmLikeRtVm, RtTaskConfig { samples: 50, ..Default::default() }, 3),
        templates::supervised(200_000_000),
    ];
    for c in &scenarios {
        let s = run(c);
        s.check_invariants().unwrap();
        for r in s.trace() {
            if let Action::WorldSwitch { pcpu, to: World::Vm { vm, vcpu }, .. } = r.action {
                assert_eq!(s.gear1.affinity(vm, vcpu), Some(pcpu), "{}: {r:?}", c.name);
            }
        }
    }
}

#[test]
fn same_seed_same_hash() {
    let rt = RtTaskConfig { samples: 200, ..Default::default() };
    for c in [templates::micro(10), templates::jitter(templates::JitterConfig::KvmLikeRtVm, rt, 4)] {
        assert_eq!(trace_hash(run(&c).trace()), trace_hash(run(&c).trace()));
    }
    let a = run(&templates::jitter(templates::JitterConfig::GearvRtVmPassthrough, rt, 4));
    let b = run(&templates::jitter(templates::JitterConfig::GearvRtVmPassthrough, rt, 5));
    assert_ne!(trace_hash(a.trace()), trace_hash(b.trace()));
}

#[test]
fn every_trapped_store_is_acked_once() {
    let s = run(&templates::micro(30));
    let traps = count(&s, |r| matches!(r.action, Action::VmTrap { vm: 2, reason: "mmio_write", .. }));
    let acks = count(&s, |r| matches!(r.action, Action::IoAck { vm: 2, .. }));
    let adv = count(&s, |r| matches!(r.action, Action::IpAdvance { vm: 2, .. }));
    assert_eq!((traps, acks, adv), (30, 30, 30));
    assert!(s.guest(2, 0).unwrap().ended());
}

#[test]
fn noiseless_cyclictest_sees_base_jitter() {
    let rt =
        RtTaskConfig { samples: 300, profile: RtProfile::Deterministic, base_jitter_ns: 2500, ..Default::default() };
    let s = run(&templates::cyclictest(rt, rt.horizon_ns()));
    let samples = &s.guest(1, 0).unwrap().samples;
    assert_eq!(samples.len(), 300);
    assert!(samples.iter().all(|&x| x == 2500));
}

#[test]
fn healthy_run_raises_nothing() {
    let s = run(&templates::supervised(3_000_000_000));
    assert!(s.supervision_events().is_empty(), "{:?}", s.supervision_events());
    assert!(count(&s, |r| matches!(r.action, Action::WatchdogKick { layer: "l1rs", .. })) > 0);
    assert!(count(&s, |r| matches!(r.action, Action::WatchdogKick { layer: "l2rs", .. })) > 0);
}

#[test]
fn vm_stall_caught_by_l2() {
    let mut c = templates::supervised(2_000_000_000);
    let at = 700_000_000;
    c.stalls = vec![StallSpec::Vm { at_ns: at, vm: 1, kind: StallKind::Vm }];
    c.supervision.l2_action = SupervisionAction::RestartVm;
    let s = run(&c);
    let ev = s.supervision_events();
    let first = ev.first().expect("detected");
    assert_eq!((first.layer, first.subject), (Layer::L2, 1));
    let bound = c.supervision.l2_period_ns + c.supervision.granularity(Layer::L2);
    assert!(first.at - at <= bound, "{} > {bound}", first.at - at);
    assert!(count(&s, |r| matches!(r.action, Action::VmRestart { vm: 1 })) >= 1);
    // Restarted and healthy again: no second event.
    assert_eq!(ev.len(), 1, "{ev:?}");
    s.check_invariants().unwrap();
}

#[test]
fn app_stall_caught_by_l1() {
    let mut c = templates::supervised(1_000_000_000);
    c.stalls = vec![StallSpec::Vm { at_ns: 300_000_000, vm: 2, kind: StallKind::App }];
    let s = run(&c);
    let ev = s.supervision_events();
    assert!(ev.iter().any(|e| e.layer == Layer::L1 && e.subject == 2), "{ev:?}");
    assert!(ev.iter().all(|e| e.subject == 2), "{ev:?}");
}

#[test]
fn gear2_stall_caught_by_l3() {
    let mut c = templates::supervised(2_000_000_000);
    let at = 500_000_000;
    c.stalls = vec![StallSpec::Gear2 { at_ns: at }];
    let s = run(&c);
    let ev = s.supervision_events();
    let l3 = ev.iter().find(|e| e.layer == Layer::L3).expect("l3 detection");
    assert!(l3.at - at <= c.supervision.l3_period_ns + c.supervision.granularity(Layer::L3));
    assert!(ev.iter().all(|e| e.layer != Layer::L2), "L2 checks run in Gear2: {ev:?}");
}

#[test]
fn shared_pcpu_round_robin_is_fair() {
    let c = templates::shared_pcpu(3, 300 * crate::gear2::RoundRobin::DEFAULT_QUANTUM_NS);
    let s = run(&c);
    let q: Vec<u64> = (1..=3).map(|vm| s.gear2.quanta(s.gear2.thread_of(vm, 0).unwrap())).collect();
    assert!(q.iter().all(|&n| (99..=101).contains(&n)), "{q:?}");
}
