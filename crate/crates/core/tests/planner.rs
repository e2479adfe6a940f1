use proptest::prelude::*;

use shardpipe::model::{Bitwidth, HardwareProfile, ImportanceMap, ShardId, ShardVersion, SubmodelShape, DEFAULT_FREQ};
use shardpipe::plan::{ledger_for, plan, plan_compute, PlanRequest, PreloadEntry, UpgradePolicy, DEFAULT_INPUT_LEN};
use shardpipe::sim::{simulate, simulate_strategy, Strategy, StrategyContext};
use shardpipe::Micros;

fn bw(k: u32) -> Bitwidth {
    Bitwidth::new(k).unwrap()
}

fn profile(per_bit_us: i64, per_slice_us: i64, m: usize) -> HardwareProfile {
    let mut p = HardwareProfile::default();
    for k in [2, 3, 4, 5, 6, 32] {
        p.io_delay.insert(bw(k), Micros(per_bit_us * k as i64 + 50));
    }
    for w in 1..=m {
        p.set_compute(DEFAULT_INPUT_LEN, w, DEFAULT_FREQ, Micros(per_slice_us * w as i64));
    }
    p
}

fn layer0(m: usize, k: u32) -> Vec<PreloadEntry> {
    (0..m)
        .map(|s| PreloadEntry {
            version: ShardVersion::new(0, s, bw(k)),
            bytes: 10,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn non_degraded_plans_meet_target_without_stalls(
        n in 1usize..=12,
        m in 3usize..=12,
        per_bit in 10i64..400,
        per_slice in 200i64..3_000,
        t_ms in 1i64..200,
        upgrade_preloaded in any::<bool>(),
        full_only in any::<bool>(),
    ) {
        let prof = profile(per_bit, per_slice, m);
        let imp = ImportanceMap::uniform(n, m);
        let mut req = PlanRequest::new(Micros::from_ms(t_ms), &prof, &imp, n, m);
        req.preload = layer0(m, 2);
        req.preload_budget = 10 * m as u64;
        req.upgrade_preloaded = upgrade_preloaded;
        if full_only {
            req.upgrade = UpgradePolicy::FullOnly;
        }
        let p = plan(&req).unwrap();
        p.check().unwrap();
        prop_assert_eq!(&ledger_for(&p, &prof).unwrap(), &p.ledger);
        let trace = simulate(&p, &prof).unwrap();
        if !p.degraded {
            prop_assert!(p.ledger.is_valid());
            prop_assert!(trace.is_stall_free());
            prop_assert!(trace.makespan <= req.target_latency);
        }
        prop_assert_eq!(p.ledger.is_valid(), trace.is_stall_free());
    }

    #[test]
    fn more_time_never_shrinks_the_shape(
        n in 1usize..=12,
        m in 1usize..=12,
        per_slice in 100i64..5_000,
        t1 in 1i64..100_000,
        dt in 0i64..100_000,
    ) {
        let prof = profile(100, per_slice, m);
        let imp = ImportanceMap::uniform(n, m);
        let mut a = PlanRequest::new(Micros(t1), &prof, &imp, n, m);
        a.m_min = 1;
        let mut b = a.clone();
        b.target_latency = Micros(t1 + dt);
        let sa = plan_compute(&a).unwrap();
        let sb = plan_compute(&b).unwrap();
        if !sa.degraded {
            prop_assert!(!sb.degraded);
            prop_assert!(sb.shape >= sa.shape);
        }
    }
}

#[test]
fn upgrades_follow_importance() {
    let (n, m) = (4, 4);
    let prof = profile(100, 1_000, m);
    let mut imp = ImportanceMap::uniform(n, m);
    // the top layer's last shard matters most
    imp.scores.insert(ShardId::new(3, 3), 1.0);
    let mut req = PlanRequest::new(Micros::from_ms(40), &prof, &imp, n, m);
    req.preload = layer0(m, 2);
    req.preload_budget = 40;
    let p = plan(&req).unwrap();
    assert!(!p.degraded);
    let top = p.bitwidth(ShardId::new(3, 3));
    assert!(p.assignment.iter().all(|(_, k)| k <= top), "{:?}", p.assignment);
    assert!(top > bw(2));
}

#[test]
fn elastic_is_at_least_as_large_as_pipelined_baselines() {
    let (n, m) = (12, 12);
    let mut prof = profile(150, 1_500, m);
    for k in [2, 3, 4, 5, 6, 32] {
        prof.shard_bytes.insert(bw(k), 100 * k as u64);
    }
    let imp = ImportanceMap::uniform(n, m);
    let mut ctx = StrategyContext::new(&prof, &imp, n, m);
    ctx.preload_budget = 10_000_000;
    for t in [40, 80, 150, 250] {
        let target = Micros::from_ms(t);
        let elastic = simulate_strategy(Strategy::Elastic, &ctx, target).unwrap();
        assert!(!elastic.degraded, "T={t}");
        assert!(elastic.makespan <= target);
        for s in [Strategy::LoadThenExecute, Strategy::StandardPipeline(bw(32))] {
            let base = simulate_strategy(s, &ctx, target).unwrap();
            if !base.degraded {
                assert!(elastic.shape.shards() >= base.shape.shards(), "T={t} {s}: {} vs {}", elastic.shape, base.shape);
            }
        }
    }
    let full = simulate_strategy(Strategy::Elastic, &ctx, Micros::from_ms(1_000)).unwrap();
    assert_eq!(full.shape, SubmodelShape::new(n, m));
}

#[test]
fn reserve_leaves_headroom_after_upgrades() {
    let (n, m) = (6, 4);
    let prof = profile(100, 1_000, m);
    let imp = ImportanceMap::uniform(n, m);
    let mut req = PlanRequest::new(Micros::from_ms(25), &prof, &imp, n, m);
    req.preload = layer0(m, 2);
    req.preload_budget = 40;
    let packed = plan(&req).unwrap();
    req.io_reserve = Micros::from_ms(1);
    let reserved = plan(&req).unwrap();
    assert!(!packed.degraded && !reserved.degraded);
    assert_eq!(packed.shape, reserved.shape);

    assert!(packed.ledger.budgets.iter().any(|&b| b < req.io_reserve));
    // from the first upgraded layer on, every budget keeps the reserve
    let uniform = (1..n)
        .flat_map(|l| (0..m).map(move |s| ShardId::new(l, s)))
        .map(|id| reserved.bitwidth(id))
        .min()
        .unwrap();
    let first = (1..n)
        .find(|&l| (0..m).any(|s| reserved.bitwidth(ShardId::new(l, s)) > uniform))
        .unwrap();
    assert!(reserved.ledger.budgets[first..].iter().all(|&b| b >= req.io_reserve), "{:?}", reserved.ledger);
}
