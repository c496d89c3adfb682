use std::convert::Infallible;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use crossmac_core::channel::{Channel, ChannelParams, PhyParams};
use crossmac_core::harness::run_scenario;
use crossmac_core::kernel::{Kernel, SimTime, Traced};
use crossmac_core::mac::Frame;
use crossmac_core::node::Position;
use crossmac_core::rng::{derive_stream, StreamPurpose, GLOBAL_STREAM};
use crossmac_core::scenario::{Placement, Protocol, Scenario};
use crossmac_core::NodeId;
use rand::Rng;

struct Tick(u32);

impl Traced for Tick {
    fn target(&self) -> String {
        "bench".into()
    }
    fn kind(&self) -> &'static str {
        "tick"
    }
}

fn kernel_churn(c: &mut Criterion) {
    c.bench_function("kernel/10k_self_rescheduling", |b| {
        b.iter_batched(
            || {
                let mut k = Kernel::new();
                for i in 0..64 {
                    k.schedule(SimTime::from_micros(i), Tick(i as u32)).unwrap();
                }
                k
            },
            |mut k| {
                let mut left = 10_000u32;
                k.run_until(SimTime::MAX, |k, ev| {
                    if left > 0 {
                        left -= 1;
                        k.schedule_in(SimTime::from_micros(9 + u64::from(ev.payload.0 % 7)), Tick(ev.payload.0));
                    }
                    Ok::<(), Infallible>(())
                })
                .unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn channel_frames(c: &mut Criterion) {
    let mut place = derive_stream(7, GLOBAL_STREAM, StreamPurpose::Placement);
    let positions: Vec<Position> =
        (0..40).map(|_| Position::new(place.random_range(0.0..700.0), place.random_range(0.0..700.0))).collect();
    c.bench_function("channel/begin_end_40_nodes", |b| {
        b.iter_batched(
            || Channel::new(ChannelParams::default(), PhyParams::default(), positions.clone()),
            |mut ch| {
                let mut shadow = derive_stream(1, GLOBAL_STREAM, StreamPurpose::Shadowing);
                let mut t = SimTime::ZERO;
                let mut verdicts = 0usize;
                for i in 0..200u32 {
                    let src = NodeId(i % 40);
                    let dst = NodeId((i + 1) % 40);
                    let (id, rec) =
                        ch.begin_transmission(Frame::data_for_test(src, dst, 512), src, 20.0, t, &mut shadow).unwrap();
                    verdicts += rec.len();
                    let end = ch.signal(id).unwrap().end;
                    verdicts += ch.end_transmission(id, end).unwrap().1.len();
                    t = end + SimTime::from_micros(50);
                }
                black_box(verdicts)
            },
            BatchSize::SmallInput,
        )
    });
}

fn short_runs(c: &mut Criterion) {
    let sc = Scenario {
        name: "bench".into(),
        node_count: 20,
        area_m: [500.0, 500.0],
        placement: Placement::Random { seed: Some(1) },
        sim_time_s: 2.0,
        ..Scenario::default()
    };
    let mut g = c.benchmark_group("run_2s_20_nodes");
    g.sample_size(10);
    for p in Protocol::ALL {
        g.bench_function(p.as_str(), |b| b.iter(|| black_box(run_scenario(&sc, p, 1000).unwrap().packets_received)));
    }
    g.finish();
}

criterion_group!(benches, kernel_churn, channel_frames, short_runs);
criterion_main!(benches);
