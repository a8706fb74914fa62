mod common;

use common::random_episodes;
use proptest::prelude::*;
use scaffolder::envs::ObservationBundle;
use scaffolder::numerics::Rng;
use scaffolder::replay::{collection_scheduler, Collector, EpisodeRecord, ReplayBuffer, ReplayError};
use scaffolder::world_model::strip_privileged;

/// Episode whose step `k` carries the value `base + k` everywhere.
fn tagged_episode(base: f64, steps: usize, collector: Collector) -> EpisodeRecord {
    let obs = |k: usize| ObservationBundle {
        target: vec![base + k as f64],
        privileged: vec![-(base + k as f64)],
    };
    let mut ep = EpisodeRecord::new(obs(0), collector, base as u64);
    for k in 1..=steps {
        ep.push(vec![base + k as f64], base + k as f64, k < steps, obs(k));
    }
    ep
}

#[test]
fn eviction_drops_oldest_first() {
    let mut buf = ReplayBuffer::new(25);
    for e in 0..4 {
        buf.push(tagged_episode(100.0 * e as f64, 10, Collector::Scripted)).unwrap();
    }
    assert_eq!(buf.episode_ids().collect::<Vec<_>>(), vec![2, 3]);
    assert_eq!(buf.stored_steps(), 20);
    let err = buf.push(tagged_episode(0.0, 30, Collector::Scripted)).unwrap_err();
    assert!(matches!(err, ReplayError::TooLong { steps: 30, capacity: 25 }));
}

#[test]
fn empty_buffer_is_not_ready() {
    let buf = ReplayBuffer::new(10);
    assert!(matches!(buf.sample_sequences(2, 4, &mut Rng::new(0)), Err(ReplayError::NotReady(_))));
}

#[test]
fn single_episode_windows_are_contiguous() {
    let mut buf = ReplayBuffer::new(100);
    buf.push(tagged_episode(0.0, 12, Collector::Scripted)).unwrap();
    let (batch, origins) = buf.sample_with_origins(64, 5, &mut Rng::new(1)).unwrap();
    for (b, o) in origins.iter().enumerate() {
        assert!(o.start + 5 <= 13);
        for j in 0..5 {
            let k = (o.start + j) as f64;
            assert_eq!(batch.target[j].data[b], k);
            assert_eq!(batch.privileged[j].data[b], -k);
            assert_eq!(batch.mask[j].data[b], 1.0);
            if j == 0 {
                assert_eq!(batch.is_first[0].data[b], 1.0);
                assert_eq!(batch.actions[0].data[b], 0.0);
                assert_eq!(batch.rewards[0].data[b], 0.0);
                assert_eq!(batch.continues[0].data[b], 1.0);
            } else {
                assert_eq!(batch.is_first[j].data[b], 0.0);
                assert_eq!(batch.actions[j].data[b], k);
                assert_eq!(batch.rewards[j].data[b], k);
            }
        }
    }
}

#[test]
fn short_episode_is_padded_with_zero_mask() {
    let mut buf = ReplayBuffer::new(100);
    buf.push(tagged_episode(0.0, 2, Collector::Scripted)).unwrap();
    let batch = buf.sample_sequences(1, 6, &mut Rng::new(2)).unwrap();
    let mask: Vec<f64> = batch.mask.iter().map(|m| m.data[0]).collect();
    assert_eq!(mask, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    assert_eq!(batch.valid_steps(), 3.0);
}

#[test]
fn sampling_is_proportional_to_episode_length() {
    // Two equal-length episodes: each should supply half the samples.
    let mut buf = ReplayBuffer::new(1000);
    buf.push(tagged_episode(0.0, 20, Collector::TargetPolicy)).unwrap();
    buf.push(tagged_episode(1000.0, 20, Collector::ExplorationPolicy)).unwrap();
    let (_, origins) = buf.sample_with_origins(100_000, 8, &mut Rng::new(3)).unwrap();
    let first = origins.iter().filter(|o| o.episode_id == 0).count() as f64 / 1e5;
    assert!((first - 0.5).abs() < 0.01, "fraction {first}");
}

#[test]
fn window_as_long_as_the_episode_is_the_whole_episode() {
    let mut buf = ReplayBuffer::new(100);
    buf.push(tagged_episode(0.0, 9, Collector::Scripted)).unwrap();
    let (batch, origins) = buf.sample_with_origins(50, 10, &mut Rng::new(4)).unwrap();
    assert!(origins.iter().all(|o| o.start == 0));
    assert_eq!(batch.valid_steps(), 500.0);
}

#[test]
fn episode_ends_are_not_starved() {
    // Interior steps lie in about L/n of the windows; the terminal step
    // must appear in at least a third of that rate.
    let mut buf = ReplayBuffer::new(1000);
    buf.push(tagged_episode(0.0, 100, Collector::Scripted)).unwrap();
    let length = 16;
    let (_, origins) = buf.sample_with_origins(20_000, length, &mut Rng::new(5)).unwrap();
    let covers = |k: usize| origins.iter().filter(|o| o.start <= k && k < o.start + length).count() as f64 / 2e4;
    let interior = covers(50);
    assert!((interior - length as f64 / 101.0).abs() < 0.02, "interior {interior}");
    assert!(covers(100) > interior / 3.0, "terminal {} interior {interior}", covers(100));
}

#[test]
fn collector_tags_survive_round_trip() {
    let mut buf = ReplayBuffer::new(1000);
    for (e, c) in [Collector::Scripted, Collector::TargetPolicy, Collector::ExplorationPolicy].into_iter().enumerate() {
        buf.push(tagged_episode(10.0 * e as f64, 4, c)).unwrap();
    }
    let bytes = buf.to_bytes();
    let back = ReplayBuffer::from_bytes(&bytes).unwrap();
    assert_eq!(back, buf);
    let tags: Vec<Collector> = back.episodes().map(|e| e.collector).collect();
    assert_eq!(
        tags,
        vec![Collector::Scripted, Collector::TargetPolicy, Collector::ExplorationPolicy]
    );
    for cut in [0, 7, bytes.len() / 2, bytes.len() - 1] {
        assert!(ReplayBuffer::from_bytes(&bytes[..cut]).is_err());
    }
}

#[test]
fn snapshot_is_bit_exact() {
    let mut buf = ReplayBuffer::new(1000);
    let mut ep = tagged_episode(0.0, 3, Collector::Scripted);
    ep.rewards[1] = 0.1 + 0.2;
    ep.observations[2].target[0] = f64::MIN_POSITIVE / 3.0;
    ep.observations[1].privileged[0] = -0.0;
    buf.push(ep.clone()).unwrap();
    let back = ReplayBuffer::from_bytes(&buf.to_bytes()).unwrap();
    let got = back.episodes().next().unwrap();
    assert_eq!(got.rewards[1].to_bits(), ep.rewards[1].to_bits());
    assert_eq!(got.observations[2].target[0].to_bits(), ep.observations[2].target[0].to_bits());
    assert_eq!(got.observations[1].privileged[0].to_bits(), (-0.0f64).to_bits());
    let mut a = Rng::new(9);
    let mut b = Rng::new(9);
    assert_eq!(
        buf.sample_sequences(4, 3, &mut a).unwrap().target,
        back.sample_sequences(4, 3, &mut b).unwrap().target
    );
}

#[test]
fn scheduler_alternates_when_exploring() {
    let seq: Vec<Collector> = (0..4).map(|e| collection_scheduler(e, true)).collect();
    assert_eq!(
        seq,
        vec![
            Collector::TargetPolicy,
            Collector::ExplorationPolicy,
            Collector::TargetPolicy,
            Collector::ExplorationPolicy
        ]
    );
    assert!((0..50).all(|e| collection_scheduler(e, false) == Collector::TargetPolicy));
    let explore = (0..1000).filter(|e| collection_scheduler(*e, true) == Collector::ExplorationPolicy).count();
    assert_eq!(explore, 500);
}

#[test]
fn stripping_keeps_target_view() {
    let buf = random_episodes("car_flag", 2, 5);
    let batch = buf.sample_sequences(3, 6, &mut Rng::new(6)).unwrap();
    let stripped = strip_privileged(&batch);
    assert_eq!(stripped.target, batch.target);
    assert_eq!(stripped.actions, batch.actions);
    assert_eq!(stripped.mask, batch.mask);
    assert!(stripped.privileged.iter().all(|p| p.cols == 0 && p.rows == 3));
}

#[test]
fn malformed_episode_rejected() {
    let mut ep = tagged_episode(0.0, 3, Collector::Scripted);
    ep.rewards.pop();
    assert!(matches!(ReplayBuffer::new(10).push(ep), Err(ReplayError::Malformed(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn windows_never_cross_episodes(
        lens in prop::collection::vec(1usize..15, 1..6),
        length in 1usize..10,
        seed in 0u64..1000,
    ) {
        let mut buf = ReplayBuffer::new(10_000);
        for (e, n) in lens.iter().enumerate() {
            buf.push(tagged_episode(1000.0 * e as f64, *n, Collector::Scripted)).unwrap();
        }
        let (batch, origins) = buf.sample_with_origins(16, length, &mut Rng::new(seed)).unwrap();
        for (b, o) in origins.iter().enumerate() {
            let base = 1000.0 * o.episode_id as f64;
            for j in 0..length {
                if batch.mask[j].data[b] == 1.0 {
                    prop_assert_eq!(batch.target[j].data[b], base + (o.start + j) as f64);
                } else {
                    prop_assert_eq!(batch.target[j].data[b], 0.0);
                    prop_assert!(o.start + j > lens[o.episode_id as usize]);
                }
            }
        }
    }
}
