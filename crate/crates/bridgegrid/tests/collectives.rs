//! Collectives over real loopback TCP: one process, one session and one
//! transport per simulated rank.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bridgegrid::collectives::{
    communicator_from_group, AllreduceVariant, CollectiveError, Communicator, ReduceOp, Transport,
};
use bridgegrid::rendezvous::{
    attach_local_group, server_start, ConnectRequest, Namespace, ServerConfig, Session,
};

/// Sequential ascending-rank fold; the independent oracle for allreduce.
fn fold_oracle(vectors: &[Vec<f64>], op: ReduceOp) -> Vec<f64> {
    let mut acc = vectors[0].clone();
    for v in &vectors[1..] {
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a = op.apply(*a, *x);
        }
    }
    acc
}

struct Ranks {
    _dir: tempfile::TempDir,
    _server: bridgegrid::rendezvous::Server,
    sessions: Vec<Session>,
    comms: Vec<Communicator>,
}

fn make_group(n: u32) -> Ranks {
    let dir = tempfile::tempdir().unwrap();
    let server = server_start(&ServerConfig::new(dir.path())).unwrap();
    let sessions = attach_local_group("job", n, server.contact()).unwrap();
    let transports: Vec<Transport> = (0..n).map(|_| Transport::bind().unwrap()).collect();
    for (s, t) in sessions.iter().zip(&transports) {
        s.put("endpoint", t.endpoint().as_bytes()).unwrap();
    }
    let participants: Vec<_> = (0..n).map(|r| sessions[0].peer(r)).collect();
    let comms: Vec<Communicator> = std::thread::scope(|scope| {
        let mut joins = Vec::new();
        for (s, t) in sessions.iter().zip(&transports) {
            let participants = participants.clone();
            joins.push(scope.spawn(move || {
                s.fence().unwrap();
                let info = s.connect(&ConnectRequest::new(participants)).unwrap();
                communicator_from_group(s, t, &info).unwrap()
            }));
        }
        joins.into_iter().map(|j| j.join().unwrap()).collect()
    });
    Ranks {
        _dir: dir,
        _server: server,
        sessions,
        comms,
    }
}

/// Run `f` once per rank on scoped threads and collect results in rank
/// order, propagating panics.
fn on_all<T: Send>(comms: &[Communicator], f: impl Fn(&Communicator) -> T + Sync) -> Vec<T> {
    std::thread::scope(|scope| {
        let joins: Vec<_> = comms
            .iter()
            .map(|c| scope.spawn(|| f(c)))
            .collect();
        joins.into_iter().map(|j| j.join().unwrap()).collect()
    })
}

#[test]
fn solo_communicator_collectives_are_identities() {
    let c = Communicator::solo().unwrap();
    assert_eq!(c.size(), 1);
    c.barrier().unwrap();
    assert_eq!(c.allreduce_tree(&[3.5, -1.0], ReduceOp::Sum).unwrap(), vec![3.5, -1.0]);
    assert_eq!(c.allreduce_ring(&[3.5, -1.0], ReduceOp::Sum).unwrap(), vec![3.5, -1.0]);
    assert_eq!(c.broadcast(0, b"x").unwrap(), b"x");
    assert_eq!(c.allgather(b"me").unwrap(), vec![b"me".to_vec()]);
    c.send(0, 7, b"loop").unwrap();
    assert_eq!(c.recv(0, 7).unwrap(), b"loop");
}

#[test]
fn send_recv_roundtrip_and_tag_isolation() {
    let g = make_group(2);
    let payload: Vec<u8> = (0..1024).map(|i| (i % 251) as u8).collect();
    let results = on_all(&g.comms, |c| {
        if c.rank() == 0 {
            c.send(1, 5, &payload).unwrap();
            c.send(1, 9, b"tag nine").unwrap();
            Vec::new()
        } else {
            // Receive the later tag first: tags never cross.
            let nine = c.recv(0, 9).unwrap();
            let five = c.recv(0, 5).unwrap();
            vec![nine, five]
        }
    });
    assert_eq!(results[1][0], b"tag nine");
    assert_eq!(results[1][1], payload);
}

#[test]
fn messages_arrive_in_send_order_per_triple() {
    let g = make_group(2);
    on_all(&g.comms, |c| {
        if c.rank() == 0 {
            for i in 0..50u32 {
                c.send(1, 1, &i.to_be_bytes()).unwrap();
            }
        } else {
            for i in 0..50u32 {
                let got = c.recv(0, 1).unwrap();
                assert_eq!(got, i.to_be_bytes());
            }
        }
    });
}

#[test]
fn barrier_establishes_happens_before() {
    let n = 4;
    let g = make_group(n);
    for _ in 0..5 {
        let entered: Vec<AtomicBool> = (0..n).map(|_| AtomicBool::new(false)).collect();
        let entered = Arc::new(entered);
        on_all(&g.comms, |c| {
            if c.rank() % 2 == 0 {
                std::thread::sleep(Duration::from_millis(10));
            }
            entered[c.rank() as usize].store(true, Ordering::SeqCst);
            c.barrier().unwrap();
            // No rank leaves the barrier while a peer has not entered.
            for e in entered.iter() {
                assert!(e.load(Ordering::SeqCst));
            }
        });
    }
}

#[test]
fn broadcast_from_every_root() {
    let g = make_group(3);
    for root in 0..3u32 {
        let results = on_all(&g.comms, |c| {
            let payload = format!("from {root}");
            c.broadcast(root, if c.rank() == root { payload.as_bytes() } else { b"" })
                .unwrap()
        });
        for r in results {
            assert_eq!(r, format!("from {root}").into_bytes());
        }
    }
}

#[test]
fn scatter_gather_examples_and_roundtrip() {
    let g = make_group(3);
    let pieces: Vec<Vec<u8>> = vec![b"a".to_vec(), b"b".to_vec(), b"c".to_vec()];
    let results = on_all(&g.comms, |c| {
        let mine = c
            .scatter(0, (c.rank() == 0).then_some(pieces.as_slice()))
            .unwrap();
        let gathered = c.gather(0, &mine).unwrap();
        (mine, gathered)
    });
    for (rank, (mine, _)) in results.iter().enumerate() {
        assert_eq!(mine, &pieces[rank]);
    }
    // Gather at root restores the scattered list exactly.
    assert_eq!(results[0].1.as_ref().unwrap(), &pieces);

    // Randomized scatter/gather round-trip.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let random: Vec<Vec<u8>> = (0..3)
            .map(|_| (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect())
            .collect();
        let results = on_all(&g.comms, |c| {
            let mine = c
                .scatter(1, (c.rank() == 1).then_some(random.as_slice()))
                .unwrap();
            c.gather(1, &mine).unwrap()
        });
        assert_eq!(results[1].as_ref().unwrap(), &random);
    }
}

#[test]
fn scatter_length_mismatch_fails_on_all_ranks() {
    let g = make_group(3);
    let short: Vec<Vec<u8>> = vec![b"a".to_vec(), b"b".to_vec()];
    let results = on_all(&g.comms, |c| {
        c.scatter(0, (c.rank() == 0).then_some(short.as_slice()))
    });
    for r in results {
        assert!(matches!(r, Err(CollectiveError::LengthMismatch { .. })));
    }
}

#[test]
fn bad_root_rejected() {
    let g = make_group(2);
    let results = on_all(&g.comms, |c| c.broadcast(9, b"x"));
    for r in results {
        assert!(matches!(r, Err(CollectiveError::BadRoot(9))));
    }
}

#[test]
fn allgather_returns_rank_ordered_payloads() {
    let g = make_group(4);
    let results = on_all(&g.comms, |c| {
        c.allgather(format!("r{}", c.rank()).as_bytes()).unwrap()
    });
    for r in &results {
        let expect: Vec<Vec<u8>> = (0..4).map(|i| format!("r{i}").into_bytes()).collect();
        assert_eq!(r, &expect);
    }
}

#[test]
fn allreduce_simple_sum_example() {
    let g = make_group(3);
    for variant in [AllreduceVariant::Tree, AllreduceVariant::Ring] {
        let results = on_all(&g.comms, |c| {
            c.allreduce(&[(c.rank() + 1) as f64], ReduceOp::Sum, variant)
                .unwrap()
        });
        for r in results {
            assert_eq!(r, vec![6.0]);
        }
    }
}

fn random_vectors(rng: &mut ChaCha8Rng, n: usize, len: usize, integer_valued: bool) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..len)
                .map(|_| {
                    if integer_valued {
                        rng.gen_range(-1000..1000) as f64
                    } else {
                        rng.gen_range(-1.0..1.0) * 10f64.powi(rng.gen_range(-3..4))
                    }
                })
                .collect()
        })
        .collect()
}

#[test]
fn allreduce_tree_sum_is_bitwise_fold_up_to_size_16() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for n in [2usize, 3, 5, 8, 13, 16] {
        let g = make_group(n as u32);
        for _ in 0..4 {
            let len = rng.gen_range(1..=4096);
            let vectors = random_vectors(&mut rng, n, len, false);
            let expect = fold_oracle(&vectors, ReduceOp::Sum);
            let results = on_all(&g.comms, |c| {
                c.allreduce_tree(&vectors[c.rank() as usize], ReduceOp::Sum)
                    .unwrap()
            });
            for r in &results {
                assert_eq!(r.len(), expect.len());
                for (a, b) in r.iter().zip(&expect) {
                    assert_eq!(a.to_bits(), b.to_bits(), "tree SUM must be bitwise fold");
                }
            }
        }
    }
}

#[test]
fn allreduce_ring_matches_oracle_and_traffic_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in [2usize, 3, 4, 7, 8] {
        let g = make_group(n as u32);
        for _ in 0..4 {
            let len = rng.gen_range(1..=2048);
            let vectors = random_vectors(&mut rng, n, len, false);
            let expect = fold_oracle(&vectors, ReduceOp::Sum);
            let before: Vec<u64> = g
                .comms
                .iter()
                .map(|c| c.counters().reduce_elements_sent)
                .collect();
            let results = on_all(&g.comms, |c| {
                c.allreduce_ring(&vectors[c.rank() as usize], ReduceOp::Sum)
                    .unwrap()
            });
            // Relative to each element's input magnitude; a value-relative
            // bound is unattainable under cancellation for any order.
            let scale: Vec<f64> = (0..len)
                .map(|i| vectors.iter().map(|v| v[i].abs()).sum::<f64>())
                .collect();
            for r in &results {
                for ((a, b), s) in r.iter().zip(&expect).zip(&scale) {
                    assert!(
                        (a - b).abs() / s.max(1e-300) <= 1e-12,
                        "ring SUM within 1e-12 of fold: {a} vs {b}"
                    );
                }
            }
            // All ranks hold byte-identical arrays.
            for r in &results[1..] {
                assert!(r.iter().zip(&results[0]).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
            // Per-rank traffic of the pinned chunk schedule never exceeds
            // ceil(2*(n-1)*len/n) elements, the integer-exact form of the
            // 2*(n-1)/n*len bound.
            let bound = (2 * (n - 1) * len).div_ceil(n) as u64;
            for (c, b0) in g.comms.iter().zip(before) {
                let sent = c.counters().reduce_elements_sent - b0;
                assert!(
                    sent <= bound,
                    "rank {} sent {sent} elements, bound {bound} (n={n}, len={len})",
                    c.rank()
                );
            }
        }
    }
}

#[test]
fn allreduce_min_max_bitwise_for_both_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for n in [2usize, 5, 8] {
        let g = make_group(n as u32);
        for op in [ReduceOp::Min, ReduceOp::Max] {
            let vectors = random_vectors(&mut rng, n, 513, true);
            let expect = fold_oracle(&vectors, op);
            for variant in [AllreduceVariant::Tree, AllreduceVariant::Ring] {
                let results = on_all(&g.comms, |c| {
                    c.allreduce(&vectors[c.rank() as usize], op, variant).unwrap()
                });
                for r in &results {
                    for (a, b) in r.iter().zip(&expect) {
                        assert_eq!(a.to_bits(), b.to_bits());
                    }
                }
            }
        }
    }
}

#[test]
fn allreduce_length_mismatch_fails_symmetrically() {
    let g = make_group(2);
    let results = on_all(&g.comms, |c| {
        let v = vec![1.0; if c.rank() == 0 { 4 } else { 5 }];
        c.allreduce_tree(&v, ReduceOp::Sum)
    });
    for r in results {
        assert!(matches!(r, Err(CollectiveError::LengthMismatch { .. })));
    }
}

#[test]
fn concurrent_collective_rejected() {
    let g = make_group(2);
    // Rank 1 never enters, so rank 0 stays blocked in the barrier while a
    // second collective is attempted on the same communicator.
    let c0 = &g.comms[0];
    std::thread::scope(|scope| {
        let blocked = scope.spawn(|| {
            let _ = c0.barrier();
        });
        std::thread::sleep(Duration::from_millis(100));
        match c0.allreduce_tree(&[1.0], ReduceOp::Sum) {
            Err(CollectiveError::ConcurrentCollective) => {}
            other => panic!("expected CONCURRENT_COLLECTIVE, got {other:?}"),
        }
        // Unblock the barrier so the scope can join.
        g.comms[1].barrier().unwrap();
        blocked.join().unwrap();
    });
}

#[test]
fn missing_endpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let server = server_start(&ServerConfig::new(dir.path())).unwrap();
    let sessions = attach_local_group("job", 2, server.contact()).unwrap();
    let transports: Vec<Transport> = (0..2).map(|_| Transport::bind().unwrap()).collect();
    // Rank 1 forgets to publish its endpoint.
    sessions[0]
        .put("endpoint", transports[0].endpoint().as_bytes())
        .unwrap();
    let participants: Vec<_> = (0..2).map(|r| sessions[0].peer(r)).collect();
    let infos = std::thread::scope(|scope| {
        let joins: Vec<_> = sessions
            .iter()
            .map(|s| {
                let participants = participants.clone();
                scope.spawn(move || {
                    s.fence().unwrap();
                    s.connect(&ConnectRequest::new(participants)).unwrap()
                })
            })
            .collect();
        joins.into_iter().map(|j| j.join().unwrap()).collect::<Vec<_>>()
    });
    match communicator_from_group(&sessions[0], &transports[0], &infos[0]) {
        Err(CollectiveError::MissingEndpoint(_)) => {}
        other => panic!("expected MISSING_ENDPOINT, got {:?}", other.err()),
    }
}

#[test]
fn dead_peer_unblocks_recv_within_detector_bound() {
    let g = make_group(2);
    let start = Instant::now();
    let results = on_all(&g.comms, |c| {
        if c.rank() == 0 {
            c.recv(1, 42).map(|_| ())
        } else {
            std::thread::sleep(Duration::from_millis(150));
            // Crash rank 1: abrupt connection drop, no finalize.
            g.sessions[1].abandon();
            Ok(())
        }
    });
    match &results[0] {
        Err(CollectiveError::PeerUnreachable { rank: 1, .. }) => {}
        other => panic!("expected PEER_UNREACHABLE, got {other:?}"),
    }
    assert!(start.elapsed() < Duration::from_secs(8), "failure detection too slow");
}

#[test]
fn disconnect_blocks_until_inflight_collective_completes() {
    let g = make_group(2);
    let barrier_done = Arc::new(AtomicBool::new(false));
    let disconnect_order = Arc::new(AtomicUsize::new(0));

    let group_ns = Namespace::from_qualified(g.comms[0].group()).unwrap();
    std::thread::scope(|scope| {
        // Rank 0 sits in a barrier that completes only when rank 1 joins.
        let bd = Arc::clone(&barrier_done);
        let c0 = &g.comms[0];
        let s0 = &g.sessions[0];
        let ns0 = group_ns.clone();
        let t0 = scope.spawn(move || {
            c0.barrier().unwrap();
            bd.store(true, Ordering::SeqCst);
            s0.disconnect(&ns0).unwrap();
        });

        // Rank 1 calls disconnect first; it must not complete while the
        // barrier is still in flight.
        let bd = Arc::clone(&barrier_done);
        let order = Arc::clone(&disconnect_order);
        let s1 = &g.sessions[1];
        let ns1 = group_ns.clone();
        let t1 = scope.spawn(move || {
            s1.disconnect(&ns1).unwrap();
            assert!(
                bd.load(Ordering::SeqCst),
                "disconnect returned while a group collective was in flight"
            );
            order.fetch_add(1, Ordering::SeqCst);
        });

        std::thread::sleep(Duration::from_millis(200));
        assert_eq!(disconnect_order.load(Ordering::SeqCst), 0);
        // Rank 1 now enters the barrier, releasing everything.
        g.comms[1].barrier().unwrap();
        t0.join().unwrap();
        t1.join().unwrap();
    });
}
