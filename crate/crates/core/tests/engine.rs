use sdm_core::algorithms::{
    average, consensus_error, initial_states, neighbor_copies_consistent, step, AlgorithmConfig, Problem, Variant,
};
use sdm_core::graph::{build_consensus_matrix, Topology};
use sdm_core::objectives::{quadratic_minimizer, synth_quadratic, Dataset, Objective, PartitionScheme};
use sdm_core::privacy::{alternative_design_epsilon, sdm_dsgd_epsilon, Accounting, AlphaRule};
use sdm_core::simulator::{
    count_transmission, records_within, run, sweep, write_sweep_csv, CommCounting, DatasetSpec, PrivacySpec, RunConfig, RunStatus,
    Simulation, TopologySpec,
};
use sdm_core::trace::{read_trace, TraceError};

fn config(variant: Variant, iterations: u64) -> RunConfig {
    let mut alg = AlgorithmConfig::new(variant, 0.05);
    if variant != Variant::Dsgd {
        alg.transmit_prob = 0.5;
    }
    if matches!(variant, Variant::SdmDsgd | Variant::AltDesign) {
        alg.theta = 0.4;
    }
    alg.sigma2 = 1.0;
    alg.batch_rate = 0.25;
    alg.clip = Some(sdm_core::objectives::ClipConfig::new(2.0).unwrap());
    RunConfig {
        schema_version: 1,
        seed: 21,
        iterations,
        metric_stride: 1,
        comm_counting: CommCounting::PerEdge,
        divergence_factor: 1e6,
        topology: TopologySpec::ErdosRenyi { n: 8, edge_prob: 0.4 },
        dataset: DatasetSpec::Classification {
            classes: 3,
            features: 5,
            samples_per_node: 16,
        },
        partition: PartitionScheme::Random,
        objective: Objective::Logistic { classes: 3 },
        algorithm: alg,
        privacy: Some(PrivacySpec {
            delta: 1e-5,
            epsilon_target: 1.0,
            alpha_rule: AlphaRule::PlusOne,
            accounting: Accounting::Expected,
            sensitivity_g: None,
        }),
        trace: None,
    }
}

fn csv_bytes(cfg: RunConfig) -> Vec<u8> {
    let mut out = Vec::new();
    run(cfg).unwrap().write_csv(&mut out).unwrap();
    out
}

#[test]
fn neighbor_copies_track_owners_exactly() {
    for variant in [Variant::Dsgd, Variant::DcDsgd, Variant::SdmDsgd, Variant::AltDesign] {
        let sim = Simulation::new(config(variant, 30)).unwrap();
        let mut failures = 0;
        sim.run_with(|s, _| {
            if !neighbor_copies_consistent(&s.states) {
                failures += 1;
            }
        })
        .unwrap();
        assert_eq!(failures, 0, "{variant:?}");
    }
}

#[test]
fn average_follows_masked_gradient_step() {
    for variant in [Variant::SdmDsgd, Variant::DcDsgd] {
        let sim = Simulation::new(config(variant, 40)).unwrap();
        let (theta, gamma) = (sim.algorithm.theta, sim.algorithm.gamma);
        let n = sim.topology.node_count() as f64;
        let mut prev = average(&sim.states);
        let mut worst: f64 = 0.0;
        sim.run_with(|s, out| {
            let now = average(&s.states);
            for k in 0..now.len() {
                // x_bar' - x_bar = -(theta gamma / n) sum_i (g_i + eta_i - e_i / (theta gamma)),
                // e_i = S(d_i) - d_i
                let mut acc = 0.0;
                for r in &out.nodes {
                    let sent = r.message.to_dense();
                    let e = sent[k] - r.differential[k];
                    acc += r.grad[k] + r.noise[k] - e / (theta * gamma);
                }
                let predicted = prev[k] - theta * gamma / n * acc;
                worst = worst.max((predicted - now[k]).abs());
            }
            prev = now;
        })
        .unwrap();
        assert!(worst < 1e-12, "{variant:?}: {worst:e}");
    }
}

#[test]
fn alt_design_noise_lives_on_active_set() {
    let sim = Simulation::new(config(Variant::AltDesign, 25)).unwrap();
    let (theta, gamma) = (sim.algorithm.theta, sim.algorithm.gamma);
    sim.run_with(|_, out| {
        for r in &out.nodes {
            let active = r.message.active_indices();
            for (k, &eta) in r.noise.iter().enumerate() {
                if !active.contains(&k) {
                    assert_eq!(eta, 0.0);
                }
            }
            for (k, v) in r.message.iter() {
                let expected = r.differential[k] / 0.5 + theta * gamma * r.noise[k];
                assert!((v - expected).abs() < 1e-15);
            }
        }
    })
    .unwrap();
}

#[test]
fn alt_design_with_full_transmission_adds_noise_everywhere() {
    let mut cfg = config(Variant::AltDesign, 5);
    cfg.algorithm.transmit_prob = 1.0;
    let sim = Simulation::new(cfg).unwrap();
    let (theta, gamma) = (sim.algorithm.theta, sim.algorithm.gamma);
    sim.run_with(|_, out| {
        for r in &out.nodes {
            assert_eq!(r.message.active_count(), r.differential.len());
            for (k, v) in r.message.iter() {
                assert_eq!(v, r.differential[k] + theta * gamma * r.noise[k]);
            }
        }
    })
    .unwrap();
}

#[test]
fn noise_free_orderings_coincide() {
    let mut a = config(Variant::SdmDsgd, 30);
    let mut b = config(Variant::AltDesign, 30);
    a.algorithm.sigma2 = 0.0;
    b.algorithm.sigma2 = 0.0;
    a.privacy = None;
    b.privacy = None;
    let ma = run(a).unwrap();
    let mb = run(b).unwrap();
    assert_eq!(ma.records, mb.records);
    assert_eq!(ma.final_average, mb.final_average);
}

#[test]
fn deterministic_quadratic_convergence() {
    let topo = Topology::ring(6).unwrap();
    let w = build_consensus_matrix(&topo);
    let ds = synth_quadratic(6, 3, 4);
    let problem = Problem {
        objective: Objective::Quadratic,
        dataset: &ds,
    };
    for variant in [Variant::Dsgd, Variant::SdmDsgd] {
        let cfg = AlgorithmConfig::new(variant, 0.5);
        let mut states = initial_states(&w, 3);
        let target = quadratic_minimizer(&ds);
        let mut reached = None;
        for t in 0..10_000 {
            step(&mut states, &w, &cfg, &problem, 1, t).unwrap();
            let xbar = average(&states);
            // grad f(x_bar) = n (x_bar - c_bar)
            let g: f64 = xbar.iter().zip(&target).map(|(a, b)| (6.0 * (a - b)).powi(2)).sum();
            if g < 1e-8 {
                reached = Some(t);
                break;
            }
        }
        assert!(reached.is_some(), "{variant:?}");
    }
}

#[test]
fn two_node_fixed_point() {
    // x_bar -> c_bar exactly; the disagreement settles at
    // delta = gamma (c_1 - c_2) / (2/3 + gamma)
    for gamma in [0.1, 0.01] {
        let topo = Topology::path(2).unwrap();
        let w = build_consensus_matrix(&topo);
        let ds = synth_quadratic(2, 3, 9);
        let problem = Problem {
            objective: Objective::Quadratic,
            dataset: &ds,
        };
        let cfg = AlgorithmConfig::new(Variant::SdmDsgd, gamma);
        let mut states = initial_states(&w, 3);
        for t in 0..20_000 {
            step(&mut states, &w, &cfg, &problem, 1, t).unwrap();
        }
        let c_bar = quadratic_minimizer(&ds);
        let xbar = average(&states);
        for (a, b) in xbar.iter().zip(&c_bar) {
            assert!((a - b).abs() < 1e-10);
        }
        let (c1, c2) = (ds.features(0), ds.features(1));
        let expected: f64 = (0..3)
            .map(|k| {
                let delta = gamma * (c1[k] - c2[k]) / (2.0 / 3.0 + gamma);
                delta * delta / 2.0
            })
            .sum();
        assert!((consensus_error(&states) - expected).abs() < 1e-10);
    }
}

#[test]
fn identical_across_thread_counts() {
    let cfg = config(Variant::SdmDsgd, 40);
    let serial = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| csv_bytes(cfg.clone()));
    let parallel = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(|| csv_bytes(cfg.clone()));
    assert_eq!(serial, parallel);
    assert_eq!(serial, csv_bytes(cfg));
}

#[test]
fn seed_changes_trajectory() {
    let a = config(Variant::SdmDsgd, 10);
    let mut b = a.clone();
    b.seed += 1;
    assert_ne!(csv_bytes(a), csv_bytes(b));
}

#[test]
fn epsilon_column_matches_closed_form() {
    for variant in [Variant::SdmDsgd, Variant::AltDesign, Variant::Dsgd] {
        let sim = Simulation::new(config(variant, 25)).unwrap();
        let params = sim.privacy.unwrap();
        let m = sim.run().unwrap();
        for r in &m.records {
            let expected = match variant {
                Variant::AltDesign => alternative_design_epsilon(&params, r.iter).unwrap().epsilon,
                _ => sdm_dsgd_epsilon(&params, r.iter).unwrap().epsilon,
            };
            assert_eq!(r.cum_epsilon, Some(expected), "{variant:?} at {}", r.iter);
        }
    }
}

#[test]
fn counters_are_monotone() {
    let m = run(config(Variant::SdmDsgd, 50)).unwrap();
    for pair in m.records.windows(2) {
        assert!(pair[1].cum_nnz >= pair[0].cum_nnz);
        assert!(pair[1].cum_epsilon.unwrap() >= pair[0].cum_epsilon.unwrap());
    }
}

#[test]
fn sub_floor_noise_is_flagged() {
    let mut cfg = config(Variant::SdmDsgd, 5);
    cfg.algorithm.sigma2 = 0.1;
    let m = run(cfg).unwrap();
    assert!(m.warnings.iter().any(|w| w.contains("below the floor")));
    assert_eq!(m.records.len(), 5);
}

#[test]
fn diverged_run_writes_well_formed_csv() {
    let mut cfg = config(Variant::DcDsgd, 500);
    cfg.algorithm.transmit_prob = 0.1;
    cfg.algorithm.gamma = 0.5;
    cfg.algorithm.clip = None;
    cfg.privacy = None;
    let m = run(cfg).unwrap();
    assert_eq!(m.status, RunStatus::Diverged);
    let mut out = Vec::new();
    m.write_csv(&mut out).unwrap();
    let mut reader = csv::Reader::from_reader(&out[..]);
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        ["iter", "loss", "grad_norm_sq", "consensus_err", "cum_nnz", "cum_epsilon", "status"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len() as u64, m.iterations_run);
    assert_eq!(&rows.last().unwrap()[6], "diverged");
    assert!(rows[..rows.len() - 1].iter().all(|r| &r[6] == "ok"));
}

#[test]
fn sweep_of_identical_configs_gives_identical_rows() {
    let cfg = config(Variant::SdmDsgd, 15);
    let results = sweep(&[cfg.clone(), cfg]);
    let a = results[0].as_ref().unwrap();
    let b = results[1].as_ref().unwrap();
    assert_eq!(a.records, b.records);
    let mut out = Vec::new();
    write_sweep_csv(&mut out, [("a", a), ("b", b)]).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("config_id,iter,loss"));
    assert_eq!(lines.len(), 31);
    for i in 1..=15 {
        assert_eq!(lines[i].strip_prefix("a,"), lines[i + 15].strip_prefix("b,"));
    }
}

#[test]
fn sweep_keeps_going_after_a_failure() {
    let mut bad = config(Variant::SdmDsgd, 5);
    bad.metric_stride = 0;
    let results = sweep(&[bad, config(Variant::SdmDsgd, 5)]);
    assert!(results[0].is_err());
    assert!(results[1].is_ok());
}

#[test]
fn sparse_runs_fit_more_rows_in_a_transmission_budget() {
    let mut dense = config(Variant::Dsgd, 40);
    dense.dataset = DatasetSpec::Quadratic { features: 10 };
    dense.objective = Objective::Quadratic;
    dense.privacy = None;
    let mut sparse = dense.clone();
    sparse.algorithm.variant = Variant::SdmDsgd;
    sparse.algorithm.transmit_prob = 0.25;
    sparse.algorithm.theta = 0.4;
    sparse.iterations = 200;
    let d = run(dense).unwrap();
    let s = run(sparse).unwrap();
    let budget = d.last().unwrap().cum_nnz;
    assert!(records_within(&s, budget) >= records_within(&d, budget));
}

#[test]
fn trace_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let mut cfg = config(Variant::SdmDsgd, 6);
    cfg.trace = Some(path.clone());
    let sim = Simulation::new(cfg).unwrap();
    let nodes = sim.topology.node_count();
    let mut rounds = Vec::new();
    sim.run_with(|_, out| rounds.push(out.clone())).unwrap();
    let (header, records) = read_trace(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    assert_eq!(header.version, 1);
    assert_eq!(header.nodes, nodes);
    assert_eq!(records.len(), 6 * nodes);
    for rec in &records {
        let r = &rounds[rec.iter as usize].nodes[rec.node];
        assert_eq!(rec.batch, r.batch);
        assert_eq!(rec.noise, r.noise);
        assert_eq!(rec.differential, r.differential);
        assert_eq!(rec.active, r.message.active_indices());
        assert_eq!(rec.values, r.message.values());
    }

    let text = std::fs::read_to_string(&path).unwrap().replacen("\"version\":1", "\"version\":9", 1);
    assert!(matches!(read_trace(text.as_bytes()), Err(TraceError::Version { .. })));
    assert!(matches!(read_trace(&b""[..]), Err(TraceError::Empty)));
}

#[test]
fn full_transmission_broadcast_count() {
    let mut cfg = config(Variant::SdmDsgd, 10);
    cfg.algorithm.transmit_prob = 1.0;
    cfg.comm_counting = CommCounting::PerBroadcast;
    let sim = Simulation::new(cfg).unwrap();
    let (n, d) = (sim.topology.node_count() as u64, sim.dim() as u64);
    let m = sim.run().unwrap();
    // sigma2 > 0 makes every differential coordinate non-zero
    for r in &m.records {
        assert_eq!(r.cum_nnz, r.iter * n * d);
    }
}

#[test]
fn converged_nodes_send_nothing() {
    let topo = Topology::complete(3).unwrap();
    let w = build_consensus_matrix(&topo);
    let c = [0.5, -1.25];
    let ds = Dataset::new(2, c.repeat(3), vec![0; 3])
        .unwrap()
        .partitioned(3, PartitionScheme::Contiguous, 0)
        .unwrap();
    let problem = Problem {
        objective: Objective::Quadratic,
        dataset: &ds,
    };
    let mut cfg = AlgorithmConfig::new(Variant::SdmDsgd, 0.1);
    cfg.transmit_prob = 0.5;
    cfg.theta = 0.5;
    let mut states = initial_states(&w, 2);
    for s in &mut states {
        s.x = c.to_vec();
        s.neighbor_copies.values_mut().for_each(|v| *v = c.to_vec());
    }
    let out = step(&mut states, &w, &cfg, &problem, 0, 0).unwrap();
    let msgs: Vec<_> = out.transmitted().cloned().collect();
    assert_eq!(count_transmission(&msgs, &topo, CommCounting::PerEdge), 0);
    assert_eq!(count_transmission(&msgs, &topo, CommCounting::PerBroadcast), 0);
}
