use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use tempfile::TempDir;

use sduscb::channel::{draw_inter_large_scale, steer, synthesize, with_inter_phases, ChannelGenConfig};
use sduscb::ckm::Ckm;
use sduscb::scenario::{CsiSource, ScenarioConfig};
use sduscb::simulator::{build_ckms, calibrate_noise, load_ckms, ChannelPerturbation, Simulator};

fn small(seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig {
        seed,
        epochs: 6,
        users_per_cell: 4,
        ..ScenarioConfig::default()
    };
    cfg.ckm.cell_size = 5.0;
    cfg.ckm.margin = 5.0;
    cfg
}

#[test]
fn same_seed_gives_identical_traces() {
    let mut a = Simulator::new(small(3)).unwrap();
    let mut b = Simulator::new(small(3)).unwrap();
    a.run().unwrap();
    b.run().unwrap();
    assert_eq!(a.traces(), b.traces());
    for (ta, tb) in a.traces().iter().zip(b.traces()) {
        assert_eq!(ta.beams, tb.beams);
    }
}

#[test]
fn beams_never_depend_on_future_channels() {
    let from = 4;
    let mut cfg = small(11);
    cfg.ckm.source = CsiSource::Oracle;
    let mut base = Simulator::new(cfg.clone()).unwrap();
    let mut perturbed = Simulator::new(cfg).unwrap();
    perturbed.set_perturbation(Some(ChannelPerturbation { from_epoch: from, salt: 99 }));
    base.run().unwrap();
    perturbed.run().unwrap();
    let (ta, tb) = (base.traces(), perturbed.traces());
    for e in 0..from - 1 {
        assert_eq!(ta[e].beams, tb[e].beams, "beams designed in epoch {}", e + 1);
        assert_eq!(ta[e].schedule, tb[e].schedule);
    }
    // Epoch `from` transmits beams designed before the change on new channels.
    assert_eq!(ta[from - 1].served, tb[from - 1].served);
    assert_ne!(ta[from - 1].users, tb[from - 1].users);
    assert_ne!(ta[from - 1].beams, tb[from - 1].beams);
}

#[test]
fn map_files_round_trip_and_drive_the_same_run() {
    let cfg = small(5);
    let sigma_c2 = calibrate_noise(&cfg).unwrap();
    let built = build_ckms(&cfg, sigma_c2).unwrap();
    let tmp = TempDir::new().unwrap();
    for (m, entry) in built.iter().enumerate() {
        let (ckm, _) = entry.as_ref().unwrap();
        let path = tmp.path().join(sduscb::simulator::ckm_file_name(m));
        ckm.save(&path).unwrap();
        assert_eq!(&Ckm::load(&path).unwrap(), ckm);
    }
    let loaded = load_ckms(&cfg, tmp.path()).unwrap();
    assert!(loaded.iter().all(Option::is_some));

    let mut from_disk = Simulator::with_ckms(cfg.clone(), loaded, vec![None; built.len()]).unwrap();
    let in_memory: Vec<Option<Arc<Ckm>>> = built.into_iter().map(|e| e.map(|(c, _)| Arc::new(c))).collect();
    let mut fresh = Simulator::with_ckms(cfg, in_memory, vec![None; 3]).unwrap();
    from_disk.run().unwrap();
    fresh.run().unwrap();
    assert_eq!(from_disk.traces(), fresh.traces());
}

#[test]
fn map_for_wrong_array_size_is_rejected() {
    let cfg = small(5);
    let sigma_c2 = calibrate_noise(&cfg).unwrap();
    let built = build_ckms(&cfg, sigma_c2).unwrap();
    let tmp = TempDir::new().unwrap();
    for (m, entry) in built.iter().enumerate() {
        entry.as_ref().unwrap().0.save(&tmp.path().join(sduscb::simulator::ckm_file_name(m))).unwrap();
    }
    let other = ScenarioConfig {
        n_tx: cfg.n_tx * 2,
        ..cfg
    };
    assert!(load_ckms(&other, tmp.path()).is_err());
}

/// Expected `||h||^2` over the phase draw for fixed large-scale paths:
/// `sum_i g_i + sum_{i != j} sqrt(g_i g_j) exp(-s^2) Re(a_j^H a_i)`.
fn expected_norm2(paths: &[sduscb::channel::PathParams], n_tx: usize, phase_std: f64) -> f64 {
    let coherence = (-phase_std * phase_std).exp();
    let mut total = 0.0;
    for (i, p) in paths.iter().enumerate() {
        for (j, q) in paths.iter().enumerate() {
            let inner: Complex64 = steer(q.aod, n_tx).dotc(&steer(p.aod, n_tx));
            let weight = if i == j { 1.0 } else { coherence };
            total += (p.gain * q.gain).sqrt() * weight * inner.re;
        }
    }
    total
}

#[test]
fn inter_cell_channel_power_matches_phase_average() {
    let cfg = ChannelGenConfig::default();
    let n_tx = 16;
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    for distance in [30.0, 80.0] {
        let paths = draw_inter_large_scale(distance, 3, &cfg, &mut rng).unwrap();
        let want = expected_norm2(&paths, n_tx, cfg.inter_phase_std);
        let draws = 40_000;
        let got = (0..draws)
            .map(|_| synthesize(&with_inter_phases(&paths, &cfg, &mut rng), n_tx).norm_squared())
            .sum::<f64>()
            / draws as f64;
        assert!((got - want).abs() <= 0.02 * want, "d {distance}: {got} vs {want}");
    }
}

#[test]
fn oracle_csi_with_exact_sensing_keeps_locations_exact() {
    let mut cfg = small(8);
    cfg.ckm.source = CsiSource::Oracle;
    cfg.sensing.noisy = false;
    let mut sim = Simulator::new(cfg).unwrap();
    sim.run().unwrap();
    for t in sim.traces() {
        for u in &t.users {
            if let Some(err) = u.location_error {
                assert!(err < 1e-6, "epoch {} user {}: {err}", t.epoch, u.user);
            }
        }
    }
}
