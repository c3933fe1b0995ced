//! Proportional-fair zero-forcing greedy (PFZFG) user scheduling.
//!
//! Each cell schedules from its own intra-cell CSI. Candidate sets are scored
//! by the PF-weighted sum rate under equal-power zero-forcing; users that
//! have waited `t_s - 1` epochs are forced into the set.

use serde::{Deserialize, Serialize};

use crate::linalg::{gain, hermitian_condition_ratio, hpd_inverse, hstack, CVector};
use crate::{Error, Result};

/// Initial average rate (bits/s/Hz) before any user has been served.
pub const INITIAL_AVG_RATE: f64 = 1e-3;

/// Gram matrices with a smaller eigenvalue ratio are treated as rank deficient.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfState {
    /// Accumulative average rate per user.
    pub avg_rate: Vec<f64>,
    /// Last epoch in which each user was scheduled (0 = never).
    pub last_scheduled: Vec<usize>,
    /// Starvation horizon in epochs.
    pub t_s: usize,
}

impl PfState {
    pub fn new(n_users: usize, t_s: usize) -> Result<Self> {
        if t_s == 0 {
            return Err(Error::Config("starvation horizon t_s must be at least 1".into()));
        }
        Ok(Self {
            avg_rate: vec![INITIAL_AVG_RATE; n_users],
            last_scheduled: vec![0; n_users],
            t_s,
        })
    }

    pub fn n_users(&self) -> usize {
        self.avg_rate.len()
    }

    /// Users that have gone unscheduled for the past `t_s - 1` epochs as of `epoch`.
    pub fn starved(&self, epoch: usize) -> Vec<usize> {
        (0..self.n_users())
            .filter(|&u| epoch.saturating_sub(self.last_scheduled[u]) >= self.t_s)
            .collect()
    }

    /// Starved users ordered by how long they have waited (longest first, then id).
    pub fn starved_by_wait(&self, epoch: usize) -> Vec<usize> {
        let mut s = self.starved(epoch);
        s.sort_by_key(|&u| (self.last_scheduled[u], u));
        s
    }

    pub fn mark_scheduled(&mut self, epoch: usize, users: &[usize]) {
        for &u in users {
            self.last_scheduled[u] = epoch;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSet {
    /// Scheduled user ids in the order they entered the set.
    pub users: Vec<usize>,
    pub cap: usize,
    /// PF metric of the final set.
    pub metric: f64,
}

impl ScheduleSet {
    pub fn contains(&self, u: usize) -> bool {
        self.users.contains(&u)
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// 0/1 scheduling indicator over `n_users` users.
    pub fn indicator(&self, n_users: usize) -> Vec<u8> {
        let mut q = vec![0; n_users];
        for &u in &self.users {
            q[u] = 1;
        }
        q
    }
}

/// Equal-power zero-forcing beamformers for the channels in `h`.
///
/// Returns `None` when the channels are (numerically) linearly dependent or
/// outnumber the antennas.
pub fn zf_equal_power(h: &[&CVector], p_total: f64) -> Option<Vec<CVector>> {
    if h.is_empty() {
        return Some(Vec::new());
    }
    let n_tx = h[0].len();
    if h.len() > n_tx {
        return None;
    }
    let hm = hstack(h);
    let gram = hm.adjoint() * &hm;
    if hermitian_condition_ratio(&gram) < RANK_TOL {
        return None;
    }
    let v = hm * hpd_inverse(&gram)?;
    let per_user = (p_total / h.len() as f64).sqrt();
    Some(
        v.column_iter()
            .map(|c| {
                let c = c.into_owned();
                let n = c.norm();
                c.unscale(n).scale(per_user)
            })
            .collect(),
    )
}

/// PF-weighted sum rate of `set` under equal-power ZF.
///
/// Average rates are floored at [`INITIAL_AVG_RATE`] so users that have not
/// been served yet carry a large but finite weight. `-inf` for
/// rank-deficient sets, `0` for the empty set.
pub fn pf_metric(set: &[usize], channels: &[CVector], avg_rate: &[f64], p_total: f64, noise_var: f64) -> f64 {
    let hs: Vec<&CVector> = set.iter().map(|&u| &channels[u]).collect();
    let Some(v) = zf_equal_power(&hs, p_total) else {
        return f64::NEG_INFINITY;
    };
    set.iter()
        .enumerate()
        .map(|(i, &u)| {
            let h = &channels[u];
            let signal = gain(h, &v[i]);
            let interference: f64 = v
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, vj)| gain(h, vj))
                .sum();
            (1.0 + signal / (interference + noise_var)).log2() / avg_rate[u].max(INITIAL_AVG_RATE)
        })
        .sum()
}

/// Inputs shared by every PFZFG call in one cell.
#[derive(Debug, Clone, Copy)]
pub struct PfzfgParams {
    pub cap: usize,
    pub p_total: f64,
    pub noise_var: f64,
}

/// Greedy extension of `forced` (which is kept unconditionally).
pub fn greedy_from(forced: &[usize], channels: &[CVector], pf: &PfState, params: &PfzfgParams) -> ScheduleSet {
    let n_tx = channels.first().map_or(0, |h| h.len());
    let limit = params.cap.min(n_tx);
    let metric = |s: &[usize]| pf_metric(s, channels, &pf.avg_rate, params.p_total, params.noise_var);
    let mut set: Vec<usize> = forced.to_vec();
    let mut current = metric(&set);
    while set.len() < limit {
        let mut best: Option<(usize, f64)> = None;
        for u in 0..channels.len() {
            if set.contains(&u) {
                continue;
            }
            set.push(u);
            let r = metric(&set);
            set.pop();
            if r.is_finite() && best.is_none_or(|(_, b)| r > b) {
                best = Some((u, r));
            }
        }
        match best {
            Some((u, r)) if r >= current || !current.is_finite() => {
                set.push(u);
                current = r;
            }
            _ => break,
        }
    }
    ScheduleSet {
        users: set,
        cap: params.cap,
        metric: current,
    }
}

/// PFZFG scheduling for one cell at `epoch`.
pub fn pfzfg(channels: &[CVector], pf: &PfState, epoch: usize, params: &PfzfgParams) -> Result<ScheduleSet> {
    if channels.len() != pf.n_users() {
        return Err(Error::Dimension {
            expected: pf.n_users(),
            got: channels.len(),
        });
    }
    let n_tx = channels.first().map_or(0, |h| h.len());
    let limit = params.cap.min(n_tx);
    let starved = pf.starved(epoch);
    if starved.len() > limit {
        return Err(Error::StarvationOverflow {
            starved: starved.len(),
            limit,
        });
    }
    Ok(greedy_from(&starved, channels, pf, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{gen_rayleigh, steer};
    use crate::linalg::ONE;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn params(cap: usize) -> PfzfgParams {
        PfzfgParams {
            cap,
            p_total: 1.0,
            noise_var: 1e-2,
        }
    }

    #[test]
    fn single_user_zf_is_matched_filter() {
        let h = gen_rayleigh(4, &mut stream(1, &[]));
        let v = zf_equal_power(&[&h], 2.0).unwrap();
        assert!((v[0].norm_squared() - 2.0).abs() < 1e-12);
        assert!((crate::linalg::cosine_similarity(&v[0], &h) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zf_nulls_cross_terms() {
        let mut rng = stream(2, &[]);
        let hs: Vec<CVector> = (0..3).map(|_| gen_rayleigh(6, &mut rng)).collect();
        let refs: Vec<&CVector> = hs.iter().collect();
        let v = zf_equal_power(&refs, 1.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(gain(&hs[i], &v[j]) <= 1e-10 * gain(&hs[i], &v[i]));
                }
            }
        }
    }

    #[test]
    fn duplicate_channels_are_rank_deficient() {
        let h = gen_rayleigh(4, &mut stream(3, &[]));
        assert!(zf_equal_power(&[&h, &h], 1.0).is_none());
        let chans = vec![h.clone(), h.clone(), h];
        let pf = PfState::new(3, 5).unwrap();
        assert_eq!(pf_metric(&[0, 1], &chans, &pf.avg_rate, 1.0, 1e-2), f64::NEG_INFINITY);
        let s = pfzfg(&chans, &pf, 1, &params(3)).unwrap();
        assert_eq!(s.users, vec![0]);
    }

    #[test]
    fn empty_set_metric_is_zero() {
        assert_eq!(pf_metric(&[], &[], &[], 1.0, 1.0), 0.0);
    }

    #[test]
    fn single_user_metric_is_weighted_log_snr() {
        let h = steer(0.1, 4).scale(10.0);
        let snr: f64 = 100.0 / 1e-2;
        let m = pf_metric(&[0], &[h], &[0.5], 1.0, 1e-2);
        assert!((m - (1.0 + snr).log2() / 0.5).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_users_all_scheduled() {
        let chans: Vec<CVector> = (0..3)
            .map(|k| {
                let mut h = CVector::zeros(4);
                h[k] = ONE;
                h
            })
            .collect();
        let pf = PfState::new(3, 5).unwrap();
        let s = pfzfg(&chans, &pf, 1, &params(3)).unwrap();
        let mut users = s.users.clone();
        users.sort();
        assert_eq!(users, vec![0, 1, 2]);
    }

    #[test]
    fn starved_user_is_forced() {
        let mut rng = stream(4, &[]);
        let mut chans: Vec<CVector> = (0..4).map(|_| gen_rayleigh(4, &mut rng)).collect();
        chans[2] = chans[2].scale(1e-4);
        let mut pf = PfState::new(4, 3).unwrap();
        pf.mark_scheduled(2, &[0, 1, 3]);
        assert_eq!(pf.starved(3), vec![2]);
        let s = pfzfg(&chans, &pf, 3, &params(2)).unwrap();
        assert!(s.contains(2));
        assert_eq!(s.users[0], 2);
    }

    #[test]
    fn unserved_users_remain_schedulable() {
        let mut rng = stream(6, &[]);
        let chans: Vec<CVector> = (0..4).map(|_| gen_rayleigh(4, &mut rng)).collect();
        let mut pf = PfState::new(4, 10).unwrap();
        pf.avg_rate = vec![2.0, 0.0, 2.0, 2.0];
        let m = pf_metric(&[1], &chans, &pf.avg_rate, 1.0, 1e-2);
        assert!(m.is_finite() && m > 0.0);
        let s = pfzfg(&chans, &pf, 1, &params(1)).unwrap();
        assert_eq!(s.users, vec![1]);
    }

    #[test]
    fn starvation_overflow_is_reported() {
        let mut rng = stream(5, &[]);
        let chans: Vec<CVector> = (0..4).map(|_| gen_rayleigh(4, &mut rng)).collect();
        let pf = PfState::new(4, 1).unwrap();
        assert!(matches!(
            pfzfg(&chans, &pf, 1, &params(2)),
            Err(Error::StarvationOverflow { starved: 4, limit: 2 })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn greedy_invariants(seed in 0u64..10_000, n_users in 1usize..7, cap in 1usize..6) {
            let mut rng = stream(seed, &[]);
            let chans: Vec<CVector> = (0..n_users).map(|_| gen_rayleigh(4, &mut rng)).collect();
            let mut pf = PfState::new(n_users, 4).unwrap();
            for (u, r) in pf.avg_rate.iter_mut().enumerate() {
                *r = 0.5 + 0.3 * u as f64;
            }
            let p = params(cap);
            let s = pfzfg(&chans, &pf, 1, &p).unwrap();
            prop_assert!(s.len() <= cap.min(4));
            prop_assert!(!s.is_empty());
            let m = |set: &[usize]| pf_metric(set, &chans, &pf.avg_rate, p.p_total, p.noise_var);
            prop_assert!((m(&s.users) - s.metric).abs() <= 1e-12 * s.metric.abs().max(1.0));
            let without_last = &s.users[..s.len() - 1];
            prop_assert!(s.metric >= m(without_last));
            for u in 0..n_users {
                prop_assert!(s.metric >= m(&[u]) - 1e-12);
            }
        }
    }
}
