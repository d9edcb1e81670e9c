//! Epsilon-greedy display simulation against the ground-truth click oracle.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, stream};
use crate::world::{sample_clicks, World};

pub const DEFAULT_EPSILON: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub creative_id: usize,
    pub latent: Vec<f64>,
    pub score: f64,
}

/// Candidates per (item, group) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServingPolicy {
    pub epsilon: f64,
    pub cells: BTreeMap<(usize, usize), Vec<Candidate>>,
}

impl ServingPolicy {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Config(format!("epsilon = {epsilon} outside [0, 1]")));
        }
        Ok(Self { epsilon, cells: BTreeMap::new() })
    }

    /// Every cell shows the item's original image.
    pub fn baseline(world: &World) -> Self {
        let mut p = Self { epsilon: 0.0, cells: BTreeMap::new() };
        for item in &world.items {
            for g in &world.user_groups {
                p.cells.insert(
                    (item.id, g.id),
                    vec![Candidate { creative_id: 0, latent: item.base_latent.data().to_vec(), score: 0.0 }],
                );
            }
        }
        p
    }

    pub fn insert(&mut self, item: usize, group: usize, candidates: Vec<Candidate>) -> Result<()> {
        if candidates.is_empty() {
            return Err(Error::Contract(format!("cell ({item}, {group}) has no candidates")));
        }
        if candidates.iter().any(|c| !c.score.is_finite()) {
            return Err(Error::NonFinite("candidate score"));
        }
        self.cells.insert((item, group), candidates);
        Ok(())
    }
}

/// Index of the displayed candidate: the best score (ties to the lowest id)
/// with probability `1 - ε`, otherwise uniform.
pub fn pick<R: Rng + ?Sized>(candidates: &[Candidate], epsilon: f64, rng: &mut R) -> usize {
    assert!(!candidates.is_empty(), "pick needs candidates");
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return rng.random_range(0..candidates.len());
    }
    (0..candidates.len())
        .max_by(|&a, &b| {
            candidates[a]
                .score
                .total_cmp(&candidates[b].score)
                .then(candidates[b].creative_id.cmp(&candidates[a].creative_id))
        })
        .expect("non-empty")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub item_id: usize,
    pub group_id: usize,
    pub impressions: u64,
    pub clicks: u64,
    /// Expected CTR of the creatives actually shown.
    pub achieved_ctr: f64,
    pub revenue_proxy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub cells: Vec<CellReport>,
}

impl TrafficReport {
    pub fn impressions(&self) -> u64 {
        self.cells.iter().map(|c| c.impressions).sum()
    }

    pub fn clicks(&self) -> u64 {
        self.cells.iter().map(|c| c.clicks).sum()
    }

    pub fn ctr(&self) -> f64 {
        self.clicks() as f64 / self.impressions().max(1) as f64
    }

    /// Impression-weighted expected CTR.
    pub fn oracle_ctr(&self) -> f64 {
        let s: f64 = self.cells.iter().map(|c| c.achieved_ctr * c.impressions as f64).sum();
        s / self.impressions().max(1) as f64
    }

    pub fn revenue(&self) -> f64 {
        self.cells.iter().map(|c| c.revenue_proxy).sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        for c in &self.cells {
            w.serialize(c)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let cells = r.deserialize().collect::<std::result::Result<Vec<CellReport>, _>>()?;
        Ok(Self { cells })
    }
}

/// Serves `impressions_per_cell` impressions in every cell of `policy`.
pub fn simulate_traffic(world: &World, policy: &ServingPolicy, impressions_per_cell: u64, seed: u64) -> Result<TrafficReport> {
    if impressions_per_cell == 0 {
        return Err(Error::Config("impressions_per_cell must be at least 1".into()));
    }
    let mut cells = Vec::with_capacity(policy.cells.len());
    for (&(item_id, group_id), cands) in &policy.cells {
        if cands.is_empty() {
            return Err(Error::Contract(format!("cell ({item_id}, {group_id}) has no candidates")));
        }
        let item = world.item(item_id)?;
        let group = world.group(group_id)?;
        let mut rng = rng_for(seed, &[stream::SERVE, item_id as u64, group_id as u64]);
        let mut shown = vec![0u64; cands.len()];
        for _ in 0..impressions_per_cell {
            shown[pick(cands, policy.epsilon, &mut rng)] += 1;
        }
        let (mut clicks, mut expected) = (0u64, 0.0);
        for (j, (&n, c)) in shown.iter().zip(cands).enumerate() {
            if n == 0 {
                continue;
            }
            let ctr = world.true_ctr(group, item, &c.latent);
            expected += ctr * n as f64;
            let s = derive_seed(seed, &[stream::CLICKS, item_id as u64, group_id as u64, j as u64]);
            clicks += sample_clicks(ctr, n, s);
        }
        cells.push(CellReport {
            item_id,
            group_id,
            impressions: impressions_per_cell,
            clicks,
            achieved_ctr: expected / impressions_per_cell as f64,
            revenue_proxy: clicks as f64 * item.price_weight,
        });
    }
    Ok(TrafficReport { cells })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Uplift {
    pub ctr: f64,
    pub revenue: f64,
    pub oracle_ctr: f64,
}

/// Relative CTR, revenue and expected-CTR change against a baseline run.
pub fn uplift_vs_baseline(report: &TrafficReport, baseline: &TrafficReport) -> Result<Uplift> {
    let key = |r: &TrafficReport| r.cells.iter().map(|c| (c.item_id, c.group_id)).collect::<Vec<_>>();
    if key(report) != key(baseline) {
        return Err(Error::Contract("reports cover different cells".into()));
    }
    if baseline.clicks() == 0 || baseline.revenue() == 0.0 || baseline.oracle_ctr() == 0.0 {
        return Err(Error::UndefinedMetric("baseline has zero clicks or revenue".into()));
    }
    Ok(Uplift {
        ctr: report.ctr() / baseline.ctr() - 1.0,
        revenue: report.revenue() / baseline.revenue() - 1.0,
        oracle_ctr: report.oracle_ctr() / baseline.oracle_ctr() - 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{make_world, WorldConfig};

    fn cands(scores: &[f64]) -> Vec<Candidate> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| Candidate { creative_id: i, latent: vec![0.0; 32], score: s })
            .collect()
    }

    #[test]
    fn greedy_picks_argmax_with_id_tie_break() {
        let mut rng = rng_for(1, &[]);
        let c = cands(&[0.2, 0.9, 0.9, 0.1]);
        for _ in 0..50 {
            assert_eq!(pick(&c, 0.0, &mut rng), 1);
        }
        let scaled = cands(&[0.4, 1.8, 1.8, 0.2]);
        assert_eq!(pick(&scaled, 0.0, &mut rng), 1);
        let single = cands(&[0.3]);
        assert_eq!(pick(&single, 1.0, &mut rng), 0);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = rng_for(2, &[]);
        let c = cands(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let mut counts = [0u32; 5];
        for _ in 0..10_000 {
            counts[pick(&c, 1.0, &mut rng)] += 1;
        }
        for n in counts {
            let f = n as f64 / 10_000.0;
            assert!((0.17..=0.23).contains(&f), "{f}");
        }
    }

    #[test]
    fn baseline_degeneracy_and_determinism() {
        let world = make_world(&WorldConfig { n_items: 5, ..WorldConfig::default() }, 1).unwrap();
        let base = ServingPolicy::baseline(&world);
        let a = simulate_traffic(&world, &base, 200, 9).unwrap();
        assert_eq!(a, simulate_traffic(&world, &base, 200, 9).unwrap());
        let mut explicit = ServingPolicy::new(0.5).unwrap();
        for item in &world.items {
            for g in &world.user_groups {
                let c = Candidate { creative_id: 0, latent: item.base_latent.data().to_vec(), score: 3.0 };
                explicit.insert(item.id, g.id, vec![c]).unwrap();
            }
        }
        assert_eq!(simulate_traffic(&world, &explicit, 200, 9).unwrap(), a);
        let u = uplift_vs_baseline(&a, &a).unwrap();
        assert_eq!((u.ctr, u.revenue, u.oracle_ctr), (0.0, 0.0, 0.0));
        assert!(a.cells.iter().all(|c| c.clicks <= c.impressions));
    }

    #[test]
    fn zero_ctr_world_gets_no_clicks() {
        let mut world = make_world(&WorldConfig { n_items: 3, ..WorldConfig::default() }, 1).unwrap();
        for item in &mut world.items {
            item.popularity = -1e6;
        }
        let r = simulate_traffic(&world, &ServingPolicy::baseline(&world), 1000, 1).unwrap();
        // the oracle floors CTR at 1e-4, so 12k impressions see at most a handful
        assert!(r.clicks() <= 10);
    }

    #[test]
    fn doubled_clicks_double_ctr() {
        let cell = |clicks| CellReport {
            item_id: 0,
            group_id: 0,
            impressions: 100,
            clicks,
            achieved_ctr: 0.1,
            revenue_proxy: clicks as f64,
        };
        let base = TrafficReport { cells: vec![cell(10)] };
        let twice = TrafficReport { cells: vec![cell(20)] };
        let u = uplift_vs_baseline(&twice, &base).unwrap();
        assert_eq!(u.ctr, 1.0);
        assert_eq!(u.revenue, 1.0);
        let zero = TrafficReport { cells: vec![cell(0)] };
        assert!(uplift_vs_baseline(&twice, &zero).is_err());
    }

    #[test]
    fn greedy_oracle_beats_uniform() {
        let world = make_world(&WorldConfig { n_items: 10, ..WorldConfig::default() }, 4).unwrap();
        let mut rng = rng_for(3, &[]);
        let mut greedy = ServingPolicy::new(0.0).unwrap();
        let mut uniform = ServingPolicy::new(1.0).unwrap();
        for item in &world.items {
            for g in &world.user_groups {
                let c: Vec<Candidate> = (0..5)
                    .map(|j| {
                        let tokens = world.random_prompt(&mut rng);
                        let latent = world.natural_latent(item, &tokens, &mut rng);
                        Candidate { creative_id: j, score: world.true_ctr(g, item, &latent), latent }
                    })
                    .collect();
                greedy.insert(item.id, g.id, c.clone()).unwrap();
                uniform.insert(item.id, g.id, c).unwrap();
            }
        }
        let a = simulate_traffic(&world, &greedy, 500, 1).unwrap();
        let b = simulate_traffic(&world, &uniform, 500, 1).unwrap();
        assert!(a.oracle_ctr() > b.oracle_ctr());
        // sampled clicks agree in direction beyond 3 standard errors
        let n = a.impressions() as f64;
        let se = (a.ctr() * (1.0 - a.ctr()) / n + b.ctr() * (1.0 - b.ctr()) / n).sqrt();
        assert!(a.ctr() - b.ctr() > 3.0 * se);
    }

    #[test]
    fn csv_round_trip() {
        let world = make_world(&WorldConfig { n_items: 3, ..WorldConfig::default() }, 1).unwrap();
        let r = simulate_traffic(&world, &ServingPolicy::baseline(&world), 50, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traffic.csv");
        r.write_csv(&path).unwrap();
        assert_eq!(TrafficReport::read_csv(&path).unwrap(), r);
    }
}
