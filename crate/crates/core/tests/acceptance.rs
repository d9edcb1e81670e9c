//! Acceptance suite. Runs each criterion in order and prints one PASS/FAIL
//! line per criterion; exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::Rng;

use creative_cycle::config::RunConfig;
use creative_cycle::diffusion::{DenoiseExample, DiffusionModel};
use creative_cycle::io::{read_json, RunDir};
use creative_cycle::logs::{synth_creative_log, to_item_groups};
use creative_cycle::metrics::{ctr_uplift_k, mse_metric, EvalCreative, EvalItem};
use creative_cycle::numerics::{gradcheck, Binder, Graph, ParamSet, Tensor};
use creative_cycle::pipeline::{
    bootstrap, holdout_metrics, personalization_sweep, run_pipeline, serve_checkpoints, Phase, PipelineOutcome,
    RunReport,
};
use creative_cycle::prompt::{PromptConfig, PromptModel, PromptSample, Query};
use creative_cycle::reward::{impression_weights, RewardConfig, RewardModel};
use creative_cycle::rng::{rng_for, stream};
use creative_cycle::world::{make_world, World, WorldConfig};
use creative_cycle::{cli, Result};

type Outcome = std::result::Result<String, String>;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const GRAD_PROBES: usize = 12;
const GRAD_TOL: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-6;

fn small_world(seed: u64) -> World {
    make_world(&WorldConfig { n_items: 6, ..WorldConfig::default() }, seed).unwrap()
}

fn worst_probe(
    params: &ParamSet,
    loss: impl Fn(&ParamSet, &mut Graph) -> Result<creative_cycle::numerics::Var>,
    seed: u64,
) -> Result<(usize, f64)> {
    let mut g = Graph::new();
    let l = loss(params, &mut g)?;
    let grads = g.backward(l)?.into_params();
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(p, &mut g)?;
        Ok(g.value(l).item())
    };
    let probes = gradcheck::check(params, &grads, eval, GRAD_PROBES, 1e-5, &mut rng_for(seed, &[]))?;
    Ok((probes.len(), probes.iter().map(|p| p.rel_error(GRAD_FLOOR)).fold(0.0, f64::max)))
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let world = small_world(3);
    let mut parts = Vec::new();
    let mut ok = true;

    let mut diff = DiffusionModel::new(&world, &Default::default(), 5).unwrap();
    let mut rng = rng_for(6, &[]);
    let lora_b: Vec<String> = diff.params.names().filter(|n| n.ends_with(".b") && n.starts_with("lora.")).cloned().collect();
    for name in lora_b {
        let shape = diff.params.get(&name).unwrap().shape().to_vec();
        diff.params.insert(name, Tensor::randn(&shape, 0.1, &mut rng));
    }
    let batch: Vec<DenoiseExample> = (0..4)
        .map(|i| {
            let item = &world.items[i];
            let tokens = world.random_prompt(&mut rng);
            DenoiseExample { item_id: i, latent: world.natural_latent(item, &tokens, &mut rng), tokens }
        })
        .collect();
    let (n, e) = worst_probe(
        &diff.params,
        |p, g| diff.denoise_loss(g, &Binder::trainable(p), &world, &batch, &mut rng_for(7, &[])),
        8,
    )
    .unwrap();
    ok &= n >= 10 && e <= GRAD_TOL;
    parts.push(format!("denoise {n} probes max rel {e:.2e}"));

    let prompt = PromptModel::new(&world, &PromptConfig::default(), 2).unwrap();
    let samples: Vec<PromptSample> = (0..4)
        .map(|i| PromptSample {
            query: Query::for_generation(&world, i, Some(i % 4)).unwrap(),
            tokens: vec![i, i + 7, 30],
            label: (i % 2) as f64,
            soft_label: Some(0.2 + 0.15 * i as f64),
            weight: 1.0 + i as f64,
        })
        .collect();
    let (n, e) = worst_probe(&prompt.params, |p, g| prompt.loss(g, &Binder::trainable(p), &samples, 0.3), 9).unwrap();
    ok &= n >= 10 && e <= GRAD_TOL;
    parts.push(format!("prompt {n} probes max rel {e:.2e}"));

    let log = synth_creative_log(&world, &Default::default(), 4, stream::CREATIVE_LOG);
    let mut groups = to_item_groups(&log).unwrap();
    groups.truncate(3);
    let reward = RewardModel::new(world.latent_dim(), &RewardConfig::default(), 4).unwrap();
    let (n, e) = worst_probe(&reward.params, |p, g| reward.loss(g, &Binder::trainable(p), &groups, 0.1), 10).unwrap();
    ok &= n >= 10 && e <= GRAD_TOL;
    parts.push(format!("reward {n} probes max rel {e:.2e}"));

    let took = start.elapsed();
    ok &= took < Duration::from_secs(60);
    let msg = format!("{}; {:.1}s", parts.join(", "), took.as_secs_f64());
    if ok { Ok(msg) } else { Err(msg) }
}

fn metric_oracle() -> Outcome {
    // Values from an independent brute-force script over every ordering.
    let clicks = [[12, 40, 7, 25], [3, 9, 30, 14], [50, 11, 22, 8], [6, 6, 19, 33], [27, 2, 15, 41]];
    let imps = [[400, 500, 350, 620], [210, 330, 480, 260], [900, 300, 410, 270], [150, 240, 380, 520], [610, 120, 290, 700]];
    let scores = [
        [0.031, 0.082, 0.017, 0.044],
        [0.02, 0.025, 0.061, 0.058],
        [0.07, 0.033, 0.052, 0.029],
        [0.05, 0.01, 0.049, 0.063],
        [0.045, 0.03, 0.051, 0.06],
    ];
    let expected = [0.32407470288624785, 0.20902255639097733, 0.09341529004994231];
    let expected_mse = 4.085899972177423e-05;
    let log: Vec<EvalItem> = (0..5)
        .map(|i| EvalItem {
            item_id: i,
            creatives: (0..4)
                .map(|j| EvalCreative { creative_id: j, clicks: clicks[i][j], impressions: imps[i][j], score: scores[i][j] })
                .collect(),
        })
        .collect();
    let mut worst: f64 = 0.0;
    for (k, want) in (1..=3).zip(expected) {
        worst = worst.max((ctr_uplift_k(&log, k).unwrap() - want).abs());
    }
    worst = worst.max((mse_metric(&log).unwrap() - expected_mse).abs());

    let hand = vec![
        EvalItem {
            item_id: 1,
            creatives: vec![
                EvalCreative { creative_id: 0, clicks: 10, impressions: 100, score: 0.1 },
                EvalCreative { creative_id: 1, clicks: 30, impressions: 100, score: 0.9 },
            ],
        },
        EvalItem {
            item_id: 2,
            creatives: vec![
                EvalCreative { creative_id: 0, clicks: 5, impressions: 100, score: 0.5 },
                EvalCreative { creative_id: 1, clicks: 5, impressions: 100, score: 0.5 },
            ],
        },
    ];
    let hand_uplift = ctr_uplift_k(&hand, 1).unwrap();
    let msg = format!("max abs error {worst:.1e}, hand fixture uplift {hand_uplift:.12}");
    if worst <= 1e-10 && (hand_uplift - 0.4).abs() <= 1e-10 { Ok(msg) } else { Err(msg) }
}

fn inpainting_invariance() -> Outcome {
    let world = make_world(&WorldConfig::default(), 11).unwrap();
    let mut model = DiffusionModel::new(&world, &Default::default(), 11).unwrap();
    let mut rng = rng_for(12, &[]);
    let lora_b: Vec<String> = model.params.names().filter(|n| n.starts_with("lora.") && n.ends_with(".b")).cloned().collect();
    for name in lora_b {
        let shape = model.params.get(&name).unwrap().shape().to_vec();
        model.params.insert(name, Tensor::randn(&shape, 0.5, &mut rng));
    }
    let mut mismatched = 0;
    let mut checked = 0;
    for _ in 0..100 {
        let item = &world.items[rng.random_range(0..world.items.len())];
        let prompt = world.random_prompt(&mut rng);
        let steps = rng.random_range(1..=10);
        let c = model.generate(&world, item, &prompt, rng.random(), steps).unwrap();
        for (j, (&x, &b)) in c.latent.iter().zip(item.base_latent.data()).enumerate() {
            if item.is_product_dim(j) {
                checked += 1;
                if x.to_bits() != b.to_bits() {
                    mismatched += 1;
                }
            }
        }
    }
    let msg = format!("100 generations, {checked} product coordinates, {mismatched} differ");
    if mismatched == 0 { Ok(msg) } else { Err(msg) }
}

fn weight_normalization() -> Outcome {
    let world = make_world(&WorldConfig { n_items: 30, ..WorldConfig::default() }, 21).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut rng = rng_for(seed, &[]);
        let mut log = synth_creative_log(&world, &Default::default(), seed, stream::CREATIVE_LOG);
        for r in &mut log {
            r.impressions = rng.random_range(1..50_000);
            r.clicks = r.clicks.min(r.impressions);
        }
        let (per, item) = impression_weights(&to_item_groups(&log).unwrap()).unwrap();
        let total: f64 = per.iter().flatten().sum();
        let via_items: f64 = item.iter().sum();
        worst = worst.max((total - 1.0).abs()).max((via_items - 1.0).abs());
    }
    let msg = format!("5 random logs, max |sum - 1| = {worst:.1e}");
    if worst <= 1e-12 { Ok(msg) } else { Err(msg) }
}

fn reward_ranking() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let world = make_world(&cfg.world, cfg.seed).unwrap();
    let log = synth_creative_log(&world, &cfg.logs, cfg.seed, stream::CREATIVE_LOG);
    let mut reward = RewardModel::new(world.latent_dim(), &cfg.reward, cfg.seed).unwrap();
    reward.train(&to_item_groups(&log).unwrap(), cfg.seed).unwrap();
    let rows = holdout_metrics(&world, &reward, &cfg).unwrap();
    let get = |m: &str| rows.iter().find(|r| r.metric == m && r.k == Some(1)).unwrap().value;
    let (model, oracle) = (get("ctr_uplift"), get("oracle_ctr_uplift"));
    let took = start.elapsed();
    let msg = format!(
        "{} items x {} creatives; top-1 uplift {model:.4} vs oracle {oracle:.4} (ratio {:.3}); {:.1}s",
        world.items.len(),
        cfg.logs.creatives_per_item,
        model / oracle,
        took.as_secs_f64()
    );
    if oracle > 0.0 && model >= 0.8 * oracle && took < Duration::from_secs(120) { Ok(msg) } else { Err(msg) }
}

fn seed_runs() -> Vec<(u64, World, RunConfig, PipelineOutcome)> {
    SEEDS
        .iter()
        .map(|&seed| {
            let cfg = RunConfig { seed, ..RunConfig::default() };
            let world = make_world(&cfg.world, seed).unwrap();
            let models = bootstrap(&world, &cfg).unwrap();
            let out = run_pipeline(&world, models, &cfg.pipeline, seed).unwrap();
            (seed, world, cfg, out)
        })
        .collect()
}

fn self_cycling(runs: &[(u64, World, RunConfig, PipelineOutcome)]) -> Outcome {
    let mut reward_up = 0;
    let mut ctr_up = 0;
    let mut parts = Vec::new();
    for (seed, _, _, out) in runs {
        let r = &out.report.rounds;
        let (first, last) = (&r[0], &r[r.len() - 1]);
        if out.report.status != "ok" {
            return Err(format!("seed {seed} failed: {:?}", out.report.error));
        }
        reward_up += (last.mean_reward > first.mean_reward) as usize;
        ctr_up += (last.mean_retained_oracle_ctr > first.mean_retained_oracle_ctr) as usize;
        parts.push(format!(
            "s{seed} reward {:.3}->{:.3} ctr {:.3}->{:.3}",
            first.mean_reward, last.mean_reward, first.mean_retained_oracle_ctr, last.mean_retained_oracle_ctr
        ));
    }
    let msg = format!("reward up {reward_up}/5, retained oracle CTR up {ctr_up}/5; {}", parts.join("; "));
    if reward_up >= 4 && ctr_up == runs.len() { Ok(msg) } else { Err(msg) }
}

fn serving_direction(run: &(u64, World, RunConfig, PipelineOutcome)) -> Outcome {
    let (_, world, cfg, out) = run;
    let (summary, traffic) = serve_checkpoints(world, out, cfg).unwrap();
    let o = &summary.oracle_ctr;
    let total: u64 = traffic["final"].impressions();
    let msg = format!(
        "{total} impressions per policy; oracle CTR baseline {:.4} < initial {:.4} < final {:.4}",
        o["baseline"], o["initial"], o["final"]
    );
    if total >= 100_000 && o["baseline"] < o["initial"] && o["initial"] < o["final"] { Ok(msg) } else { Err(msg) }
}

fn personalization() -> Outcome {
    let cfg = RunConfig { world: WorldConfig::opposed_pair(), ..RunConfig::default() };
    let world = make_world(&cfg.world, cfg.seed).unwrap();
    let s = personalization_sweep(&world, &cfg).unwrap();
    let msg = format!(
        "oracle CTR individual {:.4} vs masked {:.4}; group prompt Jaccard {:.3}",
        s.individual_oracle_ctr, s.masked_oracle_ctr, s.group_prompt_jaccard
    );
    if s.individual_oracle_ctr > s.masked_oracle_ctr && s.group_prompt_jaccard < 0.5 { Ok(msg) } else { Err(msg) }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let root = dir.path().join(name);
        let code = cli::run(["ccycle", "--run-dir", root.to_str().unwrap(), "pipeline", "run"]);
        if code != 0 {
            return Err(format!("pipeline run exited with {code}"));
        }
        let rd = RunDir { root };
        outputs.push((std::fs::read(rd.metrics()).unwrap(), std::fs::read(rd.report()).unwrap()));
    }
    let report: RunReport = read_json(&RunDir { root: dir.path().join("a") }.report()).unwrap();
    let msg = format!(
        "metrics.csv {} bytes, report.json {} bytes, config hash {}",
        outputs[0].0.len(),
        outputs[0].1.len(),
        &report.config_hash[..12]
    );
    if outputs[0] == outputs[1] { Ok(msg) } else { Err(format!("outputs differ; {msg}")) }
}

fn alternation(runs: &[(u64, World, RunConfig, PipelineOutcome)]) -> Outcome {
    let mut rounds = 0;
    for (seed, _, _, out) in runs {
        let rep = &out.report;
        let (mut prompt, mut lora) = (rep.initial_prompt_digest.clone(), rep.initial_lora_digest.clone());
        for s in &rep.rounds {
            let dp = s.prompt_digest != prompt;
            let dl = s.lora_digest != lora;
            let expected = match s.phase {
                Phase::TrainPrompt => dp && !dl,
                Phase::TrainLora => dl && !dp,
            };
            if !expected || s.reward_digest != rep.reward_digest {
                return Err(format!("seed {seed} round {}: prompt changed {dp}, lora changed {dl}", s.round));
            }
            prompt.clone_from(&s.prompt_digest);
            lora.clone_from(&s.lora_digest);
            rounds += 1;
        }
        if out.models.reward.params.digest() != rep.reward_digest {
            return Err(format!("seed {seed}: reward parameters changed"));
        }
    }
    Ok(format!("{rounds} rounds over {} seeds, one of prompt/LoRA changed each round, reward fixed", runs.len()))
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e.downcast_ref::<String>().cloned().or(e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let secs = start.elapsed().as_secs_f64();
    match res {
        Ok(m) => {
            println!("criterion {n:>2} PASS {name}: {m} [{secs:.1}s]");
            true
        }
        Err(m) => {
            println!("criterion {n:>2} FAIL {name}: {m} [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= report(1, "gradient fidelity", gradient_fidelity);
    ok &= report(2, "metric oracle equivalence", metric_oracle);
    ok &= report(3, "inpainting invariance", inpainting_invariance);
    ok &= report(4, "weight normalization", weight_normalization);
    ok &= report(5, "reward ranking power", reward_ranking);
    let start = Instant::now();
    let runs = seed_runs();
    println!("pipeline runs for seeds {SEEDS:?} took {:.1}s", start.elapsed().as_secs_f64());
    ok &= report(6, "self-cycling trend", || self_cycling(&runs));
    ok &= report(7, "serving direction", || serving_direction(&runs[0]));
    ok &= report(8, "personalization direction", personalization);
    ok &= report(9, "determinism", determinism);
    ok &= report(10, "alternation contract", || alternation(&runs));
    if !ok {
        std::process::exit(1);
    }
}
