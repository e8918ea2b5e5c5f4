//! Acceptance gate. Runs every criterion sequentially (so timings are not
//! disturbed by parallel tests), prints one PASS/FAIL line each, and exits
//! non-zero if any fails.

mod common;

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use padme::ad::AdRange;
use padme::compound::{ecfp, Fingerprint};
use padme::config::RunConfig;
use padme::dataset::{assemble_pairs, inverse_transform, transform, transform_values, RawRecord};
use padme::hyperopt::{gp_ei_search, random_search, Dimension, Domain, SearchSpace, Value};
use padme::io;
use padme::metrics::{concordance_index, weighted_mean, EvalReport};
use padme::model::{ModelConfig, PadmeModel, Variant};
use padme::pipeline::{epoch_cost, smoke};
use padme::protein::{psc, AMINO_ACIDS, PSC_LEN};
use padme::smiles::parse_smiles;
use padme::splits::{
    cluster_compounds, cold_cluster_split, cold_entity_split, hyperopt_holdout, warm_split, Axis, Entities,
};
use padme::synthetic::{random_proteins, random_smiles, SyntheticData};
use padme::tensor::{Adam, AdamConfig};
use padme::trainer::{predict, train_epoch, Featurized};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:.1?}, limit {limit:?}"))?;
    Ok(t)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let (cases, stats, failures) = common::gradient_suite(7, 2);
    ensure(cases >= 100, || format!("only {cases} cases"))?;
    ensure(failures.is_empty(), || failures.join("; "))?;
    let t = within(Duration::from_secs(120), start)?;
    Ok(format!(
        "{cases} cases, {} derivatives, max rel err {:.2e}, {t:.1?}",
        stats.checked, stats.max_rel
    ))
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let syn = SyntheticData::generate(random_smiles(16, 21), random_proteins(8, 22), 64, 0.1, 23);
    let pairs = assemble_pairs(&syn.records, 1).map_err(|e| e.to_string())?;
    let cfg = ModelConfig {
        variant: Variant::PadmeEcfp,
        hidden_layers: vec![256, 256],
        dropout_rates: vec![0.0],
        ..ModelConfig::default()
    };
    let data = Featurized::build(&pairs, &syn.protein_table(), &cfg).map_err(|e| e.to_string())?;
    let mut model = PadmeModel::new(cfg, vec![]).map_err(|e| e.to_string())?;
    let mut adam = Adam::new(AdamConfig::default(), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let y: Vec<f64> = pairs.iter().map(|p| p.values[0]).collect();
    let mut last = f64::NAN;
    for epoch in 1..=2000 {
        // full batch: batchnorm running statistics converge to the batch's
        train_epoch(&mut model, &mut adam, &data, &idx, 64, &mut rng).map_err(|e| e.to_string())?;
        if epoch % 10 == 0 {
            let p: Vec<f64> = predict(&model, &data, &idx)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|r| r[0])
                .collect();
            last = padme::metrics::rmse(&y, &p).map_err(|e| e.to_string())?;
            if last < 0.05 {
                let t = within(Duration::from_secs(180), start)?;
                return Ok(format!("train rmse {last:.4} at epoch {epoch}, {t:.1?}"));
            }
        }
    }
    Err(format!("train rmse {last:.4} after 2000 epochs"))
}

/// O(n²) enumeration over pairs with unequal true values.
fn brute_ci(y: &[f64], p: &[f64]) -> Option<f64> {
    let (mut conc, mut ties, mut total) = (0u64, 0u64, 0u64);
    for i in 0..y.len() {
        for j in i + 1..y.len() {
            if y[i] == y[j] {
                continue;
            }
            total += 1;
            let (hi, lo) = if y[i] > y[j] { (i, j) } else { (j, i) };
            if p[hi] > p[lo] {
                conc += 1;
            } else if p[hi] == p[lo] {
                ties += 1;
            }
        }
    }
    (total > 0).then(|| (conc as f64 + 0.5 * ties as f64) / total as f64)
}

fn ci() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut compared = 0;
    for _ in 0..500 {
        let n = rng.gen_range(2..=50);
        let levels = rng.gen_range(2..8);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 * 0.5).collect();
        match (brute_ci(&y, &p), concordance_index(&y, &p)) {
            (Some(b), Ok(f)) => {
                ensure(b == f, || format!("y={y:?} p={p:?}: brute {b} fast {f}"))?;
                compared += 1;
            }
            (None, Err(_)) => {}
            (b, f) => return Err(format!("definedness differs: brute {b:?} fast {f:?}")),
        }
    }
    let y: Vec<f64> = (0..40).map(|i| (i % 7) as f64).collect();
    let c = concordance_index(&y, &[3.3; 40]).map_err(|e| e.to_string())?;
    ensure(c == 0.5, || format!("constant predictor gives {c}"))?;
    Ok(format!(
        "{compared} instances identical to brute force, constant predictor 0.5"
    ))
}

fn applicability_domain() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut train: Vec<f64> = (0..200).map(|_| rng.gen_range(5.0..10.796)).collect();
    train.extend([5.0, 10.796]);
    let ad = AdRange::fit(&train).map_err(|e| e.to_string())?;
    ensure(
        (ad.lower - 4.131).abs() < 1e-3 && (ad.upper - 11.665).abs() < 1e-3,
        || format!("[{}, {}]", ad.lower, ad.upper),
    )?;
    let outside = (0..=1000)
        .map(|i| 4.558 + (10.123 - 4.558) * i as f64 / 1000.0)
        .filter(|&v| !ad.contains(v))
        .count();
    ensure(outside == 0, || {
        format!("{outside} predictions in [4.558, 10.123] outside")
    })?;
    Ok(format!(
        "[{:.4}, {:.4}], predictions in [4.558, 10.123] all inside",
        ad.lower, ad.upper
    ))
}

fn psc_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.gen_range(3..400);
        let seq: String = (0..len).map(|_| AMINO_ACIDS[rng.gen_range(0..20)] as char).collect();
        let d = psc(&seq, rng.gen_bool(0.5)).map_err(|e| e.to_string())?;
        ensure(d.values().len() == PSC_LEN && PSC_LEN == 8421, || {
            format!("length {}", d.values().len())
        })?;
        for block in [d.aac(), d.dc(), d.tc()] {
            worst = worst.max((block.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("block sum off by {worst:.2e}"))?;
    Ok(format!("length 8421, max block-sum deviation {worst:.1e}"))
}

fn transform_contract() -> Outcome {
    let raw = RawRecord {
        smiles: "C".into(),
        protein_id: "P".into(),
        task: 0,
        raw: 1_000_000.0,
    };
    let v = transform_values(vec![raw], Some((1_000_000.0, 1_000.0))).map_err(|e| e.to_string())?;
    ensure(v[0].value == 1.0, || format!("remapped value {}", v[0].value))?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let raw = 10f64.powf(rng.gen_range(-6.0..9.0));
        worst = worst.max((inverse_transform(transform(raw)) - raw).abs() / raw);
        let t = rng.gen_range(-5.0..10.0);
        worst = worst.max((transform(inverse_transform(t)) - t).abs() / t.abs().max(f64::MIN_POSITIVE));
    }
    ensure(worst < 1e-9, || format!("round-trip rel err {worst:.2e}"))?;
    Ok(format!("1e6 -> 1e3 -> 1.0 exactly, round-trip rel err {worst:.1e}"))
}

fn folds_of(keys: &[usize], folds: &[usize]) -> HashMap<usize, BTreeSet<usize>> {
    let mut m: HashMap<usize, BTreeSet<usize>> = HashMap::new();
    for (&k, &f) in keys.iter().zip(folds) {
        m.entry(k).or_default().insert(f);
    }
    m
}

/// Connected components of the `> threshold` Tanimoto graph by BFS,
/// labelled in order of first appearance.
fn brute_components(fps: &[Fingerprint], threshold: f64) -> Vec<usize> {
    let sets: Vec<BTreeSet<usize>> = fps.iter().map(|f| f.ones().collect()).collect();
    let sim = |a: usize, b: usize| {
        let inter = sets[a].intersection(&sets[b]).count() as f64;
        let union = sets[a].union(&sets[b]).count() as f64;
        if union == 0.0 {
            1.0
        } else {
            inter / union
        }
    };
    let n = fps.len();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        label[s] = next;
        let mut stack = vec![s];
        while let Some(a) = stack.pop() {
            for (b, l) in label.iter_mut().enumerate() {
                if *l == usize::MAX && sim(a, b) > threshold {
                    *l = next;
                    stack.push(b);
                }
            }
        }
        next += 1;
    }
    label
}

fn splits() -> Outcome {
    let syn = SyntheticData::sized(1200, 7);
    let pairs = assemble_pairs(&syn.records, 1).map_err(|e| e.to_string())?;
    let ent = Entities::from_pairs(&pairs);
    let k = 5;

    let warm = warm_split(&ent, k, 1).map_err(|e| e.to_string())?;
    for (axis, keys) in [("compound", &ent.compound), ("protein", &ent.protein)] {
        if let Some((e, f)) = folds_of(keys, &warm.folds).into_iter().find(|(_, f)| f.len() < 2) {
            return Err(format!("warm: {axis} {e} only in folds {f:?}"));
        }
    }

    for (axis, keys) in [(Axis::Drug, &ent.compound), (Axis::Target, &ent.protein)] {
        let fa = cold_entity_split(&ent, k, 1, axis).map_err(|e| e.to_string())?;
        for a in 0..k {
            for b in a + 1..k {
                let ea: BTreeSet<usize> = fa.test_indices(a).iter().map(|&i| keys[i]).collect();
                let eb: BTreeSet<usize> = fa.test_indices(b).iter().map(|&i| keys[i]).collect();
                ensure(ea.is_disjoint(&eb), || {
                    format!("{axis:?}: folds {a} and {b} share entities")
                })?;
            }
        }
    }

    // drugs, random compounds, and homologous series (alkyl chains of
    // length 6 to 8) so that multi-member clusters form
    let mut smiles = padme::synthetic::DRUGS
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>();
    let base = random_smiles(90, 8);
    for s in base.iter().take(40) {
        for chain in 6..9 {
            smiles.push(format!("{s}{}", "C".repeat(chain)));
        }
    }
    smiles.extend(base.into_iter().skip(40));
    let fps: Vec<Fingerprint> = smiles
        .iter()
        .map(|s| ecfp(&parse_smiles(s).unwrap(), 2, 2048).unwrap())
        .collect();
    ensure(fps.len() == 200, || format!("{} compounds", fps.len()))?;
    let clustering = cluster_compounds(&fps, 0.7);
    let brute = brute_components(&fps, 0.7);
    ensure(clustering.ids == brute, || {
        "clustering differs from brute-force components".into()
    })?;
    let n_clusters = clustering.n_clusters;
    let cluster_syn = SyntheticData::generate(smiles.clone(), random_proteins(12, 9), 1000, 0.1, 10);
    let cpairs = assemble_pairs(&cluster_syn.records, 1).map_err(|e| e.to_string())?;
    let cent = Entities::from_pairs(&cpairs);
    let cfps: Vec<Fingerprint> = cent
        .compound_names
        .iter()
        .map(|s| ecfp(&parse_smiles(s).unwrap(), 2, 2048).unwrap())
        .collect();
    let cc = cluster_compounds(&cfps, 0.7);
    let fa = cold_cluster_split(&cent, &cc, k, 1).map_err(|e| e.to_string())?;
    let keys: Vec<usize> = cent.compound.iter().map(|&c| cc.ids[c]).collect();
    if let Some((c, f)) = folds_of(&keys, &fa.folds).into_iter().find(|(_, f)| f.len() > 1) {
        return Err(format!("cluster {c} spans folds {f:?}"));
    }

    let h = hyperopt_holdout(1000, k, 1).map_err(|e| e.to_string())?;
    for f in 0..k {
        let (t, v) = (h.train_view(f).len() as i64, h.validation_view(f).len() as i64);
        ensure((t - 800).abs() <= 1 && (v - 180).abs() <= 1, || {
            format!("fold {f}: train {t}, validation {v}")
        })?;
    }
    let largest = (0..n_clusters)
        .map(|c| clustering.ids.iter().filter(|&&i| i == c).count())
        .max()
        .unwrap_or(0);
    ensure(largest > 1, || "clustering is all singletons".into())?;
    Ok(format!(
        "warm coverage, cold disjointness, {n_clusters} clusters (largest {largest}) match brute force, holdout views 800/180"
    ))
}

fn aggregation() -> Outcome {
    let (v, _) = weighted_mean(&[Some(1.0), Some(0.5)], &[2, 8]).map_err(|e| e.to_string())?;
    ensure(v == 0.6, || format!("weighted mean {v}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut y, mut p) = (Vec::new(), Vec::new());
    for _ in 0..61 {
        let n = rng.gen_range(3..30);
        y.push((0..n).map(|_| rng.gen_range(0.0..5.0)).collect::<Vec<f64>>());
        p.push((0..n).map(|_| rng.gen_range(0.0..5.0)).collect::<Vec<f64>>());
    }
    let report = EvalReport::evaluate(&y, &p).map_err(|e| e.to_string())?;
    let mut bytes = Vec::new();
    io::write_report(&mut bytes, &report, "").map_err(|e| e.to_string())?;
    let text = String::from_utf8(bytes).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    let weighted = rows.iter().filter(|l| l.starts_with("weighted,")).count();
    ensure(rows.len() == 62 && weighted == 1, || {
        format!("{} rows, {weighted} weighted", rows.len())
    })?;
    let num: f64 = y
        .iter()
        .zip(&p)
        .map(|(a, b)| a.len() as f64 * padme::metrics::rmse(a, b).unwrap())
        .sum();
    let den: f64 = y.iter().map(|a| a.len() as f64).sum();
    let got = report.rmse.value.unwrap();
    ensure((got - num / den).abs() < 1e-12, || {
        format!("weighted rmse {got} vs {}", num / den)
    })?;
    Ok("0.6 exactly; 61 tasks -> 61 rows + 1 weighted row".into())
}

fn scalability() -> Outcome {
    let model = ModelConfig {
        variant: Variant::PadmeEcfp,
        ..ModelConfig::default()
    };
    let train = padme::trainer::TrainConfig::default();
    let mut times = Vec::new();
    for n in [1000, 2000, 4000] {
        times.push(
            epoch_cost(n, &model, &train, 3)
                .map_err(|e| e.to_string())?
                .as_secs_f64(),
        );
    }
    let (r1, r2) = (times[1] / times[0], times[2] / times[1]);
    ensure(r1 <= 2.5 && r2 <= 2.5, || {
        format!("ratios {r1:.2}, {r2:.2} (times {times:?})")
    })?;
    Ok(format!(
        "epoch {:.2}s / {:.2}s / {:.2}s, ratios {r1:.2}, {r2:.2}",
        times[0], times[1], times[2]
    ))
}

fn hyperopt() -> Outcome {
    let start = Instant::now();
    let space = SearchSpace::new(vec![Dimension {
        name: "x".into(),
        domain: Domain::Continuous {
            lo: 0.0,
            hi: 1.0,
            log: false,
        },
    }])
    .map_err(|e| e.to_string())?;
    let x_of = |p: &Vec<Value>| p[0].as_f64().unwrap();
    let mut f = |p: &Vec<Value>| -> Result<f64, String> { Ok((x_of(p) - 0.3).powi(2)) };
    let mut worst_gap: f64 = 0.0;
    for seed in 0..10 {
        let gp = gp_ei_search(&space, &mut f, 30, 5, 1024, seed).map_err(|e| e.to_string())?;
        let again = gp_ei_search(&space, &mut f, 30, 5, 1024, seed).map_err(|e| e.to_string())?;
        ensure(gp == again, || format!("seed {seed}: not deterministic"))?;
        let rs = random_search(&space, &mut f, 30, seed).map_err(|e| e.to_string())?;
        let best = gp.best().unwrap();
        let x = x_of(&best.point);
        ensure((x - 0.3).abs() <= 0.05, || format!("seed {seed}: best x {x}"))?;
        let (g, r) = (best.objective.unwrap(), rs.best().unwrap().objective.unwrap());
        ensure(g <= r, || format!("seed {seed}: gp {g:.3e} worse than random {r:.3e}"))?;
        worst_gap = worst_gap.max((x - 0.3).abs());
    }
    let t = within(Duration::from_secs(60), start)?;
    Ok(format!(
        "10 seeds, worst |x-0.3| {worst_gap:.2e}, never worse than random, {t:.1?}"
    ))
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let cfg = RunConfig::load(&fixtures.join("config.toml")).map_err(|e| e.to_string())?;
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let report = smoke(&cfg, &fixtures, out.path());
    let failed: Vec<String> = report
        .steps
        .iter()
        .filter(|s| !s.ok)
        .map(|s| format!("{}: {}", s.name, s.detail))
        .collect();
    ensure(report.ok(), || failed.join("; "))?;
    let t = within(Duration::from_secs(300), start)?;
    Ok(format!(
        "{} stages ok, all four schemes audited, {t:.1?}",
        report.steps.len()
    ))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient checks", gradients),
        ("overfit", overfit),
        ("concordance index", ci),
        ("applicability domain", applicability_domain),
        ("protein descriptor", psc_contract),
        ("value transform", transform_contract),
        ("split contracts", splits),
        ("metric aggregation", aggregation),
        ("epoch scaling", scalability),
        ("hyperparameter search", hyperopt),
        ("end-to-end smoke", end_to_end),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        match f() {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
