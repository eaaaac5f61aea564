//! Acceptance criteria. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion fails or exceeds its time budget.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use hdlink_core::corpus::{parse_corpus_str, write_corpus};
use hdlink_core::disambiguation::{disambiguate, Taxonomy};
use hdlink_core::encoder::{Embedding, EmbeddingMatrix, EncoderConfig, FeatureVector, LinearEncoder};
use hdlink_core::homonyms::{find_all_homonyms, find_homonyms};
use hdlink_core::kb::{parse_kb_str, EntityId, Kb, KbRecord, ParseOptions, SpeciesId};
use hdlink_core::pipeline::train_and_evaluate;
use hdlink_core::retrieval::{build_index, build_pool, NameIndex, Provenance};
use hdlink_core::string_match::{estimate_affected, similarity};
use hdlink_core::synthetic::{generate, SyntheticConfig};
use hdlink_core::training::{candidate_probabilities, loss_gradient, mml_loss, mml_loss_from_scores, Example, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn names(kb: &Kb) -> Vec<&str> {
    kb.records().iter().map(|r| r.name.as_str()).collect()
}

fn criterion_1() -> Outcome {
    let discharge = parse_kb_str(
        "1\t30685\t0\tPatient Discharge\t\n2\t30685\t1\tDischarge\t\n\
         3\t600083\t0\tBody Fluid Discharge\t\n4\t600083\t1\tDischarge\t\n",
        ParseOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let out = disambiguate(&discharge, None).map_err(|e| e.to_string())?;
    let finals = names(&out.kb);
    ensure!(finals.contains(&"Discharge (Patient Discharge)"), "discharge: {finals:?}");
    ensure!(finals.contains(&"Discharge (Body Fluid Discharge)"), "discharge: {finals:?}");

    let a2m = parse_kb_str(
        "1\t2\t0\tA2M\t9606\n2\t2\t1\tα2microglobulin\t9606\n3\t2\t1\talpha-2-macroglobulin\t9606\n\
         4\t280705\t0\tA2M\t9913\n5\t280705\t1\talpha-2-macroglobulin precursor\t9913\n\
         6\t3494\t0\tIGHA2\t9606\n7\t3494\t1\tA2M\t9606\n",
        ParseOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let tax = Taxonomy::from([
        (SpeciesId(9606), "human".to_string()),
        (SpeciesId(9913), "cattle".to_string()),
    ]);
    let out = disambiguate(&a2m, Some(&tax)).map_err(|e| e.to_string())?;
    let finals = names(&out.kb);
    ensure!(finals.contains(&"A2M (α2microglobulin, human)"), "A2M: {finals:?}");
    ensure!(finals.contains(&"A2M (IGHA2, human)"), "A2M: {finals:?}");

    let hydroxo = parse_kb_str(
        "1\t20316\t0\tHydroxocobalamin\t\n2\t20316\t1\tAquacobalamin\t\n\
         3\t3663\t0\tAquacobalamin\t\n4\t3663\t1\tHydroxocobalamin\t\n",
        ParseOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let out = disambiguate(&hydroxo, None).map_err(|e| e.to_string())?;
    ensure!(
        out.residual_homonyms.contains_key("Hydroxocobalamin (Aquacobalamin)"),
        "residuals: {:?}",
        out.residual_homonyms.keys().collect::<Vec<_>>()
    );
    Ok("3 fixtures byte-exact".into())
}

/// Random KB: distinct preferred names, one to four alternatives drawn from
/// a small shared pool and from other entities' preferred names. Mutual
/// preferred-name swaps are excluded; they are the known unresolvable case.
fn random_kb(rng: &mut ChaCha8Rng) -> Kb {
    let n = rng.gen_range(2..40);
    let prefs: Vec<String> = (0..n).map(|i| format!("pref{i}x{}", rng.gen_range(0..1000))).collect();
    let pool: Vec<String> = (0..rng.gen_range(4..12)).map(|i| format!("alt{i}")).collect();
    let mut alts: Vec<BTreeSet<String>> = vec![BTreeSet::new(); n];
    for e in 0..n {
        let m = rng.gen_range(1..5);
        for _ in 0..50 {
            if alts[e].len() >= m {
                break;
            }
            let name = if rng.gen_bool(0.3) {
                let f = rng.gen_range(0..n);
                if f == e || alts[f].contains(&prefs[e]) {
                    continue;
                }
                prefs[f].clone()
            } else {
                pool.choose(rng).unwrap().clone()
            };
            alts[e].insert(name);
        }
    }
    let mut records = Vec::new();
    for e in 0..n {
        let id = 100 + e as i64;
        records.push(KbRecord::new(records.len() as i64 + 1, id, 0, &prefs[e], None));
        for a in &alts[e] {
            records.push(KbRecord::new(records.len() as i64 + 1, id, 1, a, None));
        }
    }
    records.shuffle(rng);
    Kb::from_records(records, ParseOptions::default()).unwrap()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut homonyms = 0;
    for i in 0..100 {
        let kb = random_kb(&mut rng);
        homonyms += find_all_homonyms(&kb).len();
        let out = disambiguate(&kb, None).map_err(|e| e.to_string())?;
        ensure!(out.success_rate == 1.0, "KB {i}: success rate {}", out.success_rate);
        ensure!(find_homonyms(&out.kb).is_empty(), "KB {i}: homonyms remain");
        ensure!(find_all_homonyms(&out.kb).is_empty(), "KB {i}: homonyms remain");
    }
    Ok(format!("100 KBs, {homonyms} homonyms resolved"))
}

fn all_strings(alphabet: &[char], max_len: usize) -> Vec<Vec<char>> {
    let mut out = vec![vec![]];
    let mut layer = vec![vec![]];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|s: &Vec<char>| {
                alphabet.iter().map(move |c| {
                    let mut t = s.clone();
                    t.push(*c);
                    t
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

/// Edit distance by direct recursion over prefixes, memoised.
fn oracle_distance(a: &[char], b: &[char]) -> usize {
    fn go(a: &[char], b: &[char], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if let Some(d) = memo[i][j] {
            return d;
        }
        let d = if i == 0 {
            j
        } else if j == 0 {
            i
        } else {
            let sub = go(a, b, i - 1, j - 1, memo) + if a[i - 1] == b[j - 1] { 0 } else { 2 };
            let del = go(a, b, i - 1, j, memo) + 1;
            let ins = go(a, b, i, j - 1, memo) + 1;
            sub.min(del).min(ins)
        };
        memo[i][j] = Some(d);
        d
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, a.len(), b.len(), &mut memo)
}

fn criterion_3() -> Outcome {
    let strings = all_strings(&['a', 'b', 'c'], 6);
    let text: Vec<String> = strings.iter().map(|s| s.iter().collect()).collect();
    let mut pairs = 0usize;
    for (a, sa) in strings.iter().zip(&text) {
        for (b, sb) in strings.iter().zip(&text) {
            let total = a.len() + b.len();
            let want = if total == 0 {
                1.0
            } else {
                1.0 - oracle_distance(a, b) as f64 / total as f64
            };
            let got = similarity(sa, sb);
            ensure!((got - want).abs() <= 1e-12, "{sa:?} vs {sb:?}: {got} != {want}");
            pairs += 1;
        }
    }
    Ok(format!("{pairs} pairs"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut largest = 0;
    for inst in 0..200 {
        let n = if inst % 20 == 0 { 10_000 } else { rng.gen_range(0..3000) };
        let dim = rng.gen_range(1..12);
        let ties = inst % 2 == 0;
        let mut uids: Vec<i64> = (0..n as i64).map(|i| i * 7 + 3).collect();
        uids.shuffle(&mut rng);
        let records = uids
            .iter()
            .map(|&u| KbRecord::new(u, u, 0, &format!("n{u}"), None))
            .collect();
        let kb = Kb::from_records(records, ParseOptions::default()).unwrap();
        let value = |rng: &mut ChaCha8Rng| {
            if ties {
                rng.gen_range(-2..=2) as f64
            } else {
                rng.gen_range(-1.0..1.0)
            }
        };
        let data: Vec<f64> = (0..n * dim).map(|_| value(&mut rng)).collect();
        let index = build_index(EmbeddingMatrix { rows: n, cols: dim, data: data.clone() }, &kb)
            .map_err(|e| e.to_string())?;
        let q: Vec<f64> = (0..dim).map(|_| value(&mut rng)).collect();
        let k = rng.gen_range(1..=n.max(1) + 3);

        let mut oracle: Vec<(f64, i64)> = (0..n)
            .map(|i| {
                let mut s = 0.0;
                for d in 0..dim {
                    s += q[d] * data[i * dim + d];
                }
                (s, uids[i])
            })
            .collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        oracle.truncate(k);

        let got: Vec<(f64, i64)> = index
            .query_topk(&q, k)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|c| (c.score, c.uid))
            .collect();
        ensure!(got == oracle, "instance {inst} (n={n}, k={k}) differs from the oracle");
        largest = largest.max(n);
    }
    Ok(format!("200 instances, up to {largest} rows"))
}

fn random_fv(rng: &mut ChaCha8Rng, h: usize) -> FeatureVector {
    let n = rng.gen_range(1..6);
    FeatureVector::from_entries(h, (0..n).map(|_| (rng.gen_range(0..h as u32), rng.gen_range(-1.0..1.0))))
}

fn mean_loss(enc: &LinearEncoder, batch: &[Example]) -> f64 {
    let ls: Vec<f64> = batch.iter().filter_map(|e| mml_loss(enc, e).unwrap()).collect();
    ls.iter().sum::<f64>() / ls.len() as f64
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let k = rng.gen_range(1..64);
        let scores: Vec<f64> = (0..k).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let p = candidate_probabilities(&scores).map_err(|e| e.to_string())?;
        let sum: f64 = p.iter().sum();
        ensure!((sum - 1.0).abs() <= 1e-9, "probabilities sum to {sum}");
    }

    let mut positive = vec![false; 16];
    positive[0] = true;
    let l = mml_loss_from_scores(&[0.25; 16], &positive).map_err(|e| e.to_string())?.unwrap();
    ensure!((l - 16f64.ln()).abs() <= 1e-9, "uniform loss {l}");

    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for inst in 0..50u64 {
        let cfg = EncoderConfig {
            hash_dim: 64,
            proj_dim: 8,
            ngram_sizes: vec![2],
            context_window: 3,
            seed: inst,
        };
        let enc = LinearEncoder::new(cfg, std::iter::empty()).unwrap();
        let batch: Vec<Example> = (0..rng.gen_range(1..6))
            .map(|_| {
                let k = rng.gen_range(2..8);
                let mut positive: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.3)).collect();
                positive[rng.gen_range(0..k)] = true;
                Example {
                    mention: random_fv(&mut rng, 64),
                    candidates: (0..k).map(|_| random_fv(&mut rng, 64)).collect(),
                    positive,
                }
            })
            .collect();
        let grad = loss_gradient(&enc, &batch).map_err(|e| e.to_string())?;
        for (&j, g) in &grad.rows {
            for d in 0..8 {
                let base = enc.row(j).into_owned();
                let (mut plus, mut minus) = (enc.clone(), enc.clone());
                let mut r = base.clone();
                r[d] += eps;
                plus.set_row(j, r).unwrap();
                let mut r = base;
                r[d] -= eps;
                minus.set_row(j, r).unwrap();
                let fd = (mean_loss(&plus, &batch) - mean_loss(&minus, &batch)) / (2.0 * eps);
                let rel = (g[d] - fd).abs() / g[d].abs().max(fd.abs()).max(1e-7);
                worst = worst.max(rel);
            }
        }
    }
    ensure!(worst < 1e-4, "max relative gradient error {worst:e}");
    Ok(format!("max relative gradient error {worst:.1e}"))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 400;
    let dim = 8;
    let records = (0..n)
        .map(|i| KbRecord::new(i as i64 + 1, i as i64 / 4, (i % 4 != 0) as u32, &format!("name{i}"), None))
        .collect();
    let kb = Kb::from_records(records, ParseOptions::default()).unwrap();
    let data: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let index = build_index(EmbeddingMatrix { rows: n, cols: dim, data }, &kb).map_err(|e| e.to_string())?;
    let k = 32;
    let half = k / 2;
    let mut full = 0;
    let mut pools_seen = 0;
    for doc in 0..60 {
        let m = rng.gen_range(1..7);
        let mentions: Vec<Embedding> =
            (0..m).map(|_| Embedding((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect();
        let pools = build_pool(&index, &mentions, k).map_err(|e| e.to_string())?;
        let kb_halves: Vec<HashSet<i64>> = mentions
            .iter()
            .map(|e| index.query_topk(&e.0, half).unwrap().iter().map(|c| c.uid).collect())
            .collect();
        for (i, pool) in pools.iter().enumerate() {
            pools_seen += 1;
            let uids: HashSet<i64> = pool.candidates.iter().map(|c| c.uid).collect();
            ensure!(uids.len() == pool.len(), "doc {doc}: duplicate uid in pool {i}");
            ensure!(pool.len() == k, "doc {doc}: pool {i} has {} entries", pool.len());
            let available: HashSet<i64> = kb_halves
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, h)| h.iter().copied())
                .filter(|u| !kb_halves[i].contains(u))
                .collect();
            let shared = pool.count(Provenance::Shared);
            if available.len() >= half {
                ensure!(
                    pool.count(Provenance::Kb) == half && shared == half,
                    "doc {doc}: pool {i} split {}/{shared}",
                    pool.count(Provenance::Kb)
                );
                full += 1;
            } else {
                ensure!(shared == available.len(), "doc {doc}: shortfall not exhausted");
            }
            for c in pool.candidates.iter().filter(|c| c.provenance == Provenance::Shared) {
                ensure!(available.contains(&c.uid), "doc {doc}: shared uid {} has no neighbour source", c.uid);
            }
        }
    }
    ensure!(full > 0, "no document had enough material for a full split");

    // a neighbour's KB half holds another name of the same entity
    let kb = parse_kb_str(
        "1\t10\t0\tTourette syndrome\t\n2\t10\t1\tMotor vocal tic disorder\t\n3\t11\t0\tOther\t\n",
        ParseOptions::default(),
    )
    .unwrap();
    let rows = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    let index = NameIndex::new(EmbeddingMatrix::from_rows(3, rows.into_iter().map(Embedding).collect()), &kb, 1)
        .map_err(|e| e.to_string())?;
    let mentions = vec![Embedding(vec![1.0, 0.2, 0.1]), Embedding(vec![0.1, 1.0, 0.0])];
    let pools = build_pool(&index, &mentions, 2).map_err(|e| e.to_string())?;
    let shared: Vec<&str> = pools[0]
        .candidates
        .iter()
        .filter(|c| c.provenance == Provenance::Shared)
        .map(|c| c.name.as_str())
        .collect();
    ensure!(shared == ["Motor vocal tic disorder"], "shared positive missing: {shared:?}");
    ensure!(pools[0].candidates.iter().all(|c| c.identifier == EntityId(10)), "unexpected candidate");
    Ok(format!("{pools_seen} pools, {full} with a full 16/16 split"))
}

fn criterion_7() -> Outcome {
    let task = generate(&SyntheticConfig::default());
    let hd = disambiguate(&task.kb, None).map_err(|e| e.to_string())?;
    let enc = EncoderConfig::default();
    let cfg = TrainConfig::default();
    ensure!(cfg.epochs == 20, "default epochs {}", cfg.epochs);
    let with_hd = train_and_evaluate(&hd.kb, &task.train, &task.test, &enc, &cfg).map_err(|e| e.to_string())?;
    let raw = train_and_evaluate(&task.kb, &task.train, &task.test, &enc, &cfg).map_err(|e| e.to_string())?;
    let (a, b) = (with_hd.report.recall_at_1(), raw.report.recall_at_1());
    ensure!(a >= 0.90, "recall@1 with disambiguation {a}");
    ensure!(b < a, "raw KB {b} not below disambiguated {a}");
    Ok(format!(
        "recall@1 {a:.2} disambiguated vs {b:.2} raw ({} entities, {} names)",
        task.kb.entity_count(),
        task.kb.len()
    ))
}

fn criterion_8() -> Outcome {
    let kb = parse_kb_str(
        "1\t30685\t0\tPatient Discharge\t\n2\t30685\t1\tDischarge\t\n\
         3\t600083\t0\tBody Fluid Discharge\t\n4\t600083\t1\tDischarge\t\n5\t7\t0\tCold\t\n",
        ParseOptions::default(),
    )
    .unwrap();
    let docs = parse_corpus_str(concat!(
        r#"{"id":"a","text":"Discharge noted.","mentions":[{"start":0,"end":9,"gold":[30685]}]}"#, "\n",
        r#"{"id":"b","text":"Patient discharge noted.","mentions":[{"start":0,"end":17,"gold":[30685]}]}"#, "\n",
        r#"{"id":"c","text":"Cold and fluid discharge.","mentions":[{"start":0,"end":4,"gold":[7]},{"start":9,"end":24,"gold":[600083]}]}"#, "\n",
    ))
    .map_err(|e| e.to_string())?;
    let report = estimate_affected(&docs, &kb, &find_all_homonyms(&kb)).map_err(|e| e.to_string())?;
    ensure!(report.affected == 1 && report.total() == 4, "{} of {}", report.affected, report.total());
    ensure!(report.summary().contains("affected_percent: 25.00%"), "{}", report.summary());
    Ok("1 of 4 mentions, 25%".into())
}

fn write_task(dir: &Path) {
    let task = generate(&SyntheticConfig::default());
    task.kb.save(&dir.join("kb.tsv")).unwrap();
    write_corpus(&dir.join("train.jsonl"), &task.train).unwrap();
    write_corpus(&dir.join("test.jsonl"), &task.test).unwrap();
}

fn run_pipeline(inputs: &Path, out: &Path) -> i32 {
    let arg = |p: &Path| p.to_string_lossy().into_owned();
    hdlink_cli::dispatch([
        "hdlink".to_string(),
        "--seed".into(),
        "7".into(),
        "pipeline".into(),
        "--kb".into(),
        arg(&inputs.join("kb.tsv")),
        "--train".into(),
        arg(&inputs.join("train.jsonl")),
        "--test".into(),
        arg(&inputs.join("test.jsonl")),
        "--out-dir".into(),
        arg(out),
    ])
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_task(dir.path());
    let (a, b) = (dir.path().join("run-a"), dir.path().join("run-b"));
    ensure!(run_pipeline(dir.path(), &a) == 0, "first run failed");
    ensure!(run_pipeline(dir.path(), &b) == 0, "second run failed");
    let mut files: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| !n.ends_with("manifest.json"))
        .collect();
    files.sort();
    for required in ["kb.tsv", "model.bin", "predictions.tsv", "report.txt", "stats.txt"] {
        ensure!(files.iter().any(|f| f == required), "missing {required}");
    }
    for f in &files {
        let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        ensure!(x == y, "{f} differs between runs");
    }
    let ma = hdlink_cli::RunManifest::read(&a.join("pipeline.manifest.json")).map_err(|e| e.to_string())?;
    let mb = hdlink_cli::RunManifest::read(&b.join("pipeline.manifest.json")).map_err(|e| e.to_string())?;
    let digests = |m: &hdlink_cli::RunManifest| m.outputs.iter().map(|f| f.sha256.clone()).collect::<Vec<_>>();
    ensure!(digests(&ma) == digests(&mb), "manifest digests differ");
    ensure!(ma.verify().is_empty(), "manifest does not verify");
    Ok(format!("{} artifacts byte-identical", files.len()))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("disambiguation worked examples", criterion_1, Duration::from_secs(1)),
        ("success rate on random KBs", criterion_2, Duration::from_secs(30)),
        ("string matching oracle", criterion_3, Duration::from_secs(60)),
        ("retrieval exactness", criterion_4, Duration::from_secs(60)),
        ("loss and gradient", criterion_5, Duration::from_secs(60)),
        ("candidate sharing contract", criterion_6, Duration::from_secs(10)),
        ("end-to-end synthetic linking", criterion_7, Duration::from_secs(300)),
        ("affected-mention estimator", criterion_8, Duration::from_secs(1)),
        ("pipeline determinism", criterion_9, Duration::from_secs(600)),
    ];
    let mut failed = Vec::new();
    for (n, (name, check, budget)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let took = t.elapsed();
        let result = match result {
            Ok(detail) if took > *budget => Err(format!("{detail}; took {took:.2?}, budget {budget:?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS [{}] {name}: {detail} ({took:.2?})", n + 1),
            Err(why) => {
                println!("FAIL [{}] {name}: {why} ({took:.2?})", n + 1);
                failed.push(n + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
